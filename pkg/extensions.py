from joblib import Parallel, delayed

# Threads, not processes: model factories are closures and fitted models share
# read-only numpy arrays.
PARALLEL_BACKEND = "threading"


def run_parallel(func, items, n_jobs=1):
    """Map func over items, preserving input order in the result list"""
    items = list(items)
    if n_jobs is None or n_jobs == 1 or len(items) < 2:
        return [func(item) for item in items]
    return Parallel(n_jobs=n_jobs, backend=PARALLEL_BACKEND)(delayed(func)(item) for item in items)
