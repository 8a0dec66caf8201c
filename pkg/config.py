import os
from dataclasses import dataclass, field
from typing import List

from dotenv import load_dotenv

load_dotenv()


def _env_int(name, default):
    value = os.environ.get(name)
    return int(value) if value not in (None, '') else default


def _env_float(name, default):
    value = os.environ.get(name)
    return float(value) if value not in (None, '') else default


def parse_seed_range(text):
    """Parse '42..91' (inclusive) or '1,2,5' into a list of ints"""
    text = str(text).strip()
    if '..' in text:
        start, end = text.split('..', 1)
        start, end = int(start), int(end)
        if end < start:
            raise ValueError(f"Seed range {text!r} is empty")
        return list(range(start, end + 1))
    return [int(part) for part in text.split(',') if part.strip()]


class Config:
    """Base configuration class"""
    LOG_LEVEL = os.environ.get('SHIFTCP_LOG_LEVEL') or 'INFO'
    LOG_FILE = os.environ.get('SHIFTCP_LOG_FILE')  # no file handler when unset
    LOG_MAX_MESSAGE = _env_int('SHIFTCP_LOG_MAX_MESSAGE', 2000)

    # Parallel seed trials (thread backend)
    N_JOBS = _env_int('SHIFTCP_N_JOBS', 1)

    # Added to every seed of a resolved range; used by test harnesses
    SEED_OFFSET = _env_int('SHIFTCP_SEED_OFFSET', 0)

    # Experiment defaults
    DEFAULT_ALPHA = _env_float('SHIFTCP_DEFAULT_ALPHA', 0.1)
    DEFAULT_SEEDS = os.environ.get('SHIFTCP_DEFAULT_SEEDS') or '42..91'
    DEFAULT_GAMMAS = (0.001, 0.01, 0.05)
    BACKGROUND_SIZE = _env_int('SHIFTCP_BACKGROUND_SIZE', 100)
    PERMUTATION_REPEATS = _env_int('SHIFTCP_PERMUTATION_REPEATS', 5)

    # Statistics battery
    N_BOOT = _env_int('SHIFTCP_N_BOOT', 10000)
    N_PERM = _env_int('SHIFTCP_N_PERM', 10000)

    # Reference learner
    N_TREES = _env_int('SHIFTCP_N_TREES', 10)
    MAX_DEPTH = _env_int('SHIFTCP_MAX_DEPTH', 32)
    ROW_SUBSAMPLE = _env_float('SHIFTCP_ROW_SUBSAMPLE', 0.8)

    @classmethod
    def seeds(cls, text=None):
        """Resolve a seed range, applying the seed override offset"""
        return [seed + cls.SEED_OFFSET for seed in parse_seed_range(text or cls.DEFAULT_SEEDS)]


class DevelopmentConfig(Config):
    """Development configuration"""
    LOG_LEVEL = os.environ.get('SHIFTCP_LOG_LEVEL') or 'DEBUG'


class ProductionConfig(Config):
    """Production configuration"""
    LOG_LEVEL = os.environ.get('SHIFTCP_LOG_LEVEL') or 'WARNING'


class TestingConfig(Config):
    """Testing configuration"""
    N_JOBS = 1
    N_BOOT = 2000
    N_PERM = 2000
    LOG_FILE = None
    LOG_LEVEL = 'WARNING'


config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': Config
}


@dataclass
class RunConfig:
    """Fully resolved settings of one command invocation, echoed in every report"""
    alpha: float
    seeds: List[int]
    n_jobs: int
    n_trees: int
    max_depth: int
    row_subsample: float
    background_size: int
    permutation_repeats: int
    n_boot: int
    n_perm: int
    gammas: List[float] = field(default_factory=list)


def resolve_run_config(cfg, file_values=None, overrides=None):
    """CLI flags > --config file > Config defaults"""
    values = {
        'alpha': cfg.DEFAULT_ALPHA,
        'seeds': cfg.DEFAULT_SEEDS,
        'n_jobs': cfg.N_JOBS,
        'n_trees': cfg.N_TREES,
        'max_depth': cfg.MAX_DEPTH,
        'row_subsample': cfg.ROW_SUBSAMPLE,
        'background_size': cfg.BACKGROUND_SIZE,
        'permutation_repeats': cfg.PERMUTATION_REPEATS,
        'n_boot': cfg.N_BOOT,
        'n_perm': cfg.N_PERM,
        'gammas': list(cfg.DEFAULT_GAMMAS),
    }
    for layer in (file_values or {}, overrides or {}):
        values.update({key: value for key, value in layer.items() if value is not None})
    values['seeds'] = cfg.seeds(values['seeds'])
    return RunConfig(**values)
