import click

experiments_cli = click.Group('experiment-commands', help='Seed ensembles, retraining, placebo and ACI runs')

from . import handlers  # noqa: E402,F401
