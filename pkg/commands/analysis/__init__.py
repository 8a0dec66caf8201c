import click

analysis_cli = click.Group('analysis-commands', help='Correlation and importance analysis of results')

from . import handlers  # noqa: E402,F401
