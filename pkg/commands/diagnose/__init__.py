import click

diagnose_cli = click.Group('diagnose-commands', help='Pre-deployment shift diagnostics')

from . import handlers  # noqa: E402,F401
