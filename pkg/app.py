import logging
import os

import click
from dotenv import load_dotenv

from commands.analysis import analysis_cli
from commands.diagnose import diagnose_cli
from commands.experiments import experiments_cli
from config import config

# Load environment variables
load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


class TruncateArraysFilter(logging.Filter):
    """Filter to keep dumped arrays and tables from flooding the logs"""

    def __init__(self, max_length=2000):
        super().__init__()
        self.max_length = max_length

    def filter(self, record):
        message = record.getMessage()
        if len(message) > self.max_length:
            record.msg = message[:self.max_length] + '...[truncated]'
            record.args = None
        return True


def configure_logging(cfg):
    """Log to stderr, plus LOG_FILE when configured"""
    handlers = [logging.StreamHandler()]
    if cfg.LOG_FILE:
        handlers.append(logging.FileHandler(cfg.LOG_FILE))
    logging.basicConfig(level=cfg.LOG_LEVEL, format=LOG_FORMAT, handlers=handlers, force=True)
    for handler in logging.root.handlers:
        handler.addFilter(TruncateArraysFilter(cfg.LOG_MAX_MESSAGE))
    # joblib worker chatter
    logging.getLogger('joblib').setLevel(logging.WARNING)


def create_cli(config_name='default'):
    """Build the shiftcp command group for the named configuration"""
    cfg = config[config_name]

    @click.group(help='Conformal coverage under distribution shift: diagnostics and experiments')
    @click.pass_context
    def cli(ctx):
        configure_logging(cfg)
        ctx.ensure_object(dict)
        ctx.obj['config'] = cfg

    for group in (diagnose_cli, experiments_cli, analysis_cli):
        for name, command in group.commands.items():
            cli.add_command(command, name)
    return cli


cli = create_cli(os.getenv('SHIFTCP_ENV') or 'default')

if __name__ == '__main__':
    cli()
