"""Command line entry point.

    shadowforge <command> --config configs/desk.json [--set key=value ...] [--resume] [--seed N] [--out DIR]

Exit codes: 0 success, 1 error, 2 bad configuration, 3 query budget exhausted.
"""
import logging
import sys

import click

import settings
from errors import BudgetExceededError, BudgetExhaustedError, ConfigError, ShadowforgeError
from pipeline import COMMANDS, run

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_BUDGET = 3


def exit_code(error):
    """
    Maps an exception raised by a stage to the process exit code.

    :param error: Exception raised while running a command
    :return: Exit code
    """
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, (BudgetExhaustedError, BudgetExceededError)):
        return EXIT_BUDGET
    return EXIT_ERROR


def execute(command, config_path, overrides=(), resume=False, seed=None, out=None):
    try:
        run(command, config_path, overrides, resume=resume, seed=seed, out=out)
    except ShadowforgeError as e:
        logger.error("%s failed: %s", command, e)
        snapshot = getattr(e, "snapshot", None) or getattr(e, "ledger_dump", None)
        if snapshot:
            logger.error("Ledger: %s", snapshot)
        return exit_code(e)
    except Exception:
        logger.exception("%s failed", command)
        return EXIT_ERROR
    return EXIT_OK


def _common(fn):
    fn = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory override.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Run with this single seed.")(fn)
    fn = click.option("--resume", is_flag=True, help="Skip stages whose completion marker exists.")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config key.")(fn)
    fn = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Experiment JSON.")(fn)
    return fn


@click.group()
@click.option("--log-level", default=None, help="Logging level (default from SHADOWFORGE_LOG_LEVEL).")
def cli(log_level):
    """Data-free model extraction with text-to-image synthetic pools."""
    settings.configure_logging(log_level)


def _register(command):
    @cli.command(name=command, help=f"Run the '{command}' stage." if command != "pipeline" else "Run every stage in order.")
    @_common
    def _command(config_path, overrides, resume, seed, out):
        sys.exit(execute(command, config_path, overrides, resume, seed, out))

    return _command


for _name in COMMANDS:
    _register(_name)


def main():
    cli()


if __name__ == "__main__":
    main()
