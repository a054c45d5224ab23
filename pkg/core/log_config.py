import sys

from loguru import logger

from core.config import get_settings


def setup_logging(level: str | None = None) -> None:
    """
    Install the stderr sink used by the CLI and the results API.
    Args:
        level (str | None): Overrides ``Settings.log_level`` when given.
    """
    settings = get_settings()
    logger.remove()
    logger.add(
        sys.stderr,
        level=(level or settings.log_level).upper(),
        serialize=settings.log_json,
        backtrace=False,
        diagnose=False,
    )
