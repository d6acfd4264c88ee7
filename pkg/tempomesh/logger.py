import sys
from enum import Enum
from pathlib import Path
from typing import Optional

from loguru import logger

from tempomesh.config import LoggingConfig


class LogLevel(str, Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


# Constants
CONSOLE_LOG_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | "
    "<level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan> - "
    "<level>{message}</level>"
)

FILE_LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {name}:{function}:{line} - {message}"


def get_logger(
    log_file_path: Optional[Path],
    enable_console_logging: bool = True,
    enable_file_logging: bool = True,
    console_log_level: str = LogLevel.WARNING,
    file_log_level: str = LogLevel.INFO,
    file_mode: str = "a",
    rotation: str = "50 MB",
    retention: str = "10 days",
    **kwargs,
):
    """
    Configures loguru with a console sink and/or a file sink for one run.

    Args:
        log_file_path: Path of the run log file (usually inside the output directory)
        enable_console_logging: Enable logging to stderr
        enable_file_logging: Enable logging to file
        console_log_level: Console logging level (DEBUG|INFO|WARNING|ERROR|CRITICAL)
        file_log_level: File logging level (DEBUG|INFO|WARNING|ERROR|CRITICAL)
        file_mode: File open mode ('a' for append, 'w' for write)
        rotation: When to rotate the log file (e.g., "50 MB", "1 day")
        retention: How long to keep log files (e.g., "10 days")
        **kwargs: Ignored extra settings, so a whole settings section can be splatted

    Returns:
        The configured loguru logger, or None if no sink is enabled

    Raises:
        ValueError: If log levels or file mode are invalid, or the log path is a directory
    """
    if not isinstance(console_log_level, LogLevel):
        console_log_level = LogLevel(str(console_log_level).upper())
    if not isinstance(file_log_level, LogLevel):
        file_log_level = LogLevel(str(file_log_level).upper())

    if file_mode not in {"a", "w"}:
        raise ValueError("file_mode must be 'a' or 'w'")

    if enable_file_logging:
        if log_file_path is None:
            raise ValueError("log_file_path is required when file logging is enabled")
        log_file_path = Path(log_file_path)
        if log_file_path.is_dir():
            raise ValueError("log_file_path must be a file path, not a directory")
        log_file_path = log_file_path.resolve()

    logger.remove()

    if not (enable_console_logging or enable_file_logging):
        return None

    if enable_console_logging:
        logger.add(
            sys.stderr,
            level=console_log_level.value,
            format=CONSOLE_LOG_FORMAT,
            backtrace=True,
            diagnose=False,
        )

    if enable_file_logging:
        try:
            log_file_path.parent.mkdir(parents=True, exist_ok=True)
            logger.add(
                log_file_path,
                level=file_log_level.value,
                format=FILE_LOG_FORMAT,
                mode=file_mode,
                rotation=rotation,
                retention=retention,
                backtrace=True,
                diagnose=False,
            )
        except Exception as e:
            logger.error(f"Failed to setup file logging: {e}")

    return logger


def configure_run_logging(settings: LoggingConfig, out_dir: Optional[Path]):
    """Point the file sink at ``out_dir`` and apply the logging section."""
    file_enabled = settings.enable_file_logging and out_dir is not None
    return get_logger(
        log_file_path=Path(out_dir) / settings.log_file_name if out_dir is not None else None,
        enable_console_logging=settings.enable_console_logging,
        enable_file_logging=file_enabled,
        console_log_level=settings.console_log_level,
        file_log_level=settings.file_log_level,
        file_mode=settings.file_mode,
        rotation=settings.log_rotation,
        retention=settings.log_retention,
    )
