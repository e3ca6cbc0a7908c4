"""
Centralized Logging Configuration
Provides consistent logging across the fuzzer modules.
"""

import logging
import os
from datetime import datetime
from pathlib import Path

LOG_FORMAT = '%(asctime)s | %(levelname)-8s | %(name)s | %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logger(name: str, log_level: str = None) -> logging.Logger:
    """
    Create and configure a logger instance.

    Args:
        name: Logger name (usually __name__)
        log_level: Optional log level override (DEBUG, INFO, WARNING, ERROR)

    Returns:
        Configured logger instance
    """
    level_str = log_level or os.getenv('LOG_LEVEL', 'INFO')
    level = getattr(logging, level_str.upper(), logging.INFO)

    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Avoid adding handlers multiple times
    if logger.handlers:
        return logger

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if os.getenv('LOG_TO_FILE', 'false').lower() == 'true':
        log_dir = Path(os.getenv('LOG_DIR', 'logs'))
        log_dir.mkdir(parents=True, exist_ok=True)

        log_file = log_dir / f"gfuzz_{datetime.now().strftime('%Y%m%d')}.log"
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def attach_campaign_log(logger: logging.Logger, out_dir: Path) -> logging.Handler:
    """
    Mirror a logger into ``<out_dir>/campaign.log``.

    Unattended runs keep their log next to the campaign results. The caller
    owns the returned handler and should remove it when the campaign ends.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / 'campaign.log', encoding='utf-8')
    handler.setLevel(getattr(logging, os.getenv('LOG_LEVEL', 'INFO').upper(), logging.INFO))
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    logger.addHandler(handler)
    return handler


# Logger for the command-line entry point
app_logger = setup_logger('gfuzz')
