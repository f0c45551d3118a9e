import logging
import sys
from typing import Optional

from pythonjsonlogger import jsonlogger

from ddlod.config import settings

TEXT_FORMAT = "%(asctime)s - ddlod - %(name)s.%(funcName)s - %(levelname)s - %(message)s"
JSON_FIELDS = "%(asctime)s %(name)s %(module)s %(funcName)s %(lineno)d %(levelname)s %(message)s"


def make_formatter(debug: bool) -> logging.Formatter:
    """Plain text for debugging, JSON records tagged app=ddlod otherwise"""
    if debug:
        return logging.Formatter(TEXT_FORMAT)
    return jsonlogger.JsonFormatter(
        JSON_FIELDS,
        rename_fields={"levelname": "level", "name": "logger"},
        static_fields={"app": "ddlod"},
    )


def get_logger(name: str, level: Optional[str] = None) -> logging.Logger:
    """Get a configured logger instance"""
    logger = logging.getLogger(name)

    if not logger.handlers:
        log_level = level or settings.log_level
        logger.setLevel(getattr(logging, log_level.upper()))

        # stderr keeps stdout clean for tables printed by the CLI
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(make_formatter(settings.debug))
        logger.addHandler(handler)
        logger.propagate = False

    return logger


def set_level(level: str):
    """Change the level of every ddlod logger created so far"""
    for name, logger in logging.Logger.manager.loggerDict.items():
        if name.startswith("ddlod") and isinstance(logger, logging.Logger):
            logger.setLevel(getattr(logging, level.upper()))
