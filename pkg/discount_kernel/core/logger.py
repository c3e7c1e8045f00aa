import logging
from pathlib import Path
from typing import Optional

LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def setup_logging(log_file: Optional[Path] = None, level: str = "info") -> logging.Logger:
    """Configure logging with console and optional file handlers"""
    logger = logging.getLogger("discount_kernel")
    log_level = LEVELS.get(level, logging.INFO)
    logger.setLevel(log_level)

    # Avoid adding duplicate handlers if they already exist
    if logger.handlers:
        return logger

    formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    console_handler = logging.StreamHandler()
    console_handler.setLevel(log_level)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file is not None:
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(log_level)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger
