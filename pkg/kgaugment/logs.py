"""Logging setup for command-line runs (file + console, same format)."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def setup_logging(log_file: str | Path | None = None, verbose: bool = False) -> None:
    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


def log_banner(logger: logging.Logger, title: str, lines: list[str]) -> None:
    """Framed summary block at the end of a run."""
    logger.info("=" * 60)
    logger.info(title)
    logger.info("=" * 60)
    for line in lines:
        logger.info(line)
    logger.info("=" * 60)
