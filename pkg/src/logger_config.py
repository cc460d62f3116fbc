# src/logger_config.py

import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path

LOG_FORMAT = "%(asctime)s - [%(levelname)s] - %(name)s (%(filename)s:%(lineno)d) - %(message)s"
LOG_FILE = "dcp_lab.log"


def setup_logging(log_dir: str | Path = ".", console_level: int = logging.WARNING) -> None:
    """
    Configures the root logger once per process.
    - Logs INFO and higher to a rotating file ('dcp_lab.log' in ``log_dir``).
    - Logs ``console_level`` and higher to stdout.
    """
    root_logger = logging.getLogger()
    # Repeated calls must not stack handlers.
    if root_logger.handlers:
        return

    log_format = logging.Formatter(LOG_FORMAT)
    log_path = Path(log_dir)
    log_path.mkdir(parents=True, exist_ok=True)

    file_handler = RotatingFileHandler(
        log_path / LOG_FILE, maxBytes=5 * 1024 * 1024, backupCount=3, encoding="utf-8"
    )
    file_handler.setLevel(logging.INFO)
    file_handler.setFormatter(log_format)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(console_level)
    console_handler.setFormatter(log_format)

    root_logger.setLevel(logging.DEBUG)
    root_logger.addHandler(file_handler)
    root_logger.addHandler(console_handler)

    logging.info("=" * 50)
    logging.info("Logging configured. dcp-lab session starting.")
    logging.info("=" * 50)
