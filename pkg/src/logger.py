import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional

from .config import Config


def setup_logger(name: str = "reconuq", level: Optional[str] = None) -> logging.Logger:
    logger = logging.getLogger(name)
    # an unknown name falls back to INFO; Config.validate() reports it
    numeric = logging.getLevelName((level or Config.LOG_LEVEL).upper())
    logger.setLevel(numeric if isinstance(numeric, int) else logging.INFO)

    if logger.handlers:
        return logger

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    logs_dir = Path(Config.LOG_DIR)
    logs_dir.mkdir(parents=True, exist_ok=True)

    file_handler = logging.FileHandler(
        logs_dir / f"reconuq_{datetime.now().strftime('%Y%m%d')}.log"
    )
    file_handler.setFormatter(formatter)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)

    logger.addHandler(file_handler)
    logger.addHandler(console_handler)

    return logger
