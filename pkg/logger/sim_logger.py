import logging
from logging.handlers import RotatingFileHandler
import os

from config import load_config

# Директория для логов симулятора
log_dir = load_config("FEDCO_LOG_DIR", "./logs")
if not os.path.exists(log_dir):
    os.makedirs(log_dir, exist_ok=True)

logger = logging.getLogger("fedco")
logger.setLevel(load_config("FEDCO_LOG_LEVEL", "INFO").upper())

# Обработчики добавляются один раз
if not logger.handlers:
    log_handler = RotatingFileHandler(
        os.path.join(log_dir, "fedco.log"),
        maxBytes=5 * 1024 * 1024,  # 5 MB
        backupCount=2,
        encoding='utf-8'
    )

    formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S"
    )
    log_handler.setFormatter(formatter)
    logger.addHandler(log_handler)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

logger.propagate = True


def get_logger(name: str = None) -> logging.Logger:
    """
    Функция для получения настроенного логгера
    Args:
        name: Имя дочернего логгера (например, "algorithms")
    Returns:
        Настроенный логгер
    """
    if name:
        return logger.getChild(name)
    return logger


__all__ = ['logger', 'get_logger']
