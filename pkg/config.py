from dotenv import load_dotenv
import os


def load_config(prop_name, default=None):
    load_dotenv()
    value = os.getenv(prop_name)
    if value is None or value == "":
        return default
    return value


def load_int(prop_name, default: int) -> int:
    """Целочисленный параметр окружения"""
    return int(load_config(prop_name, default))
