"""
工具函数模块
"""
from .logger import add_file_sink, get_logger, remove_sink

__all__ = [
    "get_logger",
    "add_file_sink",
    "remove_sink",
]
