"""
工具包初始化文件
"""

from .decorators import handle_errors, log_activity, validate_json
from .errors import MMRankError
from .response import error_response, exception_response, success_response

__all__ = [
    'validate_json',
    'handle_errors',
    'log_activity',
    'success_response',
    'error_response',
    'exception_response',
    'MMRankError',
]
