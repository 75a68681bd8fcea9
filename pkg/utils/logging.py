"""
日志配置
"""

import logging
import sys

LOG_FORMAT = '%(asctime)s %(levelname)s [%(name)s] %(message)s'


def setup_logging(level='INFO', stream=None):
    """
    给根 logger 配置一个输出到 stderr 的处理器，重复调用只更新级别

    Args:
        level (str | int): 日志级别
        stream: 输出流，默认 sys.stderr
    """
    root = logging.getLogger()
    root.setLevel(level.upper() if isinstance(level, str) else level)
    if not any(getattr(h, '_mmrank', False) for h in root.handlers):
        handler = logging.StreamHandler(stream or sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._mmrank = True
        root.addHandler(handler)
    # numba 编译日志过于冗长
    logging.getLogger('numba').setLevel(logging.WARNING)
    return root
