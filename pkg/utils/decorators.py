"""
装饰器工具模块
请求体验证、错误转换和命令耗时日志
"""

import logging
import time
from functools import wraps

from flask import current_app, has_request_context, request

from .errors import MMRankError
from .response import error_response, exception_response

logger = logging.getLogger(__name__)


def validate_json(required_fields):
    """
    JSON数据验证装饰器
    验证请求体是否包含必需的字段；字段值为 0 也算提供

    Args:
        required_fields (list): 必需字段列表

    Usage:
        @validate_json(['image_id'])
        def retrieve_captions():
            pass
    """
    def decorator(f):
        @wraps(f)
        def decorated_function(*args, **kwargs):
            if not request.is_json:
                return error_response('请求必须包含JSON数据', code=400)

            data = request.get_json(silent=True)
            if not isinstance(data, dict) or not data:
                return error_response('请求体不能为空', code=400)

            missing_fields = [field for field in required_fields
                              if field not in data or data[field] is None or data[field] == '']
            if missing_fields:
                return error_response(f'缺少必需字段: {", ".join(missing_fields)}', code=400)

            return f(*args, **kwargs)
        return decorated_function
    return decorator


def handle_errors(f):
    """
    把视图中抛出的 MMRankError 转成统一的错误响应
    """
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except MMRankError as e:
            current_app.logger.warning(f'{request.path} 失败: {e.message}')
            return exception_response(e)
    return decorated_function


def log_activity(activity_type):
    """
    活动日志装饰器
    记录命令或接口的开始、结束和耗时

    Args:
        activity_type (str): 活动类型

    Usage:
        @log_activity('train-ranker')
        def cmd_train_ranker(args):
            pass
    """
    def decorator(f):
        @wraps(f)
        def decorated_function(*args, **kwargs):
            log = current_app.logger if has_request_context() else logger
            where = f' from {request.remote_addr}' if has_request_context() else ''
            log.info(f'Activity: {activity_type} 开始{where}')
            start = time.perf_counter()
            try:
                return f(*args, **kwargs)
            finally:
                log.info(f'Activity: {activity_type} 结束, 用时 {time.perf_counter() - start:.2f}s')
        return decorated_function
    return decorator
