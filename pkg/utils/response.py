"""
响应工具模块
统一的 API 响应格式 {code, message, success, data}
"""

import numpy as np
from flask import jsonify


def to_jsonable(value):
    """把 numpy 标量和数组递归转换成 JSON 可以表示的 Python 对象"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


def _respond(success, message, data, code):
    body = {'code': code, 'message': message, 'success': success}
    if data is not None:
        body['data'] = to_jsonable(data)
    return jsonify(body), code


def success_response(message='操作成功', data=None, code=200):
    """
    成功响应

    Args:
        message (str): 响应消息
        data (dict): 检索结果、评估指标等
        code (int): HTTP状态码

    Returns:
        tuple: (Response, 状态码)
    """
    return _respond(True, message, data, code)


def error_response(message='操作失败', data=None, code=400):
    return _respond(False, message, data, code)


def exception_response(exc):
    """
    把 MMRankError 转成错误响应，状态码取异常自带的 code，data 为 {error, message}
    """
    return error_response(message=exc.message, data=exc.to_dict(), code=exc.code)
