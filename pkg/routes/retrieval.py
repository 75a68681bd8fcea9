"""
检索相关路由
给图像检索描述、给描述检索图像
"""

from flask import Blueprint, current_app, request

from utils.decorators import handle_errors, validate_json
from utils.response import success_response

# 创建检索蓝图
retrieval_bp = Blueprint('retrieval', __name__)


def registry():
    return current_app.extensions['mmrank']


@retrieval_bp.route('/captions', methods=['POST'])
@validate_json(['image_id'])
@handle_errors
def retrieve_captions():
    """
    图像检索描述接口

    请求体:
    - image_id: 图像编号
    - top_k: 返回条数（默认10）
    """
    data = request.get_json()
    results = registry().captions_for_image(str(data['image_id']), data.get('top_k', 10))
    return success_response(message='检索成功', data={'image_id': data['image_id'], 'results': results})


@retrieval_bp.route('/images', methods=['POST'])
@validate_json(['caption_id'])
@handle_errors
def retrieve_images():
    """
    描述检索图像接口

    请求体:
    - caption_id: 描述编号
    - top_k: 返回条数（默认10）
    """
    data = request.get_json()
    results = registry().images_for_caption(str(data['caption_id']), data.get('top_k', 10))
    return success_response(message='检索成功', data={'caption_id': data['caption_id'], 'results': results})
