"""
问答事实选择路由
"""

from flask import Blueprint, current_app, request

from utils.decorators import handle_errors, log_activity, validate_json
from utils.response import success_response

qa_bp = Blueprint('qa', __name__)


@qa_bp.route('/select', methods=['POST'])
@validate_json(['image_id'])
@handle_errors
@log_activity('qa-select')
def select_qa():
    """
    按互信息为一张图像选择最有信息量的问答事实

    请求体:
    - image_id: 图像编号
    - n_samples: dropout 采样次数（默认取配置 MI_SAMPLES）
    - top: 返回条数（默认10）
    - seed: 随机种子（默认0）
    - marginal_mode: from_joint 或 point_estimate（也接受 paper_literal）
    """
    data = request.get_json()
    results = current_app.extensions['mmrank'].select_qa(
        str(data['image_id']),
        n_samples=data.get('n_samples', current_app.config['MI_SAMPLES']),
        top=data.get('top', 10),
        seed=data.get('seed', 0),
        marginal_mode=data.get('marginal_mode', 'from_joint'),
    )
    return success_response(message='问答事实选择完成', data={'image_id': data['image_id'], 'results': results})
