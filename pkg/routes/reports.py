"""
评估报告路由
"""

from flask import Blueprint, current_app

from utils.decorators import handle_errors
from utils.response import success_response

reports_bp = Blueprint('reports', __name__)


@reports_bp.route('/summary', methods=['GET'])
def get_summary():
    """当前服务的模型、划分与数据规模"""
    return success_response(message='获取服务信息成功', data=current_app.extensions['mmrank'].summary())


@reports_bp.route('/evaluate', methods=['GET'])
@handle_errors
def get_evaluation():
    """
    服务划分上的检索评估
    返回 recall@(1, 5, 10)、中位排名和文本表格
    """
    report = current_app.extensions['mmrank'].report()
    return success_response(message='评估完成', data={'metrics': report.as_flat_dict(),
                                                     'table': report.format_table()})
