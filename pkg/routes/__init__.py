"""
路由包初始化文件
"""

from .qa import qa_bp
from .reports import reports_bp
from .retrieval import retrieval_bp

__all__ = ['retrieval_bp', 'qa_bp', 'reports_bp']
