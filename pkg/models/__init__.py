"""
模型包初始化文件
导入所有模型类，注册到 MODEL_REGISTRY 供检查点按类型重建
"""

from .base import MODEL_REGISTRY, BaseModel
from .grounding import GroundingProjection, QABank, build_qa_bank, compute_u
from .informativeness import FusionJointPredictor, mutual_information, select_informative_qa
from .layers import DropoutPlan, LinearLayer
from .ranking import AgnosticEmbedder, RankingData, RepFusionModel, ScoreFusionModel
from .vqa import QAPair, VqaCaptionHead, VqaHead

__all__ = [
    'MODEL_REGISTRY',
    'BaseModel',
    'LinearLayer',
    'DropoutPlan',
    'QAPair',
    'VqaHead',
    'VqaCaptionHead',
    'QABank',
    'build_qa_bank',
    'compute_u',
    'GroundingProjection',
    'RankingData',
    'AgnosticEmbedder',
    'ScoreFusionModel',
    'RepFusionModel',
    'FusionJointPredictor',
    'mutual_information',
    'select_informative_qa',
]
