"""
应用配置文件
包含模型维度、训练超参数、数据目录等配置
"""

import os

from dotenv import load_dotenv

# 从 .env 文件加载环境变量（文件不存在时忽略）
load_dotenv()


class Config:
    """
    基础配置类
    桌面规模的默认值，所有环境配置都从这里继承
    """

    # 数据目录，命令行未指定 --data 时使用
    DATA_DIR = os.environ.get('MMRANK_DATA_DIR') or os.path.join(os.getcwd(), 'data')

    # 日志级别
    LOG_LEVEL = os.environ.get('MMRANK_LOG_LEVEL') or 'INFO'

    SEED = int(os.environ.get('MMRANK_SEED') or 0)

    # VQA 与 VQA-Caption 分类头
    MM_DIM = 64
    NUM_ANSWERS = 32
    HEAD_HIDDEN_KEEP_PROB = None  # None 表示分类头不带 dropout
    HEAD_LEARNING_RATE = 3e-3
    HEAD_BATCH_SIZE = 128
    HEAD_ITERATIONS = 3000

    # 问答库
    QA_PER_IMAGE = 3
    QA_NUM_IMAGES = 20
    PROB_FLOOR = 1e-12
    FEATURE_SOURCE = 'qa_log_probs'  # 或 hidden_activations

    # 排序模型
    EMBED_DIM_V = 128
    EMBED_DIM_R = 128
    DROPOUT_KEEP_PROB = 0.5
    RANKING_BATCH_SIZE = 100
    AGNOSTIC_LEARNING_RATE = 1e-3
    SCORE_FUSION_LEARNING_RATE = 1e-3
    REP_FUSION_LEARNING_RATE = 1e-3
    RANKER_ITERATIONS = 3000
    EVAL_EVERY = 500
    LOG_EVERY = 100

    # RMSProp
    RMS_DECAY_RHO = 0.9
    RMS_EPSILON = 1e-8
    LR_DECAY_FACTOR = 0.1
    LR_DECAY_EVERY = 50000

    # alpha/beta 网格
    ALPHA_BETA_STEP = 0.05

    # 评估
    FIRST_N_IMAGES = 1000

    # 互信息
    MI_SAMPLES = 5000

    # 计算分数矩阵时的并行线程数，None 表示按 CPU 数决定
    SCORE_WORKERS = None
    SCORE_BLOCK_ROWS = 256

    # 服务
    SERVER_HOST = os.environ.get('MMRANK_HOST') or '0.0.0.0'
    SERVER_PORT = int(os.environ.get('MMRANK_PORT') or 8088)
    CORS_ORIGINS = ['http://localhost:5173', 'http://127.0.0.1:5173']
    SERVE_MODEL = os.environ.get('MMRANK_SERVE_MODEL')
    SERVE_GROUNDING = os.environ.get('MMRANK_SERVE_GROUNDING')
    SERVE_VQA = os.environ.get('MMRANK_SERVE_VQA')
    SERVE_SPLIT = os.environ.get('MMRANK_SERVE_SPLIT') or 'test'
    SERVE_FIRST_N_IMAGES = int(os.environ.get('MMRANK_SERVE_FIRST_N_IMAGES') or 0) or None

    @classmethod
    def to_dict(cls):
        """
        导出所有大写配置项

        Returns:
            dict: 配置名到取值的映射
        """
        return {key: getattr(cls, key) for key in dir(cls) if key.isupper()}


class DevelopmentConfig(Config):
    """
    开发环境配置
    """
    DEBUG = True


class TestingConfig(Config):
    """
    测试环境配置
    维度和迭代次数都很小，保证单元测试快速完成
    """
    TESTING = True
    MM_DIM = 16
    NUM_ANSWERS = 12
    HEAD_ITERATIONS = 300
    EMBED_DIM_V = 16
    EMBED_DIM_R = 16
    RANKING_BATCH_SIZE = 20
    RANKER_ITERATIONS = 200
    EVAL_EVERY = 100
    LOG_EVERY = 50
    MI_SAMPLES = 200
    QA_NUM_IMAGES = 4


class FullScaleConfig(Config):
    """
    全尺寸配置
    对应 4096 维图像特征、1000 类答案、批大小 1000 的大规模训练
    """
    MM_DIM = 1024
    NUM_ANSWERS = 1000
    QA_NUM_IMAGES = 1000
    EMBED_DIM_V = 4096
    EMBED_DIM_R = 4096
    RANKING_BATCH_SIZE = 1000
    SCORE_FUSION_LEARNING_RATE = 1e-5
    REP_FUSION_LEARNING_RATE = 1e-4
    RANKER_ITERATIONS = 100000
    EVAL_EVERY = 1000


# 配置字典，根据 MMRANK_ENV 选择配置
config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'full': FullScaleConfig,
    'default': DevelopmentConfig
}


def get_config(name=None):
    """
    按名称取配置类

    Args:
        name (str): 配置名，None 时读取 MMRANK_ENV

    Returns:
        type: 配置类
    """
    name = name or os.environ.get('MMRANK_ENV') or 'default'
    return config.get(name, config['default'])
