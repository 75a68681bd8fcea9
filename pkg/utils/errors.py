"""
异常定义模块
项目中所有可预期的错误都从 MMRankError 派生
每个异常携带一个 code，服务层用它生成统一的错误响应
"""


class MMRankError(Exception):
    """
    项目基础异常类

    Args:
        message (str): 错误信息
        code (int): 对应的 HTTP 状态码，供 utils/response.py 使用
    """

    code = 400

    def __init__(self, message, code=None):
        super().__init__(message)
        self.message = message
        if code is not None:
            self.code = code

    def to_dict(self):
        return {'error': type(self).__name__, 'message': self.message}


class ShapeError(MMRankError):
    """矩阵维度不匹配"""

    def __init__(self, what, expected, got):
        super().__init__(f'{what} 维度不匹配: 期望 {expected}, 实际 {got}')
        self.expected = expected
        self.got = got


class ParameterError(MMRankError):
    """参数取值非法"""


class NumericError(MMRankError):
    """出现 NaN 或 Inf"""

    code = 500


class DegenerateInputError(MMRankError):
    """输入退化，例如零范数向量无法归一化"""

    code = 422


class DataError(MMRankError):
    """数据内容不满足要求"""

    code = 422


class ManifestError(DataError):
    """清单文件格式或引用完整性错误"""


class NotFoundError(MMRankError):
    """请求的条目不存在"""

    code = 404


class FeatureFormatError(MMRankError):
    """特征文件格式错误的基类"""

    code = 422


class BadMagicError(FeatureFormatError):
    """文件头魔数错误"""


class VersionMismatchError(FeatureFormatError):
    """文件版本不受支持"""


class TruncatedFileError(FeatureFormatError):
    """文件长度与头部声明不一致"""


class ChecksumMismatchError(FeatureFormatError):
    """校验和不一致"""


class CheckpointError(MMRankError):
    """检查点读写错误"""

    code = 422


class KindMismatchError(CheckpointError):
    """检查点的模型类型与期望不符"""


class StaleCacheError(MMRankError):
    """缓存的 u 向量与当前问答库不一致"""

    code = 409


class DegenerateMarginalError(MMRankError):
    """边缘概率为 0 而联合概率大于 0"""

    code = 422


class EnumerationLimitError(MMRankError):
    """dropout 单元过多，无法精确枚举"""
