"""
模型基类
所有可训练模型共有的参数管理、序列化和保存方法
"""

import logging

import numpy as np

from utils.errors import CheckpointError, ShapeError

logger = logging.getLogger(__name__)

# 模型类型注册表：KIND -> 类，供检查点加载时查找
MODEL_REGISTRY = {}


def register_model(cls):
    """类装饰器，把模型类登记到注册表"""
    MODEL_REGISTRY[cls.KIND] = cls
    return cls


class BaseModel:
    """
    基础模型类
    子类声明 KIND，实现 layers()、config_dict() 和 from_config()
    """

    KIND = 'base'

    def layers(self):
        """
        返回模型的所有线性层，顺序固定

        Returns:
            list: LinearLayer 列表
        """
        raise NotImplementedError

    def trainable_layers(self):
        return [layer for layer in self.layers() if not layer.frozen]

    def config_dict(self):
        """构造同结构模型所需的全部维度与超参数"""
        raise NotImplementedError

    @classmethod
    def from_config(cls, config):
        raise NotImplementedError

    def extra_state(self):
        """线性层之外需要保存的标量，例如 alpha/beta"""
        return {}

    def load_extra_state(self, state):
        pass

    def dropout_sites(self):
        """
        返回 {位置名: (单元数, keep_prob)}，keep_prob 为 None 的位置不计入
        """
        return {}

    def state_dict(self):
        """
        把参数导出为有序字典

        Returns:
            dict: 参数名到数组副本的映射
        """
        state = {}
        for layer in self.layers():
            state[f'{layer.name}.W'] = layer.W.copy()
            state[f'{layer.name}.b'] = layer.b.copy()
        return state

    def load_state_dict(self, state):
        """
        载入参数，名称和形状必须完全一致

        Args:
            state (dict): state_dict() 的输出
        """
        expected = {}
        for layer in self.layers():
            expected[f'{layer.name}.W'] = layer.W
            expected[f'{layer.name}.b'] = layer.b
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise CheckpointError(f'{self.KIND} 参数名不一致: 缺少 {missing}, 多余 {unexpected}')
        for name, target in expected.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != target.shape:
                raise ShapeError(f'参数 {name}', target.shape, value.shape)
            target[...] = value

    def copy(self):
        """深拷贝模型（用于保存验证集上的最佳检查点）"""
        clone = type(self).from_config(self.config_dict())
        clone.load_state_dict(self.state_dict())
        clone.load_extra_state(self.extra_state())
        for mine, theirs in zip(self.layers(), clone.layers()):
            theirs.frozen = mine.frozen
        return clone

    def num_parameters(self):
        return int(sum(layer.W.size + (layer.b.size if layer.use_bias else 0) for layer in self.layers()))

    def to_dict(self):
        """
        模型摘要，用于日志和服务接口

        Returns:
            dict: 类型、维度、参数量
        """
        return {
            'kind': self.KIND,
            'config': self.config_dict(),
            'num_parameters': self.num_parameters(),
            'dropout_sites': {site: list(entry) for site, entry in self.dropout_sites().items()},
        }

    def save(self, path, **record):
        """
        保存为检查点文件，record 中的字段原样写入（seed、iteration、训练配置）
        """
        from utils.checkpoint import save_checkpoint
        return save_checkpoint(path, self, **record)

    def __repr__(self):
        return f'<{type(self).__name__} {self.config_dict()}>'
