"""
RMSProp 优化器
带阶梯式学习率衰减
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ParameterError


@dataclass
class RmsPropConfig:
    """
    RMSProp 超参数

    Attributes:
        learning_rate: 初始学习率
        decay_rho: 平方梯度滑动平均的衰减系数
        epsilon: 分母上的平滑项
        lr_decay_factor: 每次衰减乘以的系数
        lr_decay_every: 衰减间隔（迭代次数）
    """

    learning_rate: float = 1e-4
    decay_rho: float = 0.9
    epsilon: float = 1e-8
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 50000

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f'learning_rate 必须大于 0, 实际 {self.learning_rate}')
        if not 0.0 < self.decay_rho < 1.0:
            raise ParameterError(f'decay_rho 必须在 (0, 1) 内, 实际 {self.decay_rho}')
        if not self.epsilon > 0:
            raise ParameterError(f'epsilon 必须大于 0, 实际 {self.epsilon}')
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ParameterError(f'lr_decay_factor 必须在 (0, 1] 内, 实际 {self.lr_decay_factor}')
        if int(self.lr_decay_every) < 1:
            raise ParameterError(f'lr_decay_every 必须是正整数, 实际 {self.lr_decay_every}')

    @classmethod
    def from_config(cls, cfg, learning_rate):
        """
        从配置类构造，学习率按模型类型单独给出

        Args:
            cfg: config.py 中的配置类
            learning_rate (float): 学习率
        """
        return cls(learning_rate=learning_rate,
                   decay_rho=cfg.RMS_DECAY_RHO,
                   epsilon=cfg.RMS_EPSILON,
                   lr_decay_factor=cfg.LR_DECAY_FACTOR,
                   lr_decay_every=cfg.LR_DECAY_EVERY)

    def effective_lr(self, iteration):
        """第 iteration 次迭代的实际学习率"""
        return self.learning_rate * self.lr_decay_factor ** (int(iteration) // int(self.lr_decay_every))

    def to_dict(self):
        return asdict(self)


def rmsprop_step(layer, cfg, iteration):
    """
    对一个线性层执行一次 RMSProp 更新，之后清零梯度
    冻结的层只清零梯度

    cache ← ρ·cache + (1−ρ)·g²
    θ ← θ − lr·g / (√cache + ε)

    Args:
        layer (LinearLayer): 线性层
        cfg (RmsPropConfig): 超参数
        iteration (int): 当前迭代次数，用于学习率衰减
    """
    if not layer.frozen:
        lr = cfg.effective_lr(iteration)
        rho = cfg.decay_rho
        pairs = [(layer.W, layer.grad_W, layer.rms_cache_W)]
        if layer.use_bias:
            pairs.append((layer.b, layer.grad_b, layer.rms_cache_b))
        for param, grad, cache in pairs:
            cache *= rho
            cache += (1.0 - rho) * grad * grad
            param -= lr * grad / (np.sqrt(cache) + cfg.epsilon)
    layer.zero_grad()


class RmsPropOptimizer:
    """
    管理一组线性层的优化器，自带迭代计数

    Usage:
        optimizer = RmsPropOptimizer(model.layers(), cfg)
        ...反向传播...
        optimizer.step()
    """

    def __init__(self, layers, cfg):
        self.layers = list(layers)
        self.cfg = cfg
        self.iteration = 0

    @property
    def current_lr(self):
        return self.cfg.effective_lr(self.iteration)

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def step(self):
        for layer in self.layers:
            rmsprop_step(layer, self.cfg, self.iteration)
        self.iteration += 1
