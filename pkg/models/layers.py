"""
基础数值模块
稠密矩阵、线性层、激活函数、dropout 和 softmax
所有计算都使用 float64；矩阵按列存放样本，形状为 (维度, 样本数)
"""

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from utils.errors import NumericError, ParameterError, ShapeError

DTYPE = np.float64


def as_matrix(x):
    """
    转换为 float64 二维矩阵
    一维向量视为单列

    Args:
        x: 数组或可转换为数组的对象

    Returns:
        np.ndarray: 形状为 (rows, cols) 的矩阵
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x.reshape(-1, 1)
    if x.ndim != 2:
        raise ShapeError('矩阵', '二维', f'{x.ndim} 维')
    return x


def check_finite(x, what='矩阵'):
    if not np.all(np.isfinite(x)):
        raise NumericError(f'{what} 中出现 NaN 或 Inf')
    return x


@dataclass
class LinearLayer:
    """
    线性层 y = W·x + b

    Attributes:
        W: 权重，形状 (out_dim, in_dim)
        b: 偏置，形状 (out_dim, 1)
        grad_W / grad_b: 累积梯度
        rms_cache_W / rms_cache_b: RMSProp 的平方梯度滑动平均，非负
        use_bias: False 时偏置恒为 0 且不更新
        frozen: True 时优化器跳过该层
    """

    W: np.ndarray
    b: np.ndarray
    name: str = 'linear'
    use_bias: bool = True
    frozen: bool = False
    grad_W: np.ndarray = field(default=None, repr=False)
    grad_b: np.ndarray = field(default=None, repr=False)
    rms_cache_W: np.ndarray = field(default=None, repr=False)
    rms_cache_b: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.W = as_matrix(self.W).copy()
        self.b = as_matrix(self.b).copy()
        if self.b.shape != (self.W.shape[0], 1):
            raise ShapeError(f'{self.name}.b', (self.W.shape[0], 1), self.b.shape)
        if self.grad_W is None:
            self.grad_W = np.zeros_like(self.W)
        if self.grad_b is None:
            self.grad_b = np.zeros_like(self.b)
        if self.rms_cache_W is None:
            self.rms_cache_W = np.zeros_like(self.W)
        if self.rms_cache_b is None:
            self.rms_cache_b = np.zeros_like(self.b)

    @classmethod
    def init(cls, in_dim, out_dim, rng, name='linear', use_bias=True):
        """
        按 ±1/sqrt(fan_in) 均匀分布初始化权重，偏置为 0

        Args:
            in_dim (int): 输入维度
            out_dim (int): 输出维度
            rng (np.random.Generator): 随机数生成器
            name (str): 层名称，用于检查点和日志
            use_bias (bool): 是否使用偏置

        Returns:
            LinearLayer: 新建的层
        """
        bound = 1.0 / np.sqrt(max(in_dim, 1))
        W = rng.uniform(-bound, bound, size=(out_dim, in_dim))
        return cls(W=W, b=np.zeros((out_dim, 1)), name=name, use_bias=use_bias)

    @classmethod
    def zeros(cls, in_dim, out_dim, name='linear', use_bias=True):
        return cls(W=np.zeros((out_dim, in_dim)), b=np.zeros((out_dim, 1)),
                   name=name, use_bias=use_bias)

    @property
    def in_dim(self):
        return self.W.shape[1]

    @property
    def out_dim(self):
        return self.W.shape[0]

    def forward(self, x):
        return linear_forward(self, x)

    def backward(self, x, grad_out):
        return linear_backward(self, x, grad_out)

    def zero_grad(self):
        self.grad_W.fill(0.0)
        self.grad_b.fill(0.0)

    def parameters(self):
        """
        返回 (名称, 参数, 梯度) 列表
        无偏置层只返回权重
        """
        params = [(f'{self.name}.W', self.W, self.grad_W)]
        if self.use_bias:
            params.append((f'{self.name}.b', self.b, self.grad_b))
        return params

    def freeze_zero(self):
        """把参数清零并冻结，用于消融模式中关闭的通路"""
        self.W.fill(0.0)
        self.b.fill(0.0)
        self.frozen = True


def linear_forward(layer, x):
    """
    计算 W·x + b，偏置按列广播

    Args:
        layer (LinearLayer): 线性层
        x: 输入矩阵，形状 (in_dim, batch)

    Returns:
        np.ndarray: 输出矩阵，形状 (out_dim, batch)
    """
    x = as_matrix(x)
    if x.shape[0] != layer.W.shape[1]:
        raise ShapeError(f'{layer.name} 输入', f'行数 {layer.W.shape[1]}', f'行数 {x.shape[0]}')
    y = layer.W @ x
    if layer.use_bias:
        y = y + layer.b
    return check_finite(y, f'{layer.name} 输出')


def linear_backward(layer, x, grad_out):
    """
    线性层反向传播
    梯度累加到 grad_W 和 grad_b，返回对输入的梯度

    Args:
        layer (LinearLayer): 线性层
        x: 前向时的输入，形状 (in_dim, batch)
        grad_out: 上游梯度，形状 (out_dim, batch)

    Returns:
        np.ndarray: 对 x 的梯度 Wᵀ·grad_out
    """
    x = as_matrix(x)
    grad_out = as_matrix(grad_out)
    if x.shape[0] != layer.W.shape[1]:
        raise ShapeError(f'{layer.name} 输入', f'行数 {layer.W.shape[1]}', f'行数 {x.shape[0]}')
    if grad_out.shape != (layer.W.shape[0], x.shape[1]):
        raise ShapeError(f'{layer.name} 上游梯度', (layer.W.shape[0], x.shape[1]), grad_out.shape)
    if not layer.frozen:
        layer.grad_W += grad_out @ x.T
        if layer.use_bias:
            layer.grad_b += grad_out.sum(axis=1, keepdims=True)
    return layer.W.T @ grad_out


def activation(kind, x, direction='forward', grad=None):
    """
    逐元素激活函数

    Args:
        kind (str): 'tanh' 或 'relu'
        x: 激活前的输入
        direction (str): 'forward' 或 'backward'
        grad: 反向时的上游梯度

    Returns:
        np.ndarray: 前向输出，或对 x 的梯度
    """
    x = as_matrix(x)
    if kind not in ('tanh', 'relu'):
        raise ParameterError(f'未知的激活函数: {kind}')
    if direction == 'forward':
        return np.tanh(x) if kind == 'tanh' else np.maximum(x, 0.0)
    if direction != 'backward':
        raise ParameterError(f'未知的方向: {direction}')
    grad = as_matrix(grad)
    if grad.shape != x.shape:
        raise ShapeError('激活函数上游梯度', x.shape, grad.shape)
    if kind == 'tanh':
        t = np.tanh(x)
        return grad * (1.0 - t * t)
    # 0 处取次梯度 0
    return grad * (x > 0.0)


@dataclass
class DropoutMask:
    """
    dropout 掩码

    Attributes:
        keep_prob: 保留概率，(0, 1]
        mask: 0/1 矩阵
        seed: 生成掩码所用的种子
    """

    keep_prob: float
    mask: np.ndarray
    seed: int = 0

    def apply(self, x):
        return x * self.mask / self.keep_prob

    def backward(self, grad):
        return grad * self.mask / self.keep_prob


def dropout_apply(x, keep_prob, mode='infer', seed=0, shape=None):
    """
    反向缩放的 dropout：训练时 y = x ⊙ mask / keep_prob，推理时 y = x

    Args:
        x: 输入矩阵
        keep_prob (float): 保留概率
        mode (str): 'train' 或 'infer'
        seed (int): 掩码种子，相同 (seed, 形状) 得到相同掩码
        shape (tuple): 掩码形状，默认与 x 相同；(units, 1) 表示整批共用一个掩码

    Returns:
        tuple: (输出矩阵, DropoutMask)
    """
    x = as_matrix(x)
    if not 0.0 < keep_prob <= 1.0:
        raise ParameterError(f'keep_prob 必须在 (0, 1] 内, 实际 {keep_prob}')
    if mode not in ('train', 'infer'):
        raise ParameterError(f'未知的 dropout 模式: {mode}')
    shape = x.shape if shape is None else tuple(shape)
    if mode == 'infer' or keep_prob == 1.0:
        mask = DropoutMask(keep_prob=1.0, mask=np.ones(shape), seed=seed)
        return x.copy(), mask
    rng = np.random.default_rng(seed)
    mask = DropoutMask(keep_prob=keep_prob,
                       mask=(rng.random(shape) < keep_prob).astype(DTYPE),
                       seed=seed)
    return mask.apply(x), mask


def site_seed(seed, site):
    """由全局种子和 dropout 位置名派生一个稳定的子种子"""
    sequence = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(site.encode('utf-8'))])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


class DropoutPlan:
    """
    一次前向计算中所有 dropout 位置的掩码来源

    推理模式下所有位置都是恒等映射。训练模式下每个位置的掩码由
    (seed, 位置名) 决定，因此同一个 plan 在 VQA 头和排序模型之间
    共享时，两者看到的是同一组采样参数。shared_across_batch=True
    时整批样本共用一个掩码，相当于对模型参数采样；overrides 可以
    直接指定某些位置的掩码，用于精确枚举。
    """

    def __init__(self, mode='infer', seed=0, shared_across_batch=False, overrides=None):
        if mode not in ('train', 'infer'):
            raise ParameterError(f'未知的 dropout 模式: {mode}')
        self.mode = mode
        self.seed = seed
        self.shared_across_batch = shared_across_batch
        self.overrides = dict(overrides or {})
        self.masks = {}

    @classmethod
    def infer(cls):
        return cls('infer')

    @property
    def training(self):
        return self.mode == 'train'

    def apply(self, site, x, keep_prob):
        """
        对某个位置的激活施加 dropout，并记录掩码供反向使用

        Args:
            site (str): 位置名，例如 'rep.r_image'
            x: 激活矩阵，形状 (units, batch)
            keep_prob (float): 保留概率

        Returns:
            np.ndarray: dropout 后的激活
        """
        if keep_prob is None:
            return x
        if site in self.overrides:
            override = as_matrix(self.overrides[site])
            mask = DropoutMask(keep_prob=keep_prob, mask=override, seed=-1)
            self.masks[site] = mask
            return mask.apply(x)
        shape = (x.shape[0], 1) if self.shared_across_batch else x.shape
        y, mask = dropout_apply(x, keep_prob, self.mode, site_seed(self.seed, site), shape=shape)
        self.masks[site] = mask
        return y

    def backward(self, site, grad):
        mask = self.masks.get(site)
        return grad if mask is None else mask.backward(grad)


def softmax_rows(x):
    """
    逐行 softmax，先减去行最大值保证数值稳定

    Args:
        x: 输入矩阵

    Returns:
        np.ndarray: 每行和为 1 的概率矩阵
    """
    return special.softmax(as_matrix(x), axis=1)


def log_softmax_rows(x):
    """逐行 log-softmax，平移后用 log-sum-exp 计算"""
    return special.log_softmax(as_matrix(x), axis=1)
