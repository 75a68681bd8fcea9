"""
检查点读写

布局：
    b'MMCK' + u32 小端头部长度 + UTF-8 JSON 头部（键排序）+ 各参数的 <f8 原始字节
头部记录模型类型、构造参数、额外标量、训练记录以及每个参数的名称、形状和偏移。
同一个模型保存两次得到完全相同的字节
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, KindMismatchError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b'MMCK'
FORMAT_VERSION = 1
LENGTH = struct.Struct('<I')


@dataclass
class Checkpoint:
    """
    解码后的检查点

    Attributes:
        kind: 模型类型
        config: 构造参数
        extra: 线性层之外的标量状态
        record: 训练配置、种子、迭代次数等
        state: 参数名 -> 数组
    """

    kind: str
    config: dict
    extra: dict = field(default_factory=dict)
    record: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)

    def build(self):
        """按检查点构造并载入模型"""
        from models.base import MODEL_REGISTRY
        if self.kind not in MODEL_REGISTRY:
            raise CheckpointError(f'未知的模型类型: {self.kind}')
        model = MODEL_REGISTRY[self.kind].from_config(self.config)
        model.load_state_dict(self.state)
        model.load_extra_state(self.extra)
        return model


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


NON_STRUCTURAL = ('seed', 'alpha', 'beta')


def _dims(config):
    """去掉种子和融合权重，只保留决定参数形状的配置"""
    return {k: _dims(v) if isinstance(v, dict) else v for k, v in config.items() if k not in NON_STRUCTURAL}


def encode_checkpoint(model, **record):
    state = model.state_dict()
    arrays, offset = [], 0
    for name, value in state.items():
        nbytes = value.size * 8
        arrays.append({'name': name, 'shape': list(value.shape), 'offset': offset})
        offset += nbytes
    header = {
        'format_version': FORMAT_VERSION,
        'kind': model.KIND,
        'config': _jsonable(model.config_dict()),
        'extra': _jsonable(model.extra_state()),
        'record': _jsonable(record),
        'arrays': arrays,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':'), allow_nan=False).encode('utf-8')
    payload = b''.join(np.ascontiguousarray(value, dtype='<f8').tobytes() for value in state.values())
    return MAGIC + LENGTH.pack(len(header_bytes)) + header_bytes + payload


def decode_checkpoint(blob, source='<内存>'):
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise CheckpointError(f'{source}: 不是检查点文件')
    (header_len,) = LENGTH.unpack_from(blob, 4)
    start = 8 + header_len
    if len(blob) < start:
        raise CheckpointError(f'{source}: 头部被截断')
    try:
        header = json.loads(blob[8:start].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f'{source}: 头部无法解析 ({e})') from e
    if not isinstance(header, dict):
        raise CheckpointError(f'{source}: 头部不是 JSON 对象')
    if header.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(f'{source}: 不支持的检查点版本 {header.get("format_version")}')
    state = {}
    try:
        for entry in header['arrays']:
            shape = tuple(int(n) for n in entry['shape'])
            count = int(np.prod(shape)) if shape else 1
            lo = start + int(entry['offset'])
            hi = lo + 8 * count
            if lo < start or hi > len(blob):
                raise CheckpointError(f'{source}: 参数 {entry["name"]} 的数据被截断')
            state[entry['name']] = np.frombuffer(blob[lo:hi], dtype='<f8').astype(np.float64).reshape(shape)
        return Checkpoint(header['kind'], header['config'], header.get('extra', {}), header.get('record', {}),
                          state)
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise CheckpointError(f'{source}: 头部字段不完整或类型错误 ({e!r})') from e


def save_checkpoint(path, model, **record):
    """
    保存模型

    Args:
        path (str): 输出路径
        model (BaseModel): 模型
        **record: 原样写入的训练记录（config、seed、iteration）

    Returns:
        str: 路径
    """
    blob = encode_checkpoint(model, **record)
    tmp_path = f'{path}.tmp{os.getpid()}'
    with open(tmp_path, 'wb') as f:
        f.write(blob)
    os.replace(tmp_path, path)
    logger.info('保存检查点 %s (%s, %d 个参数)', path, model.KIND, model.num_parameters())
    return path


def read_checkpoint(path):
    if not os.path.exists(path):
        raise CheckpointError(f'检查点不存在: {path}')
    with open(path, 'rb') as f:
        return decode_checkpoint(f.read(), source=str(path))


def load_checkpoint(path, model=None, kind=None):
    """
    读取检查点

    Args:
        path (str): 路径
        model (BaseModel): 给定时把参数载入该模型，类型和维度必须一致
        kind (str | tuple): 期望的模型类型

    Returns:
        BaseModel: 模型
    """
    checkpoint = read_checkpoint(path)
    expected = kind if kind is not None else (model.KIND if model is not None else None)
    if expected is not None:
        allowed = (expected,) if isinstance(expected, str) else tuple(expected)
        if checkpoint.kind not in allowed:
            raise KindMismatchError(f'{path}: 检查点类型为 {checkpoint.kind}, 期望 {"/".join(allowed)}')
    if model is None:
        return checkpoint.build()
    mine = _dims(_jsonable(model.config_dict()))
    dims = _dims(checkpoint.config)
    mismatched = sorted(k for k, v in dims.items() if mine.get(k) != v)
    if mismatched:
        raise ShapeError(f'{path} 的模型配置 {mismatched}', {k: mine.get(k) for k in mismatched},
                         {k: dims[k] for k in mismatched})
    model.load_state_dict(checkpoint.state)
    model.load_extra_state(checkpoint.extra)
    return model
