"""
特征文件读写

二进制布局（全部小端）：
    0   4 字节魔数 b'MMFT'
    4   u32 版本号，当前为 1
    8   u32 count
    12  u32 dim
    16  count × dim 个 f32，行优先
    末尾 u64 校验和，对 payload 做 64 位 FNV-1a

文件长度恒为 16 + 4·count·dim + 8。存储用 32 位，读回后扩展为 64 位参与计算
"""

import logging
import os
import struct
from dataclasses import dataclass

import numba
import numpy as np

from .errors import (BadMagicError, ChecksumMismatchError, NumericError, ShapeError, TruncatedFileError,
                     VersionMismatchError)

logger = logging.getLogger(__name__)

MAGIC = b'MMFT'
VERSION = 1
HEADER = struct.Struct('<4sIII')
CHECKSUM = struct.Struct('<Q')
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@numba.njit(cache=True, nogil=True)
def _fnv1a64(data, offset, prime):
    h = offset
    for i in range(data.shape[0]):
        h = (h ^ np.uint64(data[i])) * prime
    return h


def fnv1a64(payload):
    """
    64 位 FNV-1a

    Args:
        payload (bytes | np.ndarray): 字节串或 uint8 数组

    Returns:
        int: 校验和
    """
    data = np.frombuffer(payload, dtype=np.uint8) if isinstance(payload, (bytes, bytearray, memoryview)) \
        else np.ascontiguousarray(payload, dtype=np.uint8)
    return int(_fnv1a64(data, np.uint64(FNV_OFFSET), np.uint64(FNV_PRIME)))


@dataclass(frozen=True)
class FeatureHeader:
    version: int
    count: int
    dim: int

    @property
    def payload_bytes(self):
        return 4 * self.count * self.dim

    @property
    def file_size(self):
        return HEADER.size + self.payload_bytes + CHECKSUM.size


def encode_features(matrix):
    """
    把 (count, dim) 矩阵编码为文件内容

    Returns:
        bytes: 完整文件内容
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1 and matrix.size == 0:
        matrix = matrix.reshape(0, 0)
    if matrix.ndim != 2:
        raise ShapeError('特征矩阵', '二维 (count, dim)', matrix.shape)
    stored = matrix.astype('<f4')
    if not np.all(np.isfinite(stored)):
        raise NumericError('特征矩阵包含非有限值或超出 32 位浮点范围')
    payload = np.ascontiguousarray(stored).tobytes()
    count, dim = matrix.shape
    return HEADER.pack(MAGIC, VERSION, count, dim) + payload + CHECKSUM.pack(fnv1a64(payload))


def decode_features(blob, source='<内存>'):
    """
    解码文件内容，每类格式问题抛出各自的异常

    Returns:
        np.ndarray: (count, dim) float64
    """
    header = _parse_header(blob, source)
    if len(blob) != header.file_size:
        raise TruncatedFileError(f'{source}: 文件长度 {len(blob)} 与头部声明的 {header.file_size} 不一致')
    payload = blob[HEADER.size:HEADER.size + header.payload_bytes]
    (stored,) = CHECKSUM.unpack_from(blob, HEADER.size + header.payload_bytes)
    actual = fnv1a64(payload)
    if stored != actual:
        raise ChecksumMismatchError(f'{source}: 校验和不一致 (文件 {stored:016x}, 实际 {actual:016x})')
    values = np.frombuffer(payload, dtype='<f4').astype(np.float64)
    return values.reshape(header.count, header.dim)


def _parse_header(blob, source):
    if len(blob) < HEADER.size:
        raise TruncatedFileError(f'{source}: 文件只有 {len(blob)} 字节, 不足以容纳 {HEADER.size} 字节的头部')
    magic, version, count, dim = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise BadMagicError(f'{source}: 魔数错误 {magic!r}, 期望 {MAGIC!r}')
    if version != VERSION:
        raise VersionMismatchError(f'{source}: 不支持的版本 {version}, 期望 {VERSION}')
    return FeatureHeader(version, count, dim)


def write_features(path, matrix):
    """
    写出特征文件；先写临时文件再替换，读者不会看到写了一半的文件

    Args:
        path (str): 输出路径
        matrix: (count, dim)
    """
    blob = encode_features(matrix)
    tmp_path = f'{path}.tmp{os.getpid()}'
    with open(tmp_path, 'wb') as f:
        f.write(blob)
    os.replace(tmp_path, path)
    logger.debug('写出特征文件 %s (%d 字节)', path, len(blob))
    return len(blob)


def read_features(path):
    """
    读取并校验特征文件

    Returns:
        np.ndarray: (count, dim) float64
    """
    with open(path, 'rb') as f:
        blob = f.read()
    return decode_features(blob, source=str(path))


def read_feature_header(path):
    """只读取头部，不校验 payload"""
    with open(path, 'rb') as f:
        blob = f.read(HEADER.size)
    return _parse_header(blob, str(path))
