"""
训练过程的公共工具
小批量采样与训练轨迹记录
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from utils.errors import DataError


@dataclass
class TrainingTrace:
    """
    训练轨迹，每个记录间隔一行

    Attributes:
        rows: 字典列表，至少包含 iteration 和 loss
        best_iteration: 验证集上最佳检查点对应的迭代次数
    """

    rows: list = field(default_factory=list)
    best_iteration: int = None

    def log(self, iteration, loss, **extra):
        row = {'iteration': int(iteration), 'loss': float(loss)}
        row.update({key: float(value) for key, value in extra.items()})
        self.rows.append(row)
        return row

    @property
    def losses(self):
        return [row['loss'] for row in self.rows]

    @property
    def initial_loss(self):
        return self.rows[0]['loss'] if self.rows else float('nan')

    @property
    def final_loss(self):
        return self.rows[-1]['loss'] if self.rows else float('nan')

    def columns(self):
        names = []
        for row in self.rows:
            for key in row:
                if key not in names:
                    names.append(key)
        return names

    def to_csv(self, path):
        """
        写出 CSV，浮点数统一用 repr 保证重复运行逐字节一致

        Args:
            path (str): 输出路径
        """
        columns = self.columns()
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(columns)
            for row in self.rows:
                writer.writerow(['' if row.get(c) is None else repr(row[c]) for c in columns])


class MinibatchSampler:
    """
    按轮次打乱的小批量采样器
    每轮对全部样本做一次随机排列，依次切出批次
    """

    def __init__(self, n_items, batch_size, rng):
        if n_items < 1:
            raise DataError('样本为空')
        self.n_items = n_items
        self.batch_size = min(batch_size, n_items)
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0

    def next(self):
        if self._cursor + self.batch_size > len(self._order):
            self._order = self.rng.permutation(self.n_items)
            self._cursor = 0
        batch = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        return batch
