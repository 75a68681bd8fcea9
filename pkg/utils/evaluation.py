"""
检索评估
recall@(1, 5, 10) 协议，并列分数按候选下标升序打破
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import psutil

from .errors import ParameterError, ShapeError

logger = logging.getLogger(__name__)

RECALL_KS = (1, 5, 10)
DIRECTIONS = {
    'caption': 'caption',
    'caption_retrieval': 'caption',
    'image': 'image',
    'image_retrieval': 'image',
}


@dataclass
class ScoreMatrix:
    """
    图像 × 描述分数矩阵及真实配对

    Attributes:
        scores: (n_images, n_captions)
        image_ids / caption_ids: 编号
        caption_to_image: 每条描述所属图像的下标
    """

    scores: np.ndarray
    image_ids: list = None
    caption_ids: list = None
    caption_to_image: np.ndarray = None
    _captions_of_image: list = field(default=None, repr=False)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ShapeError('分数矩阵', '二维', self.scores.ndim)
        if not np.all(np.isfinite(self.scores)):
            raise ParameterError('分数矩阵中存在非有限值')
        n_images, n_captions = self.scores.shape
        if self.image_ids is None:
            self.image_ids = [str(i) for i in range(n_images)]
        if self.caption_ids is None:
            self.caption_ids = [str(c) for c in range(n_captions)]
        if self.caption_to_image is None:
            if n_images != n_captions:
                raise ParameterError('非方阵分数矩阵必须给出 caption_to_image')
            self.caption_to_image = np.arange(n_captions)
        self.caption_to_image = np.asarray(self.caption_to_image, dtype=np.int64)
        if self.caption_to_image.shape != (n_captions,):
            raise ShapeError('caption_to_image', (n_captions,), self.caption_to_image.shape)

    @classmethod
    def from_data(cls, scores, data):
        return cls(scores, list(data.image_ids), list(data.caption_ids), data.caption_to_image)

    @property
    def n_images(self):
        return self.scores.shape[0]

    @property
    def n_captions(self):
        return self.scores.shape[1]

    def transpose(self):
        """交换图像与描述的角色，仅对一一对应的矩阵有意义"""
        return ScoreMatrix(self.scores.T.copy(), list(self.caption_ids), list(self.image_ids),
                           np.argsort(self.caption_to_image) if self.n_images == self.n_captions else None)


def target_ranks(matrix, targets, chunk=512):
    """
    每个查询（行）中目标候选的 0 起排名
    排名 = 分数更高的候选数 + 分数相同但下标更小的候选数

    Args:
        matrix: (n_queries, n_candidates)
        targets: (n_queries,) 目标候选下标

    Returns:
        np.ndarray: (n_queries,) 排名
    """
    targets = np.asarray(targets, dtype=np.int64)
    ranks = np.empty(len(targets), dtype=np.int64)
    columns = np.arange(matrix.shape[1])
    for start in range(0, len(targets), chunk):
        rows = matrix[start:start + chunk]
        t = targets[start:start + chunk]
        value = rows[np.arange(len(t)), t][:, None]
        higher = np.sum(rows > value, axis=1)
        ties_before = np.sum((rows == value) & (columns[None, :] < t[:, None]), axis=1)
        ranks[start:start + chunk] = higher + ties_before
    return ranks


def best_ranks(sm, direction):
    """
    caption 方向：每张图像所有真实描述中的最好排名（没有描述的图像不计入）
    image 方向：每条描述的真实图像排名

    Returns:
        np.ndarray: 0 起排名
    """
    direction = _direction(direction)
    if direction == 'image':
        return target_ranks(sm.scores.T, sm.caption_to_image)
    per_caption = target_ranks(sm.scores[sm.caption_to_image], np.arange(sm.n_captions))
    best = np.full(sm.n_images, np.iinfo(np.int64).max)
    np.minimum.at(best, sm.caption_to_image, per_caption)
    return best[best != np.iinfo(np.int64).max]


def _direction(direction):
    if direction not in DIRECTIONS:
        raise ParameterError(f'未知的检索方向: {direction}')
    return DIRECTIONS[direction]


def recall_at_k(sm, k, direction):
    """
    recall@k

    Args:
        sm (ScoreMatrix): 分数矩阵
        k (int): 前 k 个
        direction (str): 'caption'（给定图像找描述）或 'image'（给定描述找图像）

    Returns:
        float: [0, 1] 内的召回率
    """
    direction = _direction(direction)
    candidates = sm.n_captions if direction == 'caption' else sm.n_images
    if k < 1 or k > candidates:
        raise ParameterError(f'k 必须在 [1, {candidates}] 内, 实际 {k}')
    ranks = best_ranks(sm, direction)
    if len(ranks) == 0:
        return 0.0
    return float(np.mean(ranks < k))


@dataclass
class RetrievalReport:
    """
    检索评估结果

    Attributes:
        caption_recall / image_recall: {k: recall}
        caption_median_rank / image_median_rank: 1 起的中位排名（附加指标）
    """

    caption_recall: dict
    image_recall: dict
    caption_median_rank: float
    image_median_rank: float
    n_images: int
    n_captions: int

    def as_flat_dict(self):
        flat = {'n_images': self.n_images, 'n_captions': self.n_captions}
        for k, value in self.caption_recall.items():
            flat[f'caption_r{k}'] = value
        for k, value in self.image_recall.items():
            flat[f'image_r{k}'] = value
        flat['caption_median_rank'] = self.caption_median_rank
        flat['image_median_rank'] = self.image_median_rank
        return flat

    def format_table(self):
        """人类可读的表格，中位排名标注为附加指标"""
        ks = sorted(self.caption_recall)
        header = ' '.join(f'R@{k:<5}' for k in ks)
        lines = [
            f'检索评估 ({self.n_images} 张图像, {self.n_captions} 条描述)',
            f'{"方向":<10}{header}  中位排名(附加)',
            f'{"caption":<12}' + ' '.join(f'{100 * self.caption_recall[k]:6.2f}' for k in ks)
            + f'  {self.caption_median_rank:g}',
            f'{"image":<12}' + ' '.join(f'{100 * self.image_recall[k]:6.2f}' for k in ks)
            + f'  {self.image_median_rank:g}',
        ]
        return '\n'.join(lines) + '\n'

    def format_kv(self):
        """机器可读的 key=value 文本，每行一项，浮点数用 repr"""
        return ''.join(f'{key}={value!r}\n' for key, value in self.as_flat_dict().items())

    def write(self, path_prefix):
        """
        写出 <prefix>.txt 和 <prefix>.kv

        Returns:
            tuple: 两个文件路径
        """
        txt_path, kv_path = path_prefix + '.txt', path_prefix + '.kv'
        with open(txt_path, 'w', encoding='utf-8') as f:
            f.write(self.format_table())
        with open(kv_path, 'w', encoding='utf-8') as f:
            f.write(self.format_kv())
        return txt_path, kv_path


def report_from_scores(sm, ks=RECALL_KS):
    """
    由分数矩阵生成报告；k 超过候选数时按候选数截断
    """
    caption_ranks = best_ranks(sm, 'caption')
    image_ranks = best_ranks(sm, 'image')
    caption_recall = {k: float(np.mean(caption_ranks < min(k, sm.n_captions))) if len(caption_ranks) else 0.0
                      for k in ks}
    image_recall = {k: float(np.mean(image_ranks < min(k, sm.n_images))) if len(image_ranks) else 0.0
                    for k in ks}
    return RetrievalReport(
        caption_recall=caption_recall,
        image_recall=image_recall,
        caption_median_rank=float(np.median(caption_ranks + 1)) if len(caption_ranks) else float('nan'),
        image_median_rank=float(np.median(image_ranks + 1)) if len(image_ranks) else float('nan'),
        n_images=sm.n_images,
        n_captions=sm.n_captions,
    )


def default_workers():
    return max(1, psutil.cpu_count(logical=True) or os.cpu_count() or 1)


def compute_score_matrix(model, data, workers=None, block_rows=256):
    """
    推理模式下计算整个划分的分数矩阵
    描述一侧只编码一次，图像按行块分给线程池，结果按块顺序拼接

    Args:
        model (Ranker): 冻结的排序模型
        data (RankingData): 数据
        workers (int): 线程数，默认按 CPU 数
        block_rows (int): 每块图像数

    Returns:
        ScoreMatrix: 分数矩阵
    """
    from models.layers import DropoutPlan
    plan = DropoutPlan.infer()
    caption_emb = model.caption_side(data, np.arange(data.n_captions), plan)
    blocks = [np.arange(start, min(start + block_rows, data.n_images))
              for start in range(0, data.n_images, block_rows)]

    def score_block(index):
        return model.pair_scores(model.image_side(data, index, plan), caption_emb)

    workers = workers or default_workers()
    if workers == 1 or len(blocks) <= 1:
        parts = [score_block(index) for index in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(score_block, blocks))
    scores = np.vstack(parts) if parts else np.zeros((0, data.n_captions))
    return ScoreMatrix.from_data(scores, data)


def evaluate(model, data, first_n_images=None, workers=None):
    """
    在一个划分上评估 caption 与 image 两个方向的 recall@(1, 5, 10) 和中位排名

    Args:
        model (Ranker): 排序模型
        data (RankingData): 数据划分
        first_n_images (int): 只用前 n 张图像及其描述，None 或 0 表示全部

    Returns:
        RetrievalReport: 评估报告
    """
    data = data.first_n_images(first_n_images)
    if data.n_images == 0 or data.n_captions == 0:
        raise ParameterError('评估划分为空')
    report = report_from_scores(compute_score_matrix(model, data, workers))
    logger.info('评估完成: caption R@1 %.4f, image R@1 %.4f', report.caption_recall[1], report.image_recall[1])
    return report
