"""
数据目录读取
把清单和特征文件组装成训练、评估所需的结构
"""

import logging
import os
from functools import cached_property

import numpy as np

from .errors import DataError
from .features import read_features
from .manifest import SPLITS, DatasetManifest
from .synthetic import FILES

logger = logging.getLogger(__name__)


def require_file(path):
    if not os.path.exists(path):
        raise DataError(f'文件不存在: {path}')
    return path


class Dataset:
    """
    一个数据目录：manifest.tsv 加上图像、描述、词袋、问题四个特征文件
    特征矩阵在第一次访问时读取并缓存
    """

    def __init__(self, data_dir, manifest_name=FILES['manifest']):
        self.data_dir = data_dir
        self.manifest = DatasetManifest.read(require_file(os.path.join(data_dir, manifest_name)))
        self.manifest.validate(self.counts())

    def path(self, kind):
        return os.path.join(self.data_dir, FILES[kind])

    def _read(self, kind):
        return read_features(require_file(self.path(kind)))

    @cached_property
    def image_features(self):
        return self._read('image')

    @cached_property
    def caption_features(self):
        return self._read('caption')

    @cached_property
    def caption_bow(self):
        return self._read('bow')

    @cached_property
    def question_features(self):
        return self._read('question')

    def counts(self):
        return {kind: len(getattr(self, name)) for kind, name in (
            ('image', 'image_features'), ('caption', 'caption_features'),
            ('bow', 'caption_bow'), ('question', 'question_features'))}

    @property
    def image_dim(self):
        return self.image_features.shape[1]

    @property
    def caption_dim(self):
        return self.caption_features.shape[1]

    @property
    def bow_dim(self):
        return self.caption_bow.shape[1]

    @property
    def question_dim(self):
        return self.question_features.shape[1]

    def _check_split(self, split):
        if split not in SPLITS:
            raise DataError(f'未知的划分: {split}')

    def image_rows(self, split):
        self._check_split(split)
        return np.array([self.manifest.images[i].row for i in self.manifest.image_ids(split)], dtype=np.int64)

    def caption_records(self, split):
        self._check_split(split)
        return self.manifest.captions_in(split)

    def split_images(self, split):
        """(n_img, D_xI)，按清单顺序"""
        return self.image_features[self.image_rows(split)]

    def split_bow(self, split):
        """(n_cap, D_bow)，按清单顺序"""
        return self.caption_bow[[r.bow_row for r in self.caption_records(split)]]

    def ranking_split(self, split, image_u=None, caption_u=None, image_t=None, caption_t=None):
        """
        组装一个划分的 RankingData

        Args:
            split (str): train / val / test
            image_u / caption_u: (n, N) 缓存矩阵，每行一个样本
            image_t / caption_t: (n, D) 预先计算的 t，每行一个样本

        Returns:
            RankingData: 矩阵转置为按列存放
        """
        from models.ranking import RankingData
        image_ids = self.manifest.image_ids(split)
        index_of = {image_id: i for i, image_id in enumerate(image_ids)}
        captions = self.caption_records(split)
        if not image_ids:
            raise DataError(f'划分 {split} 没有图像')

        def columns(matrix, n, what):
            if matrix is None:
                return None
            matrix = np.asarray(matrix, dtype=np.float64)
            if matrix.shape[0] != n:
                raise DataError(f'{what} 有 {matrix.shape[0]} 行, 划分 {split} 需要 {n} 行')
            return matrix.T.copy()

        return RankingData(
            image_ids=image_ids,
            caption_ids=[r.caption_id for r in captions],
            caption_to_image=[index_of[r.image_id] for r in captions],
            image_x=self.split_images(split).T.copy(),
            caption_x=self.caption_features[[r.row for r in captions]].T.copy(),
            image_u=columns(image_u, len(image_ids), 'u_I'),
            caption_u=columns(caption_u, len(captions), 'u_C'),
            image_t=columns(image_t, len(image_ids), 't_I'),
            caption_t=columns(caption_t, len(captions), 't_C'),
        )

    def vqa_triples(self, split, source='image'):
        """
        VQA 训练三元组
        source='image' 用图像特征；source='caption' 把每个问答对与其图像的每条描述词袋配对

        Returns:
            VqaTriples: 三元组
        """
        from models.vqa import VqaTriples
        records = self.manifest.qa_in(split)
        if not records:
            raise DataError(f'划分 {split} 没有问答对')
        if source == 'image':
            inputs = self.image_features[[self.manifest.images[r.image_id].row for r in records]]
            questions = self.question_features[[r.question_row for r in records]]
            answers = [r.answer_index for r in records]
            return VqaTriples(inputs, questions, answers)
        if source != 'caption':
            raise DataError(f'未知的三元组来源: {source}')
        bow_rows = {}
        for r in self.caption_records(split):
            bow_rows.setdefault(r.image_id, []).append(r.bow_row)
        inputs, questions, answers = [], [], []
        for r in records:
            for bow_row in bow_rows.get(r.image_id, []):
                inputs.append(bow_row)
                questions.append(r.question_row)
                answers.append(r.answer_index)
        if not inputs:
            raise DataError(f'划分 {split} 的问答对没有对应的描述')
        return VqaTriples(self.caption_bow[inputs], self.question_features[questions], answers)

    def build_bank(self, per_image=3, num_images=1000, seed=0, split='train'):
        from models.grounding import build_qa_bank
        return build_qa_bank(self.manifest, self.question_features, per_image, num_images, seed, split)
