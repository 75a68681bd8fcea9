"""
服务端持有的模型与数据
一个划分、一个排序模型，以及可选的 VQA 头和问答库（用于问答事实选择）
"""

import logging
import threading

import numpy as np

from .errors import DataError, NotFoundError, ParameterError
from .evaluation import compute_score_matrix, report_from_scores

logger = logging.getLogger(__name__)

MAX_TOP_K = 100


class ServingRegistry:
    """
    检索服务的状态
    分数矩阵第一次用到时计算并缓存，之后的检索请求只做排序
    """

    def __init__(self, model, data, split='test', head=None, bank=None, workers=None, prob_floor=1e-12):
        if data.n_images == 0 or data.n_captions == 0:
            raise DataError('服务数据为空')
        self.model = model
        self.data = data
        self.split = split
        self.head = head
        self.bank = bank
        self.workers = workers
        self.prob_floor = prob_floor
        self._image_index = {image_id: i for i, image_id in enumerate(data.image_ids)}
        self._caption_index = {caption_id: c for c, caption_id in enumerate(data.caption_ids)}
        self._scores = None
        self._report = None
        self._lock = threading.Lock()

    @classmethod
    def from_paths(cls, data_dir, model_path, split='test', grounding_dir=None, vqa_path=None,
                   feature_source='qa_log_probs', t_images=None, t_captions=None, first_n_images=None, workers=None,
                   prob_floor=1e-12):
        """
        从数据目录和检查点装配服务状态

        Returns:
            ServingRegistry: 服务状态
        """
        from models.vqa import VqaHead
        from .checkpoint import load_checkpoint
        from .dataset import Dataset
        from .pipeline import BANK_FILE, bank_hash_of, load_bank, load_ranking_split
        dataset = Dataset(data_dir)
        model = load_checkpoint(model_path, kind=('agnostic', 'score_fusion', 'rep_fusion'))
        bank = head = None
        bank_hash = None
        if grounding_dir:
            bank_hash = bank_hash_of(grounding_dir)
            if vqa_path:
                bank = load_bank(f'{grounding_dir}/{BANK_FILE}', dataset)
                head = load_checkpoint(vqa_path, kind=VqaHead.KIND)
        data = load_ranking_split(dataset, split, grounding_dir, feature_source, t_images, t_captions, bank_hash)
        return cls(model, data.first_n_images(first_n_images), split, head, bank, workers, prob_floor)

    def summary(self):
        return {
            'split': self.split,
            'model': self.model.KIND,
            'n_images': self.data.n_images,
            'n_captions': self.data.n_captions,
            'qa_bank_size': self.bank.N if self.bank is not None else 0,
            'qa_selection': self.head is not None and self.bank is not None,
        }

    @property
    def scores(self):
        with self._lock:
            if self._scores is None:
                logger.info('计算 %s 划分的分数矩阵 (%d × %d)', self.split, self.data.n_images, self.data.n_captions)
                self._scores = compute_score_matrix(self.model, self.data, self.workers)
            return self._scores

    def report(self):
        if self._report is None:
            self._report = report_from_scores(self.scores)
        return self._report

    def image_index(self, image_id):
        if image_id not in self._image_index:
            raise NotFoundError(f'图像 {image_id} 不在 {self.split} 划分中')
        return self._image_index[image_id]

    def caption_index(self, caption_id):
        if caption_id not in self._caption_index:
            raise NotFoundError(f'描述 {caption_id} 不在 {self.split} 划分中')
        return self._caption_index[caption_id]

    @staticmethod
    def _top_k(value):
        try:
            top_k = int(value)
        except (TypeError, ValueError) as e:
            raise ParameterError(f'top_k 必须是整数, 实际 {value!r}') from e
        if not 1 <= top_k <= MAX_TOP_K:
            raise ParameterError(f'top_k 必须在 [1, {MAX_TOP_K}] 内, 实际 {top_k}')
        return top_k

    @staticmethod
    def _order(row):
        # 分数降序，并列时下标小的在前
        return np.lexsort((np.arange(len(row)), -row))

    def captions_for_image(self, image_id, top_k=10):
        """
        给一张图像检索描述

        Returns:
            list: [{rank, caption_id, image_id, score, matches}]
        """
        i = self.image_index(image_id)
        row = self.scores.scores[i]
        results = []
        for rank, c in enumerate(self._order(row)[:self._top_k(top_k)], start=1):
            owner = self.data.image_ids[self.data.caption_to_image[c]]
            results.append({'rank': rank, 'caption_id': self.data.caption_ids[c], 'image_id': owner,
                            'score': float(row[c]), 'matches': owner == image_id})
        return results

    def images_for_caption(self, caption_id, top_k=10):
        """
        给一条描述检索图像

        Returns:
            list: [{rank, image_id, score, matches}]
        """
        c = self.caption_index(caption_id)
        column = self.scores.scores[:, c]
        truth = int(self.data.caption_to_image[c])
        return [{'rank': rank, 'image_id': self.data.image_ids[i], 'score': float(column[i]),
                 'matches': int(i) == truth}
                for rank, i in enumerate(self._order(column)[:self._top_k(top_k)], start=1)]

    def select_qa(self, image_id, n_samples=500, top=10, seed=0, marginal_mode='from_joint', workers=1):
        """
        在服务划分的全部描述上，为一张图像按互信息选择问答事实

        Returns:
            list: [{rank, qa_index, qa_id, question, answer, mi_nats}]
        """
        from models.informativeness import FusionJointPredictor, select_informative_qa
        if self.head is None or self.bank is None:
            raise ParameterError('服务未加载 VQA 头和问答库，无法选择问答事实')
        if int(n_samples) < 1:
            raise ParameterError(f'n_samples 必须为正, 实际 {n_samples}')
        i = self.image_index(image_id)
        image_t = None if self.data.image_t is None else self.data.image_t[:, i:i + 1]
        predictor = FusionJointPredictor(self.head, self.model, self.bank, self.data.image_x[:, i:i + 1], self.data,
                                         image_t=image_t, image_id=image_id, prob_floor=self.prob_floor)
        results = select_informative_qa(predictor, int(n_samples), int(seed), marginal_mode, workers,
                                        top=self._top_k(top))
        return [{'rank': rank, 'qa_index': r.qa_index, 'qa_id': self.bank[r.qa_index].question_id,
                 'question': self.bank[r.qa_index].question_text, 'answer': self.bank[r.qa_index].answer_text,
                 'mi_nats': r.mi_nats}
                for rank, r in enumerate(results, start=1)]
