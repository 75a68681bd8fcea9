"""
VQA 语义化表示
构建问答库，把图像和描述转换为激活向量 u（每维是一个事实的对数概率），
再经 ReLU 投影得到嵌入 v
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from utils.errors import DataError, ShapeError, StaleCacheError
from .layers import DropoutPlan, LinearLayer, activation, as_matrix
from .vqa import QAPair

logger = logging.getLogger(__name__)

DEFAULT_PROB_FLOOR = 1e-12


@dataclass
class QABank:
    """
    有序的问答事实库，u 向量的第 i 维对应 pairs[i]

    Attributes:
        pairs: QAPair 列表
    """

    pairs: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, index):
        return self.pairs[index]

    @property
    def N(self):
        return len(self.pairs)

    @property
    def question_matrix(self):
        """问题特征按列堆叠 (d_q, N)"""
        if not self.pairs:
            return np.zeros((0, 0))
        return np.stack([pair.question_features for pair in self.pairs], axis=1)

    @property
    def answers(self):
        return np.array([pair.answer_index for pair in self.pairs], dtype=np.int64)

    def content_hash(self):
        """
        问答库内容的 sha256，用于识别过期的 u 缓存

        Returns:
            str: 十六进制摘要
        """
        digest = hashlib.sha256()
        for pair in self.pairs:
            digest.update(pair.question_id.encode('utf-8'))
            digest.update(np.int64(pair.answer_index).tobytes())
            digest.update(np.ascontiguousarray(pair.question_features, dtype='<f8').tobytes())
        return digest.hexdigest()

    def subset(self, n):
        return QABank(self.pairs[:n])

    def to_records(self):
        return [{
            'question_id': p.question_id,
            'answer_index': p.answer_index,
            'source_image_id': p.source_image_id,
            'question_text': p.question_text,
            'answer_text': p.answer_text,
        } for p in self.pairs]

    def save(self, path):
        """保存问答库索引（问题特征仍在特征文件中）"""
        with open(path, 'w', encoding='utf-8') as f:
            json.dump({'hash': self.content_hash(), 'pairs': self.to_records()}, f,
                      ensure_ascii=False, indent=1, sort_keys=True)
            f.write('\n')


def build_qa_bank(manifest, question_features, per_image=3, num_images=1000, seed=0, split='train'):
    """
    按种子抽样 num_images 张图像，每张取 per_image 个问答对

    Args:
        manifest (DatasetManifest): 数据清单
        question_features (np.ndarray): 问题特征矩阵 (count, d_q)，按清单中的行号索引
        per_image (int): 每张图像的问答对数
        num_images (int): 图像数
        seed (int): 随机种子
        split (str): 从哪个划分抽样

    Returns:
        QABank: N = per_image × num_images 的问答库，按 (图像抽样顺序, 问题抽样顺序) 排列
    """
    if per_image < 1 or num_images < 1:
        raise DataError(f'per_image 与 num_images 必须为正, 实际 {per_image}, {num_images}')
    by_image = manifest.qa_by_image(split)
    image_ids = [image_id for image_id in manifest.image_ids(split) if image_id in by_image]
    if len(image_ids) < num_images:
        raise DataError(f'划分 {split} 中只有 {len(image_ids)} 张带问答的图像, 需要 {num_images}')
    rng = np.random.default_rng(seed)
    chosen = [image_ids[i] for i in rng.permutation(len(image_ids))[:num_images]]
    pairs = []
    for image_id in chosen:
        records = by_image[image_id]
        if len(records) < per_image:
            raise DataError(f'图像 {image_id} 只有 {len(records)} 个问答对, 需要 {per_image}')
        for i in rng.permutation(len(records))[:per_image]:
            record = records[i]
            pairs.append(QAPair(
                question_id=record.qa_id,
                question_features=question_features[record.question_row],
                answer_index=record.answer_index,
                source_image_id=image_id,
                question_text=record.question_text,
                answer_text=manifest.answer_text(record.answer_index),
            ))
    logger.info('问答库构建完成: %d 张图像 × %d = %d 个事实', num_images, per_image, len(pairs))
    return QABank(pairs)


@dataclass
class GroundedVector:
    """
    一个图像或描述的 VQA 激活向量

    Attributes:
        values: (N,) 对数概率，取值在 [log(prob_floor), 0]
        subject_id: 图像或描述编号
    """

    values: np.ndarray
    subject_id: str = ''

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    def __len__(self):
        return self.values.shape[0]


def compute_u(head, bank, x_inputs, plan=None, prob_floor=DEFAULT_PROB_FLOOR):
    """
    批量计算 u = log max(P(A_i | Q_i, x), prob_floor)

    Args:
        head (VqaHead): 冻结的分类头
        bank (QABank): 问答库
        x_inputs: (input_dim, B)
        plan (DropoutPlan): 默认推理模式；估计互信息时由调用方传入训练模式
        prob_floor (float): 概率下限

    Returns:
        np.ndarray: (N, B)
    """
    x_inputs = as_matrix(x_inputs)
    if x_inputs.shape[0] != head.input_dim:
        raise ShapeError(f'{head.KIND} 输入', head.input_dim, x_inputs.shape[0])
    log_probs = head.pair_log_probs(x_inputs, bank.question_matrix, bank.answers, plan)
    return np.maximum(log_probs, np.log(prob_floor))


def compute_u_image(vqa_head, bank, x_img, subject_id='', plan=None, prob_floor=DEFAULT_PROB_FLOOR):
    """图像的 VQA 激活向量 u_I"""
    return GroundedVector(compute_u(vqa_head, bank, x_img, plan, prob_floor)[:, 0], subject_id)


def compute_u_caption(vqacaption_head, bank, x_cap_bow, subject_id='', plan=None,
                      prob_floor=DEFAULT_PROB_FLOOR):
    """描述的 VQA 激活向量 u_C，输入为词袋编码"""
    return GroundedVector(compute_u(vqacaption_head, bank, x_cap_bow, plan, prob_floor)[:, 0], subject_id)


def extract_hidden_features(head, x_inputs):
    """
    隐藏激活 z_I / z_C = tanh(W x + b)，作为 u 的替代特征

    Args:
        head (VqaHead): 冻结的分类头
        x_inputs: (input_dim, B)

    Returns:
        np.ndarray: (mm_dim, B)
    """
    return head.hidden_features(x_inputs)


class GroundingProjection:
    """
    v = dropout(relu(W·u + b))

    Attributes:
        layer: LinearLayer (D_v × N)
        keep_prob: ReLU 之后的 dropout 保留概率
        site: dropout 位置名
    """

    def __init__(self, layer, keep_prob=0.5, site='v'):
        self.layer = layer
        self.keep_prob = keep_prob
        self.site = site

    @classmethod
    def init(cls, in_dim, out_dim, rng, name, keep_prob=0.5):
        return cls(LinearLayer.init(in_dim, out_dim, rng, name=name), keep_prob, site=name)

    @property
    def in_dim(self):
        return self.layer.in_dim

    @property
    def out_dim(self):
        return self.layer.out_dim

    def forward(self, u, plan=None):
        """
        Returns:
            tuple: (v, 反向缓存)
        """
        plan = plan or DropoutPlan.infer()
        u = as_matrix(u)
        pre = self.layer.forward(u)
        v = plan.apply(self.site, activation('relu', pre), self.keep_prob)
        return v, (u, pre, plan)

    def backward(self, cache, grad_v):
        u, pre, plan = cache
        grad_pre = activation('relu', pre, 'backward', plan.backward(self.site, grad_v))
        return self.layer.backward(u, grad_pre)


def project_v(proj, u, mode='infer', seed=0):
    """
    单个激活向量的投影

    Args:
        proj (GroundingProjection): 投影
        u (GroundedVector | np.ndarray): 激活向量
        mode (str): 'infer' 或 'train'
        seed (int): 训练模式下的 dropout 种子

    Returns:
        np.ndarray: (D_v,)
    """
    values = u.values if isinstance(u, GroundedVector) else np.asarray(u, dtype=np.float64).reshape(-1)
    if values.shape[0] != proj.in_dim:
        raise ShapeError('u 向量', proj.in_dim, values.shape[0])
    plan = DropoutPlan('train', seed) if mode == 'train' else DropoutPlan.infer()
    v, _ = proj.forward(values, plan)
    return v[:, 0]


def write_u_cache(path, matrix, bank_hash, feature_source):
    """
    写出 u（或 z）缓存：特征文件 + 记录问答库摘要的旁注文件

    Args:
        path (str): 特征文件路径
        matrix (np.ndarray): (count, dim)，每行一个样本
        bank_hash (str): QABank.content_hash()
        feature_source (str): 'qa_log_probs' 或 'hidden_activations'
    """
    from utils.features import write_features
    write_features(path, matrix)
    meta = {'bank_hash': bank_hash, 'feature_source': feature_source,
            'count': int(matrix.shape[0]), 'dim': int(matrix.shape[1])}
    with open(path + '.meta.json', 'w', encoding='utf-8') as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write('\n')


def read_u_cache(path, bank_hash=None):
    """
    读取 u 缓存；给定 bank_hash 时检查是否过期

    Returns:
        tuple: (矩阵 (count, dim), 旁注字典)
    """
    from utils.features import read_features
    meta_path = path + '.meta.json'
    if not os.path.exists(meta_path):
        raise StaleCacheError(f'缓存 {path} 缺少旁注文件 {meta_path}')
    with open(meta_path, encoding='utf-8') as f:
        meta = json.load(f)
    if bank_hash is not None and meta.get('bank_hash') != bank_hash:
        logger.warning('缓存 %s 与当前问答库不一致', path)
        raise StaleCacheError(f'缓存 {path} 由另一个问答库生成 ({meta.get("bank_hash", "")[:12]})')
    return read_features(path), meta
