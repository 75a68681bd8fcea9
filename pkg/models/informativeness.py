"""
问答事实的信息量
用 dropout 采样模型参数，估计事实成立与否 V_i 和描述选择 C 的联合分布，
再按互信息 MI(V_i; C) 给问答库排序
"""

import copy
import csv
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from utils.errors import (DataError, DegenerateMarginalError, EnumerationLimitError, ParameterError,
                          ShapeError)
from .grounding import DEFAULT_PROB_FLOOR
from .layers import DropoutPlan, as_matrix
from .ranking import RankingData

logger = logging.getLogger(__name__)

MAX_ENUMERATION_UNITS = 12
SAMPLE_CHUNK = 256
JOINT_SUM_TOLERANCE = 1e-6
MARGINAL_MODES = ('from_joint', 'point_estimate')
# 旧名称，仍然接受
MARGINAL_MODE_ALIASES = {'paper_literal': 'point_estimate'}


def canonical_marginal_mode(marginal_mode):
    return MARGINAL_MODE_ALIASES.get(marginal_mode, marginal_mode)


@dataclass
class JointTable:
    """
    P(V_i = v, C = C_k) 的估计

    Attributes:
        joint: (2, K)，第 0 行 v=true，第 1 行 v=false
        n_samples: 采样次数，精确枚举时为掩码个数
        seed: 采样种子
    """

    joint: np.ndarray
    n_samples: int = 0
    seed: int = 0

    def __post_init__(self):
        self.joint = np.asarray(self.joint, dtype=np.float64)
        if self.joint.ndim != 2 or self.joint.shape[0] != 2:
            raise ShapeError('联合分布表', '(2, K)', self.joint.shape)

    @property
    def K(self):
        return self.joint.shape[1]

    def total(self):
        return float(self.joint.sum())

    def marginal_v(self):
        return self.joint.sum(axis=1)

    def marginal_c(self):
        return self.joint.sum(axis=0)


@dataclass
class MiResult:
    """
    一个问答事实的互信息

    Attributes:
        qa_index: 在问答库中的下标
        mi_nats: 互信息（自然对数）
        marginals_v: P(V) (2,)
        marginals_c: P(C) (K,)
        entropy_v / entropy_c: 两个边缘分布的熵
    """

    qa_index: int
    mi_nats: float
    marginals_v: np.ndarray
    marginals_c: np.ndarray
    entropy_v: float = 0.0
    entropy_c: float = 0.0


class FusionJointPredictor:
    """
    对一张图像，在一次参数采样 θ 下同时给出
    p = P(A_i | Q_i, I, θ)（对整个问答库）和 q = P_cap(C_k | I, θ)（对 K 条候选描述）

    图像一侧的 u 在每次采样中由 VQA 头重新计算，描述一侧的 u 使用缓存的确定值。
    VQA 头与排序模型使用同一个 DropoutPlan，因此两者看到同一组采样参数。
    """

    def __init__(self, head, ranker, bank, image_x, captions, image_t=None, image_id='',
                 prob_floor=DEFAULT_PROB_FLOOR):
        if captions.n_captions == 0:
            raise DataError('候选描述为空')
        if bank.N == 0:
            raise DataError('问答库为空')
        u_dim = getattr(ranker, 'u_dim', None)
        if u_dim and u_dim != bank.N:
            raise ShapeError('排序模型的 u 维度', bank.N, u_dim)
        self.head = head
        self.ranker = ranker
        self.bank = bank
        self.image_x = as_matrix(image_x)
        self.questions = bank.question_matrix
        self.answers = bank.answers
        self.log_floor = np.log(prob_floor)
        self.data = RankingData(
            image_ids=[image_id],
            caption_ids=list(captions.caption_ids),
            caption_to_image=np.zeros(captions.n_captions, dtype=np.int64),
            image_x=self.image_x,
            caption_x=captions.caption_x,
            caption_u=captions.caption_u,
            image_t=None if image_t is None else as_matrix(image_t),
            caption_t=captions.caption_t,
        )

    @property
    def N(self):
        return self.bank.N

    @property
    def K(self):
        return self.data.n_captions

    def dropout_sites(self):
        sites = dict(self.head.dropout_sites())
        sites.update(self.ranker.dropout_sites())
        return sites

    def predict(self, plan):
        """
        Returns:
            tuple: (p (N,), q (K,))
        """
        log_p = self.head.pair_log_probs(self.image_x, self.questions, self.answers, plan)[:, 0]
        data = copy.copy(self.data)
        data.image_u = np.maximum(log_p, self.log_floor)[:, None]
        scores = self.ranker.score_matrix(data, plan=plan)[0]
        return np.exp(log_p), special.softmax(scores)


def sample_seeds(seed, n_samples):
    """每次采样的子种子，只由 (seed, 采样序号) 决定"""
    return np.random.SeedSequence(int(seed)).generate_state(n_samples, dtype=np.uint64)


def _accumulate(predictor, seeds):
    n = predictor.N
    sum_pq = np.zeros((n, predictor.K))
    sum_q = np.zeros(predictor.K)
    ps, qs = [], []
    for s in seeds:
        p, q = predictor.predict(DropoutPlan('train', int(s), shared_across_batch=True))
        ps.append(p)
        qs.append(q)
    if ps:
        P, Q = np.stack(ps), np.stack(qs)
        sum_pq += P.T @ Q
        sum_q += Q.sum(axis=0)
    return sum_pq, sum_q


def mc_joint_bank(predictor, n_samples=5000, seed=0, workers=1):
    """
    蒙特卡洛估计问答库中每个事实与描述的联合分布，所有事实共用同一组采样

    joint[true][k] = mean_s p_s·q_s(k), joint[false][k] = mean_s (1 − p_s)·q_s(k)

    采样按固定大小分块，块内和块间都按采样序号归约，结果与 workers 无关

    Args:
        predictor (FusionJointPredictor): 联合预测器
        n_samples (int): 采样次数
        seed (int): 随机种子
        workers (int): 线程数

    Returns:
        list: 每个事实一个 JointTable
    """
    if n_samples < 1:
        raise ParameterError(f'n_samples 必须为正, 实际 {n_samples}')
    if predictor.K == 0:
        raise DataError('候选描述为空')
    if not predictor.dropout_sites():
        logger.warning('模型没有 dropout 位置，联合分布退化为确定预测的乘积')
    seeds = sample_seeds(seed, n_samples)
    chunks = [seeds[i:i + SAMPLE_CHUNK] for i in range(0, n_samples, SAMPLE_CHUNK)]
    if workers and workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda chunk: _accumulate(predictor, chunk), chunks))
    else:
        parts = [_accumulate(predictor, chunk) for chunk in chunks]
    sum_pq = np.zeros((predictor.N, predictor.K))
    sum_q = np.zeros(predictor.K)
    for part_pq, part_q in parts:
        sum_pq += part_pq
        sum_q += part_q
    joint_true = sum_pq / n_samples
    joint_false = np.maximum(sum_q[None, :] / n_samples - joint_true, 0.0)
    return [JointTable(np.stack([joint_true[i], joint_false[i]]), n_samples, seed) for i in range(predictor.N)]


def mc_joint(predictor, qa_index, n_samples=5000, seed=0, workers=1):
    """单个问答事实的联合分布估计"""
    if not 0 <= qa_index < predictor.N:
        raise ParameterError(f'qa_index {qa_index} 超出范围 [0, {predictor.N})')
    return mc_joint_bank(predictor, n_samples, seed, workers)[qa_index]


def enumerable_sites(predictor):
    """需要枚举的 dropout 位置；keep_prob 为 1 的位置是确定的，不计入"""
    return {site: (units, keep) for site, (units, keep) in sorted(predictor.dropout_sites().items())
            if keep is not None and keep < 1.0}


def exact_joint_oracle(predictor, max_units=MAX_ENUMERATION_UNITS):
    """
    对所有 dropout 掩码按伯努利概率加权，精确计算联合分布

    Args:
        predictor (FusionJointPredictor): 联合预测器
        max_units (int): 允许枚举的最多单元数

    Returns:
        list: 每个事实一个 JointTable
    """
    sites = enumerable_sites(predictor)
    total_units = sum(units for units, _ in sites.values())
    if total_units > max_units:
        raise EnumerationLimitError(f'共有 {total_units} 个 dropout 单元, 精确枚举最多支持 {max_units} 个')
    layout = [(site, units, keep) for site, (units, keep) in sites.items()]
    keep_per_unit = np.concatenate([np.full(units, keep) for _, units, keep in layout] or [np.zeros(0)])
    joint_true = np.zeros((predictor.N, predictor.K))
    marginal_q = np.zeros(predictor.K)
    n_masks = 0
    for bits in itertools.product((1.0, 0.0), repeat=total_units):
        bits = np.array(bits)
        weight = float(np.prod(np.where(bits == 1.0, keep_per_unit, 1.0 - keep_per_unit)))
        if weight == 0.0:
            continue
        overrides, offset = {}, 0
        for site, units, _ in layout:
            overrides[site] = bits[offset:offset + units].reshape(units, 1)
            offset += units
        p, q = predictor.predict(DropoutPlan('train', 0, shared_across_batch=True, overrides=overrides))
        joint_true += weight * np.outer(p, q)
        marginal_q += weight * q
        n_masks += 1
    joint_false = np.maximum(marginal_q[None, :] - joint_true, 0.0)
    return [JointTable(np.stack([joint_true[i], joint_false[i]]), n_masks, 0) for i in range(predictor.N)]


def point_marginals(predictor):
    """
    推理模式下的点估计 P(A_i | Q_i, I) 和 P_cap(C_k | I)

    Returns:
        tuple: (p (N,), q (K,))
    """
    return predictor.predict(DropoutPlan.infer())


def mutual_information(joint, marginal_mode='from_joint', p_v=None, p_c=None, qa_index=0):
    """
    MI = Σ_{v,k} joint · log(joint / (P_v · P_c))，joint = 0 的项记为 0

    Args:
        joint (JointTable): 联合分布
        marginal_mode (str): 'from_joint' 由联合分布求和得到边缘分布；
            'point_estimate' 使用调用方给出的确定性边缘分布
        p_v: point_estimate 时 P(V=true) 标量或 (2,) 向量
        p_c: point_estimate 时 (K,) 描述分布
        qa_index (int): 写入结果的事实下标

    Returns:
        MiResult: 互信息
    """
    marginal_mode = canonical_marginal_mode(marginal_mode)
    table = joint.joint if isinstance(joint, JointTable) else np.asarray(joint, dtype=np.float64)
    if abs(table.sum() - 1.0) > JOINT_SUM_TOLERANCE:
        raise ParameterError(f'联合分布之和为 {table.sum():.12g}, 不是 1')
    if marginal_mode == 'from_joint':
        marginal_v = table.sum(axis=1)
        marginal_c = table.sum(axis=0)
    elif marginal_mode == 'point_estimate':
        if p_v is None or p_c is None:
            raise ParameterError('point_estimate 模式需要给出 p_v 和 p_c')
        p_v = np.asarray(p_v, dtype=np.float64).reshape(-1)
        marginal_v = np.array([p_v[0], 1.0 - p_v[0]]) if p_v.size == 1 else p_v
        marginal_c = np.asarray(p_c, dtype=np.float64).reshape(-1)
        if marginal_v.shape != (2,) or marginal_c.shape != (table.shape[1],):
            raise ShapeError('边缘分布', ((2,), (table.shape[1],)), (marginal_v.shape, marginal_c.shape))
    else:
        raise ParameterError(f'未知的 marginal_mode: {marginal_mode}，可选 {MARGINAL_MODES}')
    product = np.outer(marginal_v, marginal_c)
    support = table > 0.0
    if np.any(support & (product <= 0.0)):
        raise DegenerateMarginalError('联合概率大于 0 的位置边缘概率为 0')
    mi = float(np.sum(table[support] * np.log(table[support] / product[support])))
    return MiResult(
        qa_index=int(qa_index),
        mi_nats=mi,
        marginals_v=marginal_v,
        marginals_c=marginal_c,
        entropy_v=float(stats.entropy(marginal_v)),
        entropy_c=float(stats.entropy(marginal_c)),
    )


def select_informative_qa(predictor, n_samples=5000, seed=0, marginal_mode='from_joint', workers=1, top=None):
    """
    按互信息从大到小给问答库排序，并列时下标小的在前

    Args:
        predictor (FusionJointPredictor): 一张图像及其候选描述上的联合预测器
        n_samples (int): dropout 采样次数
        seed (int): 随机种子
        marginal_mode (str): 见 mutual_information
        workers (int): 线程数
        top (int): 只返回前 top 个

    Returns:
        list: MiResult 列表
    """
    marginal_mode = canonical_marginal_mode(marginal_mode)
    if marginal_mode not in MARGINAL_MODES:
        raise ParameterError(f'未知的 marginal_mode: {marginal_mode}，可选 {MARGINAL_MODES}')
    tables = mc_joint_bank(predictor, n_samples, seed, workers)
    if marginal_mode == 'point_estimate':
        p, q = point_marginals(predictor)
        results = [mutual_information(t, marginal_mode, p[i], q, qa_index=i) for i, t in enumerate(tables)]
    else:
        results = [mutual_information(t, marginal_mode, qa_index=i) for i, t in enumerate(tables)]
    results.sort(key=lambda r: (-r.mi_nats, r.qa_index))
    if results:
        best = results[0]
        logger.info('信息量最大的问答事实: #%d (%s), MI %.6f nats', best.qa_index,
                    predictor.bank[best.qa_index].question_id, best.mi_nats)
    return results[:top] if top else results


def write_mi_csv(results, bank, path):
    """
    写出互信息排序表：rank, qa_index, qa_id, question, answer, mi_nats

    Args:
        results (list): select_informative_qa 的结果
        bank (QABank): 问答库
        path (str): 输出路径
    """
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['rank', 'qa_index', 'qa_id', 'question', 'answer', 'mi_nats'])
        for rank, result in enumerate(results, start=1):
            pair = bank[result.qa_index]
            writer.writerow([rank, result.qa_index, pair.question_id, pair.question_text, pair.answer_text,
                             repr(result.mi_nats)])
