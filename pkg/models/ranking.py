"""
图像-描述排序模型
VQA 无关模型、分数级融合、表示级融合，检索损失及其训练过程
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from utils.errors import DataError, DegenerateInputError, ParameterError, ShapeError
from utils.optim import RmsPropOptimizer
from .base import BaseModel, register_model
from .grounding import GroundedVector, GroundingProjection
from .layers import DropoutPlan, LinearLayer, activation, as_matrix, log_softmax_rows, softmax_rows
from .training import TrainingTrace

logger = logging.getLogger(__name__)

FUSION_MODES = ('full', 'caption_only', 'image_only', 'agnostic_deeper')


@dataclass
class RankingData:
    """
    一个数据划分上排序模型的全部输入，矩阵按列存放样本

    Attributes:
        image_ids / caption_ids: 编号
        caption_to_image: (n_captions,) 每条描述所属图像的下标
        image_x / caption_x: 编码器特征 x_I (D_xI, n_img), x_C (D_xC, n_cap)
        image_u / caption_u: VQA 激活 u_I (N, n_img), u_C (N, n_cap)，N=0 模型可为 None
        image_t / caption_t: 预先计算好的单位向量 t，给定时直接使用
    """

    image_ids: list
    caption_ids: list
    caption_to_image: np.ndarray
    image_x: np.ndarray = None
    caption_x: np.ndarray = None
    image_u: np.ndarray = None
    caption_u: np.ndarray = None
    image_t: np.ndarray = None
    caption_t: np.ndarray = None
    captions_of_image: list = field(default=None, repr=False)

    def __post_init__(self):
        self.caption_to_image = np.asarray(self.caption_to_image, dtype=np.int64)
        if len(self.caption_to_image) != len(self.caption_ids):
            raise ShapeError('caption_to_image', len(self.caption_ids), len(self.caption_to_image))
        if len(self.caption_ids) and (self.caption_to_image.min() < 0
                                      or self.caption_to_image.max() >= len(self.image_ids)):
            raise DataError('caption_to_image 引用了不存在的图像')
        if self.captions_of_image is None:
            groups = [[] for _ in self.image_ids]
            for c, i in enumerate(self.caption_to_image):
                groups[i].append(c)
            self.captions_of_image = [np.asarray(g, dtype=np.int64) for g in groups]

    @property
    def n_images(self):
        return len(self.image_ids)

    @property
    def n_captions(self):
        return len(self.caption_ids)

    def _take(self, matrix, index):
        return None if matrix is None else matrix[:, index]

    def select(self, image_index, caption_index=None):
        """
        取子集；caption_index 默认为所选图像的全部描述
        """
        image_index = np.asarray(image_index, dtype=np.int64)
        if caption_index is None:
            caption_index = np.concatenate([self.captions_of_image[i] for i in image_index]
                                           or [np.zeros(0, dtype=np.int64)])
        caption_index = np.asarray(caption_index, dtype=np.int64)
        remap = {int(old): new for new, old in enumerate(image_index)}
        missing = [c for c in caption_index if int(self.caption_to_image[c]) not in remap]
        if missing:
            raise DataError(f'描述 {self.caption_ids[missing[0]]} 的图像不在子集中')
        return RankingData(
            image_ids=[self.image_ids[i] for i in image_index],
            caption_ids=[self.caption_ids[c] for c in caption_index],
            caption_to_image=[remap[int(self.caption_to_image[c])] for c in caption_index],
            image_x=self._take(self.image_x, image_index),
            caption_x=self._take(self.caption_x, caption_index),
            image_u=self._take(self.image_u, image_index),
            caption_u=self._take(self.caption_u, caption_index),
            image_t=self._take(self.image_t, image_index),
            caption_t=self._take(self.caption_t, caption_index),
        )

    def first_n_images(self, n):
        """只保留前 n 张图像及其描述；n 为 0 或 None 时返回全部"""
        if not n or n >= self.n_images:
            return self
        return self.select(np.arange(n))

    def limit_captions_per_image(self, k):
        """每张图像只保留前 k 条描述"""
        if not k:
            return self
        keep = np.concatenate([g[:k] for g in self.captions_of_image] or [np.zeros(0, dtype=np.int64)])
        return self.select(np.arange(self.n_images), np.sort(keep))

    def with_u(self, image_u, caption_u):
        return replace(self, image_u=image_u, caption_u=caption_u, captions_of_image=None)


def _normalize_columns(y, what):
    norms = np.linalg.norm(y, axis=0, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f'{what} 存在零范数向量，无法归一化')
    return y / norms, norms


def _normalize_backward(t, norms, grad_t):
    return (grad_t - t * np.sum(t * grad_t, axis=0, keepdims=True)) / norms


def retrieval_probabilities(scores, direction):
    """
    检索概率
    image_given_caption: 每列（描述）在所有图像上做 softmax，得到 P_im(I|C)
    caption_given_image: 每行（图像）在所有描述上做 softmax，得到 P_cap(C|I)

    Args:
        scores: (n_images, n_captions) 分数矩阵
        direction (str): 检索方向

    Returns:
        np.ndarray: 与 scores 同形状的概率矩阵
    """
    scores = as_matrix(scores)
    if direction == 'image_given_caption':
        return softmax_rows(scores.T).T
    if direction == 'caption_given_image':
        return softmax_rows(scores)
    raise ParameterError(f'未知的检索方向: {direction}')


def ranking_loss_and_grad(scores):
    """
    批内负样本的检索负对数似然及其对分数的梯度

    L = mean_j [ −log P_im(I_j|C_j) − log P_cap(C_j|I_j) ]

    Args:
        scores: (K, K)，对角线为真实配对

    Returns:
        tuple: (损失, 梯度 (K, K))
    """
    scores = as_matrix(scores)
    if scores.shape[0] != scores.shape[1]:
        raise ShapeError('排序损失的分数矩阵', '方阵', scores.shape)
    k = scores.shape[0]
    log_p_cap = log_softmax_rows(scores)
    log_p_im = log_softmax_rows(scores.T).T
    diag = np.arange(k)
    loss = -float(np.mean(log_p_im[diag, diag] + log_p_cap[diag, diag]))
    grad = np.exp(log_p_cap) + np.exp(log_p_im)
    grad[diag, diag] -= 2.0
    return loss, grad / k


def ranking_loss(scores):
    """只返回损失值"""
    return ranking_loss_and_grad(scores)[0]


class Ranker(BaseModel):
    """
    排序模型基类
    子类把图像和描述各自编码，再由 pair_scores 组合成分数矩阵
    """

    def image_side(self, data, index, plan):
        raise NotImplementedError

    def caption_side(self, data, index, plan):
        raise NotImplementedError

    def pair_scores(self, image_emb, caption_emb):
        raise NotImplementedError

    def backward(self, image_emb, caption_emb, grad_scores):
        raise NotImplementedError

    def score_matrix(self, data, image_index=None, caption_index=None, plan=None):
        """
        计算 (图像 × 描述) 分数矩阵

        Args:
            data (RankingData): 数据
            image_index / caption_index: 下标，默认全部
            plan (DropoutPlan): 默认推理模式

        Returns:
            np.ndarray: (len(image_index), len(caption_index))
        """
        plan = plan or DropoutPlan.infer()
        if image_index is None:
            image_index = np.arange(data.n_images)
        if caption_index is None:
            caption_index = np.arange(data.n_captions)
        image_emb = self.image_side(data, np.asarray(image_index), plan)
        caption_emb = self.caption_side(data, np.asarray(caption_index), plan)
        return self.pair_scores(image_emb, caption_emb)

    def batch_loss(self, data, image_index, caption_index, plan=None, compute_grad=False):
        """
        一个批次上的排序损失；第 j 张图像与第 j 条描述是真实配对

        Returns:
            float: 损失
        """
        plan = plan or DropoutPlan.infer()
        image_emb = self.image_side(data, np.asarray(image_index), plan)
        caption_emb = self.caption_side(data, np.asarray(caption_index), plan)
        loss, grad = ranking_loss_and_grad(self.pair_scores(image_emb, caption_emb))
        if compute_grad:
            self.backward(image_emb, caption_emb, grad)
        return loss


@register_model
class AgnosticEmbedder(Ranker):
    """
    VQA 无关模型
    t_I = W x_I / ‖W x_I‖, t_C = x_C / ‖x_C‖, S_t = ⟨t_I, t_C⟩

    数据中带有预先计算的 t 时直接使用，对应加载已发布模型的嵌入
    """

    KIND = 'agnostic'

    def __init__(self, image_dim=4096, caption_dim=1024, seed=0):
        self.image_dim = int(image_dim)
        self.caption_dim = int(caption_dim)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.proj_image = LinearLayer.init(self.image_dim, self.caption_dim, rng, name='proj_image',
                                           use_bias=False)

    @property
    def embed_dim(self):
        return self.caption_dim

    def layers(self):
        return [self.proj_image]

    def config_dict(self):
        return {'image_dim': self.image_dim, 'caption_dim': self.caption_dim, 'seed': self.seed}

    @classmethod
    def from_config(cls, config):
        return cls(**config)

    def embed_images(self, x_img):
        """返回 (t, 反向缓存)"""
        x_img = as_matrix(x_img)
        t, norms = _normalize_columns(self.proj_image.forward(x_img), 'W·x_I')
        return t, (x_img, t, norms)

    def embed_captions(self, x_cap):
        t, _ = _normalize_columns(as_matrix(x_cap), 'x_C')
        return t

    def image_t(self, data, index):
        if data.image_t is not None:
            return data.image_t[:, index]
        return self.embed_images(data.image_x[:, index])[0]

    def caption_t(self, data, index):
        if data.caption_t is not None:
            return data.caption_t[:, index]
        return self.embed_captions(data.caption_x[:, index])

    def image_side(self, data, index, plan):
        if data.image_t is not None:
            return data.image_t[:, index], None
        return self.embed_images(data.image_x[:, index])

    def caption_side(self, data, index, plan):
        return self.caption_t(data, index)

    def pair_scores(self, image_emb, caption_emb):
        return image_emb[0].T @ caption_emb

    def backward(self, image_emb, caption_emb, grad_scores):
        t_img, cache = image_emb
        if cache is None:
            return
        x_img, t, norms = cache
        grad_t = caption_emb @ grad_scores.T
        self.proj_image.backward(x_img, _normalize_backward(t, norms, grad_t))


@register_model
class ScoreFusionModel(Ranker):
    """
    分数级融合
    S = α·S_t + β·S_v，S_v = ⟨v_I, v_C⟩，v = dropout(relu(W·u + b))

    投影在训练集上只用 S_v 训练，α、β 在验证集上拟合
    """

    KIND = 'score_fusion'

    def __init__(self, embedder_config=None, u_dim=3000, embed_dim=4096, keep_prob=0.5,
                 alpha=1.0, beta=0.0, seed=0):
        self.embedder = AgnosticEmbedder(**(embedder_config or {}))
        self.embedder.proj_image.frozen = True
        self.u_dim = int(u_dim)
        self.embed_dim = int(embed_dim)
        self.keep_prob = keep_prob
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.proj_v_image = GroundingProjection.init(self.u_dim, self.embed_dim, rng, 'score.v_image', keep_prob)
        self.proj_v_caption = GroundingProjection.init(self.u_dim, self.embed_dim, rng, 'score.v_caption',
                                                       keep_prob)

    def layers(self):
        return [self.embedder.proj_image, self.proj_v_image.layer, self.proj_v_caption.layer]

    def config_dict(self):
        return {
            'embedder_config': self.embedder.config_dict(),
            'u_dim': self.u_dim,
            'embed_dim': self.embed_dim,
            'keep_prob': self.keep_prob,
            'alpha': self.alpha,
            'beta': self.beta,
            'seed': self.seed,
        }

    @classmethod
    def from_config(cls, config):
        return cls(**config)

    def extra_state(self):
        return {'alpha': self.alpha, 'beta': self.beta}

    def load_extra_state(self, state):
        self.alpha = float(state.get('alpha', self.alpha))
        self.beta = float(state.get('beta', self.beta))

    def dropout_sites(self):
        if self.keep_prob is None:
            return {}
        return {p.site: (p.out_dim, p.keep_prob) for p in (self.proj_v_image, self.proj_v_caption)}

    def _check_u(self, u, what):
        if u is None:
            raise DataError(f'分数级融合需要 {what}')
        if u.shape[0] != self.u_dim:
            raise ShapeError(what, self.u_dim, u.shape[0])

    def image_side(self, data, index, plan):
        self._check_u(data.image_u, 'u_I')
        t = self.embedder.image_t(data, index)
        v, cache = self.proj_v_image.forward(data.image_u[:, index], plan)
        return t, v, cache

    def caption_side(self, data, index, plan):
        self._check_u(data.caption_u, 'u_C')
        t = self.embedder.caption_t(data, index)
        v, cache = self.proj_v_caption.forward(data.caption_u[:, index], plan)
        return t, v, cache

    def agnostic_scores(self, image_emb, caption_emb):
        return image_emb[0].T @ caption_emb[0]

    def grounded_scores(self, image_emb, caption_emb):
        return image_emb[1].T @ caption_emb[1]

    def pair_scores(self, image_emb, caption_emb):
        return fused_score(self, self.agnostic_scores(image_emb, caption_emb),
                           self.grounded_scores(image_emb, caption_emb))

    def backward(self, image_emb, caption_emb, grad_scores):
        # t 一侧冻结，只有 β·S_v 对投影有梯度
        _, v_img, cache_img = image_emb
        _, v_cap, cache_cap = caption_emb
        self.proj_v_image.backward(cache_img, self.beta * (v_cap @ grad_scores.T))
        self.proj_v_caption.backward(cache_cap, self.beta * (v_img @ grad_scores))


@register_model
class RepFusionModel(Ranker):
    """
    表示级融合
    r_I = dropout(relu(W_tI t_I + W_vI v_I + b_rI)), r_C 同理, S = ⟨r_I, r_C⟩

    fusion_mode 控制使用哪一侧的 VQA 表示，关闭的通路参数清零并冻结，
    前向时完全跳过
    """

    KIND = 'rep_fusion'

    def __init__(self, embedder_config=None, u_dim=3000, v_dim=4096, r_dim=4096, keep_prob=0.5,
                 fusion_mode='full', seed=0):
        if fusion_mode not in FUSION_MODES:
            raise ParameterError(f'未知的 fusion_mode: {fusion_mode}，可选 {FUSION_MODES}')
        self.embedder = AgnosticEmbedder(**(embedder_config or {}))
        self.embedder.proj_image.frozen = True
        self.u_dim = int(u_dim)
        self.v_dim = int(v_dim)
        self.r_dim = int(r_dim)
        self.keep_prob = keep_prob
        self.fusion_mode = fusion_mode
        self.seed = seed
        t_dim = self.embedder.embed_dim
        rng = np.random.default_rng(seed)
        self.proj_u_image = GroundingProjection.init(max(self.u_dim, 1), self.v_dim, rng, 'rep.v_image', keep_prob)
        self.proj_u_caption = GroundingProjection.init(max(self.u_dim, 1), self.v_dim, rng, 'rep.v_caption',
                                                       keep_prob)
        self.W_tI = LinearLayer.init(t_dim, self.r_dim, rng, name='rep.W_tI')
        self.W_vI = LinearLayer.init(self.v_dim, self.r_dim, rng, name='rep.W_vI', use_bias=False)
        self.W_tC = LinearLayer.init(t_dim, self.r_dim, rng, name='rep.W_tC')
        self.W_vC = LinearLayer.init(self.v_dim, self.r_dim, rng, name='rep.W_vC', use_bias=False)
        if not self.uses_image_grounding:
            self.proj_u_image.layer.freeze_zero()
            self.W_vI.freeze_zero()
        if not self.uses_caption_grounding:
            self.proj_u_caption.layer.freeze_zero()
            self.W_vC.freeze_zero()

    @property
    def uses_image_grounding(self):
        return self.fusion_mode in ('full', 'image_only')

    @property
    def uses_caption_grounding(self):
        return self.fusion_mode in ('full', 'caption_only')

    def layers(self):
        return [self.embedder.proj_image, self.proj_u_image.layer, self.proj_u_caption.layer,
                self.W_tI, self.W_vI, self.W_tC, self.W_vC]

    def config_dict(self):
        return {
            'embedder_config': self.embedder.config_dict(),
            'u_dim': self.u_dim,
            'v_dim': self.v_dim,
            'r_dim': self.r_dim,
            'keep_prob': self.keep_prob,
            'fusion_mode': self.fusion_mode,
            'seed': self.seed,
        }

    @classmethod
    def from_config(cls, config):
        return cls(**config)

    def dropout_sites(self):
        if self.keep_prob is None:
            return {}
        sites = {}
        if self.uses_image_grounding:
            sites[self.proj_u_image.site] = (self.v_dim, self.keep_prob)
        if self.uses_caption_grounding:
            sites[self.proj_u_caption.site] = (self.v_dim, self.keep_prob)
        sites['rep.r_image'] = (self.r_dim, self.keep_prob)
        sites['rep.r_caption'] = (self.r_dim, self.keep_prob)
        return sites

    def represent(self, t, v, W_t, W_v, site, plan):
        """
        r = dropout(relu(W_t t + W_v v + b))；v 为 None 时跳过 VQA 通路

        Returns:
            tuple: (r, 反向缓存)
        """
        pre = W_t.forward(t)
        if v is not None:
            pre = pre + W_v.forward(v)
        r = plan.apply(site, activation('relu', pre), self.keep_prob)
        return r, (t, v, pre, plan, site)

    def _side(self, t, u, proj, W_t, W_v, enabled, site, plan):
        v, v_cache = None, None
        if enabled:
            if u is None:
                raise DataError(f'fusion_mode={self.fusion_mode} 需要 VQA 激活向量')
            if u.shape[0] != self.u_dim:
                raise ShapeError('u 向量', self.u_dim, u.shape[0])
            v, v_cache = proj.forward(u, plan)
        r, r_cache = self.represent(t, v, W_t, W_v, site, plan)
        return r, (r_cache, v_cache)

    def image_side(self, data, index, plan):
        t = self.embedder.image_t(data, index)
        u = None if data.image_u is None else data.image_u[:, index]
        return self._side(t, u, self.proj_u_image, self.W_tI, self.W_vI,
                          self.uses_image_grounding, 'rep.r_image', plan)

    def caption_side(self, data, index, plan):
        t = self.embedder.caption_t(data, index)
        u = None if data.caption_u is None else data.caption_u[:, index]
        return self._side(t, u, self.proj_u_caption, self.W_tC, self.W_vC,
                          self.uses_caption_grounding, 'rep.r_caption', plan)

    def pair_scores(self, image_emb, caption_emb):
        return image_emb[0].T @ caption_emb[0]

    def _backward_side(self, cache, grad_r, proj, W_t, W_v):
        (t, v, pre, plan, site), v_cache = cache
        grad_pre = activation('relu', pre, 'backward', plan.backward(site, grad_r))
        W_t.backward(t, grad_pre)
        if v is not None:
            proj.backward(v_cache, W_v.backward(v, grad_pre))

    def backward(self, image_emb, caption_emb, grad_scores):
        r_img, cache_img = image_emb
        r_cap, cache_cap = caption_emb
        self._backward_side(cache_img, r_cap @ grad_scores.T, self.proj_u_image, self.W_tI, self.W_vI)
        self._backward_side(cache_cap, r_img @ grad_scores, self.proj_u_caption, self.W_tC, self.W_vC)


def agnostic_score(emb, x_img, x_cap):
    """
    S_t = ⟨t_I, t_C⟩

    Returns:
        float: [-1, 1] 内的分数
    """
    t_img, _ = emb.embed_images(x_img)
    t_cap = emb.embed_captions(x_cap)
    return float((t_img.T @ t_cap)[0, 0])


def _values(u):
    return u.values if isinstance(u, GroundedVector) else np.asarray(u, dtype=np.float64).reshape(-1)


def _plan(mode, seed):
    return DropoutPlan('train', seed) if mode == 'train' else DropoutPlan.infer()


def grounded_score(model, u_img, u_cap, mode='infer', seed=0):
    """
    S_v = ⟨v_I, v_C⟩

    Args:
        model (ScoreFusionModel): 分数级融合模型
        u_img / u_cap (GroundedVector): 激活向量

    Returns:
        float: 非负分数
    """
    plan = _plan(mode, seed)
    u_img, u_cap = _values(u_img), _values(u_cap)
    for u, what in ((u_img, 'u_I'), (u_cap, 'u_C')):
        if u.shape[0] != model.u_dim:
            raise ShapeError(what, model.u_dim, u.shape[0])
    v_img, _ = model.proj_v_image.forward(u_img, plan)
    v_cap, _ = model.proj_v_caption.forward(u_cap, plan)
    return float((v_img.T @ v_cap)[0, 0])


def fused_score(model, S_t, S_v):
    """S = α·S_t + β·S_v，标量或矩阵均可"""
    return model.alpha * S_t + model.beta * S_v


def rep_fusion_score(model, t_img, v_img, t_cap, v_cap, mode='infer', seed=0):
    """
    ⟨r_I, r_C⟩，v 直接给定；被 fusion_mode 关闭的一侧忽略 v

    Returns:
        float: 分数
    """
    plan = _plan(mode, seed)
    v_img = as_matrix(v_img) if model.uses_image_grounding else None
    v_cap = as_matrix(v_cap) if model.uses_caption_grounding else None
    r_img, _ = model.represent(as_matrix(t_img), v_img, model.W_tI, model.W_vI, 'rep.r_image', plan)
    r_cap, _ = model.represent(as_matrix(t_cap), v_cap, model.W_tC, model.W_vC, 'rep.r_caption', plan)
    return float((r_img.T @ r_cap)[0, 0])


def sample_ranking_batch(data, batch_size, rng):
    """
    采样 K 张不同图像，每张随机取一条描述

    Returns:
        tuple: (图像下标, 描述下标)
    """
    eligible = np.array([i for i, caps in enumerate(data.captions_of_image) if len(caps)], dtype=np.int64)
    k = min(batch_size, len(eligible))
    if k < 2:
        raise DataError(f'训练集中有描述的图像不足 2 张 ({len(eligible)})')
    images = rng.choice(eligible, size=k, replace=False)
    captions = np.array([data.captions_of_image[i][rng.integers(len(data.captions_of_image[i]))]
                         for i in images], dtype=np.int64)
    return images, captions


def validation_objective(model, val, first_n_images=None):
    """验证集上 caption R@1 + image R@1，用于选择最佳检查点"""
    from utils.evaluation import evaluate
    report = evaluate(model, val, first_n_images=first_n_images)
    return report.caption_recall[1] + report.image_recall[1], report


def fit_ranker(model, train, val, cfg, batch_size=100, iterations=1000, seed=0, eval_every=1000,
               log_every=100, tag=None):
    """
    通用训练循环：批内负样本、RMSProp、在验证集上保留最佳检查点

    Args:
        model (Ranker): 模型（原地训练）
        train (RankingData): 训练集
        val (RankingData): 验证集，None 时返回最后的模型
        cfg (RmsPropConfig): 优化器超参数
        batch_size (int): 每批的配对数 K
        iterations (int): 迭代次数
        seed (int): 随机种子
        eval_every (int): 验证间隔
        log_every (int): 记录间隔
        tag (str): 日志前缀

    Returns:
        tuple: (最佳模型, TrainingTrace)
    """
    if train.n_captions == 0:
        raise DataError('训练集为空')
    tag = tag or model.KIND
    rng = np.random.default_rng(seed)
    optimizer = RmsPropOptimizer(model.trainable_layers(), cfg)
    trace = TrainingTrace()
    best, best_score = None, -np.inf
    for iteration in range(iterations):
        images, captions = sample_ranking_batch(train, batch_size, rng)
        plan = DropoutPlan('train', seed=int(rng.integers(2 ** 62)))
        loss = model.batch_loss(train, images, captions, plan, compute_grad=True)
        last = iteration == iterations - 1
        extra = {}
        if val is not None and val.n_captions and (iteration % eval_every == 0 or last):
            score, report = validation_objective(model, val)
            extra = {'val_caption_r1': report.caption_recall[1], 'val_image_r1': report.image_recall[1]}
            if score > best_score:
                best, best_score = model.copy(), score
                trace.best_iteration = iteration
            logger.info('%s 迭代 %d: 验证 R@1 caption %.4f image %.4f', tag, iteration,
                        extra['val_caption_r1'], extra['val_image_r1'])
        if iteration % log_every == 0 or last or extra:
            trace.log(iteration, loss, lr=optimizer.current_lr, **extra)
            if iteration % log_every == 0:
                logger.info('%s 迭代 %d: 损失 %.6f 学习率 %.2e', tag, iteration, loss, optimizer.current_lr)
        optimizer.step()
    if best is None:
        best = model.copy()
        trace.best_iteration = iterations - 1
    return best, trace


def train_agnostic(train, val, cfg, image_dim, caption_dim, batch_size=100, iterations=1000, seed=0,
                   eval_every=1000, log_every=100):
    """用检索负对数似然训练 VQA 无关模型的 W_I"""
    model = AgnosticEmbedder(image_dim, caption_dim, seed=seed)
    return fit_ranker(model, train, val, cfg, batch_size, iterations, seed, eval_every, log_every)


def fit_alpha_beta(model, val, step=0.05, first_n_images=None):
    """
    在验证集上网格搜索 α, β ∈ {0, step, …, 1}（排除 (0, 0)）

    目标是 caption R@1 与 image R@1 的平均值；并列时取较大的 α，再取较小的 β

    Args:
        model (ScoreFusionModel): 模型，α、β 原地更新
        val (RankingData): 验证集
        step (float): 网格步长

    Returns:
        dict: alpha、beta、objective
    """
    from utils.evaluation import ScoreMatrix, recall_at_k
    if val is None or val.n_captions == 0:
        raise DataError('验证集为空，无法拟合 alpha 和 beta')
    val = val.first_n_images(first_n_images)
    plan = DropoutPlan.infer()
    image_emb = model.image_side(val, np.arange(val.n_images), plan)
    caption_emb = model.caption_side(val, np.arange(val.n_captions), plan)
    S_t = model.agnostic_scores(image_emb, caption_emb)
    S_v = model.grounded_scores(image_emb, caption_emb)
    grid = np.round(np.arange(0.0, 1.0 + step / 2, step), 10)
    best = None
    for alpha in grid:
        for beta in grid:
            if alpha == 0.0 and beta == 0.0:
                continue
            sm = ScoreMatrix.from_data(alpha * S_t + beta * S_v, val)
            objective = 0.5 * (recall_at_k(sm, 1, 'caption') + recall_at_k(sm, 1, 'image'))
            key = (objective, alpha, -beta)
            if best is None or key > best[0]:
                best = (key, alpha, beta, objective)
    _, model.alpha, model.beta, objective = best
    model.alpha, model.beta = float(model.alpha), float(model.beta)
    logger.info('alpha/beta 拟合完成: alpha=%.2f beta=%.2f 验证目标 %.4f', model.alpha, model.beta, objective)
    return {'alpha': model.alpha, 'beta': model.beta, 'objective': float(objective)}


def train_score_fusion(train, val, embedder, cfg, embed_dim=4096, keep_prob=0.5, batch_size=100,
                       iterations=1000, seed=0, eval_every=1000, log_every=100, step=0.05):
    """
    两阶段训练分数级融合模型
    第一阶段只用 S_v 训练投影，第二阶段在验证集上拟合 α、β

    Args:
        embedder (AgnosticEmbedder): 已训练好的 VQA 无关模型，保持冻结

    Returns:
        tuple: (ScoreFusionModel, TrainingTrace)
    """
    if val is None or val.n_captions == 0:
        raise DataError('验证集为空，无法拟合 alpha 和 beta')
    if train.image_u is None:
        raise DataError('分数级融合需要 u 特征')
    model = ScoreFusionModel(embedder.config_dict(), u_dim=train.image_u.shape[0], embed_dim=embed_dim,
                             keep_prob=keep_prob, alpha=0.0, beta=1.0, seed=seed)
    model.embedder.load_state_dict(embedder.state_dict())
    # 第一阶段 α=0, β=1，训练分数即 S_v
    best, trace = fit_ranker(model, train, val, cfg, batch_size, iterations, seed, eval_every, log_every,
                             tag='score_fusion')
    fit_alpha_beta(best, val, step)
    return best, trace


def train_rep_fusion(train, val, embedder, cfg, fusion_mode='full', v_dim=4096, r_dim=4096, keep_prob=0.5,
                     batch_size=100, iterations=1000, seed=0, eval_every=1000, log_every=100):
    """
    联合训练表示级融合的全部参数与 u 投影

    Returns:
        tuple: (验证集上最佳的 RepFusionModel, TrainingTrace)
    """
    if train.n_captions == 0:
        raise DataError('训练集为空')
    u_dim = 0 if train.image_u is None else train.image_u.shape[0]
    model = RepFusionModel(embedder.config_dict(), u_dim=u_dim, v_dim=v_dim, r_dim=r_dim,
                           keep_prob=keep_prob, fusion_mode=fusion_mode, seed=seed)
    model.embedder.load_state_dict(embedder.state_dict())
    return fit_ranker(model, train, val, cfg, batch_size, iterations, seed, eval_every, log_every,
                      tag=f'rep_fusion[{fusion_mode}]')
