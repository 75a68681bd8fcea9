"""
VQA 与 VQA-Caption 答案分类头
两路 tanh 投影逐元素相乘，再接 M 类答案 softmax，用负对数似然训练
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from utils.errors import DataError, ParameterError, ShapeError
from utils.optim import RmsPropOptimizer
from .base import BaseModel, register_model
from .layers import DropoutPlan, LinearLayer, activation, as_matrix
from .training import MinibatchSampler, TrainingTrace

logger = logging.getLogger(__name__)

# 成对计算答案概率时单块 logits 的元素上限
PAIR_CHUNK_ELEMENTS = 4_000_000


@dataclass
class QAPair:
    """
    一个问答事实

    Attributes:
        question_id: 问题编号
        question_features: 问题编码向量 (d_q,)
        answer_index: 真实答案下标，< M
        source_image_id: 问题所属图像
        question_text / answer_text: 可选的文字，仅用于展示
    """

    question_id: str
    question_features: np.ndarray
    answer_index: int
    source_image_id: str = ''
    question_text: str = ''
    answer_text: str = ''

    def __post_init__(self):
        self.question_features = np.asarray(self.question_features, dtype=np.float64).reshape(-1)
        self.answer_index = int(self.answer_index)


@dataclass
class VqaTriples:
    """
    训练三元组（输入特征, 问题特征, 答案），按行存放样本

    Attributes:
        inputs: (n, d_in)，图像特征或词袋编码
        questions: (n, d_q)
        answers: (n,)
    """

    inputs: np.ndarray
    questions: np.ndarray
    answers: np.ndarray = field(default=None)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.questions = np.atleast_2d(np.asarray(self.questions, dtype=np.float64))
        self.answers = np.asarray(self.answers, dtype=np.int64).reshape(-1)
        if not len(self.inputs) == len(self.questions) == len(self.answers):
            raise ShapeError('三元组', '三个数组行数相同',
                             (len(self.inputs), len(self.questions), len(self.answers)))

    @classmethod
    def from_list(cls, triples):
        """由 [(x, q, a), ...] 构造"""
        if not triples:
            raise DataError('训练三元组为空')
        inputs, questions, answers = zip(*triples)
        return cls(np.stack([np.ravel(x) for x in inputs]),
                   np.stack([np.ravel(q) for q in questions]),
                   np.asarray(answers))

    def __len__(self):
        return len(self.answers)

    def subset(self, index):
        return VqaTriples(self.inputs[index], self.questions[index], self.answers[index])


@register_model
class VqaHead(BaseModel):
    """
    VQA 分类头
    z_in = tanh(W_in x + b_in), z_q = tanh(W_q q + b_q), hidden = z_in ⊙ z_q,
    log P(A | Q, x) = log_softmax(W_s hidden + b_s)

    hidden 之后可选一个 dropout 位置；参与互信息估计时必须打开
    """

    KIND = 'vqa'
    INPUT_NAME = 'image'

    def __init__(self, input_dim=4096, question_dim=2048, mm_dim=1024, num_answers=1000,
                 hidden_keep_prob=None, seed=0):
        if hidden_keep_prob is not None and not 0.0 < hidden_keep_prob <= 1.0:
            raise ParameterError(f'hidden_keep_prob 必须在 (0, 1] 内, 实际 {hidden_keep_prob}')
        self.input_dim = int(input_dim)
        self.question_dim = int(question_dim)
        self.mm_dim = int(mm_dim)
        self.num_answers = int(num_answers)
        self.hidden_keep_prob = hidden_keep_prob
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.proj_input = LinearLayer.init(self.input_dim, self.mm_dim, rng, name=f'proj_{self.INPUT_NAME}')
        self.proj_question = LinearLayer.init(self.question_dim, self.mm_dim, rng, name='proj_question')
        self.answer_layer = LinearLayer.init(self.mm_dim, self.num_answers, rng, name='answer_layer')

    @property
    def hidden_site(self):
        return f'{self.KIND}.hidden'

    def layers(self):
        return [self.proj_input, self.proj_question, self.answer_layer]

    def config_dict(self):
        return {
            'input_dim': self.input_dim,
            'question_dim': self.question_dim,
            'mm_dim': self.mm_dim,
            'num_answers': self.num_answers,
            'hidden_keep_prob': self.hidden_keep_prob,
            'seed': self.seed,
        }

    @classmethod
    def from_config(cls, config):
        return cls(**config)

    def dropout_sites(self):
        if self.hidden_keep_prob is None:
            return {}
        return {self.hidden_site: (self.mm_dim, self.hidden_keep_prob)}

    def hidden_features(self, x_in):
        """
        输入一侧的多模态投影 z = tanh(W_in x + b_in)
        即隐藏激活特征 z_I / z_C

        Args:
            x_in: (input_dim, batch)

        Returns:
            np.ndarray: (mm_dim, batch)
        """
        return np.tanh(self.proj_input.forward(x_in))

    def forward(self, x_in, x_q, plan=None):
        """
        前向计算

        Args:
            x_in: 输入特征 (input_dim, batch)
            x_q: 问题特征 (question_dim, batch)
            plan (DropoutPlan): dropout 掩码来源，默认推理模式

        Returns:
            tuple: (答案对数概率 (M, batch), hidden (mm_dim, batch), 反向缓存)
        """
        plan = plan or DropoutPlan.infer()
        x_in = as_matrix(x_in)
        x_q = as_matrix(x_q)
        if x_in.shape[1] != x_q.shape[1]:
            raise ShapeError('输入与问题的样本数', x_in.shape[1], x_q.shape[1])
        pre_in = self.proj_input.forward(x_in)
        pre_q = self.proj_question.forward(x_q)
        z_in = np.tanh(pre_in)
        z_q = np.tanh(pre_q)
        hidden = z_in * z_q
        dropped = plan.apply(self.hidden_site, hidden, self.hidden_keep_prob)
        logits = self.answer_layer.forward(dropped)
        log_probs = special.log_softmax(logits, axis=0)
        cache = (x_in, x_q, pre_in, pre_q, z_in, z_q, dropped, log_probs, plan)
        return log_probs, hidden, cache

    def backward(self, cache, grad_logits):
        x_in, x_q, pre_in, pre_q, z_in, z_q, dropped, _, plan = cache
        grad_dropped = self.answer_layer.backward(dropped, grad_logits)
        grad_hidden = plan.backward(self.hidden_site, grad_dropped)
        grad_pre_in = activation('tanh', pre_in, 'backward', grad_hidden * z_q)
        grad_pre_q = activation('tanh', pre_q, 'backward', grad_hidden * z_in)
        self.proj_input.backward(x_in, grad_pre_in)
        self.proj_question.backward(x_q, grad_pre_q)

    def nll(self, x_in, x_q, answers, plan=None, compute_grad=False):
        """
        平均负对数似然 mean −log P(a_j | q_j, x_j)

        Args:
            x_in / x_q: 按列存放的输入和问题
            answers: 答案下标 (batch,)
            plan (DropoutPlan): dropout 掩码来源
            compute_grad (bool): 是否把梯度累加到各层

        Returns:
            float: 损失
        """
        answers = np.asarray(answers, dtype=np.int64).reshape(-1)
        self._check_answers(answers)
        log_probs, _, cache = self.forward(x_in, x_q, plan)
        batch = log_probs.shape[1]
        if answers.shape[0] != batch:
            raise ShapeError('答案个数', batch, answers.shape[0])
        columns = np.arange(batch)
        loss = -float(np.mean(log_probs[answers, columns]))
        if compute_grad:
            grad_logits = np.exp(log_probs)
            grad_logits[answers, columns] -= 1.0
            self.backward(cache, grad_logits / batch)
        return loss

    def pair_log_probs(self, x_in, questions, answers, plan=None):
        """
        对每个输入、每个问答事实计算 log P(A_n | Q_n, x_b)

        hidden 上的 dropout 掩码在同一次调用里被所有 (事实, 输入) 组合共用，
        相当于一次参数采样

        Args:
            x_in: (input_dim, B)
            questions: (question_dim, N)
            answers: (N,)
            plan (DropoutPlan): dropout 掩码来源

        Returns:
            np.ndarray: (N, B)
        """
        plan = plan or DropoutPlan.infer()
        answers = np.asarray(answers, dtype=np.int64).reshape(-1)
        self._check_answers(answers)
        z_in = self.hidden_features(x_in)
        z_q = np.tanh(self.proj_question.forward(questions))
        n_pairs = z_q.shape[1]
        if answers.shape[0] != n_pairs:
            raise ShapeError('问答事实个数', n_pairs, answers.shape[0])
        scale = plan.apply(self.hidden_site, np.ones((self.mm_dim, 1)), self.hidden_keep_prob)
        z_q = z_q * scale
        W_s, b_s = self.answer_layer.W, self.answer_layer.b
        out = np.empty((n_pairs, z_in.shape[1]))
        chunk = max(1, PAIR_CHUNK_ELEMENTS // max(1, self.num_answers * n_pairs))
        pairs = np.arange(n_pairs)
        for start in range(0, z_in.shape[1], chunk):
            z_block = z_in[:, start:start + chunk]
            hidden = z_q[:, :, None] * z_block[:, None, :]
            logits = np.tensordot(W_s, hidden, axes=(1, 0)) + b_s[:, :, None]
            out[:, start:start + chunk] = logits[answers, pairs, :] - special.logsumexp(logits, axis=0)
        return out

    def _check_answers(self, answers):
        if answers.size and (answers.min() < 0 or answers.max() >= self.num_answers):
            bad = answers[(answers < 0) | (answers >= self.num_answers)][0]
            raise ParameterError(f'答案下标 {bad} 超出范围 [0, {self.num_answers})')


@register_model
class VqaCaptionHead(VqaHead):
    """
    VQA-Caption 分类头
    结构与 VqaHead 相同，输入换成 1000 维词袋编码
    """

    KIND = 'vqacaption'
    INPUT_NAME = 'caption'

    def __init__(self, input_dim=1000, question_dim=2048, mm_dim=1024, num_answers=1000,
                 hidden_keep_prob=None, seed=0):
        super().__init__(input_dim, question_dim, mm_dim, num_answers, hidden_keep_prob, seed)


def _plan_for(mode, seed):
    return DropoutPlan('train', seed) if mode == 'train' else DropoutPlan.infer()


def vqa_forward(params, x_img, x_q, mode='infer', seed=0):
    """
    单个样本的 VQA 前向

    Args:
        params (VqaHead): 图像分类头
        x_img: 图像特征 (d_img,)
        x_q: 问题特征 (d_q,)
        mode (str): 'infer' 或 'train'
        seed (int): 训练模式下的 dropout 种子

    Returns:
        tuple: (答案对数概率 (M,), hidden (d_mm,))
    """
    log_probs, hidden, _ = params.forward(x_img, x_q, _plan_for(mode, seed))
    return log_probs[:, 0], hidden[:, 0]


def vqacaption_forward(params, x_cap_bow, x_q, mode='infer', seed=0):
    """单个样本的 VQA-Caption 前向，输入为词袋编码"""
    log_probs, hidden, _ = params.forward(x_cap_bow, x_q, _plan_for(mode, seed))
    return log_probs[:, 0], hidden[:, 0]


def answer_prob(head, x_in, x_q, answer_index):
    """
    P(answer_index | x_q, x_in)

    Returns:
        float: (0, 1) 内的概率
    """
    if not 0 <= answer_index < head.num_answers:
        raise ParameterError(f'答案下标 {answer_index} 超出范围 [0, {head.num_answers})')
    log_probs, _, _ = head.forward(x_in, x_q)
    return float(np.exp(log_probs[answer_index, 0]))


def accuracy(head, triples):
    """分类头在三元组上的 top-1 准确率"""
    log_probs, _, _ = head.forward(triples.inputs.T, triples.questions.T)
    return float(np.mean(np.argmax(log_probs, axis=0) == triples.answers))


def train_vqa_head(head, triples, cfg, batch_size=128, iterations=1000, seed=0, log_every=100):
    """
    用 RMSProp 最小化平均负对数似然

    Args:
        head (VqaHead): 待训练的分类头（原地更新）
        triples (VqaTriples | list): 训练三元组
        cfg (RmsPropConfig): 优化器超参数
        batch_size (int): 批大小
        iterations (int): 迭代次数
        seed (int): 批次采样与 dropout 种子
        log_every (int): 记录间隔

    Returns:
        TrainingTrace: 每个记录间隔的小批量损失
    """
    if not isinstance(triples, VqaTriples):
        triples = VqaTriples.from_list(list(triples))
    if len(triples) == 0:
        raise DataError('训练三元组为空')
    head._check_answers(triples.answers)
    rng = np.random.default_rng(seed)
    sampler = MinibatchSampler(len(triples), batch_size, rng)
    optimizer = RmsPropOptimizer(head.trainable_layers(), cfg)
    trace = TrainingTrace()
    mode = 'train' if head.hidden_keep_prob is not None else 'infer'
    for iteration in range(iterations):
        batch = triples.subset(sampler.next())
        plan = DropoutPlan(mode, seed=int(rng.integers(2 ** 62)))
        loss = head.nll(batch.inputs.T, batch.questions.T, batch.answers, plan, compute_grad=True)
        if iteration % log_every == 0 or iteration == iterations - 1:
            trace.log(iteration, loss, lr=optimizer.current_lr)
            logger.info('%s 迭代 %d: 损失 %.6f', head.KIND, iteration, loss)
        optimizer.step()
    return trace
