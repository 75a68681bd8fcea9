"""
有限差分梯度检查
用中心差分验证手写反向传播
"""

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class GradCheckReport:
    """
    梯度检查结果

    Attributes:
        max_rel_error: 所有采样参数中的最大相对误差
        tolerance: 判定阈值
        passed: max_rel_error ≤ tolerance 且损失始终有限
        per_layer: 每层的最大相对误差
        n_checked: 检查的参数个数
        diagnostic: 失败原因
    """

    max_rel_error: float
    tolerance: float
    passed: bool
    per_layer: dict = field(default_factory=dict)
    n_checked: int = 0
    diagnostic: str = ''

    def summary(self):
        status = '通过' if self.passed else '失败'
        lines = [f'梯度检查{status}: 最大相对误差 {self.max_rel_error:.3e} (阈值 {self.tolerance:.0e}, '
                 f'检查 {self.n_checked} 个参数)']
        for name, err in self.per_layer.items():
            lines.append(f'  {name:<24} {err:.3e}')
        if self.diagnostic:
            lines.append(f'  {self.diagnostic}')
        return '\n'.join(lines)


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(objective, layers, tolerance=1e-4, h=1e-5, n_per_layer=200, seed=0, floor=1e-6):
    """
    对每层随机抽取参数，比较解析梯度和中心差分

    Args:
        objective: 可调用对象 objective(compute_grad) -> float；
            compute_grad=True 时同时把梯度累加到各层
        layers (list): 参与检查的 LinearLayer
        tolerance (float): 允许的最大相对误差
        h (float): 差分步长
        n_per_layer (int): 每层抽取的参数个数（不足时全部检查）
        seed (int): 抽样种子
        floor (float): 相对误差分母的下限，避免梯度接近 0 时误判

    Returns:
        GradCheckReport: 检查结果
    """
    rng = np.random.default_rng(seed)
    for layer in layers:
        layer.zero_grad()
    base_loss = objective(True)
    if not np.isfinite(base_loss):
        return GradCheckReport(float('inf'), tolerance, False, diagnostic=f'损失不是有限值: {base_loss}')
    analytic = {id(layer): [g.copy() for _, _, g in layer.parameters()] for layer in layers}
    for layer in layers:
        layer.zero_grad()

    per_layer = {}
    n_checked = 0
    worst = 0.0
    for layer in layers:
        params = layer.parameters()
        grads = analytic[id(layer)]
        sizes = [p.size for _, p, _ in params]
        total = sum(sizes)
        picks = rng.choice(total, size=min(n_per_layer, total), replace=False)
        layer_worst = 0.0
        for flat in np.sort(picks):
            which = 0
            while flat >= sizes[which]:
                flat -= sizes[which]
                which += 1
            _, param, _ = params[which]
            index = np.unravel_index(flat, param.shape)
            original = param[index]
            param[index] = original + h
            loss_plus = objective(False)
            param[index] = original - h
            loss_minus = objective(False)
            param[index] = original
            if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
                return GradCheckReport(float('inf'), tolerance, False, per_layer, n_checked,
                                       diagnostic=f'{layer.name} 扰动后损失不是有限值')
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            err = relative_error(grads[which][index], numeric, floor)
            layer_worst = max(layer_worst, err)
            n_checked += 1
        per_layer[layer.name] = layer_worst
        worst = max(worst, layer_worst)

    report = GradCheckReport(worst, tolerance, worst <= tolerance, per_layer, n_checked)
    if not report.passed:
        logger.warning('梯度检查未通过: 最大相对误差 %.3e', worst)
    return report


def _tiny_ranking_data(rng, n_images, image_dim, caption_dim, u_dim):
    from models.ranking import RankingData
    return RankingData(
        image_ids=[f'i{i}' for i in range(n_images)],
        caption_ids=[f'c{i}' for i in range(n_images)],
        caption_to_image=np.arange(n_images),
        image_x=rng.normal(size=(image_dim, n_images)),
        caption_x=rng.normal(size=(caption_dim, n_images)),
        image_u=np.log(rng.uniform(0.05, 1.0, size=(u_dim, n_images))),
        caption_u=np.log(rng.uniform(0.05, 1.0, size=(u_dim, n_images))),
    )


def gradcheck_suite(seed=0, tolerance=1e-4, keep_prob=0.5, n_per_layer=200, dropout_mode='infer'):
    """
    在小尺寸随机数据上检查所有可训练模型的反向传播
    每层至少有 n_per_layer 个参数；dropout_mode='train' 时每次求值使用同一组掩码

    Returns:
        dict: 模型名 -> GradCheckReport
    """
    from models.layers import DropoutPlan
    from models.ranking import AgnosticEmbedder, RepFusionModel, ScoreFusionModel
    from models.vqa import VqaCaptionHead, VqaHead

    rng = np.random.default_rng(seed)
    reports = {}

    def plan():
        return DropoutPlan(dropout_mode, seed=seed)

    for head_cls in (VqaHead, VqaCaptionHead):
        head = head_cls(input_dim=20, question_dim=16, mm_dim=12, num_answers=18, hidden_keep_prob=keep_prob,
                        seed=seed)
        x, q = rng.normal(size=(20, 10)), rng.normal(size=(16, 10))
        answers = rng.integers(0, 18, size=10)
        reports[head.KIND] = gradient_check(
            lambda grad, head=head, x=x, q=q, a=answers: head.nll(x, q, a, plan(), compute_grad=grad),
            head.trainable_layers(), tolerance, n_per_layer=n_per_layer, seed=seed)

    data = _tiny_ranking_data(rng, n_images=8, image_dim=20, caption_dim=12, u_dim=16)
    index = np.arange(data.n_images)
    embedder = AgnosticEmbedder(image_dim=20, caption_dim=12, seed=seed)
    models = [embedder,
              ScoreFusionModel(embedder.config_dict(), u_dim=16, embed_dim=14, keep_prob=keep_prob, alpha=0.5,
                               beta=1.0, seed=seed)]
    models += [RepFusionModel(embedder.config_dict(), u_dim=16, v_dim=14, r_dim=18, keep_prob=keep_prob,
                              fusion_mode=mode, seed=seed) for mode in ('full', 'caption_only', 'image_only')]
    for model in models:
        name = model.KIND if not hasattr(model, 'fusion_mode') else f'{model.KIND}[{model.fusion_mode}]'
        reports[name] = gradient_check(
            lambda grad, model=model: model.batch_loss(data, index, index, plan(), compute_grad=grad),
            model.trainable_layers(), tolerance, n_per_layer=n_per_layer, seed=seed)
    for name, report in reports.items():
        logger.info('%s (%s): %s', name, dropout_mode, report.summary().splitlines()[0])
    return reports
