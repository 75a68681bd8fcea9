"""
合成数据集
每个场景有一组二值事实 f；图像特征是 f 的随机线性映射加噪声，
描述只提到部分成立的事实，因此图像携带描述没有的信息。
问题询问某个事实，答案下标由 (事实序号, 事实取值) 决定
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ParameterError
from .features import write_features
from .manifest import SPLITS, CaptionRecord, DatasetManifest, ImageRecord, QARecord

logger = logging.getLogger(__name__)

FILES = {
    'image': 'image_features.mmft',
    'caption': 'caption_features.mmft',
    'bow': 'caption_bow.mmft',
    'question': 'question_features.mmft',
    'facts': 'facts.mmft',
    'manifest': 'manifest.tsv',
    'world': 'world.json',
}
FILLER_WORDS_PER_CAPTION = 3


@dataclass
class SyntheticWorldConfig:
    """
    合成数据集参数

    Attributes:
        n_facts: 每个场景的二值事实数
        n_train / n_val / n_test: 各划分的场景数
        captions_per_image: 每张图像的描述数
        caption_omission_rate: 成立的事实在某条描述中被省略的概率
        noise_sigma: 特征噪声标准差
        caption_style_sigma: 每条描述独有的风格扰动
        fact_prob: 事实成立的先验概率
        answer_vocab_size: 答案词表大小 M
        image_dim / caption_dim / bow_dim / question_dim: 特征维度
        questions_per_scene: 每个场景生成的问答对数
        seed: 随机种子
    """

    n_facts: int = 12
    n_train: int = 2000
    n_val: int = 300
    n_test: int = 500
    captions_per_image: int = 5
    caption_omission_rate: float = 0.4
    noise_sigma: float = 0.1
    caption_style_sigma: float = 0.3
    fact_prob: float = 0.5
    answer_vocab_size: int = 32
    image_dim: int = 64
    caption_dim: int = 48
    bow_dim: int = 100
    question_dim: int = 32
    questions_per_scene: int = 6
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.caption_omission_rate < 1.0:
            raise ParameterError(f'caption_omission_rate 必须在 [0, 1) 内, 实际 {self.caption_omission_rate}')
        if self.n_facts < 1 or self.captions_per_image < 1:
            raise ParameterError('n_facts 与 captions_per_image 必须为正')
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ParameterError('场景数不能为负')
        if self.answer_vocab_size < 2:
            raise ParameterError(f'answer_vocab_size 至少为 2, 实际 {self.answer_vocab_size}')
        if self.bow_dim < self.n_facts + FILLER_WORDS_PER_CAPTION:
            raise ParameterError(f'bow_dim 至少为 n_facts + {FILLER_WORDS_PER_CAPTION}')
        if not 1 <= self.questions_per_scene <= self.n_facts:
            raise ParameterError(f'questions_per_scene 必须在 [1, {self.n_facts}] 内')
        if min(self.image_dim, self.caption_dim, self.question_dim) < 1:
            raise ParameterError('特征维度必须为正')
        if self.noise_sigma < 0 or self.caption_style_sigma < 0 or not 0.0 <= self.fact_prob <= 1.0:
            raise ParameterError('noise_sigma、caption_style_sigma 不能为负, fact_prob 必须在 [0, 1] 内')

    def scenes(self, split):
        return {'train': self.n_train, 'val': self.n_val, 'test': self.n_test}[split]

    def to_dict(self):
        return asdict(self)


def answer_index(fact, value, vocab_size):
    """事实 fact 取值 value 时的答案下标"""
    return (2 * int(fact) + int(value)) % vocab_size


@dataclass
class SyntheticWorld:
    """
    生成结果，矩阵按行存放样本，可直接写成特征文件
    """

    config: SyntheticWorldConfig
    facts: np.ndarray
    image_features: np.ndarray
    caption_features: np.ndarray
    caption_bow: np.ndarray
    question_features: np.ndarray
    manifest: DatasetManifest
    maps: dict = field(default_factory=dict, repr=False)

    def counts(self):
        return {
            'image': len(self.image_features),
            'caption': len(self.caption_features),
            'bow': len(self.caption_bow),
            'question': len(self.question_features),
        }

    def write(self, out_dir):
        """
        写出全部文件

        Returns:
            dict: 文件种类 -> 路径
        """
        os.makedirs(out_dir, exist_ok=True)
        paths = {key: os.path.join(out_dir, name) for key, name in FILES.items()}
        write_features(paths['image'], self.image_features)
        write_features(paths['caption'], self.caption_features)
        write_features(paths['bow'], self.caption_bow)
        write_features(paths['question'], self.question_features)
        write_features(paths['facts'], self.facts)
        self.manifest.write(paths['manifest'])
        with open(paths['world'], 'w', encoding='utf-8') as f:
            json.dump({'config': self.config.to_dict(), 'counts': self.counts(), 'files': FILES}, f,
                      sort_keys=True, indent=1)
            f.write('\n')
        logger.info('合成数据集写入 %s: %s', out_dir, self.counts())
        return paths


def generate_synthetic_world(cfg):
    """
    按配置生成合成数据集，相同种子得到逐字节相同的结果

    Args:
        cfg (SyntheticWorldConfig): 配置

    Returns:
        SyntheticWorld: 生成结果
    """
    rng = np.random.default_rng(cfg.seed)
    n, M = cfg.n_facts, cfg.answer_vocab_size
    A_img = rng.normal(size=(cfg.image_dim, n)) / np.sqrt(n)
    A_cap = rng.normal(size=(cfg.caption_dim, n)) / np.sqrt(n)
    question_embedding = rng.normal(size=(n, cfg.question_dim))

    facts, images, captions, bows, questions = [], [], [], [], []
    manifest = DatasetManifest(answers={
        a: f'fact{a // 2}:{"yes" if a % 2 else "no"}' if a < 2 * n else f'a{a}' for a in range(M)})
    for split in SPLITS:
        for s in range(cfg.scenes(split)):
            image_id = f'{split}{s:05d}'
            f = (rng.random(n) < cfg.fact_prob).astype(np.float64)
            image_row = len(images)
            facts.append(f)
            images.append(A_img @ f + cfg.noise_sigma * rng.normal(size=cfg.image_dim))
            manifest.images[image_id] = ImageRecord(image_id, split, image_row)
            for c in range(cfg.captions_per_image):
                mentioned = f * (rng.random(n) >= cfg.caption_omission_rate)
                style = cfg.caption_style_sigma * rng.normal(size=cfg.caption_dim)
                captions.append(A_cap @ mentioned + style + cfg.noise_sigma * rng.normal(size=cfg.caption_dim))
                bow = np.zeros(cfg.bow_dim)
                bow[np.flatnonzero(mentioned)] = 1.0
                fillers = n + rng.choice(cfg.bow_dim - n, size=FILLER_WORDS_PER_CAPTION, replace=False)
                bow[fillers] = 1.0
                bows.append(bow)
                words = [f'fact{j}' for j in np.flatnonzero(mentioned)] + [f'w{k}' for k in sorted(fillers)]
                row = len(captions) - 1
                manifest.captions.append(CaptionRecord(f'{image_id}_c{c}', split, row, row, image_id,
                                                       ' '.join(words)))
            for j in rng.choice(n, size=cfg.questions_per_scene, replace=False):
                questions.append(question_embedding[j] + cfg.noise_sigma * rng.normal(size=cfg.question_dim))
                manifest.qa.append(QARecord(f'{image_id}_q{j}', split, len(questions) - 1,
                                            answer_index(j, f[j], M), image_id, f'is fact{j} present?'))

    def stack(rows, dim):
        return np.stack(rows) if rows else np.zeros((0, dim))

    world = SyntheticWorld(
        config=cfg,
        facts=stack(facts, n),
        image_features=stack(images, cfg.image_dim),
        caption_features=stack(captions, cfg.caption_dim),
        caption_bow=stack(bows, cfg.bow_dim),
        question_features=stack(questions, cfg.question_dim),
        manifest=manifest,
        maps={'A_img': A_img, 'A_cap': A_cap, 'question_embedding': question_embedding},
    )
    manifest.validate(world.counts(), num_answers=M)
    return world
