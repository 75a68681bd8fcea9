"""
测试共用的夹具
一个很小的合成数据集，以及在它上面训练好的分类头、问答库和排序模型
"""

from types import SimpleNamespace

import numpy as np
import pytest

from config import TestingConfig
from utils.synthetic import SyntheticWorldConfig, generate_synthetic_world

TINY_WORLD = dict(n_facts=6, n_train=60, n_val=20, n_test=20, captions_per_image=3, answer_vocab_size=12,
                  image_dim=16, caption_dim=12, bow_dim=20, question_dim=8, questions_per_scene=4, seed=0)


class TinyConfig(TestingConfig):
    HEAD_ITERATIONS = 150
    RANKER_ITERATIONS = 60
    EVAL_EVERY = 30
    LOG_EVERY = 30
    MI_SAMPLES = 64
    SCORE_WORKERS = 2


@pytest.fixture(scope='session')
def tiny_world():
    return generate_synthetic_world(SyntheticWorldConfig(**TINY_WORLD))


@pytest.fixture(scope='session')
def data_dir(tiny_world, tmp_path_factory):
    path = tmp_path_factory.mktemp('tiny_world')
    tiny_world.write(str(path))
    return str(path)


@pytest.fixture(scope='session')
def dataset(data_dir):
    from utils.dataset import Dataset
    return Dataset(data_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def trained(dataset, tmp_path_factory):
    """
    走一遍完整流水线：两个分类头 → 问答库与 u 缓存 → agnostic → 表示级融合
    """
    from utils import pipeline
    cfg = TinyConfig
    out = str(tmp_path_factory.mktemp('pipeline'))
    vqa, _, _ = pipeline.train_head(dataset, cfg, 'image', seed=0, hidden_keep_prob=0.5)
    vqacaption, _, _ = pipeline.train_head(dataset, cfg, 'caption', seed=0)
    bank = dataset.build_bank(cfg.QA_PER_IMAGE, cfg.QA_NUM_IMAGES, seed=0)
    pipeline.extract_grounding(dataset, vqa, vqacaption, bank, out, prob_floor=cfg.PROB_FLOOR)
    bank_hash = bank.content_hash()
    splits = {split: pipeline.load_ranking_split(dataset, split, out, bank_hash=bank_hash)
              for split in ('train', 'val', 'test')}
    embedder, _ = pipeline.build_embedder(splits['train'], splits['val'], cfg, seed=0)
    rep, _ = pipeline.train_fusion('rep', splits['train'], splits['val'], embedder, cfg, seed=0)
    return SimpleNamespace(cfg=cfg, out=out, vqa=vqa, vqacaption=vqacaption, bank=bank, splits=splits,
                           embedder=embedder, rep=rep)


@pytest.fixture
def client(trained):
    from app import create_app
    from utils.serving import ServingRegistry
    registry = ServingRegistry(trained.rep, trained.splits['test'], 'test', head=trained.vqa, bank=trained.bank,
                               workers=1)
    app = create_app('testing', registry=registry)
    return app.test_client()
