"""
问答库、u 向量与投影测试
"""

import json
import os

import numpy as np
import pytest

from models.grounding import (GroundingProjection, QABank, build_qa_bank, compute_u, compute_u_caption,
                              compute_u_image, extract_hidden_features, project_v, read_u_cache, write_u_cache)
from models.layers import LinearLayer
from models.vqa import QAPair, VqaCaptionHead, VqaHead, answer_prob
from utils import pipeline
from utils.errors import DataError, ShapeError, StaleCacheError


def toy_bank(rng, n=5, question_dim=4, num_answers=7):
    return QABank([QAPair(f'q{i}', rng.normal(size=question_dim), int(rng.integers(num_answers)), f'img{i}')
                   for i in range(n)])


class TestQABank:

    def test_size(self, dataset):
        bank = dataset.build_bank(per_image=3, num_images=4, seed=0)
        assert bank.N == 12
        assert bank.question_matrix.shape == (dataset.question_dim, 12)

    def test_one_per_image_variant(self, dataset):
        bank = dataset.build_bank(per_image=1, num_images=12, seed=0)
        assert bank.N == 12
        assert len({pair.source_image_id for pair in bank.pairs}) == 12

    def test_deterministic(self, dataset):
        a = dataset.build_bank(3, 4, seed=7)
        b = dataset.build_bank(3, 4, seed=7)
        assert [p.question_id for p in a.pairs] == [p.question_id for p in b.pairs]
        assert a.content_hash() == b.content_hash()
        assert dataset.build_bank(3, 4, seed=8).content_hash() != a.content_hash()

    def test_not_enough_images(self, dataset):
        with pytest.raises(DataError):
            dataset.build_bank(per_image=1, num_images=10_000, seed=0)

    def test_not_enough_questions(self, dataset):
        with pytest.raises(DataError):
            build_qa_bank(dataset.manifest, dataset.question_features, per_image=50, num_images=1)

    def test_answer_text_from_manifest(self, dataset):
        bank = dataset.build_bank(3, 4, seed=0)
        for pair in bank.pairs:
            fact = int(pair.question_id.rsplit('_q', 1)[1])
            assert pair.answer_text.startswith(f'fact{fact}:')

    def test_save_and_load(self, dataset, tmp_path):
        bank = dataset.build_bank(3, 4, seed=0)
        path = str(tmp_path / 'bank.json')
        bank.save(path)
        loaded = pipeline.load_bank(path, dataset)
        assert loaded.content_hash() == bank.content_hash()

    def test_load_detects_edits(self, dataset, tmp_path):
        bank = dataset.build_bank(3, 4, seed=0)
        path = str(tmp_path / 'bank.json')
        bank.save(path)
        with open(path, encoding='utf-8') as f:
            saved = json.load(f)
        saved['pairs'] = saved['pairs'][::-1]
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(saved, f)
        with pytest.raises(StaleCacheError):
            pipeline.load_bank(path, dataset)


class TestComputeU:

    def test_zero_head(self, rng):
        head = VqaHead(input_dim=6, question_dim=4, mm_dim=3, num_answers=1000)
        for layer in head.layers():
            layer.W.fill(0.0)
        bank = toy_bank(rng, num_answers=1000)
        u = compute_u_image(head, bank, rng.normal(size=6), 'img')
        np.testing.assert_allclose(u.values, -np.log(1000.0), atol=1e-12)
        assert u.values[0] == pytest.approx(-6.907755, abs=1e-6)
        assert len(u) == 5

    def test_matches_answer_prob_loop(self, rng):
        head = VqaHead(input_dim=6, question_dim=4, mm_dim=5, num_answers=7, seed=2)
        bank = toy_bank(rng)
        x = rng.normal(size=6)
        u = compute_u_image(head, bank, x)
        for i, pair in enumerate(bank.pairs):
            expected = np.log(answer_prob(head, x, pair.question_features, pair.answer_index))
            assert u.values[i] == pytest.approx(expected, abs=1e-12)

    def test_caption_head(self, rng):
        head = VqaCaptionHead(input_dim=9, question_dim=4, mm_dim=5, num_answers=7, seed=2)
        bank = toy_bank(rng)
        bow = (rng.random(9) < 0.3).astype(float)
        u = compute_u_caption(head, bank, bow, 'cap')
        assert u.subject_id == 'cap'
        assert np.all(u.values <= 0.0)

    def test_probability_floor(self, rng):
        head = VqaHead(input_dim=2, question_dim=2, mm_dim=2, num_answers=3)
        head.answer_layer.W.fill(0.0)
        head.answer_layer.b[:, 0] = [0.0, -1000.0, 0.0]
        bank = QABank([QAPair('q', [1.0, 1.0], 1)])
        u = compute_u(head, bank, np.ones((2, 4)), prob_floor=1e-12)
        np.testing.assert_allclose(u, np.log(1e-12))

    def test_batch_shape(self, rng):
        head = VqaHead(input_dim=6, question_dim=4, mm_dim=5, num_answers=7)
        u = compute_u(head, toy_bank(rng), rng.normal(size=(6, 11)))
        assert u.shape == (5, 11)

    def test_input_dim_mismatch(self, rng):
        head = VqaHead(input_dim=6, question_dim=4, mm_dim=5, num_answers=7)
        with pytest.raises(ShapeError):
            compute_u(head, toy_bank(rng), rng.normal(size=(5, 2)))


class TestProjection:

    def test_zero_projection(self):
        proj = GroundingProjection(LinearLayer.zeros(4, 3, name='v'), keep_prob=None)
        np.testing.assert_array_equal(project_v(proj, np.ones(4)), np.zeros(3))

    def test_relu_gate(self):
        layer = LinearLayer.zeros(4, 3, name='v')
        layer.b.fill(-1.0)
        proj = GroundingProjection(layer, keep_prob=0.5)
        np.testing.assert_array_equal(project_v(proj, np.ones(4), mode='train', seed=3), np.zeros(3))

    def test_nonnegative(self, rng):
        proj = GroundingProjection.init(6, 8, rng, 'score.v_image', keep_prob=0.5)
        v = project_v(proj, rng.normal(size=6), mode='train', seed=1)
        assert np.all(v >= 0.0)

    def test_dimension_mismatch(self, rng):
        proj = GroundingProjection.init(6, 8, rng, 'v')
        with pytest.raises(ShapeError):
            project_v(proj, np.ones(5))

    def test_hidden_features_zero_weights(self):
        head = VqaHead(input_dim=4, question_dim=3, mm_dim=5, num_answers=2)
        head.proj_input.W.fill(0.0)
        assert not extract_hidden_features(head, np.ones((4, 3))).any()


class TestUCache:

    def test_round_trip(self, tmp_path, rng):
        path = str(tmp_path / 'u_image_train.mmft')
        matrix = np.log(rng.uniform(0.1, 1.0, size=(7, 5)))
        write_u_cache(path, matrix, 'abc', 'qa_log_probs')
        loaded, meta = read_u_cache(path, 'abc')
        np.testing.assert_array_equal(loaded, matrix.astype(np.float32).astype(np.float64))
        assert meta == {'bank_hash': 'abc', 'feature_source': 'qa_log_probs', 'count': 7, 'dim': 5}

    def test_stale(self, tmp_path, rng):
        path = str(tmp_path / 'u.mmft')
        write_u_cache(path, rng.normal(size=(2, 3)), 'abc', 'qa_log_probs')
        with pytest.raises(StaleCacheError):
            read_u_cache(path, 'other')

    def test_missing_sidecar(self, tmp_path, rng):
        path = str(tmp_path / 'u.mmft')
        write_u_cache(path, rng.normal(size=(2, 3)), 'abc', 'qa_log_probs')
        os.remove(path + '.meta.json')
        with pytest.raises(StaleCacheError):
            read_u_cache(path)


class TestExtractGrounding:

    def test_caches_cover_every_split(self, trained):
        for split in ('train', 'val', 'test'):
            data = trained.splits[split]
            assert data.image_u.shape == (trained.bank.N, data.n_images)
            assert data.caption_u.shape == (trained.bank.N, data.n_captions)
            assert np.all(data.image_u <= 0.0)

    def test_hidden_activations(self, dataset, trained, tmp_path):
        out = str(tmp_path)
        pipeline.extract_grounding(dataset, trained.vqa, trained.vqacaption, trained.bank, out,
                                   feature_source='hidden_activations', splits=('val',))
        data = pipeline.load_ranking_split(dataset, 'val', out, 'hidden_activations')
        assert data.image_u.shape == (trained.vqa.mm_dim, data.n_images)
        assert np.all(np.abs(data.caption_u) <= 1.0)

    def test_unknown_feature_source(self, tmp_path):
        from utils.errors import ParameterError
        with pytest.raises(ParameterError):
            pipeline.grounding_path(str(tmp_path), 'image', 'train', 'pixels')
