"""
排序模型测试
分数函数、检索概率、排序损失、融合模型训练与 alpha/beta 拟合
"""

import numpy as np
import pytest

from models.layers import DropoutPlan
from models.ranking import (AgnosticEmbedder, RankingData, RepFusionModel, ScoreFusionModel, agnostic_score,
                            fit_alpha_beta, fused_score, grounded_score, ranking_loss, ranking_loss_and_grad,
                            rep_fusion_score, retrieval_probabilities, sample_ranking_batch, train_rep_fusion,
                            train_score_fusion)
from utils.errors import DataError, DegenerateInputError, ParameterError, ShapeError
from utils.evaluation import ScoreMatrix, best_ranks, recall_at_k
from utils.optim import RmsPropConfig


def toy_data(rng, n_images=6, captions_per_image=1, image_dim=5, caption_dim=4, u_dim=3):
    n_captions = n_images * captions_per_image
    return RankingData(
        image_ids=[f'i{i}' for i in range(n_images)],
        caption_ids=[f'c{c}' for c in range(n_captions)],
        caption_to_image=np.repeat(np.arange(n_images), captions_per_image),
        image_x=rng.normal(size=(image_dim, n_images)),
        caption_x=rng.normal(size=(caption_dim, n_captions)),
        image_u=np.log(rng.uniform(0.05, 1.0, size=(u_dim, n_images))),
        caption_u=np.log(rng.uniform(0.05, 1.0, size=(u_dim, n_captions))),
    )


class TestScores:

    def test_agnostic_identical_and_orthogonal(self):
        emb = AgnosticEmbedder(image_dim=2, caption_dim=2)
        emb.proj_image.W = np.eye(2)
        assert agnostic_score(emb, [3.0, 4.0], [0.6, 0.8]) == pytest.approx(1.0, abs=1e-15)
        assert agnostic_score(emb, [1.0, 0.0], [0.0, 2.0]) == 0.0

    def test_agnostic_zero_norm(self):
        emb = AgnosticEmbedder(image_dim=2, caption_dim=2)
        with pytest.raises(DegenerateInputError):
            agnostic_score(emb, [1.0, 1.0], [0.0, 0.0])

    def test_grounded_zero_projection(self, rng):
        model = ScoreFusionModel({'image_dim': 3, 'caption_dim': 2}, u_dim=4, embed_dim=5)
        model.proj_v_image.layer.W.fill(0.0)
        assert grounded_score(model, rng.normal(size=4), rng.normal(size=4)) == 0.0

    def test_grounded_nonnegative(self, rng):
        model = ScoreFusionModel({'image_dim': 3, 'caption_dim': 2}, u_dim=4, embed_dim=5, seed=1)
        for seed in range(20):
            assert grounded_score(model, rng.normal(size=4), rng.normal(size=4), mode='train', seed=seed) >= 0.0

    def test_grounded_dimension(self, rng):
        model = ScoreFusionModel({'image_dim': 3, 'caption_dim': 2}, u_dim=4, embed_dim=5)
        with pytest.raises(ShapeError):
            grounded_score(model, np.ones(3), np.ones(4))

    def test_fused_score(self):
        model = ScoreFusionModel({'image_dim': 3, 'caption_dim': 2}, u_dim=4, embed_dim=5, alpha=0.5, beta=0.5)
        assert fused_score(model, 0.4, 0.2) == pytest.approx(0.3)
        model.alpha, model.beta = 1.0, 0.0
        assert fused_score(model, 0.4, 0.2) == 0.4
        model.alpha, model.beta = 0.0, 1.0
        assert fused_score(model, 0.4, 0.2) == 0.2

    def test_alpha_one_beta_zero_matches_agnostic(self, rng):
        data = toy_data(rng)
        embedder = AgnosticEmbedder(image_dim=5, caption_dim=4, seed=2)
        model = ScoreFusionModel(embedder.config_dict(), u_dim=3, embed_dim=6, alpha=1.0, beta=0.0)
        model.embedder.load_state_dict(embedder.state_dict())
        np.testing.assert_array_equal(model.score_matrix(data), embedder.score_matrix(data))

    def test_alpha_one_beta_zero_matches_agnostic_on_splits(self, trained):
        model = ScoreFusionModel(trained.embedder.config_dict(), u_dim=trained.bank.N, embed_dim=8, alpha=1.0,
                                 beta=0.0, seed=5)
        model.embedder.load_state_dict(trained.embedder.state_dict())
        for split in ('val', 'test'):
            data = trained.splits[split]
            fused = ScoreMatrix.from_data(model.score_matrix(data), data)
            plain = ScoreMatrix.from_data(trained.embedder.score_matrix(data), data)
            for direction in ('caption', 'image'):
                np.testing.assert_array_equal(best_ranks(fused, direction), best_ranks(plain, direction))

    def test_rep_zero_weights(self, rng):
        model = RepFusionModel({'image_dim': 3, 'caption_dim': 4}, u_dim=3, v_dim=5, r_dim=6)
        for layer in model.layers():
            layer.W.fill(0.0)
        assert rep_fusion_score(model, rng.normal(size=4), rng.random(5), rng.normal(size=4), rng.random(5)) == 0.0

    def test_agnostic_deeper_ignores_v(self, rng):
        model = RepFusionModel({'image_dim': 3, 'caption_dim': 4}, u_dim=3, v_dim=5, r_dim=6,
                               fusion_mode='agnostic_deeper', seed=1)
        t_img, t_cap = rng.normal(size=4), rng.normal(size=4)
        a = rep_fusion_score(model, t_img, rng.random(5), t_cap, rng.random(5))
        b = rep_fusion_score(model, t_img, 10 * rng.random(5), t_cap, 10 * rng.random(5))
        assert a == b

    def test_caption_only_ignores_image_u(self, rng):
        data = toy_data(rng)
        model = RepFusionModel({'image_dim': 5, 'caption_dim': 4}, u_dim=3, v_dim=5, r_dim=6,
                               fusion_mode='caption_only', seed=1)
        before = model.score_matrix(data)
        data.image_u = data.image_u + 5.0
        np.testing.assert_array_equal(model.score_matrix(data), before)
        assert 'rep.v_image' not in model.dropout_sites()

    def test_unknown_fusion_mode(self):
        with pytest.raises(ParameterError):
            RepFusionModel(fusion_mode='both')

    def test_missing_u(self, rng):
        data = toy_data(rng)
        data.caption_u = None
        model = RepFusionModel({'image_dim': 5, 'caption_dim': 4}, u_dim=3, v_dim=5, r_dim=6)
        with pytest.raises(DataError):
            model.score_matrix(data)


class TestRetrievalProbabilities:

    def test_uniform(self):
        p = retrieval_probabilities(np.full((4, 4), 2.5), 'caption_given_image')
        np.testing.assert_allclose(p, 0.25, atol=1e-15)

    def test_single_candidate(self):
        assert retrieval_probabilities([[3.0]], 'image_given_caption')[0, 0] == 1.0

    def test_matches_oracle(self, rng):
        scores = rng.normal(size=(6, 6))
        expected_cap = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
        expected_im = np.exp(scores) / np.exp(scores).sum(axis=0, keepdims=True)
        np.testing.assert_allclose(retrieval_probabilities(scores, 'caption_given_image'), expected_cap, atol=1e-12)
        np.testing.assert_allclose(retrieval_probabilities(scores, 'image_given_caption'), expected_im, atol=1e-12)

    def test_shift_invariance_and_argmax(self, rng):
        for _ in range(20):
            scores = rng.normal(scale=3.0, size=(7, 7))
            shift = rng.normal(scale=50.0)
            for direction, axis in (('caption_given_image', 1), ('image_given_caption', 0)):
                p = retrieval_probabilities(scores, direction)
                np.testing.assert_allclose(retrieval_probabilities(scores + shift, direction), p, atol=1e-12)
                np.testing.assert_array_equal(np.argmax(p, axis=axis), np.argmax(scores, axis=axis))
                np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-12)

    def test_per_image_shift(self, rng):
        scores = rng.normal(size=(5, 5))
        shifted = scores + rng.normal(scale=10.0, size=(5, 1))
        np.testing.assert_allclose(retrieval_probabilities(shifted, 'caption_given_image'),
                                   retrieval_probabilities(scores, 'caption_given_image'), atol=1e-12)

    def test_unknown_direction(self):
        with pytest.raises(ParameterError):
            retrieval_probabilities([[1.0]], 'sideways')


class TestRankingLoss:

    def test_uniform(self):
        assert ranking_loss(np.zeros((10, 10))) == pytest.approx(4.605170, abs=1e-6)

    def test_saturated(self):
        assert ranking_loss(100.0 * np.eye(5)) < 1e-10

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(31)
        for _ in range(100):
            scores = rng.normal(scale=rng.uniform(0.1, 4.0), size=(8, 8))
            total = 0.0
            for j in range(8):
                total -= scores[j, j] - np.log(np.sum(np.exp(scores[:, j])))
                total -= scores[j, j] - np.log(np.sum(np.exp(scores[j, :])))
            assert ranking_loss(scores) == pytest.approx(total / 8, abs=1e-12)

    def test_gradient(self, rng):
        scores = rng.normal(size=(5, 5))
        _, grad = ranking_loss_and_grad(scores)
        h = 1e-6
        for i, j in [(0, 0), (1, 3), (4, 2)]:
            plus, minus = scores.copy(), scores.copy()
            plus[i, j] += h
            minus[i, j] -= h
            numeric = (ranking_loss(plus) - ranking_loss(minus)) / (2 * h)
            assert grad[i, j] == pytest.approx(numeric, abs=1e-7)

    def test_square_required(self):
        with pytest.raises(ShapeError):
            ranking_loss(np.zeros((3, 4)))


class TestRankingData:

    def test_select_remaps(self, rng):
        data = toy_data(rng, n_images=4, captions_per_image=2)
        subset = data.select([2, 0])
        assert subset.image_ids == ['i2', 'i0']
        assert subset.caption_ids == ['c4', 'c5', 'c0', 'c1']
        assert list(subset.caption_to_image) == [0, 0, 1, 1]
        np.testing.assert_array_equal(subset.image_u, data.image_u[:, [2, 0]])

    def test_first_n_images(self, rng):
        data = toy_data(rng, n_images=5, captions_per_image=3)
        assert data.first_n_images(None) is data
        assert data.first_n_images(0) is data
        assert data.first_n_images(2).n_captions == 6

    def test_limit_captions_per_image(self, rng):
        data = toy_data(rng, n_images=4, captions_per_image=3)
        limited = data.limit_captions_per_image(1)
        assert limited.caption_ids == ['c0', 'c3', 'c6', 'c9']
        assert data.limit_captions_per_image(None) is data

    def test_dangling_caption(self):
        with pytest.raises(DataError):
            RankingData(image_ids=['a'], caption_ids=['c'], caption_to_image=[1])

    def test_batch_uses_distinct_images(self, rng):
        data = toy_data(rng, n_images=10, captions_per_image=2)
        images, captions = sample_ranking_batch(data, 6, rng)
        assert len(set(images)) == 6
        assert all(data.caption_to_image[c] == i for i, c in zip(images, captions))


class TestTraining:

    def test_rep_fusion_lowers_training_loss(self, trained):
        train = trained.splits['train']
        square = train.limit_captions_per_image(1)
        index = np.arange(square.n_images)
        fresh = RepFusionModel(trained.embedder.config_dict(), u_dim=trained.bank.N, v_dim=16, r_dim=16, seed=4)
        fresh.embedder.load_state_dict(trained.embedder.state_dict())
        model, trace = train_rep_fusion(train, None, trained.embedder, RmsPropConfig(learning_rate=3e-3), v_dim=16,
                                        r_dim=16, batch_size=30, iterations=150, seed=4, log_every=50)
        assert model.batch_loss(square, index, index) < fresh.batch_loss(square, index, index)
        assert trace.final_loss < trace.initial_loss

    def test_embedder_frozen_during_fusion(self, trained):
        np.testing.assert_array_equal(trained.rep.embedder.proj_image.W, trained.embedder.proj_image.W)

    def test_score_fusion_is_deterministic(self, trained):
        train, val = trained.splits['train'], trained.splits['val']
        models = [train_score_fusion(train, val, trained.embedder, RmsPropConfig(learning_rate=1e-3), embed_dim=8,
                                     batch_size=20, iterations=20, seed=3, eval_every=10, log_every=10)[0]
                  for _ in range(2)]
        for a, b in zip(models[0].layers(), models[1].layers()):
            np.testing.assert_array_equal(a.W, b.W)
        assert (models[0].alpha, models[0].beta) == (models[1].alpha, models[1].beta)

    def test_alpha_beta_prefers_agnostic_when_perfect(self, rng):
        n = 8
        val = RankingData(image_ids=[f'i{i}' for i in range(n)], caption_ids=[f'c{i}' for i in range(n)],
                          caption_to_image=np.arange(n), image_t=np.eye(n), caption_t=np.eye(n),
                          image_u=rng.normal(size=(3, n)), caption_u=rng.normal(size=(3, n)))
        model = ScoreFusionModel({'image_dim': 2, 'caption_dim': n}, u_dim=3, embed_dim=4, seed=0)
        fitted = fit_alpha_beta(model, val, step=0.25)
        assert fitted == {'alpha': 1.0, 'beta': 0.0, 'objective': 1.0}
        sm = ScoreMatrix.from_data(model.score_matrix(val), val)
        assert recall_at_k(sm, 1, 'caption') == 1.0

    def test_alpha_beta_excludes_origin(self, rng):
        val = toy_data(rng, n_images=5)
        model = ScoreFusionModel({'image_dim': 5, 'caption_dim': 4}, u_dim=3, embed_dim=4, seed=0)
        fitted = fit_alpha_beta(model, val, step=0.5)
        assert (fitted['alpha'], fitted['beta']) != (0.0, 0.0)

    def test_score_fusion_requires_validation(self, trained):
        with pytest.raises(DataError):
            train_score_fusion(trained.splits['train'], None, trained.embedder, RmsPropConfig())

    def test_shared_plan_changes_scores(self, trained):
        data = trained.splits['test'].first_n_images(3)
        infer = trained.rep.score_matrix(data)
        sampled = trained.rep.score_matrix(data, plan=DropoutPlan('train', seed=1, shared_across_batch=True))
        assert infer.shape == sampled.shape
        assert not np.array_equal(infer, sampled)
