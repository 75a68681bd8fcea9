"""
检索评估测试
"""

import numpy as np
import pytest
from scipy import special

from models.ranking import RankingData
from utils.errors import ParameterError, ShapeError
from utils.evaluation import (ScoreMatrix, best_ranks, compute_score_matrix, evaluate, recall_at_k,
                              report_from_scores, target_ranks)

IDENTITY_KV = (
    'n_images=3\n'
    'n_captions=3\n'
    'caption_r1=1.0\n'
    'caption_r5=1.0\n'
    'caption_r10=1.0\n'
    'image_r1=1.0\n'
    'image_r5=1.0\n'
    'image_r10=1.0\n'
    'caption_median_rank=1.0\n'
    'image_median_rank=1.0\n'
)


def brute_force_recall(scores, caption_to_image, ks, direction):
    n_images, n_captions = scores.shape
    ranks = []
    if direction == 'caption':
        for i in range(n_images):
            truth = [c for c in range(n_captions) if caption_to_image[c] == i]
            if not truth:
                continue
            order = sorted(range(n_captions), key=lambda c: (-scores[i, c], c))
            ranks.append(min(order.index(c) for c in truth))
    else:
        for c in range(n_captions):
            order = sorted(range(n_images), key=lambda i: (-scores[i, c], i))
            ranks.append(order.index(caption_to_image[c]))
    return {k: float(np.mean([rank < k for rank in ranks])) for k in ks}


class TestRecall:

    def test_identity(self):
        sm = ScoreMatrix(np.eye(4))
        for k in (1, 2, 4):
            assert recall_at_k(sm, k, 'caption') == 1.0
            assert recall_at_k(sm, k, 'image') == 1.0

    def test_ties_break_by_index(self):
        sm = ScoreMatrix(np.zeros((4, 4)))
        np.testing.assert_array_equal(best_ranks(sm, 'caption'), [0, 1, 2, 3])
        assert recall_at_k(sm, 1, 'caption') == 0.25
        assert recall_at_k(sm, 2, 'image') == 0.5

    def test_k_equal_to_candidates(self, rng):
        sm = ScoreMatrix(rng.normal(size=(5, 10)), caption_to_image=np.repeat(np.arange(5), 2))
        assert recall_at_k(sm, 10, 'caption') == 1.0
        assert recall_at_k(sm, 5, 'image') == 1.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(17)
        caption_to_image = np.repeat(np.arange(30), 5)
        for case in range(200):
            scores = np.round(rng.normal(size=(30, 150)), 1)
            sm = ScoreMatrix(scores, caption_to_image=caption_to_image)
            for direction in ('caption', 'image'):
                expected = brute_force_recall(scores, caption_to_image, (1, 5, 10), direction)
                for k, value in expected.items():
                    assert recall_at_k(sm, k, direction) == value, (case, direction, k)

    def test_strictly_increasing_transform(self, rng):
        caption_to_image = np.repeat(np.arange(12), 5)
        for _ in range(20):
            scores = np.round(rng.normal(size=(12, 60)), 1)
            plain = ScoreMatrix(scores, caption_to_image=caption_to_image)
            for transformed in (np.exp(scores), 3.0 * scores + 1.0, np.arctan(scores)):
                sm = ScoreMatrix(transformed, caption_to_image=caption_to_image)
                for direction in ('caption', 'image'):
                    np.testing.assert_array_equal(best_ranks(sm, direction), best_ranks(plain, direction))
                    for k in (1, 5, 10):
                        assert recall_at_k(sm, k, direction) == recall_at_k(plain, k, direction)

    def test_transpose_swaps_direction(self, rng):
        for _ in range(20):
            scores = np.round(rng.normal(size=(25, 25)), 1)
            np.testing.assert_array_equal(best_ranks(ScoreMatrix(scores), 'caption'),
                                          best_ranks(ScoreMatrix(scores.T), 'image'))
            for k in (1, 5, 10):
                assert recall_at_k(ScoreMatrix(scores), k, 'caption') == recall_at_k(ScoreMatrix(scores.T), k, 'image')
                assert recall_at_k(ScoreMatrix(scores), k, 'image') == recall_at_k(ScoreMatrix(scores.T), k, 'caption')

    def test_image_without_captions_is_skipped(self):
        sm = ScoreMatrix(np.array([[1.0, 0.0], [0.0, 1.0], [5.0, 5.0]]), caption_to_image=[0, 1])
        assert len(best_ranks(sm, 'caption')) == 2
        assert recall_at_k(sm, 1, 'caption') == 1.0
        assert recall_at_k(sm, 1, 'image') == 0.0

    @pytest.mark.parametrize('k', [1, 5, 10])
    def test_chance_level(self, k):
        n_images, per_image, n_seeds = 100, 5, 20
        n_captions = n_images * per_image
        caption_to_image = np.repeat(np.arange(n_images), per_image)
        caption, image = [], []
        for seed in range(n_seeds):
            sm = ScoreMatrix(np.random.default_rng(seed).normal(size=(n_images, n_captions)),
                             caption_to_image=caption_to_image)
            caption.append(recall_at_k(sm, k, 'caption'))
            image.append(recall_at_k(sm, k, 'image'))
        # 随机分数下至少一条真实描述进入前 k
        p_caption = 1.0 - special.comb(n_captions - per_image, k) / special.comb(n_captions, k)
        p_image = k / n_images
        for observed, p, units in ((caption, p_caption, n_images), (image, p_image, n_captions)):
            tolerance = 4.0 * np.sqrt(p * (1.0 - p) / (units * n_seeds))
            assert abs(np.mean(observed) - p) < tolerance

    def test_invalid_k(self):
        sm = ScoreMatrix(np.eye(3))
        with pytest.raises(ParameterError):
            recall_at_k(sm, 0, 'caption')
        with pytest.raises(ParameterError):
            recall_at_k(sm, 4, 'image')

    def test_unknown_direction(self):
        with pytest.raises(ParameterError):
            recall_at_k(ScoreMatrix(np.eye(2)), 1, 'both')

    def test_rejects_bad_matrices(self):
        with pytest.raises(ParameterError):
            ScoreMatrix([[np.nan]])
        with pytest.raises(ParameterError):
            ScoreMatrix(np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            ScoreMatrix(np.zeros(3))

    def test_target_ranks_chunks(self, rng):
        matrix = rng.normal(size=(30, 7))
        targets = rng.integers(0, 7, size=30)
        np.testing.assert_array_equal(target_ranks(matrix, targets, chunk=4), target_ranks(matrix, targets))


class TestReport:

    def test_identity_golden(self):
        report = report_from_scores(ScoreMatrix(np.eye(3)))
        assert report.format_kv() == IDENTITY_KV

    def test_write(self, tmp_path):
        report = report_from_scores(ScoreMatrix(np.eye(3)))
        txt_path, kv_path = report.write(str(tmp_path / 'eval_test'))
        with open(kv_path, encoding='utf-8') as f:
            assert f.read() == IDENTITY_KV
        with open(txt_path, encoding='utf-8') as f:
            table = f.read()
        assert '100.00' in table
        assert '3 张图像' in table

    def test_median_rank(self):
        scores = np.array([[0.0, 1.0, 2.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        report = report_from_scores(ScoreMatrix(scores))
        assert report.caption_median_rank == 1.0
        assert report.caption_recall[1] == pytest.approx(2 / 3)


class TestScoreMatrix:

    def test_blocks_match_direct(self, trained):
        data = trained.splits['test']
        direct = trained.rep.score_matrix(data)
        sm = compute_score_matrix(trained.rep, data, workers=3, block_rows=7)
        np.testing.assert_allclose(sm.scores, direct, atol=1e-12)
        assert sm.caption_ids == data.caption_ids

    def test_evaluate_is_deterministic(self, trained):
        a = evaluate(trained.rep, trained.splits['test'], workers=2)
        b = evaluate(trained.rep, trained.splits['test'], workers=1)
        assert a.as_flat_dict() == b.as_flat_dict()

    def test_first_n_images(self, trained):
        report = evaluate(trained.rep, trained.splits['test'], first_n_images=5)
        assert report.n_images == 5
        assert report.n_captions == 15

    def test_empty_split(self, trained):
        empty = RankingData(image_ids=[], caption_ids=[], caption_to_image=[])
        with pytest.raises(ParameterError):
            evaluate(trained.rep, empty)
