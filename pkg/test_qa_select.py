"""
问答事实信息量测试
互信息、联合分布的蒙特卡洛估计与精确枚举，以及一个可以手算的两事实场景
"""

import csv

import numpy as np
import pytest
from scipy import special

from models.grounding import QABank
from models.informativeness import (FusionJointPredictor, JointTable, exact_joint_oracle, mc_joint, mc_joint_bank,
                                    mutual_information, point_marginals, select_informative_qa, write_mi_csv)
from models.ranking import RankingData, ScoreFusionModel
from models.vqa import QAPair, VqaHead
from utils.errors import (DataError, DegenerateMarginalError, EnumerationLimitError, ParameterError,
                          ShapeError)

# 两条候选描述之外再加一条中间的
CAPTION_U0 = np.array([0.0, -5.0, -2.5])


def two_fact_bank():
    return QABank([
        QAPair('fact0', [1.0, 0.0], 0, 'img', question_text='is there a dog?', answer_text='yes'),
        QAPair('fact1', [0.0, 1.0], 0, 'img', question_text='is it raining?', answer_text='yes'),
    ])


def grounded_scenario(head_keep_prob=0.5, ranker_keep_prob=None):
    """
    fact0 的答案概率取决于唯一的隐藏单元是否被保留，并通过 v_I 决定哪条描述得分最高；
    fact1 的问题投影为 0，答案概率恒为 0.5
    """
    bank = two_fact_bank()
    head = VqaHead(input_dim=1, question_dim=2, mm_dim=1, num_answers=2, hidden_keep_prob=head_keep_prob)
    head.proj_input.W.fill(0.0)
    head.proj_input.b[:] = np.arctanh(0.8)
    head.proj_question.W[:] = [[np.arctanh(0.5), 0.0]]
    head.proj_question.b.fill(0.0)
    head.answer_layer.W[:] = [[3.0], [0.0]]
    head.answer_layer.b.fill(0.0)

    model = ScoreFusionModel({'image_dim': 1, 'caption_dim': 1}, u_dim=2, embed_dim=2,
                             keep_prob=ranker_keep_prob, alpha=0.0, beta=1.0)
    model.proj_v_image.layer.W[:] = [[10.0, 0.0], [-10.0, 0.0]]
    model.proj_v_image.layer.b[:] = [[7.0], [-3.0]]
    model.proj_v_caption.layer.W[:] = [[1.0, 0.0], [-1.0, 0.0]]
    model.proj_v_caption.layer.b[:] = [[5.0], [-2.5]]

    captions = RankingData(
        image_ids=['img'],
        caption_ids=['a dog on grass', 'an empty street', 'a park'],
        caption_to_image=[0, 0, 0],
        caption_u=np.stack([CAPTION_U0, np.zeros(3)]),
        caption_t=np.ones((1, 3)),
    )
    predictor = FusionJointPredictor(head, model, bank, image_x=[[1.0]], captions=captions, image_t=[[1.0]],
                                     image_id='img')
    return predictor, bank


def scenario_oracle():
    """按公式直接算出的 (p, q)：隐藏单元保留与丢弃两种情况各占一半"""
    v_cap = np.stack([np.maximum(CAPTION_U0 + 5.0, 0.0), np.maximum(-CAPTION_U0 - 2.5, 0.0)])
    outcomes = []
    for p0 in (special.expit(2.4), 0.5):
        u0 = np.log(p0)
        v_img = np.maximum([10.0 * u0 + 7.0, -10.0 * u0 - 3.0], 0.0)
        outcomes.append((np.array([p0, 0.5]), special.softmax(v_img @ v_cap)))
    return outcomes


def oracle_tables():
    tables = []
    for n in range(2):
        joint = np.zeros((2, 3))
        for p, q in scenario_oracle():
            joint += 0.5 * np.outer([p[n], 1.0 - p[n]], q)
        tables.append(joint)
    return tables


class TestMutualInformation:

    def test_perfect_coupling(self):
        result = mutual_information(JointTable([[0.5, 0.0], [0.0, 0.5]]))
        assert result.mi_nats == pytest.approx(np.log(2.0), abs=1e-12)
        assert result.entropy_v == pytest.approx(np.log(2.0))

    def test_independence(self):
        joint = np.outer([0.3, 0.7], [0.2, 0.5, 0.3])
        assert mutual_information(JointTable(joint)).mi_nats == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_sum(self, rng):
        joint = rng.random((2, 5))
        joint /= joint.sum()
        pv, pc = joint.sum(axis=1), joint.sum(axis=0)
        expected = sum(joint[v, k] * np.log(joint[v, k] / (pv[v] * pc[k])) for v in range(2) for k in range(5))
        result = mutual_information(JointTable(joint), qa_index=3)
        assert result.mi_nats == pytest.approx(expected, abs=1e-12)
        assert result.qa_index == 3
        assert result.mi_nats >= 0.0

    def test_zero_entries_contribute_nothing(self):
        result = mutual_information(JointTable([[0.25, 0.25, 0.0], [0.0, 0.0, 0.5]]))
        assert np.isfinite(result.mi_nats)

    def test_point_estimate(self):
        joint = JointTable(np.outer([0.4, 0.6], [0.5, 0.5]))
        result = mutual_information(joint, 'point_estimate', p_v=0.4, p_c=[0.5, 0.5])
        assert result.mi_nats == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(result.marginals_v, [0.4, 0.6])

    def test_degenerate_marginal(self):
        joint = JointTable([[0.5, 0.0], [0.0, 0.5]])
        with pytest.raises(DegenerateMarginalError):
            mutual_information(joint, 'point_estimate', p_v=1.0, p_c=[0.5, 0.5])

    def test_joint_must_sum_to_one(self):
        with pytest.raises(ParameterError):
            mutual_information(JointTable([[0.5, 0.1], [0.1, 0.5]]))

    def test_unknown_marginal_mode(self):
        with pytest.raises(ParameterError):
            mutual_information(JointTable([[0.5, 0.0], [0.0, 0.5]]), 'bayesian')

    def test_point_estimate_needs_marginals(self):
        with pytest.raises(ParameterError):
            mutual_information(JointTable([[0.5, 0.0], [0.0, 0.5]]), 'point_estimate')

    def test_table_shape(self):
        with pytest.raises(ShapeError):
            JointTable(np.ones((3, 2)) / 6)

    def test_never_negative(self):
        rng = np.random.default_rng(7)
        for case in range(10_000):
            K = int(rng.integers(1, 9))
            alpha = 0.2 if case % 2 else 1.0
            joint = rng.dirichlet(np.full(2 * K, alpha)).reshape(2, K)
            assert mutual_information(JointTable(joint)).mi_nats >= -1e-12, case

    def test_merging_captions_never_increases(self):
        rng = np.random.default_rng(11)
        for case in range(500):
            K = int(rng.integers(2, 9))
            joint = rng.dirichlet(np.ones(2 * K)).reshape(2, K)
            groups = rng.integers(0, K - 1, size=K)
            merged = np.stack([joint[:, groups == g].sum(axis=1) for g in np.unique(groups)], axis=1)
            before = mutual_information(JointTable(joint)).mi_nats
            after = mutual_information(JointTable(merged)).mi_nats
            assert after <= before + 1e-12, case

    def test_paper_literal_alias(self, rng):
        joint = rng.dirichlet(np.ones(6)).reshape(2, 3)
        p_c = joint.sum(axis=0)[::-1].copy()
        alias = mutual_information(JointTable(joint), 'paper_literal', p_v=0.3, p_c=p_c)
        canonical = mutual_information(JointTable(joint), 'point_estimate', p_v=0.3, p_c=p_c)
        assert alias.mi_nats == canonical.mi_nats
        np.testing.assert_array_equal(alias.marginals_v, [0.3, 0.7])


class TestJointEstimation:

    def test_exact_oracle_matches_formula(self):
        predictor, _ = grounded_scenario()
        tables = exact_joint_oracle(predictor)
        assert tables[0].n_samples == 2
        for table, expected in zip(tables, oracle_tables()):
            np.testing.assert_allclose(table.joint, expected, atol=1e-9)
            assert table.total() == pytest.approx(1.0, abs=1e-12)

    def test_monte_carlo_converges(self):
        predictor, _ = grounded_scenario()
        tables = mc_joint_bank(predictor, n_samples=4000, seed=0)
        for table, expected in zip(tables, oracle_tables()):
            np.testing.assert_allclose(table.joint, expected, atol=0.03)

    def test_monte_carlo_against_enumeration_with_ranker_dropout(self):
        predictor, _ = grounded_scenario(ranker_keep_prob=0.5)
        exact = exact_joint_oracle(predictor)[0]
        estimate = mc_joint(predictor, 0, n_samples=6000, seed=1)
        assert exact.n_samples == 2 ** 5
        np.testing.assert_allclose(estimate.joint, exact.joint, atol=0.03)

    @pytest.mark.slow
    def test_monte_carlo_tight_with_many_samples(self):
        predictor, _ = grounded_scenario(ranker_keep_prob=0.5)
        exact = exact_joint_oracle(predictor)
        estimates = mc_joint_bank(predictor, n_samples=100_000, seed=4, workers=2)
        for table, expected in zip(estimates, exact):
            assert np.max(np.abs(table.joint - expected.joint)) <= 0.01

    def test_no_dropout_gives_product(self):
        predictor, _ = grounded_scenario(head_keep_prob=None)
        p, q = point_marginals(predictor)
        tables = mc_joint_bank(predictor, n_samples=5, seed=0)
        np.testing.assert_allclose(tables[0].joint, np.outer([p[0], 1.0 - p[0]], q), atol=1e-12)
        assert mutual_information(tables[0]).mi_nats == pytest.approx(0.0, abs=1e-12)

    def test_single_sample_is_rank_one(self):
        predictor, _ = grounded_scenario()
        table = mc_joint(predictor, 0, n_samples=1, seed=3)
        assert np.linalg.matrix_rank(table.joint, tol=1e-12) == 1

    def test_worker_count_does_not_change_result(self):
        predictor, _ = grounded_scenario(ranker_keep_prob=0.5)
        single = mc_joint_bank(predictor, n_samples=600, seed=2, workers=1)
        pooled = mc_joint_bank(predictor, n_samples=600, seed=2, workers=3)
        for a, b in zip(single, pooled):
            np.testing.assert_array_equal(a.joint, b.joint)

    def test_enumeration_limit(self):
        predictor, _ = grounded_scenario(ranker_keep_prob=0.5)
        with pytest.raises(EnumerationLimitError):
            exact_joint_oracle(predictor, max_units=3)

    def test_invalid_arguments(self):
        predictor, _ = grounded_scenario()
        with pytest.raises(ParameterError):
            mc_joint_bank(predictor, n_samples=0)
        with pytest.raises(ParameterError):
            mc_joint(predictor, 2, n_samples=10)

    def test_predictor_checks(self):
        predictor, _ = grounded_scenario()
        with pytest.raises(DataError):
            FusionJointPredictor(predictor.head, predictor.ranker, QABank([]), [[1.0]], predictor.data)
        bigger = QABank(two_fact_bank().pairs + [QAPair('fact2', [1.0, 1.0], 1)])
        with pytest.raises(ShapeError):
            FusionJointPredictor(predictor.head, predictor.ranker, bigger, [[1.0]], predictor.data)


class TestSelection:

    def test_grounded_fact_ranks_first(self):
        predictor, _ = grounded_scenario()
        results = select_informative_qa(predictor, n_samples=2000, seed=0)
        assert [r.qa_index for r in results] == [0, 1]
        assert results[0].mi_nats > 0.05
        assert results[1].mi_nats == pytest.approx(0.0, abs=1e-9)

    def test_grounded_fact_first_across_seeds(self):
        predictor, _ = grounded_scenario()
        first = [select_informative_qa(predictor, n_samples=5000, seed=seed)[0].qa_index for seed in range(5)]
        assert first.count(0) >= 4

    def test_paper_literal_selection(self):
        predictor, _ = grounded_scenario()
        alias = select_informative_qa(predictor, n_samples=300, seed=1, marginal_mode='paper_literal')
        canonical = select_informative_qa(predictor, n_samples=300, seed=1, marginal_mode='point_estimate')
        assert [(r.qa_index, r.mi_nats) for r in alias] == [(r.qa_index, r.mi_nats) for r in canonical]

    def test_unknown_mode_rejected_before_sampling(self, monkeypatch):
        import models.informativeness as informativeness
        predictor, _ = grounded_scenario()
        monkeypatch.setattr(informativeness, 'mc_joint_bank', lambda *a, **k: pytest.fail('不应开始采样'))
        with pytest.raises(ParameterError):
            select_informative_qa(predictor, n_samples=10, marginal_mode='bayesian')

    def test_top(self):
        predictor, _ = grounded_scenario()
        assert len(select_informative_qa(predictor, n_samples=50, seed=0, top=1)) == 1

    def test_point_estimate_mode(self):
        predictor, _ = grounded_scenario()
        results = select_informative_qa(predictor, n_samples=500, seed=0, marginal_mode='point_estimate')
        assert all(np.isfinite(r.mi_nats) for r in results)

    def test_seeded_runs_agree(self, trained):
        data = trained.splits['test'].first_n_images(4)
        predictor = FusionJointPredictor(trained.vqa, trained.rep, trained.bank, data.image_x[:, :1], data,
                                         image_id=data.image_ids[0])
        a = select_informative_qa(predictor, n_samples=40, seed=5)
        b = select_informative_qa(predictor, n_samples=40, seed=5)
        assert [(r.qa_index, r.mi_nats) for r in a] == [(r.qa_index, r.mi_nats) for r in b]
        assert all(r.mi_nats >= -1e-12 for r in a)

    def test_write_csv(self, tmp_path):
        predictor, bank = grounded_scenario()
        results = select_informative_qa(predictor, n_samples=200, seed=0)
        path = str(tmp_path / 'mi_img.csv')
        write_mi_csv(results, bank, path)
        with open(path, newline='', encoding='utf-8') as f:
            rows = list(csv.reader(f))
        assert rows[0] == ['rank', 'qa_index', 'qa_id', 'question', 'answer', 'mi_nats']
        assert rows[1][:5] == ['1', '0', 'fact0', 'is there a dog?', 'yes']
        assert float(rows[1][5]) == results[0].mi_nats
        assert len(rows) == 3
