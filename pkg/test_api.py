"""
API 接口测试
用 Flask 测试客户端调用检索、评估和问答事实选择接口
"""

import pytest

from app import build_registry, create_app
from config import TestingConfig
from utils.errors import ParameterError


def test_health(client, trained):
    response = client.get('/api/health')
    assert response.status_code == 200
    assert response.get_json() == {'status': 'healthy', 'model': 'rep_fusion', 'split': 'test'}


class TestRetrieval:

    def test_captions_for_image(self, client, trained):
        image_id = trained.splits['test'].image_ids[0]
        response = client.post('/api/retrieval/captions', json={'image_id': image_id, 'top_k': 5})
        body = response.get_json()
        assert response.status_code == 200
        assert body['success'] is True
        results = body['data']['results']
        assert [r['rank'] for r in results] == [1, 2, 3, 4, 5]
        scores = [r['score'] for r in results]
        assert scores == sorted(scores, reverse=True)
        assert all(r['matches'] == (r['image_id'] == image_id) for r in results)

    def test_images_for_caption(self, client, trained):
        data = trained.splits['test']
        caption_id = data.caption_ids[4]
        response = client.post('/api/retrieval/images', json={'caption_id': caption_id})
        results = response.get_json()['data']['results']
        assert len(results) == 10
        truth = data.image_ids[data.caption_to_image[4]]
        assert sum(r['matches'] for r in results) <= 1
        assert all(r['matches'] == (r['image_id'] == truth) for r in results)

    def test_full_ranking_contains_truth(self, client, trained):
        data = trained.splits['test']
        response = client.post('/api/retrieval/images', json={'caption_id': data.caption_ids[0],
                                                               'top_k': data.n_images})
        assert sum(r['matches'] for r in response.get_json()['data']['results']) == 1

    def test_unknown_image(self, client):
        response = client.post('/api/retrieval/captions', json={'image_id': 'nowhere'})
        body = response.get_json()
        assert response.status_code == 404
        assert body['success'] is False
        assert body['data']['error'] == 'NotFoundError'

    def test_missing_field(self, client):
        response = client.post('/api/retrieval/images', json={'top_k': 3})
        assert response.status_code == 400
        assert 'caption_id' in response.get_json()['message']

    def test_not_json(self, client):
        response = client.post('/api/retrieval/captions', data='image_id=1')
        assert response.status_code == 400

    @pytest.mark.parametrize('top_k', [0, 101, 'many'])
    def test_bad_top_k(self, client, trained, top_k):
        image_id = trained.splits['test'].image_ids[0]
        response = client.post('/api/retrieval/captions', json={'image_id': image_id, 'top_k': top_k})
        assert response.status_code == 400
        assert response.get_json()['data']['error'] == 'ParameterError'


class TestQaSelection:

    def test_select(self, client, trained):
        image_id = trained.splits['test'].image_ids[1]
        response = client.post('/api/qa/select', json={'image_id': image_id, 'n_samples': 20, 'top': 3, 'seed': 1})
        body = response.get_json()
        assert response.status_code == 200
        results = body['data']['results']
        assert [r['rank'] for r in results] == [1, 2, 3]
        assert [r['mi_nats'] for r in results] == sorted((r['mi_nats'] for r in results), reverse=True)
        assert all(trained.bank[r['qa_index']].question_id == r['qa_id'] for r in results)

    def test_select_is_reproducible(self, client, trained):
        payload = {'image_id': trained.splits['test'].image_ids[2], 'n_samples': 10, 'top': 5}
        first = client.post('/api/qa/select', json=payload).get_json()['data']
        second = client.post('/api/qa/select', json=payload).get_json()['data']
        assert first == second

    def test_unknown_marginal_mode(self, client, trained):
        payload = {'image_id': trained.splits['test'].image_ids[0], 'n_samples': 5, 'marginal_mode': 'guess'}
        assert client.post('/api/qa/select', json=payload).status_code == 400

    def test_requires_head_and_bank(self, trained):
        from utils.serving import ServingRegistry
        registry = ServingRegistry(trained.rep, trained.splits['test'], 'test', workers=1)
        client = create_app('testing', registry=registry).test_client()
        response = client.post('/api/qa/select', json={'image_id': trained.splits['test'].image_ids[0]})
        assert response.status_code == 400
        assert client.get('/api/reports/summary').get_json()['data']['qa_selection'] is False


class TestReports:

    def test_summary(self, client, trained):
        data = client.get('/api/reports/summary').get_json()['data']
        assert data == {
            'split': 'test',
            'model': 'rep_fusion',
            'n_images': trained.splits['test'].n_images,
            'n_captions': trained.splits['test'].n_captions,
            'qa_bank_size': trained.bank.N,
            'qa_selection': True,
        }

    def test_evaluate(self, client, trained):
        from utils.evaluation import evaluate
        body = client.get('/api/reports/evaluate').get_json()
        metrics = body['data']['metrics']
        expected = evaluate(trained.rep, trained.splits['test'], workers=1).as_flat_dict()
        assert metrics == pytest.approx(expected)
        assert 'R@1' in body['data']['table']


def test_cors_preflight(client):
    response = client.options('/api/retrieval/captions', headers={
        'Origin': 'http://localhost:5173',
        'Access-Control-Request-Method': 'POST',
        'Access-Control-Request-Headers': 'Content-Type',
    })
    assert response.status_code == 200
    assert response.headers['Access-Control-Allow-Origin'] == 'http://localhost:5173'


def test_registry_needs_model_path():
    settings = TestingConfig.to_dict()
    settings['SERVE_MODEL'] = None
    with pytest.raises(ParameterError):
        build_registry(settings)
