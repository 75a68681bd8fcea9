"""
流水线步骤
命令行和服务共用：训练分类头、提取 VQA 表示、组装排序数据、N 扫描、运行记录
"""

import csv
import json
import logging
import os
from importlib import metadata

import numpy as np
import psutil

from .errors import DataError, ParameterError, StaleCacheError
from .manifest import SPLITS
from .optim import RmsPropConfig

logger = logging.getLogger(__name__)

VQA_CHECKPOINT = 'vqa.ckpt'
VQACAPTION_CHECKPOINT = 'vqacaption.ckpt'
AGNOSTIC_CHECKPOINT = 'agnostic.ckpt'
BANK_FILE = 'bank.json'
RUN_RECORD = 'run_record.json'
FEATURE_SOURCES = {'qa_log_probs': 'u', 'hidden_activations': 'z'}
HIDDEN_CACHE_TAG = 'hidden_activations'
SWEEP_NS = (30, 90, 300, 900, 3000)
RECORDED_PACKAGES = ('numpy', 'scipy', 'marshmallow', 'numba')


def rmsprop_config(cfg, setting, learning_rate=None):
    """按配置类和模型对应的学习率配置项构造 RmsPropConfig"""
    return RmsPropConfig.from_config(cfg, learning_rate if learning_rate is not None else getattr(cfg, setting))


def num_answers(dataset, cfg):
    """答案词表大小：清单中的答案表和问答对答案下标取较大者，不小于配置值"""
    largest = max([r.answer_index for r in dataset.manifest.qa] or [0])
    table = max(dataset.manifest.answers) + 1 if dataset.manifest.answers else 0
    return max(cfg.NUM_ANSWERS if not table else table, largest + 1)


def train_head(dataset, cfg, source='image', seed=0, iterations=None, batch_size=None, learning_rate=None,
               hidden_keep_prob=None):
    """
    在训练集上训练 VQA（source='image'）或 VQA-Caption（source='caption'）分类头

    Returns:
        tuple: (分类头, TrainingTrace, 验证集准确率或 None)
    """
    from models.vqa import VqaCaptionHead, VqaHead, accuracy, train_vqa_head
    triples = dataset.vqa_triples('train', source)
    head_cls = VqaHead if source == 'image' else VqaCaptionHead
    head = head_cls(input_dim=triples.inputs.shape[1], question_dim=triples.questions.shape[1],
                    mm_dim=cfg.MM_DIM, num_answers=num_answers(dataset, cfg),
                    hidden_keep_prob=hidden_keep_prob if hidden_keep_prob is not None else cfg.HEAD_HIDDEN_KEEP_PROB,
                    seed=seed)
    trace = train_vqa_head(head, triples, rmsprop_config(cfg, 'HEAD_LEARNING_RATE', learning_rate),
                           batch_size=batch_size or cfg.HEAD_BATCH_SIZE,
                           iterations=iterations or cfg.HEAD_ITERATIONS,
                           seed=seed, log_every=cfg.LOG_EVERY)
    val_accuracy = None
    if dataset.manifest.qa_in('val'):
        val_accuracy = accuracy(head, dataset.vqa_triples('val', source))
        logger.info('%s 验证集准确率 %.4f', head.KIND, val_accuracy)
    return head, trace, val_accuracy


def grounding_path(grounding_dir, side, split, feature_source='qa_log_probs'):
    if feature_source not in FEATURE_SOURCES:
        raise ParameterError(f'未知的 feature_source: {feature_source}，可选 {sorted(FEATURE_SOURCES)}')
    return os.path.join(grounding_dir, f'{FEATURE_SOURCES[feature_source]}_{side}_{split}.mmft')


def load_bank(path, dataset):
    """
    由 bank.json 和问题特征重建问答库，内容摘要必须与文件记录一致

    Returns:
        QABank: 问答库
    """
    from models.grounding import QABank
    from models.vqa import QAPair
    if not os.path.exists(path):
        raise DataError(f'问答库文件不存在: {path}')
    with open(path, encoding='utf-8') as f:
        saved = json.load(f)
    by_id = {r.qa_id: r for r in dataset.manifest.qa}
    pairs = []
    for record in saved['pairs']:
        qa = by_id.get(record['question_id'])
        if qa is None:
            raise DataError(f'问答库引用了清单中不存在的问答对 {record["question_id"]}')
        pairs.append(QAPair(qa.qa_id, dataset.question_features[qa.question_row], record['answer_index'],
                            record.get('source_image_id', qa.image_id), record.get('question_text', ''),
                            record.get('answer_text', '')))
    bank = QABank(pairs)
    if bank.content_hash() != saved.get('hash'):
        raise StaleCacheError(f'{path} 与当前数据不一致')
    return bank


def extract_grounding(dataset, vqa_head, vqacaption_head, bank, out_dir, feature_source='qa_log_probs',
                      prob_floor=1e-12, splits=SPLITS):
    """
    为每个划分写出图像和描述的 u（或隐藏激活 z）缓存

    Returns:
        dict: (side, split) -> 路径
    """
    from models.grounding import compute_u, extract_hidden_features, write_u_cache
    os.makedirs(out_dir, exist_ok=True)
    bank.save(os.path.join(out_dir, BANK_FILE))
    tag = bank.content_hash() if feature_source == 'qa_log_probs' else HIDDEN_CACHE_TAG
    written = {}
    for split in splits:
        if not dataset.manifest.image_ids(split):
            continue
        for side, head, inputs in (('image', vqa_head, dataset.split_images(split)),
                                   ('caption', vqacaption_head, dataset.split_bow(split))):
            if feature_source == 'qa_log_probs':
                matrix = compute_u(head, bank, inputs.T, prob_floor=prob_floor)
            else:
                matrix = extract_hidden_features(head, inputs.T)
            path = grounding_path(out_dir, side, split, feature_source)
            write_u_cache(path, matrix.T, tag, feature_source)
            written[(side, split)] = path
        logger.info('划分 %s 的 %s 特征已写出', split, feature_source)
    return written


def read_t(template, split):
    """按 {split} 模板读取预先计算的 t 特征，例如 t/t_image_{split}.mmft"""
    from .features import read_features
    path = template.format(split=split)
    if not os.path.exists(path):
        raise DataError(f't 特征文件不存在: {path}')
    return read_features(path)


def load_ranking_split(dataset, split, grounding_dir=None, feature_source='qa_log_probs', t_images=None,
                       t_captions=None, bank_hash=None):
    """
    组装一个划分的 RankingData，可选地带上 u 缓存和预先计算的 t

    Args:
        t_images / t_captions (str): t 特征路径模板，含 {split}
        bank_hash (str): 给定时检查 u 缓存是否由该问答库生成

    Returns:
        RankingData: 数据
    """
    from models.grounding import read_u_cache
    image_u = caption_u = image_t = caption_t = None
    if grounding_dir:
        tag = bank_hash if feature_source == 'qa_log_probs' else HIDDEN_CACHE_TAG
        image_u, _ = read_u_cache(grounding_path(grounding_dir, 'image', split, feature_source), tag)
        caption_u, _ = read_u_cache(grounding_path(grounding_dir, 'caption', split, feature_source), tag)
    if t_images:
        image_t = read_t(t_images, split)
    if t_captions:
        caption_t = read_t(t_captions, split)
    return dataset.ranking_split(split, image_u, caption_u, image_t, caption_t)


def bank_hash_of(grounding_dir):
    path = os.path.join(grounding_dir, BANK_FILE)
    if not os.path.exists(path):
        return None
    with open(path, encoding='utf-8') as f:
        return json.load(f).get('hash')


def build_embedder(train, val, cfg, seed=0, iterations=None, batch_size=None, learning_rate=None):
    """
    VQA 无关模型：数据带有预先计算的 t 时直接使用，否则用检索负对数似然训练

    Returns:
        tuple: (AgnosticEmbedder, TrainingTrace 或 None)
    """
    from models.ranking import AgnosticEmbedder, train_agnostic
    if train.image_t is not None and train.caption_t is not None:
        embedder = AgnosticEmbedder(train.image_x.shape[0], train.caption_t.shape[0], seed=seed)
        return embedder, None
    return train_agnostic(train, val, rmsprop_config(cfg, 'AGNOSTIC_LEARNING_RATE', learning_rate),
                          image_dim=train.image_x.shape[0], caption_dim=train.caption_x.shape[0],
                          batch_size=batch_size or cfg.RANKING_BATCH_SIZE,
                          iterations=iterations or cfg.RANKER_ITERATIONS, seed=seed,
                          eval_every=cfg.EVAL_EVERY, log_every=cfg.LOG_EVERY)


def train_fusion(mode, train, val, embedder, cfg, fusion_mode='full', seed=0, iterations=None, batch_size=None,
                 learning_rate=None, keep_prob=None):
    """
    训练分数级（mode='score'）或表示级（mode='rep'）融合模型

    Returns:
        tuple: (模型, TrainingTrace)
    """
    from models.ranking import train_rep_fusion, train_score_fusion
    keep_prob = cfg.DROPOUT_KEEP_PROB if keep_prob is None else keep_prob
    common = dict(keep_prob=keep_prob, batch_size=batch_size or cfg.RANKING_BATCH_SIZE,
                  iterations=iterations or cfg.RANKER_ITERATIONS, seed=seed, eval_every=cfg.EVAL_EVERY,
                  log_every=cfg.LOG_EVERY)
    if mode == 'score':
        return train_score_fusion(train, val, embedder,
                                  rmsprop_config(cfg, 'SCORE_FUSION_LEARNING_RATE', learning_rate),
                                  embed_dim=cfg.EMBED_DIM_V, step=cfg.ALPHA_BETA_STEP, **common)
    if mode == 'rep':
        return train_rep_fusion(train, val, embedder, rmsprop_config(cfg, 'REP_FUSION_LEARNING_RATE', learning_rate),
                                fusion_mode=fusion_mode, v_dim=cfg.EMBED_DIM_V, r_dim=cfg.EMBED_DIM_R, **common)
    raise ParameterError(f'未知的融合方式: {mode}')


def sweep_bank_sizes(dataset, vqa_head, vqacaption_head, embedder, cfg, out_path, ns=SWEEP_NS, modes=('score', 'rep'),
                     per_image=3, seed=0, first_n_images=None, iterations=None):
    """
    在不同问答库大小 N 下训练融合模型并在测试集上评估，每个 (N, 模型) 写一行 CSV
    N 超过数据能支持的上限时截断

    Returns:
        list: 结果行
    """
    from models.grounding import compute_u
    from .evaluation import evaluate
    available = len([i for i, records in dataset.manifest.qa_by_image('train').items() if len(records) >= per_image])
    if available == 0:
        raise DataError(f'训练集中没有至少 {per_image} 个问答对的图像')
    sizes = sorted({min(n, available * per_image) // per_image * per_image for n in ns} - {0})
    base = {split: dataset.ranking_split(split) for split in ('train', 'val', 'test')}
    rows = []
    for n in sizes:
        bank = dataset.build_bank(per_image, n // per_image, seed)
        splits = {}
        for split, data in base.items():
            splits[split] = data.with_u(compute_u(vqa_head, bank, data.image_x, prob_floor=cfg.PROB_FLOOR),
                                        compute_u(vqacaption_head, bank, dataset.split_bow(split).T,
                                                  prob_floor=cfg.PROB_FLOOR))
        for mode in modes:
            model, _ = train_fusion(mode, splits['train'], splits['val'], embedder, cfg, seed=seed,
                                    iterations=iterations)
            report = evaluate(model, splits['test'], first_n_images)
            row = {'N': n, 'model': model.KIND}
            row.update(report.as_flat_dict())
            rows.append(row)
            logger.info('N=%d %s: caption R@1 %.4f image R@1 %.4f', n, model.KIND, report.caption_recall[1],
                        report.image_recall[1])
    with open(out_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        columns = list(rows[0]) if rows else ['N', 'model']
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
    return rows


def package_versions():
    versions = {}
    for name in RECORDED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = None
    return versions


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set)):
        return [_plain(v) for v in value]
    if isinstance(value, (np.integer, np.floating)):
        return value.item()
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)


def write_run_record(out_dir, command, args, cfg):
    """
    写出 <out>/run_record.json：命令、参数、生效配置、依赖版本和 CPU 数，键排序且不含时间戳

    Returns:
        str: 路径
    """
    os.makedirs(out_dir, exist_ok=True)
    record = {
        'command': command,
        'args': _plain(args),
        'config': _plain({k: v for k, v in cfg.to_dict().items() if k != 'DATA_DIR'}),
        'seed': _plain(cfg.SEED),
        'versions': package_versions(),
        'cpu_count': psutil.cpu_count(logical=True),
    }
    path = os.path.join(out_dir, RUN_RECORD)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(record, f, sort_keys=True, indent=1)
        f.write('\n')
    return path
