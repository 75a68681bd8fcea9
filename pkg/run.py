#!/usr/bin/env python3
"""
命令行入口
生成合成数据、训练分类头与排序模型、提取 VQA 表示、评估、选择问答事实、启动服务

配置优先级：配置类默认值 < --config 配置文件 < 命令行参数
每条命令都会在输出目录写出 run_record.json
"""

import argparse
import json
import logging
import os
import sys

from config import get_config
from utils import pipeline
from utils.decorators import log_activity
from utils.errors import MMRankError, NumericError, ParameterError
from utils.logging import setup_logging
from utils.schemas import apply_run_config, load_run_config

logger = logging.getLogger('mmrank.cli')

# 命令行参数 -> 配置项
FLAG_SETTINGS = {
    'mm_dim': 'MM_DIM',
    'hidden_keep_prob': 'HEAD_HIDDEN_KEEP_PROB',
    'per_image': 'QA_PER_IMAGE',
    'num_images': 'QA_NUM_IMAGES',
    'feature_source': 'FEATURE_SOURCE',
    'prob_floor': 'PROB_FLOOR',
    'keep_prob': 'DROPOUT_KEEP_PROB',
    'embed_dim_v': 'EMBED_DIM_V',
    'embed_dim_r': 'EMBED_DIM_R',
    'first_n_images': 'FIRST_N_IMAGES',
    'n_samples': 'MI_SAMPLES',
    'workers': 'SCORE_WORKERS',
    'alpha_beta_step': 'ALPHA_BETA_STEP',
}
ITERATION_SETTINGS = {
    'train-vqa': ('HEAD_ITERATIONS', 'HEAD_BATCH_SIZE', 'HEAD_LEARNING_RATE'),
    'train-vqacap': ('HEAD_ITERATIONS', 'HEAD_BATCH_SIZE', 'HEAD_LEARNING_RATE'),
    'train-ranker': ('RANKER_ITERATIONS', 'RANKING_BATCH_SIZE', None),
    'sweep-n': ('RANKER_ITERATIONS', 'RANKING_BATCH_SIZE', None),
}
SYNTHETIC_FLAGS = ('n_facts', 'n_train', 'n_val', 'n_test', 'captions_per_image', 'caption_omission_rate',
                   'noise_sigma', 'answer_vocab_size', 'questions_per_scene')
RANKER_KINDS = ('agnostic', 'score_fusion', 'rep_fusion')


def resolve_config(args):
    """
    合并配置类、配置文件和命令行参数

    Returns:
        tuple: (配置类, 配置文件内容)
    """
    run_config = load_run_config(args.config) if args.config else {}
    cfg = get_config(args.env or run_config.get('env'))
    cfg = apply_run_config(cfg, run_config)
    overrides = {setting: getattr(args, flag) for flag, setting in FLAG_SETTINGS.items()
                 if getattr(args, flag, None) is not None}
    if args.command in ITERATION_SETTINGS:
        iterations, batch_size, learning_rate = ITERATION_SETTINGS[args.command]
        if args.iterations is not None:
            overrides[iterations] = args.iterations
        if args.batch_size is not None:
            overrides[batch_size] = args.batch_size
        if learning_rate and args.lr is not None:
            overrides[learning_rate] = args.lr
    if args.seed is not None:
        overrides['SEED'] = args.seed
    if overrides:
        cfg = type(f'{cfg.__name__}WithFlags', (cfg,), overrides)
    return cfg, run_config


def data_dir(args, cfg):
    return args.data or cfg.DATA_DIR


def out_path(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def load_dataset(args, cfg):
    from utils.dataset import Dataset
    return Dataset(data_dir(args, cfg))


def grounding_for(args):
    """排序模型需要的 u 缓存目录；agnostic_deeper 与纯 agnostic 不需要"""
    if getattr(args, 'mode', None) == 'agnostic' or (getattr(args, 'mode', None) == 'rep'
                                                     and getattr(args, 'fusion_mode', None) == 'agnostic_deeper'):
        return None
    return args.grounding


def ranking_split(args, cfg, dataset, split, grounding_dir):
    bank_hash = pipeline.bank_hash_of(grounding_dir) if grounding_dir else None
    return pipeline.load_ranking_split(dataset, split, grounding_dir, cfg.FEATURE_SOURCE, args.t_images,
                                       args.t_captions, bank_hash)


def load_ranker(path, kind=RANKER_KINDS):
    from utils.checkpoint import load_checkpoint
    return load_checkpoint(path, kind=kind)


@log_activity('gen-synth')
def cmd_gen_synth(args, cfg, run_config):
    """生成合成数据集"""
    from utils.synthetic import SyntheticWorldConfig, generate_synthetic_world
    params = dict(run_config.get('synthetic', {}))
    params.update({flag: getattr(args, flag) for flag in SYNTHETIC_FLAGS if getattr(args, flag) is not None})
    params['seed'] = cfg.SEED
    world = generate_synthetic_world(SyntheticWorldConfig(**params))
    world.write(args.out)
    print(f'✅ 合成数据集已写入 {args.out}: {world.counts()}')
    return {'synthetic': world.config.to_dict()}


def _train_head(args, cfg, source, checkpoint_name, trace_name):
    dataset = load_dataset(args, cfg)
    head, trace, val_accuracy = pipeline.train_head(dataset, cfg, source, seed=cfg.SEED)
    iterations = cfg.HEAD_ITERATIONS
    head.save(out_path(args, checkpoint_name), seed=cfg.SEED, iteration=iterations,
              val_accuracy=val_accuracy, config=pipeline.rmsprop_config(cfg, 'HEAD_LEARNING_RATE').to_dict())
    trace.to_csv(out_path(args, trace_name))
    print(f'✅ {head.KIND} 训练完成: 最终损失 {trace.final_loss:.4f}'
          + (f', 验证集准确率 {val_accuracy:.4f}' if val_accuracy is not None else ''))
    return {'val_accuracy': val_accuracy}


@log_activity('train-vqa')
def cmd_train_vqa(args, cfg, run_config):
    """训练 VQA 分类头（图像输入）"""
    return _train_head(args, cfg, 'image', pipeline.VQA_CHECKPOINT, 'vqa_trace.csv')


@log_activity('train-vqacap')
def cmd_train_vqacap(args, cfg, run_config):
    """训练 VQA-Caption 分类头（描述词袋输入）"""
    return _train_head(args, cfg, 'caption', pipeline.VQACAPTION_CHECKPOINT, 'vqacaption_trace.csv')


def _heads(args):
    from models.vqa import VqaCaptionHead, VqaHead
    from utils.checkpoint import load_checkpoint
    models_dir = args.models or args.out
    vqa = load_checkpoint(args.vqa or os.path.join(models_dir, pipeline.VQA_CHECKPOINT), kind=VqaHead.KIND)
    vqacaption = load_checkpoint(args.vqacap or os.path.join(models_dir, pipeline.VQACAPTION_CHECKPOINT),
                                 kind=VqaCaptionHead.KIND)
    return vqa, vqacaption


@log_activity('extract-grounding')
def cmd_extract_grounding(args, cfg, run_config):
    """构建问答库，写出各划分的 u（或隐藏激活）缓存"""
    dataset = load_dataset(args, cfg)
    vqa, vqacaption = _heads(args)
    bank = dataset.build_bank(cfg.QA_PER_IMAGE, cfg.QA_NUM_IMAGES, cfg.SEED)
    written = pipeline.extract_grounding(dataset, vqa, vqacaption, bank, args.out, cfg.FEATURE_SOURCE,
                                         cfg.PROB_FLOOR)
    print(f'✅ 问答库 N={bank.N}，写出 {len(written)} 个缓存到 {args.out}')
    return {'N': bank.N, 'bank_hash': bank.content_hash()}


@log_activity('train-ranker')
def cmd_train_ranker(args, cfg, run_config):
    """训练 VQA 无关模型、分数级融合或表示级融合"""
    dataset = load_dataset(args, cfg)
    grounding_dir = grounding_for(args)
    if args.mode != 'agnostic' and grounding_dir is None and args.fusion_mode != 'agnostic_deeper':
        raise ParameterError(f'{args.mode} 模式需要 --grounding')
    train = ranking_split(args, cfg, dataset, 'train', grounding_dir).limit_captions_per_image(
        args.captions_per_image_limit)
    val = ranking_split(args, cfg, dataset, 'val', grounding_dir)
    record = {'seed': cfg.SEED, 'iteration': cfg.RANKER_ITERATIONS}

    if args.agnostic:
        embedder = load_ranker(args.agnostic, kind='agnostic')
    else:
        embedder, trace = pipeline.build_embedder(train, val, cfg, seed=cfg.SEED, learning_rate=args.lr)
        embedder.save(out_path(args, pipeline.AGNOSTIC_CHECKPOINT), **record)
        if trace is not None:
            trace.to_csv(out_path(args, 'agnostic_trace.csv'))
    if args.mode == 'agnostic':
        print(f'✅ agnostic 模型已保存到 {args.out}')
        return {}

    model, trace = pipeline.train_fusion(args.mode, train, val, embedder, cfg, fusion_mode=args.fusion_mode,
                                         seed=cfg.SEED, learning_rate=args.lr)
    name = model.KIND if args.mode == 'score' else f'{model.KIND}_{args.fusion_mode}'
    model.save(out_path(args, f'{name}.ckpt'), best_iteration=trace.best_iteration, **record)
    trace.to_csv(out_path(args, f'{name}_trace.csv'))
    print(f'✅ {name} 训练完成，最佳迭代 {trace.best_iteration}')
    return {'checkpoint': f'{name}.ckpt', 'extra': model.extra_state()}


@log_activity('fit-alphabeta')
def cmd_fit_alphabeta(args, cfg, run_config):
    """在验证集上重新拟合分数级融合的 α、β"""
    from models.ranking import fit_alpha_beta
    dataset = load_dataset(args, cfg)
    model = load_ranker(args.model, kind='score_fusion')
    val = ranking_split(args, cfg, dataset, 'val', args.grounding)
    fitted = fit_alpha_beta(model, val, cfg.ALPHA_BETA_STEP, first_n_images=args.first_n_images)
    model.save(out_path(args, 'score_fusion.ckpt'), seed=cfg.SEED)
    with open(out_path(args, 'alphabeta.json'), 'w', encoding='utf-8') as f:
        json.dump(fitted, f, sort_keys=True, indent=1)
        f.write('\n')
    print(f'✅ alpha={fitted["alpha"]:g} beta={fitted["beta"]:g} 验证目标 {fitted["objective"]:.4f}')
    return fitted


@log_activity('evaluate')
def cmd_evaluate(args, cfg, run_config):
    """评估检索 recall@(1, 5, 10)"""
    from utils.evaluation import evaluate
    dataset = load_dataset(args, cfg)
    model = load_ranker(args.model)
    if args.alpha is not None or args.beta is not None:
        if model.KIND != 'score_fusion':
            raise ParameterError(f'--alpha/--beta 只适用于 score_fusion，当前模型为 {model.KIND}')
        model.alpha = model.alpha if args.alpha is None else float(args.alpha)
        model.beta = model.beta if args.beta is None else float(args.beta)
    grounding_dir = args.grounding if model.KIND != 'agnostic' else None
    data = ranking_split(args, cfg, dataset, args.split, grounding_dir)
    report = evaluate(model, data, cfg.FIRST_N_IMAGES or None, cfg.SCORE_WORKERS)
    report.write(out_path(args, f'eval_{args.split}'))
    print(report.format_table(), end='')
    return report.as_flat_dict()


@log_activity('select-qa')
def cmd_select_qa(args, cfg, run_config):
    """按互信息为一张图像排序问答事实"""
    from models.informativeness import FusionJointPredictor, select_informative_qa, write_mi_csv
    from models.vqa import VqaHead
    from utils.checkpoint import load_checkpoint
    dataset = load_dataset(args, cfg)
    if not args.grounding:
        raise ParameterError('select-qa 需要 --grounding')
    head = load_checkpoint(args.vqa, kind=VqaHead.KIND)
    if args.head_keep_prob is not None:
        head.hidden_keep_prob = args.head_keep_prob
    model = load_ranker(args.model, kind=('score_fusion', 'rep_fusion'))
    bank = pipeline.load_bank(os.path.join(args.grounding, pipeline.BANK_FILE), dataset)
    data = ranking_split(args, cfg, dataset, args.split, args.grounding)
    image_id = args.image_id or data.image_ids[0]
    if image_id not in data.image_ids:
        raise ParameterError(f'图像 {image_id} 不在 {args.split} 划分中')
    i = data.image_ids.index(image_id)
    captions = data.first_n_images(args.num_images) if args.num_images else data
    image_t = None if data.image_t is None else data.image_t[:, i:i + 1]
    predictor = FusionJointPredictor(head, model, bank, data.image_x[:, i:i + 1], captions, image_t=image_t,
                                     image_id=image_id, prob_floor=cfg.PROB_FLOOR)
    results = select_informative_qa(predictor, cfg.MI_SAMPLES, cfg.SEED, args.marginal_mode,
                                    workers=cfg.SCORE_WORKERS or 1, top=args.top)
    path = out_path(args, f'mi_{image_id}.csv')
    write_mi_csv(results, bank, path)
    for rank, r in enumerate(results[:10], start=1):
        pair = bank[r.qa_index]
        print(f'{rank:>3} {pair.question_id:<20} {pair.answer_text:<16} {r.mi_nats:.6f}')
    return {'image_id': image_id, 'K': predictor.K, 'N': bank.N}


@log_activity('gradcheck')
def cmd_gradcheck(args, cfg, run_config):
    """有限差分检查全部模型的反向传播"""
    from utils.gradcheck import gradcheck_suite
    reports = gradcheck_suite(seed=cfg.SEED, tolerance=args.tolerance, dropout_mode=args.dropout_mode)
    text = '\n'.join(f'[{name}] {report.summary()}' for name, report in reports.items()) + '\n'
    with open(out_path(args, 'gradcheck.txt'), 'w', encoding='utf-8') as f:
        f.write(text)
    print(text, end='')
    failed = sorted(name for name, report in reports.items() if not report.passed)
    if failed:
        raise NumericError(f'梯度检查未通过: {", ".join(failed)}')
    return {name: report.max_rel_error for name, report in reports.items()}


@log_activity('sweep-n')
def cmd_sweep_n(args, cfg, run_config):
    """在不同问答库大小下训练并评估融合模型"""
    dataset = load_dataset(args, cfg)
    vqa, vqacaption = _heads(args)
    if args.agnostic:
        embedder = load_ranker(args.agnostic, kind='agnostic')
    else:
        embedder, _ = pipeline.build_embedder(dataset.ranking_split('train'), dataset.ranking_split('val'), cfg,
                                              seed=cfg.SEED)
    rows = pipeline.sweep_bank_sizes(dataset, vqa, vqacaption, embedder, cfg, out_path(args, 'sweep_n.csv'),
                                     ns=tuple(args.ns), per_image=cfg.QA_PER_IMAGE, seed=cfg.SEED,
                                     first_n_images=cfg.FIRST_N_IMAGES or None)
    print(f'✅ N 扫描完成，{len(rows)} 行写入 {os.path.join(args.out, "sweep_n.csv")}')
    return {'rows': len(rows)}


def cmd_serve(args, cfg, run_config):
    """加载模型并启动 HTTP 服务"""
    from app import create_app
    from utils.serving import ServingRegistry
    registry = ServingRegistry.from_paths(
        data_dir(args, cfg), args.model, split=args.split, grounding_dir=args.grounding, vqa_path=args.vqa,
        feature_source=cfg.FEATURE_SOURCE, t_images=args.t_images, t_captions=args.t_captions,
        first_n_images=cfg.FIRST_N_IMAGES or None, workers=cfg.SCORE_WORKERS, prob_floor=cfg.PROB_FLOOR)
    pipeline.write_run_record(args.out, args.command, vars(args), cfg)
    app = create_app(args.env, registry=registry)
    print(f'🚀 服务启动: http://{args.host or cfg.SERVER_HOST}:{args.port or cfg.SERVER_PORT}')
    app.run(host=args.host or cfg.SERVER_HOST, port=args.port or cfg.SERVER_PORT, debug=False)
    return {}


COMMANDS = {
    'gen-synth': cmd_gen_synth,
    'train-vqa': cmd_train_vqa,
    'train-vqacap': cmd_train_vqacap,
    'extract-grounding': cmd_extract_grounding,
    'train-ranker': cmd_train_ranker,
    'fit-alphabeta': cmd_fit_alphabeta,
    'evaluate': cmd_evaluate,
    'select-qa': cmd_select_qa,
    'gradcheck': cmd_gradcheck,
    'sweep-n': cmd_sweep_n,
    'serve': cmd_serve,
}


def build_parser():
    """构造命令行解析器"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, help='随机种子（默认取配置 SEED）')
    common.add_argument('--config', help='JSON 运行配置文件')
    common.add_argument('--env', choices=['development', 'testing', 'full', 'default'],
                        help='配置类名（默认读取 MMRANK_ENV）')
    common.add_argument('--data', help='数据目录（默认 MMRANK_DATA_DIR）')
    common.add_argument('--out', help='输出目录（默认 runs/<命令名>）')
    common.add_argument('--log-level', help='日志级别')

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument('--iterations', type=int, help='迭代次数')
    training.add_argument('--batch-size', type=int, help='批大小')
    training.add_argument('--lr', type=float, help='学习率')

    t_inputs = argparse.ArgumentParser(add_help=False)
    t_inputs.add_argument('--t-images', help='预先计算的图像 t 特征路径模板，含 {split}')
    t_inputs.add_argument('--t-captions', help='预先计算的描述 t 特征路径模板，含 {split}')
    t_inputs.add_argument('--feature-source', choices=sorted(pipeline.FEATURE_SOURCES), help='VQA 表示来源')

    heads = argparse.ArgumentParser(add_help=False)
    heads.add_argument('--models', help='包含 vqa.ckpt 与 vqacaption.ckpt 的目录（默认 --out）')
    heads.add_argument('--vqa', help='VQA 分类头检查点')
    heads.add_argument('--vqacap', help='VQA-Caption 分类头检查点')

    parser = argparse.ArgumentParser(description='VQA 增强的图像-描述检索')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-synth', parents=[common], help='生成合成数据集')
    p.add_argument('--n-facts', dest='n_facts', type=int)
    p.add_argument('--n-train', dest='n_train', type=int)
    p.add_argument('--n-val', dest='n_val', type=int)
    p.add_argument('--n-test', dest='n_test', type=int)
    p.add_argument('--captions-per-image', dest='captions_per_image', type=int)
    p.add_argument('--omission-rate', dest='caption_omission_rate', type=float)
    p.add_argument('--noise-sigma', dest='noise_sigma', type=float)
    p.add_argument('--answer-vocab-size', dest='answer_vocab_size', type=int)
    p.add_argument('--questions-per-scene', dest='questions_per_scene', type=int)

    for name, text in (('train-vqa', '训练 VQA 分类头'), ('train-vqacap', '训练 VQA-Caption 分类头')):
        p = sub.add_parser(name, parents=[common, training], help=text)
        p.add_argument('--mm-dim', type=int)
        p.add_argument('--hidden-keep-prob', type=float, help='隐藏层 dropout 保留概率（互信息估计需要）')

    p = sub.add_parser('extract-grounding', parents=[common, heads], help='构建问答库并提取 u 缓存')
    p.add_argument('--per-image', type=int, help='每张图像的问答对数')
    p.add_argument('--num-images', type=int, help='抽样图像数')
    p.add_argument('--feature-source', choices=sorted(pipeline.FEATURE_SOURCES))
    p.add_argument('--prob-floor', type=float)

    p = sub.add_parser('train-ranker', parents=[common, training, t_inputs], help='训练排序模型')
    p.add_argument('--mode', choices=['agnostic', 'score', 'rep'], default='rep')
    p.add_argument('--fusion-mode', default='full',
                   choices=['full', 'caption_only', 'image_only', 'agnostic_deeper'])
    p.add_argument('--grounding', help='extract-grounding 的输出目录')
    p.add_argument('--agnostic', help='已训练的 agnostic 检查点（省略时重新训练）')
    p.add_argument('--captions-per-image-limit', type=int, choices=range(1, 6), metavar='{1..5}')
    p.add_argument('--keep-prob', type=float)
    p.add_argument('--embed-dim-v', type=int)
    p.add_argument('--embed-dim-r', type=int)

    p = sub.add_parser('fit-alphabeta', parents=[common, t_inputs], help='拟合分数级融合的 alpha/beta')
    p.add_argument('--model', required=True)
    p.add_argument('--grounding', required=True)
    p.add_argument('--alpha-beta-step', type=float)
    p.add_argument('--first-n-images', type=int)

    p = sub.add_parser('evaluate', parents=[common, t_inputs], help='评估检索结果')
    p.add_argument('--model', required=True)
    p.add_argument('--grounding')
    p.add_argument('--split', default='test', choices=['train', 'val', 'test'])
    p.add_argument('--first-n-images', type=int, help='只用前 n 张图像，0 表示全部')
    p.add_argument('--alpha', type=float)
    p.add_argument('--beta', type=float)
    p.add_argument('--workers', type=int)

    p = sub.add_parser('select-qa', parents=[common, t_inputs], help='按互信息选择问答事实')
    p.add_argument('--model', required=True)
    p.add_argument('--vqa', required=True)
    p.add_argument('--grounding', required=True)
    p.add_argument('--split', default='test', choices=['train', 'val', 'test'])
    p.add_argument('--image-id')
    p.add_argument('--num-images', type=int, help='候选描述取前 n 张图像的描述，默认全部')
    p.add_argument('--n-samples', type=int, help='dropout 采样次数（默认 5000）')
    p.add_argument('--marginal-mode', default='from_joint', choices=['from_joint', 'point_estimate', 'paper_literal'])
    p.add_argument('--head-keep-prob', type=float, help='覆盖 VQA 头隐藏层的 dropout 保留概率')
    p.add_argument('--top', type=int)
    p.add_argument('--workers', type=int)

    p = sub.add_parser('gradcheck', parents=[common], help='梯度检查')
    p.add_argument('--tolerance', type=float, default=1e-4)
    p.add_argument('--dropout-mode', choices=('infer', 'train'), default='infer')

    p = sub.add_parser('sweep-n', parents=[common, training, heads], help='问答库大小扫描')
    p.add_argument('--agnostic')
    p.add_argument('--ns', type=int, nargs='+', default=list(pipeline.SWEEP_NS))
    p.add_argument('--per-image', type=int)
    p.add_argument('--first-n-images', type=int)

    p = sub.add_parser('serve', parents=[common, t_inputs], help='启动 HTTP 服务')
    p.add_argument('--model', required=True)
    p.add_argument('--grounding')
    p.add_argument('--vqa')
    p.add_argument('--split', default='test', choices=['train', 'val', 'test'])
    p.add_argument('--first-n-images', type=int)
    p.add_argument('--workers', type=int)
    p.add_argument('--host')
    p.add_argument('--port', type=int)
    return parser


def main(argv=None):
    """
    主函数

    Returns:
        int: 退出码，MMRankError 为 1，参数错误由 argparse 以 2 退出
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == 'train-ranker' and args.mode != 'rep' and args.fusion_mode != 'full':
        parser.error(f'--fusion-mode {args.fusion_mode} 只适用于 --mode rep')
    for name in ('iterations', 'batch_size', 'lr', 't_images', 't_captions', 'grounding', 'agnostic',
                 'models', 'vqa', 'vqacap'):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        cfg, run_config = resolve_config(args)
        setup_logging(args.log_level or cfg.LOG_LEVEL)
        if args.out is None:
            args.out = data_dir(args, cfg) if args.command == 'gen-synth' else os.path.join('runs', args.command)
        result = COMMANDS[args.command](args, cfg, run_config)
        if args.command != 'serve':
            record_args = dict(vars(args), result=result)
            pipeline.write_run_record(args.out, args.command, record_args, cfg)
    except MMRankError as e:
        print(f'错误: {e.message}', file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
