"""
运行配置文件的校验
配置文件是 JSON，未知的键直接报错并指出键名
优先级：配置类默认值 < 配置文件 < 命令行参数
"""

import json
import logging

from marshmallow import RAISE, Schema, ValidationError, fields, validate, validates_schema

from .errors import ParameterError

logger = logging.getLogger(__name__)


class RmsPropConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    learning_rate = fields.Float(validate=validate.Range(min=0, min_inclusive=False))
    decay_rho = fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False, max_inclusive=False))
    epsilon = fields.Float(validate=validate.Range(min=0, min_inclusive=False))
    lr_decay_factor = fields.Float(validate=validate.Range(min=0, max=1, min_inclusive=False))
    lr_decay_every = fields.Int(validate=validate.Range(min=1))


class SyntheticWorldConfigSchema(Schema):
    class Meta:
        unknown = RAISE

    n_facts = fields.Int(validate=validate.Range(min=1))
    n_train = fields.Int(validate=validate.Range(min=0))
    n_val = fields.Int(validate=validate.Range(min=0))
    n_test = fields.Int(validate=validate.Range(min=0))
    captions_per_image = fields.Int(validate=validate.Range(min=1))
    caption_omission_rate = fields.Float(validate=validate.Range(min=0, max=1, max_inclusive=False))
    noise_sigma = fields.Float(validate=validate.Range(min=0))
    caption_style_sigma = fields.Float(validate=validate.Range(min=0))
    fact_prob = fields.Float(validate=validate.Range(min=0, max=1))
    answer_vocab_size = fields.Int(validate=validate.Range(min=2))
    image_dim = fields.Int(validate=validate.Range(min=1))
    caption_dim = fields.Int(validate=validate.Range(min=1))
    bow_dim = fields.Int(validate=validate.Range(min=1))
    question_dim = fields.Int(validate=validate.Range(min=1))
    questions_per_scene = fields.Int(validate=validate.Range(min=1))
    seed = fields.Int()


class RunConfigSchema(Schema):
    """
    {
      "env": "testing",
      "seed": 0,
      "settings": {"EMBED_DIM_V": 64},
      "rmsprop": {...},
      "synthetic": {...}
    }
    settings 中的键必须是配置类中已有的大写配置项
    """

    class Meta:
        unknown = RAISE

    env = fields.Str(validate=validate.OneOf(['development', 'testing', 'full', 'default']))
    seed = fields.Int()
    settings = fields.Dict(keys=fields.Str(), values=fields.Raw(allow_none=True))
    rmsprop = fields.Nested(RmsPropConfigSchema)
    synthetic = fields.Nested(SyntheticWorldConfigSchema)

    @validates_schema
    def check_settings(self, data, **kwargs):
        from config import Config
        known = set(Config.to_dict())
        unknown = sorted(key for key in data.get('settings', {}) if key not in known)
        if unknown:
            raise ValidationError({'settings': [f'未知的配置项: {key}' for key in unknown]})


RMSPROP_SETTINGS = {
    'decay_rho': 'RMS_DECAY_RHO',
    'epsilon': 'RMS_EPSILON',
    'lr_decay_factor': 'LR_DECAY_FACTOR',
    'lr_decay_every': 'LR_DECAY_EVERY',
}
LEARNING_RATE_SETTINGS = ('HEAD_LEARNING_RATE', 'AGNOSTIC_LEARNING_RATE', 'SCORE_FUSION_LEARNING_RATE',
                          'REP_FUSION_LEARNING_RATE')


def load_run_config(path):
    """
    读取并校验运行配置文件

    Returns:
        dict: 校验后的内容
    """
    try:
        with open(path, encoding='utf-8') as f:
            raw = json.load(f)
    except FileNotFoundError as e:
        raise ParameterError(f'配置文件不存在: {path}') from e
    except json.JSONDecodeError as e:
        raise ParameterError(f'配置文件 {path} 不是合法的 JSON: {e}') from e
    try:
        return RunConfigSchema().load(raw)
    except ValidationError as e:
        raise ParameterError(f'配置文件 {path} 校验失败: {e.messages}') from e


def apply_run_config(base, run_config):
    """
    在配置类之上叠加配置文件，得到新的配置类

    Args:
        base (type): config.py 中的配置类
        run_config (dict): load_run_config 的结果

    Returns:
        type: 派生出的配置类
    """
    overrides = dict(run_config.get('settings', {}))
    if 'seed' in run_config:
        overrides['SEED'] = run_config['seed']
    rmsprop = run_config.get('rmsprop', {})
    for key, setting in RMSPROP_SETTINGS.items():
        if key in rmsprop:
            overrides[setting] = rmsprop[key]
    if 'learning_rate' in rmsprop:
        for setting in LEARNING_RATE_SETTINGS:
            overrides.setdefault(setting, rmsprop['learning_rate'])
    if not overrides:
        return base
    logger.debug('配置文件覆盖: %s', sorted(overrides))
    return type(f'{base.__name__}WithFile', (base,), overrides)
