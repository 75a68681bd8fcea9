"""
数据清单
UTF-8 文本，每行一条记录，字段用制表符分隔，第一行是以 # 开头的表头：

    #kind  id  split  row  bow_row  image_id  answer_index  text

kind 取值：
    image    id=图像编号, split, row=图像特征行号
    caption  id=描述编号, split, row=描述特征行号, bow_row=词袋特征行号, image_id, text
    qa       id=问答编号, split, row=问题特征行号, image_id, answer_index, text=问题
    answer   id=答案下标, text=答案
不适用的字段留空
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass

from marshmallow import EXCLUDE, Schema, ValidationError, fields, post_load, validate

from .errors import ManifestError, NotFoundError

logger = logging.getLogger(__name__)

COLUMNS = ('kind', 'id', 'split', 'row', 'bow_row', 'image_id', 'answer_index', 'text')
HEADER_LINE = '#' + '\t'.join(COLUMNS)
SPLITS = ('train', 'val', 'test')


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    split: str
    row: int


@dataclass(frozen=True)
class CaptionRecord:
    caption_id: str
    split: str
    row: int
    bow_row: int
    image_id: str
    text: str = ''


@dataclass(frozen=True)
class QARecord:
    qa_id: str
    split: str
    question_row: int
    answer_index: int
    image_id: str
    question_text: str = ''


class _RecordSchema(Schema):
    class Meta:
        unknown = EXCLUDE

    id = fields.Str(required=True, validate=validate.Length(min=1))


class ImageRecordSchema(_RecordSchema):
    split = fields.Str(required=True, validate=validate.OneOf(SPLITS))
    row = fields.Int(required=True, validate=validate.Range(min=0))

    @post_load
    def make(self, data, **kwargs):
        return ImageRecord(data['id'], data['split'], data['row'])


class CaptionRecordSchema(_RecordSchema):
    split = fields.Str(required=True, validate=validate.OneOf(SPLITS))
    row = fields.Int(required=True, validate=validate.Range(min=0))
    bow_row = fields.Int(required=True, validate=validate.Range(min=0))
    image_id = fields.Str(required=True, validate=validate.Length(min=1))
    text = fields.Str(load_default='')

    @post_load
    def make(self, data, **kwargs):
        return CaptionRecord(data['id'], data['split'], data['row'], data['bow_row'], data['image_id'],
                             data['text'])


class QARecordSchema(_RecordSchema):
    split = fields.Str(required=True, validate=validate.OneOf(SPLITS))
    row = fields.Int(required=True, validate=validate.Range(min=0))
    answer_index = fields.Int(required=True, validate=validate.Range(min=0))
    image_id = fields.Str(required=True, validate=validate.Length(min=1))
    text = fields.Str(load_default='')

    @post_load
    def make(self, data, **kwargs):
        return QARecord(data['id'], data['split'], data['row'], data['answer_index'], data['image_id'],
                        data['text'])


class AnswerRecordSchema(_RecordSchema):
    id = fields.Int(required=True, validate=validate.Range(min=0))
    text = fields.Str(load_default='')


SCHEMAS = {
    'image': ImageRecordSchema(),
    'caption': CaptionRecordSchema(),
    'qa': QARecordSchema(),
    'answer': AnswerRecordSchema(),
}


class DatasetManifest:
    """
    图像、描述、问答对和答案表的编号到特征行号的映射
    所有列表保持文件中的顺序
    """

    def __init__(self, images=None, captions=None, qa=None, answers=None):
        self.images = OrderedDict((r.image_id, r) for r in (images or []))
        self.captions = list(captions or [])
        self.qa = list(qa or [])
        self.answers = dict(answers or {})

    @classmethod
    def read(cls, path):
        """
        读取并解析清单，字段错误会指出行号

        Returns:
            DatasetManifest: 清单
        """
        with open(path, encoding='utf-8') as f:
            lines = f.read().split('\n')
        if not lines or lines[0].rstrip('\r') != HEADER_LINE:
            raise ManifestError(f'{path}: 第 1 行必须是表头 {HEADER_LINE!r}')
        manifest = cls()
        for lineno, line in enumerate(lines[1:], start=2):
            line = line.rstrip('\r')
            if not line:
                continue
            manifest._add_line(line, f'{path}:{lineno}')
        logger.info('读取清单 %s: %d 张图像, %d 条描述, %d 个问答对', path, len(manifest.images),
                    len(manifest.captions), len(manifest.qa))
        return manifest

    def _add_line(self, line, where):
        values = line.split('\t')
        if len(values) != len(COLUMNS):
            raise ManifestError(f'{where}: 需要 {len(COLUMNS)} 个字段, 实际 {len(values)} 个')
        raw = {key: value for key, value in zip(COLUMNS, values) if value != ''}
        kind = raw.pop('kind', '')
        if kind not in SCHEMAS:
            raise ManifestError(f'{where}: 未知的记录类型 {kind!r}')
        try:
            record = SCHEMAS[kind].load(raw)
        except ValidationError as e:
            raise ManifestError(f'{where}: {kind} 记录 {raw.get("id", "")!r} 字段错误 {e.messages}') from e
        if kind == 'image':
            if record.image_id in self.images:
                raise ManifestError(f'{where}: 图像编号重复 {record.image_id}')
            self.images[record.image_id] = record
        elif kind == 'caption':
            self.captions.append(record)
        elif kind == 'qa':
            self.qa.append(record)
        else:
            self.answers[record['id']] = record['text']

    def lines(self):
        out = [HEADER_LINE]
        for r in self.images.values():
            out.append(_line('image', r.image_id, r.split, r.row))
        for r in self.captions:
            out.append(_line('caption', r.caption_id, r.split, r.row, r.bow_row, r.image_id, text=r.text))
        for r in self.qa:
            out.append(_line('qa', r.qa_id, r.split, r.question_row, image_id=r.image_id,
                             answer_index=r.answer_index, text=r.question_text))
        for index in sorted(self.answers):
            out.append(_line('answer', index, text=self.answers[index]))
        return out

    def write(self, path):
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write('\n'.join(self.lines()) + '\n')

    def validate(self, counts=None, num_answers=None):
        """
        检查引用完整性，出错时指出具体编号

        Args:
            counts (dict): 各特征文件的行数，键为 image / caption / bow / question
            num_answers (int): 答案词表大小
        """
        counts = counts or {}
        for r in self.images.values():
            _check_row(counts, 'image', r.row, f'图像 {r.image_id}')
        seen = set()
        for r in self.captions:
            if r.caption_id in seen:
                raise ManifestError(f'描述编号重复 {r.caption_id}')
            seen.add(r.caption_id)
            image = self.images.get(r.image_id)
            if image is None:
                raise ManifestError(f'描述 {r.caption_id} 引用了不存在的图像 {r.image_id}')
            if image.split != r.split:
                raise ManifestError(f'描述 {r.caption_id} 的划分 {r.split} 与图像 {r.image_id} 的 {image.split} 不一致')
            _check_row(counts, 'caption', r.row, f'描述 {r.caption_id}')
            _check_row(counts, 'bow', r.bow_row, f'描述 {r.caption_id} 的词袋')
        seen = set()
        for r in self.qa:
            if r.qa_id in seen:
                raise ManifestError(f'问答编号重复 {r.qa_id}')
            seen.add(r.qa_id)
            if r.image_id not in self.images:
                raise ManifestError(f'问答对 {r.qa_id} 引用了不存在的图像 {r.image_id}')
            _check_row(counts, 'question', r.question_row, f'问答对 {r.qa_id}')
            if num_answers is not None and r.answer_index >= num_answers:
                raise ManifestError(f'问答对 {r.qa_id} 的答案下标 {r.answer_index} 超出词表大小 {num_answers}')
        return self

    def image_ids(self, split=None):
        return [i for i, r in self.images.items() if split is None or r.split == split]

    def image(self, image_id):
        if image_id not in self.images:
            raise NotFoundError(f'图像 {image_id} 不存在')
        return self.images[image_id]

    def captions_in(self, split=None):
        return [r for r in self.captions if split is None or r.split == split]

    def qa_in(self, split=None):
        return [r for r in self.qa if split is None or r.split == split]

    def qa_by_image(self, split=None):
        """
        Returns:
            dict: image_id -> 该图像的 QARecord 列表（文件顺序）
        """
        grouped = OrderedDict()
        for r in self.qa_in(split):
            grouped.setdefault(r.image_id, []).append(r)
        return grouped

    def answer_text(self, index):
        return self.answers.get(int(index), str(index))

    def summary(self):
        return {
            split: {
                'images': len(self.image_ids(split)),
                'captions': len(self.captions_in(split)),
                'qa': len(self.qa_in(split)),
            } for split in SPLITS
        }


def _line(kind, record_id, split='', row='', bow_row='', image_id='', answer_index='', text=''):
    text = str(text).replace('\t', ' ').replace('\n', ' ')
    return '\t'.join(str(v) for v in (kind, record_id, split, row, bow_row, image_id, answer_index, text))


def _check_row(counts, target, row, what):
    if target in counts and row >= counts[target]:
        raise ManifestError(f'{what} 的行号 {row} 超出特征文件 {target} 的行数 {counts[target]}')
