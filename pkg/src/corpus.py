"""
Corpus - HotpotQA / 2WikiMultihopQA 数据读取、句子索引、黄金知识组合构造与数据划分
"""

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

FORMATS = ("hotpotqa", "2wiki")
ARRANGEMENTS = ("original", "shuffle", "sorted", "cluster", "cropping", "document")
DEV_SIZE = 500
UNANSWERABLE = {"yes", "no"}
CROP_LENGTH = 2


def stable_seed(*parts: Any) -> int:
    """由任意片段派生跨平台稳定的 64 位种子"""
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


@dataclass(frozen=True, order=True)
class SentenceRef:
    """句子地址: (文档序号, 文档内句子序号)"""

    doc_idx: int
    sent_idx: int

    def to_list(self) -> List[int]:
        return [self.doc_idx, self.sent_idx]

    @classmethod
    def from_list(cls, value: Iterable[int]) -> "SentenceRef":
        doc_idx, sent_idx = value
        return cls(int(doc_idx), int(sent_idx))


@dataclass
class ContextDocument:
    """上下文中的一篇文档"""

    title: str
    sentences: List[str]

    def to_dict(self) -> Dict:
        return {"title": self.title, "sentences": self.sentences}


@dataclass
class GoldComposition:
    """黄金知识组合"""

    refs: List[SentenceRef]
    arrangement: str
    flagged: bool = False

    def to_dict(self) -> Dict:
        return {
            "refs": [r.to_list() for r in self.refs],
            "arrangement": self.arrangement,
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "GoldComposition":
        return cls(
            refs=[SentenceRef.from_list(r) for r in data["refs"]],
            arrangement=data["arrangement"],
            flagged=bool(data.get("flagged", False)),
        )


@dataclass
class Sample:
    """一条 QA 样本"""

    id: str
    answer: str
    gold_question: str
    documents: List[ContextDocument]
    supporting_facts: List[SentenceRef] = field(default_factory=list)
    answer_sentence: Optional[SentenceRef] = None
    composition: Optional[GoldComposition] = None

    @cached_property
    def refs(self) -> List[SentenceRef]:
        """按 (doc_idx, sent_idx) 顺序展开的全部句子地址"""
        return [
            SentenceRef(d, s)
            for d, doc in enumerate(self.documents)
            for s in range(len(doc.sentences))
        ]

    @cached_property
    def _flat(self) -> Dict[SentenceRef, int]:
        return {ref: i for i, ref in enumerate(self.refs)}

    @property
    def num_sentences(self) -> int:
        return len(self.refs)

    @property
    def sentences(self) -> List[str]:
        return [doc_sent for doc in self.documents for doc_sent in doc.sentences]

    @property
    def labels(self) -> List[int]:
        gold = set(self.supporting_facts)
        return [1 if ref in gold else 0 for ref in self.refs]

    def is_valid_ref(self, ref: SentenceRef) -> bool:
        return ref in self._flat

    def flat_index(self, ref: SentenceRef) -> int:
        try:
            return self._flat[ref]
        except KeyError:
            raise DataError(f"样本 {self.id} 中不存在句子 {ref.to_list()}") from None

    def text(self, ref: SentenceRef) -> str:
        self.flat_index(ref)
        return self.documents[ref.doc_idx].sentences[ref.sent_idx]

    def title(self, ref: SentenceRef) -> str:
        self.flat_index(ref)
        return self.documents[ref.doc_idx].title

    def to_dict(self) -> Dict:
        return {
            "id": self.id,
            "answer": self.answer,
            "question": self.gold_question,
            "documents": [doc.to_dict() for doc in self.documents],
            "supporting_facts": [r.to_list() for r in self.supporting_facts],
            "composition": self.composition.to_dict() if self.composition else None,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Sample":
        sample = cls(
            id=str(data["id"]),
            answer=data["answer"],
            gold_question=data.get("question", ""),
            documents=[
                ContextDocument(title=d["title"], sentences=list(d["sentences"]))
                for d in data["documents"]
            ],
            supporting_facts=[SentenceRef.from_list(r) for r in data["supporting_facts"]],
        )
        for ref in sample.supporting_facts:
            sample.flat_index(ref)
        if data.get("composition"):
            sample.composition = GoldComposition.from_dict(data["composition"])
        sample.answer_sentence = locate_answer_sentence(sample)
        return sample


@dataclass
class DatasetSplit:
    """训练 / 开发 / 测试划分"""

    train: List[Sample]
    dev: List[Sample]
    test: List[Sample]


def locate_answer_sentence(sample: Sample) -> Optional[SentenceRef]:
    """在支持事实句中查找包含答案的句子（大小写不敏感，最早的上下文位置优先）"""
    answer = sample.answer.strip().lower()
    if not answer:
        return None
    for ref in sorted(sample.supporting_facts):
        if answer in sample.text(ref).lower():
            return ref
    return None


def _answer_document_in_context(sample: Sample) -> Optional[int]:
    answer = sample.answer.strip().lower()
    if not answer:
        return None
    for ref in sample.refs:
        if answer in sample.text(ref).lower():
            return ref.doc_idx
    return None


class HotpotLoader:
    """HotpotQA 格式读取器，记录被丢弃的样本数"""

    def __init__(self, format: str = "hotpotqa"):
        if format not in FORMATS:
            raise ConfigError(f"未知数据格式: {format} (可选: {', '.join(FORMATS)})")
        self.format = format
        self.dropped = 0

    def load(self, path: Path) -> List[Sample]:
        path = Path(path)
        if not path.exists():
            raise DataError(f"数据文件不存在: {path}")

        samples = []
        for index, record in self._records(path):
            sample = self.parse_record(record, index)
            if sample is not None:
                samples.append(sample)

        if self.dropped:
            logger.warning(f"{path.name}: 丢弃 {self.dropped} 条支持事实无法解析的样本")
        logger.info(f"读取 {path.name}: {len(samples)} 条样本 ({self.format})")
        return samples

    def _records(self, path: Path) -> Iterator[tuple]:
        text = path.read_text(encoding="utf-8")
        if path.suffix == ".jsonl":
            for i, line in enumerate(text.splitlines()):
                if not line.strip():
                    continue
                try:
                    yield i, json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataError(f"记录 {i} JSON 解析失败: {e}") from e
            return

        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"JSON 解析失败 {path}: {e}") from e
        if not isinstance(data, list):
            raise DataError(f"顶层必须是记录数组: {path}")
        yield from enumerate(data)

    def parse_record(self, record: Dict, index: int) -> Optional[Sample]:
        """解析单条记录；支持事实无法解析时返回 None"""
        try:
            sample_id = str(record.get("_id", record.get("id")))
            documents = self._parse_context(record["context"])
            facts = self._parse_supporting_facts(record["supporting_facts"])
            answer = str(record.get("answer", ""))
            question = str(record.get("question", ""))
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise DataError(f"记录 {index} 格式错误: {e!r}") from e

        title_to_doc = {doc.title: i for i, doc in enumerate(documents)}
        refs: List[SentenceRef] = []
        for title, sent_idx in facts:
            doc_idx = title_to_doc.get(title)
            if doc_idx is None or not 0 <= sent_idx < len(documents[doc_idx].sentences):
                self.dropped += 1
                logger.debug(f"记录 {index} ({sample_id}): 无法解析支持事实 {title!r}#{sent_idx}")
                return None
            ref = SentenceRef(doc_idx, sent_idx)
            if ref not in refs:
                refs.append(ref)

        sample = Sample(
            id=sample_id,
            answer=answer,
            gold_question=question,
            documents=documents,
            supporting_facts=refs,
        )
        sample.answer_sentence = locate_answer_sentence(sample)
        return sample

    @staticmethod
    def _parse_context(context: Any) -> List[ContextDocument]:
        # Hugging Face 版本: {"title": [...], "sentences": [[...], ...]}
        if isinstance(context, dict):
            pairs = list(zip(context["title"], context["sentences"]))
        else:
            pairs = [(item[0], item[1]) for item in context]

        documents = []
        seen = set()
        for title, sentences in pairs:
            if title in seen or not sentences:
                continue
            seen.add(title)
            documents.append(
                ContextDocument(title=str(title), sentences=[str(s) for s in sentences])
            )
        return documents

    @staticmethod
    def _parse_supporting_facts(facts: Any) -> List[tuple]:
        if isinstance(facts, dict):
            facts = zip(facts["title"], facts["sent_id"])
        return [(str(title), int(sent_idx)) for title, sent_idx in facts]


def load_dataset(path: Path, format: str = "hotpotqa") -> List[Sample]:
    """读取 HotpotQA / 2Wiki 格式数据集"""
    return HotpotLoader(format).load(path)


def filter_answerable(samples: List[Sample]) -> List[Sample]:
    """排除答案为 yes/no（或为空）的样本"""
    kept = [s for s in samples if s.answer.strip() and s.answer.strip().lower() not in UNANSWERABLE]
    if len(kept) != len(samples):
        logger.info(f"过滤 yes/no 样本: {len(samples)} -> {len(kept)}")
    return kept


def make_splits(train: List[Sample], orig_dev: List[Sample], seed: int) -> DatasetSplit:
    """
    构造数据划分

    test = 过滤后的原始开发集；dev = 从训练集随机抽取的 500 条；train = 其余样本。
    抽取之后三部分都再做一次 yes/no 过滤（对已过滤的输入无影响）。
    """
    if len(train) <= DEV_SIZE:
        raise DataError(f"训练集样本数 {len(train)} 不足，需要多于 {DEV_SIZE} 条")

    rng = random.Random(seed)
    dev_indices = set(rng.sample(range(len(train)), DEV_SIZE))
    dev = [s for i, s in enumerate(train) if i in dev_indices]
    rest = [s for i, s in enumerate(train) if i not in dev_indices]

    split = DatasetSplit(
        train=filter_answerable(rest),
        dev=filter_answerable(dev),
        test=filter_answerable(orig_dev),
    )
    ids = {name: {s.id for s in getattr(split, name)} for name in ("train", "dev", "test")}
    for a, b in (("train", "dev"), ("train", "test"), ("dev", "test")):
        overlap = sorted(ids[a] & ids[b])
        if overlap:
            raise DataError(f"{a} 与 {b} 存在 {len(overlap)} 个重复 id，例如 {overlap[0]}")
    return split


def dataset_statistics(split: DatasetSplit) -> Dict[str, Dict[str, float]]:
    """各划分的样本数、平均支持事实数、平均句子数"""
    stats = {}
    for name in ("train", "dev", "test"):
        samples = getattr(split, name)
        n = len(samples)
        stats[name] = {
            "samples": n,
            "mean_supporting_facts": (
                sum(len(s.supporting_facts) for s in samples) / n if n else 0.0
            ),
            "mean_sentences": sum(s.num_sentences for s in samples) / n if n else 0.0,
        }
    return stats


def _clusters(sample: Sample) -> List[List[SentenceRef]]:
    """同一文档内相邻句子归为一簇，按上下文顺序"""
    clusters: List[List[SentenceRef]] = []
    for ref in sorted(sample.supporting_facts):
        last = clusters[-1][-1] if clusters else None
        if last and last.doc_idx == ref.doc_idx and last.sent_idx + 1 == ref.sent_idx:
            clusters[-1].append(ref)
        else:
            clusters.append([ref])
    return clusters


def _cluster_order(sample: Sample) -> List[SentenceRef]:
    answer = sample.answer.strip().lower()

    def has_answer(cluster: List[SentenceRef]) -> bool:
        return bool(answer) and any(answer in sample.text(r).lower() for r in cluster)

    clusters = _clusters(sample)
    ordered = [c for c in clusters if has_answer(c)] + [c for c in clusters if not has_answer(c)]
    return [ref for cluster in ordered for ref in cluster]


def _document_order(sample: Sample) -> GoldComposition:
    facts = sample.supporting_facts
    anchor = sample.answer_sentence

    if anchor is None:
        answer_doc = _answer_document_in_context(sample)
        logger.warning(f"样本 {sample.id}: 支持事实中未找到答案，使用降级顺序")
        if answer_doc is None:
            return GoldComposition(sorted(facts), "document", flagged=True)
        head = sorted(f for f in facts if f.doc_idx == answer_doc)
        rest = sorted(f for f in facts if f.doc_idx != answer_doc)
        return GoldComposition(head + rest, "document", flagged=True)

    doc_facts = sorted(f for f in facts if f.doc_idx == anchor.doc_idx)
    # 答案句及其之后的句子在前，答案句之前的句子在后
    answer_run = [f for f in doc_facts if f.sent_idx >= anchor.sent_idx]
    before_run = [f for f in doc_facts if f.sent_idx < anchor.sent_idx]
    rest = sorted(f for f in facts if f.doc_idx != anchor.doc_idx)
    return GoldComposition(answer_run + before_run + rest, "document")


def build_gold_composition(
    sample: Sample, arrangement: str, epoch_seed: Optional[int] = None
) -> GoldComposition:
    """
    按指定排列方式由支持事实构造黄金知识组合

    Args:
        sample: 样本
        arrangement: original / shuffle / sorted / cluster / cropping / document
        epoch_seed: shuffle 排列使用的轮次种子

    Returns:
        GoldComposition: 支持事实的一个排列（cropping 时为截断）
    """
    if arrangement not in ARRANGEMENTS:
        raise ConfigError(f"未知排列方式: {arrangement}")
    if not sample.supporting_facts:
        raise DataError(f"样本 {sample.id} 没有支持事实")

    facts = list(sample.supporting_facts)
    if arrangement == "original":
        return GoldComposition(facts, arrangement)
    if arrangement == "shuffle":
        rng = random.Random(stable_seed(epoch_seed or 0, sample.id))
        rng.shuffle(facts)
        return GoldComposition(facts, arrangement)
    if arrangement == "sorted":
        return GoldComposition(sorted(facts), arrangement)
    if arrangement == "cluster":
        return GoldComposition(_cluster_order(sample), arrangement)
    if arrangement == "cropping":
        return GoldComposition(_cluster_order(sample)[:CROP_LENGTH], arrangement)
    return _document_order(sample)


def write_jsonl_records(records: Iterable[Dict], path: Path) -> int:
    """逐行写出 JSON 对象，返回条数"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_jsonl_records(path: Path) -> Iterator[Dict]:
    """逐行读取 JSON 对象"""
    path = Path(path)
    with path.open(encoding="utf-8") as f:
        for i, line in enumerate(f):
            if not line.strip():
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path.name} 第 {i} 行 JSON 解析失败: {e}") from e


def write_samples(samples: Iterable[Sample], path: Path) -> int:
    """写出交换格式 JSONL"""
    return write_jsonl_records((s.to_dict() for s in samples), path)


def read_samples(path: Path) -> List[Sample]:
    """读取交换格式 JSONL"""
    samples = []
    for i, record in enumerate(read_jsonl_records(path)):
        try:
            samples.append(Sample.from_dict(record))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{Path(path).name} 记录 {i} 格式错误: {e!r}") from e
    return samples
