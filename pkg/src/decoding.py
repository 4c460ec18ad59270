"""
Decoding - 贪心解码与句子级 nucleus (top-p) 采样

每个样本采样 N_q 个长度为 K 的知识组合，已选句子在后续步骤中被屏蔽。
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np

from .config import DecodeConfig
from .corpus import Sample, SentenceRef, read_jsonl_records, stable_seed, write_jsonl_records
from .errors import DataError
from .selector import ContextState, SelectorModel

logger = logging.getLogger(__name__)

# 累积概率与 p 比较时的容差
MASS_TOLERANCE = 1e-9

__all__ = [
    "DecodeConfig",
    "SelectionDistribution",
    "KnowledgeComposition",
    "CompositionTrace",
    "top_p_truncate",
    "sample_nucleus",
    "greedy_decode",
    "nucleus_decode",
    "decode_dataset",
    "dedupe_traces",
    "write_traces",
    "read_traces",
]


@dataclass
class SelectionDistribution:
    """某一解码步在全部 M 个上下文句子上的分布"""

    refs: List[SentenceRef]
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.refs) != len(self.probs):
            raise DataError(f"分布长度 {len(self.probs)} 与句子数 {len(self.refs)} 不一致")

    def __len__(self) -> int:
        return len(self.refs)

    def prob(self, ref: SentenceRef) -> float:
        return float(self.probs[self.refs.index(ref)])

    def support(self) -> List[SentenceRef]:
        return [r for r, p in zip(self.refs, self.probs) if p > 0]

    @classmethod
    def from_array(cls, probs: np.ndarray, refs: Optional[List[SentenceRef]] = None):
        probs = np.asarray(probs, dtype=np.float64)
        if refs is None:
            refs = [SentenceRef(0, i) for i in range(len(probs))]
        return cls(refs=list(refs), probs=probs)


@dataclass
class KnowledgeComposition:
    """知识组合：答案 (第 0 步) + K 个有序句子"""

    answer: str
    refs: List[SentenceRef]
    flagged: bool = False

    def __len__(self) -> int:
        return len(self.refs)

    def texts(self, sample: Sample) -> List[str]:
        return [sample.text(r) for r in self.refs]


@dataclass
class CompositionTrace:
    """一次解码的完整记录"""

    sample_id: str
    draw_idx: int
    composition: KnowledgeComposition
    step_probs: List[Optional[float]] = field(default_factory=list)
    nucleus_sizes: List[int] = field(default_factory=list)
    flagged: bool = False
    strategy: str = "greedy"

    @property
    def refs(self) -> List[SentenceRef]:
        return self.composition.refs

    def to_dict(self) -> Dict:
        return {
            "id": self.sample_id,
            "draw": self.draw_idx,
            "strategy": self.strategy,
            "answer": self.composition.answer,
            "refs": [r.to_list() for r in self.refs],
            "probs": [None if p is None else round(p, 8) for p in self.step_probs],
            "nucleus_sizes": self.nucleus_sizes,
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "CompositionTrace":
        refs = [SentenceRef.from_list(r) for r in data["refs"]]
        return cls(
            sample_id=str(data["id"]),
            draw_idx=int(data.get("draw", 0)),
            composition=KnowledgeComposition(
                answer=data.get("answer", ""), refs=refs, flagged=bool(data.get("flagged", False))
            ),
            step_probs=list(data.get("probs", [None] * len(refs))),
            nucleus_sizes=list(data.get("nucleus_sizes", [0] * len(refs))),
            flagged=bool(data.get("flagged", False)),
            strategy=data.get("strategy", "greedy"),
        )

    @classmethod
    def from_composition(
        cls,
        sample: Sample,
        composition: KnowledgeComposition,
        strategy: str,
        draw_idx: int = 0,
    ) -> "CompositionTrace":
        """基线选择结果没有步进概率：概率为 None，nucleus 大小为 0"""
        n = len(composition)
        return cls(
            sample_id=sample.id,
            draw_idx=draw_idx,
            composition=composition,
            step_probs=[None] * n,
            nucleus_sizes=[0] * n,
            flagged=composition.flagged,
            strategy=strategy,
        )


def _nucleus_order(dist: SelectionDistribution, p: float) -> Tuple[np.ndarray, int]:
    # 稳定排序：概率相同时序号小的在前
    order = np.argsort(-dist.probs, kind="stable")
    order = order[dist.probs[order] > 0]
    if len(order) == 0:
        raise DataError("分布没有正概率的句子")
    cumulative = np.cumsum(dist.probs[order])
    size = int(np.searchsorted(cumulative, p - MASS_TOLERANCE, side="left")) + 1
    return order, min(size, len(order))


def top_p_truncate(
    dist: SelectionDistribution, p: float
) -> Tuple[List[SentenceRef], SelectionDistribution]:
    """
    Top-p 截断

    Args:
        dist: 选择分布
        p: 累积概率阈值 (0, 1]

    Returns:
        (nucleus, rescaled): nucleus 按概率降序；rescaled 与 dist 等长，
        nucleus 之外为 0，nucleus 内重新归一化
    """
    if not 0 < p <= 1:
        raise DataError(f"top_p 必须在 (0, 1] 内: {p}")
    order, size = _nucleus_order(dist, p)
    keep = order[:size]
    rescaled = np.zeros_like(dist.probs)
    rescaled[keep] = dist.probs[keep] / dist.probs[keep].sum()
    return [dist.refs[i] for i in keep], SelectionDistribution(refs=dist.refs, probs=rescaled)


def sample_nucleus(
    dist: SelectionDistribution, p: float, rng: np.random.Generator
) -> Tuple[int, int]:
    """从截断后的分布采样，返回 (句子位置, nucleus 大小)"""
    order, size = _nucleus_order(dist, p)
    keep = order[:size]
    cumulative = np.cumsum(dist.probs[keep])
    u = rng.random() * cumulative[-1]
    pick = min(int(np.searchsorted(cumulative, u, side="right")), size - 1)
    return int(keep[pick]), size


def _step(model: SelectorModel, state: ContextState, refs, selected) -> SelectionDistribution:
    probs = model.step_distribution(state, selected).double().cpu().numpy()
    return SelectionDistribution(refs=refs, probs=probs)


def _prepare(model: SelectorModel, sample: Sample, k: int):
    state = model.context(sample)
    refs = sample.refs[: state.num_sentences]
    steps = min(k, state.num_sentences)
    flagged = state.truncated or steps < k
    if steps < k:
        logger.warning(f"样本 {sample.id}: K={k} 超过可选句子数 {state.num_sentences}，组合已截短")
    return state, refs, steps, flagged


def greedy_decode(model: SelectorModel, sample: Sample, k: int) -> CompositionTrace:
    """每步选择概率最高的句子"""
    state, refs, steps, flagged = _prepare(model, sample, k)
    selected: List[int] = []
    probs: List[Optional[float]] = []
    for _ in range(steps):
        dist = _step(model, state, refs, selected)
        index = int(np.argmax(dist.probs))
        selected.append(index)
        probs.append(float(dist.probs[index]))
    return CompositionTrace(
        sample_id=sample.id,
        draw_idx=0,
        composition=KnowledgeComposition(sample.answer, [refs[i] for i in selected], flagged),
        step_probs=probs,
        nucleus_sizes=[1] * len(selected),
        flagged=flagged,
        strategy="greedy",
    )


def nucleus_decode(
    model: SelectorModel, sample: Sample, config: DecodeConfig
) -> List[CompositionTrace]:
    """
    对一个样本做 N_q 次独立的 nucleus 采样

    每次采样使用由 (seed, sample id, draw) 派生的独立随机流，
    step_probs 记录被选句子在截断前分布中的概率。
    """
    state, refs, steps, flagged = _prepare(model, sample, config.k)
    traces = []
    for draw in range(config.n_q):
        rng = np.random.default_rng(stable_seed(config.seed, sample.id, draw))
        selected: List[int] = []
        probs: List[Optional[float]] = []
        sizes: List[int] = []
        for _ in range(steps):
            dist = _step(model, state, refs, selected)
            index, size = sample_nucleus(dist, config.top_p, rng)
            selected.append(index)
            probs.append(float(dist.probs[index]))
            sizes.append(size)
        traces.append(
            CompositionTrace(
                sample_id=sample.id,
                draw_idx=draw,
                composition=KnowledgeComposition(sample.answer, [refs[i] for i in selected], flagged),
                step_probs=probs,
                nucleus_sizes=sizes,
                flagged=flagged,
                strategy="nucleus",
            )
        )
    return traces


def decode_dataset(
    model: SelectorModel, samples: Iterable[Sample], config: DecodeConfig
) -> Iterator[CompositionTrace]:
    """按样本顺序解码；greedy 每个样本一条，nucleus 每个样本 N_q 条"""
    for sample in samples:
        if config.strategy == "greedy":
            yield greedy_decode(model, sample, config.k)
        else:
            yield from nucleus_decode(model, sample, config)


def dedupe_traces(traces: Iterable[CompositionTrace]) -> List[CompositionTrace]:
    """去掉同一样本内重复的组合（保留第一次出现）"""
    seen = set()
    kept = []
    for trace in traces:
        key = (trace.sample_id, tuple(trace.refs))
        if key in seen:
            continue
        seen.add(key)
        kept.append(trace)
    return kept


def write_traces(traces: Iterable[CompositionTrace], path: Path) -> int:
    return write_jsonl_records((t.to_dict() for t in traces), path)


def read_traces(path: Path) -> List[CompositionTrace]:
    traces = []
    for i, record in enumerate(read_jsonl_records(path)):
        try:
            traces.append(CompositionTrace.from_dict(record))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{Path(path).name} 记录 {i} 格式错误: {e!r}") from e
    return traces
