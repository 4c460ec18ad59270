"""
Metrics - 组合选择指标 (P/R/F1@K)、生成多样性 (Pairwise-BLEU) 与答案指标 (EM/P/R/F1)
"""

import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from itertools import permutations
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

from nltk.translate.bleu_score import SmoothingFunction, sentence_bleu

from .corpus import Sample, SentenceRef
from .decoding import CompositionTrace
from .errors import DataError

logger = logging.getLogger(__name__)

PRF = Tuple[float, float, float]

_TOKEN = re.compile(r"\w+|[^\w\s]")
_ARTICLES = re.compile(r"\b(a|an|the)\b")
_SMOOTHING = SmoothingFunction().method2


@dataclass
class SelectionReport:
    """各 K 下的宏平均 P/R/F1（百分数）"""

    per_k: Dict[int, PRF] = field(default_factory=dict)
    n_samples: int = 0

    def to_dict(self) -> Dict:
        row: Dict = {"n_samples": self.n_samples}
        for k in sorted(self.per_k):
            p, r, f1 = self.per_k[k]
            row[f"P@{k}"] = round(p, 2)
            row[f"R@{k}"] = round(r, 2)
            row[f"F1@{k}"] = round(f1, 2)
        return row

    def merge(self, other: "SelectionReport") -> "SelectionReport":
        return SelectionReport(
            per_k={**self.per_k, **other.per_k}, n_samples=max(self.n_samples, other.n_samples)
        )


@dataclass
class DiversityReport:
    """Pairwise-BLEU 越低越多样"""

    pairwise_bleu: float
    n_questions_per_sample: int
    n_samples: int = 0

    def to_dict(self) -> Dict:
        return {
            "pairwise_bleu": round(self.pairwise_bleu, 2),
            "n_questions_per_sample": self.n_questions_per_sample,
            "n_samples": self.n_samples,
        }


class SemanticScorer(Protocol):
    """语义类指标接口（BERTScore、评审模型等），逐条返回分数"""

    def score(self, candidates: Sequence[str], references: Sequence[str]) -> List[float]: ...


def composition_prf(pred: Sequence[SentenceRef], gold_sf: Iterable[SentenceRef]) -> PRF:
    """
    单个样本的组合选择 P/R/F1 (0-1)

    gold 为全部支持事实；与预测顺序无关。
    """
    gold = set(gold_sf)
    if not gold:
        raise DataError("支持事实集合为空")
    predicted = set(pred)
    if not predicted:
        return 0.0, 0.0, 0.0
    overlap = len(predicted & gold)
    if overlap == 0:
        return 0.0, 0.0, 0.0
    precision = overlap / len(predicted)
    recall = overlap / len(gold)
    return precision, recall, 2 * precision * recall / (precision + recall)


def aggregate_selection(per_sample: Sequence[PRF], k: int) -> SelectionReport:
    """宏平均并乘以 100；F1 为逐样本 F1 的平均"""
    if not per_sample:
        raise DataError("没有可汇总的样本")
    n = len(per_sample)
    means = tuple(100.0 * sum(row[i] for row in per_sample) / n for i in range(3))
    return SelectionReport(per_k={k: means}, n_samples=n)


def evaluate_traces(
    traces: Sequence[CompositionTrace], samples: Mapping[str, Sample], ks: Sequence[int]
) -> SelectionReport:
    """
    按 K 评估解码 / 基线轨迹

    每条轨迹（每次采样）算一个评估单元，K 取轨迹的前 K 个句子。
    """
    for trace in traces:
        if trace.sample_id not in samples:
            raise DataError(f"轨迹中的样本 id 不在数据中: {trace.sample_id}")

    report = SelectionReport()
    for k in ks:
        rows = [
            composition_prf(t.refs[:k], samples[t.sample_id].supporting_facts) for t in traces
        ]
        report = report.merge(aggregate_selection(rows, k))
        short = sum(1 for t in traces if len(t.refs) < k)
        if short:
            logger.warning(f"K={k}: {short} 条轨迹长度不足 K")
    return report


def tokenize(text: str) -> List[str]:
    return _TOKEN.findall(text.lower())


def pairwise_bleu(questions: Sequence[str]) -> float:
    """所有有序问题对 (i≠j) 的平滑句子级 4-gram BLEU 均值 ×100"""
    if len(questions) < 2:
        raise DataError(f"Pairwise-BLEU 至少需要 2 个问题，实际 {len(questions)}")
    tokens = [tokenize(q) for q in questions]
    scores = [
        sentence_bleu([tokens[j]], tokens[i], smoothing_function=_SMOOTHING)
        for i, j in permutations(range(len(tokens)), 2)
    ]
    return 100.0 * sum(scores) / len(scores)


def diversity_report(questions_by_sample: Mapping[str, Sequence[str]]) -> DiversityReport:
    """按样本计算 Pairwise-BLEU 并取平均"""
    scored = {sid: qs for sid, qs in questions_by_sample.items() if len(qs) >= 2}
    skipped = len(questions_by_sample) - len(scored)
    if skipped:
        logger.warning(f"{skipped} 个样本的问题少于 2 个，不计入多样性")
    if not scored:
        raise DataError("没有可计算多样性的样本")
    values = [pairwise_bleu(qs) for qs in scored.values()]
    sizes = Counter(len(qs) for qs in scored.values())
    return DiversityReport(
        pairwise_bleu=sum(values) / len(values),
        n_questions_per_sample=sizes.most_common(1)[0][0],
        n_samples=len(values),
    )


def normalize_answer(text: str) -> str:
    """小写、去标点、去冠词、合并空白"""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in set(string.punctuation))
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def answer_em_f1(pred: str, gold: str) -> Tuple[float, float, float, float]:
    """SQuAD 风格的 (EM, P, R, F1)"""
    pred_tokens = normalize_answer(pred).split()
    gold_tokens = normalize_answer(gold).split()
    em = float(pred_tokens == gold_tokens)
    if not pred_tokens or not gold_tokens:
        return em, em, em, em

    common = Counter(pred_tokens) & Counter(gold_tokens)
    same = sum(common.values())
    if same == 0:
        return em, 0.0, 0.0, 0.0
    precision = same / len(pred_tokens)
    recall = same / len(gold_tokens)
    return em, precision, recall, 2 * precision * recall / (precision + recall)


def answer_report(
    pred_by_id: Mapping[str, str], gold_by_id: Mapping[str, str]
) -> Dict[str, Optional[float]]:
    """以 gold 为准宏平均 EM/P/R/F1 ×100；缺失的预测按空答案计"""
    if not gold_by_id:
        raise DataError("没有参考答案")
    missing = [sid for sid in gold_by_id if sid not in pred_by_id]
    if missing:
        logger.warning(f"{len(missing)} 个样本没有预测答案，例如 {missing[0]}")
    rows = [answer_em_f1(pred_by_id.get(sid, ""), gold) for sid, gold in gold_by_id.items()]
    n = len(rows)
    names = ("EM", "P", "R", "F1")
    return {name: 100.0 * sum(r[i] for r in rows) / n for i, name in enumerate(names)}


def semantic_report(
    candidates: Sequence[str], references: Sequence[str], scorer: SemanticScorer
) -> Dict[str, float]:
    """用外部语义打分器 (如 BERTScore) 计算平均分 ×100"""
    if len(candidates) != len(references):
        raise DataError(f"候选 {len(candidates)} 条与参考 {len(references)} 条数量不一致")
    if not candidates:
        raise DataError("没有可打分的问题")
    scores = scorer.score(candidates, references)
    return {"semantic": 100.0 * sum(scores) / len(scores), "n": len(scores)}
