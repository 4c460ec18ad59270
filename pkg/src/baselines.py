"""
Baselines - 参考选择器

Random / MAX 上下界、二分类 top-K、BM25 检索（一次性与逐步）、
句子图随机游走，以及稠密检索的可插拔接口。
"""

import logging
import random
import re
from typing import Any, Dict, Iterable, Iterator, List, Literal, Optional, Protocol, Sequence

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from rank_bm25 import BM25Okapi
from sklearn.linear_model import LogisticRegression
from sklearn.metrics.pairwise import cosine_similarity

from .corpus import Sample, SentenceRef, stable_seed
from .decoding import CompositionTrace, KnowledgeComposition
from .encoder import SentenceEncoder, encode_sample
from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

BaselineKind = Literal[
    "random", "max", "cls_topk", "bm25", "bm25_step", "graph_entity", "graph_similarity"
]
BASELINE_KINDS = (
    "random",
    "max",
    "cls_topk",
    "bm25",
    "bm25_step",
    "graph_entity",
    "graph_similarity",
)

BM25_K1 = 1.5
BM25_B = 0.75
SIMILARITY_THRESHOLD = 0.5

_ALLOWED_PARAMS = {
    "random": set(),
    "max": set(),
    "cls_topk": set(),
    "bm25": {"k1", "b"},
    "bm25_step": {"k1", "b"},
    "graph_entity": set(),
    "graph_similarity": {"threshold"},
}

_WORD = re.compile(r"\w+")
_CAPITALIZED_SPAN = re.compile(r"[A-Z][\w'\-]*(?:\s+[A-Z][\w'\-]*)*")
# 句首常见的大写功能词不算实体
_LEADING_STOPWORDS = {
    "a", "an", "the", "he", "she", "it", "they", "his", "her", "its", "their",
    "in", "on", "at", "this", "that", "these", "those", "there", "after", "before",
    "when", "while", "as", "by", "for", "from", "of", "with", "and", "but", "or",
}  # fmt: skip


class BaselineSpec(BaseModel):
    """基线选择器配置"""

    model_config = ConfigDict(extra="forbid")

    kind: BaselineKind
    k: int = Field(3, gt=0)
    seed: int = 42
    params: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _known_params(self):
        unknown = set(self.params) - _ALLOWED_PARAMS[self.kind]
        if unknown:
            raise ValueError(f"{self.kind} 不支持参数: {', '.join(sorted(unknown))}")
        return self

    @classmethod
    def create(cls, **kwargs) -> "BaselineSpec":
        try:
            return cls(**kwargs)
        except ValidationError as e:
            raise ConfigError(f"基线配置无效: {e}") from e


class PairClassifier(Protocol):
    """答案-句子二分类器：返回每个句子的正类概率"""

    def predict_proba(self, sample: Sample) -> np.ndarray: ...


class EmbeddingScorer(Protocol):
    """稠密检索打分接口：query 与每个文本的相似度"""

    def score(self, query: str, texts: Sequence[str]) -> np.ndarray: ...


def _top_k(sample: Sample, scores: np.ndarray, k: int) -> List[SentenceRef]:
    # 分数降序，分数相同按句子地址升序
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return [sample.refs[i] for i in order[:k]]


def _short(sample: Sample, k: int) -> bool:
    if sample.num_sentences < k:
        logger.warning(f"样本 {sample.id}: 句子数 {sample.num_sentences} < K={k}")
        return True
    return False


def random_select(sample: Sample, k: int, seed: int) -> KnowledgeComposition:
    """无放回均匀抽取 K 个句子"""
    if sample.num_sentences == 0:
        raise DataError(f"样本 {sample.id} 上下文为空")
    rng = random.Random(stable_seed(seed, sample.id))
    refs = rng.sample(sample.refs, min(k, sample.num_sentences))
    return KnowledgeComposition(sample.answer, refs, flagged=_short(sample, k))


def max_oracle(sample: Sample, k: int) -> KnowledgeComposition:
    """按上下文顺序取支持事实；K 更大时用地址最靠前的非支持句补齐"""
    if not sample.supporting_facts:
        raise DataError(f"样本 {sample.id} 没有支持事实")
    gold = sorted(sample.supporting_facts)
    refs = gold[:k]
    if len(refs) < k:
        gold_set = set(gold)
        refs += [r for r in sample.refs if r not in gold_set][: k - len(refs)]
    return KnowledgeComposition(sample.answer, refs, flagged=_short(sample, k))


def cls_topk(sample: Sample, classifier: Optional[PairClassifier], k: int) -> KnowledgeComposition:
    """按正类概率取前 K 个句子"""
    if classifier is None:
        raise ConfigError("cls_topk 需要训练好的分类器")
    probs = np.asarray(classifier.predict_proba(sample), dtype=np.float64)
    if probs.shape != (sample.num_sentences,):
        raise DataError(f"分类器输出长度 {probs.shape} 与句子数 {sample.num_sentences} 不一致")
    return KnowledgeComposition(
        sample.answer, _top_k(sample, probs, k), flagged=_short(sample, k)
    )


class LogisticPairClassifier:
    """
    答案-句子对的逻辑回归分类器

    特征为 [x_s, x_a ⊙ x_s, |x_a - x_s|]，x 来自句子编码器。
    """

    def __init__(self, encoder: SentenceEncoder, C: float = 10.0, seed: int = 42):
        self.encoder = encoder
        self.model = LogisticRegression(C=C, max_iter=2000, random_state=seed)
        self.fitted = False

    def _features(self, sample: Sample) -> np.ndarray:
        X, x_a = encode_sample(sample, self.encoder)
        X = X.detach().cpu().double().numpy()
        a = x_a.detach().cpu().double().numpy()[None, :]
        return np.concatenate([X, X * a, np.abs(X - a)], axis=1)

    def fit(self, samples: Iterable[Sample]) -> "LogisticPairClassifier":
        features, labels = [], []
        for sample in samples:
            features.append(self._features(sample))
            labels.extend(sample.labels)
        if len(set(labels)) < 2:
            raise DataError("训练数据只有一种标签")
        self.model.fit(np.concatenate(features, axis=0), np.asarray(labels))
        self.fitted = True
        logger.info(f"逻辑回归分类器训练完成: {len(labels)} 个句子")
        return self

    def predict_proba(self, sample: Sample) -> np.ndarray:
        if not self.fitted:
            raise ConfigError("分类器尚未训练")
        return self.model.predict_proba(self._features(sample))[:, 1]


def bm25_tokenize(text: str) -> List[str]:
    return _WORD.findall(text.lower())


def bm25_scores(
    sample: Sample, query: str, k1: float = BM25_K1, b: float = BM25_B
) -> np.ndarray:
    """以样本自身的句子为语料，对 query 打分"""
    bm25 = BM25Okapi([bm25_tokenize(s) for s in sample.sentences], k1=k1, b=b)
    return np.asarray(bm25.get_scores(bm25_tokenize(query)), dtype=np.float64)


def lexical_retrieve(
    sample: Sample,
    k: int,
    step_by_step: bool = False,
    k1: float = BM25_K1,
    b: float = BM25_B,
) -> KnowledgeComposition:
    """
    BM25 检索

    一次性: query = 答案，取前 K；
    逐步: 每选一句就把该句并入 query，在剩余句子中重新排序取第一。
    """
    if sample.num_sentences == 0:
        raise DataError(f"样本 {sample.id} 上下文为空")
    corpus = [bm25_tokenize(s) for s in sample.sentences]
    bm25 = BM25Okapi(corpus, k1=k1, b=b)
    query = bm25_tokenize(sample.answer)

    if not step_by_step:
        scores = np.asarray(bm25.get_scores(query), dtype=np.float64)
        return KnowledgeComposition(
            sample.answer, _top_k(sample, scores, k), flagged=_short(sample, k)
        )

    selected: List[int] = []
    for _ in range(min(k, sample.num_sentences)):
        scores = np.asarray(bm25.get_scores(query), dtype=np.float64)
        scores[selected] = -np.inf
        pick = int(np.argmax(scores))
        selected.append(pick)
        query = query + corpus[pick]
    return KnowledgeComposition(
        sample.answer, [sample.refs[i] for i in selected], flagged=_short(sample, k)
    )


def extract_entities(sentence: str, titles: Sequence[str] = ()) -> set:
    """大写词串 + 句中出现的文档标题，统一小写"""
    entities = set()
    for span in _CAPITALIZED_SPAN.findall(sentence):
        tokens = span.split()
        while tokens and tokens[0].lower() in _LEADING_STOPWORDS:
            tokens = tokens[1:]
        if tokens:
            entities.add(" ".join(tokens).lower())
    lowered = sentence.lower()
    for title in titles:
        if title and title.lower() in lowered:
            entities.add(title.lower())
    return entities


def build_sentence_graph(
    sample: Sample,
    mode: str,
    threshold: float = SIMILARITY_THRESHOLD,
    encoder: Optional[SentenceEncoder] = None,
) -> nx.Graph:
    """句子图：节点为扁平句子序号"""
    graph = nx.Graph()
    graph.add_nodes_from(range(sample.num_sentences))

    if mode == "entity":
        titles = [doc.title for doc in sample.documents]
        entities = [extract_entities(s, titles) for s in sample.sentences]
        for i in range(len(entities)):
            for j in range(i + 1, len(entities)):
                if entities[i] & entities[j]:
                    graph.add_edge(i, j)
    elif mode == "similarity":
        if encoder is None:
            raise ConfigError("similarity 模式需要句子编码器")
        X, _ = encode_sample(sample, encoder)
        sims = cosine_similarity(X.detach().cpu().double().numpy())
        rows, cols = np.where(np.triu(sims >= threshold, k=1))
        graph.add_edges_from(zip(rows.tolist(), cols.tolist()))
    else:
        raise ConfigError(f"未知句子图模式: {mode}")
    return graph


def _walk(graph: nx.Graph, start: int, steps: int, rng: random.Random) -> tuple:
    visited = [start]
    flagged = False
    current = start
    while len(visited) < steps:
        seen = set(visited)
        neighbors = sorted(n for n in graph.neighbors(current) if n not in seen)
        if neighbors:
            current = rng.choice(neighbors)
            visited.append(current)
            continue
        # 死路: 从仍有未访问邻居的已访问节点重新出发
        restarts = [v for v in visited if any(n not in seen for n in graph.neighbors(v))]
        if restarts:
            current = rng.choice(restarts)
            continue
        flagged = True
        current = rng.choice(sorted(n for n in graph.nodes if n not in seen))
        visited.append(current)
    return visited, flagged


def graph_walk(
    sample: Sample,
    k: int,
    mode: str,
    seed: int,
    threshold: float = SIMILARITY_THRESHOLD,
    encoder: Optional[SentenceEncoder] = None,
    graph: Optional[nx.Graph] = None,
) -> KnowledgeComposition:
    """
    句子图随机游走

    起点为随机的含答案句；没有含答案句时随机起点并标记。
    无路可走时随机补齐剩余句子并标记。
    """
    if sample.num_sentences == 0:
        raise DataError(f"样本 {sample.id} 上下文为空")
    graph = graph if graph is not None else build_sentence_graph(sample, mode, threshold, encoder)
    rng = random.Random(stable_seed(seed, sample.id, mode))

    answer = sample.answer.strip().lower()
    starts = [i for i, s in enumerate(sample.sentences) if answer and answer in s.lower()]
    flagged = not starts
    if flagged:
        logger.warning(f"样本 {sample.id}: 没有包含答案的句子，随机选择起点")
        starts = list(range(sample.num_sentences))

    visited, stuck = _walk(graph, rng.choice(starts), min(k, sample.num_sentences), rng)
    return KnowledgeComposition(
        sample.answer,
        [sample.refs[i] for i in visited],
        flagged=flagged or stuck or _short(sample, k),
    )


class EncoderScorer:
    """用句子编码器做答案-句子余弦打分"""

    def __init__(self, encoder: SentenceEncoder):
        self.encoder = encoder

    def score(self, query: str, texts: Sequence[str]) -> np.ndarray:
        vectors = self.encoder.encode(list(texts) + [query]).detach().cpu().double().numpy()
        return cosine_similarity(vectors[-1:], vectors[:-1])[0]


def dense_retrieve(sample: Sample, k: int, scorer: EmbeddingScorer) -> KnowledgeComposition:
    """以答案为 query 的稠密检索 top-K"""
    scores = np.asarray(scorer.score(sample.answer, sample.sentences), dtype=np.float64)
    return KnowledgeComposition(
        sample.answer, _top_k(sample, scores, k), flagged=_short(sample, k)
    )


def select(
    spec: BaselineSpec,
    sample: Sample,
    classifier: Optional[PairClassifier] = None,
    encoder: Optional[SentenceEncoder] = None,
) -> KnowledgeComposition:
    """按 spec.kind 分派到具体的基线"""
    params = spec.params
    if spec.kind == "random":
        return random_select(sample, spec.k, spec.seed)
    if spec.kind == "max":
        return max_oracle(sample, spec.k)
    if spec.kind == "cls_topk":
        return cls_topk(sample, classifier, spec.k)
    if spec.kind in ("bm25", "bm25_step"):
        return lexical_retrieve(
            sample,
            spec.k,
            step_by_step=spec.kind == "bm25_step",
            k1=float(params.get("k1", BM25_K1)),
            b=float(params.get("b", BM25_B)),
        )
    mode = spec.kind.split("_", 1)[1]
    return graph_walk(
        sample,
        spec.k,
        mode,
        spec.seed,
        threshold=float(params.get("threshold", SIMILARITY_THRESHOLD)),
        encoder=encoder,
    )


def run_baseline(
    spec: BaselineSpec,
    samples: Iterable[Sample],
    classifier: Optional[PairClassifier] = None,
    encoder: Optional[SentenceEncoder] = None,
) -> Iterator[CompositionTrace]:
    """对每个样本运行基线，输出与解码相同格式的轨迹"""
    for sample in samples:
        composition = select(spec, sample, classifier=classifier, encoder=encoder)
        yield CompositionTrace.from_composition(sample, composition, strategy=spec.kind)
