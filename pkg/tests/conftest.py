"""
共享测试构造器：手工样本、marker-token 合成语料、HotpotQA 格式夹具文件、过拟合模型
"""

import json
import random
from pathlib import Path

import pytest

from src.config import EncoderBackendSpec, OptimConfig, SelectorConfig
from src.corpus import ContextDocument, DatasetSplit, HotpotLoader, Sample, SentenceRef
from src.corpus import locate_answer_sentence
from src.encoder import load_encoder
from src.training import SelectorTrainer

DIM = 64
MARKER = "zebra"
FILLER = [
    "river", "stone", "lamp", "cloud", "harbor", "window",
    "garden", "pencil", "violin", "meadow", "copper", "forest",
]  # fmt: skip


def make_sample(documents, facts, answer="Paris", sample_id="s0", question="Where?"):
    """documents: [(title, [sentence, ...]), ...]；facts: [(doc_idx, sent_idx), ...]"""
    sample = Sample(
        id=sample_id,
        answer=answer,
        gold_question=question,
        documents=[ContextDocument(title, list(sents)) for title, sents in documents],
        supporting_facts=[SentenceRef(d, s) for d, s in facts],
    )
    sample.answer_sentence = locate_answer_sentence(sample)
    return sample


def marker_records(n, seed=0, docs=2, sents=4):
    """
    HotpotQA 格式的合成记录：每条样本有两个支持事实句，
    它们含有三次 marker token，第一句还包含答案
    """
    rng = random.Random(seed)
    records = []
    for i in range(n):
        answer = f"answer{i}"
        positions = rng.sample(range(docs * sents), 2)
        context = []
        for d in range(docs):
            sentences = []
            for s in range(sents):
                words = rng.sample(FILLER, 5)
                flat = d * sents + s
                if flat in positions:
                    words = [MARKER] * 3 + words
                    if flat == positions[0]:
                        words.append(answer)
                sentences.append(" ".join(words) + ".")
            context.append([f"Topic {i} {d}", sentences])
        facts = [[f"Topic {i} {p // sents}", p % sents] for p in positions]
        records.append(
            {
                "_id": f"m{i}",
                "question": f"What links {answer}?",
                "answer": answer,
                "context": context,
                "supporting_facts": facts,
            }
        )
    return records


def marker_samples(n, seed=0):
    loader = HotpotLoader()
    return [loader.parse_record(r, i) for i, r in enumerate(marker_records(n, seed))]


def figure_sample():
    """2 个文档各 10 句，支持事实顺序 (0,5) (0,4) (1,7)，扁平序号 [5, 4, 17]"""
    documents = []
    for d, title in enumerate(["Harbor", "Violin"]):
        sentences = [f"w{d}x{s}a w{d}x{s}b w{d}x{s}c shared." for s in range(10)]
        documents.append((title, sentences))
    documents[0][1][5] = "w0x5a w0x5b w0x5c Lisbon shared."
    return make_sample(documents, [(0, 5), (0, 4), (1, 7)], answer="Lisbon", sample_id="fig")


@pytest.fixture
def hashing_spec():
    return EncoderBackendSpec(model_id="hashing", d=DIM)


@pytest.fixture
def tiny_config():
    return SelectorConfig(d=DIM, n_layers=2, n_heads=4, dropout=0.0, temperature=0.1)


@pytest.fixture
def hotpot_fixture(tmp_path) -> Path:
    """20 条样本的 HotpotQA 格式 JSON 文件"""
    path = tmp_path / "fixture.json"
    path.write_text(json.dumps(marker_records(20, seed=7)), encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def figure_model():
    """在 figure_sample 上过拟合的选择器 (original 排列)"""
    spec = EncoderBackendSpec(model_id="hashing", d=DIM)
    config = SelectorConfig(d=DIM, n_layers=2, n_heads=4, dropout=0.0, temperature=0.1)
    optim = OptimConfig(
        lr=1e-3,
        warmup_ratio=0.05,
        epochs=200,
        batch_size=1,
        eval_k=3,
        log_every=1000,
        arrangement="original",
    )
    sample = figure_sample()
    trainer = SelectorTrainer(config, optim, load_encoder(spec), seed=3)
    return trainer.train(DatasetSplit(train=[sample], dev=[sample], test=[]))


@pytest.fixture(scope="session")
def figure_checkpoint(figure_model, tmp_path_factory) -> Path:
    return figure_model.save(tmp_path_factory.mktemp("ckpt") / "figure")
