"""
Encoder - 句子编码器 M_enc 与向量缓存
"""

import hashlib
import logging
import os
import threading
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from sklearn.feature_extraction.text import HashingVectorizer
from torch import nn

from .config import EncoderBackendSpec
from .corpus import Sample
from .errors import EncoderInitError

logger = logging.getLogger(__name__)


def normalize_text(text: str) -> str:
    return " ".join(text.split())


class EmbeddingCache:
    """按内容哈希存储向量的目录缓存 (线程安全读，写入以最后一次为准)"""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._memory: Dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(model_id: str, pooling: str, text: str) -> str:
        payload = f"{model_id}\x1f{pooling}\x1f{normalize_text(text)}"
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / key[:2] / f"{key}.npy"

    def get(self, key: str) -> Optional[np.ndarray]:
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        path = self._path(key)
        if not path.exists():
            return None
        vector = np.load(path)
        with self._lock:
            self._memory[key] = vector
        return vector

    def put(self, key: str, vector: np.ndarray) -> None:
        vector = np.ascontiguousarray(vector, dtype=np.float32)
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f"{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        with tmp.open("wb") as f:
            np.save(f, vector)
        os.replace(tmp, path)
        with self._lock:
            self._memory[key] = vector


class SentenceEncoder(nn.Module):
    """
    句子编码器

    model_id == "hashing" 时使用确定性的哈希词袋向量（无参数）；
    其他 model_id 通过 transformers 加载双向编码器，按 first-token 或 mean 池化。
    """

    def __init__(self, spec: EncoderBackendSpec, cache: Optional[EmbeddingCache] = None):
        super().__init__()
        self.spec = spec
        self.truncated = 0
        self.tokenizer = None
        self.model = None
        self._vectorizer = None

        if spec.is_hashing:
            self._vectorizer = HashingVectorizer(
                n_features=spec.d,
                alternate_sign=False,
                norm="l2",
                token_pattern=r"(?u)\b\w+\b",
            )
        else:
            self._load_transformer(spec)

        # 只有冻结的编码器才使用缓存
        self.cache = cache if not spec.trainable else None
        if not spec.trainable:
            self.eval()

    def _load_transformer(self, spec: EncoderBackendSpec) -> None:
        from transformers import AutoModel, AutoTokenizer

        try:
            self.tokenizer = AutoTokenizer.from_pretrained(spec.model_id)
            self.model = AutoModel.from_pretrained(spec.model_id)
        except Exception as e:
            raise EncoderInitError(f"编码器加载失败 {spec.model_id}: {e}") from e

        hidden = self.model.config.hidden_size
        if hidden != spec.d:
            raise EncoderInitError(f"编码器输出维度 {hidden} 与配置 d={spec.d} 不一致")
        for p in self.model.parameters():
            p.requires_grad = spec.trainable
        logger.info(f"加载编码器 {spec.model_id} (trainable={spec.trainable})")

    @property
    def device(self) -> torch.device:
        if self.model is not None:
            return next(self.model.parameters()).device
        return torch.device("cpu")

    def forward(self, texts: List[str]) -> torch.Tensor:
        """编码一批文本，返回 [n, d]"""
        if self._vectorizer is not None:
            matrix = self._vectorizer.transform(texts).toarray().astype(np.float32)
            return torch.from_numpy(matrix)

        outputs = []
        for start in range(0, len(texts), self.spec.batch_size):
            outputs.append(self._encode_batch(texts[start : start + self.spec.batch_size]))
        return torch.cat(outputs, dim=0)

    def _encode_batch(self, texts: List[str]) -> torch.Tensor:
        lengths = [len(ids) for ids in self.tokenizer(texts)["input_ids"]]
        over = sum(1 for n in lengths if n > self.spec.max_tokens)
        if over:
            self.truncated += over
            logger.warning(f"{over} 个句子超过 max_tokens={self.spec.max_tokens}，已截断")

        encoded = self.tokenizer(
            texts,
            padding=True,
            truncation=True,
            max_length=self.spec.max_tokens,
            return_tensors="pt",
        ).to(self.device)
        hidden = self.model(**encoded).last_hidden_state

        if self.spec.pooling == "first-token":
            return hidden[:, 0]
        mask = encoded["attention_mask"].unsqueeze(-1).to(hidden.dtype)
        return (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp_min(1.0)

    def encode(self, texts: List[str]) -> torch.Tensor:
        """编码文本；训练模式下保留梯度，否则走缓存与 no_grad"""
        if self.spec.trainable and self.training:
            return self(texts)

        if self.cache is None:
            with torch.no_grad():
                return self(texts)

        keys = [EmbeddingCache.key(self.spec.model_id, self.spec.pooling, t) for t in texts]
        vectors: List[Optional[np.ndarray]] = [self.cache.get(k) for k in keys]
        missing = [i for i, v in enumerate(vectors) if v is None]
        if missing:
            with torch.no_grad():
                fresh = self([texts[i] for i in missing]).cpu().numpy().astype(np.float32)
            for row, i in enumerate(missing):
                self.cache.put(keys[i], fresh[row])
                vectors[i] = self.cache.get(keys[i])
        return torch.from_numpy(np.stack(vectors)).to(self.device)


def load_encoder(spec: EncoderBackendSpec, cache_dir: Optional[str] = None) -> SentenceEncoder:
    """根据配置构造编码器（冻结时附带缓存）"""
    directory = cache_dir or spec.cache_dir
    cache = EmbeddingCache(Path(directory)) if directory and not spec.trainable else None
    return SentenceEncoder(spec, cache=cache)


def encode_sample(sample: Sample, encoder: SentenceEncoder) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    编码样本的全部上下文句子与答案

    Returns:
        (X, x_a): X 形状 [M, d]，行顺序为 (doc_idx, sent_idx)；x_a 形状 [d]
    """
    texts = sample.sentences
    empty = sum(1 for t in texts if not normalize_text(t))
    if empty:
        logger.warning(f"样本 {sample.id}: {empty} 个空句子")
    embeddings = encoder.encode(texts + [sample.answer])
    return embeddings[:-1], embeddings[-1]
