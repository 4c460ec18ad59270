"""
Selector - 层次化句子级序列模型 M_seq

编码层 -> 句子分类头 -> 分类概率注入交叉注意力的键 -> 自回归解码层，
以及分类损失、对比式序列损失和总损失。
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderBackendSpec, SelectorConfig
from .corpus import Sample
from .encoder import SentenceEncoder, encode_sample, load_encoder
from .errors import ConfigError, DataError, EmptyContextError, ExhaustedCandidatesError

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1
NEG_INF = float("-inf")


@dataclass
class SelectorBatch:
    """补齐后的一批样本"""

    X: torch.Tensor  # [B, M, d]
    mask: torch.Tensor  # [B, M] True = 真实句子
    x_a: torch.Tensor  # [B, d]
    gold: torch.Tensor  # [B, K] 扁平句子序号，-1 为补齐
    labels: torch.Tensor  # [B, M] 0/1
    sample_ids: Optional[List[str]] = None


@dataclass
class SelectorForward:
    """教师强制前向的中间结果"""

    H: torch.Tensor
    Z: Optional[torch.Tensor]
    K_tilde: torch.Tensor
    E: torch.Tensor
    logits: torch.Tensor  # [B, K, M]，不可选位置为 -inf
    available: torch.Tensor  # [B, K, M]


@dataclass
class ContextState:
    """单个样本编码后的上下文，供逐步解码复用"""

    X: torch.Tensor  # [1, M, d]
    mask: torch.Tensor
    x_a: torch.Tensor  # [1, d]
    H: torch.Tensor
    Z: Optional[torch.Tensor]
    K_tilde: torch.Tensor
    truncated: bool = False

    @property
    def num_sentences(self) -> int:
        return self.X.shape[1]


class KeyInfusedDecoderLayer(nn.Module):
    """解码层: 因果自注意力 + 交叉注意力 (键 K̃, 值 H) + 前馈"""

    def __init__(self, d: int, n_heads: int, ffn: int, dropout: float):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, n_heads, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(d, n_heads, dropout=dropout, batch_first=True)
        self.ffn = nn.Sequential(
            nn.Linear(d, ffn), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffn, d)
        )
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        keys: torch.Tensor,
        values: torch.Tensor,
        causal_mask: torch.Tensor,
        memory_padding_mask: torch.Tensor,
    ) -> torch.Tensor:
        attended, _ = self.self_attn(x, x, x, attn_mask=causal_mask, need_weights=False)
        x = self.norm1(x + self.dropout(attended))
        crossed, _ = self.cross_attn(
            x, keys, values, key_padding_mask=memory_padding_mask, need_weights=False
        )
        x = self.norm2(x + self.dropout(crossed))
        return self.norm3(x + self.dropout(self.ffn(x)))


class KnowledgeSelector(nn.Module):
    """句子级知识组合选择模型"""

    def __init__(self, config: SelectorConfig):
        super().__init__()
        self.config = config
        d = config.d
        ffn = config.ffn_mult * d
        encoder_decoder = config.architecture == "encoder-decoder"

        self.answer_concat = (
            nn.Linear(2 * d, d) if encoder_decoder and config.concat == "pre" else None
        )
        self.context_positions = (
            nn.Embedding(config.max_sentences, d) if config.positional else None
        )
        self.prefix_positions = nn.Embedding(config.max_prefix, d) if config.positional else None

        if encoder_decoder:
            layer = nn.TransformerEncoderLayer(
                d, config.n_heads, ffn, config.dropout, batch_first=True
            )
            self.encoder = nn.TransformerEncoder(
                layer, config.n_layers, enable_nested_tensor=False
            )
            self.classifier = nn.Linear(2 * d if config.concat == "post" else d, 2)
        else:
            self.encoder = None
            self.classifier = None

        # W^δ ∈ R^{2×d}，以 Linear(2, d) 的转置保存
        self.key_infusion = nn.Linear(2, d, bias=False)
        self.decoder_layers = nn.ModuleList(
            [
                KeyInfusedDecoderLayer(d, config.n_heads, ffn, config.dropout)
                for _ in range(config.n_layers)
            ]
        )

    def encode_context(
        self, X: torch.Tensor, mask: torch.Tensor, x_a: torch.Tensor
    ) -> torch.Tensor:
        """H = EncoderLayers(X)；decoder-only 时 H 即 X (加位置)"""
        M = X.shape[1]
        if M == 0:
            raise EmptyContextError("上下文为空")
        if M > self.config.max_sentences:
            raise DataError(f"句子数 {M} 超过 max_sentences={self.config.max_sentences}")

        h = X
        if self.answer_concat is not None:
            h = self.answer_concat(torch.cat([X, x_a.unsqueeze(1).expand_as(X)], dim=-1))
        if self.context_positions is not None:
            positions = torch.arange(M, device=X.device)
            h = h + self.context_positions(positions).unsqueeze(0)
        if self.encoder is None:
            return h
        return self.encoder(h, src_key_padding_mask=~mask)

    def classify_sentences(self, H: torch.Tensor, x_a: torch.Tensor) -> torch.Tensor:
        """z_i = Softmax(Linear(h_i; x_a))，返回 [B, M, 2]"""
        if self.classifier is None:
            raise ConfigError("decoder-only 结构没有分类头")
        if self.config.concat == "post":
            features = torch.cat([H, x_a.unsqueeze(1).expand_as(H)], dim=-1)
        else:
            features = H
        return torch.softmax(self.classifier(features), dim=-1)

    def infuse_keys(self, H: torch.Tensor, Z: Optional[torch.Tensor]) -> torch.Tensor:
        """K̃ = H + δ W^δ，δ_i = [1 - z_i, z_i]"""
        if self.config.infusion == "none" or Z is None:
            return H
        z = Z[..., 1]
        delta = torch.stack([1 - z, z], dim=-1)
        return H + self.key_infusion(delta)

    def decode_prefix(
        self,
        prefix: torch.Tensor,
        H: torch.Tensor,
        K_tilde: torch.Tensor,
        mask: torch.Tensor,
    ) -> torch.Tensor:
        """
        解码已选前缀 (第 0 行为答案)，返回每个前缀位置的预测表示 E [B, k, d]
        """
        k = prefix.shape[1]
        if k == 0:
            raise DataError("前缀至少包含答案")
        if k > self.config.max_prefix:
            raise DataError(f"前缀长度 {k} 超过 max_prefix={self.config.max_prefix}")

        x = prefix
        if self.prefix_positions is not None:
            x = x + self.prefix_positions(torch.arange(k, device=prefix.device)).unsqueeze(0)
        causal = torch.triu(torch.ones(k, k, dtype=torch.bool, device=prefix.device), diagonal=1)
        for layer in self.decoder_layers:
            x = layer(x, K_tilde, H, causal, ~mask)
        return x

    def score(self, E: torch.Tensor, X: torch.Tensor) -> torch.Tensor:
        """MI(x_s, e) / τ，E [B, k, d]，X [B, M, d] -> [B, k, M]"""
        if self.config.mi_fn == "cosine":
            E = F.normalize(E, dim=-1, eps=1e-8)
            X = F.normalize(X, dim=-1, eps=1e-8)
        return torch.matmul(E, X.transpose(1, 2)) / self.config.temperature

    def selection_distribution(
        self, e: torch.Tensor, X: torch.Tensor, available: torch.Tensor
    ) -> torch.Tensor:
        """p(s | e)：对未选中的真实句子做 softmax，其余位置概率为 0"""
        if not bool(available.any(dim=-1).all()):
            raise ExhaustedCandidatesError("没有可选的候选句子")
        scores = self.score(e.unsqueeze(1), X).squeeze(1)
        return torch.softmax(scores.masked_fill(~available, NEG_INF), dim=-1)

    def _keys_from(self, H, Z, labels):
        if self.config.z_source == "gold" and labels is not None and Z is not None:
            Z = F.one_hot(labels.long(), num_classes=2).to(H.dtype)
        return self.infuse_keys(H, Z)

    def forward(self, batch: SelectorBatch) -> SelectorForward:
        """教师强制前向：第 k 步的前缀为黄金组合 f_{0:k-1}"""
        X, mask, x_a, gold = batch.X, batch.mask, batch.x_a, batch.gold
        H = self.encode_context(X, mask, x_a)
        Z = self.classify_sentences(H, x_a) if self.classifier is not None else None
        K_tilde = self._keys_from(H, Z, batch.labels)

        B, K = gold.shape
        M = X.shape[1]
        safe_gold = gold.clamp_min(0)
        chosen = torch.gather(X, 1, safe_gold.unsqueeze(-1).expand(B, K, X.shape[-1]))
        chosen = chosen * (gold >= 0).unsqueeze(-1).to(X.dtype)
        prefix = torch.cat([x_a.unsqueeze(1), chosen[:, :-1]], dim=1)

        E = self.decode_prefix(prefix, H, K_tilde, mask)
        available = step_available(mask, gold, M)
        logits = self.score(E, X).masked_fill(~available, NEG_INF)
        return SelectorForward(H=H, Z=Z, K_tilde=K_tilde, E=E, logits=logits, available=available)

    def prepare_context(self, X: torch.Tensor, x_a: torch.Tensor) -> ContextState:
        """编码单个样本的上下文 (X [M, d], x_a [d])"""
        truncated = False
        if X.shape[0] > self.config.max_sentences:
            X = X[: self.config.max_sentences]
            truncated = True
        X = X.unsqueeze(0)
        x_a = x_a.unsqueeze(0)
        mask = torch.ones(X.shape[:2], dtype=torch.bool, device=X.device)
        H = self.encode_context(X, mask, x_a)
        Z = self.classify_sentences(H, x_a) if self.classifier is not None else None
        return ContextState(
            X=X, mask=mask, x_a=x_a, H=H, Z=Z, K_tilde=self.infuse_keys(H, Z), truncated=truncated
        )

    def step_distribution(self, state: ContextState, selected: List[int]) -> torch.Tensor:
        """给定已选句子序号，返回下一步的选择分布 [M]"""
        if len(selected) >= state.num_sentences:
            raise ExhaustedCandidatesError("所有句子都已被选中")
        rows = [state.x_a] + [state.X[:, i] for i in selected]
        prefix = torch.stack(rows, dim=1)
        E = self.decode_prefix(prefix, state.H, state.K_tilde, state.mask)
        available = state.mask.clone()
        if selected:
            available[0, selected] = False
        return self.selection_distribution(E[:, -1], state.X, available)[0]


def step_available(mask: torch.Tensor, gold: torch.Tensor, M: int) -> torch.Tensor:
    """第 k 步可选位置：真实句子且不在 f_{1:k-1} 中，返回 [B, K, M]"""
    valid = (gold >= 0).unsqueeze(-1)
    onehot = F.one_hot(gold.clamp_min(0), num_classes=M).bool() & valid
    before = (torch.cumsum(onehot.long(), dim=1) - onehot.long()) > 0
    return mask.unsqueeze(1) & ~before


def seq_loss(forward: SelectorForward, gold: torch.Tensor, config: SelectorConfig) -> torch.Tensor:
    """
    对比式序列预测损失

    include-positive: -log softmax 的正样本项 (分母包含正样本)；
    exclude-positive: 分母只对负样本求和。按有效步数在批内平均。
    """
    logits, available = forward.logits, forward.available
    valid = gold >= 0
    positive = gold.clamp_min(0).unsqueeze(-1)

    in_context = available.gather(-1, positive).squeeze(-1)
    if bool((valid & ~in_context).any()):
        raise DataError("黄金组合中的句子不在可选上下文中")

    if config.denominator == "exclude-positive":
        is_positive = F.one_hot(gold.clamp_min(0), num_classes=logits.shape[-1]).bool()
        valid = valid & (available & ~is_positive).any(dim=-1)

    # 无效步填 0，避免 -inf 参与反向传播
    logits = torch.where(valid.unsqueeze(-1), logits, torch.zeros_like(logits))
    positive_score = logits.gather(-1, positive).squeeze(-1)
    if config.denominator == "exclude-positive":
        negatives = logits.scatter(-1, positive, NEG_INF)
        negatives = torch.where(valid.unsqueeze(-1), negatives, torch.zeros_like(negatives))
        denominator = torch.logsumexp(negatives, dim=-1)
    else:
        denominator = torch.logsumexp(logits, dim=-1)

    steps = denominator - positive_score
    count = valid.sum()
    if int(count) == 0:
        return logits.sum() * 0.0
    return (steps * valid.to(steps.dtype)).sum() / count


def cls_loss(
    Z: Optional[torch.Tensor], labels: torch.Tensor, mask: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """句子分类损失：真实句子上 -log Z[i, label_i] 的均值"""
    if Z is None:
        return torch.zeros((), dtype=torch.float32, device=labels.device)
    picked = Z.gather(-1, labels.long().unsqueeze(-1)).squeeze(-1)
    nll = -torch.log(picked.clamp_min(torch.finfo(Z.dtype).tiny))
    if mask is None:
        return nll.mean()
    return nll[mask].mean()


def total_loss(
    cls: Union[float, torch.Tensor], seq: Union[float, torch.Tensor], lam: float
) -> Union[float, torch.Tensor]:
    """L = L_cls + λ L_seq"""
    return cls + lam * seq


class SelectorModel:
    """训练好的选择器推理包：模型 + 编码器 + 配置"""

    def __init__(
        self,
        selector: KnowledgeSelector,
        encoder: SentenceEncoder,
        encoder_spec: EncoderBackendSpec,
        metadata: Optional[dict] = None,
    ):
        self.selector = selector
        self.encoder = encoder
        self.encoder_spec = encoder_spec
        self.metadata = metadata or {}

    @property
    def config(self) -> SelectorConfig:
        return self.selector.config

    def eval(self) -> "SelectorModel":
        self.selector.eval()
        self.encoder.eval()
        return self

    @torch.no_grad()
    def context(self, sample: Sample) -> ContextState:
        """编码样本上下文（推理模式）"""
        self.eval()
        X, x_a = encode_sample(sample, self.encoder)
        param = next(self.selector.parameters())
        state = self.selector.prepare_context(
            X.to(param.device, param.dtype), x_a.to(param.device, param.dtype)
        )
        if state.truncated:
            logger.warning(f"样本 {sample.id}: 上下文超过 max_sentences，已截断")
        return state

    @torch.no_grad()
    def step_distribution(self, state: ContextState, selected: List[int]) -> torch.Tensor:
        return self.selector.step_distribution(state, selected)

    @torch.no_grad()
    def predict_proba(self, sample: Sample) -> np.ndarray:
        """每个句子的 question-worthy 概率 Z[:, 1]"""
        state = self.context(sample)
        if state.Z is None:
            raise ConfigError("decoder-only 结构没有分类概率")
        probs = np.zeros(sample.num_sentences, dtype=np.float64)
        z = state.Z[0, :, 1].double().cpu().numpy()
        probs[: len(z)] = z
        return probs

    def save(self, directory: Path) -> Path:
        """保存为带版本号的检查点目录"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.selector.state_dict(), directory / "selector.pt")
        if self.encoder.spec.trainable and self.encoder.model is not None:
            torch.save(self.encoder.model.state_dict(), directory / "encoder.pt")
        bundle = {
            "format_version": BUNDLE_VERSION,
            "selector": self.config.model_dump(mode="json", by_alias=True),
            "encoder": self.encoder_spec.model_dump(mode="json"),
            "metadata": self.metadata,
        }
        (directory / "bundle.json").write_text(
            json.dumps(bundle, ensure_ascii=False, indent=2, sort_keys=True), encoding="utf-8"
        )
        return directory

    @classmethod
    def load(cls, directory: Path, cache_dir: Optional[str] = None) -> "SelectorModel":
        directory = Path(directory)
        bundle_path = directory / "bundle.json"
        if not bundle_path.exists():
            raise ConfigError(f"检查点不存在: {directory}")
        bundle = json.loads(bundle_path.read_text(encoding="utf-8"))
        if bundle.get("format_version") != BUNDLE_VERSION:
            raise ConfigError(f"不支持的检查点版本: {bundle.get('format_version')}")

        config = SelectorConfig.model_validate(bundle["selector"])
        spec = EncoderBackendSpec.model_validate(bundle["encoder"])
        encoder = load_encoder(spec, cache_dir=cache_dir)
        if (directory / "encoder.pt").exists() and encoder.model is not None:
            encoder.model.load_state_dict(torch.load(directory / "encoder.pt", map_location="cpu"))

        selector = KnowledgeSelector(config)
        selector.load_state_dict(torch.load(directory / "selector.pt", map_location="cpu"))
        logger.info(f"加载检查点 {directory}")
        return cls(selector, encoder, spec, metadata=bundle.get("metadata", {})).eval()
