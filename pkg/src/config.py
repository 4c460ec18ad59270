"""
Config - 运行配置（YAML + 命令行覆盖）
"""

import hashlib
import json
import logging
import os
import random
from pathlib import Path
from typing import Any, Dict, Literal, Optional

import numpy as np
import torch
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

logger = logging.getLogger(__name__)

CACHE_DIR_ENV = "KCS_CACHE_DIR"
CHECKPOINT_DIR_ENV = "KCS_CHECKPOINT_DIR"

Arrangement = Literal["original", "shuffle", "sorted", "cluster", "cropping", "document"]


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class EncoderBackendSpec(_Block):
    """句子编码器后端"""

    model_id: str = "bert-base-uncased"
    d: int = Field(768, gt=0)
    pooling: Literal["first-token", "mean"] = "first-token"
    max_tokens: int = Field(128, gt=0)
    trainable: bool = True
    batch_size: int = Field(32, gt=0)
    cache_dir: Optional[str] = None

    @model_validator(mode="after")
    def _hashing_is_frozen(self):
        # hashing 后端没有参数
        if self.is_hashing:
            self.trainable = False
        return self

    @property
    def is_hashing(self) -> bool:
        return self.model_id == "hashing"


class SelectorConfig(_Block):
    """层次化句子级序列模型的结构与损失配置"""

    d: int = Field(768, gt=0)
    n_layers: int = Field(2, gt=0)
    n_heads: int = Field(4, gt=0)
    lambda_: float = Field(1.0, alias="lambda", ge=0)
    mi_fn: Literal["cosine", "dot"] = "cosine"
    temperature: float = Field(1.0, gt=0)
    infusion: Literal["key", "none"] = "key"
    concat: Literal["post", "pre"] = "post"
    denominator: Literal["include-positive", "exclude-positive"] = "include-positive"
    dropout: float = Field(0.1, ge=0, lt=1)
    max_sentences: int = Field(256, gt=0)
    max_prefix: int = Field(16, gt=1)
    architecture: Literal["encoder-decoder", "decoder-only"] = "encoder-decoder"
    positional: bool = True
    ffn_mult: int = Field(4, gt=0)
    z_source: Literal["predicted", "gold"] = "predicted"

    @model_validator(mode="after")
    def _heads_divide_d(self):
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} 不能被 n_heads={self.n_heads} 整除")
        return self


class OptimConfig(_Block):
    """训练优化器配置"""

    lr: float = Field(3e-5, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    warmup_ratio: float = Field(0.1, ge=0, le=1)
    epochs: int = Field(3, gt=0)
    batch_size: int = Field(8, gt=0)
    max_grad_norm: float = Field(1.0, gt=0)
    eval_k: int = Field(2, gt=0)
    log_every: int = Field(50, gt=0)
    bucket_size: int = Field(64, gt=0)
    arrangement: Arrangement = "document"


class DecodeConfig(_Block):
    """组合解码配置"""

    strategy: Literal["greedy", "nucleus"] = "nucleus"
    top_p: float = Field(0.95, gt=0, le=1)
    k: int = Field(3, gt=0)
    n_q: int = Field(5, gt=0)
    seed: int = 42


class GeneratorSpec(_Block):
    """问题生成器后端"""

    backend: Literal["seq2seq-finetuned", "template-stub"] = "template-stub"
    model_id: Optional[str] = None
    max_input_tokens: int = Field(512, gt=0)
    beam_size: int = Field(4, gt=0)
    max_new_tokens: int = Field(64, gt=0)
    workers: int = Field(4, gt=0)

    @model_validator(mode="after")
    def _seq2seq_needs_model(self):
        if self.backend == "seq2seq-finetuned" and not self.model_id:
            raise ValueError("seq2seq-finetuned 后端需要 model_id")
        return self


class PathsConfig(_Block):
    """输入输出路径"""

    data: Optional[str] = None
    dev_data: Optional[str] = None
    checkpoint: Optional[str] = None
    out: Optional[str] = None
    db: str = "kcs_runs.db"


class RunConfig(_Block):
    """一次运行的完整配置"""

    encoder: EncoderBackendSpec = Field(default_factory=EncoderBackendSpec)
    selector: SelectorConfig = Field(default_factory=SelectorConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)
    generator: GeneratorSpec = Field(default_factory=GeneratorSpec)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    seed: int = 42

    @model_validator(mode="after")
    def _dims_agree(self):
        if self.encoder.d != self.selector.d:
            raise ValueError(
                f"encoder.d={self.encoder.d} 与 selector.d={self.selector.d} 不一致"
            )
        return self

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", by_alias=True)

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def merge_overrides(base: Dict, overrides: Dict) -> Dict:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_overrides(merged[key], value)
        elif isinstance(value, dict):
            merged[key] = merge_overrides({}, value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[Path] = None, overrides: Dict = None) -> RunConfig:
    """
    加载运行配置

    优先级: 命令行覆盖 > 环境变量 (仅目录) > 配置文件 > 默认值
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"配置文件不存在: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"配置文件解析失败 {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"配置文件顶层必须是映射: {path}")

    env: Dict[str, Any] = {}
    if os.environ.get(CACHE_DIR_ENV):
        env["encoder"] = {"cache_dir": os.environ[CACHE_DIR_ENV]}
    if os.environ.get(CHECKPOINT_DIR_ENV):
        env["paths"] = {"checkpoint": os.environ[CHECKPOINT_DIR_ENV]}

    merged = merge_overrides(merge_overrides(raw, env), overrides or {})
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(f"配置无效: {e}") from e


def require_paths(**paths: Optional[str]) -> None:
    """命令开始时检查引用的输入路径存在"""
    for name, value in paths.items():
        if value is None:
            raise ConfigError(f"缺少路径参数: {name}")
        if not Path(value).exists():
            raise ConfigError(f"路径不存在 ({name}): {value}")


def seed_everything(seed: int) -> None:
    """固定 random / numpy / torch 随机性"""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    logger.debug(f"随机种子: {seed}")
