"""
Training - 选择器训练循环
"""

import copy
import json
import logging
import math
import random
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import torch
from torch import nn
from transformers import get_linear_schedule_with_warmup

from .config import EncoderBackendSpec, OptimConfig, SelectorConfig, seed_everything
from .corpus import DatasetSplit, Sample, build_gold_composition, stable_seed
from .decoding import greedy_decode
from .encoder import SentenceEncoder, encode_sample, load_encoder
from .errors import DataError, TrainingDivergedError
from .metrics import composition_prf
from .selector import (
    KnowledgeSelector,
    SelectorBatch,
    SelectorModel,
    cls_loss,
    seq_loss,
    total_loss,
)

logger = logging.getLogger(__name__)


def bucket_batches(
    samples: List[Sample], batch_size: int, bucket_size: int, rng: random.Random
) -> List[List[int]]:
    """
    按句子数分桶组批

    先打乱，再在每个桶内按 M 排序切批，最后打乱批次顺序；给定 rng 时结果确定。
    """
    order = list(range(len(samples)))
    rng.shuffle(order)
    batches = []
    for start in range(0, len(order), bucket_size):
        bucket = sorted(order[start : start + bucket_size], key=lambda i: samples[i].num_sentences)
        for b in range(0, len(bucket), batch_size):
            batches.append(bucket[b : b + batch_size])
    rng.shuffle(batches)
    return batches


def collate(
    samples: List[Sample],
    golds: List[List[int]],
    features: List[Tuple[torch.Tensor, torch.Tensor]],
) -> SelectorBatch:
    """补齐到批内最大句子数与最大组合长度"""
    B = len(samples)
    M = max(x.shape[0] for x, _ in features)
    K = max(len(g) for g in golds)
    ref = features[0][0]
    d = ref.shape[-1]

    mask = torch.zeros(B, M, dtype=torch.bool, device=ref.device)
    gold = torch.full((B, K), -1, dtype=torch.long, device=ref.device)
    labels = torch.zeros(B, M, dtype=torch.long, device=ref.device)

    rows_X, rows_a = [], []
    for b, (sample, g, (x, a)) in enumerate(zip(samples, golds, features)):
        m = x.shape[0]
        pad = ref.new_zeros(M - m, d)
        rows_X.append(torch.cat([x, pad], dim=0))
        rows_a.append(a)
        mask[b, :m] = True
        gold[b, : len(g)] = torch.tensor(g, dtype=torch.long)
        labels[b, :m] = torch.tensor(sample.labels, dtype=torch.long)

    # stack 保留编码器梯度
    X = torch.stack(rows_X, dim=0)
    x_a = torch.stack(rows_a, dim=0)
    return SelectorBatch(
        X=X, mask=mask, x_a=x_a, gold=gold, labels=labels, sample_ids=[s.id for s in samples]
    )


def selection_f1(model: SelectorModel, samples: List[Sample], k: int) -> float:
    """贪心解码的平均 F1@K (0-1)"""
    scores = []
    for sample in samples:
        if not sample.supporting_facts:
            continue
        trace = greedy_decode(model, sample, k)
        scores.append(composition_prf(trace.refs, sample.supporting_facts)[2])
    return sum(scores) / len(scores) if scores else 0.0


class SelectorTrainer:
    """选择器训练器：AdamW + 线性 warmup，按开发集 F1@K 保存最优模型"""

    def __init__(
        self,
        selector_config: SelectorConfig,
        optim_config: OptimConfig,
        encoder: SentenceEncoder,
        seed: int = 42,
        device: str = "cpu",
    ):
        self.selector_config = selector_config
        self.optim = optim_config
        self.encoder = encoder
        self.seed = seed
        self.device = torch.device(device)
        self.history: List[Dict] = []
        self.best_score = -1.0
        self.best_epoch = -1

    def _usable(self, samples: List[Sample]) -> List[Sample]:
        cfg = self.selector_config
        kept = [
            s
            for s in samples
            if s.supporting_facts
            and s.num_sentences <= cfg.max_sentences
            and len(s.supporting_facts) <= cfg.max_prefix
        ]
        if len(kept) != len(samples):
            logger.warning(f"跳过 {len(samples) - len(kept)} 条超出长度限制或无支持事实的样本")
        return kept

    def _features(self, samples: List[Sample]) -> List[Tuple[torch.Tensor, torch.Tensor]]:
        with torch.no_grad():
            return [tuple(t.to(self.device) for t in encode_sample(s, self.encoder)) for s in samples]

    def train(self, split: DatasetSplit, out_dir: Optional[Path] = None) -> SelectorModel:
        """
        训练选择器

        Args:
            split: 数据划分（train 训练，dev 选择最优轮次）
            out_dir: 检查点与 history.jsonl 的输出目录

        Returns:
            SelectorModel: 开发集 F1@K 最优的模型
        """
        seed_everything(self.seed)
        cfg, opt = self.selector_config, self.optim
        train_samples = self._usable(split.train)
        dev_samples = split.dev or train_samples
        if not train_samples:
            raise DataError("没有可用的训练样本")

        selector = KnowledgeSelector(cfg).to(self.device)
        self.encoder.to(self.device)
        trainable_encoder = self.encoder.spec.trainable
        cached = None if trainable_encoder else self._features(train_samples)

        params = list(selector.parameters())
        if trainable_encoder:
            params += [p for p in self.encoder.parameters() if p.requires_grad]
        optimizer = torch.optim.AdamW(params, lr=opt.lr, weight_decay=opt.weight_decay)
        steps_per_epoch = math.ceil(len(train_samples) / opt.batch_size)
        total_steps = steps_per_epoch * opt.epochs
        scheduler = get_linear_schedule_with_warmup(
            optimizer, int(opt.warmup_ratio * total_steps), total_steps
        )
        model = SelectorModel(selector, self.encoder, self.encoder.spec)

        logger.info(
            f"开始训练: {len(train_samples)} 条训练样本, {len(dev_samples)} 条开发样本, "
            f"{opt.epochs} 轮, {total_steps} 步"
        )
        best_state = None
        step = 0
        for epoch in range(opt.epochs):
            selector.train()
            self.encoder.train(trainable_encoder)
            rng = random.Random(stable_seed(self.seed, "batches", epoch))
            epoch_seed = stable_seed(self.seed, "arrangement", epoch)

            for batch_indices in bucket_batches(
                train_samples, opt.batch_size, opt.bucket_size, rng
            ):
                samples = [train_samples[i] for i in batch_indices]
                golds = [
                    [
                        s.flat_index(r)
                        for r in build_gold_composition(s, opt.arrangement, epoch_seed).refs
                    ]
                    for s in samples
                ]
                if cached is not None:
                    features = [cached[i] for i in batch_indices]
                else:
                    features = [
                        tuple(t.to(self.device) for t in encode_sample(s, self.encoder))
                        for s in samples
                    ]
                batch = collate(samples, golds, features)

                forward = selector(batch)
                l_cls = cls_loss(forward.Z, batch.labels, batch.mask)
                l_seq = seq_loss(forward, batch.gold, cfg)
                loss = total_loss(l_cls, l_seq, cfg.lambda_)

                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"第 {step} 步损失发散",
                        diagnostic={
                            "step": step,
                            "epoch": epoch,
                            "cls": float(l_cls),
                            "seq": float(l_seq),
                            "sample_ids": batch.sample_ids,
                        },
                    )

                optimizer.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(params, opt.max_grad_norm)
                optimizer.step()
                scheduler.step()

                record = {
                    "step": step,
                    "epoch": epoch,
                    "cls": float(l_cls),
                    "seq": float(l_seq),
                    "total": float(loss),
                    "lr": scheduler.get_last_lr()[0],
                }
                self.history.append(record)
                if step % opt.log_every == 0:
                    logger.info(
                        f"step {step} | cls {record['cls']:.4f} | seq {record['seq']:.4f} "
                        f"| total {record['total']:.4f}"
                    )
                step += 1

            score = selection_f1(model, dev_samples, opt.eval_k)
            logger.info(f"第 {epoch} 轮结束: dev F1@{opt.eval_k} = {score * 100:.2f}")
            # 同分取较晚的轮次
            if score >= self.best_score:
                self.best_score = score
                self.best_epoch = epoch
                best_state = copy.deepcopy(selector.state_dict())
                if trainable_encoder:
                    best_state = (best_state, copy.deepcopy(self.encoder.state_dict()))

        if best_state is not None:
            if trainable_encoder:
                selector.load_state_dict(best_state[0])
                self.encoder.load_state_dict(best_state[1])
            else:
                selector.load_state_dict(best_state)
        model.metadata = {
            "best_epoch": self.best_epoch,
            f"dev_f1@{opt.eval_k}": round(self.best_score * 100, 4),
            "seed": self.seed,
            "arrangement": opt.arrangement,
        }
        model.eval()

        if out_dir is not None:
            self.save(model, Path(out_dir))
        return model

    def save(self, model: SelectorModel, out_dir: Path) -> None:
        model.save(out_dir)
        with (out_dir / "history.jsonl").open("w", encoding="utf-8") as f:
            for record in self.history:
                f.write(json.dumps(record) + "\n")
        logger.info(f"检查点已保存: {out_dir}")


def train(
    split: DatasetSplit,
    selector_config: SelectorConfig,
    optim_config: OptimConfig,
    encoder_spec: Optional[EncoderBackendSpec] = None,
    seed: int = 42,
    out_dir: Optional[Path] = None,
    cache_dir: Optional[str] = None,
) -> SelectorModel:
    """训练入口：构造编码器与训练器"""
    encoder_spec = encoder_spec or EncoderBackendSpec(d=selector_config.d)
    encoder = load_encoder(encoder_spec, cache_dir=cache_dir)
    trainer = SelectorTrainer(selector_config, optim_config, encoder, seed=seed)
    return trainer.train(split, out_dir=out_dir)
