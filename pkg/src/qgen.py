"""
QGen - 以 (知识组合, 答案) 为条件的多跳问题生成，以及端到端数据增强
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Protocol, Sequence

from .config import DecodeConfig, GeneratorSpec, seed_everything
from .corpus import Sample, SentenceRef, build_gold_composition
from .decoding import CompositionTrace, KnowledgeComposition, decode_dataset
from .errors import DataError, GenerationError
from .parallel import run_parallel
from .selector import SelectorModel

logger = logging.getLogger(__name__)

ANSWER_SEP = " \\n "
_TITLED = re.compile(r"\[([^\]]+)\]\s*([^\[]*)")


class GeneratorInput(str):
    """序列化后的生成器输入，附带答案与组合各句的标题"""

    def __new__(cls, text: str, answer: str, titles: Sequence[str]):
        obj = super().__new__(cls, text)
        obj.answer = answer
        obj.titles = tuple(titles)
        return obj


class QuestionGenerator(Protocol):
    def generate(self, text: str) -> str: ...


@dataclass
class AugmentedRecord:
    """一条增强样本：采样组合 + 生成的问题 + 完整上下文"""

    sample_id: str
    draw_idx: int
    composition_refs: List[SentenceRef]
    composition_texts: List[str]
    answer: str
    generated_question: str
    context: List[list] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "id": f"{self.sample_id}-{self.draw_idx}",
            "sample_id": self.sample_id,
            "draw": self.draw_idx,
            "question": self.generated_question,
            "answer": self.answer,
            "refs": [r.to_list() for r in self.composition_refs],
            "composition": self.composition_texts,
            "context": self.context,
        }


@dataclass
class AugmentStats:
    """增强过程的计数；失败数 = 预期记录数 - 实际记录数"""

    samples: int = 0
    records: int = 0
    failures: List[Dict] = field(default_factory=list)

    def fail(self, sample_id: str, draw_idx: Optional[int], error: BaseException) -> None:
        self.failures.append(
            {"sample_id": sample_id, "draw": draw_idx, "error": f"{type(error).__name__}: {error}"}
        )

    def to_dict(self) -> Dict:
        return {"samples": self.samples, "records": self.records, "failures": len(self.failures)}


def build_generator_input(
    composition: KnowledgeComposition, answer: str, sample: Sample
) -> GeneratorInput:
    """
    序列化生成器输入

    格式: "{answer} \\n [title_1] sentence_1 [title_2] sentence_2 ..."，按组合顺序。
    """
    if not composition.refs:
        raise DataError(f"样本 {sample.id}: 知识组合为空")
    titles = [sample.title(ref) for ref in composition.refs]
    parts = [f"[{title}] {sample.text(ref)}" for title, ref in zip(titles, composition.refs)]
    return GeneratorInput(f"{answer}{ANSWER_SEP}{' '.join(parts)}", answer, titles)


class TemplateQuestionGenerator:
    """模板问题生成器（测试替身）：确定性地输出提到答案与组合标题的问句"""

    def generate(self, text: str) -> str:
        if ANSWER_SEP not in text:
            raise GenerationError("输入缺少答案分隔符", text)
        if isinstance(text, GeneratorInput):
            answer, found = text.answer, list(text.titles)
        else:
            answer, body = text.split(ANSWER_SEP, 1)
            found = [title for title, _ in _TITLED.findall(body)]
        answer = answer.strip()
        titles: List[str] = []
        for title in found:
            title = title.strip()
            if title and title not in titles:
                titles.append(title)
        if not answer or not titles:
            raise GenerationError("答案或知识组合为空", text)

        if len(titles) == 1:
            return f"What about {titles[0]} leads to {answer}?"
        linked = ", ".join(titles[:-1]) + f" and {titles[-1]}"
        return f"How are {linked} connected to {answer}?"


class Seq2SeqQuestionGenerator:
    """微调后的 seq2seq 生成器，束搜索解码"""

    def __init__(self, spec: GeneratorSpec):
        from transformers import AutoModelForSeq2SeqLM, AutoTokenizer

        self.spec = spec
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(spec.model_id)
            self.model = AutoModelForSeq2SeqLM.from_pretrained(spec.model_id)
        except Exception as e:
            raise GenerationError(f"生成器加载失败 {spec.model_id}: {e}") from e
        self.model.eval()
        logger.info(f"加载问题生成器 {spec.model_id}")

    def generate(self, text: str) -> str:
        import torch

        try:
            encoded = self.tokenizer(
                str(text),
                truncation=True,
                max_length=self.spec.max_input_tokens,
                return_tensors="pt",
            )
            with torch.no_grad():
                output = self.model.generate(
                    **encoded,
                    num_beams=self.spec.beam_size,
                    max_new_tokens=self.spec.max_new_tokens,
                    early_stopping=True,
                )
            question = self.tokenizer.decode(output[0], skip_special_tokens=True).strip()
        except Exception as e:
            raise GenerationError(f"生成失败: {e}", text) from e
        if not question:
            raise GenerationError("生成结果为空", text)
        return question


_GENERATORS: Dict[str, QuestionGenerator] = {}


def load_generator(spec: GeneratorSpec) -> QuestionGenerator:
    """按配置构造生成器（同一配置复用同一实例）"""
    key = spec.model_dump_json()
    if key not in _GENERATORS:
        if spec.backend == "template-stub":
            _GENERATORS[key] = TemplateQuestionGenerator()
        else:
            _GENERATORS[key] = Seq2SeqQuestionGenerator(spec)
    return _GENERATORS[key]


def generate_question(text: str, spec: GeneratorSpec) -> str:
    """生成一个问题"""
    if not text.strip():
        raise GenerationError("输入为空", text)
    return load_generator(spec).generate(text)


def _to_record(sample: Sample, trace: CompositionTrace, question: str) -> AugmentedRecord:
    return AugmentedRecord(
        sample_id=sample.id,
        draw_idx=trace.draw_idx,
        composition_refs=list(trace.refs),
        composition_texts=trace.composition.texts(sample),
        answer=sample.answer,
        generated_question=question,
        context=[[doc.title, doc.sentences] for doc in sample.documents],
    )


def _generate_for(
    sample: Sample,
    traces: Sequence[CompositionTrace],
    generator: QuestionGenerator,
    workers: int,
    stats: AugmentStats,
) -> List[AugmentedRecord]:
    def _one(trace: CompositionTrace) -> str:
        return generator.generate(build_generator_input(trace.composition, sample.answer, sample))

    records = []
    results = run_parallel(_one, list(traces), max_workers=workers, label=f"样本 {sample.id} 生成")
    for trace, result in zip(traces, results):
        if isinstance(result, BaseException):
            logger.error(f"样本 {sample.id} draw {trace.draw_idx} 生成失败: {result}")
            stats.fail(sample.id, trace.draw_idx, result)
            continue
        records.append(_to_record(sample, trace, result))
    stats.records += len(records)
    return records


def augment_dataset(
    samples: Iterable[Sample],
    model: SelectorModel,
    decode: DecodeConfig,
    gen: GeneratorSpec,
    generator: Optional[QuestionGenerator] = None,
    stats: Optional[AugmentStats] = None,
) -> Iterator[AugmentedRecord]:
    """
    数据增强：每个样本采样 N_q 个组合并各生成一个问题

    单个样本失败只记录并跳过，不中断整个流；输出保持样本顺序与采样顺序。
    """
    generator = generator or load_generator(gen)
    stats = stats if stats is not None else AugmentStats()
    expected = 1 if decode.strategy == "greedy" else decode.n_q

    for sample in samples:
        stats.samples += 1
        try:
            traces = list(decode_dataset(model, [sample], decode))
        except Exception as e:
            logger.error(f"样本 {sample.id} 解码失败: {e}")
            for draw in range(expected):
                stats.fail(sample.id, draw, e)
            continue
        yield from _generate_for(sample, traces, generator, gen.workers, stats)

    logger.info(
        f"增强完成: {stats.samples} 个样本, {stats.records} 条记录, {len(stats.failures)} 个失败"
    )


def generate_from_traces(
    traces: Iterable[CompositionTrace],
    samples: Mapping[str, Sample],
    gen: GeneratorSpec,
    generator: Optional[QuestionGenerator] = None,
    stats: Optional[AugmentStats] = None,
) -> Iterator[AugmentedRecord]:
    """对已有的组合轨迹生成问题，按轨迹中的样本分组"""
    generator = generator or load_generator(gen)
    stats = stats if stats is not None else AugmentStats()

    grouped: Dict[str, List[CompositionTrace]] = {}
    for trace in traces:
        if trace.sample_id not in samples:
            raise DataError(f"轨迹中的样本 id 不在数据中: {trace.sample_id}")
        grouped.setdefault(trace.sample_id, []).append(trace)

    for sample_id, group in grouped.items():
        stats.samples += 1
        yield from _generate_for(samples[sample_id], group, generator, gen.workers, stats)


def finetune_generator(
    samples: Sequence[Sample],
    spec: GeneratorSpec,
    out_dir: Path,
    epochs: int = 3,
    lr: float = 3e-5,
    seed: int = 42,
    batch_size: int = 8,
    arrangement: str = "document",
) -> Path:
    """
    在 (黄金组合, 答案) -> 黄金问题 上微调 seq2seq 生成器（交叉熵）

    需要预训练权重，通常在 GPU 上运行。
    """
    import torch
    from tqdm import tqdm
    from transformers import AutoModelForSeq2SeqLM, AutoTokenizer, get_linear_schedule_with_warmup

    if spec.backend != "seq2seq-finetuned":
        raise GenerationError(f"只有 seq2seq 后端可以微调: {spec.backend}")
    seed_everything(seed)
    tokenizer = AutoTokenizer.from_pretrained(spec.model_id)
    model = AutoModelForSeq2SeqLM.from_pretrained(spec.model_id)
    device = torch.device("cuda" if torch.cuda.is_available() else "cpu")
    model.to(device)

    pairs = []
    for sample in samples:
        if not sample.supporting_facts or not sample.gold_question:
            continue
        gold = build_gold_composition(sample, arrangement)
        composition = KnowledgeComposition(sample.answer, gold.refs)
        text = build_generator_input(composition, sample.answer, sample)
        pairs.append((str(text), sample.gold_question))
    if not pairs:
        raise DataError("没有可用于微调的样本")

    optimizer = torch.optim.AdamW(model.parameters(), lr=lr)
    total = epochs * ((len(pairs) + batch_size - 1) // batch_size)
    scheduler = get_linear_schedule_with_warmup(optimizer, int(0.1 * total), total)
    rng = torch.Generator().manual_seed(seed)

    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(pairs), generator=rng).tolist()
        running = 0.0
        batches = range(0, len(order), batch_size)
        for start in tqdm(batches, desc=f"epoch {epoch}"):
            chunk = [pairs[i] for i in order[start : start + batch_size]]
            inputs = tokenizer(
                [c[0] for c in chunk],
                truncation=True,
                max_length=spec.max_input_tokens,
                padding=True,
                return_tensors="pt",
            ).to(device)
            labels = tokenizer(
                text_target=[c[1] for c in chunk],
                truncation=True,
                max_length=spec.max_new_tokens,
                padding=True,
                return_tensors="pt",
            ).input_ids.to(device)
            labels[labels == tokenizer.pad_token_id] = -100

            loss = model(**inputs, labels=labels).loss
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            optimizer.step()
            scheduler.step()
            running += float(loss)
        logger.info(f"生成器第 {epoch} 轮: 平均损失 {running / max(1, len(batches)):.4f}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.save_pretrained(out_dir)
    tokenizer.save_pretrained(out_dir)
    logger.info(f"生成器已保存: {out_dir}")
    return out_dir
