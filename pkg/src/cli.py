"""
CLI - 命令行接口
"""

import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional

import click

from .baselines import BASELINE_KINDS, BaselineSpec, LogisticPairClassifier, run_baseline
from .config import (
    CACHE_DIR_ENV,
    CHECKPOINT_DIR_ENV,
    RunConfig,
    load_run_config,
    merge_overrides,
    require_paths,
)
from .corpus import (
    ARRANGEMENTS,
    FORMATS,
    DatasetSplit,
    Sample,
    build_gold_composition,
    dataset_statistics,
    filter_answerable,
    load_dataset,
    make_splits,
    read_jsonl_records,
    read_samples,
    write_jsonl_records,
    write_samples,
)
from .decoding import decode_dataset, dedupe_traces, read_traces, write_traces
from .encoder import load_encoder
from .errors import ConfigError, KCSError
from .metrics import diversity_report, evaluate_traces
from .qgen import AugmentStats, augment_dataset, generate_from_traces
from .selector import SelectorModel
from .tracker import RunTracker, write_manifest
from .training import train as train_selector

logger = logging.getLogger(__name__)

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]


def load_samples(path: str, format: str = "hotpotqa") -> List[Sample]:
    """.jsonl 为预处理后的交换格式；其他后缀按原始数据集读取并过滤 yes/no"""
    path = Path(path)
    if path.suffix == ".jsonl":
        return read_samples(path)
    return filter_answerable(load_dataset(path, format))


def _config(ctx: click.Context, seed: Optional[int] = None, **blocks) -> RunConfig:
    """子命令 --seed > 全局 --seed > 配置文件；decode.seed 未单独配置时跟随顶层种子"""
    obj = ctx.obj
    seed = seed if seed is not None else obj["seed"]
    overrides: Dict = {
        "seed": seed,
        "encoder": {"cache_dir": obj["cache_dir"]},
        "paths": {"db": obj["db"]},
    }
    overrides = merge_overrides(overrides, blocks)
    config = load_run_config(obj["config_path"], overrides)
    if seed is not None or "seed" not in config.decode.model_fields_set:
        config.decode.seed = config.seed
    return config


seed_option = click.option("--seed", type=int, default=None, help="随机种子 (覆盖全局 --seed)")


@contextmanager
def _tracked(config: RunConfig, command: str, output: str, inputs: Dict[str, Optional[str]]):
    """记录运行；成功后写出 manifest"""
    tracker = RunTracker(config.paths.db)
    run_id = tracker.start_run(command, config.hash(), config.seed, output)
    summary: Dict = {}
    try:
        yield tracker, run_id, summary
    except Exception as e:
        tracker.finish_run(run_id, "failed", {"error": str(e)})
        raise
    tracker.finish_run(run_id, "done", summary)
    write_manifest(Path(output), command, config.to_dict(), config.hash(), inputs, config.seed)


def _record_failures(tracker: RunTracker, run_id: int, stats: AugmentStats) -> None:
    for failure in stats.failures:
        item = f"{failure['sample_id']}#{failure['draw']}"
        tracker.record_failure(run_id, item, failure["error"])


def _parse_ks(value: str) -> List[int]:
    try:
        ks = [int(k) for k in value.split(",") if k.strip()]
    except ValueError:
        raise click.BadParameter(f"K 列表格式错误: {value}") from None
    if not ks or any(k <= 0 for k in ks):
        raise click.BadParameter(f"K 必须为正整数: {value}")
    return ks


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None, help="YAML 运行配置")
@click.option("--seed", type=int, default=None, help="随机种子 (覆盖配置)")
@click.option("--db", default=None, help="运行记录数据库路径 (默认 kcs_runs.db)")
@click.option("--cache-dir", envvar=CACHE_DIR_ENV, default=None, help="句向量缓存目录")
@click.option(
    "--log-level", default="INFO", type=click.Choice(LOG_LEVELS, case_sensitive=False)
)
@click.pass_context
def cli(ctx, config_path, seed, db, cache_dir, log_level):
    """知识组合采样 (KCS) - 多样化多跳问题生成"""
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    ctx.ensure_object(dict)
    ctx.obj.update(config_path=config_path, seed=seed, db=db, cache_dir=cache_dir)


@cli.command()
@click.option(
    "--input", "input_path", required=True, type=click.Path(exists=True), help="原始数据集文件"
)
@click.option("--dev-input", default=None, help="原始开发集（给出时输出 train/dev/test 三个文件）")
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="hotpotqa")
@click.option("--arrangement", type=click.Choice(ARRANGEMENTS), default=None, help="黄金组合排列")
@click.option("--out", "-o", required=True, help="输出文件，或给出 --dev-input 时的输出目录")
@seed_option
@click.pass_context
def preprocess(ctx, input_path, dev_input, fmt, arrangement, out, seed):
    """读取数据集，构造黄金知识组合并划分数据"""
    config = _config(ctx, seed, optim={"arrangement": arrangement})
    if dev_input:
        require_paths(dev_input=dev_input)
    arrangement = config.optim.arrangement

    def _attach(samples: List[Sample]) -> List[Sample]:
        kept = []
        for sample in samples:
            if not sample.supporting_facts:
                logger.warning(f"样本 {sample.id} 没有支持事实，已跳过")
                continue
            sample.composition = build_gold_composition(sample, arrangement, config.seed)
            kept.append(sample)
        return kept

    inputs = {"input": input_path, "dev_input": dev_input}
    with _tracked(config, "preprocess", out, inputs) as (_, _, summary):
        train_samples = load_dataset(Path(input_path), fmt)
        if dev_input:
            split = make_splits(train_samples, load_dataset(Path(dev_input), fmt), config.seed)
            split = DatasetSplit(*(_attach(part) for part in (split.train, split.dev, split.test)))
            out_dir = Path(out)
            for name in ("train", "dev", "test"):
                write_samples(getattr(split, name), out_dir / f"{name}.jsonl")
        else:
            samples = _attach(filter_answerable(train_samples))
            split = DatasetSplit(train=samples, dev=[], test=[])
            write_samples(samples, Path(out))

        stats = dataset_statistics(split)
        summary.update(stats)
        for name, row in stats.items():
            if row["samples"]:
                click.echo(
                    f"{name}: {row['samples']} 条, 平均支持事实 {row['mean_supporting_facts']:.2f}, "
                    f"平均句子 {row['mean_sentences']:.1f}"
                )


@cli.command()
@click.option("--data", required=True, help="训练数据")
@click.option("--dev-data", default=None, help="开发数据（选择最优轮次）")
@click.option("--out", "-o", envvar=CHECKPOINT_DIR_ENV, required=True, help="检查点目录")
@click.option("--encoder", "encoder_id", default=None, help="编码器 model_id（hashing 为无参数后端）")
@click.option("--dim", type=int, default=None, help="表示维度 d")
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--arrangement", type=click.Choice(ARRANGEMENTS), default=None)
@click.option("--lambda", "lam", type=float, default=None, help="序列损失权重 λ")
@click.option("--temperature", type=float, default=None)
@click.option("--denominator", type=click.Choice(["include-positive", "exclude-positive"]))
@click.option("--infusion", type=click.Choice(["key", "none"]))
@click.option("--architecture", type=click.Choice(["encoder-decoder", "decoder-only"]))
@seed_option
@click.pass_context
def train(
    ctx,
    data,
    dev_data,
    out,
    encoder_id,
    dim,
    epochs,
    lr,
    batch_size,
    arrangement,
    lam,
    temperature,
    denominator,
    infusion,
    architecture,
    seed,
):
    """训练知识组合选择器"""
    config = _config(
        ctx,
        seed,
        encoder={"model_id": encoder_id, "d": dim},
        selector={
            "d": dim,
            "lambda": lam,
            "temperature": temperature,
            "denominator": denominator,
            "infusion": infusion,
            "architecture": architecture,
        },
        optim={"epochs": epochs, "lr": lr, "batch_size": batch_size, "arrangement": arrangement},
        paths={"data": data, "dev_data": dev_data, "checkpoint": out},
    )
    require_paths(data=data)
    if dev_data:
        require_paths(dev_data=dev_data)

    with _tracked(config, "train", out, {"data": data, "dev_data": dev_data}) as (_, _, summary):
        split = DatasetSplit(
            train=load_samples(data),
            dev=load_samples(dev_data) if dev_data else [],
            test=[],
        )
        model = train_selector(
            split,
            config.selector,
            config.optim,
            encoder_spec=config.encoder,
            seed=config.seed,
            out_dir=Path(out),
            cache_dir=config.encoder.cache_dir,
        )
        summary.update(model.metadata)
        click.echo(f"训练完成: {json.dumps(model.metadata, ensure_ascii=False, sort_keys=True)}")
        click.echo(f"检查点: {out}")


def _load_model(checkpoint: str, config: RunConfig) -> SelectorModel:
    require_paths(checkpoint=checkpoint)
    return SelectorModel.load(Path(checkpoint), cache_dir=config.encoder.cache_dir)


@cli.command()
@click.option("--checkpoint", envvar=CHECKPOINT_DIR_ENV, required=True)
@click.option("--data", required=True)
@click.option("--k", "k", type=int, default=None, help="组合长度 K")
@click.option("--out", "-o", required=True)
@click.pass_context
def select(ctx, checkpoint, data, k, out):
    """贪心解码知识组合"""
    config = _config(ctx, decode={"strategy": "greedy", "k": k})
    require_paths(data=data)
    model = _load_model(checkpoint, config)
    inputs = {"checkpoint": checkpoint, "data": data}
    with _tracked(config, "select", out, inputs) as (_, _, summary):
        count = write_traces(decode_dataset(model, load_samples(data), config.decode), Path(out))
        summary["traces"] = count
        click.echo(f"输出 {count} 条组合: {out}")


@cli.command()
@click.option("--checkpoint", envvar=CHECKPOINT_DIR_ENV, required=True)
@click.option("--data", required=True)
@click.option("--top-p", type=float, default=None)
@click.option("--k", "k", type=int, default=None)
@click.option("--nq", type=int, default=None, help="每个样本的采样次数 N_q")
@click.option("--dedupe", is_flag=True, help="去掉同一样本内重复的组合")
@click.option("--out", "-o", required=True)
@seed_option
@click.pass_context
def sample(ctx, checkpoint, data, top_p, k, nq, dedupe, out, seed):
    """句子级 nucleus 采样知识组合"""
    decode = {"strategy": "nucleus", "top_p": top_p, "k": k, "n_q": nq}
    config = _config(ctx, seed, decode=decode)
    require_paths(data=data)
    model = _load_model(checkpoint, config)
    inputs = {"checkpoint": checkpoint, "data": data}
    with _tracked(config, "sample", out, inputs) as (_, _, summary):
        traces = decode_dataset(model, load_samples(data), config.decode)
        if dedupe:
            traces = dedupe_traces(traces)
        count = write_traces(traces, Path(out))
        summary["traces"] = count
        click.echo(f"输出 {count} 条组合: {out}")


def _parse_params(values) -> Dict[str, float]:
    params = {}
    for item in values:
        key, sep, value = item.partition("=")
        if not sep:
            raise click.BadParameter(f"参数格式应为 key=value: {item}")
        try:
            params[key.strip()] = float(value)
        except ValueError:
            raise click.BadParameter(f"参数值必须是数字: {item}") from None
    return params


@cli.command()
@click.option("--kind", type=click.Choice(BASELINE_KINDS), required=True)
@click.option("--k", "k", type=int, default=3)
@click.option("--data", required=True)
@click.option("--param", "params", multiple=True, help="基线参数 key=value，可重复")
@click.option("--encoder", "encoder_id", default=None, help="graph_similarity / cls_topk 的编码器")
@click.option("--train-data", default=None, help="cls_topk: 训练逻辑回归分类器的数据")
@click.option("--checkpoint", default=None, help="cls_topk: 使用选择器的分类概率")
@click.option("--out", "-o", required=True)
@seed_option
@click.pass_context
def baseline(ctx, kind, k, data, params, encoder_id, train_data, checkpoint, out, seed):
    """运行参考基线，输出与解码相同格式的组合"""
    config = _config(ctx, seed, encoder={"model_id": encoder_id})
    spec = BaselineSpec.create(kind=kind, k=k, seed=config.seed, params=_parse_params(params))
    require_paths(data=data)

    classifier = encoder = None
    if kind == "cls_topk":
        if checkpoint:
            classifier = _load_model(checkpoint, config)
        elif train_data:
            require_paths(train_data=train_data)
            encoder = load_encoder(config.encoder)
            classifier = LogisticPairClassifier(encoder, seed=config.seed).fit(
                load_samples(train_data)
            )
        else:
            raise ConfigError("cls_topk 需要 --checkpoint 或 --train-data")
    elif kind == "graph_similarity":
        encoder = load_encoder(config.encoder)

    inputs = {"data": data, "train_data": train_data, "checkpoint": checkpoint}
    with _tracked(config, f"baseline:{kind}", out, inputs) as (_, _, summary):
        traces = run_baseline(spec, load_samples(data), classifier=classifier, encoder=encoder)
        count = write_traces(traces, Path(out))
        summary["traces"] = count
        click.echo(f"{kind}: 输出 {count} 条组合: {out}")


@cli.command()
@click.option("--traces", "traces_path", required=True)
@click.option("--data", required=True)
@click.option("--backend", type=click.Choice(["seq2seq-finetuned", "template-stub"]))
@click.option("--model-id", default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", "-o", required=True)
@click.pass_context
def generate(ctx, traces_path, data, backend, model_id, workers, out):
    """为已有的知识组合生成问题"""
    config = _config(ctx, generator={"backend": backend, "model_id": model_id, "workers": workers})
    require_paths(traces=traces_path, data=data)
    inputs = {"traces": traces_path, "data": data}
    with _tracked(config, "generate", out, inputs) as (tracker, run_id, summary):
        samples = {s.id: s for s in load_samples(data)}
        stats = AugmentStats()
        records = generate_from_traces(
            read_traces(Path(traces_path)), samples, config.generator, stats=stats
        )
        write_jsonl_records((r.to_dict() for r in records), Path(out))
        _record_failures(tracker, run_id, stats)
        summary.update(stats.to_dict())
        click.echo(f"生成 {stats.records} 个问题, 失败 {len(stats.failures)}: {out}")


@cli.command()
@click.option("--checkpoint", envvar=CHECKPOINT_DIR_ENV, required=True)
@click.option("--data", required=True)
@click.option("--nq", type=int, default=None)
@click.option("--top-p", type=float, default=None)
@click.option("--k", "k", type=int, default=None)
@click.option("--backend", type=click.Choice(["seq2seq-finetuned", "template-stub"]))
@click.option("--model-id", default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", "-o", required=True)
@seed_option
@click.pass_context
def augment(ctx, checkpoint, data, nq, top_p, k, backend, model_id, workers, out, seed):
    """端到端数据增强：采样组合并生成问题"""
    config = _config(
        ctx,
        seed,
        decode={"strategy": "nucleus", "n_q": nq, "top_p": top_p, "k": k},
        generator={"backend": backend, "model_id": model_id, "workers": workers},
    )
    require_paths(data=data)
    model = _load_model(checkpoint, config)
    inputs = {"checkpoint": checkpoint, "data": data}
    with _tracked(config, "augment", out, inputs) as (tracker, run_id, summary):
        stats = AugmentStats()
        records = augment_dataset(
            load_samples(data), model, config.decode, config.generator, stats=stats
        )
        write_jsonl_records((r.to_dict() for r in records), Path(out))
        _record_failures(tracker, run_id, stats)
        summary.update(stats.to_dict())
        click.echo(
            f"增强 {stats.samples} 个样本 -> {stats.records} 条记录, 失败 {len(stats.failures)}: {out}"
        )


@cli.command()
@click.option("--pred", required=True, help="组合轨迹 JSONL")
@click.option("--data", required=True)
@click.option("--k", "ks", default="2,3", help="逗号分隔的 K 列表")
@click.option("--questions", default=None, help="生成的问题 JSONL（计算 Pairwise-BLEU）")
@click.option("--report", required=True, help="报告 JSON 输出路径")
@click.pass_context
def evaluate(ctx, pred, data, ks, questions, report):
    """评估组合选择 (P/R/F1@K) 与问题多样性"""
    config = _config(ctx)
    ks = _parse_ks(ks)
    require_paths(pred=pred, data=data)
    if questions:
        require_paths(questions=questions)

    inputs = {"pred": pred, "data": data, "questions": questions}
    with _tracked(config, "evaluate", report, inputs) as (_, _, summary):
        samples = {s.id: s for s in load_samples(data)}
        result = evaluate_traces(read_traces(Path(pred)), samples, ks).to_dict()
        if questions:
            grouped: Dict[str, List[str]] = {}
            for record in read_jsonl_records(Path(questions)):
                grouped.setdefault(str(record["sample_id"]), []).append(record["question"])
            result["diversity"] = diversity_report(grouped).to_dict()

        Path(report).parent.mkdir(parents=True, exist_ok=True)
        Path(report).write_text(
            json.dumps(result, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        summary.update(result)
        for k in ks:
            click.echo(
                f"K={k}: P {result[f'P@{k}']:.2f} | R {result[f'R@{k}']:.2f} "
                f"| F1 {result[f'F1@{k}']:.2f}"
            )
        if "diversity" in result:
            click.echo(f"Pairwise-BLEU: {result['diversity']['pairwise_bleu']:.2f}")


def dispatch(argv: Optional[List[str]] = None) -> int:
    """
    运行 CLI 并返回退出码

    0 成功；1 数据错误；2 配置或用法错误。
    """
    try:
        result = cli.main(args=argv, prog_name="kcs", standalone_mode=False)
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.Abort:
        click.echo("已中止", err=True)
        return 1
    except KCSError as e:
        logger.debug("命令失败", exc_info=True)
        click.echo(f"错误: {e}", err=True)
        return e.exit_code
    return result if isinstance(result, int) else 0


def main():
    sys.exit(dispatch(sys.argv[1:]))
