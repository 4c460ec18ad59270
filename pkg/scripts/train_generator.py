"""
在黄金 (知识组合, 答案) -> 问题 上微调 seq2seq 问题生成器

用法:
    python scripts/train_generator.py --data data/train.jsonl --model-id t5-base --out gen/
"""

import logging
import sys
from pathlib import Path

import click

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.cli import load_samples  # noqa: E402
from src.config import GeneratorSpec, require_paths  # noqa: E402
from src.errors import KCSError  # noqa: E402
from src.qgen import finetune_generator  # noqa: E402


@click.command()
@click.option("--data", required=True, help="训练数据 (原始或预处理后的 .jsonl)")
@click.option("--model-id", required=True, help="预训练 seq2seq 模型")
@click.option("--out", "-o", required=True, help="输出目录")
@click.option("--epochs", type=int, default=3)
@click.option("--lr", type=float, default=3e-5)
@click.option("--batch-size", type=int, default=8)
@click.option("--arrangement", default="document")
@click.option("--seed", type=int, default=42)
def main(data, model_id, out, epochs, lr, batch_size, arrangement, seed):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        require_paths(data=data)
        spec = GeneratorSpec(backend="seq2seq-finetuned", model_id=model_id)
        finetune_generator(
            load_samples(data),
            spec,
            Path(out),
            epochs=epochs,
            lr=lr,
            seed=seed,
            batch_size=batch_size,
            arrangement=arrangement,
        )
    except KCSError as e:
        click.echo(f"错误: {e}", err=True)
        sys.exit(e.exit_code)
    click.echo(f"生成器已保存: {out}")


if __name__ == "__main__":
    main()
