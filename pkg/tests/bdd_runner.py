"""
BDD Test Runner - 执行端到端场景验证
简化版 BDD 测试（无需 behave）
"""

import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent))

from conftest import DIM, make_sample, marker_records  # noqa: E402
from src.config import DecodeConfig, EncoderBackendSpec, GeneratorSpec  # noqa: E402
from src.config import OptimConfig, SelectorConfig  # noqa: E402
from src.corpus import (  # noqa: E402
    DatasetSplit,
    HotpotLoader,
    SentenceRef,
    build_gold_composition,
    filter_answerable,
    load_dataset,
)
from src.decoding import SelectionDistribution, greedy_decode, nucleus_decode  # noqa: E402
from src.decoding import top_p_truncate  # noqa: E402
from src.errors import DataError  # noqa: E402
from src.metrics import evaluate_traces  # noqa: E402
from src.qgen import AugmentStats, augment_dataset  # noqa: E402
from src.training import train  # noqa: E402


class BDDTestRunner:
    """BDD 测试运行器"""

    def __init__(self):
        self.passed = 0
        self.failed = 0
        self.workdir = Path(tempfile.mkdtemp(prefix="kcs_bdd_"))
        self._model = None
        self._samples = None

    def run_all(self):
        """运行所有 BDD 场景"""
        print("=" * 60)
        print("BDD Test Suite - Knowledge Composition Sampling")
        print("=" * 60)

        # Stage 1: 数据
        self.scenario("Load a HotpotQA file", self.test_load_records)
        self.scenario("Drop yes/no answers", self.test_filter_answerable)
        self.scenario("Arrange gold facts by document", self.test_document_arrangement)

        # Stage 2: 选择器
        self.scenario("Train on a marker corpus", self.test_training)
        self.scenario("Greedy selection", self.test_greedy_selection)

        # Stage 3: 采样与生成
        self.scenario("Top-p truncation", self.test_top_p)
        self.scenario("Sample diverse compositions", self.test_nucleus_sampling)
        self.scenario("Augment with questions", self.test_augment)

        # Error Handling
        self.scenario("Reject a corrupted file", self.test_corrupted_file)
        self.scenario("Reject traces for unknown samples", self.test_unknown_trace)

        self.print_summary()

    def scenario(self, name, check):
        print(f"\n▶ Scenario: {name}")
        try:
            check()
            self.passed += 1
            print("  ✅ PASSED")
        except Exception as e:
            self.failed += 1
            print(f"  ❌ FAILED: {type(e).__name__}: {e}")

    def _write(self, name, records):
        path = self.workdir / name
        path.write_text(json.dumps(records), encoding="utf-8")
        return path

    def _trained(self):
        if self._model is None:
            self._samples = filter_answerable(
                load_dataset(self._write("marker.json", marker_records(30, seed=1)))
            )
            self._model = train(
                DatasetSplit(train=self._samples, dev=[], test=[]),
                SelectorConfig(d=DIM, n_heads=4, dropout=0.0, temperature=0.1),
                OptimConfig(lr=1e-3, epochs=15, batch_size=8, arrangement="original"),
                encoder_spec=EncoderBackendSpec(model_id="hashing", d=DIM),
                seed=1,
            )
        return self._model, self._samples

    def test_load_records(self):
        # Given: 一条记录的支持事实指向不存在的句子
        records = marker_records(3)
        records[1]["supporting_facts"].append(["Topic 1 0", 99])
        loader = HotpotLoader()

        # When
        samples = loader.load(self._write("partial.json", records))

        # Then
        assert [s.id for s in samples] == ["m0", "m2"]
        assert loader.dropped == 1
        assert samples[0].num_sentences == 8

    def test_filter_answerable(self):
        samples = [
            make_sample([("A", ["x."])], [(0, 0)], answer=a, sample_id=str(i))
            for i, a in enumerate(["yes", "Paris", "no", "Rome"])
        ]
        assert [s.answer for s in filter_answerable(samples)] == ["Paris", "Rome"]

    def test_document_arrangement(self):
        # Given: 答案在 (d0, s5)
        documents = [
            ("Zero", [f"z{i}." for i in range(5)] + ["Lisbon z5."]),
            ("One", [f"o{i}." for i in range(4)]),
        ]
        sample = make_sample(documents, [(1, 3), (0, 5), (0, 2)], answer="Lisbon")

        # When
        composition = build_gold_composition(sample, "document")

        # Then: 答案段在前，同文档的前段其次，其他文档最后
        assert composition.refs == [SentenceRef(0, 5), SentenceRef(0, 2), SentenceRef(1, 3)]

    def test_training(self):
        model, _ = self._trained()
        assert model.metadata["best_epoch"] >= 0
        assert model.config.d == DIM

    def test_greedy_selection(self):
        model, samples = self._trained()
        traces = [greedy_decode(model, s, 2) for s in samples]
        report = evaluate_traces(traces, {s.id: s for s in samples}, [2]).to_dict()
        assert all(len(set(t.refs)) == 2 for t in traces)
        assert report["F1@2"] >= 50.0, f"F1@2 too low: {report['F1@2']}"

    def test_top_p(self):
        dist = SelectionDistribution.from_array([0.5, 0.3, 0.15, 0.05])
        nucleus, rescaled = top_p_truncate(dist, 0.9)
        assert len(nucleus) == 3
        assert abs(rescaled.probs[0] - 0.526) < 1e-3

    def test_nucleus_sampling(self):
        model, samples = self._trained()
        traces = nucleus_decode(model, samples[0], DecodeConfig(k=3, n_q=5, seed=2))
        assert len(traces) == 5
        assert all(len(t.refs) == len(set(t.refs)) == 3 for t in traces)

    def test_augment(self):
        model, samples = self._trained()
        stats = AugmentStats()
        records = list(
            augment_dataset(
                samples[:4], model, DecodeConfig(k=2, n_q=2), GeneratorSpec(), stats=stats
            )
        )
        assert len(records) == 8
        assert stats.to_dict() == {"samples": 4, "records": 8, "failures": 0}

    def test_corrupted_file(self):
        path = self.workdir / "broken.jsonl"
        path.write_text("{not json\n", encoding="utf-8")
        try:
            load_dataset(path)
        except DataError as e:
            assert "记录 0" in str(e)
            return
        raise AssertionError("corrupted file was accepted")

    def test_unknown_trace(self):
        model, samples = self._trained()
        trace = greedy_decode(model, samples[0], 2)
        trace.sample_id = "ghost"
        try:
            evaluate_traces([trace], {s.id: s for s in samples}, [2])
        except DataError as e:
            assert "ghost" in str(e)
            return
        raise AssertionError("unknown sample id was accepted")

    def print_summary(self):
        """打印汇总"""
        print("\n" + "=" * 60)
        print("BDD Test Summary")
        print("=" * 60)
        print(f"✅ Passed: {self.passed}")
        print(f"❌ Failed: {self.failed}")
        print(f"📊 Total: {self.passed + self.failed}")

        if self.failed == 0:
            print("\n🎉 All BDD scenarios passed!")
        else:
            print(f"\n⚠️  {self.failed} scenario(s) failed")

        print("=" * 60)


if __name__ == "__main__":
    runner = BDDTestRunner()
    runner.run_all()
    sys.exit(1 if runner.failed else 0)
