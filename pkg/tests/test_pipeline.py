"""
============================================================================
TEST: Desk-scale pipeline, end to end
============================================================================

    make-toy -> generate-labels -> pretrain -> finetune -> selftrain
             -> evaluate (dev)

    - fine-tuned dev macro F1 >= 0.8, and no worse than the pretrained model
    - self-trained dev macro F1 >= fine-tuned - 0.01
    - fixed seed, reproducible parameters

    Several patterns: a baseline trained on weak.jsonl before MLM labeling steers
    select-patterns and the per-mention choice in generate-labels.

============================================================================
"""

import json
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.cli import EXIT_OK, main
from src.core.evaluation import REPORT_FILE
from src.core.labeling import PatternList, save_pattern_list
from src.core.model import load_checkpoint
from src.core.patterns import builtin_patterns
from src.core.toy import build_toy_vocabulary
from src.core.types import Provenance
from src.memory.corpus import read_samples


def _run(*argv):
    assert main(list(argv)) == EXIT_OK, argv


def _evaluate(toy, checkpoint, name):
    _run(
        "evaluate", "--config", str(toy / "config.json"),
        "--set", f"paths.test={toy / 'dev.jsonl'}",
        "--set", f"paths.eval_checkpoint={checkpoint}",
        "--set", f"paths.eval_output={toy / 'runs' / name}",
    )
    return json.loads((toy / "runs" / name / REPORT_FILE).read_text(encoding="utf-8"))


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    toy = tmp_path_factory.mktemp("toy")
    config = str(toy / "config.json")
    _run("make-toy", "--out", str(toy), "--seed", "13")
    _run("generate-labels", "--config", config)
    _run("pretrain", "--config", config)
    _run("finetune", "--config", config)
    _run("selftrain", "--config", config)
    return toy


class TestToyPipeline:
    def test_weak_labels_gain_mlm_types(self, toy_run):
        labeled = list(read_samples(toy_run / "weak_labeled.jsonl"))
        assert len(labeled) == 800
        with_mlm = sum(any(src is Provenance.MLM for src in s.label_sources.values()) for s in labeled)
        assert with_mlm > 0.8 * len(labeled)
        for sample in labeled:
            if sample.mention_kind.value == "PRONOUN":
                assert all(src is Provenance.MLM for src in sample.label_sources.values())

    def test_every_stage_left_a_checkpoint(self, toy_run):
        for stage in ("h", "m", "student"):
            assert (toy_run / "runs" / stage / "model.pt").exists()
            assert (toy_run / "runs" / stage / "curve.jsonl").exists()

    def test_dev_quality(self, toy_run):
        pretrained = _evaluate(toy_run, toy_run / "runs" / "h", "eval_h")
        finetuned = _evaluate(toy_run, toy_run / "runs" / "m", "eval_m")
        assert finetuned["macro_f1"] >= pretrained["macro_f1"]
        student = _evaluate(toy_run, toy_run / "runs" / "student", "eval_student")
        assert finetuned["macro_f1"] >= 0.8
        assert student["macro_f1"] >= finetuned["macro_f1"] - 0.01

    def test_pretraining_is_reproducible(self, toy_run, tmp_path):
        """A second run from the same seed reproduces labels and h exactly."""
        again = tmp_path / "toy"
        config = str(again / "config.json")
        _run("make-toy", "--out", str(again), "--seed", "13")
        _run("generate-labels", "--config", config)
        _run("pretrain", "--config", config)

        assert (again / "weak_labeled.jsonl").read_bytes() == (toy_run / "weak_labeled.jsonl").read_bytes()
        vocab = build_toy_vocabulary()
        first, _ = load_checkpoint(toy_run / "runs" / "h", vocab)
        second, _ = load_checkpoint(again / "runs" / "h", vocab)
        assert first.parameter_checksum() == second.parameter_checksum()


@pytest.fixture(scope="module")
def baseline_run(tmp_path_factory):
    """A toy task plus a baseline pretrained on weak.jsonl as written (no MLM labels) and fine-tuned."""
    toy = tmp_path_factory.mktemp("toy_baseline")
    config = str(toy / "config.json")
    _run("make-toy", "--out", str(toy), "--seed", "13")
    _run(
        "pretrain", "--config", config,
        "--set", f"paths.weak={toy / 'weak.jsonl'}",
        "--set", f"paths.h_dir={toy / 'runs' / 'baseline_h'}",
    )
    _run(
        "finetune", "--config", config,
        "--set", f"paths.h_dir={toy / 'runs' / 'baseline_h'}",
        "--set", f"paths.m_dir={toy / 'runs' / 'baseline'}",
    )
    return toy


def _usage(lines):
    return {
        line[len("pattern_usage["):line.index("]")]: int(line.split("=")[-1])
        for line in lines if line.startswith("pattern_usage[")
    }


class TestSeveralPatterns:
    def _overrides(self, toy, **paths):
        argv = ["--set", "labeling.single_pattern=false", "--set", f"paths.baseline_dir={toy / 'runs' / 'baseline'}"]
        for key, value in paths.items():
            argv += ["--set", f"paths.{key}={value}"]
        return argv

    def test_select_then_generate(self, baseline_run, capsys):
        toy = baseline_run
        config = str(toy / "config.json")
        _run("select-patterns", "--config", config, *self._overrides(toy))

        selected = json.loads((toy / "patterns.json").read_text(encoding="utf-8"))
        trace = [(step["pattern"], step["f1"]) for step in selected["trace"]]
        assert [pattern_id for pattern_id, _ in trace] == selected["patterns"]
        for (_, before), (_, after) in zip(trace, trace[1:]):
            assert after - before > selected["delta"]

        capsys.readouterr()
        _run("generate-labels", "--config", config,
             *self._overrides(toy, labeled_output=toy / "weak_selected.jsonl"))
        usage = _usage(capsys.readouterr().out.splitlines())
        assert list(usage) == selected["patterns"]
        assert sum(usage.values()) == 800
        assert len(list(read_samples(toy / "weak_selected.jsonl"))) == 800

    def test_two_patterns_split_the_mentions(self, baseline_run, capsys):
        toy = baseline_run
        two = PatternList(builtin_patterns()[:2])
        save_pattern_list(toy / "patterns_two.json", two)
        capsys.readouterr()
        _run("generate-labels", "--config", str(toy / "config.json"),
             *self._overrides(toy, pattern_list=toy / "patterns_two.json", labeled_output=toy / "weak_two.jsonl"))

        usage = _usage(capsys.readouterr().out.splitlines())
        assert list(usage) == [p.id for p in two.patterns]
        assert sum(usage.values()) == 800
        labeled = list(read_samples(toy / "weak_two.jsonl"))
        with_mlm = sum(any(src is Provenance.MLM for src in s.label_sources.values()) for s in labeled)
        assert with_mlm > 0.5 * len(labeled)
