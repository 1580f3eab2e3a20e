#!/usr/bin/env python3
"""
=============================================================================
TYPELABEL PIPELINE
=============================================================================
One executable, one subcommand per stage:

    make-toy         write the synthetic desk-scale task
    generate-labels  MLM hypernym labels merged into weak samples
    select-patterns  greedy pattern list on the dev set
    pretrain         h on weak data
    finetune         m = h fine-tuned on human data
    selftrain        student from h, teacher m
    evaluate         macro / micro / strict metrics, per mention kind
    mine-mapping     most frequent top-1 fills, for writing a type mapping
    map-types        fine-grained path labels through a word mapping

USAGE:
    python -m src.cli <subcommand> --config run.json [--set key=value ...]

EXIT CODES:
    0 - Success
    1 - Runtime failure (backend, training, metrics)
    2 - Configuration or input error (bad config, missing/malformed file,
        vocabulary mismatch)
=============================================================================
"""

import argparse
import itertools
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from src.config import PipelineConfig, load_config, write_resolved_config
from src.core.brain import MlmBackend, create_backend
from src.core.evaluation import evaluate_by_kind, write_report
from src.core.fg_typing import MappingStats, load_mapping, map_types, mine_mapping_candidates
from src.core.labeling import (
    LabelingStats, PatternList, generate_labels, greedy_build_pattern_list, load_pattern_list, save_pattern_list,
)
from src.core.model import TypingModel, load_checkpoint, new_model, save_checkpoint
from src.core.patterns import PatternError, builtin_patterns, load_patterns
from src.core.toy import make_toy_task, write_toy_task
from src.core.training import finetune, pretrain, self_train
from src.core.types import (
    ConfigurationError, MentionSample, TypeLabelError, TypeVocabulary, VocabularyMismatchError,
)
from src.memory.corpus import (
    CorpusFormatError, SampleParseError, extract_pronoun_mentions, load_pronoun_lexicon, load_vocabulary,
    read_samples, read_sentences, write_samples,
)

logger = logging.getLogger("TypeLabel.CLI")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INPUT = 2

INPUT_ERRORS = (ConfigurationError, CorpusFormatError, SampleParseError, PatternError, VocabularyMismatchError)


# =============================================================================
# SHARED WIRING
# =============================================================================

def _vocabulary(cfg: PipelineConfig) -> TypeVocabulary:
    return load_vocabulary(cfg.require_path("vocab"), cfg.require_path("general"), cfg.require_path("fine"))


def _backend(cfg: PipelineConfig) -> MlmBackend:
    b = cfg.backend
    return create_backend(b.kind, checkpoint=b.checkpoint, mock_table=b.mock_table, redis_url=b.redis_url, device=b.device)


def _samples(path: str) -> List[MentionSample]:
    return list(read_samples(path))


def _checkpoint(cfg: PipelineConfig, name: str, vocab: TypeVocabulary) -> TypingModel:
    model, _ = load_checkpoint(cfg.require_path(name), vocab)
    return model


def _pattern_list(cfg: PipelineConfig) -> PatternList:
    """The selected list when one exists; otherwise (or under single_pattern) the seed pattern alone."""
    seed_only = PatternList(patterns=[builtin_patterns()[0]], delta=cfg.labeling.delta)
    if cfg.labeling.single_pattern:
        return seed_only
    path = cfg.paths.pattern_list
    if path and Path(path).exists():
        return load_pattern_list(path)
    logger.info("[CLI] No pattern list found; labeling with the seed pattern only")
    return seed_only


def _baseline(cfg: PipelineConfig, vocab: TypeVocabulary, patterns: int) -> Optional[TypingModel]:
    if patterns <= 1:
        return None
    return _checkpoint(cfg, "baseline_dir", vocab)


def _parent(path: str) -> Path:
    return Path(path).resolve().parent


# =============================================================================
# SUBCOMMANDS
# =============================================================================

def cmd_make_toy(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    task = make_toy_task(seed=args.seed if args.seed is not None else cfg.seed)
    config_path = write_toy_task(task, args.out, seed=args.seed if args.seed is not None else cfg.seed)
    print(f"toy task written; config: {config_path}")
    return EXIT_OK


def cmd_generate_labels(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    vocab = _vocabulary(cfg)
    pattern_list = _pattern_list(cfg)
    backend = _backend(cfg)
    baseline = _baseline(cfg, vocab, len(pattern_list))
    output = cfg.require_path("labeled_output")
    write_resolved_config(cfg, _parent(output), "generate-labels")

    streams = [read_samples(cfg.require_path("input_samples"))]
    if cfg.paths.raw_text:
        lexicon = load_pronoun_lexicon(cfg.paths.pronouns)
        streams.append(extract_pronoun_mentions(read_sentences(cfg.paths.raw_text), lexicon))

    stats = LabelingStats()
    labeled = generate_labels(
        itertools.chain(*streams), pattern_list, backend, baseline, vocab,
        k=cfg.labeling.k, top_n=cfg.labeling.top_n, stats=stats,
    )
    write_samples(output, labeled)
    print(f"samples={stats.samples} empty={stats.empty}")
    for pattern in pattern_list.patterns:
        print(f"pattern_usage[{pattern.id}]={stats.pattern_usage.get(pattern.id, 0)}")
    return EXIT_OK


def cmd_select_patterns(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    vocab = _vocabulary(cfg)
    if cfg.labeling.single_pattern:
        candidates = builtin_patterns()[:1]
    elif cfg.labeling.pattern_file:
        candidates = load_patterns(cfg.labeling.pattern_file)
    else:
        candidates = builtin_patterns()
    dev = _samples(cfg.require_path("dev"))
    output = cfg.require_path("pattern_list")
    backend = _backend(cfg)
    baseline = _baseline(cfg, vocab, len(candidates))
    write_resolved_config(cfg, _parent(output), "select-patterns")

    pattern_list = greedy_build_pattern_list(
        candidates, dev, backend, baseline, vocab,
        k=cfg.labeling.k, delta=cfg.labeling.delta, top_n=cfg.labeling.top_n,
    )
    save_pattern_list(output, pattern_list)
    for pattern_id, f1 in pattern_list.trace:
        print(f"{f1:.6f}\t{pattern_id}")
    return EXIT_OK


def cmd_pretrain(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    vocab = _vocabulary(cfg)
    weak = _samples(cfg.require_path("weak"))
    out = cfg.require_path("h_dir")
    write_resolved_config(cfg, out, "pretrain")
    model = new_model(vocab, hidden_size=cfg.model.hidden_size, encoder=cfg.model.encoder_spec(), seed=cfg.seed)
    h = pretrain(model, weak, cfg.pretrain, cfg.loss, checkpoint_dir=out, resume=args.resume)
    if cfg.pretrain.steps == 0:
        save_checkpoint(h, out)
    print(f"checkpoint={out} checksum={h.parameter_checksum()[:16]}")
    return EXIT_OK


def cmd_finetune(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    vocab = _vocabulary(cfg)
    h = _checkpoint(cfg, "h_dir", vocab)
    human = _samples(cfg.require_path("human"))
    out = cfg.require_path("m_dir")
    write_resolved_config(cfg, out, "finetune")
    m = finetune(h, human, cfg.finetune, cfg.loss, checkpoint_dir=out, resume=args.resume)
    if cfg.finetune.steps == 0:
        save_checkpoint(m, out)
    print(f"checkpoint={out} checksum={m.parameter_checksum()[:16]}")
    return EXIT_OK


def cmd_selftrain(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    vocab = _vocabulary(cfg)
    h = _checkpoint(cfg, "h_dir", vocab)
    m = _checkpoint(cfg, "m_dir", vocab)
    human = _samples(cfg.require_path("human"))
    weak = _samples(cfg.require_path("weak"))
    out = cfg.require_path("student_dir")
    write_resolved_config(cfg, out, "selftrain")
    student = self_train(h, m, human, weak, cfg.selftrain, cfg.loss, checkpoint_dir=out, resume=args.resume)
    if cfg.selftrain.steps == 0:
        save_checkpoint(student, out)
    print(f"checkpoint={out} checksum={student.parameter_checksum()[:16]}")
    return EXIT_OK


def cmd_evaluate(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    vocab = _vocabulary(cfg)
    model = _checkpoint(cfg, "eval_checkpoint", vocab)
    samples = _samples(cfg.require_path("test"))
    for sample in samples:
        vocab.check_labels(sample)
    out = cfg.require_path("eval_output")
    write_resolved_config(cfg, out, "evaluate")
    predictions = [p.as_set() for p in model.predict(samples)]
    report = evaluate_by_kind(samples, predictions)
    write_report(report, out)
    for line in report.summary_lines():
        print(line)
    return EXIT_OK


def cmd_mine_mapping(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    samples = read_samples(cfg.require_path("fg_input"))
    for word, count in mine_mapping_candidates(samples, _backend(cfg), args.n):
        print(f"{word}\t{count}")
    return EXIT_OK


def cmd_map_types(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    mapping = load_mapping(cfg.require_path("mapping"))
    source = read_samples(cfg.require_path("fg_input"))
    output = cfg.require_path("fg_output")
    backend = _backend(cfg)
    write_resolved_config(cfg, _parent(output), "map-types")
    stats = MappingStats()
    write_samples(output, map_types(source, backend, mapping, stats))
    print(
        f"mapped={stats.mapped} unmapped={stats.unmapped} passed_through={stats.passed_through} "
        f"unmapped_ratio={stats.unmapped_ratio:.4f}"
    )
    return EXIT_OK


COMMANDS: Dict[str, Callable[[PipelineConfig, argparse.Namespace], int]] = {
    "make-toy": cmd_make_toy,
    "generate-labels": cmd_generate_labels,
    "select-patterns": cmd_select_patterns,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "selftrain": cmd_selftrain,
    "evaluate": cmd_evaluate,
    "mine-mapping": cmd_mine_mapping,
    "map-types": cmd_map_types,
}


# =============================================================================
# ENTRY POINT
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="typelabel",
        description="Weakly supervised ultra-fine entity typing pipeline",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
EXAMPLES:
  python -m src.cli make-toy --out runs/toy
  python -m src.cli generate-labels --config runs/toy/config.json --k 10
  python -m src.cli pretrain --config runs/toy/config.json --set pretrain.steps=500
  python -m src.cli evaluate --config runs/toy/config.json --set paths.test=runs/toy/dev.jsonl
        """,
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Pipeline config (JSON)")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override a config value, e.g. loss.lambda=0.05 (repeatable)",
    )
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("generate-labels", "select-patterns"):
            p.add_argument("--k", type=int, help="Types kept per prediction (labeling.k)")
            p.add_argument("--top-n", type=int, help="Fills requested per prompt (labeling.top_n)")
        if name in ("pretrain", "finetune", "selftrain"):
            p.add_argument("--resume", action="store_true", help="Continue from the stage checkpoint")
        if name == "make-toy":
            p.add_argument("--out", type=Path, required=True, help="Output directory")
            p.add_argument("--seed", type=int, help="Generator seed (default: config seed)")
        if name == "mine-mapping":
            p.add_argument("--n", type=int, default=50, help="Number of candidate words")
    return parser


def _overrides(args: argparse.Namespace) -> List[str]:
    overrides = list(args.overrides)
    if getattr(args, "k", None) is not None:
        overrides.append(f"labeling.k={args.k}")
    if getattr(args, "top_n", None) is not None:
        overrides.append(f"labeling.top_n={args.top_n}")
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    stage = args.command
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[stage](cfg, args)
    except FileNotFoundError as e:
        print(f"[{stage}] input file not found: {e.filename}", file=sys.stderr)
        return EXIT_INPUT
    except INPUT_ERRORS as e:
        print(f"[{stage}] {e}", file=sys.stderr)
        return EXIT_INPUT
    except TypeLabelError as e:
        print(f"[{stage}] {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"[CLI] {stage} failed")
        print(f"[{stage}] unexpected failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
