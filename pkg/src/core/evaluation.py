"""
Typing metrics: macro P/R/F1, micro P/R/F1, strict accuracy, and a
per-mention-kind breakdown.

Macro F1 is the harmonic mean of macro-averaged precision and recall, not
the mean of per-instance F1 scores.
"""

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import AbstractSet, Dict, List, Sequence, Tuple, Union

from src.core.types import MentionKind, MentionSample, TypeLabelError
from src.memory.corpus import write_lines_atomic

logger = logging.getLogger("TypeLabel.Evaluation")

TypeSet = AbstractSet[str]
PRF = Tuple[float, float, float]

REPORT_FILE = "eval_report.json"
SUMMARY_FILE = "eval_summary.txt"


class MetricError(TypeLabelError):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"Metric error: {reason}")


def _harmonic(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _check(golds: Sequence[TypeSet], preds: Sequence[TypeSet], allow_empty_predictions: bool = False) -> None:
    if len(golds) != len(preds):
        raise MetricError(f"length mismatch: {len(golds)} gold sets vs {len(preds)} predictions")
    if not golds:
        raise MetricError("empty corpus")
    for i, (gold, pred) in enumerate(zip(golds, preds)):
        if not gold:
            raise MetricError(f"instance {i} has an empty gold set")
        if not pred and not allow_empty_predictions:
            raise MetricError(f"instance {i} has an empty prediction set")


def macro_prf(golds: Sequence[TypeSet], preds: Sequence[TypeSet], allow_empty_predictions: bool = False) -> PRF:
    """
    allow_empty_predictions scores an empty prediction as precision 0 instead of
    rejecting it; used for raw generated label sets, which may come back empty.
    """
    _check(golds, preds, allow_empty_predictions)
    p = sum(len(set(pr) & set(g)) / len(pr) for g, pr in zip(golds, preds) if pr) / len(golds)
    r = sum(len(set(pr) & set(g)) / len(g) for g, pr in zip(golds, preds)) / len(golds)
    return p, r, _harmonic(p, r)


def micro_prf(golds: Sequence[TypeSet], preds: Sequence[TypeSet]) -> PRF:
    _check(golds, preds)
    tp = fp = fn = 0
    for gold, pred in zip(golds, preds):
        hit = len(set(gold) & set(pred))
        tp += hit
        fp += len(pred) - hit
        fn += len(gold) - hit
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return p, r, _harmonic(p, r)


def strict_accuracy(golds: Sequence[TypeSet], preds: Sequence[TypeSet]) -> float:
    _check(golds, preds)
    return sum(set(g) == set(p) for g, p in zip(golds, preds)) / len(golds)


@dataclass
class EvalReport:
    macro_p: float
    macro_r: float
    macro_f1: float
    micro_p: float
    micro_r: float
    micro_f1: float
    strict_acc: float
    count: int = 0
    per_kind: Dict[str, PRF] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["per_kind"] = {
            kind: {"macro_p": p, "macro_r": r, "macro_f1": f} for kind, (p, r, f) in self.per_kind.items()
        }
        return data

    def summary_lines(self) -> List[str]:
        lines = [f"{key}={getattr(self, key):.6f}" for key in (
            "macro_p", "macro_r", "macro_f1", "micro_p", "micro_r", "micro_f1", "strict_acc"
        )]
        lines.append(f"count={self.count}")
        for kind, (p, r, f) in self.per_kind.items():
            lines.extend([f"{kind}.macro_p={p:.6f}", f"{kind}.macro_r={r:.6f}", f"{kind}.macro_f1={f:.6f}"])
        return lines


def evaluate_by_kind(samples: Sequence[MentionSample], preds: Sequence[TypeSet]) -> EvalReport:
    """Overall metrics plus macro P/R/F1 per mention kind (kinds without samples are omitted)."""
    golds = [s.labels for s in samples]
    macro = macro_prf(golds, preds)
    micro = micro_prf(golds, preds)
    strict = strict_accuracy(golds, preds)

    grouped: Dict[MentionKind, List[int]] = defaultdict(list)
    for i, sample in enumerate(samples):
        grouped[sample.mention_kind].append(i)
    per_kind = {}
    for kind in MentionKind:
        idx = grouped.get(kind)
        if idx:
            per_kind[kind.value] = macro_prf([golds[i] for i in idx], [preds[i] for i in idx])

    report = EvalReport(*macro, *micro, strict_acc=strict, count=len(samples), per_kind=per_kind)
    logger.info(
        f"[EVAL] n={report.count} macro P/R/F1={report.macro_p:.4f}/{report.macro_r:.4f}/{report.macro_f1:.4f} "
        f"micro F1={report.micro_f1:.4f} strict={report.strict_acc:.4f}"
    )
    return report


def write_report(report: EvalReport, directory: Union[str, Path]) -> Path:
    """Structured JSON report plus a flat key=value summary."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_lines_atomic(out / REPORT_FILE, [json.dumps(report.to_dict(), indent=2)])
    write_lines_atomic(out / SUMMARY_FILE, report.summary_lines())
    return out
