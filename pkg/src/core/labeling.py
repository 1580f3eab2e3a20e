"""
============================================================================
MLM LABELING: weak type labels from masked-LM hypernym predictions
============================================================================

    sample --build_prompt(pattern)--> prompt --backend--> ranked words
           --singularize/filter--> top-k type labels

With several patterns, each mention takes the candidate label set that
overlaps most with a baseline typing model's predictions. The pattern list
itself is built greedily on a dev set: start from the best single pattern
and keep adding the pattern with the largest F1 gain while the gain
exceeds delta.
============================================================================
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    AbstractSet, Any, Dict, Iterable, Iterator, List, Optional, Protocol, Sequence, Tuple, Union,
)

from src.core.brain import BackendError, MaskedPrediction, MlmBackend
from src.core.evaluation import macro_prf
from src.core.model import predict_types
from src.core.patterns import HypernymPattern, Prompt, build_prompt
from src.core.types import MentionSample, TypeLabelError, TypeVocabulary, merge_label_sources
from src.memory.corpus import CorpusFormatError, write_lines_atomic

logger = logging.getLogger("TypeLabel.Labeling")

DEFAULT_K = 10
DEFAULT_TOP_N = 50
DEFAULT_DELTA = 0.007


class Baseline(Protocol):
    """Anything that maps samples to a [batch x |vocab|] probability matrix."""
    def probabilities(self, samples: Sequence[MentionSample]) -> Any: ...


# =============================================================================
# SINGULARIZATION
# =============================================================================

_IRREGULAR_PLURALS = {
    "people": "person", "men": "man", "women": "woman", "children": "child",
    "feet": "foot", "teeth": "tooth", "geese": "goose", "mice": "mouse", "oxen": "ox",
    "lives": "life", "wives": "wife", "knives": "knife", "leaves": "leaf", "wolves": "wolf",
    "halves": "half", "thieves": "thief", "shelves": "shelf", "calves": "calf",
    "criteria": "criterion", "phenomena": "phenomenon", "alumni": "alumnus",
    "cacti": "cactus", "fungi": "fungus", "indices": "index", "matrices": "matrix",
    "analyses": "analysis", "theses": "thesis", "crises": "crisis", "diagnoses": "diagnosis",
    "heroes": "hero", "potatoes": "potato", "tomatoes": "tomato", "echoes": "echo",
}

_INVARIANT_FORMS = frozenset({
    "species", "series", "news", "sheep", "deer", "fish", "aircraft", "offspring",
    "physics", "mathematics", "economics", "politics", "athletics", "ethics",
    "means", "headquarters", "crossroads", "chassis", "corps",
})

_MEN_SINGULARS = frozenset({"specimen", "abdomen", "omen", "stamen", "semen"})


def _match_case(source: str, word: str) -> str:
    if source.isupper():
        return word.upper()
    if source[:1].isupper():
        return word[:1].upper() + word[1:]
    return word


def singularize(word: str) -> str:
    """Rule-table + irregular-lexicon singular form; non-plural words come back unchanged."""
    if not word:
        raise ValueError("word must be non-empty")
    lower = word.lower()
    if lower in _INVARIANT_FORMS:
        return word
    if lower in _IRREGULAR_PLURALS:
        return _match_case(word, _IRREGULAR_PLURALS[lower])
    if len(lower) <= 3:
        return word
    if lower.endswith("men") and lower not in _MEN_SINGULARS:
        return word[:-3] + _match_case(word[-3:], "man")
    if lower.endswith(("ss", "us", "is")):
        return word
    if lower.endswith("ies") and len(lower) > 4:
        return word[:-3] + _match_case(word[-3:], "y")
    if lower.endswith("ses"):
        # classes -> class, viruses -> virus, but houses -> house
        return word[:-2] if lower[:-2].endswith(("ss", "us")) else word[:-1]
    if lower.endswith("zes"):
        return word[:-2] if lower.endswith("zzes") else word[:-1]
    if lower.endswith(("xes", "ches", "shes")):
        return word[:-2]
    if lower.endswith("s"):
        return word[:-1]
    return word


# =============================================================================
# LABELS FROM ONE PREDICTION
# =============================================================================

def derive_type_labels(prediction: MaskedPrediction, vocab: TypeVocabulary, k: int) -> List[str]:
    """
    Walk ranked words; singularize, lowercase, keep in-vocabulary types,
    deduplicate, stop after k.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    labels: List[str] = []
    if k == 0:
        return labels
    seen = set()
    for word in prediction.words:
        if not word:
            continue
        type_name = singularize(word).lower()
        if type_name in seen or type_name not in vocab:
            continue
        seen.add(type_name)
        labels.append(type_name)
        if len(labels) == k:
            break
    return labels


def fill_prompts(backend: MlmBackend, prompts: Sequence[Prompt], top_n: int) -> List[MaskedPrediction]:
    """Batched fill-mask; any failure is re-raised with the prompt attached."""
    try:
        return backend.fill_mask_batch(prompts, top_n)
    except BackendError:
        raise
    except Exception as e:
        shown = prompts[0].text if len(prompts) == 1 else f"{prompts[0].text} (+{len(prompts) - 1} more)"
        raise BackendError(prompt=shown, reason=str(e)) from e


def labels_by_pattern(
    sample: MentionSample,
    pattern: HypernymPattern,
    backend: MlmBackend,
    vocab: TypeVocabulary,
    k: int = DEFAULT_K,
    top_n: int = DEFAULT_TOP_N,
) -> List[str]:
    if top_n < k:
        raise ValueError("top_n must be >= k")
    prediction = fill_prompts(backend, [build_prompt(sample, pattern)], top_n)[0]
    return derive_type_labels(prediction, vocab, k)


def candidate_labels(
    samples: Sequence[MentionSample],
    patterns: Sequence[HypernymPattern],
    backend: MlmBackend,
    vocab: TypeVocabulary,
    k: int = DEFAULT_K,
    top_n: int = DEFAULT_TOP_N,
) -> List[List[List[str]]]:
    """[sample][pattern] -> label list, from one batched backend pass."""
    if top_n < k:
        raise ValueError("top_n must be >= k")
    prompts = [build_prompt(s, p) for s in samples for p in patterns]
    predictions = fill_prompts(backend, prompts, top_n) if prompts else []
    width = len(patterns)
    return [
        [derive_type_labels(predictions[i * width + j], vocab, k) for j in range(width)]
        for i in range(len(samples))
    ]


# =============================================================================
# PER-MENTION PATTERN SELECTION
# =============================================================================

@dataclass
class PatternList:
    """
    The ordered pattern list L used for annotation.

    INVARIANTS: no duplicate patterns; the seed pattern comes first.
    `trace` holds (pattern id, dev F1 after adding it) for every accepted step.
    """
    patterns: List[HypernymPattern]
    delta: float = DEFAULT_DELTA
    trace: List[Tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.patterns:
            raise ValueError("pattern list must be non-empty")
        ids = [p.id for p in self.patterns]
        if len(set(ids)) != len(ids):
            raise ValueError("pattern list contains duplicates")

    def __len__(self) -> int:
        return len(self.patterns)

    @property
    def seed(self) -> HypernymPattern:
        return self.patterns[0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "patterns": [" ".join(p.template) for p in self.patterns],
            "delta": self.delta,
            "trace": [{"pattern": pid, "f1": f1} for pid, f1 in self.trace],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PatternList":
        return cls(
            patterns=[HypernymPattern.parse(t) for t in data["patterns"]],
            delta=float(data.get("delta", DEFAULT_DELTA)),
            trace=[(row["pattern"], float(row["f1"])) for row in data.get("trace", [])],
        )


def save_pattern_list(path: Union[str, Path], pattern_list: PatternList) -> None:
    write_lines_atomic(path, [json.dumps(pattern_list.to_dict(), indent=2)])


def load_pattern_list(path: Union[str, Path]) -> PatternList:
    try:
        return PatternList.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusFormatError(path, None, f"bad pattern list: {e}") from e


def _pick_by_overlap(candidates: Sequence[Sequence[str]], positives: AbstractSet[str]) -> int:
    """Index of the candidate with the largest overlap; ties go to the earlier one."""
    best, best_overlap = 0, -1
    for i, labels in enumerate(candidates):
        overlap = len(set(labels) & positives)
        if overlap > best_overlap:
            best, best_overlap = i, overlap
    return best


def baseline_positives(baseline: Baseline, samples: Sequence[MentionSample], vocab: TypeVocabulary) -> List[frozenset]:
    """The baseline's decoded prediction set per sample."""
    if not samples:
        return []
    probs = baseline.probabilities(list(samples))
    return [frozenset(predict_types(row, vocab).types) for row in probs]


def select_labels_for_mention(
    sample: MentionSample,
    pattern_list: Union[PatternList, Sequence[HypernymPattern]],
    backend: MlmBackend,
    baseline: Optional[Baseline],
    vocab: TypeVocabulary,
    k: int = DEFAULT_K,
    top_n: int = DEFAULT_TOP_N,
) -> List[str]:
    """
    The candidate label set (one per pattern in L) that overlaps most with
    the baseline's predicted types. With a single pattern the baseline is
    not consulted.
    """
    patterns = pattern_list.patterns if isinstance(pattern_list, PatternList) else list(pattern_list)
    if not patterns:
        raise ValueError("pattern list must be non-empty")
    candidates = candidate_labels([sample], patterns, backend, vocab, k, top_n)[0]
    if len(patterns) == 1:
        return candidates[0]
    if baseline is None:
        raise TypeLabelError("a baseline model is required to choose between several patterns")
    positives = baseline_positives(baseline, [sample], vocab)[0]
    return candidates[_pick_by_overlap(candidates, positives)]


def score_labelset_f1(generated: Sequence[Iterable[str]], gold: Sequence[AbstractSet[str]]) -> float:
    """Macro F1 of generated label lists against gold sets."""
    if len(generated) != len(gold):
        raise ValueError(f"length mismatch: {len(generated)} generated vs {len(gold)} gold")
    return macro_prf(list(gold), [frozenset(g) for g in generated], allow_empty_predictions=True)[2]


# =============================================================================
# GREEDY PATTERN-LIST CONSTRUCTION
# =============================================================================

def _list_f1(
    order: Sequence[int],
    table: Sequence[Sequence[Sequence[str]]],
    positives: Sequence[AbstractSet[str]],
    gold: Sequence[AbstractSet[str]],
) -> float:
    chosen = []
    for i, row in enumerate(table):
        candidates = [row[j] for j in order]
        pick = 0 if len(order) == 1 else _pick_by_overlap(candidates, positives[i])
        chosen.append(candidates[pick])
    return score_labelset_f1(chosen, gold)


def greedy_build_pattern_list(
    candidates: Sequence[HypernymPattern],
    dev_samples: Sequence[MentionSample],
    backend: MlmBackend,
    baseline: Optional[Baseline],
    vocab: TypeVocabulary,
    k: int = DEFAULT_K,
    delta: float = DEFAULT_DELTA,
    top_n: int = DEFAULT_TOP_N,
) -> PatternList:
    """
    Step 1: seed L with the best standalone pattern.
    Steps 2-3: add the remaining pattern with the largest F1 of L + [c] if it
    improves F1 by more than delta.
    Step 4: stop when nothing qualifies.

    Ties go to the earlier candidate. Gold labels come from dev_samples.labels.
    """
    if not candidates:
        raise ValueError("candidates must be non-empty")
    if delta <= 0:
        raise ValueError("delta must be > 0")
    if not dev_samples:
        raise TypeLabelError("greedy pattern selection needs a non-empty dev set")

    gold = [s.labels for s in dev_samples]
    # Every (sample, pattern) label list once; all later steps reuse the table
    table = candidate_labels(dev_samples, candidates, backend, vocab, k, top_n)
    positives: List[AbstractSet[str]] = [frozenset()] * len(dev_samples)
    if len(candidates) > 1:
        if baseline is None:
            raise TypeLabelError("a baseline model is required to choose between several patterns")
        positives = baseline_positives(baseline, dev_samples, vocab)

    standalone = [_list_f1([j], table, positives, gold) for j in range(len(candidates))]
    for pattern, f1 in zip(candidates, standalone):
        logger.info(f"[LABELING] Standalone F1 {f1:.4f} for '{pattern.id}'")
    seed = max(range(len(candidates)), key=lambda j: standalone[j])
    order = [seed]
    current = standalone[seed]
    trace = [(candidates[seed].id, current)]
    logger.info(f"[LABELING] Seed pattern '{candidates[seed].id}' (F1 {current:.4f})")

    while len(order) < len(candidates):
        best_j, best_f1 = None, None
        for j in range(len(candidates)):
            if j in order:
                continue
            f1 = _list_f1(order + [j], table, positives, gold)
            if best_f1 is None or f1 > best_f1:
                best_j, best_f1 = j, f1
        if best_f1 - current <= delta:
            logger.info(
                f"[LABELING] Best addition '{candidates[best_j].id}' gains {best_f1 - current:.4f} <= {delta}; stopping"
            )
            break
        order.append(best_j)
        current = best_f1
        trace.append((candidates[best_j].id, current))
        logger.info(f"[LABELING] Added '{candidates[best_j].id}' (F1 {current:.4f})")

    return PatternList(patterns=[candidates[j] for j in order], delta=delta, trace=trace)


# =============================================================================
# CORPUS LABELING
# =============================================================================

@dataclass
class LabelingStats:
    samples: int = 0
    empty: int = 0
    pattern_usage: Counter = field(default_factory=Counter)

    def to_dict(self) -> Dict[str, Any]:
        return {"samples": self.samples, "empty": self.empty, "pattern_usage": dict(self.pattern_usage)}


def generate_labels(
    samples: Iterable[MentionSample],
    pattern_list: PatternList,
    backend: MlmBackend,
    baseline: Optional[Baseline],
    vocab: TypeVocabulary,
    k: int = DEFAULT_K,
    top_n: int = DEFAULT_TOP_N,
    stats: Optional[LabelingStats] = None,
    chunk_size: int = 256,
) -> Iterator[MentionSample]:
    """
    Label a sample stream and merge the MLM labels into each sample.

    Works in chunks so backend and baseline calls are batched. `stats`
    collects how often each pattern won the per-mention selection.
    """
    stats = stats if stats is not None else LabelingStats()
    patterns = pattern_list.patterns
    if len(patterns) > 1 and baseline is None:
        raise TypeLabelError("a baseline model is required to choose between several patterns")

    def flush(chunk: List[MentionSample]) -> Iterator[MentionSample]:
        table = candidate_labels(chunk, patterns, backend, vocab, k, top_n)
        positives = baseline_positives(baseline, chunk, vocab) if len(patterns) > 1 else None
        for i, sample in enumerate(chunk):
            pick = 0 if positives is None else _pick_by_overlap(table[i], positives[i])
            labels = table[i][pick]
            stats.samples += 1
            stats.pattern_usage[patterns[pick].id] += 1
            if not labels:
                stats.empty += 1
            yield merge_label_sources(sample, labels)

    chunk: List[MentionSample] = []
    for sample in samples:
        chunk.append(sample)
        if len(chunk) == chunk_size:
            yield from flush(chunk)
            chunk = []
    if chunk:
        yield from flush(chunk)
    logger.info(f"[LABELING] Labeled {stats.samples} samples ({stats.empty} without MLM labels)")
