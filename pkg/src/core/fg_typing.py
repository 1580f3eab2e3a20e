"""
Single-path labels for traditional fine-grained typing.

One pattern ("M and any other H"), the single most probable fill, and a
hand-made word -> type path mapping. A mapped mention receives every
prefix of its path; an unmapped one stays unlabeled.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Tuple, Union

from src.core.brain import MlmBackend
from src.core.labeling import fill_prompts, singularize
from src.core.patterns import SEED_PATTERN_ID, HypernymPattern, build_prompt
from src.core.types import MentionSample, Provenance
from src.memory.corpus import CorpusFormatError

logger = logging.getLogger("TypeLabel.FineGrained")

FG_PATTERN = HypernymPattern.parse(SEED_PATTERN_ID)


@dataclass(frozen=True, order=True)
class TypePath:
    """A hierarchical type such as /organization/company. Non-empty, no empty segments."""
    segments: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments or any(not s for s in self.segments):
            raise ValueError(f"invalid type path segments {self.segments}")

    @classmethod
    def parse(cls, text: str) -> "TypePath":
        if not text.startswith("/"):
            raise ValueError(f"type path must start with '/': {text!r}")
        return cls(tuple(text[1:].split("/")))

    def render(self) -> str:
        return "/" + "/".join(self.segments)

    def __str__(self) -> str:
        return self.render()


@dataclass(frozen=True)
class WordTypeMapping:
    """Singular lowercase word -> type path. Read-only after load."""
    entries: Mapping[str, TypePath]

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, word: str) -> Optional[TypePath]:
        return self.entries.get(normalize_word(word))


def normalize_word(word: str) -> str:
    return singularize(word.strip()).lower()


def load_mapping(path: Union[str, Path]) -> WordTypeMapping:
    """
    TSV lines `word<TAB>/path`; '#' lines are comments.

    Raises:
        CorpusFormatError: malformed line, malformed path, or a duplicate key
    """
    entries: Dict[str, TypePath] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or not parts[0].strip():
                raise CorpusFormatError(path, line_number, "expected 'word<TAB>/path'")
            try:
                type_path = TypePath.parse(parts[1].strip())
            except ValueError as e:
                raise CorpusFormatError(path, line_number, str(e)) from e
            key = normalize_word(parts[0])
            if key in entries:
                raise CorpusFormatError(path, line_number, f"duplicate mapping for '{key}'")
            entries[key] = type_path
    logger.info(f"[FG] Loaded {len(entries)} word mappings from {path}")
    return WordTypeMapping(entries)


def expand_path(path: TypePath) -> FrozenSet[TypePath]:
    """Every prefix of the path, the path itself included."""
    return frozenset(TypePath(path.segments[:i]) for i in range(1, len(path.segments) + 1))


def _top_words(samples: List[MentionSample], backend: MlmBackend) -> List[Optional[str]]:
    prompts = [build_prompt(s, FG_PATTERN) for s in samples]
    predictions = fill_prompts(backend, prompts, 1) if prompts else []
    return [p.words[0] if p.words else None for p in predictions]


def annotate_fg(sample: MentionSample, backend: MlmBackend, mapping: WordTypeMapping) -> Optional[FrozenSet[TypePath]]:
    """Prefix-closed path set from the top-1 fill, or None when the word is unmapped."""
    word = _top_words([sample], backend)[0]
    if word is None:
        return None
    mapped = mapping.lookup(word)
    return expand_path(mapped) if mapped is not None else None


def mine_mapping_candidates(samples: Iterable[MentionSample], backend: MlmBackend, n: int, chunk_size: int = 256) -> List[Tuple[str, int]]:
    """Most frequent normalized top-1 fills, to help an operator write the mapping."""
    if n <= 0:
        raise ValueError("n must be > 0")
    counts: Counter = Counter()
    chunk: List[MentionSample] = []

    def flush():
        for word in _top_words(chunk, backend):
            if word is not None:
                counts[normalize_word(word)] += 1

    for sample in samples:
        chunk.append(sample)
        if len(chunk) == chunk_size:
            flush()
            chunk = []
    if chunk:
        flush()
    # Ties in frequency are broken alphabetically for stable output
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]


@dataclass
class MappingStats:
    passed_through: int = 0
    mapped: int = 0
    unmapped: int = 0

    @property
    def unmapped_ratio(self) -> float:
        attempted = self.mapped + self.unmapped
        return self.unmapped / attempted if attempted else 0.0


def map_types(
    samples: Iterable[MentionSample],
    backend: MlmBackend,
    mapping: WordTypeMapping,
    stats: Optional[MappingStats] = None,
    chunk_size: int = 256,
) -> Iterable[MentionSample]:
    """
    Already-labeled samples pass through untouched; unlabeled ones get MLM
    path labels when their top-1 word maps, and are dropped otherwise.
    """
    stats = stats if stats is not None else MappingStats()
    chunk: List[MentionSample] = []

    def flush():
        # Input order is preserved; only unlabeled samples are sent to the backend
        pending = [s for s in chunk if not s.labels]
        words = iter(_top_words(pending, backend))
        for sample in chunk:
            if sample.labels:
                stats.passed_through += 1
                yield sample
                continue
            word = next(words)
            mapped = mapping.lookup(word) if word is not None else None
            if mapped is None:
                stats.unmapped += 1
                continue
            stats.mapped += 1
            yield sample.with_labels({p.render(): Provenance.MLM for p in expand_path(mapped)})

    for sample in samples:
        chunk.append(sample)
        if len(chunk) == chunk_size:
            yield from flush()
            chunk = []
    if chunk:
        yield from flush()
    logger.info(
        f"[FG] mapped={stats.mapped} unmapped={stats.unmapped} passed_through={stats.passed_through} "
        f"unmapped_ratio={stats.unmapped_ratio:.3f}"
    )
