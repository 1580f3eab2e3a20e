import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, FrozenSet, Iterable, Iterator, List, Mapping, Tuple


class TypeLabelError(Exception):
    """Base class for every pipeline error. The CLI maps subclasses to exit codes."""


class ConfigurationError(TypeLabelError):
    """Invalid configuration value, unknown component kind, or missing stage input."""
    def __init__(self, key: str, reason: str):
        self.key = key
        self.reason = reason
        super().__init__(f"Configuration error at '{key}': {reason}")


class VocabularyMismatchError(TypeLabelError):
    """
    Raised when samples, checkpoints or predictions disagree with the
    configured type vocabulary.
    """
    def __init__(self, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(
            f"Vocabulary mismatch: expected {expected}, found {found}. "
            f"Refusing to mix artifacts built on different type sets."
        )


class MentionKind(Enum):
    NAMED = "NAMED"
    PRONOUN = "PRONOUN"
    NOMINAL = "NOMINAL"


class Provenance(Enum):
    """
    Source tag of a label. Precedence when one type arrives from several
    sources: HUMAN > EL > HEAD > MLM.
    """
    HUMAN = "HUMAN"
    EL = "EL"
    HEAD = "HEAD"
    MLM = "MLM"

    @property
    def rank(self) -> int:
        return _PROVENANCE_RANK[self]

    @property
    def is_strong(self) -> bool:
        # Positives that receive alpha_strong in the weighted loss
        return self in (Provenance.EL, Provenance.HEAD)


_PROVENANCE_RANK = {
    Provenance.HUMAN: 3,
    Provenance.EL: 2,
    Provenance.HEAD: 1,
    Provenance.MLM: 0,
}


@dataclass(frozen=True)
class MentionSample:
    """
    One mention in context plus its provenance-tagged label set.

    INVARIANTS:
        - mention_tokens is non-empty
        - labels == set(label_sources)
    """
    left_context: Tuple[str, ...]
    mention_tokens: Tuple[str, ...]
    right_context: Tuple[str, ...]
    mention_kind: MentionKind
    labels: FrozenSet[str] = frozenset()
    label_sources: Mapping[str, Provenance] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "left_context", tuple(self.left_context))
        object.__setattr__(self, "mention_tokens", tuple(self.mention_tokens))
        object.__setattr__(self, "right_context", tuple(self.right_context))
        object.__setattr__(self, "labels", frozenset(self.labels))
        object.__setattr__(self, "label_sources", dict(self.label_sources))
        if not self.mention_tokens:
            raise ValueError("mention_tokens must be non-empty")
        if set(self.label_sources) != self.labels:
            missing = sorted(self.labels.symmetric_difference(self.label_sources))
            raise ValueError(f"labels and label_sources disagree on: {missing}")

    @classmethod
    def labeled(
        cls,
        left_context: Iterable[str],
        mention_tokens: Iterable[str],
        right_context: Iterable[str],
        mention_kind: MentionKind,
        label_sources: Mapping[str, Provenance],
    ) -> "MentionSample":
        """Factory deriving `labels` from the provenance map."""
        return cls(
            left_context=tuple(left_context),
            mention_tokens=tuple(mention_tokens),
            right_context=tuple(right_context),
            mention_kind=mention_kind,
            labels=frozenset(label_sources),
            label_sources=dict(label_sources),
        )

    @property
    def sentence(self) -> Tuple[str, ...]:
        return self.left_context + self.mention_tokens + self.right_context

    @property
    def mention_start(self) -> int:
        return len(self.left_context)

    @property
    def mention_end(self) -> int:
        return len(self.left_context) + len(self.mention_tokens)

    def strong_labels(self) -> FrozenSet[str]:
        return frozenset(t for t, src in self.label_sources.items() if src.is_strong)

    def with_labels(self, label_sources: Mapping[str, Provenance]) -> "MentionSample":
        return replace(self, labels=frozenset(label_sources), label_sources=dict(label_sources))


@dataclass(frozen=True)
class TypeVocabulary:
    """
    The full type set partitioned into general / fine / ultra-fine tiers.

    INVARIANTS:
        - general, fine, ultrafine are pairwise disjoint and cover all_types
        - index is a bijection onto [0, len(all_types))
    """
    all_types: Tuple[str, ...]
    general: FrozenSet[str]
    fine: FrozenSet[str]
    ultrafine: FrozenSet[str]
    index: Mapping[str, int] = field(hash=False, compare=False)

    def __post_init__(self):
        if len(set(self.all_types)) != len(self.all_types):
            raise ValueError("all_types contains duplicates")
        tiers = (self.general, self.fine, self.ultrafine)
        if sum(len(t) for t in tiers) != len(self.all_types):
            raise ValueError("partition sizes do not add up to the vocabulary size")
        if frozenset().union(*tiers) != frozenset(self.all_types):
            raise ValueError("partition union differs from all_types")

    @classmethod
    def build(
        cls,
        all_types: Iterable[str],
        general: Iterable[str] = (),
        fine: Iterable[str] = (),
    ) -> "TypeVocabulary":
        ordered = tuple(all_types)
        general_set = frozenset(general)
        fine_set = frozenset(fine)
        overlap = general_set & fine_set
        if overlap:
            raise ValueError(f"types listed as both general and fine: {sorted(overlap)}")
        ultrafine = frozenset(ordered) - general_set - fine_set
        return cls(
            all_types=ordered,
            general=general_set,
            fine=fine_set,
            ultrafine=ultrafine,
            index={t: i for i, t in enumerate(ordered)},
        )

    def __len__(self) -> int:
        return len(self.all_types)

    def __contains__(self, type_name: object) -> bool:
        return type_name in self.index

    def __iter__(self) -> Iterator[str]:
        return iter(self.all_types)

    def partitions(self) -> List[Tuple[str, FrozenSet[str]]]:
        """The three tiers in objective order."""
        return [("general", self.general), ("fine", self.fine), ("ultrafine", self.ultrafine)]

    def partition_of(self, type_name: str) -> str:
        for name, members in self.partitions():
            if type_name in members:
                return name
        raise KeyError(type_name)

    def fingerprint(self) -> str:
        """Stable hash of the ordered types and their tiers; stored in checkpoints."""
        digest = hashlib.sha256()
        for type_name in self.all_types:
            digest.update(f"{self.partition_of(type_name)}\t{type_name}\n".encode("utf-8"))
        return digest.hexdigest()

    def check_labels(self, sample: MentionSample) -> None:
        unknown = sorted(t for t in sample.labels if t not in self.index)
        if unknown:
            raise VocabularyMismatchError(
                expected=f"labels from vocabulary {self.fingerprint()[:12]}",
                found=f"unknown types {unknown[:5]}",
            )


def merge_label_sources(sample: MentionSample, mlm_labels: Iterable[str]) -> MentionSample:
    """
    Union the MLM-generated types into the sample's label set.

    New types are tagged MLM; a type already present keeps its stronger tag.
    Pronoun mentions keep MLM labels only.
    """
    if sample.mention_kind is MentionKind.PRONOUN:
        merged: Dict[str, Provenance] = {
            t: src for t, src in sample.label_sources.items() if src is Provenance.MLM
        }
    else:
        merged = dict(sample.label_sources)
    for type_name in mlm_labels:
        current = merged.get(type_name)
        if current is None or Provenance.MLM.rank > current.rank:
            merged[type_name] = Provenance.MLM
    return sample.with_labels(merged)
