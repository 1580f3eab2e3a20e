from typing import Dict, List, Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.types import MentionKind, MentionSample, Provenance


class SampleRecord(BaseModel):
    """
    Wire form of one MentionSample: a single JSON object per line.

    Token lists are explicit so labeling and training never re-tokenize.
    """
    model_config = ConfigDict(extra="ignore")

    left_context: List[str]
    mention_tokens: List[str] = Field(min_length=1)
    right_context: List[str]
    mention_kind: Literal["NAMED", "PRONOUN", "NOMINAL"]
    labels: List[str]
    label_sources: Dict[str, Literal["HUMAN", "EL", "HEAD", "MLM"]]

    @model_validator(mode="after")
    def _labels_match_sources(self) -> "SampleRecord":
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels contains duplicates")
        if set(self.labels) != set(self.label_sources):
            diff = sorted(set(self.labels).symmetric_difference(self.label_sources))
            raise ValueError(f"labels and label_sources disagree on {diff}")
        return self

    def to_sample(self) -> MentionSample:
        return MentionSample(
            left_context=tuple(self.left_context),
            mention_tokens=tuple(self.mention_tokens),
            right_context=tuple(self.right_context),
            mention_kind=MentionKind(self.mention_kind),
            labels=frozenset(self.labels),
            label_sources={t: Provenance(src) for t, src in self.label_sources.items()},
        )

    @classmethod
    def from_sample(cls, sample: MentionSample) -> "SampleRecord":
        # Sorted labels keep output files byte-stable across runs
        labels = sorted(sample.labels)
        return cls(
            left_context=list(sample.left_context),
            mention_tokens=list(sample.mention_tokens),
            right_context=list(sample.right_context),
            mention_kind=sample.mention_kind.value,
            labels=labels,
            label_sources={t: sample.label_sources[t].value for t in labels},
        )
