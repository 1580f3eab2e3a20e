"""
Hearst-like hypernym patterns and prompt construction.

A pattern is a token template with one mention slot (M) and one hypernym
slot (H). Applying it to a sentence inserts the non-mention tokens around
the mention, with H replaced by the mask token, so every prompt carries
exactly one mask and removing the inserted tokens restores the sentence.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Sequence, Tuple, Union

from src.core.types import MentionKind, MentionSample, TypeLabelError

logger = logging.getLogger("TypeLabel.Patterns")

MASK_TOKEN = "[MASK]"
# Stands in for a mask token that was already part of the sentence
LITERAL_MASK = "_mask_"
MENTION_SLOT = "M"
HYPERNYM_SLOT = "H"

_SLOT_SPELLINGS = {
    "<M>": MENTION_SLOT, "⟨M⟩": MENTION_SLOT,
    "<H>": HYPERNYM_SLOT, "⟨H⟩": HYPERNYM_SLOT,
}

# Tokens that close the pre-modifier part of a noun phrase
HEAD_BOUNDARY_MARKERS = frozenset({
    "of", "in", "on", "at", "for", "from", "with", "by", "to", "that", "which", "who", ",",
})

HeadFinder = Callable[[Sequence[str]], int]


class PatternError(TypeLabelError):
    def __init__(self, template: str, reason: str):
        self.template = template
        self.reason = reason
        super().__init__(f"Invalid pattern '{template}': {reason}")


@dataclass(frozen=True)
class HypernymPattern:
    """
    INVARIANTS:
        - exactly one M and one H slot in template
        - mention_leading <=> template[0] is the M slot
    """
    id: str
    template: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "template", tuple(self.template))
        for slot in (MENTION_SLOT, HYPERNYM_SLOT):
            count = self.template.count(slot)
            if count != 1:
                raise PatternError(" ".join(self.template), f"expected one {slot} slot, found {count}")

    @property
    def mention_leading(self) -> bool:
        return self.template[0] == MENTION_SLOT

    @property
    def mention_position(self) -> int:
        return self.template.index(MENTION_SLOT)

    def fragments(self) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
        """Template tokens before and after M, with H replaced by the mask token."""
        masked = tuple(MASK_TOKEN if tok == HYPERNYM_SLOT else tok for tok in self.template)
        split = self.mention_position
        return masked[:split], masked[split + 1:]

    @classmethod
    def parse(cls, text: str) -> "HypernymPattern":
        """Parse a space-separated template using <M>/<H> (or ⟨M⟩/⟨H⟩, or bare M/H) slots."""
        tokens = tuple(_SLOT_SPELLINGS.get(tok, tok) for tok in text.split())
        if not tokens:
            raise PatternError(text, "empty template")
        return cls(id=" ".join(tokens), template=tokens)


@dataclass(frozen=True)
class Prompt:
    """
    An MLM input with exactly one mask token.

    `inserted` lists the half-open spans of pattern tokens added to the sentence;
    `literal_masks` the positions where a mask token of the sentence itself was
    replaced by LITERAL_MASK.
    """
    tokens: Tuple[str, ...]
    mask_index: int
    inserted: Tuple[Tuple[int, int], ...] = ()
    literal_masks: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.tokens.count(MASK_TOKEN) != 1:
            raise ValueError(f"prompt must contain exactly one {MASK_TOKEN}")
        if self.tokens[self.mask_index] != MASK_TOKEN:
            raise ValueError("mask_index does not point at the mask token")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def strip_inserted(self) -> Tuple[str, ...]:
        """Remove the inserted pattern tokens, recovering the original sentence."""
        drop = set()
        for start, end in self.inserted:
            drop.update(range(start, end))
        literal = set(self.literal_masks)
        return tuple(
            MASK_TOKEN if i in literal else tok
            for i, tok in enumerate(self.tokens) if i not in drop
        )


# Ordered by standalone dev F1 of the labels each pattern produces
_BUILTIN_TEMPLATES = (
    "M and any other H",
    "M and some other H",
    "H such as M",
    "such H as M",
    "H including M",
    "H especially M",
)

SEED_PATTERN_ID = _BUILTIN_TEMPLATES[0]


def builtin_patterns() -> List[HypernymPattern]:
    return [HypernymPattern.parse(t) for t in _BUILTIN_TEMPLATES]


def load_patterns(path: Union[str, Path]) -> List[HypernymPattern]:
    """
    Load an extended catalog: one template per line, '#' starts a comment.

    Raises:
        PatternError: invalid template or duplicate pattern
    """
    patterns: List[HypernymPattern] = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            pattern = HypernymPattern.parse(text)
            if pattern.id in seen:
                raise PatternError(text, f"duplicate pattern at {path}:{line_number}")
            seen.add(pattern.id)
            patterns.append(pattern)
    logger.info(f"[PATTERNS] Loaded {len(patterns)} patterns from {path}")
    return patterns


def head_word_index(mention_tokens: Sequence[str]) -> int:
    """
    Heuristic head of a noun phrase: the rightmost token before the first
    preposition / relative marker / comma, else the last token.
    """
    if not mention_tokens:
        raise ValueError("mention_tokens must be non-empty")
    for i, token in enumerate(mention_tokens):
        if token.lower() in HEAD_BOUNDARY_MARKERS and i > 0:
            return i - 1
    return len(mention_tokens) - 1


def build_prompt(
    sample: MentionSample,
    pattern: HypernymPattern,
    head_finder: HeadFinder = head_word_index,
) -> Prompt:
    """
    Insert the pattern around the mention.

    Mention-leading patterns put their tail right after the mention (after the
    head word for NOMINAL mentions); the others put their head fragment right
    before the mention, and any tail right after it.
    """
    before, after = pattern.fragments()
    literal = [tok == MASK_TOKEN for tok in sample.sentence]
    sentence = [LITERAL_MASK if is_mask else tok for tok, is_mask in zip(sample.sentence, literal)]
    start, end = sample.mention_start, sample.mention_end

    if pattern.mention_leading and sample.mention_kind is MentionKind.NOMINAL:
        end = start + head_finder(sample.mention_tokens) + 1

    # Splice the tail first so `start` stays valid
    tokens = sentence[:end] + list(after) + sentence[end:]
    tokens = tokens[:start] + list(before) + tokens[start:]
    flags = literal[:end] + [False] * len(after) + literal[end:]
    flags = flags[:start] + [False] * len(before) + flags[start:]

    inserted = []
    if before:
        inserted.append((start, start + len(before)))
    if after:
        tail_start = end + len(before)
        inserted.append((tail_start, tail_start + len(after)))

    return Prompt(
        tokens=tuple(tokens),
        mask_index=tokens.index(MASK_TOKEN),
        inserted=tuple(inserted),
        literal_masks=tuple(i for i, is_mask in enumerate(flags) if is_mask),
    )
