"""
============================================================================
CORPUS: On-disk formats shared by every pipeline stage
============================================================================

Formats:
    - Samples:    one JSON object per line (see SampleRecord), UTF-8
    - Vocabulary: one type per line; separate files for general/fine tiers
    - Lexicon:    one pronoun per line
    - Raw text:   one sentence per line, tokenized on load

Writes are atomic: a temp file is fsynced and renamed over the target, so a
crashed stage never leaves a half-written sample file behind.
============================================================================
"""

import json
import logging
import os
import re
import tempfile
from pathlib import Path
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Set, Union

from pydantic import ValidationError

from src.core.types import MentionKind, MentionSample, TypeLabelError, TypeVocabulary
from src.memory.schema import SampleRecord

logger = logging.getLogger("TypeLabel.Corpus")

PathLike = Union[str, Path]

DEFAULT_PRONOUNS = ("he", "she", "it", "they", "him", "her", "them", "i", "we", "you")

_TOKEN_RE = re.compile(r"\w+(?:['’-]\w+)*|[^\w\s]")


class CorpusFormatError(TypeLabelError):
    """Raised for malformed plain-text artifacts (vocabulary, lexicon, patterns, mappings)."""
    def __init__(self, path: PathLike, line_number: Optional[int], reason: str):
        self.path = str(path)
        self.line_number = line_number
        self.reason = reason
        where = f"{self.path}:{line_number}" if line_number else self.path
        super().__init__(f"Format error in {where}: {reason}")


class SampleParseError(TypeLabelError):
    """Raised for a sample record that cannot be parsed; names the offending field."""
    def __init__(self, path: PathLike, line_number: int, field: str, reason: str):
        self.path = str(path)
        self.line_number = line_number
        self.field = field
        self.reason = reason
        super().__init__(f"Parse error in {self.path}:{line_number} (field '{field}'): {reason}")


# =============================================================================
# PLAIN TEXT LISTS
# =============================================================================

def _utf8_lines(path: PathLike, bad_line: Callable[[int], TypeLabelError]) -> Iterator[tuple]:
    """
    (line_number, text) for every line. Lines are decoded one at a time so
    a bad byte is reported as bad_line(line_number).
    """
    with open(path, "rb") as f:
        for line_number, raw in enumerate(f, start=1):
            try:
                text = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise bad_line(line_number) from e
            yield line_number, text


def _read_list(path: PathLike) -> List[tuple]:
    """(line_number, entry) pairs for non-blank lines."""
    entries = []
    for line_number, line in _utf8_lines(path, lambda n: CorpusFormatError(path, n, "invalid UTF-8")):
        entry = line.strip()
        if entry:
            entries.append((line_number, entry))
    return entries


def load_vocabulary(vocab_file: PathLike, general_file: PathLike, fine_file: PathLike) -> TypeVocabulary:
    """
    Load the type vocabulary and partition it.

    ultrafine = all \\ (general | fine)

    Raises:
        CorpusFormatError: duplicate type, or a general/fine entry missing from the vocabulary
    """
    all_types: List[str] = []
    seen: Set[str] = set()
    for line_number, type_name in _read_list(vocab_file):
        if type_name in seen:
            raise CorpusFormatError(vocab_file, line_number, f"duplicate type '{type_name}'")
        seen.add(type_name)
        all_types.append(type_name)

    tiers = []
    for tier_file in (general_file, fine_file):
        members: Set[str] = set()
        for line_number, type_name in _read_list(tier_file):
            if type_name not in seen:
                raise CorpusFormatError(tier_file, line_number, f"type '{type_name}' is not in {vocab_file}")
            if type_name in members:
                raise CorpusFormatError(tier_file, line_number, f"duplicate type '{type_name}'")
            members.add(type_name)
        tiers.append(members)

    overlap = tiers[0] & tiers[1]
    if overlap:
        raise CorpusFormatError(fine_file, None, f"types listed as both general and fine: {sorted(overlap)[:5]}")

    vocab = TypeVocabulary.build(all_types, general=tiers[0], fine=tiers[1])
    logger.info(
        f"[CORPUS] Vocabulary loaded: {len(vocab)} types "
        f"(general={len(vocab.general)}, fine={len(vocab.fine)}, ultrafine={len(vocab.ultrafine)})"
    )
    return vocab


def load_pronoun_lexicon(path: Optional[PathLike] = None) -> Set[str]:
    """Lowercased pronoun set; the English default list when no file is given."""
    if path is None:
        return set(DEFAULT_PRONOUNS)
    lexicon = {entry.lower() for _, entry in _read_list(path)}
    if not lexicon:
        raise CorpusFormatError(path, None, "pronoun lexicon is empty")
    return lexicon


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text)


def read_sentences(path: PathLike) -> Iterator[List[str]]:
    """One tokenized sentence per non-blank line."""
    for _, line in _read_list(path):
        yield tokenize(line)


# =============================================================================
# SAMPLE RECORDS
# =============================================================================

def _parse_record(path: PathLike, line_number: int, line: str) -> MentionSample:
    try:
        payload = json.loads(line)
    except json.JSONDecodeError as e:
        raise SampleParseError(path, line_number, "<record>", f"invalid JSON: {e.msg}") from e
    if not isinstance(payload, dict):
        raise SampleParseError(path, line_number, "<record>", "record is not a JSON object")
    try:
        return SampleRecord.model_validate(payload).to_sample()
    except ValidationError as e:
        first = e.errors()[0]
        loc = first.get("loc") or ("<record>",)
        field = str(loc[0]) if loc else "<record>"
        if first.get("type") == "missing":
            reason = "missing required field"
        else:
            reason = first.get("msg", "invalid value")
        if field == "<record>" or not loc:
            # model-level validators report an empty location
            field = "labels"
        raise SampleParseError(path, line_number, field, reason) from e


def read_samples(path: PathLike) -> Iterator[MentionSample]:
    """
    Stream samples in file order.

    Raises:
        SampleParseError: on the first malformed record, with its line number
    """
    for line_number, line in _utf8_lines(path, lambda n: SampleParseError(path, n, "<record>", "invalid UTF-8")):
        if line.strip():
            yield _parse_record(path, line_number, line)


def dump_sample(sample: MentionSample) -> str:
    return json.dumps(SampleRecord.from_sample(sample).model_dump(), ensure_ascii=False)


def write_lines_atomic(path: PathLike, lines: Iterable[str]) -> int:
    """Write lines to path through a fsynced temp file. Returns the line count."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    count = 0
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            for line in lines:
                f.write(line)
                f.write("\n")
                count += 1
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return count


def write_samples(path: PathLike, samples: Iterable[MentionSample]) -> int:
    """Inverse of read_samples. Returns the number of records written."""
    count = write_lines_atomic(path, (dump_sample(s) for s in samples))
    logger.info(f"[CORPUS] Wrote {count} samples to {path}")
    return count


# =============================================================================
# PRONOUN MENTIONS
# =============================================================================

def extract_pronoun_mentions(
    sentences: Iterable[Sequence[str]],
    lexicon: Optional[Set[str]] = None,
) -> Iterator[MentionSample]:
    """
    One unlabeled PRONOUN sample per lexicon match, the whole sentence as context.

    Matching is case-insensitive, so the lexicon covers case variants.
    """
    pronouns = {p.lower() for p in (lexicon if lexicon is not None else DEFAULT_PRONOUNS)}
    if not pronouns:
        raise ValueError("pronoun lexicon must be non-empty")
    for tokens in sentences:
        tokens = list(tokens)
        for i, token in enumerate(tokens):
            if token.lower() in pronouns:
                yield MentionSample(
                    left_context=tuple(tokens[:i]),
                    mention_tokens=(token,),
                    right_context=tuple(tokens[i + 1:]),
                    mention_kind=MentionKind.PRONOUN,
                )
