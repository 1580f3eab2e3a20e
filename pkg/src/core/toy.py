"""
============================================================================
TOY TASK: a desk-scale stand-in for ultra-fine typing
============================================================================

50 types (5 general, 10 fine, 35 ultra-fine) over 10 entity classes. Each
class owns a fixed label set, a pool of names, nominal head words and
context cue words, so a bag-of-tokens encoder can learn it in seconds.

Splits:
    human   gold labels (HUMAN)
    weak    EL labels on named mentions, HEAD labels on nominal ones,
            nothing on pronouns; MLM labels come from generate-labels
    dev     gold labels, for pattern selection and model selection
    test    gold labels

The mock masked-LM table answers every (sample, built-in pattern) prompt
with plural forms of the sample's true types, shuffled, with some dropped
and with distractors from other classes mixed in. Later patterns are
noisier than earlier ones.
============================================================================
"""

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

from src.core.brain import MaskedPrediction, prompt_key, save_mock_table
from src.core.patterns import HypernymPattern, build_prompt, builtin_patterns
from src.core.types import MentionKind, MentionSample, Provenance, TypeVocabulary
from src.memory.corpus import write_lines_atomic, write_samples

logger = logging.getLogger("TypeLabel.Toy")


@dataclass(frozen=True)
class ToyClass:
    general: str
    fine: str
    ultrafine: Tuple[str, ...]
    cues: Tuple[str, ...]
    personal: bool

    @property
    def label_set(self) -> Tuple[str, ...]:
        return (self.general, self.fine, *self.ultrafine)


TOY_CLASSES: Tuple[ToyClass, ...] = (
    ToyClass("person", "actor", ("star", "celebrity", "performer", "entertainer"),
             ("film", "starred", "role", "premiere"), True),
    ToyClass("person", "politician", ("senator", "leader", "lawmaker"),
             ("elected", "parliament", "vote", "policy"), True),
    ToyClass("person", "athlete", ("player", "champion", "runner", "sprinter"),
             ("scored", "stadium", "medal", "season"), True),
    ToyClass("organization", "company", ("firm", "brand", "corporation", "manufacturer"),
             ("shares", "profits", "merger", "products"), False),
    ToyClass("organization", "team", ("club", "squad", "franchise"),
             ("league", "coach", "fans", "trophy"), False),
    ToyClass("location", "city", ("town", "capital", "municipality"),
             ("downtown", "mayor", "residents", "streets"), False),
    ToyClass("location", "country", ("nation", "state", "republic", "territory"),
             ("border", "citizens", "government", "export"), False),
    ToyClass("event", "war", ("conflict", "battle", "campaign"),
             ("troops", "invaded", "casualties", "ceasefire"), False),
    ToyClass("event", "festival", ("celebration", "concert", "gathering"),
             ("music", "crowds", "stage", "tickets"), False),
    ToyClass("object", "vehicle", ("car", "truck", "machine", "automobile"),
             ("engine", "drove", "wheels", "fuel"), False),
)

_FILLERS = ("yesterday", "reportedly", "meanwhile", "again", "later", "recently", "often", "finally")
_ADJECTIVES = ("big", "new", "old", "famous", "local", "small", "popular", "young")
_SYLLABLES = ("ka", "lo", "mer", "vi", "dan", "tor", "sel", "bri", "no", "gar", "fen", "ru", "zal", "pim")
# Words a masked LM often proposes that are not types
_NON_TYPES = ("things", "ones", "others", "stuff")

_KIND_WEIGHTS = ((MentionKind.NAMED, 0.4), (MentionKind.NOMINAL, 0.35), (MentionKind.PRONOUN, 0.25))


def plural(word: str) -> str:
    if word == "person":
        return "people"
    if word.endswith("y") and word[-2:-1] not in "aeiou":
        return word[:-1] + "ies"
    return word + "s"


def build_toy_vocabulary() -> TypeVocabulary:
    general = list(dict.fromkeys(c.general for c in TOY_CLASSES))
    fine = [c.fine for c in TOY_CLASSES]
    ultrafine = [t for c in TOY_CLASSES for t in c.ultrafine]
    return TypeVocabulary.build(general + fine + ultrafine, general=general, fine=fine)


@dataclass
class ToyTask:
    vocab: TypeVocabulary
    human: List[MentionSample]
    weak: List[MentionSample]
    dev: List[MentionSample]
    test: List[MentionSample]
    mock_table: Dict[str, MaskedPrediction] = field(default_factory=dict)


class _Generator:
    def __init__(self, seed: int):
        self.rng = random.Random(seed)
        self.names = [self._names(i) for i in range(len(TOY_CLASSES))]

    def _names(self, class_id: int) -> List[Tuple[str, ...]]:
        rng = random.Random(1000 + class_id)
        pool = []
        for _ in range(6):
            first = "".join(rng.choice(_SYLLABLES) for _ in range(2)).capitalize()
            last = "".join(rng.choice(_SYLLABLES) for _ in range(3)).capitalize()
            pool.append((first, last) if TOY_CLASSES[class_id].personal else (first + last,))
        return pool

    def kind(self) -> MentionKind:
        roll = self.rng.random()
        for kind, weight in _KIND_WEIGHTS:
            if roll < weight:
                return kind
            roll -= weight
        return _KIND_WEIGHTS[-1][0]

    def mention(self, class_id: int, kind: MentionKind) -> Tuple[str, ...]:
        spec = TOY_CLASSES[class_id]
        if kind is MentionKind.NAMED:
            return self.rng.choice(self.names[class_id])
        if kind is MentionKind.NOMINAL:
            head = self.rng.choice((spec.fine, *spec.ultrafine))
            return ("the", self.rng.choice(_ADJECTIVES), head)
        return (self.rng.choice(("he", "she")),) if spec.personal else ("it",)

    def context(self, class_id: int) -> Tuple[Tuple[str, ...], Tuple[str, ...]]:
        cues = self.rng.sample(TOY_CLASSES[class_id].cues, 3)
        if self.rng.random() < 0.1:
            other = self.rng.choice([c for i, c in enumerate(TOY_CLASSES) if i != class_id])
            cues[self.rng.randrange(3)] = self.rng.choice(other.cues)
        left = (self.rng.choice(_FILLERS).capitalize(), cues[0])
        right = (self.rng.choice(_FILLERS), cues[1], "and", cues[2], ".")
        return left, right

    def draw(self, gold: bool) -> Tuple[MentionSample, int]:
        class_id = self.rng.randrange(len(TOY_CLASSES))
        kind = self.kind()
        mention = self.mention(class_id, kind)
        left, right = self.context(class_id)
        spec = TOY_CLASSES[class_id]
        if gold:
            sources = {t: Provenance.HUMAN for t in spec.label_set}
        elif kind is MentionKind.NAMED:
            sources = {spec.general: Provenance.EL, spec.fine: Provenance.EL}
        elif kind is MentionKind.NOMINAL:
            sources = {mention[-1]: Provenance.HEAD}
        else:
            sources = {}
        return MentionSample.labeled(left, mention, right, kind, sources), class_id


def _mock_fill(rng: random.Random, class_id: int, noise: float, keep: float) -> MaskedPrediction:
    spec = TOY_CLASSES[class_id]
    words = [plural(t) for t in spec.label_set if rng.random() < keep]
    rng.shuffle(words)
    others = [t for i, c in enumerate(TOY_CLASSES) if i != class_id for t in c.ultrafine]
    while rng.random() < noise:
        distractor = plural(rng.choice(others))
        if distractor not in words:
            words.insert(rng.randrange(len(words) + 1), distractor)
    words.insert(rng.randrange(len(words) + 1), rng.choice(_NON_TYPES))
    return MaskedPrediction.from_words(words)


def toy_mock_table(
    draws: Sequence[Tuple[MentionSample, int]],
    patterns: Sequence[HypernymPattern],
    seed: int,
    noise: float = 0.15,
) -> Dict[str, MaskedPrediction]:
    rng = random.Random(seed)
    table: Dict[str, MaskedPrediction] = {}
    for sample, class_id in draws:
        for j, pattern in enumerate(patterns):
            key = prompt_key(build_prompt(sample, pattern))
            table[key] = _mock_fill(rng, class_id, noise + 0.05 * j, keep=0.85 - 0.05 * j)
    return table


def make_toy_task(
    seed: int = 13,
    n_human: int = 300,
    n_weak: int = 800,
    n_dev: int = 100,
    n_test: int = 100,
    noise: float = 0.15,
) -> ToyTask:
    generator = _Generator(seed)
    human = [generator.draw(gold=True) for _ in range(n_human)]
    weak = [generator.draw(gold=False) for _ in range(n_weak)]
    dev = [generator.draw(gold=True) for _ in range(n_dev)]
    test = [generator.draw(gold=True) for _ in range(n_test)]
    table = toy_mock_table(weak + dev + test + human, builtin_patterns(), seed + 7, noise)
    logger.info(
        f"[TOY] {n_human} human, {n_weak} weak, {n_dev} dev, {n_test} test samples; {len(table)} mock prompts"
    )
    return ToyTask(
        vocab=build_toy_vocabulary(),
        human=[s for s, _ in human],
        weak=[s for s, _ in weak],
        dev=[s for s, _ in dev],
        test=[s for s, _ in test],
        mock_table=table,
    )


def toy_config(directory: Path, seed: int = 13) -> Dict:
    """Pipeline config for a written toy task; every path is absolute."""
    d = directory.resolve()
    train = {"lr": 0.01, "batch_size": 32, "steps": 300, "seed": seed, "checkpoint_every": 100, "log_every": 50}
    return {
        "seed": seed,
        "paths": {
            "vocab": str(d / "types.txt"),
            "general": str(d / "general.txt"),
            "fine": str(d / "fine.txt"),
            "input_samples": str(d / "weak.jsonl"),
            "labeled_output": str(d / "weak_labeled.jsonl"),
            "human": str(d / "human.jsonl"),
            "weak": str(d / "weak_labeled.jsonl"),
            "dev": str(d / "dev.jsonl"),
            "test": str(d / "test.jsonl"),
            "pattern_list": str(d / "patterns.json"),
            "h_dir": str(d / "runs" / "h"),
            "m_dir": str(d / "runs" / "m"),
            "student_dir": str(d / "runs" / "student"),
            "eval_checkpoint": str(d / "runs" / "student"),
            "eval_output": str(d / "runs" / "eval"),
        },
        "labeling": {"k": 10, "top_n": 50, "single_pattern": True},
        "backend": {"kind": "mock", "mock_table": str(d / "mock_table.jsonl")},
        "model": {"encoder": "stub", "hidden_size": 64},
        "pretrain": dict(train),
        "finetune": dict(train),
        "selftrain": dict(train),
    }


def write_toy_task(task: ToyTask, directory: Union[str, Path], seed: int = 13) -> Path:
    """Write vocabulary lists, splits, mock table and config.json. Returns the config path."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_lines_atomic(out / "types.txt", task.vocab.all_types)
    write_lines_atomic(out / "general.txt", sorted(task.vocab.general))
    write_lines_atomic(out / "fine.txt", sorted(task.vocab.fine))
    for name in ("human", "weak", "dev", "test"):
        write_samples(out / f"{name}.jsonl", getattr(task, name))
    save_mock_table(out / "mock_table.jsonl", task.mock_table)
    config_path = out / "config.json"
    write_lines_atomic(config_path, [json.dumps(toy_config(out, seed), indent=2)])
    logger.info(f"[TOY] Toy task written to {out}")
    return config_path
