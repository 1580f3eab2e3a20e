"""
============================================================================
TRAINING: objectives and the three-stage schedule
============================================================================

    pretrain   (weak data)   J(x) = sum_T L(x, T) * 1[labels(x) meets T]
                             L = alpha-weighted BCE; alpha = alpha_strong on
                             EL/HEAD positives, 1 elsewhere
    finetune   (human data)  same partition gating, plain BCE
    self_train (human + weak)
                             J_ST = mean_H J(x) + lambda * mean_A L_ST(x)
                             L_ST = BCE restricted to teacher pseudo labels

The partition gate skips tiers the sample has no label in, so a weak sample
labeled only with general types is not pushed away from every fine type.

Batches are a pure function of (seed, step), so a run resumed from a
checkpoint replays the same batches as an uninterrupted run.
============================================================================
"""

import copy
import functools
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import psutil
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.core.model import TypingModel, load_checkpoint, save_checkpoint
from src.core.types import MentionSample, TypeLabelError, TypeVocabulary, VocabularyMismatchError

logger = logging.getLogger("TypeLabel.Training")

EPS = 1e-7
CURVE_FILE = "curve.jsonl"
TEACHER_CACHE_FILE = "teacher_probs.pt"


class LossDomainError(TypeLabelError):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"Loss domain error: {reason}")


# =============================================================================
# CONFIG
# =============================================================================

class LossConfig(BaseModel):
    """
    alpha_strong: weight of EL/HEAD positives (> 1)
    lambda_:      self-training strength (config key "lambda")
    P, P_w:       pseudo-label thresholds, 0.5 < P <= 1, 1 - P < P_w <= P
    weighted:     False drops alpha entirely (unweighted-loss ablation)
    partitioned:  False trains with flat BCE over all types
    """
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    alpha_strong: float = Field(5.0, gt=1.0)
    lambda_: float = Field(0.01, ge=0.0, alias="lambda")
    P: float = 0.9
    P_w: float = 0.7
    weighted: bool = True
    partitioned: bool = True

    @model_validator(mode="after")
    def _thresholds(self) -> "LossConfig":
        if not 0.5 < self.P <= 1.0:
            raise ValueError("P must lie in (0.5, 1]")
        if not 0.0 < self.P_w <= self.P:
            raise ValueError("P_w must lie in (0, P]")
        if self.P_w <= 1.0 - self.P:
            raise ValueError("P_w must exceed 1 - P so pseudo positives and negatives stay disjoint")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(0.01, gt=0.0)
    batch_size: int = Field(32, gt=0)
    steps: int = Field(300, ge=0)
    seed: int = 13
    checkpoint_every: int = Field(100, gt=0)
    log_every: int = Field(25, gt=0)
    weight_decay: float = Field(0.0, ge=0.0)


# =============================================================================
# TARGETS AND MASKS
# =============================================================================

def targets(samples: Sequence[MentionSample], vocab: TypeVocabulary, dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    """(Y, S): Y[b, t] = 1 for labels, S[b, t] = 1 for EL/HEAD positives."""
    y = torch.zeros(len(samples), len(vocab), dtype=dtype)
    strong = torch.zeros(len(samples), len(vocab), dtype=dtype)
    for b, sample in enumerate(samples):
        for type_name in sample.labels:
            y[b, vocab.index[type_name]] = 1.0
        for type_name in sample.strong_labels():
            strong[b, vocab.index[type_name]] = 1.0
    return y, strong


@functools.lru_cache(maxsize=8)
def _partition_masks_cached(vocab: TypeVocabulary) -> torch.Tensor:
    masks = torch.zeros(3, len(vocab))
    for row, (_, members) in enumerate(vocab.partitions()):
        for type_name in members:
            masks[row, vocab.index[type_name]] = 1.0
    return masks


def partition_masks(vocab: TypeVocabulary, dtype=torch.float32) -> torch.Tensor:
    """[3, d] membership masks for general / fine / ultrafine."""
    return _partition_masks_cached(vocab).to(dtype)


def type_mask(types: Iterable[str], vocab: TypeVocabulary, dtype=torch.float32) -> torch.Tensor:
    mask = torch.zeros(len(vocab), dtype=dtype)
    for type_name in types:
        mask[vocab.index[type_name]] = 1.0
    return mask


def _checked(p: torch.Tensor) -> torch.Tensor:
    """Reject probabilities outside [0, 1]; clamp to [EPS, 1 - EPS] so logs stay finite."""
    if not torch.isfinite(p).all():
        raise LossDomainError("probabilities must be finite")
    if (p < 0).any() or (p > 1).any():
        raise LossDomainError("probabilities must lie in [0, 1]")
    return p.clamp(EPS, 1.0 - EPS)


def _bce_terms(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = _checked(p)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p))


# =============================================================================
# PER-SAMPLE OBJECTIVES
# =============================================================================

def partition_indicator(labels: Iterable[str], partition: Iterable[str]) -> int:
    """1 iff the label set meets the partition."""
    return int(bool(set(labels) & set(partition)))


def weighted_partition_bce(
    sample: MentionSample,
    p: torch.Tensor,
    partition: Iterable[str],
    vocab: TypeVocabulary,
    alpha_strong: float = 5.0,
) -> torch.Tensor:
    """-sum_{t in T} alpha(t) [y_t log p_t + (1 - y_t) log(1 - p_t)]"""
    y, strong = targets([sample], vocab, dtype=p.dtype)
    alpha = 1.0 + (alpha_strong - 1.0) * strong[0] * y[0]
    mask = type_mask(partition, vocab, dtype=p.dtype)
    return (alpha * _bce_terms(p, y[0]) * mask).sum()


def plain_bce(sample: MentionSample, p: torch.Tensor, partition: Iterable[str], vocab: TypeVocabulary) -> torch.Tensor:
    return weighted_partition_bce(sample, p, partition, vocab, alpha_strong=1.0)


PartitionLoss = Callable[[MentionSample, torch.Tensor, Iterable[str], TypeVocabulary], torch.Tensor]


def partitioned_objective(sample: MentionSample, p: torch.Tensor, vocab: TypeVocabulary, loss_fn: PartitionLoss = plain_bce) -> torch.Tensor:
    """J(x) = sum over tiers T of L(x, T) * indicator(labels, T)"""
    total = torch.zeros((), dtype=p.dtype)
    for _, members in vocab.partitions():
        if partition_indicator(sample.labels, members):
            total = total + loss_fn(sample, p, members, vocab)
    return total


def batch_objective(
    p: torch.Tensor,
    y: torch.Tensor,
    strong: torch.Tensor,
    vocab: TypeVocabulary,
    alpha_strong: float = 1.0,
    partitioned: bool = True,
) -> torch.Tensor:
    """Vectorized partitioned objective; one value per row of p."""
    terms = _bce_terms(p, y)
    if alpha_strong != 1.0:
        terms = terms * (1.0 + (alpha_strong - 1.0) * strong * y)
    if partitioned:
        masks = partition_masks(vocab, dtype=p.dtype)
        gate = ((y @ masks.T) > 0).to(p.dtype) @ masks
        terms = terms * gate
    return terms.sum(dim=-1)


# =============================================================================
# SELF-TRAINING
# =============================================================================

@dataclass(frozen=True)
class PseudoLabels:
    positives: frozenset
    negatives: frozenset


def pseudo_label_sets(
    p_teacher: torch.Tensor,
    weak_labels: Iterable[str],
    vocab: TypeVocabulary,
    P: float = 0.9,
    P_w: float = 0.7,
) -> PseudoLabels:
    """
    positives = {t : p_t > P} | {t in weak labels : p_t > P_w}
    negatives = {t : p_t < 1 - P}
    """
    if not 0.5 < P <= 1.0 or not 1.0 - P < P_w <= P:
        raise ValueError("thresholds must satisfy 0.5 < P <= 1 and 1 - P < P_w <= P")
    probs = p_teacher.tolist()
    weak = set(weak_labels)
    positives = {
        t for t, x in zip(vocab.all_types, probs)
        if x > P or (t in weak and x > P_w)
    }
    negatives = {t for t, x in zip(vocab.all_types, probs) if x < 1.0 - P}
    return PseudoLabels(frozenset(positives), frozenset(negatives))


def pseudo_label_masks(p_teacher: torch.Tensor, weak_y: torch.Tensor, P: float, P_w: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Batched pseudo_label_sets as [B, d] positive / negative masks."""
    positives = (p_teacher > P) | ((weak_y > 0) & (p_teacher > P_w))
    negatives = p_teacher < 1.0 - P
    return positives.to(p_teacher.dtype), negatives.to(p_teacher.dtype)


def self_training_loss(p_student: torch.Tensor, pseudo: PseudoLabels, vocab: TypeVocabulary) -> torch.Tensor:
    """-sum_{t in Y+} log p_t - sum_{t in Y-} log(1 - p_t)"""
    overlap = pseudo.positives & pseudo.negatives
    if overlap:
        raise LossDomainError(f"pseudo positives and negatives overlap on {sorted(overlap)[:5]}")
    pos = type_mask(pseudo.positives, vocab, dtype=p_student.dtype)
    neg = type_mask(pseudo.negatives, vocab, dtype=p_student.dtype)
    return batch_self_training_loss(p_student.unsqueeze(0), pos.unsqueeze(0), neg.unsqueeze(0))[0]


def batch_self_training_loss(p: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    if ((pos > 0) & (neg > 0)).any():
        raise LossDomainError("pseudo positives and negatives overlap")
    p = _checked(p)
    return -(pos * torch.log(p) + neg * torch.log(1.0 - p)).sum(dim=-1)


def self_training_objective(
    batch_h: Sequence[MentionSample],
    batch_a: Sequence[MentionSample],
    model: TypingModel,
    teacher: Union[TypingModel, torch.Tensor],
    cfg: LossConfig,
) -> torch.Tensor:
    """
    J_ST = mean_H J(x) + lambda * mean_A L_ST(x), with J on human data
    using plain BCE. `teacher` is the fine-tuned model or its cached
    probabilities for batch_a.
    """
    if not batch_h or not batch_a:
        raise TypeLabelError("self-training needs non-empty human and automatic batches")
    vocab = model.vocab
    y_h, strong_h = targets(batch_h, vocab)
    human = batch_objective(model(batch_h), y_h, strong_h, vocab, alpha_strong=1.0, partitioned=cfg.partitioned).mean()

    if isinstance(teacher, torch.Tensor):
        p_teacher = teacher
    else:
        p_teacher = teacher.probabilities(list(batch_a))
    weak_y, _ = targets(batch_a, vocab, dtype=p_teacher.dtype)
    pos, neg = pseudo_label_masks(p_teacher, weak_y, cfg.P, cfg.P_w)
    auto = batch_self_training_loss(model(batch_a), pos.to(torch.float32), neg.to(torch.float32)).mean()
    return human + cfg.lambda_ * auto


# =============================================================================
# BATCH SCHEDULE
# =============================================================================

class BatchSchedule:
    """
    Deterministic shuffled batches: batch(step) depends only on (seed, step).
    """
    def __init__(self, size: int, batch_size: int, seed: int):
        if size <= 0:
            raise TypeLabelError("cannot train on an empty sample set")
        self.size = size
        self.batch_size = min(batch_size, size)
        self.seed = seed
        self.per_epoch = math.ceil(size / self.batch_size)
        self._epoch = -1
        self._order: List[int] = []

    def indices(self, step: int) -> List[int]:
        epoch, j = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            generator = torch.Generator().manual_seed(self.seed * 1_000_003 + epoch)
            self._order = torch.randperm(self.size, generator=generator).tolist()
            self._epoch = epoch
        return self._order[j * self.batch_size:(j + 1) * self.batch_size]


# =============================================================================
# TRAINING LOOP
# =============================================================================

def _check_vocabulary(samples: Sequence[MentionSample], vocab: TypeVocabulary) -> None:
    for sample in samples:
        vocab.check_labels(sample)


def _append_curve(checkpoint_dir: Optional[Path], row: Dict) -> None:
    if checkpoint_dir is None:
        return
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    with open(checkpoint_dir / CURVE_FILE, "a", encoding="utf-8") as f:
        f.write(json.dumps(row) + "\n")


def _run(
    stage: str,
    model: TypingModel,
    step_loss: Callable[[int], torch.Tensor],
    cfg: TrainConfig,
    checkpoint_dir: Optional[Union[str, Path]],
    resume: bool,
) -> TypingModel:
    out = Path(checkpoint_dir) if checkpoint_dir else None
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    start = 0

    if resume and out is not None and (out / "config.json").exists():
        restored, trainer = load_checkpoint(out, model.vocab)
        if trainer and trainer.get("stage") == stage:
            model.load_state_dict(restored.state_dict())
            optimizer.load_state_dict(trainer["optimizer"])
            start = int(trainer["step"])
            logger.info(f"[TRAIN] Resuming {stage} at step {start}")

    # A fresh run owns the curve; only a resumed run continues it
    if start == 0 and out is not None:
        (out / CURVE_FILE).unlink(missing_ok=True)

    process = psutil.Process()
    began = time.time()
    model.train()
    for step in range(start, cfg.steps):
        optimizer.zero_grad()
        loss = step_loss(step)
        loss.backward()
        optimizer.step()

        done = step + 1
        if done % cfg.log_every == 0 or done == cfg.steps:
            row = {
                "stage": stage,
                "step": done,
                "loss": float(loss.detach()),
                "lr": cfg.lr,
                "elapsed_s": round(time.time() - began, 3),
                "rss_mb": round(process.memory_info().rss / 1024 / 1024, 1),
            }
            _append_curve(out, row)
            logger.info(f"[TRAIN] {stage} step {done}/{cfg.steps} loss={row['loss']:.5f}")
        if out is not None and (done % cfg.checkpoint_every == 0 or done == cfg.steps):
            save_checkpoint(model, out, {"stage": stage, "step": done, "optimizer": optimizer.state_dict()})

    if out is not None and cfg.steps == start:
        save_checkpoint(model, out, {"stage": stage, "step": start, "optimizer": optimizer.state_dict()})
    model.eval()
    return model


def pretrain(
    model: TypingModel,
    weak_samples: Iterable[MentionSample],
    cfg: TrainConfig,
    loss: LossConfig,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
) -> TypingModel:
    """
    Train h on weak data with the partitioned, alpha-weighted objective.
    Trains `model` in place and returns it.
    """
    samples = list(weak_samples)
    _check_vocabulary(samples, model.vocab)
    if cfg.steps == 0:
        return model
    schedule = BatchSchedule(len(samples), cfg.batch_size, cfg.seed)
    alpha = loss.alpha_strong if loss.weighted else 1.0
    logger.info(f"[TRAIN] Pretraining on {len(samples)} weak samples (alpha_strong={alpha})")

    def step_loss(step: int) -> torch.Tensor:
        batch = [samples[i] for i in schedule.indices(step)]
        y, strong = targets(batch, model.vocab)
        return batch_objective(model(batch), y, strong, model.vocab, alpha, loss.partitioned).mean()

    return _run("pretrain", model, step_loss, cfg, checkpoint_dir, resume)


def finetune(
    h: TypingModel,
    human_samples: Iterable[MentionSample],
    cfg: TrainConfig,
    loss: LossConfig,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
) -> TypingModel:
    """m = h fine-tuned on human data with plain BCE under the partition gate. h is left untouched."""
    samples = list(human_samples)
    _check_vocabulary(samples, h.vocab)
    m = copy.deepcopy(h)
    if cfg.steps == 0:
        return m
    schedule = BatchSchedule(len(samples), cfg.batch_size, cfg.seed)
    logger.info(f"[TRAIN] Fine-tuning on {len(samples)} human samples")

    def step_loss(step: int) -> torch.Tensor:
        batch = [samples[i] for i in schedule.indices(step)]
        y, strong = targets(batch, m.vocab)
        return batch_objective(m(batch), y, strong, m.vocab, 1.0, loss.partitioned).mean()

    return _run("finetune", m, step_loss, cfg, checkpoint_dir, resume)


def teacher_probabilities(
    teacher: TypingModel,
    samples: Sequence[MentionSample],
    cache_dir: Optional[Union[str, Path]] = None,
) -> torch.Tensor:
    """
    Teacher probabilities for the automatic set, computed once. The disk
    cache is keyed by the teacher's parameters and the sample texts.
    """
    digest = hashlib.sha256(teacher.parameter_checksum().encode("utf-8"))
    for sample in samples:
        digest.update(" ".join(sample.sentence).encode("utf-8"))
        digest.update(f"\t{sample.mention_start}:{sample.mention_end}\n".encode("utf-8"))
    key = digest.hexdigest()

    path = Path(cache_dir) / TEACHER_CACHE_FILE if cache_dir else None
    if path is not None and path.exists():
        cached = torch.load(path, map_location="cpu", weights_only=False)
        if cached.get("key") == key:
            logger.info(f"[TRAIN] Teacher probabilities loaded from {path}")
            return cached["probs"]

    probs = teacher.probabilities(list(samples))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"key": key, "probs": probs}, path)
    return probs


def self_train(
    h: TypingModel,
    m: TypingModel,
    human_samples: Iterable[MentionSample],
    weak_samples: Iterable[MentionSample],
    cfg: TrainConfig,
    loss: LossConfig,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
) -> TypingModel:
    """
    Student initialized from h, trained on J_ST with m as the fixed teacher.
    Each step pairs one human batch with one automatic batch.
    """
    human = list(human_samples)
    auto = list(weak_samples)
    _check_vocabulary(human, h.vocab)
    _check_vocabulary(auto, h.vocab)
    if m.vocab.fingerprint() != h.vocab.fingerprint():
        raise VocabularyMismatchError(expected="teacher and student on one vocabulary", found="two vocabularies")

    student = copy.deepcopy(h)
    if cfg.steps == 0:
        return student
    if not human or not auto:
        raise TypeLabelError("self-training needs non-empty human and automatic sets")

    p_teacher = teacher_probabilities(m, auto, checkpoint_dir)
    weak_y, _ = targets(auto, h.vocab)
    pos_all, neg_all = pseudo_label_masks(p_teacher, weak_y, loss.P, loss.P_w)
    logger.info(
        f"[TRAIN] Self-training: {len(human)} human, {len(auto)} automatic samples, "
        f"{int(pos_all.sum())} pseudo positives, {int(neg_all.sum())} pseudo negatives"
    )

    human_schedule = BatchSchedule(len(human), cfg.batch_size, cfg.seed)
    auto_schedule = BatchSchedule(len(auto), cfg.batch_size, cfg.seed + 1)

    def step_loss(step: int) -> torch.Tensor:
        batch_h = [human[i] for i in human_schedule.indices(step)]
        y, strong = targets(batch_h, student.vocab)
        human_loss = batch_objective(student(batch_h), y, strong, student.vocab, 1.0, loss.partitioned).mean()
        idx = auto_schedule.indices(step)
        batch_a = [auto[i] for i in idx]
        auto_loss = batch_self_training_loss(student(batch_a), pos_all[idx], neg_all[idx]).mean()
        return human_loss + loss.lambda_ * auto_loss

    return _run("selftrain", student, step_loss, cfg, checkpoint_dir, resume)
