"""
============================================================================
TYPING MODEL: mention in context -> per-type probabilities
============================================================================

    u = encode("[CLS] sentence [SEP] mention [SEP]")
    p = sigmoid(W u)            W: [d x hidden], d = |vocabulary|

Two encoders sit behind the same contract:
    - "stub":        segment-aware bag of hashed tokens; deterministic, CPU-cheap
    - "transformer": pretrained transformer, final hidden vector of [CLS]

Checkpoints store the vocabulary fingerprint; loading against a different
vocabulary is refused.
============================================================================
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
from torch import nn

from src.core.types import ConfigurationError, MentionSample, TypeVocabulary, VocabularyMismatchError

logger = logging.getLogger("TypeLabel.Model")

CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
DECISION_THRESHOLD = 0.5

MODEL_FILE = "model.pt"
CONFIG_FILE = "config.json"


def format_model_input(sample: MentionSample) -> List[str]:
    """[CLS] sentence [SEP] mention [SEP]"""
    return [CLS_TOKEN, *sample.sentence, SEP_TOKEN, *sample.mention_tokens, SEP_TOKEN]


@dataclass(frozen=True)
class PredictionSet:
    """Decoded prediction. Never empty."""
    types: Tuple[str, ...]
    probabilities: Tuple[float, ...]

    def as_set(self) -> frozenset:
        return frozenset(self.types)


def predict_types(p: Union[torch.Tensor, Sequence[float]], vocab: TypeVocabulary) -> PredictionSet:
    """
    Every type with p_t > 0.5; if none, the single most probable type
    (ties go to the lowest vocabulary index).
    """
    probs = [float(x) for x in (p.tolist() if isinstance(p, torch.Tensor) else p)]
    if len(probs) != len(vocab):
        raise VocabularyMismatchError(expected=f"{len(vocab)} probabilities", found=f"{len(probs)}")
    chosen = [i for i, x in enumerate(probs) if x > DECISION_THRESHOLD]
    if not chosen:
        # max() keeps the first index among equal values
        chosen = [max(range(len(probs)), key=lambda i: probs[i])]
    return PredictionSet(
        types=tuple(vocab.all_types[i] for i in chosen),
        probabilities=tuple(probs[i] for i in chosen),
    )


# =============================================================================
# ENCODERS
# =============================================================================

@dataclass(frozen=True)
class EncoderSpec:
    kind: str = "stub"
    hidden_size: int = 64
    buckets: int = 4096
    checkpoint: str = "bert-base-cased"
    max_length: int = 128

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@lru_cache(maxsize=200_000)
def _bucket(token: str, buckets: int) -> int:
    digest = hashlib.md5(token.lower().encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % buckets


class StubEncoder(nn.Module):
    """
    Bag of hashed tokens per segment (sentence incl. [CLS], mention),
    concatenated and projected to the hidden size.
    """
    def __init__(self, hidden_size: int, buckets: int):
        super().__init__()
        self.hidden_size = hidden_size
        self.buckets = buckets
        self.sentence_bag = nn.EmbeddingBag(buckets, hidden_size, mode="mean")
        self.mention_bag = nn.EmbeddingBag(buckets, hidden_size, mode="mean")
        self.project = nn.Linear(2 * hidden_size, hidden_size)

    def _bag_inputs(self, segments: List[List[str]], device: torch.device) -> Tuple[torch.Tensor, torch.Tensor]:
        ids: List[int] = []
        offsets: List[int] = []
        for tokens in segments:
            offsets.append(len(ids))
            ids.extend(_bucket(tok, self.buckets) for tok in tokens)
        return (
            torch.tensor(ids, dtype=torch.long, device=device),
            torch.tensor(offsets, dtype=torch.long, device=device),
        )

    def forward(self, samples: Sequence[MentionSample]) -> torch.Tensor:
        device = self.project.weight.device
        # Segments of format_model_input: [CLS] + sentence, then the mention
        sentences = [[CLS_TOKEN, *s.sentence] for s in samples]
        mentions = [list(s.mention_tokens) for s in samples]
        s_ids, s_off = self._bag_inputs(sentences, device)
        m_ids, m_off = self._bag_inputs(mentions, device)
        pooled = torch.cat([self.sentence_bag(s_ids, s_off), self.mention_bag(m_ids, m_off)], dim=-1)
        return torch.tanh(self.project(pooled))


class TransformerEncoder(nn.Module):
    """Pretrained transformer; u is the final hidden vector of [CLS]."""
    def __init__(self, checkpoint: str, max_length: int):
        super().__init__()
        try:
            from transformers import AutoModel, AutoTokenizer
        except ImportError as e:
            raise ConfigurationError("model.encoder", f"transformer encoder unavailable: {e}") from e
        cache_dir = os.getenv("TYPELABEL_CACHE_DIR")
        self.tokenizer = AutoTokenizer.from_pretrained(checkpoint, cache_dir=cache_dir)
        self.transformer = AutoModel.from_pretrained(checkpoint, cache_dir=cache_dir)
        self.hidden_size = self.transformer.config.hidden_size
        self.max_length = max_length

    def forward(self, samples: Sequence[MentionSample]) -> torch.Tensor:
        device = next(self.transformer.parameters()).device
        # The tokenizer adds [CLS]/[SEP] itself for a sentence pair
        encoded = self.tokenizer(
            [" ".join(s.sentence) for s in samples],
            [" ".join(s.mention_tokens) for s in samples],
            return_tensors="pt",
            padding=True,
            truncation="only_first",
            max_length=self.max_length,
        )
        encoded = {k: v.to(device) for k, v in encoded.items()}
        return self.transformer(**encoded).last_hidden_state[:, 0]


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.kind == "stub":
        return StubEncoder(spec.hidden_size, spec.buckets)
    if spec.kind == "transformer":
        return TransformerEncoder(spec.checkpoint, spec.max_length)
    raise ConfigurationError("model.encoder", f"unknown encoder '{spec.kind}' (expected stub|transformer)")


# =============================================================================
# TYPING MODEL
# =============================================================================

class TypingModel(nn.Module):
    def __init__(self, vocab: TypeVocabulary, encoder: nn.Module, spec: EncoderSpec):
        super().__init__()
        self.vocab = vocab
        self.spec = spec
        self.encoder = encoder
        self.classifier = nn.Linear(encoder.hidden_size, len(vocab), bias=False)

    def encode(self, samples: Sequence[MentionSample]) -> torch.Tensor:
        return self.encoder(samples)

    def logits(self, samples: Sequence[MentionSample]) -> torch.Tensor:
        return self.classifier(self.encode(samples))

    def forward(self, samples: Sequence[MentionSample]) -> torch.Tensor:
        return torch.sigmoid(self.logits(samples))

    def probabilities(self, samples: Sequence[MentionSample], batch_size: int = 256) -> torch.Tensor:
        """Evaluation-mode forward over many samples; restores the previous mode."""
        was_training = self.training
        self.eval()
        outputs = []
        try:
            with torch.no_grad():
                for offset in range(0, len(samples), batch_size):
                    outputs.append(self(samples[offset:offset + batch_size]))
        finally:
            self.train(was_training)
        if not outputs:
            return torch.empty(0, len(self.vocab))
        return torch.cat(outputs, dim=0)

    def predict(self, samples: Sequence[MentionSample], batch_size: int = 256) -> List[PredictionSet]:
        return [predict_types(row, self.vocab) for row in self.probabilities(samples, batch_size)]

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def new_model(vocab: TypeVocabulary, hidden_size: int = 64, encoder: Optional[EncoderSpec] = None, seed: int = 13) -> TypingModel:
    """
    Fresh model with seeded initialization. The global RNG state is restored
    afterwards so callers' random streams are unaffected.
    """
    if hidden_size <= 0:
        raise ConfigurationError("model.hidden_size", "must be positive")
    spec = encoder or EncoderSpec(hidden_size=hidden_size)
    if spec.hidden_size != hidden_size:
        spec = EncoderSpec(**{**spec.to_dict(), "hidden_size": hidden_size})
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TypingModel(vocab, build_encoder(spec), spec)
    logger.info(f"[MODEL] New {spec.kind} model: {len(vocab)} types, hidden={model.encoder.hidden_size}, seed={seed}")
    return model


# =============================================================================
# CHECKPOINTS
# =============================================================================

def save_checkpoint(model: TypingModel, directory: Union[str, Path], trainer_state: Optional[Dict[str, Any]] = None) -> Path:
    """Write parameters + config (vocab hash, hidden size, encoder spec)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    config = {
        "vocab_hash": model.vocab.fingerprint(),
        "num_types": len(model.vocab),
        "hidden_size": model.encoder.hidden_size,
        "encoder": model.spec.to_dict(),
    }
    payload = {"model": model.state_dict()}
    if trainer_state is not None:
        payload["trainer"] = trainer_state
    tmp = out / f".{MODEL_FILE}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, out / MODEL_FILE)
    (out / CONFIG_FILE).write_text(json.dumps(config, indent=2), encoding="utf-8")
    logger.info(f"[MODEL] Checkpoint written to {out}")
    return out


def read_checkpoint_config(directory: Union[str, Path]) -> Dict[str, Any]:
    path = Path(directory) / CONFIG_FILE
    if not path.exists():
        raise ConfigurationError("checkpoint", f"no checkpoint at {directory}")
    return json.loads(path.read_text(encoding="utf-8"))


def load_checkpoint(directory: Union[str, Path], vocab: TypeVocabulary) -> Tuple[TypingModel, Optional[Dict[str, Any]]]:
    """
    Restore a model and its trainer state (if any).

    Raises:
        VocabularyMismatchError: checkpoint was trained on another vocabulary
    """
    config = read_checkpoint_config(directory)
    if config["vocab_hash"] != vocab.fingerprint():
        raise VocabularyMismatchError(
            expected=f"vocabulary {vocab.fingerprint()[:12]}",
            found=f"checkpoint vocabulary {config['vocab_hash'][:12]} at {directory}",
        )
    spec = EncoderSpec(**config["encoder"])
    model = new_model(vocab, hidden_size=spec.hidden_size, encoder=spec)
    payload = torch.load(Path(directory) / MODEL_FILE, map_location="cpu", weights_only=False)
    model.load_state_dict(payload["model"])
    return model, payload.get("trainer")
