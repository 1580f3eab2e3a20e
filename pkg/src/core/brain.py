"""
Masked-LM backends: the fill-mask contract, a table-driven mock, a
pretrained transformers checkpoint, and a caching wrapper.
"""

import hashlib
import json
import logging
import os
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from src.core.patterns import MASK_TOKEN, Prompt
from src.core.types import ConfigurationError, TypeLabelError
from src.memory.corpus import CorpusFormatError, write_lines_atomic

try:
    import redis
except ImportError:
    redis = None

logger = logging.getLogger("TypeLabel.Brain")

DEFAULT_CHECKPOINT = "bert-base-cased"


class BackendError(TypeLabelError):
    """A fill-mask query failed. Carries the prompt that triggered it."""
    def __init__(self, prompt: str, reason: str):
        self.prompt = prompt
        self.reason = reason
        super().__init__(f"MLM backend failed on prompt '{prompt}': {reason}")


@dataclass(frozen=True)
class MaskedPrediction:
    """
    Ranked (word, probability) fills for one mask position.

    INVARIANTS: probabilities non-increasing and in [0, 1]; words unique.
    """
    ranked: Tuple[Tuple[str, float], ...]

    def __post_init__(self):
        ranked = tuple((str(w), float(p)) for w, p in self.ranked)
        object.__setattr__(self, "ranked", ranked)
        words = [w for w, _ in ranked]
        if len(set(words)) != len(words):
            raise ValueError("ranked words must be unique")
        probs = [p for _, p in ranked]
        if any(p < 0.0 or p > 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if any(a < b for a, b in zip(probs, probs[1:])):
            raise ValueError("probabilities must be non-increasing")

    @property
    def words(self) -> List[str]:
        return [w for w, _ in self.ranked]

    def top(self, n: int) -> "MaskedPrediction":
        return MaskedPrediction(self.ranked[:n])

    @classmethod
    def from_words(cls, words: Sequence[str]) -> "MaskedPrediction":
        """Evenly decaying probabilities for an already ranked word list."""
        unique = list(dict.fromkeys(words))
        n = len(unique)
        return cls(tuple((w, (n - i) / (n * (n + 1) / 2)) for i, w in enumerate(unique)))


def prompt_key(prompt: Prompt) -> str:
    return prompt.text


class MlmBackend(ABC):
    """
    Fill-mask provider contract.
    Deterministic for a fixed checkpoint and input.
    """
    name: str = "abstract"

    @abstractmethod
    def fill_mask(self, prompt: Prompt, top_n: int) -> MaskedPrediction:
        pass

    def fill_mask_batch(self, prompts: Sequence[Prompt], top_n: int) -> List[MaskedPrediction]:
        return [self.fill_mask(p, top_n) for p in prompts]


# =============================================================================
# MOCK BACKEND (table-driven, for tests and desk-scale runs)
# =============================================================================

class MockBackend(MlmBackend):
    """
    Answers from a table keyed by the prompt text. Unknown prompts get an empty
    prediction unless `strict` is set.
    """
    name = "mock"

    def __init__(self, table: Optional[Mapping[str, MaskedPrediction]] = None, strict: bool = False):
        self.table: Dict[str, MaskedPrediction] = dict(table or {})
        self.strict = strict
        self.calls = 0

    def add(self, key: str, words: Sequence[str]) -> None:
        self.table[key] = MaskedPrediction.from_words(words)

    def fill_mask(self, prompt: Prompt, top_n: int) -> MaskedPrediction:
        self.calls += 1
        key = prompt_key(prompt)
        prediction = self.table.get(key)
        if prediction is None:
            if self.strict:
                raise KeyError(f"no mock entry for '{key}'")
            logger.debug(f"[BRAIN] Mock miss for '{key}'")
            return MaskedPrediction(())
        return prediction.top(top_n)


def load_mock_table(path: Union[str, Path]) -> Dict[str, MaskedPrediction]:
    """JSONL rows: {"prompt": "...", "ranked": [[word, prob], ...]}."""
    table: Dict[str, MaskedPrediction] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                table[row["prompt"]] = MaskedPrediction(tuple((w, p) for w, p in row["ranked"]))
            except (KeyError, TypeError, ValueError) as e:
                raise CorpusFormatError(path, line_number, f"bad mock row: {e}") from e
    logger.info(f"[BRAIN] Mock table loaded: {len(table)} prompts")
    return table


def save_mock_table(path: Union[str, Path], table: Mapping[str, MaskedPrediction]) -> int:
    rows = (
        json.dumps({"prompt": key, "ranked": [[w, p] for w, p in pred.ranked]}, ensure_ascii=False)
        for key, pred in sorted(table.items())
    )
    return write_lines_atomic(path, rows)


# =============================================================================
# TRANSFORMERS BACKEND (pretrained masked language model)
# =============================================================================

class TransformersBackend(MlmBackend):
    """
    Pretrained masked-language-model checkpoint via the transformers library.

    Whole-word fills only: subword continuations ("##ing") and non-alphabetic
    tokens are skipped, so fewer than top_n words may come back.
    """
    name = "transformers"

    def __init__(
        self,
        checkpoint: str = DEFAULT_CHECKPOINT,
        device: Optional[str] = None,
        cache_dir: Optional[str] = None,
        batch_size: int = 32,
    ):
        try:
            import torch
            from transformers import AutoModelForMaskedLM, AutoTokenizer
        except ImportError as e:
            raise BackendError(prompt="<init>", reason=f"transformers backend unavailable: {e}") from e

        self._torch = torch
        self.checkpoint = checkpoint
        self.device = device or os.getenv("TYPELABEL_DEVICE", "cpu")
        cache_dir = cache_dir or os.getenv("TYPELABEL_CACHE_DIR")
        self.batch_size = batch_size
        logger.info(f"[BRAIN] Loading masked LM {checkpoint} on {self.device}")
        self.tokenizer = AutoTokenizer.from_pretrained(checkpoint, cache_dir=cache_dir)
        self.model = AutoModelForMaskedLM.from_pretrained(checkpoint, cache_dir=cache_dir)
        self.model.to(self.device)
        self.model.eval()
        # Inference is read-only; the lock serializes device access across threads
        self._lock = threading.Lock()

    def fill_mask(self, prompt: Prompt, top_n: int) -> MaskedPrediction:
        return self.fill_mask_batch([prompt], top_n)[0]

    def fill_mask_batch(self, prompts: Sequence[Prompt], top_n: int) -> List[MaskedPrediction]:
        results: List[MaskedPrediction] = []
        for offset in range(0, len(prompts), self.batch_size):
            chunk = prompts[offset:offset + self.batch_size]
            with self._lock:
                results.extend(self._predict_chunk(chunk, top_n))
        return results

    def _predict_chunk(self, prompts: Sequence[Prompt], top_n: int) -> List[MaskedPrediction]:
        torch = self._torch
        texts = [
            " ".join(self.tokenizer.mask_token if tok == MASK_TOKEN else tok for tok in p.tokens)
            for p in prompts
        ]
        encoded = self.tokenizer(texts, return_tensors="pt", padding=True, truncation=True)
        encoded = {k: v.to(self.device) for k, v in encoded.items()}
        with torch.no_grad():
            logits = self.model(**encoded).logits
        mask_positions = (encoded["input_ids"] == self.tokenizer.mask_token_id).nonzero(as_tuple=False)

        predictions: List[MaskedPrediction] = []
        # Over-fetch so whole-word filtering still leaves top_n candidates
        fetch = min(logits.shape[-1], top_n * 3)
        for row, text in enumerate(texts):
            positions = mask_positions[mask_positions[:, 0] == row]
            if len(positions) != 1:
                raise BackendError(prompt=text, reason="mask token lost during tokenization")
            probs = torch.softmax(logits[row, positions[0, 1]], dim=-1)
            values, indices = torch.topk(probs, fetch)
            ranked: List[Tuple[str, float]] = []
            seen = set()
            for prob, token_id in zip(values.tolist(), indices.tolist()):
                word = self.tokenizer.convert_ids_to_tokens(token_id).lstrip("Ġ▁")
                if not word.isalpha() or word in seen:
                    continue
                seen.add(word)
                ranked.append((word, float(prob)))
                if len(ranked) == top_n:
                    break
            predictions.append(MaskedPrediction(tuple(ranked)))
        return predictions


# =============================================================================
# CACHE (in-process memo, optional shared redis layer)
# =============================================================================

class CachedBackend(MlmBackend):
    """
    Memoizes fill_mask keyed by (prompt tokens, top_n).

    With a redis URL, predictions are also shared across processes under
    sha256 keys, the way repeated prompts during greedy search hit the cache.
    """
    name = "cached"

    def __init__(self, inner: MlmBackend, redis_url: Optional[str] = None, ttl_seconds: int = 7 * 24 * 3600):
        self.inner = inner
        self.name = f"cached:{inner.name}"
        self._memo: Dict[Tuple[Tuple[str, ...], int], MaskedPrediction] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.ttl_seconds = ttl_seconds
        self.redis_client = None
        redis_url = redis_url or os.getenv("TYPELABEL_REDIS_URL")
        if redis_url:
            if redis is None:
                logger.warning("[BRAIN] redis package missing. Shared prediction cache disabled.")
            else:
                try:
                    self.redis_client = redis.from_url(redis_url)
                    self.redis_client.ping()
                    logger.info("[BRAIN] Connected to redis prediction cache.")
                except Exception as e:
                    logger.warning(f"[BRAIN] Failed to connect to redis: {e}. Using in-process cache only.")
                    self.redis_client = None

    def _shared_key(self, prompt: Prompt, top_n: int) -> str:
        digest = hashlib.sha256(f"{self.inner.name}\t{top_n}\t{prompt.text}".encode("utf-8")).hexdigest()
        return f"mlm_cache:{digest}"

    def _shared_get(self, prompt: Prompt, top_n: int) -> Optional[MaskedPrediction]:
        if self.redis_client is None:
            return None
        try:
            raw = self.redis_client.get(self._shared_key(prompt, top_n))
        except Exception as e:
            logger.warning(f"[BRAIN] redis read failed: {e}")
            return None
        if raw is None:
            return None
        return MaskedPrediction(tuple((w, p) for w, p in json.loads(raw)))

    def _shared_set(self, prompt: Prompt, top_n: int, prediction: MaskedPrediction) -> None:
        if self.redis_client is None:
            return
        try:
            self.redis_client.set(
                self._shared_key(prompt, top_n),
                json.dumps([[w, p] for w, p in prediction.ranked]),
                ex=self.ttl_seconds,
            )
        except Exception as e:
            logger.warning(f"[BRAIN] redis write failed: {e}")

    def fill_mask(self, prompt: Prompt, top_n: int) -> MaskedPrediction:
        return self.fill_mask_batch([prompt], top_n)[0]

    def fill_mask_batch(self, prompts: Sequence[Prompt], top_n: int) -> List[MaskedPrediction]:
        results: List[Optional[MaskedPrediction]] = [None] * len(prompts)
        with self._lock:
            for i, prompt in enumerate(prompts):
                results[i] = self._memo.get((prompt.tokens, top_n))

        # The lock guards the memo only; redis round trips happen outside it
        shared: Dict[Tuple[str, ...], Optional[MaskedPrediction]] = {}
        for i, prompt in enumerate(prompts):
            if results[i] is None and prompt.tokens not in shared:
                shared[prompt.tokens] = self._shared_get(prompt, top_n)

        pending: List[int] = []
        with self._lock:
            for tokens, prediction in shared.items():
                if prediction is not None:
                    self._memo[(tokens, top_n)] = prediction
            for i, prompt in enumerate(prompts):
                if results[i] is None:
                    results[i] = shared.get(prompt.tokens)
                if results[i] is None:
                    pending.append(i)
                else:
                    self.hits += 1

        if pending:
            # Deduplicate within the batch
            unique: Dict[Tuple[str, ...], Prompt] = {}
            for i in pending:
                unique.setdefault(prompts[i].tokens, prompts[i])
            fresh = self.inner.fill_mask_batch(list(unique.values()), top_n)
            by_tokens = dict(zip(unique.keys(), fresh))
            with self._lock:
                for tokens, prediction in by_tokens.items():
                    self._memo[(tokens, top_n)] = prediction
                self.misses += len(by_tokens)
            for tokens, prediction in by_tokens.items():
                self._shared_set(unique[tokens], top_n, prediction)
            for i in pending:
                results[i] = by_tokens[prompts[i].tokens]
        return results


def create_backend(
    kind: str,
    checkpoint: str = DEFAULT_CHECKPOINT,
    mock_table: Optional[Union[str, Path]] = None,
    redis_url: Optional[str] = None,
    device: Optional[str] = None,
    cache: bool = True,
) -> MlmBackend:
    """Backend factory used by the CLI."""
    if kind == "mock":
        table = load_mock_table(mock_table) if mock_table else {}
        backend: MlmBackend = MockBackend(table)
    elif kind == "transformers":
        backend = TransformersBackend(checkpoint=checkpoint, device=device)
    else:
        raise ConfigurationError("backend.kind", f"unknown backend '{kind}' (expected mock|transformers)")
    return CachedBackend(backend, redis_url=redis_url) if cache else backend
