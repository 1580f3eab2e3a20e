"""
Tests for the masked-LM backends (mock table, cache layer, factory).

The real checkpoint is exercised only when TYPELABEL_NETWORK_TESTS=1.
"""

import json
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.core.brain import (
    BackendError,
    CachedBackend,
    MaskedPrediction,
    MockBackend,
    create_backend,
    load_mock_table,
    prompt_key,
    save_mock_table,
)
from src.core.labeling import fill_prompts, labels_by_pattern
from src.core.patterns import HypernymPattern, build_prompt
from src.core.types import ConfigurationError, MentionKind, MentionSample, TypeVocabulary
from src.memory.corpus import CorpusFormatError


def _prompt(mention=("Paris",)):
    sample = MentionSample(("We", "saw"), tuple(mention), (".",), MentionKind.NAMED)
    return build_prompt(sample, HypernymPattern.parse("H such as M"))


class FakeRedis:
    """Dict-backed stand-in for a redis client."""

    def __init__(self):
        self.store = {}

    def get(self, key):
        return self.store.get(key)

    def set(self, key, value, ex=None):
        self.store[key] = value


class LockAwareRedis(FakeRedis):
    """Records whether the backend's memo lock was held during each call."""

    def __init__(self, backend):
        super().__init__()
        self.backend = backend
        self.calls_under_lock = 0

    def get(self, key):
        self.calls_under_lock += self.backend._lock.locked()
        return super().get(key)

    def set(self, key, value, ex=None):
        self.calls_under_lock += self.backend._lock.locked()
        super().set(key, value, ex)


class TestMaskedPrediction:
    def test_from_words_is_ranked(self):
        prediction = MaskedPrediction.from_words(["cities", "places", "cities", "towns"])
        assert prediction.words == ["cities", "places", "towns"]
        probs = [p for _, p in prediction.ranked]
        assert probs == sorted(probs, reverse=True)
        assert abs(sum(probs) - 1.0) < 1e-9

    def test_rejects_increasing_probabilities(self):
        with pytest.raises(ValueError):
            MaskedPrediction((("a", 0.1), ("b", 0.2)))

    def test_rejects_duplicate_words(self):
        with pytest.raises(ValueError):
            MaskedPrediction((("a", 0.3), ("a", 0.2)))

    def test_top_truncates(self):
        assert MaskedPrediction.from_words(["a", "b", "c"]).top(2).words == ["a", "b"]


class TestMockBackend:
    def setup_method(self):
        self.prompt = _prompt()
        self.backend = MockBackend()
        self.backend.add(prompt_key(self.prompt), ["cities", "places", "capitals"])

    def test_answers_from_table(self):
        assert self.backend.fill_mask(self.prompt, 2).words == ["cities", "places"]

    def test_miss_returns_empty_prediction(self):
        assert self.backend.fill_mask(_prompt(("Rome",)), 5).words == []

    def test_strict_miss_raises(self):
        self.backend.strict = True
        with pytest.raises(KeyError):
            self.backend.fill_mask(_prompt(("Rome",)), 5)

    def test_table_file_round_trip(self, tmp_path):
        path = tmp_path / "mock.jsonl"
        save_mock_table(path, self.backend.table)
        assert load_mock_table(path) == self.backend.table

    def test_bad_table_row(self, tmp_path):
        path = tmp_path / "mock.jsonl"
        path.write_text(json.dumps({"prompt": "x [MASK]"}) + "\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError) as exc:
            load_mock_table(path)
        assert exc.value.line_number == 1


class TestCachedBackend:
    def setup_method(self):
        self.prompt = _prompt()
        self.inner = MockBackend()
        self.inner.add(prompt_key(self.prompt), ["cities", "places"])

    def test_repeated_prompts_hit_the_memo(self):
        backend = CachedBackend(self.inner)
        first = backend.fill_mask_batch([self.prompt, self.prompt], 5)
        second = backend.fill_mask(self.prompt, 5)
        assert first[0] == first[1] == second
        assert self.inner.calls == 1
        assert backend.hits == 1 and backend.misses == 1

    def test_top_n_is_part_of_the_key(self):
        backend = CachedBackend(self.inner)
        assert backend.fill_mask(self.prompt, 1).words == ["cities"]
        assert backend.fill_mask(self.prompt, 5).words == ["cities", "places"]
        assert self.inner.calls == 2

    def test_shared_cache_serves_other_processes(self):
        shared = FakeRedis()
        writer = CachedBackend(self.inner)
        writer.redis_client = shared
        writer.fill_mask(self.prompt, 5)
        assert len(shared.store) == 1
        assert next(iter(shared.store)).startswith("mlm_cache:")

        reader = CachedBackend(MockBackend(strict=True))
        reader.redis_client = shared
        assert reader.fill_mask(self.prompt, 5).words == ["cities", "places"]

    def test_redis_round_trips_run_outside_the_lock(self):
        other = _prompt(("London",))
        self.inner.add(prompt_key(other), ["capitals"])
        backend = CachedBackend(self.inner)
        backend.redis_client = LockAwareRedis(backend)
        backend.fill_mask_batch([self.prompt, other, self.prompt], 5)
        backend.fill_mask_batch([self.prompt, other], 5)
        assert len(backend.redis_client.store) == 2
        assert backend.redis_client.calls_under_lock == 0
        assert backend.hits == 2 and backend.misses == 2

    def test_unreachable_redis_falls_back_to_memo(self):
        backend = CachedBackend(self.inner, redis_url="redis://127.0.0.1:1/0")
        assert backend.redis_client is None
        assert backend.fill_mask(self.prompt, 5).words == ["cities", "places"]


class TestBackendFactory:
    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            create_backend("oracle")

    def test_mock_kind_loads_table(self, tmp_path):
        path = tmp_path / "mock.jsonl"
        prompt = _prompt()
        save_mock_table(path, {prompt_key(prompt): MaskedPrediction.from_words(["cities"])})
        backend = create_backend("mock", mock_table=path)
        assert isinstance(backend, CachedBackend)
        assert backend.fill_mask(prompt, 3).words == ["cities"]

    def test_backend_errors_carry_the_prompt(self):
        broken = MockBackend(strict=True)
        with pytest.raises(BackendError) as exc:
            fill_prompts(broken, [_prompt()], 5)
        assert "[MASK] such as Paris" in exc.value.prompt


@pytest.mark.skipif(os.getenv("TYPELABEL_NETWORK_TESTS") != "1", reason="needs a pretrained checkpoint download")
class TestPretrainedCheckpoint:
    """Fill-mask sanity on a real base checkpoint."""

    def test_dicaprio_prompt_yields_actor_types(self):
        pytest.importorskip("transformers")
        backend = create_backend("transformers", checkpoint="bert-base-cased", cache=False)
        sample = MentionSample(
            ("In", "late", "2015", ","), ("Leonardo", "DiCaprio"),
            ("starred", "in", "The", "Revenant", "."), MentionKind.NAMED,
        )
        prompt = build_prompt(sample, HypernymPattern.parse("H such as M"))
        top5 = backend.fill_mask(prompt, 5).words
        expected = {"actors", "stars", "actor", "directors", "filmmakers"}
        assert len(expected & set(top5)) >= 3

        vocab = TypeVocabulary.build(["actor", "star", "director", "filmmaker", "person", "city"])
        labels = labels_by_pattern(sample, HypernymPattern.parse("H such as M"), backend, vocab, k=5, top_n=50)
        assert len({"actor", "star", "director", "filmmaker"} & set(labels)) >= 3
