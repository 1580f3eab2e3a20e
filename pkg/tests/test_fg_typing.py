"""
============================================================================
TEST: Single-path labels for fine-grained typing
============================================================================

INVARIANT: every label set produced is prefix-closed.

============================================================================
"""

import os
import random
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.core.brain import MockBackend, prompt_key
from src.core.fg_typing import (
    FG_PATTERN,
    MappingStats,
    TypePath,
    WordTypeMapping,
    annotate_fg,
    expand_path,
    load_mapping,
    map_types,
    mine_mapping_candidates,
)
from src.core.patterns import build_prompt
from src.core.types import MentionKind, MentionSample, Provenance
from src.memory.corpus import CorpusFormatError

STARTER_MAPPING = "company\t/organization/company\nauthor\t/person/artist/author\nwriter\t/person/artist/author\n"


def _nominal(i):
    return MentionSample((f"on{i}", ","), ("the", f"firm{i}"), ("grew", "."), MentionKind.NOMINAL)


def _backend(answers):
    backend = MockBackend()
    for sample, words in answers:
        backend.add(prompt_key(build_prompt(sample, FG_PATTERN)), words)
    return backend


@pytest.fixture
def mapping(tmp_path):
    path = tmp_path / "mapping.tsv"
    path.write_text("# starter\n" + STARTER_MAPPING, encoding="utf-8")
    return load_mapping(path)


class TestTypePath:
    def test_parse_and_render(self):
        assert TypePath.parse("/organization/company").segments == ("organization", "company")
        assert str(TypePath.parse("/person")) == "/person"

    @pytest.mark.parametrize("text", ["organization", "/", "/a//b", ""])
    def test_malformed(self, text):
        with pytest.raises(ValueError):
            TypePath.parse(text)

    def test_expand_company(self):
        assert {p.render() for p in expand_path(TypePath.parse("/organization/company"))} == {
            "/organization", "/organization/company"
        }

    def test_expand_author(self):
        assert {p.render() for p in expand_path(TypePath.parse("/person/artist/author"))} == {
            "/person", "/person/artist", "/person/artist/author"
        }


class TestMappingFile:
    def test_keys_are_normalized(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("Companies\t/organization/company\n", encoding="utf-8")
        assert load_mapping(path).lookup("company") == TypePath.parse("/organization/company")

    def test_plural_and_singular_collide(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("company\t/organization/company\ncompanies\t/organization\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError) as exc:
            load_mapping(path)
        assert exc.value.line_number == 2

    @pytest.mark.parametrize("line", ["company /organization/company", "company\torganization", "\t/a"])
    def test_malformed_line(self, tmp_path, line):
        path = tmp_path / "m.tsv"
        path.write_text(line + "\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError):
            load_mapping(path)


class TestAnnotate:
    def test_plural_fill_maps_to_company(self, mapping):
        sample = _nominal(0)
        labels = annotate_fg(sample, _backend([(sample, ["companies", "firms"])]), mapping)
        assert {p.render() for p in labels} == {"/organization", "/organization/company"}

    def test_author(self, mapping):
        sample = _nominal(1)
        labels = annotate_fg(sample, _backend([(sample, ["author"])]), mapping)
        assert {p.render() for p in labels} == {"/person", "/person/artist", "/person/artist/author"}

    def test_only_the_top_word_counts(self, mapping):
        sample = _nominal(2)
        assert annotate_fg(sample, _backend([(sample, ["things", "companies"])]), mapping) is None

    def test_no_prediction(self, mapping):
        assert annotate_fg(_nominal(3), MockBackend(), mapping) is None

    def test_randomized_prefix_closure(self):
        rng = random.Random(11)
        segments = ["org", "person", "artist", "company", "place", "city", "event"]
        entries = {}
        for i in range(30):
            depth = rng.randint(1, 4)
            entries[f"word{i}"] = TypePath(tuple(rng.choice(segments) for _ in range(depth)))
        table = WordTypeMapping(entries)
        for case in range(100):
            sample = _nominal(case)
            word = f"word{rng.randint(0, 39)}"
            labels = annotate_fg(sample, _backend([(sample, [word])]), table)
            if word not in entries:
                assert labels is None
                continue
            assert entries[word] in labels
            for path in labels:
                for i in range(1, len(path.segments)):
                    assert TypePath(path.segments[:i]) in labels


class TestMapTypes:
    def test_order_pass_through_and_drops(self, mapping):
        unlabeled = [_nominal(i) for i in range(4)]
        gold = MentionSample.labeled([], ["Acme"], ["."], MentionKind.NAMED, {"/organization": Provenance.HUMAN})
        backend = _backend([
            (unlabeled[0], ["company"]),
            (unlabeled[1], ["dog"]),
            (unlabeled[2], ["writers"]),
        ])
        stats = MappingStats()
        out = list(map_types([unlabeled[0], gold, unlabeled[1], unlabeled[2], unlabeled[3]], backend, mapping, stats, chunk_size=2))

        assert [s.mention_tokens for s in out] == [unlabeled[0].mention_tokens, ("Acme",), unlabeled[2].mention_tokens]
        assert out[1] is gold
        assert out[2].labels == {"/person", "/person/artist", "/person/artist/author"}
        assert all(src is Provenance.MLM for src in out[2].label_sources.values())
        assert (stats.mapped, stats.unmapped, stats.passed_through) == (2, 2, 1)
        assert stats.unmapped_ratio == 0.5

    def test_empty_mapping_labels_nothing(self):
        samples = [_nominal(i) for i in range(3)]
        backend = _backend([(s, ["company"]) for s in samples])
        stats = MappingStats()
        assert list(map_types(samples, backend, WordTypeMapping({}), stats)) == []
        assert stats.unmapped == 3 and stats.mapped == 0


class TestMineCandidates:
    def test_single_word_stream(self):
        samples = [_nominal(i) for i in range(7)]
        backend = _backend([(s, ["company"]) for s in samples])
        assert mine_mapping_candidates(samples, backend, n=5, chunk_size=3) == [("company", 7)]

    def test_ranking_and_cutoff(self):
        samples = [_nominal(i) for i in range(6)]
        words = ["firms", "firm", "cities", "banks", "banks", "city"]
        backend = _backend([(s, [w]) for s, w in zip(samples, words)])
        assert mine_mapping_candidates(samples, backend, n=2) == [("bank", 2), ("city", 2)]

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            mine_mapping_candidates([], MockBackend(), n=0)


class TestStarterMapping:
    def test_shipped_file_loads(self):
        root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        starter = load_mapping(os.path.join(root, "data", "mapping.tsv"))
        assert starter.lookup("companies") == TypePath.parse("/organization/company")
        assert starter.lookup("Writers") == TypePath.parse("/person/artist/author")
