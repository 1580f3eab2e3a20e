"""
============================================================================
TEST: Samples, vocabulary and corpus I/O
============================================================================

    1. A vocabulary partitions into disjoint general / fine / ultrafine tiers
    2. Every sample read back satisfies labels == keys(label_sources)
    3. Malformed records fail with the field and line that broke them
    4. Merging MLM labels never downgrades an existing provenance
    5. Pronoun mentions keep MLM labels only

============================================================================
"""

import json
import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.core.types import MentionKind, MentionSample, Provenance, TypeVocabulary, merge_label_sources
from src.memory.corpus import (
    CorpusFormatError,
    SampleParseError,
    extract_pronoun_mentions,
    load_pronoun_lexicon,
    load_vocabulary,
    read_samples,
    read_sentences,
    tokenize,
    write_samples,
)


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _record(**overrides):
    record = {
        "left_context": ["In", "2015", ","],
        "mention_tokens": ["Leonardo", "DiCaprio"],
        "right_context": ["starred", "."],
        "mention_kind": "NAMED",
        "labels": ["actor"],
        "label_sources": {"actor": "EL"},
    }
    record.update(overrides)
    return json.dumps(record)


class TestVocabulary:
    """load_vocabulary partitions and validates."""

    def test_ultrafine_is_the_remainder(self, tmp_path):
        vocab = load_vocabulary(
            _write(tmp_path / "types.txt", ["person", "actor", "location"]),
            _write(tmp_path / "general.txt", ["person", "location"]),
            _write(tmp_path / "fine.txt", []),
        )
        assert vocab.ultrafine == frozenset({"actor"})
        assert vocab.general == frozenset({"person", "location"})
        assert vocab.all_types == ("person", "actor", "location")
        assert vocab.index == {"person": 0, "actor": 1, "location": 2}

    def test_duplicate_type_is_rejected(self, tmp_path):
        with pytest.raises(CorpusFormatError) as exc:
            load_vocabulary(
                _write(tmp_path / "types.txt", ["person", "actor", "person"]),
                _write(tmp_path / "general.txt", ["person"]),
                _write(tmp_path / "fine.txt", []),
            )
        assert exc.value.line_number == 3

    def test_tier_entry_outside_vocabulary_is_rejected(self, tmp_path):
        with pytest.raises(CorpusFormatError):
            load_vocabulary(
                _write(tmp_path / "types.txt", ["person"]),
                _write(tmp_path / "general.txt", ["person"]),
                _write(tmp_path / "fine.txt", ["actor"]),
            )

    def test_fingerprint_tracks_order_and_tiers(self):
        a = TypeVocabulary.build(["person", "actor"], general=["person"])
        b = TypeVocabulary.build(["actor", "person"], general=["person"])
        c = TypeVocabulary.build(["person", "actor"], general=["person"], fine=["actor"])
        assert a.fingerprint() == TypeVocabulary.build(["person", "actor"], general=["person"]).fingerprint()
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint() != c.fingerprint()


class TestSampleRecords:
    """read_samples / write_samples."""

    def test_reads_records_in_order(self, tmp_path):
        path = _write(tmp_path / "s.jsonl", [
            _record(),
            _record(mention_tokens=["He"], mention_kind="PRONOUN", labels=[], label_sources={}),
            _record(mention_tokens=["the", "factory"], mention_kind="NOMINAL",
                    labels=["factory"], label_sources={"factory": "HEAD"}),
        ])
        samples = list(read_samples(path))
        assert [s.mention_kind for s in samples] == [MentionKind.NAMED, MentionKind.PRONOUN, MentionKind.NOMINAL]
        assert samples[0].label_sources == {"actor": Provenance.EL}
        assert samples[0].sentence == ("In", "2015", ",", "Leonardo", "DiCaprio", "starred", ".")
        assert (samples[0].mention_start, samples[0].mention_end) == (3, 5)

    def test_empty_mention_is_a_parse_error(self, tmp_path):
        path = _write(tmp_path / "s.jsonl", [_record(), _record(mention_tokens=[])])
        with pytest.raises(SampleParseError) as exc:
            list(read_samples(path))
        assert exc.value.line_number == 2
        assert exc.value.field == "mention_tokens"

    def test_label_without_source_is_a_parse_error(self, tmp_path):
        path = _write(tmp_path / "s.jsonl", [_record(labels=["actor", "person"])])
        with pytest.raises(SampleParseError) as exc:
            list(read_samples(path))
        assert exc.value.field == "labels"

    def test_missing_field_is_named(self, tmp_path):
        record = json.loads(_record())
        del record["right_context"]
        path = _write(tmp_path / "s.jsonl", [json.dumps(record)])
        with pytest.raises(SampleParseError) as exc:
            list(read_samples(path))
        assert exc.value.field == "right_context"
        assert "missing" in exc.value.reason

    def test_unknown_mention_kind_is_rejected(self, tmp_path):
        path = _write(tmp_path / "s.jsonl", [_record(mention_kind="VERBAL")])
        with pytest.raises(SampleParseError) as exc:
            list(read_samples(path))
        assert exc.value.field == "mention_kind"

    def test_invalid_utf8_names_the_line(self, tmp_path):
        path = tmp_path / "s.jsonl"
        path.write_bytes(_record().encode("utf-8") + b"\n" + b'{"left_context": ["\xff"]}\n')
        with pytest.raises(SampleParseError) as exc:
            list(read_samples(path))
        assert exc.value.line_number == 2
        assert exc.value.reason == "invalid UTF-8"

    def test_write_then_read_preserves_samples(self, tmp_path):
        source = _write(tmp_path / "s.jsonl", [_record(), _record(labels=[], label_sources={})])
        samples = list(read_samples(source))
        write_samples(tmp_path / "out" / "copy.jsonl", samples)
        assert list(read_samples(tmp_path / "out" / "copy.jsonl")) == samples
        assert not [p for p in (tmp_path / "out").iterdir() if p.name.endswith(".tmp")]


class TestMergeLabelSources:
    """merge_label_sources: union with provenance precedence."""

    def setup_method(self):
        self.named = MentionSample.labeled(
            ["The"], ["Leo"], ["acted"], MentionKind.NAMED, {"actor": Provenance.EL}
        )

    def test_existing_tag_wins(self):
        merged = merge_label_sources(self.named, {"actor", "person"})
        assert merged.label_sources == {"actor": Provenance.EL, "person": Provenance.MLM}
        assert merged.labels == frozenset({"actor", "person"})

    def test_empty_mlm_set_is_identity(self):
        nominal = MentionSample.labeled([], ["the", "actor"], [], MentionKind.NOMINAL, {"actor": Provenance.HEAD})
        assert merge_label_sources(nominal, set()) == nominal

    def test_pronoun_takes_mlm_labels_only(self):
        pronoun = MentionSample.labeled([], ["He"], ["ran"], MentionKind.PRONOUN, {"actor": Provenance.EL})
        merged = merge_label_sources(pronoun, {"person"})
        assert merged.label_sources == {"person": Provenance.MLM}

    def test_mlm_never_downgrades_stronger_tags(self):
        sample = MentionSample.labeled([], ["the", "actor"], [], MentionKind.NOMINAL, {
            "actor": Provenance.HEAD, "person": Provenance.HUMAN, "star": Provenance.MLM,
        })
        merged = merge_label_sources(sample, {"actor", "person", "star", "celebrity"})
        assert merged.label_sources == {
            "actor": Provenance.HEAD, "person": Provenance.HUMAN,
            "star": Provenance.MLM, "celebrity": Provenance.MLM,
        }

    @pytest.mark.parametrize("kind", list(MentionKind))
    def test_merging_twice_changes_nothing(self, kind):
        sample = MentionSample.labeled(["The"], ["Leo"], ["acted"], kind, {"actor": Provenance.EL})
        once = merge_label_sources(sample, {"actor", "person"})
        assert merge_label_sources(once, {"actor", "person"}) == once

    def test_provenance_rank_orders_sources(self):
        ranks = [p.rank for p in (Provenance.HUMAN, Provenance.EL, Provenance.HEAD, Provenance.MLM)]
        assert ranks == sorted(ranks, reverse=True)
        assert Provenance.EL.is_strong and Provenance.HEAD.is_strong
        assert not Provenance.MLM.is_strong and not Provenance.HUMAN.is_strong


class TestPronounMentions:
    """extract_pronoun_mentions: one sample per lexicon match."""

    def test_single_pronoun(self):
        samples = list(extract_pronoun_mentions([tokenize("He ran.")], load_pronoun_lexicon()))
        assert len(samples) == 1
        assert samples[0].mention_tokens == ("He",)
        assert samples[0].right_context == ("ran", ".")
        assert samples[0].labels == frozenset()

    def test_no_pronoun_no_samples(self):
        assert list(extract_pronoun_mentions([tokenize("Paris is large.")])) == []

    def test_every_match_is_a_mention(self):
        samples = list(extract_pronoun_mentions([tokenize("They told them.")]))
        assert [s.mention_tokens for s in samples] == [("They",), ("them",)]
        assert all(s.mention_kind is MentionKind.PRONOUN for s in samples)

    def test_custom_lexicon_and_sentence_file(self, tmp_path):
        lexicon = load_pronoun_lexicon(_write(tmp_path / "pronouns.txt", ["Whoever"]))
        sentences = read_sentences(_write(tmp_path / "raw.txt", ["whoever wins , he smiles .", "", "Nobody ."]))
        samples = list(extract_pronoun_mentions(sentences, lexicon))
        assert [s.mention_tokens for s in samples] == [("whoever",)]

    def test_empty_lexicon_file_is_rejected(self, tmp_path):
        with pytest.raises(CorpusFormatError):
            load_pronoun_lexicon(_write(tmp_path / "pronouns.txt", [""]))

    def test_invalid_utf8_in_a_list_file(self, tmp_path):
        path = tmp_path / "pronouns.txt"
        path.write_bytes(b"he\nsh\xe9\n")
        with pytest.raises(CorpusFormatError) as exc:
            load_pronoun_lexicon(path)
        assert exc.value.line_number == 2
