import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entlink.corpus import entity_frequencies, save_corpus
from entlink.synthetic import (FIRST, THIRD, SyntheticSpec, SyntheticSpecError, generate_catalog, generate_kb,
                               generate_synthetic_corpus, split_scenes, zipf_weights)


def _generate(spec, seed):
    cat = generate_catalog(spec, seed)
    kb = generate_kb(cat, seed)
    return generate_synthetic_corpus(spec, seed, kb, cat), kb


class TestGenerator:
    def test_byte_identical_reruns(self, tmp_path):
        spec = SyntheticSpec(n_entities=5, n_scenes=10)
        for name in ("a", "b"):
            save_corpus(_generate(spec, 7)[0], tmp_path / f"{name}.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
        assert (tmp_path / "catalog.tsv").exists()

    def test_different_seeds_differ(self):
        spec = SyntheticSpec(n_entities=5, n_scenes=4)
        assert _generate(spec, 1)[0] != _generate(spec, 2)[0]

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_first_person_refers_to_a_speaker(self, seed):
        spec = SyntheticSpec(n_entities=8, n_scenes=4, mention_mix={"first": 1.0})
        corpus = generate_synthetic_corpus(spec, seed)
        mentions = list(corpus.mentions())
        assert mentions
        for _, utt, m in mentions:
            assert m.entity in utt.speakers
            assert utt.tokens[m.start] in FIRST

    def test_zipf_slope(self):
        spec = SyntheticSpec(n_entities=50, n_scenes=200, zipf_exponent=1.0)
        corpus, _ = _generate(spec, 0)
        freq = entity_frequencies(corpus)
        counts = np.sort([freq[e] for e in range(50)])[::-1]
        counts = counts[counts > 0]
        slope = np.polyfit(np.log(np.arange(1, len(counts) + 1)), np.log(counts), 1)[0]
        assert abs(slope + 1) < 0.15

    def test_third_person_agrees_with_gender(self):
        corpus, kb = _generate(SyntheticSpec(n_entities=10, n_scenes=30), 3)
        gender = kb.attribute_map("gender")
        seen = 0
        for _, utt, m in corpus.mentions():
            tok = utt.tokens[m.start]
            if m.start == m.end and tok in THIRD["man"] + THIRD["woman"]:
                assert tok in THIRD[gender[m.entity]]
                seen += 1
        assert seen > 0

    def test_names_are_entity_specific(self):
        corpus, _ = _generate(SyntheticSpec(n_entities=10, n_scenes=20), 4)
        cat = corpus.catalog
        owners = {}
        for e, name in enumerate(cat.names[:-1]):
            for tok in name.split():
                owners.setdefault(tok, set()).add(e)
        for _, utt, m in corpus.mentions():
            span = utt.tokens[m.start:m.end + 1]
            if span[0] in owners:
                for tok in span:
                    assert owners[tok] == {m.entity}

    def test_common_nouns_use_jobs(self):
        corpus, kb = _generate(SyntheticSpec(n_entities=10, n_scenes=20), 5)
        jobs = kb.attribute_map("job")
        for _, utt, m in corpus.mentions():
            if utt.tokens[m.start] == "the":
                assert utt.tokens[m.end] == jobs[m.entity]

    def test_unknown_is_last(self):
        cat = generate_catalog(SyntheticSpec(n_entities=5), 0)
        assert cat.unknown == 5 and cat.size == 6
        assert cat.main == frozenset(range(5))


class TestSpec:
    def test_third_person_needs_kb(self):
        with pytest.raises(SyntheticSpecError, match="knowledge base"):
            generate_synthetic_corpus(SyntheticSpec(n_entities=5, mention_mix={"third": 1.0}), 0)

    def test_unknown_key(self):
        with pytest.raises(SyntheticSpecError, match="unknown"):
            SyntheticSpec.from_dict({"n_entites": 4})

    def test_json_round_trip(self, tmp_path):
        spec = SyntheticSpec(n_entities=9, utterances_per_scene=(3, 4))
        (tmp_path / "s.json").write_text(json.dumps(spec.to_dict()))
        assert SyntheticSpec.load(tmp_path / "s.json") == spec

    def test_zipf_weights(self):
        w = zipf_weights(4, 1.0)
        np.testing.assert_allclose(w, np.array([1, 1 / 2, 1 / 3, 1 / 4]) / (25 / 12))


class TestSplit:
    def test_partition(self):
        corpus, _ = _generate(SyntheticSpec(n_entities=5, n_scenes=20), 0)
        parts = split_scenes(corpus, (0.6, 0.15, 0.25), 0)
        ids = [[s.scene_id for s in p.scenes] for p in parts]
        assert [len(i) for i in ids] == [12, 3, 5]
        assert sorted(sum(ids, [])) == sorted(s.scene_id for s in corpus.scenes)
