import itertools

import numpy as np
import pytest
from conftest import make_scene, tiny_bundle
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from entlink.analysis import (ActivationDump, ActivationRecord, AnalysisError, ablation_eval, dump_activations,
                              entity_name_rsa, mention_pair_similarity, name_map, pairwise_cosines, pca_2d, rsa,
                              spearman, value_drift)
from entlink.corpus import Corpus, Episode


def brute_spearman(a, b):
    def ranks(x):
        out = np.empty(len(x))
        for i, v in enumerate(x):
            out[i] = sum(1 for w in x if w < v) + (sum(1 for w in x if w == v) + 1) / 2
        return out
    ra, rb = ranks(a), ranks(b)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    return float(ra @ rb / np.sqrt((ra @ ra) * (rb @ rb)))


class TestRSA:
    def test_identical_spaces(self, rng):
        A = rng.normal(size=(8, 5))
        assert rsa(A, A) == pytest.approx(1.0, abs=1e-12)

    def test_scale_invariant(self, rng):
        A = rng.normal(size=(8, 5))
        assert rsa(A, 2 * A) == pytest.approx(1.0, abs=1e-12)

    def test_pair_count(self, rng):
        assert pairwise_cosines(rng.normal(size=(7, 3))).shape == (21,)

    def test_too_few_rows(self, rng):
        with pytest.raises(AnalysisError, match="at least 3"):
            rsa(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))

    def test_zero_row(self):
        with pytest.raises(AnalysisError, match="nonzero"):
            rsa(np.eye(3) * [1, 1, 0], np.eye(3))

    def test_row_mismatch(self, rng):
        with pytest.raises(AnalysisError, match="rows"):
            rsa(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))

    def test_spearman_with_ties(self):
        a = [1.0, 2.0, 2.0, 3.0, 0.5]
        b = [0.1, 0.3, 0.2, 0.2, 0.0]
        assert abs(spearman(a, b) - brute_spearman(a, b)) < 1e-9

    def test_constant_list(self):
        with pytest.raises(AnalysisError, match="constant"):
            spearman([1, 1, 1], [1, 2, 3])

    def test_pairwise_cosines_oracle(self):
        X = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 2.0]])
        np.testing.assert_allclose(pairwise_cosines(X), [1 / np.sqrt(2), 0.0, 1 / np.sqrt(2)], atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (6, 4), elements=st.floats(-5, 5)), st.permutations(range(6)))
    def test_symmetric_and_bounded(self, A, perm):
        A = A + 0.5 * np.sign(A + 1e-3)  # keep rows away from zero
        B = A[list(perm)]
        try:
            r1, r2 = rsa(A, B), rsa(B, A)
        except AnalysisError:
            return
        assert r1 == pytest.approx(r2, abs=1e-12)
        assert -1.0 <= r1 <= 1.0


class TestEntityNameRSA:
    def test_uses_name_tokens(self, tiny_corpus):
        b = tiny_bundle("entlib", tiny_corpus)
        names = {0: "Ross", 1: "Monica", 2: "Rachel"}
        res = entity_name_rsa(b, names)
        A = b["W_e"].data[[0, 1, 2]]
        B = b["W_t"].data[[b.vocab.stoi[n] for n in ("Ross", "Monica", "Rachel")]]
        assert res.rho == rsa(A, B)
        assert (res.n_entities, res.n_pairs) == (3, 3)

    def test_not_enough_named(self, tiny_corpus):
        with pytest.raises(AnalysisError, match="need at least 3"):
            entity_name_rsa(tiny_bundle("entlib", tiny_corpus), {0: "Ross", 1: "zebra"})

    def test_main_grouping(self, tiny_corpus):
        names = {0: "Ross", 1: "Monica", 2: "Rachel", 3: "hey"}
        res = entity_name_rsa(tiny_bundle("entlib", tiny_corpus), names, grouping="main")
        assert res.n_entities == 3


class TestNameMap:
    def test_most_frequent_name_token(self, catalog):
        utts = [((1,), "Ross here", [(0, 0, 0)])] * 10 + [((1,), "Geller here", [(0, 0, 0)])] * 3
        corpus = Corpus((Episode("e", (make_scene("s", utts),)),), catalog)
        assert name_map(corpus) == {0: "Ross"}

    def test_tie_is_lexicographic(self, catalog):
        utts = [((1,), "Ross Geller here", [(0, 1, 0)])]
        corpus = Corpus((Episode("e", (make_scene("s", utts),)),), catalog)
        assert name_map(corpus) == {0: "Geller"}

    def test_pronouns_ignored(self, tiny_corpus):
        assert name_map(tiny_corpus) == {0: "Geller", 1: "Monica", 2: "Rachel"}


def _dump(vectors, entities):
    return ActivationDump([ActivationRecord(str(i), e, np.asarray(v, dtype=float))
                           for i, (v, e) in enumerate(zip(vectors, entities))])


class TestMentionPairs:
    def test_oracle(self):
        vecs = [[1, 0], [1, 1], [0, 1], [3, 4], [3, 4]]
        ents = [0, 0, 0, 1, 1]
        pairs0 = [1 / np.sqrt(2), 0.0, 1 / np.sqrt(2)]
        expected = (np.mean(pairs0) + 1.0) / 2
        assert abs(mention_pair_similarity(_dump(vecs, ents)) - expected) < 1e-12

    def test_singletons_ignored(self):
        assert mention_pair_similarity(_dump([[1, 0], [1, 0], [0, 1]], [0, 0, 5])) == pytest.approx(1.0)

    def test_no_pairs(self):
        with pytest.raises(AnalysisError, match="two or more"):
            mention_pair_similarity(_dump([[1, 0], [0, 1]], [0, 1]))

    def test_missing_query_layer(self):
        with pytest.raises(AnalysisError, match="not captured"):
            mention_pair_similarity(_dump([[1, 0], [1, 0]], [0, 0]), layer="q")

    def test_brute_force(self, rng):
        X = rng.normal(size=(9, 3))
        ents = [0, 1, 0, 2, 1, 0, 2, 2, 3]
        per = []
        for e in sorted(set(ents)):
            idx = [i for i, x in enumerate(ents) if x == e]
            cos = [X[i] @ X[j] / np.linalg.norm(X[i]) / np.linalg.norm(X[j])
                   for i, j in itertools.combinations(idx, 2)]
            if cos:
                per.append(np.mean(cos))
        assert abs(mention_pair_similarity(_dump(X, ents)) - np.mean(per)) < 1e-9


class TestDumps:
    def test_one_record_per_mention(self, tiny_corpus):
        b = tiny_bundle("entnet", tiny_corpus)
        dump = dump_activations(b, tiny_corpus)
        assert len(dump) == 6
        assert dump.matrix("h").shape == (6, 6)
        assert dump.matrix("q").shape == (6, 4)
        assert dump.records[0].mention_id == "s1:0:0-0"

    def test_bilstm_has_no_query(self, tiny_corpus):
        dump = dump_activations(tiny_bundle("bilstm", tiny_corpus), tiny_corpus)
        assert all(r.q is None for r in dump.records)

    def test_round_trip(self, tmp_path, tiny_corpus):
        dump = dump_activations(tiny_bundle("entlib", tiny_corpus), tiny_corpus)
        dump.save(tmp_path / "a.jsonl")
        back = ActivationDump.load(tmp_path / "a.jsonl")
        assert [r.mention_id for r in back.records] == [r.mention_id for r in dump.records]
        np.testing.assert_array_equal(back.matrix("h"), dump.matrix("h"))
        np.testing.assert_array_equal(back.matrix("q"), dump.matrix("q"))

    def test_unknown_layer(self):
        with pytest.raises(AnalysisError, match="unknown layer"):
            _dump([[1, 0]], [0]).matrix("z")

    def test_malformed_file(self, tmp_path):
        (tmp_path / "a.jsonl").write_text('{"mention": "m", "entity": 0, "layer": "x", "vector": [1]}\n')
        with pytest.raises(AnalysisError, match=":1:"):
            ActivationDump.load(tmp_path / "a.jsonl")


class TestDrift:
    def test_zero_without_updates(self, tiny_corpus):
        b = tiny_bundle("entnet", tiny_corpus).with_flags(updates_enabled=False)
        d = value_drift(b, tiny_corpus.scenes[0])
        assert len(d) == len(tiny_corpus.scenes[0].tokens())
        assert np.all(d.max_abs == 0) and np.all(d.frobenius == 0)

    def test_moves_with_updates(self, tiny_corpus):
        # steps where every gate is cut by the ReLU leave the values in place
        d = value_drift(tiny_bundle("entnet", tiny_corpus), tiny_corpus.scenes[0])
        assert d.frobenius[0] > 0
        assert np.all(d.frobenius >= 0)

    def test_needs_entnet(self, tiny_corpus):
        with pytest.raises(AnalysisError, match="EntNet"):
            value_drift(tiny_bundle("entlib", tiny_corpus), tiny_corpus.scenes[0])


class TestAblation:
    def test_same_flags_same_report(self, tiny_corpus):
        b = tiny_bundle("entnet", tiny_corpus)
        rep = ablation_eval(b, tiny_corpus, {0: 3, 1: 1, 2: 2}, updates_enabled=True)
        assert rep.base.to_dict() == {**rep.variant.to_dict(), "label": rep.base.label}
        assert not rep.mismatched

    def test_similarity_swap_is_flagged(self, tiny_corpus):
        rep = ablation_eval(tiny_bundle("entlib", tiny_corpus), tiny_corpus, {0: 3}, gate_similarity="dot")
        assert rep.mismatched
        assert "mismatched" in rep.render()


class TestPCA:
    def test_two_dims_is_rotation(self, rng):
        X = rng.normal(size=(20, 2)) * [3.0, 0.5]
        p = pca_2d(X)
        Xc = X - X.mean(axis=0)
        d_in = np.linalg.norm(Xc[:, None] - Xc[None], axis=-1)
        d_out = np.linalg.norm(p.coords[:, None] - p.coords[None], axis=-1)
        np.testing.assert_allclose(d_out, d_in, atol=1e-9)

    def test_duplicated_data_same_components(self, rng):
        X = rng.normal(size=(15, 5))
        np.testing.assert_allclose(pca_2d(np.vstack([X, X])).components, pca_2d(X).components, atol=1e-9)

    def test_variance_ordered(self, rng):
        p = pca_2d(rng.normal(size=(30, 6)))
        assert p.variance[0] >= p.variance[1] >= 0

    def test_sign_convention(self, rng):
        p = pca_2d(rng.normal(size=(30, 6)))
        for c in p.components:
            assert c[np.argmax(np.abs(c))] > 0

    def test_records(self):
        p = pca_2d(np.array([[0.0, 0.0], [2.0, 0.0]]), entities=[4, 5])
        assert p.records() == [{"x": -1.0, "y": 0.0, "entity": 4}, {"x": 1.0, "y": 0.0, "entity": 5}]

    def test_too_small(self):
        with pytest.raises(AnalysisError):
            pca_2d(np.ones((1, 3)))
