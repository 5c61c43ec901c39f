"""Entity-knowledge probes: unique natural-language descriptions linked by a
trained model, attribute ranking from entity embeddings, and relation
prediction by averaged vector-offset similarity."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .corpus import EntityCatalog, Scene, Utterance
from .knowledge import KnowledgeBase
from .models import ModelBundle, argmax_lowest, forward

SPEAKER_MODES = ("all", "main", "random", "none")


class ProbeError(ValueError):
    pass


# ----------------------------------------------------------- descriptions


@dataclass(frozen=True)
class Property:
    kind: str  # "attr" or "rel"
    name: str
    value: object  # attribute value, or the object entity of a relation

    def phrase(self, catalog: EntityCatalog) -> str:
        if self.kind == "attr":
            return str(self.value)
        return f"{self.name} of {catalog.name(self.value)}"


@dataclass(frozen=True)
class Description:
    target: int
    properties: tuple[Property, ...]
    text: str
    head: int = 1  # index of "person"

    @property
    def tokens(self):
        return tuple(self.text.split())


def entity_properties(kb: KnowledgeBase) -> dict[int, list[Property]]:
    props = {e: [] for e in sorted(kb.entities)}
    for e, name, value in kb.attributes:
        props[e].append(Property("attr", name, value))
    for s, rel, o in kb.relations:
        props[s].append(Property("rel", rel, o))
    return {e: sorted(set(p), key=lambda x: (x.kind, x.name, str(x.value))) for e, p in props.items()}


def extensions(kb: KnowledgeBase) -> dict[Property, frozenset]:
    out: dict[Property, set] = {}
    for e, props in entity_properties(kb).items():
        for p in props:
            out.setdefault(p, set()).add(e)
    return {p: frozenset(s) for p, s in out.items()}


def article(phrase: str, definite: bool) -> str:
    if definite:
        return "the"
    return "an" if phrase[:1].lower() in "aeiou" else "a"


def render(properties, ext, catalog: EntityCatalog) -> str:
    parts = []
    for p in properties:
        phrase = p.phrase(catalog)
        parts.append(f"{article(phrase, len(ext[p]) == 1)} {phrase}")
    return "This person is " + " and ".join(parts) + " ."


def satisfying(properties, ext) -> frozenset:
    sets = [ext[p] for p in properties]
    return frozenset.intersection(*sets)


def generate_descriptions(kb: KnowledgeBase, catalog: EntityCatalog, max_props=3) -> list[Description]:
    """All minimal property sets (size <= ``max_props``) that single out one entity.

    Entities are visited in id order and property sets in lexicographic
    combination order; every result is re-checked against the whole KB.
    """
    if not kb.attributes and not kb.relations:
        raise ProbeError("knowledge base is empty")
    ext = extensions(kb)
    out = []
    for target, props in entity_properties(kb).items():
        found: list[frozenset] = []
        for size in range(1, max_props + 1):
            for combo in itertools.combinations(props, size):
                if any(f <= frozenset(combo) for f in found):
                    continue
                if satisfying(combo, ext) == {target}:
                    found.append(frozenset(combo))
                    out.append(Description(target, combo, render(combo, ext, catalog)))
    for d in out:
        if satisfying(d.properties, ext) != {d.target}:
            raise AssertionError(f"description does not single out entity {d.target}: {d.text}")
    return out


def _probe_scene(tokens, speaker, scene_id="probe") -> Scene:
    return Scene(scene_id, (Utterance((speaker,), tuple(tokens), ()),))


@dataclass
class ProbeRecord:
    text: str
    target: int
    prediction: int
    correct: bool


@dataclass
class ProbeResult:
    records: list
    accuracy: float

    def to_dict(self):
        return {"accuracy": self.accuracy,
                "records": [vars(r) for r in self.records]}


def link_descriptions(bundle: ModelBundle, descriptions, speaker=None, batch_size=25) -> ProbeResult:
    """Feed each description as a one-utterance scene and read the prediction at its head noun.

    ``speaker`` defaults to the catalog's UNKNOWN entity; out-of-vocabulary
    tokens map to UNK.
    """
    if not descriptions:
        raise ProbeError("no descriptions to link")
    if speaker is None:
        speaker = bundle.catalog.unknown
    override = None
    records = []
    for i in range(0, len(descriptions), batch_size):
        chunk = descriptions[i:i + batch_size]
        if speaker is None:
            override = {j: np.zeros(bundle.config.n_entities) for j in range(len(chunk))}
            scenes = [_probe_scene(d.tokens, 0, f"probe{i + j}") for j, d in enumerate(chunk)]
        else:
            scenes = [_probe_scene(d.tokens, speaker, f"probe{i + j}") for j, d in enumerate(chunk)]
        out = forward(bundle, scenes, speaker_override=override,
                      extra_positions=[(j, d.head) for j, d in enumerate(chunk)])
        pred = argmax_lowest(out.gates.data)
        for d, p in zip(chunk, pred):
            records.append(ProbeRecord(d.text, d.target, int(p), int(p) == d.target))
    return ProbeResult(records, float(np.mean([r.correct for r in records])))


# ------------------------------------------------------------- attributes


def speaker_vector(bundle: ModelBundle, mode, rng=None) -> np.ndarray:
    """Speaker weights for attribute probes; several speakers are summed."""
    cat = bundle.catalog
    N = bundle.config.n_entities
    people = [e for e in range(N) if e != cat.unknown]
    v = np.zeros(N)
    if mode == "all":
        v[people] = 1.0
    elif mode == "main":
        v[sorted(cat.main)] = 1.0
    elif mode == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        v[people[int(rng.integers(len(people)))]] = 1.0
    elif mode != "none":
        raise ProbeError(f"unknown speaker mode {mode!r}; expected one of {SPEAKER_MODES}")
    return v


def attribute_value_repr(bundle: ModelBundle, phrase, mode="none", rng=None) -> np.ndarray:
    """Entity query extracted at the last token of ``phrase`` fed as its own utterance."""
    if bundle.kind == "bilstm":
        raise ProbeError("the biLSTM model has no entity query; attribute probes are unsupported")
    tokens = phrase.split() if isinstance(phrase, str) else list(phrase)
    if not tokens:
        raise ProbeError("empty attribute phrase")
    override = {0: speaker_vector(bundle, mode, rng)}
    out = forward(bundle, [_probe_scene(tokens, 0)], speaker_override=override,
                  extra_positions=[(0, len(tokens) - 1)])
    return out.query.data[-1].copy()


def cosine_matrix(A, B) -> np.ndarray:
    """Cosines between rows of A and rows of B; zero-norm rows give 0."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    na = np.linalg.norm(A, axis=-1, keepdims=True)
    nb = np.linalg.norm(B, axis=-1, keepdims=True)
    An = np.where(na > 0, A / np.where(na > 0, na, 1.0), 0.0)
    Bn = np.where(nb > 0, B / np.where(nb > 0, nb, 1.0), 0.0)
    return An @ Bn.T


def rank_of(scores, gold) -> int:
    """1-based rank of ``scores[gold]`` in descending order; ties count against the gold item."""
    scores = np.asarray(scores)
    return int(np.sum(scores >= scores[gold]))


def mean_reciprocal_rank(ranks) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ProbeError("no ranks to average")
    if np.any(ranks < 1):
        raise ProbeError("ranks are 1-based")
    return float(np.mean(1.0 / ranks))


def random_mrr(n) -> float:
    """Expected MRR of a uniformly random ranking of ``n`` candidates, H_n / n."""
    if n < 1:
        raise ProbeError("need at least one candidate")
    return float(np.sum(1.0 / np.arange(1, n + 1)) / n)


def random_mrr_monte_carlo(n, trials=20000, seed=0) -> float:
    """MRR of the gold item (index 0) under random candidate scores."""
    rng = np.random.default_rng(seed)
    scores = rng.random((trials, n))
    ranks = 1 + np.sum(scores[:, 1:] > scores[:, :1], axis=1)
    return mean_reciprocal_rank(ranks)


@dataclass
class AttributeMRR:
    attribute: str
    per_mode: dict
    best_mode: str
    best: float
    n_entities: int
    n_values: int
    random: float


def attribute_mrr(bundle: ModelBundle, kb: KnowledgeBase, attribute, modes=SPEAKER_MODES, seed=0) -> AttributeMRR:
    """Rank every value of ``attribute`` by cosine to each entity's embedding."""
    gold_map = {e: v for e, v in kb.attribute_map(attribute).items() if e < bundle.config.n_entities}
    if not gold_map:
        raise ProbeError(f"attribute {attribute!r} does not occur in the knowledge base")
    values = kb.attribute_values(attribute)
    ents = sorted(gold_map)
    W_e = bundle["W_e"].data[ents]
    per_mode = {}
    for mode in modes:
        rng = np.random.default_rng(seed)
        reprs = np.stack([attribute_value_repr(bundle, v, mode, rng) for v in values])
        sims = cosine_matrix(W_e, reprs)
        ranks = [rank_of(sims[i], values.index(gold_map[e])) for i, e in enumerate(ents)]
        per_mode[mode] = mean_reciprocal_rank(ranks)
    best_mode = max(per_mode, key=lambda m: (per_mode[m], -list(modes).index(m)))
    return AttributeMRR(attribute, per_mode, best_mode, per_mode[best_mode], len(ents), len(values),
                        random_mrr(len(values)))


# -------------------------------------------------------------- relations


def relation_scores(embeddings, kb: KnowledgeBase, target_pair, min_pairs=2) -> list[tuple[str, float]]:
    """Average offset similarity of ``target_pair`` to each relation's other pairs.

    ``s(R) = mean over (x, y) in R, (x, y) != target, of cos(a - b, x - y)``.
    Relations with fewer than ``min_pairs`` pairs are skipped; a zero offset
    scores 0.  Returns relations by descending score, ties by name.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    a, b = target_pair
    d = E[a] - E[b]
    out = []
    for rel, pairs in sorted(kb.relation_pairs().items()):
        if len(pairs) < min_pairs:
            continue
        ex = [p for p in pairs if tuple(p) != (a, b)]
        if not ex:
            continue
        offsets = np.stack([E[x] - E[y] for x, y in ex])
        out.append((rel, float(np.mean(cosine_matrix(d[None, :], offsets)))))
    out.sort(key=lambda kv: (-kv[1], kv[0]))
    return out


@dataclass
class RelationMRR:
    mrr: float
    n_pairs: int
    n_relations: int
    random: float


def relation_mrr(embeddings, kb: KnowledgeBase, min_pairs=2) -> RelationMRR:
    """MRR of the gold relation over every KB pair whose relation qualifies."""
    qualifying = {r for r, p in kb.relation_pairs().items() if len(p) >= min_pairs}
    if not qualifying:
        raise ProbeError(f"no relation type has {min_pairs} or more pairs")
    ranks = []
    for s, rel, o in kb.relations:
        if rel not in qualifying:
            continue
        ranked = relation_scores(embeddings, kb, (s, o), min_pairs)
        scores = [sc for _, sc in ranked]
        ranks.append(rank_of(scores, [r for r, _ in ranked].index(rel)))
    return RelationMRR(mean_reciprocal_rank(ranks), len(ranks), len(qualifying), random_mrr(len(qualifying)))
