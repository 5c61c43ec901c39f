"""Representation analyses: entity/name RSA, same-referent mention similarity,
EntNet value drift, flag ablations and a 2D PCA projection of activations."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .corpus import Corpus, batch_scenes
from .evaluation import MetricReport, catalog_name_tokens, mention_type, metric_report, predict
from .models import ModelBundle, forward

LAYERS = ("h", "q")


class AnalysisError(ValueError):
    pass


# ------------------------------------------------------------ activations


@dataclass
class ActivationRecord:
    mention_id: str
    entity: int
    h: np.ndarray
    q: np.ndarray | None = None

    def vector(self, layer):
        v = self.h if layer == "h" else self.q
        if v is None:
            raise AnalysisError(f"layer {layer!r} was not captured for mention {self.mention_id}")
        return v


@dataclass
class ActivationDump:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def entities(self):
        return np.array([r.entity for r in self.records], dtype=np.int64)

    def matrix(self, layer):
        if layer not in LAYERS:
            raise AnalysisError(f"unknown layer {layer!r}; expected one of {LAYERS}")
        if not self.records:
            raise AnalysisError("empty activation dump")
        return np.stack([r.vector(layer) for r in self.records])

    def save(self, path):
        """One line per (mention, layer): id, entity, layer tag and the vector."""
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                for layer in LAYERS:
                    v = r.h if layer == "h" else r.q
                    if v is not None:
                        fh.write(json.dumps({"mention": r.mention_id, "entity": r.entity, "layer": layer,
                                             "vector": [float(x) for x in v]}) + "\n")

    @classmethod
    def load(cls, path):
        by_id: dict[str, ActivationRecord] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    mid, layer = str(rec["mention"]), rec["layer"]
                    vec = np.asarray(rec["vector"], dtype=np.float64)
                    if layer not in LAYERS:
                        raise ValueError(f"unknown layer {layer!r}")
                    r = by_id.setdefault(mid, ActivationRecord(mid, int(rec["entity"]), None))
                    setattr(r, layer, vec)
                except (KeyError, TypeError, ValueError) as err:
                    raise AnalysisError(f"{path}:{lineno}: malformed activation record ({err})") from None
        for r in by_id.values():
            if r.h is None:
                raise AnalysisError(f"{path}: mention {r.mention_id} has no h vector")
        return cls(list(by_id.values()))


def dump_activations(bundle: ModelBundle, corpus: Corpus, scenes_per_batch=25) -> ActivationDump:
    """Hidden states (and queries, when the model has them) at every mention head, eval mode."""
    records = []
    for batch in batch_scenes(corpus.scenes, scenes_per_batch):
        if not any(u.mentions for s in batch for u in s.utterances):
            continue
        out = forward(bundle, batch)
        for i, ref in enumerate(out.refs):
            m = batch[ref.scene].utterances[ref.utterance].mentions[ref.mention]
            mid = f"{batch[ref.scene].scene_id}:{ref.utterance}:{m.start}-{m.end}"
            q = out.query.data[i].copy() if out.query is not None else None
            records.append(ActivationRecord(mid, ref.entity, out.hidden.data[i].copy(), q))
    return ActivationDump(records)


# ------------------------------------------------------------------- RSA


def name_map(corpus: Corpus) -> dict[int, str]:
    """Entity -> the name token most often used for it in proper-noun mentions.

    Ties go to the lexicographically smallest token; entities never named are absent.
    """
    names = catalog_name_tokens(corpus.catalog)
    counts: dict[int, Counter] = defaultdict(Counter)
    for scene in corpus.scenes:
        for utt in scene.utterances:
            for m in utt.mentions:
                span = utt.tokens[m.start:m.end + 1]
                if mention_type(span, names) != "proper-noun":
                    continue
                for tok in span:
                    if tok in names or tok[:1].isupper():
                        counts[m.entity][tok] += 1
    return {e: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for e, c in sorted(counts.items()) if c}


def pairwise_cosines(X) -> np.ndarray:
    """Cosines of all unordered row pairs (i < j), in row-major order."""
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise AnalysisError("RSA needs nonzero rows in both spaces")
    U = X / norms[:, None]
    iu = np.triu_indices(X.shape[0], k=1)
    return (U @ U.T)[iu]


def spearman(a, b) -> float:
    """Spearman correlation with average ranks for ties."""
    ra = rankdata(a)
    rb = rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    sxx, syy = float(ra @ ra), float(rb @ rb)
    if sxx == 0 or syy == 0:
        raise AnalysisError("Spearman correlation undefined for a constant list")
    return float(np.clip((ra @ rb) / np.sqrt(sxx * syy), -1.0, 1.0))


def rsa(space_a, space_b) -> float:
    """Spearman correlation between the pairwise cosine similarities of two
    spaces whose rows describe the same entities in the same order."""
    A = np.asarray(space_a, dtype=np.float64)
    B = np.asarray(space_b, dtype=np.float64)
    if A.shape[0] != B.shape[0]:
        raise AnalysisError(f"spaces have different numbers of rows: {A.shape[0]} vs {B.shape[0]}")
    if A.shape[0] < 3:
        raise AnalysisError("RSA needs at least 3 shared entities")
    return spearman(pairwise_cosines(A), pairwise_cosines(B))


@dataclass
class RSAResult:
    grouping: str
    rho: float
    n_entities: int
    n_pairs: int


def entity_name_rsa(bundle: ModelBundle, names: dict[int, str], grouping="all") -> RSAResult:
    """RSA between entity embeddings and the token embeddings of their names.

    Only entities with a name whose token is in the vocabulary take part;
    ``grouping="main"`` further restricts to the catalog's main entities.
    """
    vocab = bundle.vocab
    ents = [e for e, tok in sorted(names.items())
            if tok in vocab.stoi and e < bundle.config.n_entities
            and (grouping == "all" or e in bundle.catalog.main)]
    if grouping not in ("all", "main"):
        raise AnalysisError(f"unknown grouping {grouping!r}")
    if len(ents) < 3:
        raise AnalysisError(f"only {len(ents)} named entities available for RSA; need at least 3")
    A = bundle["W_e"].data[ents]
    B = bundle["W_t"].data[[vocab.stoi[names[e]] for e in ents]]
    n = len(ents)
    return RSAResult(grouping, rsa(A, B), n, n * (n - 1) // 2)


# ------------------------------------------------------ mention similarity


def mention_pair_similarity(dump: ActivationDump, layer="h") -> float:
    """Mean over entities of the mean cosine between their mentions' vectors.

    Entities with fewer than two mentions do not count.
    """
    X = dump.matrix(layer)
    ents = dump.entities
    per_entity = []
    for e in np.unique(ents):
        rows = X[ents == e]
        if len(rows) < 2:
            continue
        norms = np.linalg.norm(rows, axis=1)
        safe = np.where(norms > 0, norms, 1.0)
        U = np.where(norms[:, None] > 0, rows / safe[:, None], 0.0)
        iu = np.triu_indices(len(rows), k=1)
        per_entity.append(float(np.mean((U @ U.T)[iu])))
    if not per_entity:
        raise AnalysisError("no entity has two or more mentions")
    return float(np.mean(per_entity))


# ----------------------------------------------------------------- drift


@dataclass
class DriftSeries:
    max_abs: np.ndarray  # per token step, max |V_{i+1} - V_i|
    frobenius: np.ndarray

    def __len__(self):
        return len(self.max_abs)


def value_drift(bundle: ModelBundle, scene) -> DriftSeries:
    """Step-to-step change of EntNet's value memory over one scene, starting from V_0."""
    if bundle.kind != "entnet":
        raise AnalysisError("value drift needs an EntNet model")
    out = forward(bundle, [scene], trace_values=True)
    trace = out.value_trace[0]
    diff = np.diff(trace, axis=0)
    return DriftSeries(np.abs(diff).max(axis=(1, 2)), np.sqrt((diff ** 2).sum(axis=(1, 2))))


# -------------------------------------------------------------- ablation


@dataclass
class AblationReport:
    overrides: dict
    mismatched: bool  # the variant changes how the trained weights are read
    base: MetricReport
    variant: MetricReport

    def render(self):
        tag = " (mismatched variant)" if self.mismatched else ""
        lines = [f"overrides: {self.overrides}{tag}",
                 f"{'':10s} {'base F1':>8s} {'variant F1':>11s}",
                 f"{'all':10s} {100 * self.base.f1_all:8.2f} {100 * self.variant.f1_all:11.2f}",
                 f"{'main':10s} {100 * self.base.f1_main:8.2f} {100 * self.variant.f1_main:11.2f}"]
        return "\n".join(lines) + "\n"


def ablation_eval(bundle: ModelBundle, corpus: Corpus, train_freq: dict, **overrides) -> AblationReport:
    """Evaluate the same weights with and without flag overrides."""
    variant = bundle.with_flags(**overrides)
    changed = {k: v for k, v in overrides.items() if getattr(bundle.flags, k) != v}
    base_rep = metric_report(predict(bundle, corpus), train_freq, bundle.catalog, label=bundle.kind)
    var_label = bundle.kind + "".join(f" {k}={v}" for k, v in sorted(changed.items()))
    var_rep = metric_report(predict(variant, corpus), train_freq, bundle.catalog, label=var_label)
    return AblationReport(dict(overrides), "gate_similarity" in changed, base_rep, var_rep)


# -------------------------------------------------------------------- PCA


@dataclass
class Projection:
    coords: np.ndarray  # (n, 2)
    components: np.ndarray  # (2, d)
    variance: np.ndarray  # variance along each component
    entities: np.ndarray | None = None

    def records(self):
        ents = self.entities if self.entities is not None else [None] * len(self.coords)
        return [{"x": float(x), "y": float(y), "entity": None if e is None else int(e)}
                for (x, y), e in zip(self.coords, ents)]


def pca_2d(X, entities=None) -> Projection:
    """Project mean-centred rows of ``X`` onto their top two principal axes.

    Each axis is signed so that its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 2:
        raise AnalysisError(f"PCA needs at least 2 points in at least 2 dimensions, got {X.shape}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / X.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    comps = evecs[:, order].T
    flip = np.sign(comps[np.arange(2), np.argmax(np.abs(comps), axis=1)])
    comps *= np.where(flip == 0, 1.0, flip)[:, None]
    return Projection(Xc @ comps.T, comps, np.maximum(evals[order], 0.0),
                      None if entities is None else np.asarray(entities))
