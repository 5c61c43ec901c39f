"""Scoring: macro-F1 and accuracy under class groupings, frequency buckets,
mention types, and the paired approximate randomization test."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import Corpus, EntityCatalog, batch_scenes, frequency_bucket
from .models import ModelBundle, argmax_lowest, forward

FIRST_PERSON = frozenset({"i", "me", "my", "myself", "mine"})
SECOND_PERSON = frozenset({"you", "your", "yourself", "yours"})
THIRD_PERSON = frozenset({"she", "her", "herself", "hers", "he", "him", "himself", "his", "it", "itself", "its"})
OTHER_PRONOUNS = frozenset({"we", "us", "our", "ours", "ourselves", "they", "them", "their", "theirs",
                            "themselves", "this", "that", "these", "those", "y'all"})
MENTION_TYPES = ("first-person", "second-person", "third-person", "proper-noun", "common-noun", "other")
CATCH_ALL = -1


class EvaluationError(ValueError):
    pass


def mention_type(span_tokens, name_tokens=frozenset()) -> str:
    """Surface-form mention type; ``name_tokens`` are known entity name parts."""
    words = [t for t in span_tokens if any(ch.isalnum() for ch in t)]
    if not words:
        return "other"
    if len(words) == 1:
        w = words[0].lower()
        if w in FIRST_PERSON:
            return "first-person"
        if w in SECOND_PERSON:
            return "second-person"
        if w in THIRD_PERSON:
            return "third-person"
        if w in OTHER_PRONOUNS:
            return "other"
    if any(t in name_tokens for t in words):
        return "proper-noun"
    head = words[-1]
    if head[:1].isupper():
        return "proper-noun"
    return "common-noun"


def catalog_name_tokens(catalog: EntityCatalog) -> frozenset:
    return frozenset(tok for name in catalog.names for tok in name.split())


# -------------------------------------------------------------- records


@dataclass(frozen=True)
class PredictionRecord:
    scene_id: str
    utterance: int
    start: int
    end: int
    gold: int
    pred: int
    mention_type: str

    @property
    def key(self):
        return (self.scene_id, self.utterance, self.start, self.end)


@dataclass
class PredictionSet:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def gold(self):
        return np.array([r.gold for r in self.records], dtype=np.int64)

    @property
    def pred(self):
        return np.array([r.pred for r in self.records], dtype=np.int64)

    def filter(self, keep) -> "PredictionSet":
        return PredictionSet([r for r in self.records if keep(r)])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        records = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        records.append(PredictionRecord(**json.loads(line)))
                    except (TypeError, json.JSONDecodeError) as err:
                        raise EvaluationError(f"{path}:{lineno}: malformed prediction record ({err})") from None
        return cls(records)


def predict(bundle: ModelBundle, corpus: Corpus, scenes_per_batch=25) -> PredictionSet:
    names = catalog_name_tokens(bundle.catalog)
    records = []
    scenes = corpus.scenes
    for batch in batch_scenes(scenes, scenes_per_batch):
        if not any(u.mentions for s in batch for u in s.utterances):
            continue
        out = forward(bundle, batch)
        pred = argmax_lowest(out.gates.data)
        for ref, p in zip(out.refs, pred):
            utt = batch[ref.scene].utterances[ref.utterance]
            m = utt.mentions[ref.mention]
            records.append(PredictionRecord(
                batch[ref.scene].scene_id, ref.utterance, m.start, m.end, m.entity, int(p),
                mention_type(utt.tokens[m.start:m.end + 1], names),
            ))
    return PredictionSet(records)


# ------------------------------------------------------------- grouping


@dataclass(frozen=True)
class ClassGrouping:
    """Maps entities to evaluation classes; unlisted entities share a catch-all."""

    mode: str
    classes: frozenset

    @classmethod
    def all_entities(cls, train_entities, test_entities):
        return cls("all", frozenset(train_entities) & frozenset(test_entities))

    @classmethod
    def main_entities(cls, main):
        return cls("main", frozenset(main))

    @classmethod
    def for_corpora(cls, mode, train_freq: dict, test_gold, catalog: EntityCatalog):
        if mode == "all":
            return cls.all_entities([e for e, c in train_freq.items() if c > 0], test_gold)
        if mode == "main":
            return cls.main_entities(catalog.main)
        raise EvaluationError(f"unknown grouping {mode!r}")

    @property
    def n_classes(self):
        return len(self.classes) + 1

    def map(self, entities):
        arr = np.asarray(entities, dtype=np.int64)
        known = np.isin(arr, np.fromiter(self.classes, dtype=np.int64, count=len(self.classes)))
        return np.where(known, arr, CATCH_ALL)


def macro_f1_arrays(gold, pred) -> float:
    """Unweighted mean F1 over classes occurring in gold or pred."""
    gold = np.asarray(gold)
    pred = np.asarray(pred)
    if gold.size == 0:
        raise EvaluationError("empty prediction set")
    labels, inv = np.unique(np.concatenate([gold, pred]), return_inverse=True)
    g, p = inv[:gold.size], inv[gold.size:]
    n = labels.size
    tp = np.bincount(g[g == p], minlength=n)
    support = np.bincount(g, minlength=n) + np.bincount(p, minlength=n)
    return float(np.mean(2.0 * tp / support))


def accuracy_arrays(gold, pred) -> float:
    gold = np.asarray(gold)
    if gold.size == 0:
        raise EvaluationError("empty prediction set")
    return float(np.mean(gold == np.asarray(pred)))


def macro_f1(preds: PredictionSet, grouping: ClassGrouping | None = None) -> float:
    if len(preds) == 0:
        raise EvaluationError("empty prediction set")
    if grouping is None:
        return macro_f1_arrays(preds.gold, preds.pred)
    return macro_f1_arrays(grouping.map(preds.gold), grouping.map(preds.pred))


def accuracy(preds: PredictionSet, grouping: ClassGrouping | None = None) -> float:
    if len(preds) == 0:
        raise EvaluationError("empty prediction set")
    if grouping is None:
        return accuracy_arrays(preds.gold, preds.pred)
    return accuracy_arrays(grouping.map(preds.gold), grouping.map(preds.pred))


def bucket_report(preds: PredictionSet, freq_table: dict) -> dict:
    """Entity-level accuracy per training-frequency bucket of the gold entity.

    Buckets without mentions are left out.
    """
    out = {}
    for bucket in ("high", "medium", "low"):
        sub = preds.filter(lambda r: frequency_bucket(freq_table.get(r.gold, 0)) == bucket)
        if len(sub):
            out[bucket] = {"accuracy": accuracy(sub), "mentions": len(sub)}
    return out


def mention_type_report(preds: PredictionSet, grouping: ClassGrouping | None = None) -> dict:
    counts = Counter(r.mention_type for r in preds)
    out = {}
    for t in MENTION_TYPES:
        if counts[t]:
            sub = preds.filter(lambda r: r.mention_type == t)
            out[t] = {"f1": macro_f1(sub, grouping), "accuracy": accuracy(sub, grouping), "mentions": counts[t]}
    return out


@dataclass
class MetricReport:
    f1_all: float
    acc_all: float
    f1_main: float
    acc_main: float
    n_mentions: int
    n_classes_all: int
    n_classes_main: int
    buckets: dict
    mention_types: dict
    label: str = ""

    def to_dict(self):
        return asdict(self)

    def render(self) -> str:
        lines = [
            f"model: {self.label}" if self.label else "model",
            f"mentions: {self.n_mentions}",
            f"{'':10s} {'F1':>7s} {'Acc':>7s}",
            f"{'all (' + str(self.n_classes_all) + ')':10s} {100 * self.f1_all:7.2f} {100 * self.acc_all:7.2f}",
            f"{'main (' + str(self.n_classes_main) + ')':10s} {100 * self.f1_main:7.2f} {100 * self.acc_main:7.2f}",
            "frequency buckets (accuracy):",
        ]
        for b, v in self.buckets.items():
            lines.append(f"  {b:8s} {100 * v['accuracy']:7.2f}  n={v['mentions']}")
        lines.append("mention types (F1, all entities):")
        for t, v in self.mention_types.items():
            lines.append(f"  {t:14s} {100 * v['f1']:7.2f}  n={v['mentions']}")
        return "\n".join(lines) + "\n"


def metric_report(preds: PredictionSet, train_freq: dict, catalog: EntityCatalog, label="") -> MetricReport:
    g_all = ClassGrouping.for_corpora("all", train_freq, set(preds.gold.tolist()), catalog)
    g_main = ClassGrouping.main_entities(catalog.main)
    return MetricReport(
        f1_all=macro_f1(preds, g_all), acc_all=accuracy(preds, g_all),
        f1_main=macro_f1(preds, g_main), acc_main=accuracy(preds, g_main),
        n_mentions=len(preds), n_classes_all=g_all.n_classes, n_classes_main=g_main.n_classes,
        buckets=bucket_report(preds, train_freq),
        mention_types=mention_type_report(preds, g_all),
        label=label,
    )


# ---------------------------------------------------------- significance


METRICS = {"macro_f1": macro_f1_arrays, "accuracy": accuracy_arrays}


def approx_randomization_test(preds_a: PredictionSet, preds_b: PredictionSet, metric="macro_f1",
                              grouping: ClassGrouping | None = None, iterations=10000, seed=0) -> float:
    """Two-sided paired approximate randomization p-value.

    Each shuffle swaps the two systems' predictions for a mention with
    probability 1/2; the p-value is ``(1 + #{|diff| >= observed}) / (1 + iterations)``.
    """
    if iterations < 1000:
        raise EvaluationError("approximate randomization needs at least 1000 iterations")
    if len(preds_a) != len(preds_b) or any(
            a.key != b.key or a.gold != b.gold for a, b in zip(preds_a, preds_b)):
        raise EvaluationError("prediction sets are not aligned on the same mentions")
    score = METRICS[metric] if isinstance(metric, str) else metric
    gold, pa, pb = preds_a.gold, preds_a.pred, preds_b.pred
    if grouping is not None:
        gold, pa, pb = grouping.map(gold), grouping.map(pa), grouping.map(pb)
    observed = abs(score(gold, pa) - score(gold, pb))
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(iterations):
        swap = rng.random(gold.size) < 0.5
        sa = np.where(swap, pb, pa)
        sb = np.where(swap, pa, pb)
        # tolerance guards against float noise on exact ties
        if abs(score(gold, sa) - score(gold, sb)) >= observed - 1e-12:
            hits += 1
    return (hits + 1) / (iterations + 1)
