"""Loss, Adam, the batched training loop, cross-validation and a small grid search."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape
from .corpus import Corpus, batch_scenes, build_vocabulary, entity_frequencies
from .evaluation import ClassGrouping, accuracy, macro_f1, predict
from .models import ModelConfig, ModelFlags, forward, init_params

log = logging.getLogger(__name__)

# best settings per model type from the original random search
PAPER_HYPERPARAMETERS = {
    "bilstm": dict(learning_rate=0.0080, dropout_pre=0.2, dropout_post=0.0, weight_decay=1.8e-6,
                   penalization=False, epochs=20),
    "entlib": dict(learning_rate=0.0011, dropout_pre=0.2, dropout_post=0.02, weight_decay=4.3e-6,
                   penalization=True, epochs=80),
    "entnet": dict(learning_rate=0.0014, dropout_pre=0.0, dropout_post=0.08, weight_decay=1.0e-5,
                   penalization=True, epochs=80),
}

# Small model and schedule that train in well under a minute per run on a
# synthetic corpus of ~100 scenes.
DESK_SETTINGS = dict(d_tok=32, hidden=64, k=16, learning_rate=0.003, epochs=40, patience=40,
                     scenes_per_batch=4)


class ConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "entlib"
    learning_rate: float = 0.0011
    dropout_pre: float = 0.2
    dropout_post: float = 0.02
    weight_decay: float = 4.3e-6
    penalization: bool = True
    epochs: int = 80
    patience: int = 10
    scenes_per_batch: int = 25
    chunk_len: int = 750
    seed: int = 0
    d_tok: int = 300
    hidden: int = 500
    k: int = 150
    min_count: int = 1
    tie_speaker_referent: bool = True
    gate_similarity: str = "cosine"
    updates_enabled: bool = True
    pretrained: str = ""

    def __post_init__(self):
        if self.kind not in PAPER_HYPERPARAMETERS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        for name in ("learning_rate", "epochs", "scenes_per_batch", "chunk_len", "d_tok", "hidden", "k", "min_count"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("dropout_pre", "dropout_post"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.weight_decay < 0 or self.patience < 0:
            raise ConfigError("weight_decay and patience must be non-negative")
        if self.gate_similarity not in ("cosine", "dot"):
            raise ConfigError("gate_similarity must be cosine or dot")

    @classmethod
    def paper_defaults(cls, kind, **overrides):
        return cls(kind=kind, **{**PAPER_HYPERPARAMETERS[kind], **overrides})

    @classmethod
    def desk_defaults(cls, kind, **overrides):
        """Paper regularization with the tiny desk-scale model and schedule."""
        return cls.paper_defaults(kind, **{**DESK_SETTINGS, **overrides})

    @property
    def flags(self):
        return ModelFlags(self.tie_speaker_referent, self.gate_similarity, self.updates_enabled)

    def model_config(self, vocab_size, n_entities):
        return ModelConfig(self.kind, vocab_size, n_entities, self.d_tok, self.hidden, self.k,
                           self.dropout_pre, self.dropout_post, self.chunk_len, self.flags)

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return "".join(f"{f.name}={_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(raw, typ, key):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            if raw.lower() in ("true", "yes", "1"):
                return True
            if raw.lower() in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def parse_config(text, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key=value`` lines.  A ``kind`` line selects that kind's paper defaults."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(raw, types[key], key)
    if base is None:
        base = TrainConfig.paper_defaults(values.get("kind", "entlib"))
    elif "kind" in values and values["kind"] != base.kind:
        base = TrainConfig.paper_defaults(values["kind"], **{
            k: getattr(base, k) for k in types if k not in PAPER_HYPERPARAMETERS["entlib"] and k != "kind"})
    return replace(base, **values)


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# ------------------------------------------------------------------ loss


def penalty_weights(gold, freq_table, penalization):
    if not penalization:
        return np.ones(len(gold))
    return np.array([1.0 / math.sqrt(max(freq_table.get(int(g), 0), 1)) for g in gold])


def nll_loss(log_probs, gold, freq_table=None, penalization=False):
    """Mean negative log-likelihood of the gold entities.

    ``log_probs`` holds one row of log-probabilities per mention.  With
    penalization each term is divided by the square root of the gold
    entity's training frequency (0 counts as 1).
    """
    return ad.nll(log_probs, gold, penalty_weights(gold, freq_table or {}, penalization))


# ------------------------------------------------------------------ Adam


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, lr, weight_decay=0.0):
        """Update ``params`` in place from their ``grad`` slots (L2-style decay)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            if weight_decay:
                g = g + weight_decay * p.data
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(params, grads, state: Adam, lr, weight_decay=0.0):
    """Functional form: copy ``grads`` into the parameters' slots and step."""
    for name, g in grads.items():
        params[name].grad = None if g is None else np.asarray(g, dtype=np.float64)
    state.step(params, lr, weight_decay)
    return params


# ---------------------------------------------------------------- train


@dataclass
class TrainResult:
    bundle: object
    history: list
    best_epoch: int
    freq: dict

    def history_lines(self):
        return "".join(json.dumps(h, sort_keys=True) + "\n" for h in self.history)


def batch_loss(bundle, scenes, freq, penalization, train, rng):
    out = forward(bundle, scenes, train=train, rng=rng)
    if len(out.gold) == 0:
        return None, 0
    return nll_loss(out.log_probs(), out.gold, freq, penalization), len(out.gold)


def validation_scores(bundle, val_corpus, freq):
    preds = predict(bundle, val_corpus)
    if len(preds) == 0:
        return float("nan"), float("nan")
    grouping = ClassGrouping.for_corpora("all", freq, set(preds.gold.tolist()), bundle.catalog)
    return macro_f1(preds, grouping), accuracy(preds, grouping)


def train(train_corpus: Corpus, val_corpus: Corpus | None, config: TrainConfig, vocab=None,
          pretrained=None, log_every=None) -> TrainResult:
    """Train with Adam, one step per batch of scenes, early stopping on
    validation macro-F1 (all-entities grouping)."""
    rng = np.random.default_rng(config.seed)
    vocab = vocab or build_vocabulary(train_corpus, config.min_count)
    freq = entity_frequencies(train_corpus)
    catalog = train_corpus.catalog
    model_cfg = config.model_config(len(vocab), catalog.size)
    bundle = init_params(model_cfg, vocab, catalog, int(rng.integers(2 ** 31)),
                         pretrained or (config.pretrained or None))
    opt = Adam()
    scenes = train_corpus.scenes
    history = []
    best_f1, best_epoch, best = -math.inf, 0, bundle.copy()
    for epoch in range(1, config.epochs + 1):
        total, count = 0.0, 0
        order = rng.permutation(len(scenes))
        for batch in batch_scenes([scenes[i] for i in order], config.scenes_per_batch):
            with Tape() as tape:
                loss, m = batch_loss(bundle, batch, freq, config.penalization, True, rng)
                if loss is None:
                    continue
                if not np.isfinite(loss.data):
                    raise DivergenceError(f"loss became {float(loss.data)} in epoch {epoch}")
                tape.backward(loss)
            opt.step(bundle.params, config.learning_rate, config.weight_decay)
            for p in bundle.params.values():
                p.zero_grad()
            total += float(loss.data) * m
            count += m
        train_loss = total / max(count, 1)
        if not math.isfinite(train_loss):
            raise DivergenceError(f"training loss became {train_loss} in epoch {epoch}")
        rec = {"epoch": epoch, "train_loss": train_loss}
        if val_corpus is not None:
            f1, acc = validation_scores(bundle, val_corpus, freq)
            rec.update(val_f1_all=f1, val_acc_all=acc)
        history.append(rec)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d %s", epoch, rec)
        if val_corpus is None:
            best, best_epoch = bundle, epoch
            continue
        if rec["val_f1_all"] > best_f1:
            best_f1, best_epoch, best = rec["val_f1_all"], epoch, bundle.copy()
        elif epoch - best_epoch > config.patience:
            break
    if val_corpus is None:
        best = bundle.copy()
    return TrainResult(best, history, best_epoch, freq)


# -------------------------------------------------------- cross-validation


def fold_partition(scene_ids, folds, seed):
    if folds < 2:
        raise ConfigError("need at least 2 folds")
    if len(scene_ids) < folds:
        raise ConfigError(f"{len(scene_ids)} scenes cannot be split into {folds} folds")
    order = np.random.default_rng(seed).permutation(len(scene_ids))
    return [[scene_ids[i] for i in part] for part in np.array_split(order, folds)]


@dataclass
class CrossValidation:
    folds: list  # per fold: {"held_out": [...], "val_f1_all": ..., "val_acc_all": ..., "best_epoch": ...}

    @property
    def mean_f1(self):
        return float(np.mean([f["val_f1_all"] for f in self.folds]))

    @property
    def mean_acc(self):
        return float(np.mean([f["val_acc_all"] for f in self.folds]))


def cross_validate(corpus: Corpus, config: TrainConfig, folds=5) -> CrossValidation:
    ids = [s.scene_id for s in corpus.scenes]
    parts = fold_partition(ids, folds, config.seed)
    results = []
    for held in parts:
        held_set = set(held)
        train_part = corpus.subset(i for i in ids if i not in held_set)
        val_part = corpus.subset(held)
        res = train(train_part, val_part, config)
        best = res.history[res.best_epoch - 1]
        results.append({"held_out": held, "val_f1_all": best["val_f1_all"],
                        "val_acc_all": best["val_acc_all"], "best_epoch": res.best_epoch})
    return CrossValidation(results)


def grid_search(corpus: Corpus, base: TrainConfig, grid: dict, folds=5):
    """Cross-validate every combination in ``grid``; best mean F1 first."""
    keys = sorted(grid)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        cfg = replace(base, **dict(zip(keys, combo)))
        cv = cross_validate(corpus, cfg, folds)
        rows.append((cv.mean_f1, dict(zip(keys, combo)), cv))
    rows.sort(key=lambda r: -r[0])
    return rows
