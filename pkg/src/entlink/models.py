"""biLSTM, EntLib and EntNet entity-linking models.

All three share one encoder: token and speaker embeddings are concatenated,
squashed with tanh and read by a bidirectional LSTM.  They differ only in the
head that maps a hidden state ``h`` to scores over the N entities:

* ``bilstm``: a linear map, ``g = h W_o + b_o``;
* ``entlib``: a query ``q = h W_q + b_q`` compared with the entity library
  ``W_e``, ``g = relu(cos(W_e, q))``;
* ``entnet``: the same query compared with keys ``W_e`` and per-scene values
  ``V``, ``g = relu(cos(W_e, q) + cos(V, q))``, after which every value row
  is moved by ``g_j * prelu(W_e[j] Q + V[j] R + q S)`` and renormalised.

Matrices act on row vectors throughout, e.g. ``q = h @ W_q``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EntityCatalog, Scene, Vocabulary, chunk_scene

KINDS = ("bilstm", "entlib", "entnet")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelFlags:
    tie_speaker_referent: bool = True
    gate_similarity: str = "cosine"  # or "dot"
    updates_enabled: bool = True

    def __post_init__(self):
        if self.gate_similarity not in ("cosine", "dot"):
            raise ModelError(f"gate_similarity must be 'cosine' or 'dot', got {self.gate_similarity!r}")


@dataclass(frozen=True)
class ModelConfig:
    kind: str
    vocab_size: int
    n_entities: int
    d_tok: int = 300
    hidden: int = 500
    k: int = 150
    dropout_pre: float = 0.0
    dropout_post: float = 0.0
    chunk_len: int = 750
    flags: ModelFlags = field(default_factory=ModelFlags)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"model kind must be one of {KINDS}, got {self.kind!r}")
        for name in ("vocab_size", "n_entities", "d_tok", "hidden", "k", "chunk_len"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")

    @property
    def separate_speakers(self):
        return self.kind != "bilstm" and not self.flags.tie_speaker_referent


def head_parameter_count(kind, hidden, k, n_entities):
    """Parameters of the output head alone (the part that differs between models)."""
    two_h = 2 * hidden
    if kind == "bilstm":
        return two_h * n_entities + n_entities
    if kind == "entlib":
        return two_h * k + k
    if kind == "entnet":
        return two_h * k + k + 3 * k * k + 1
    raise ModelError(f"unknown kind {kind!r}")


def encoder_parameter_count(vocab_size, d_tok, hidden, k, n_entities, separate_speakers=False):
    d_in = d_tok + k
    lstm = 2 * (4 * hidden * (d_in + hidden) + 4 * hidden)
    return vocab_size * d_tok + n_entities * k * (2 if separate_speakers else 1) + lstm


def glorot(rng, shape):
    a = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-a, a, size=shape)


class ModelBundle:
    """Configuration, vocabulary, entity catalog and named parameter tensors."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, catalog: EntityCatalog, params: dict):
        self.config = config
        self.vocab = vocab
        self.catalog = catalog
        self.params = params

    @property
    def kind(self):
        return self.config.kind

    @property
    def flags(self):
        return self.config.flags

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    @property
    def speaker_matrix(self) -> Tensor:
        return self.params["W_s"] if "W_s" in self.params else self.params["W_e"]

    def head_names(self):
        return [n for n in ("W_o", "b_o", "W_q", "b_q", "Q", "R", "S", "prelu_slope") if n in self.params]

    def parameter_count(self):
        return int(sum(p.data.size for p in self.params.values()))

    def head_parameter_count(self):
        return int(sum(self.params[n].data.size for n in self.head_names()))

    def parameter_report(self) -> dict:
        c = self.config
        return {
            "kind": c.kind,
            "per_parameter": {n: list(p.shape) for n, p in self.params.items()},
            "head": self.head_parameter_count(),
            "head_formula": head_parameter_count(c.kind, c.hidden, c.k, c.n_entities),
            "encoder": self.parameter_count() - self.head_parameter_count(),
            "total": self.parameter_count(),
        }

    def with_flags(self, **overrides) -> "ModelBundle":
        """Same weights evaluated under different variant flags."""
        flags = replace(self.flags, **overrides)
        if flags.tie_speaker_referent != self.flags.tie_speaker_referent and self.kind != "bilstm":
            raise ModelError("speaker/referent tying is structural; it cannot be overridden after training")
        if self.kind == "bilstm" and (flags.gate_similarity != self.flags.gate_similarity):
            raise ModelError("the biLSTM head has no similarity gate")
        if self.kind != "entnet" and flags.updates_enabled != self.flags.updates_enabled:
            raise ModelError("only EntNet has a memory update mechanism")
        return ModelBundle(replace(self.config, flags=flags), self.vocab, self.catalog, self.params)

    def copy(self) -> "ModelBundle":
        params = {n: ad.parameter(p.data.copy(), name=n) for n, p in self.params.items()}
        return ModelBundle(self.config, self.vocab, self.catalog, params)


# ----------------------------------------------------------------- init


def load_word_vectors(path):
    """word2vec text format; an optional ``count dim`` header line is skipped."""
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) < 2:
                continue
            vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
    return vectors


def init_params(config: ModelConfig, vocab: Vocabulary, catalog: EntityCatalog, seed: int,
                pretrained=None) -> ModelBundle:
    """Glorot-uniform matrices, zero biases, PReLU slope 0.25.

    ``pretrained`` maps tokens to vectors (or is a word2vec text file path);
    rows for vocabulary tokens found there are copied verbatim into ``W_t``.
    """
    if len(vocab) != config.vocab_size:
        raise ModelError(f"vocabulary has {len(vocab)} entries, config says {config.vocab_size}")
    if catalog.size != config.n_entities:
        raise ModelError(f"catalog has {catalog.size} entities, config says {config.n_entities}")
    rng = np.random.default_rng(seed)
    c = config
    d_in = c.d_tok + c.k
    p = {
        "W_t": glorot(rng, (c.vocab_size, c.d_tok)),
        "W_e": glorot(rng, (c.n_entities, c.k)),
    }
    if c.separate_speakers:
        p["W_s"] = glorot(rng, (c.n_entities, c.k))
    for direction in ("fwd", "bwd"):
        p[f"lstm_{direction}.W"] = glorot(rng, (4 * c.hidden, d_in + c.hidden))
        p[f"lstm_{direction}.b"] = np.zeros(4 * c.hidden)
    if c.kind == "bilstm":
        p["W_o"] = glorot(rng, (2 * c.hidden, c.n_entities))
        p["b_o"] = np.zeros(c.n_entities)
    else:
        p["W_q"] = glorot(rng, (2 * c.hidden, c.k))
        p["b_q"] = np.zeros(c.k)
    if c.kind == "entnet":
        for name in ("Q", "R", "S"):
            p[name] = glorot(rng, (c.k, c.k))
        p["prelu_slope"] = np.array(0.25)
    if pretrained is not None:
        if not isinstance(pretrained, dict):
            pretrained = load_word_vectors(pretrained)
        for token, vec in pretrained.items():
            if len(vec) != c.d_tok:
                raise ModelError(f"pretrained vector for {token!r} has dimension {len(vec)}, d_tok is {c.d_tok}")
            if token in vocab:
                p["W_t"][vocab.index(token)] = vec
    return ModelBundle(config, vocab, catalog, {n: ad.parameter(v, name=n) for n, v in p.items()})


# -------------------------------------------------------------- forward


@dataclass
class MemoryState:
    scene_id: object
    values: Tensor  # (..., N, k)


@dataclass
class MentionRef:
    scene: int  # index of the scene in the batch
    utterance: int
    mention: int
    position: int  # token position of the mention head within the scene
    entity: int


@dataclass
class BatchOutput:
    gates: Tensor  # (M, N) pre-softmax scores
    gold: np.ndarray
    refs: list
    hidden: Tensor  # (M, 2H)
    query: Tensor | None  # (M, k)
    value_trace: list | None = None  # per scene: array (L+1, N, k)

    def log_probs(self):
        return ad.log_softmax(self.gates)

    def probs(self):
        return ad.softmax(self.gates).data


def _speaker_weights(speakers, n_entities):
    row = np.zeros(n_entities)
    for s in speakers:
        if not 0 <= s < n_entities:
            raise ModelError(f"unknown entity id {s}")
        row[s] += 1.0
    return row


def mention_refs(scenes) -> list[MentionRef]:
    refs = []
    for si, scene in enumerate(scenes):
        offset = 0
        for ui, utt in enumerate(scene.utterances):
            for mi, m in enumerate(utt.mentions):
                refs.append(MentionRef(si, ui, mi, offset + m.end, m.entity))
            offset += len(utt.tokens)
    return refs


def encode(bundle: ModelBundle, scenes, train=False, rng=None, speaker_override=None):
    """Run the shared encoder over a batch of scenes.

    Returns ``(H, scene_rows)`` where ``H`` is a (rows, 2H) tensor of hidden
    states and ``scene_rows[s][i]`` is the row of token ``i`` of scene ``s``.
    ``speaker_override`` maps a scene index to an N-vector of speaker weights
    used for every token of that scene (a zero vector means "no speaker").
    """
    c = bundle.config
    vocab = bundle.vocab
    chunks = [ch for si, s in enumerate(scenes) for ch in chunk_scene(s, c.chunk_len, si)]
    B = len(chunks)
    T = max(len(ch.tokens) for ch in chunks)
    ids = np.zeros((T, B), dtype=np.intp)
    spk = np.zeros((T, B, c.n_entities))
    lengths = np.array([len(ch.tokens) for ch in chunks])
    override = speaker_override or {}
    for b, ch in enumerate(chunks):
        ids[:len(ch.tokens), b] = vocab.encode(ch.tokens)
        if ch.scene_index in override:
            spk[:len(ch.tokens), b] = override[ch.scene_index]
        else:
            for t, speakers in enumerate(ch.speakers):
                spk[t, b] = _speaker_weights(speakers, c.n_entities)
    d_in = c.d_tok + c.k
    x_tok = ad.take_rows(bundle["W_t"], ids.reshape(-1))
    x_spk = ad.matmul(spk.reshape(T * B, c.n_entities), bundle.speaker_matrix)
    x = ad.tanh(ad.concat([x_tok, x_spk], axis=-1))
    x = ad.dropout(x, c.dropout_pre, rng, train)

    # the backward LSTM reads each chunk reversed; padding stays at the end
    flat = np.arange(T * B).reshape(T, B)
    rev = flat.copy()
    for b, n in enumerate(lengths):
        rev[:n, b] = flat[n - 1::-1, b]
    rev = rev.reshape(-1)

    h_fwd = ad.lstm_sequence(ad.reshape(x, (T, B, d_in)), bundle["lstm_fwd.W"], bundle["lstm_fwd.b"])
    x_rev = ad.reshape(ad.take_rows(x, rev), (T, B, d_in))
    h_rev = ad.lstm_sequence(x_rev, bundle["lstm_bwd.W"], bundle["lstm_bwd.b"])
    h_bwd = ad.take_rows(ad.reshape(h_rev, (T * B, c.hidden)), rev)
    h = ad.concat([ad.reshape(h_fwd, (T * B, c.hidden)), h_bwd], axis=-1)
    h = ad.dropout(h, c.dropout_post, rng, train)

    scene_rows = [[] for _ in scenes]
    for b, ch in enumerate(chunks):
        scene_rows[ch.scene_index].extend(flat[:len(ch.tokens), b].tolist())
    return h, scene_rows


def _similarity(M, v, how):
    return ad.row_cosine(M, v) if how == "cosine" else ad.row_dot(M, v)


def linear_scores(h, bundle):
    return ad.add(ad.matmul(h, bundle["W_o"]), bundle["b_o"])


def query(h, bundle):
    return ad.add(ad.matmul(h, bundle["W_q"]), bundle["b_q"])


def entlib_gate(q, bundle, similarity=None):
    return ad.relu(_similarity(bundle["W_e"], q, similarity or bundle.flags.gate_similarity))


def bilstm_scores(h, bundle):
    """Distribution over entities from the linear head."""
    return ad.softmax(linear_scores(h, bundle))


def entlib_scores(h, bundle):
    """Distribution over entities from the entity-library head."""
    return ad.softmax(entlib_gate(query(h, bundle), bundle))


def init_memory(bundle, scene_id=None) -> MemoryState:
    return MemoryState(scene_id, bundle["W_e"])


def _entnet_gate(q, keys, values, similarity):
    return ad.relu(ad.add(_similarity(keys, q, similarity), _similarity(values, q, similarity)))


def _entnet_update(q, gate, values, keys_Q, bundle):
    cand_in = ad.add(ad.add(keys_Q, ad.matmul(values, bundle["R"])),
                     ad.reshape(ad.matmul(q, bundle["S"]), q.shape[:-1] + (1, q.shape[-1])))
    cand = ad.prelu(cand_in, bundle["prelu_slope"])
    moved = ad.add(values, ad.mul(ad.reshape(gate, gate.shape + (1,)), cand))
    return ad.l2_normalize_rows(moved)


def entnet_step(q, bundle, state: MemoryState, scene_id=None):
    """One EntNet token step: returns ``(distribution, new_state)``.

    ``q`` has shape (k,) or (S, k) for S scenes processed in parallel.
    """
    if scene_id is not None and state.scene_id is not None and scene_id != state.scene_id:
        raise ModelError(f"memory state belongs to scene {state.scene_id!r}, not {scene_id!r}")
    q = ad._as_tensor(q)
    flags = bundle.flags
    gate = _entnet_gate(q, bundle["W_e"], state.values, flags.gate_similarity)
    if not flags.updates_enabled:
        return ad.softmax(gate), state
    keys_Q = ad.matmul(bundle["W_e"], bundle["Q"])
    values = _entnet_update(q, gate, state.values, keys_Q, bundle)
    return ad.softmax(gate), MemoryState(state.scene_id, values)


def _entnet_mentions(bundle, q_all, scene_rows, refs, trace=False):
    """Thread per-scene memories over every token; gates at mention heads."""
    flags = bundle.flags
    S = len(scene_rows)
    L = max(len(r) for r in scene_rows)
    if refs and not trace:
        L = max(ref.position for ref in refs) + 1
    rows = np.zeros((L, S), dtype=np.intp)
    for s, r in enumerate(scene_rows):
        n = min(len(r), L)
        rows[:n, s] = r[:n]
        rows[n:, s] = r[0]
    k = bundle.config.k
    Qs = ad.reshape(ad.take_rows(q_all, rows.reshape(-1)), (L, S, k))
    keys = bundle["W_e"]
    gates, values = ad.entity_memory_sequence(
        Qs, keys, ad.matmul(keys, bundle["Q"]), bundle["R"], bundle["S"], bundle["prelu_slope"],
        flags.gate_similarity, flags.updates_enabled)
    traces = [values[:len(r) + 1, s].copy() for s, r in enumerate(scene_rows)] if trace else None
    if not refs:
        return None, traces
    flat = ad.reshape(gates, (L * S, keys.shape[0]))
    return ad.take_rows(flat, [ref.position * S + ref.scene for ref in refs]), traces


def forward(bundle: ModelBundle, scenes, train=False, rng=None, speaker_override=None,
            trace_values=False, extra_positions=None) -> BatchOutput:
    """Scores at every mention head of a batch of scenes.

    ``extra_positions`` lists additional ``(scene, position)`` read-out points
    (used by probes that have no annotated mentions); they come after the
    annotated mentions with entity -1.
    """
    refs = mention_refs(scenes)
    for s, pos in extra_positions or ():
        refs.append(MentionRef(s, -1, -1, pos, -1))
    h, scene_rows = encode(bundle, scenes, train, rng, speaker_override)
    mention_rows = np.array([scene_rows[r.scene][r.position] for r in refs], dtype=np.intp)
    gold = np.array([r.entity for r in refs], dtype=np.intp)
    h_m = ad.take_rows(h, mention_rows)
    q_m = None
    trace = None
    if bundle.kind == "bilstm":
        gates = linear_scores(h_m, bundle)
    elif bundle.kind == "entlib":
        q_m = query(h_m, bundle)
        gates = entlib_gate(q_m, bundle)
    else:
        q_m = query(h_m, bundle)
        if bundle.flags.updates_enabled or trace_values:
            gates, trace = _entnet_mentions(bundle, query(h, bundle), scene_rows, refs, trace_values)
            if gates is None:
                gates = Tensor(np.zeros((0, bundle.config.n_entities)))
        else:
            gates = _entnet_gate(q_m, bundle["W_e"], bundle["W_e"], bundle.flags.gate_similarity)
    return BatchOutput(gates, gold, refs, h_m, q_m, trace)


def resolve_mentions(bundle: ModelBundle, scene: Scene):
    """Per-mention distributions ``[(MentionRef, probs)]`` in eval mode."""
    if not any(u.mentions for u in scene.utterances):
        return []
    out = forward(bundle, [scene])
    return list(zip(out.refs, out.probs()))


def argmax_lowest(probs):
    """Row-wise argmax; ties go to the lowest entity id."""
    return np.argmax(probs, axis=-1)
