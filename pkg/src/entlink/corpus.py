"""Speaker-annotated dialogue corpora with entity mentions.

Corpus files hold one scene per line as JSON::

    {"episode_id": "e01", "scene_id": "e01_s01",
     "utterances": [{"speakers": [3], "tokens": ["I", "know", "."],
                     "mentions": [{"start": 0, "end": 0, "entity": 3}]}]}

Catalog files are tab-separated ``id  name  is_main`` lines; the entity named
``UNKNOWN`` is the catch-all speaker.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

UNKNOWN_NAME = "UNKNOWN"
PAD = "<pad>"
UNK = "<unk>"

HIGH_FREQ = 1000
LOW_FREQ = 20


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Mention:
    start: int
    end: int
    entity: int

    @property
    def head(self):
        # resolved at the last token of the span
        return self.end


@dataclass(frozen=True)
class Utterance:
    speakers: tuple[int, ...]
    tokens: tuple[str, ...]
    mentions: tuple[Mention, ...] = ()


@dataclass(frozen=True)
class Scene:
    scene_id: str
    utterances: tuple[Utterance, ...]
    episode_id: str = ""

    def tokens(self) -> list[str]:
        return [t for u in self.utterances for t in u.tokens]

    def __len__(self):
        return sum(len(u.tokens) for u in self.utterances)


@dataclass(frozen=True)
class Episode:
    episode_id: str
    scenes: tuple[Scene, ...]


@dataclass(frozen=True)
class EntityCatalog:
    names: tuple[str, ...]
    main: frozenset[int] = frozenset()

    @property
    def size(self):
        return len(self.names)

    @property
    def unknown(self) -> int | None:
        try:
            return self.names.index(UNKNOWN_NAME)
        except ValueError:
            return None

    def name(self, entity):
        return self.names[entity]

    def __contains__(self, entity):
        return isinstance(entity, int) and 0 <= entity < len(self.names)


@dataclass(frozen=True)
class Corpus:
    episodes: tuple[Episode, ...]
    catalog: EntityCatalog

    @property
    def scenes(self) -> list[Scene]:
        return [s for e in self.episodes for s in e.scenes]

    def mentions(self) -> Iterator[tuple[Scene, Utterance, Mention]]:
        for scene in self.scenes:
            for utt in scene.utterances:
                for m in utt.mentions:
                    yield scene, utt, m

    def subset(self, scene_ids: Iterable[str]) -> "Corpus":
        keep = set(scene_ids)
        episodes = []
        for ep in self.episodes:
            scenes = tuple(s for s in ep.scenes if s.scene_id in keep)
            if scenes:
                episodes.append(Episode(ep.episode_id, scenes))
        return Corpus(tuple(episodes), self.catalog)

    @property
    def reset_points(self) -> int:
        """Number of scene starts, i.e. dynamic-memory resets."""
        return len(self.scenes)


# ------------------------------------------------------------------- I/O


def _validate_scene(scene: Scene, catalog: EntityCatalog, where: str):
    if not scene.utterances:
        raise CorpusError(f"{where}: scene {scene.scene_id!r} has no utterances")
    for u_i, utt in enumerate(scene.utterances):
        if not utt.tokens:
            raise CorpusError(f"{where}: utterance {u_i} has no tokens")
        if not utt.speakers:
            raise CorpusError(f"{where}: utterance {u_i} has no speakers")
        for s in utt.speakers:
            if s not in catalog:
                raise CorpusError(f"{where}: unknown speaker id {s}")
        for m in utt.mentions:
            if not 0 <= m.start <= m.end < len(utt.tokens):
                raise CorpusError(
                    f"{where}: mention [{m.start}, {m.end}] outside utterance {u_i} "
                    f"of {len(utt.tokens)} tokens"
                )
            if m.entity not in catalog:
                raise CorpusError(f"{where}: unknown mention entity id {m.entity}")


def scene_to_record(scene: Scene) -> dict:
    return {
        "episode_id": scene.episode_id,
        "scene_id": scene.scene_id,
        "utterances": [
            {
                "speakers": list(u.speakers),
                "tokens": list(u.tokens),
                "mentions": [{"start": m.start, "end": m.end, "entity": m.entity} for m in u.mentions],
            }
            for u in scene.utterances
        ],
    }


def scene_from_record(rec: dict) -> Scene:
    utts = tuple(
        Utterance(
            speakers=tuple(int(s) for s in u["speakers"]),
            tokens=tuple(str(t) for t in u["tokens"]),
            mentions=tuple(Mention(int(m["start"]), int(m["end"]), int(m["entity"]))
                           for m in u.get("mentions", ())),
        )
        for u in rec["utterances"]
    )
    return Scene(str(rec["scene_id"]), utts, str(rec.get("episode_id", "")))


def save_catalog(catalog: EntityCatalog, path):
    with open(path, "w", encoding="utf-8") as fh:
        for i, name in enumerate(catalog.names):
            fh.write(f"{i}\t{name}\t{int(i in catalog.main)}\n")


def load_catalog(path) -> EntityCatalog:
    names, main = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise CorpusError(f"{path}:{lineno}: expected 'id<TAB>name<TAB>is_main'")
            try:
                idx, flag = int(parts[0]), int(parts[2])
            except ValueError as err:
                raise CorpusError(f"{path}:{lineno}: {err}") from None
            if idx != len(names):
                raise CorpusError(f"{path}:{lineno}: entity ids must be contiguous from 0, got {idx}")
            names.append(parts[1])
            if flag:
                main.add(idx)
    return EntityCatalog(tuple(names), frozenset(main))


def default_catalog_path(corpus_path) -> Path:
    return Path(corpus_path).with_name("catalog.tsv")


def save_corpus(corpus: Corpus, path, catalog_path=None):
    with open(path, "w", encoding="utf-8") as fh:
        for scene in corpus.scenes:
            fh.write(json.dumps(scene_to_record(scene), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")
    save_catalog(corpus.catalog, catalog_path or default_catalog_path(path))


def load_corpus(path, catalog=None) -> Corpus:
    """Read and validate a corpus file.

    ``catalog`` is an :class:`EntityCatalog`, a path, or None to read
    ``catalog.tsv`` next to the corpus file.
    """
    if not isinstance(catalog, EntityCatalog):
        catalog = load_catalog(catalog or default_catalog_path(path))
    episodes: dict[str, list[Scene]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                scene = scene_from_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise CorpusError(f"{where}: malformed record ({err})") from None
            _validate_scene(scene, catalog, where)
            episodes.setdefault(scene.episode_id, []).append(scene)
    return Corpus(tuple(Episode(e, tuple(s)) for e, s in episodes.items()), catalog)


# ------------------------------------------------------------ vocabulary


@dataclass(frozen=True)
class Vocabulary:
    itos: tuple[str, ...]
    stoi: dict = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        object.__setattr__(self, "stoi", {t: i for i, t in enumerate(self.itos)})

    @property
    def pad(self):
        return 0

    @property
    def unk(self):
        return 1

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi and self.stoi[token] > 1

    def index(self, token):
        return self.stoi.get(token, self.unk)

    def encode(self, tokens):
        return [self.stoi.get(t, 1) for t in tokens]


def build_vocabulary(corpus: Corpus, min_count: int = 1) -> Vocabulary:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(t for scene in corpus.scenes for t in scene.tokens())
    if not counts:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary((PAD, UNK, *kept))


# -------------------------------------------------------------- chunking


@dataclass(frozen=True)
class Chunk:
    scene_index: int  # position of the scene within its batch
    offset: int  # token offset within the scene
    tokens: tuple[str, ...]
    speakers: tuple[tuple[int, ...], ...]


def scene_token_speakers(scene: Scene) -> list[tuple[int, ...]]:
    return [u.speakers for u in scene.utterances for _ in u.tokens]


def chunk_scene(scene: Scene, chunk_len: int, scene_index: int = 0) -> list[Chunk]:
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    tokens = scene.tokens()
    speakers = scene_token_speakers(scene)
    return [
        Chunk(scene_index, start, tuple(tokens[start:start + chunk_len]), tuple(speakers[start:start + chunk_len]))
        for start in range(0, len(tokens), chunk_len)
    ]


def batch_scenes(scenes: list[Scene], scenes_per_batch: int) -> list[list[Scene]]:
    return [scenes[i:i + scenes_per_batch] for i in range(0, len(scenes), scenes_per_batch)]


def chunk_scenes(corpus_or_scenes, chunk_len: int, scenes_per_batch: int) -> list[list[Chunk]]:
    """Group scenes into batches and split each scene into chunks.

    Chunks never span scene boundaries; the recurrent state restarts at every
    chunk.
    """
    scenes = corpus_or_scenes.scenes if isinstance(corpus_or_scenes, Corpus) else list(corpus_or_scenes)
    return [
        [c for i, s in enumerate(batch) for c in chunk_scene(s, chunk_len, i)]
        for batch in batch_scenes(scenes, scenes_per_batch)
    ]


# ------------------------------------------------------------ frequencies


def entity_frequencies(corpus: Corpus) -> dict[int, int]:
    """Mention count per catalog entity (zero for unmentioned entities)."""
    counts = Counter(m.entity for _, _, m in corpus.mentions())
    return {e: counts.get(e, 0) for e in range(corpus.catalog.size)}


def frequency_bucket(count: int) -> str:
    if count > HIGH_FREQ:
        return "high"
    if count >= LOW_FREQ:
        return "medium"
    return "low"


def bucket_table(freqs: dict[int, int]) -> dict[str, list[int]]:
    out = {"high": [], "medium": [], "low": []}
    for e, c in freqs.items():
        out[frequency_bucket(c)].append(e)
    return out
