"""Desk-scale synthetic dialogue corpora.

Mention referents follow a Zipf law over entity rank (entity id 0 is the most
frequent).  Each mention is realised by a surface rule that a model can learn:

* first person (``I``, ``me``, ...) refers to the utterance's speaker;
* second person refers to the previous utterance's speaker;
* proper names are entity-specific tokens;
* third-person pronouns agree in gender with their referent and only appear
  when the referent is the most recent same-gender entity mentioned in the
  scene;
* common nouns (``the <job>``) use the referent's job from the knowledge base.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .corpus import UNKNOWN_NAME, Corpus, EntityCatalog, Episode, Mention, Scene, Utterance
from .knowledge import KnowledgeBase

FIRST = ("I", "me", "my", "myself", "mine")
SECOND = ("you", "your", "yourself", "yours")
THIRD = {"man": ("he", "him", "his", "himself"), "woman": ("she", "her", "hers", "herself")}

FILLER = tuple("""
a about after again all also always and any anyway are around as ask at away back bad
be because been before believe best better big but call came can come could date day
did do does done down eat even ever everything feel fine first for found friend from
get give go going gone good got great guess guy had happy has have hear help here hey
home how if in into is it just keep kind know last later leave let like little look
lot love made make maybe mean meet might minute money more morning much must need
never new next nice night no not nothing now of oh okay on one only or other out over
party people place please pretty put really right said say see seen should show so
some something sorry still stop sure take talk tell than thank that the then there
these thing think this time to today together told tomorrow tonight too try two up
us very wait want was way we well were what when where who why will with wow yeah yes
""".split())

JOBS = (
    "paleontologist", "chef", "actor", "waitress", "nurse", "doctor", "lawyer", "teacher",
    "masseuse", "accountant", "professor", "singer", "dentist", "photographer", "assistant",
    "buyer", "executive",
)

RELATION_NAMES = {
    "sibling": {"man": "brother", "woman": "sister"},
    "parent": {"man": "father", "woman": "mother"},
    "child": {"man": "son", "woman": "daughter"},
    "spouse": {"man": "husband", "woman": "wife"},
    "cousin": {"man": "cousin", "woman": "cousin"},
}

_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "br", "tr", "j")
_NUCLEI = ("a", "e", "i", "o", "u", "ai", "ou")
_CODAS = ("", "n", "s", "r", "l", "x", "th")


class SyntheticSpecError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    n_entities: int = 40
    zipf_exponent: float = 1.0
    n_scenes: int = 40
    scenes_per_episode: int = 5
    n_main: int = 6
    utterances_per_scene: tuple = (10, 20)
    filler_per_utterance: tuple = (2, 6)
    mentions_per_utterance: tuple = (0.25, 0.55, 0.2)  # probabilities of 0, 1, 2 mentions
    mention_mix: dict = field(default_factory=lambda: {
        "first": 0.50, "second": 0.05, "third": 0.12, "proper": 0.20, "common": 0.13,
    })
    speaker_stickiness: float = 0.5
    multi_speaker_rate: float = 0.03
    full_name_rate: float = 0.2

    def validate(self, kb=None):
        if self.n_entities < 2:
            raise SyntheticSpecError("need at least 2 entities")
        if self.n_scenes < 1 or self.scenes_per_episode < 1:
            raise SyntheticSpecError("need at least one scene per episode")
        if self.n_main < 0:
            raise SyntheticSpecError("n_main must be >= 0")
        unknown = set(self.mention_mix) - {"first", "second", "third", "proper", "common"}
        if unknown:
            raise SyntheticSpecError(f"unknown mention types {sorted(unknown)}")
        if sum(self.mention_mix.values()) <= 0:
            raise SyntheticSpecError("mention mix must have positive mass")
        needs_kb = self.mention_mix.get("third", 0) > 0 or self.mention_mix.get("common", 0) > 0
        if needs_kb and kb is None:
            raise SyntheticSpecError("third-person and common-noun mentions need a knowledge base")
        if len(self.mentions_per_utterance) != 3 or abs(sum(self.mentions_per_utterance) - 1) > 1e-9:
            raise SyntheticSpecError("mentions_per_utterance must be 3 probabilities summing to 1")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise SyntheticSpecError(f"unknown synthetic spec keys {sorted(extra)}")
        d = dict(d)
        for key in ("utterances_per_scene", "filler_per_utterance", "mentions_per_utterance"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


def zipf_weights(n, exponent):
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def make_names(n, rng) -> list[tuple[str, str]]:
    """Distinct (first, last) pseudo-names, capitalised."""
    def word():
        syll = int(rng.integers(1, 3))
        return "".join(_ONSETS[rng.integers(len(_ONSETS))] + _NUCLEI[rng.integers(len(_NUCLEI))]
                       for _ in range(syll)) + _CODAS[rng.integers(len(_CODAS))]

    taken = set(FILLER) | set(JOBS) | {w.lower() for w in FIRST + SECOND} | {"he", "she", "him", "her", "the", "person"}
    out, firsts = [], set()
    while len(out) < n:
        first = word()
        if len(first) < 3 or first in taken or first in firsts:
            continue
        firsts.add(first)
        last = word() + word()
        out.append((first.capitalize(), last.capitalize()))
    return out


def generate_catalog(spec: SyntheticSpec, seed: int) -> EntityCatalog:
    rng = np.random.default_rng([seed, 1])
    names = [f"{a} {b}" for a, b in make_names(spec.n_entities, rng)]
    return EntityCatalog(tuple(names) + (UNKNOWN_NAME,), frozenset(range(min(spec.n_main, spec.n_entities))))


def generate_kb(catalog: EntityCatalog, seed: int, job_rate=0.7, relation_pairs=None) -> KnowledgeBase:
    """Random genders, jobs and family relations for every non-UNKNOWN entity."""
    rng = np.random.default_rng([seed, 2])
    ents = [e for e in range(catalog.size) if e != catalog.unknown]
    attrs, rels = [], []
    gender = {}
    for e in ents:
        gender[e] = "woman" if rng.random() < 0.5 else "man"
        attrs.append((e, "gender", gender[e]))
        if rng.random() < job_rate:
            attrs.append((e, "job", JOBS[rng.integers(len(JOBS))]))
    n_pairs = relation_pairs if relation_pairs is not None else max(2, len(ents) // 2)
    used = set()
    kinds = list(RELATION_NAMES)
    for _ in range(n_pairs):
        a, b = (int(x) for x in rng.choice(ents, size=2, replace=False))
        if (a, b) in used or (b, a) in used:
            continue
        used.add((a, b))
        kind = kinds[rng.integers(len(kinds))]
        if kind == "parent":
            rels.append((a, RELATION_NAMES["parent"][gender[a]], b))
            rels.append((b, RELATION_NAMES["child"][gender[b]], a))
        elif kind == "child":
            rels.append((a, RELATION_NAMES["child"][gender[a]], b))
            rels.append((b, RELATION_NAMES["parent"][gender[b]], a))
        else:
            rels.append((a, RELATION_NAMES[kind][gender[a]], b))
            rels.append((b, RELATION_NAMES[kind][gender[b]], a))
    return KnowledgeBase(tuple(attrs), tuple(rels))


def generate_synthetic_corpus(spec: SyntheticSpec, seed: int, kb: KnowledgeBase | None = None,
                              catalog: EntityCatalog | None = None) -> Corpus:
    spec.validate(kb)
    catalog = catalog or generate_catalog(spec, seed)
    rng = np.random.default_rng([seed, 3])
    n = spec.n_entities
    weights = zipf_weights(n, spec.zipf_exponent)
    first_names = [catalog.name(e).split()[0] for e in range(n)]
    full_names = [catalog.name(e).split() for e in range(n)]
    gender = kb.attribute_map("gender") if kb is not None else {}
    job = kb.attribute_map("job") if kb is not None else {}
    types = sorted(spec.mention_mix)
    type_p = np.array([spec.mention_mix[t] for t in types], dtype=float)
    type_p /= type_p.sum()

    def zipf_draw():
        return int(rng.choice(n, p=weights))

    def fillers(k):
        return [FILLER[i] for i in rng.integers(len(FILLER), size=k)]

    episodes = []
    scene_no = 0
    n_episodes = -(-spec.n_scenes // spec.scenes_per_episode)
    for ep in range(n_episodes):
        ep_id = f"ep{ep:03d}"
        scenes = []
        for _ in range(min(spec.scenes_per_episode, spec.n_scenes - scene_no)):
            scene_id = f"{ep_id}_sc{scene_no:04d}"
            scene_no += 1
            n_utts = int(rng.integers(spec.utterances_per_scene[0], spec.utterances_per_scene[1] + 1))
            speakers_so_far: list[int] = []
            recent: list[int] = []  # entities mentioned by name or noun, most recent last
            utts = []
            prev_speaker = None
            for _ in range(n_utts):
                if speakers_so_far and rng.random() < spec.speaker_stickiness:
                    speaker = speakers_so_far[rng.integers(len(speakers_so_far))]
                else:
                    speaker = zipf_draw()
                speakers_so_far.append(speaker)
                speaker_set = (speaker,)
                multi = rng.random() < spec.multi_speaker_rate
                if multi:
                    other = zipf_draw()
                    if other != speaker:
                        speaker_set = tuple(sorted((speaker, other)))
                    else:
                        multi = False
                k = int(rng.choice(3, p=spec.mentions_per_utterance))
                tokens: list[str] = []
                mentions: list[Mention] = []
                for _ in range(k):
                    tokens.extend(fillers(int(rng.integers(1, 3))))
                    kind = types[int(rng.choice(len(types), p=type_p))]
                    surface, referent = None, None
                    if kind == "first" and not multi:
                        referent = speaker
                        surface = [FIRST[rng.integers(len(FIRST))]]
                    elif kind == "second" and not multi:
                        if prev_speaker is not None and prev_speaker != speaker:
                            referent = prev_speaker
                            surface = [SECOND[rng.integers(len(SECOND))]]
                    if kind in ("proper", "third", "common"):
                        referent = zipf_draw()
                        if kind == "third" and referent in gender and referent not in speaker_set:
                            g = gender[referent]
                            latest = next((e for e in reversed(recent)
                                           if gender.get(e) == g and e not in speaker_set), None)
                            if latest == referent:
                                forms = THIRD[g]
                                surface = [forms[rng.integers(len(forms))]]
                        elif kind == "common" and referent in job:
                            surface = ["the", job[referent]]
                        if surface is None:
                            surface = list(full_names[referent]) if rng.random() < spec.full_name_rate \
                                else [first_names[referent]]
                        recent.append(referent)
                    if surface is None:
                        continue
                    start = len(tokens)
                    tokens.extend(surface)
                    mentions.append(Mention(start, len(tokens) - 1, referent))
                tokens.extend(fillers(int(rng.integers(spec.filler_per_utterance[0], spec.filler_per_utterance[1] + 1))))
                tokens.append("?" if rng.random() < 0.3 else ".")
                utts.append(Utterance(speaker_set, tuple(tokens), tuple(mentions)))
                prev_speaker = speaker
            scenes.append(Scene(scene_id, tuple(utts), ep_id))
        episodes.append(Episode(ep_id, tuple(scenes)))
    return Corpus(tuple(episodes), catalog)


def split_scenes(corpus: Corpus, fractions=(0.8, 0.2), seed=0) -> list[Corpus]:
    """Partition scenes (shuffled by ``seed``) into consecutive corpora."""
    scenes = [s.scene_id for s in corpus.scenes]
    order = np.random.default_rng(seed).permutation(len(scenes))
    bounds = np.round(np.cumsum([0.0, *fractions]) / sum(fractions) * len(scenes)).astype(int)
    return [corpus.subset(scenes[i] for i in order[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
