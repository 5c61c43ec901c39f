import numpy as np
import pytest

from entlink.corpus import Corpus, EntityCatalog, Episode, Mention, Scene, Utterance, build_vocabulary
from entlink.models import ModelConfig, init_params
from entlink.synthetic import SyntheticSpec, generate_catalog, generate_kb, generate_synthetic_corpus, split_scenes
from entlink.training import TrainConfig, train

NAMES = ("Ross Geller", "Monica Geller", "Rachel Green", "Joey Tribbiani", "UNKNOWN")


def make_scene(scene_id, utterances, episode="ep0"):
    """utterances: (speakers, "space separated tokens", [(start, end, entity), ...])"""
    return Scene(scene_id, tuple(
        Utterance(tuple(spk), tuple(text.split()), tuple(Mention(*m) for m in ms)) for spk, text, ms in utterances
    ), episode)


@pytest.fixture
def catalog():
    return EntityCatalog(NAMES, frozenset({0, 1, 2}))


@pytest.fixture
def tiny_corpus(catalog):
    s1 = make_scene("s1", [
        ((0,), "I saw Monica today .", [(0, 0, 0), (2, 2, 1)]),
        ((1,), "you did ?", [(0, 0, 0)]),
        ((2,), "Ross Geller is my brother .", [(0, 1, 0), (3, 3, 2)]),
    ])
    s2 = make_scene("s2", [
        ((3,), "hey Rachel .", [(1, 1, 2)]),
        ((2, 3), "we are here .", []),
    ], episode="ep1")
    return Corpus((Episode("ep0", (s1,)), Episode("ep1", (s2,))), catalog)


def tiny_bundle(kind, corpus, seed=0, **cfg):
    vocab = build_vocabulary(corpus)
    config = ModelConfig(kind, len(vocab), corpus.catalog.size,
                         **{"d_tok": 4, "hidden": 3, "k": 4, **cfg})
    return init_params(config, vocab, corpus.catalog, seed)


@pytest.fixture(scope="session")
def smoke_data():
    """Small synthetic corpus with a KB, split into train/dev/test."""
    spec = SyntheticSpec(n_entities=12, n_scenes=16, n_main=4)
    cat = generate_catalog(spec, 0)
    kb = generate_kb(cat, 0)
    corpus = generate_synthetic_corpus(spec, 0, kb, cat)
    tr, dev, te = split_scenes(corpus, (0.6, 0.2, 0.2), 0)
    return {"spec": spec, "catalog": cat, "kb": kb, "corpus": corpus, "train": tr, "dev": dev, "test": te}


@pytest.fixture(scope="session")
def trained(smoke_data):
    """One briefly trained model of each kind."""
    out = {}
    for kind in ("bilstm", "entlib", "entnet"):
        cfg = TrainConfig.desk_defaults(kind, d_tok=8, hidden=8, k=6, epochs=2, seed=0)
        out[kind] = train(smoke_data["train"], smoke_data["dev"], cfg)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ------------------------------------------------------ acceptance summary

ACCEPTANCE = {}
ACCEPTANCE_DETAIL = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "setup" and not rep.passed:
        ACCEPTANCE[number] = (title, False)
    elif rep.when == "call":
        ACCEPTANCE[number] = (title, rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")
        if number in ACCEPTANCE_DETAIL:
            terminalreporter.write_line(f"              {ACCEPTANCE_DETAIL[number]}")
