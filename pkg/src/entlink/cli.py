"""Command-line entry point: ``entlink <command> ...``.

Every command writes its outputs plus a ``manifest.json`` into the output
directory (``--out``, else ``$ENTLINK_OUT``, else ``./runs``).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .analysis import (AnalysisError, ablation_eval, dump_activations, entity_name_rsa, mention_pair_similarity,
                       name_map, pca_2d, value_drift)
from .autodiff import NonFiniteError, ShapeError
from .corpus import CorpusError, entity_frequencies, load_corpus, save_corpus
from .evaluation import (ClassGrouping, EvaluationError, PredictionSet, accuracy, approx_randomization_test,
                         macro_f1, metric_report, predict)
from .knowledge import KnowledgeBaseError, load_kb, save_kb
from .models import ModelError
from .probing import ProbeError, attribute_mrr, generate_descriptions, link_descriptions, relation_mrr
from .serialization import ModelFileError, load_model, save_model
from .synthetic import (SyntheticSpec, SyntheticSpecError, generate_catalog, generate_kb,
                        generate_synthetic_corpus, split_scenes)
from .training import ConfigError, DivergenceError, TrainConfig, parse_config, train

OUT_ENV = "ENTLINK_OUT"
log = logging.getLogger("entlink")

USER_ERRORS = (AnalysisError, ConfigError, CorpusError, DivergenceError, EvaluationError, KnowledgeBaseError,
               ModelError, ModelFileError, NonFiniteError, ProbeError, ShapeError, SyntheticSpecError,
               FileNotFoundError, IsADirectoryError)


class UsageError(ValueError):
    pass


# --------------------------------------------------------------- manifest


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: dict  # path -> sha256
    outputs: list = field(default_factory=list)
    version: str = __version__
    timestamp: str = ""

    def write(self, out_dir: Path):
        self.timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _inputs(*paths) -> dict:
    return {str(p): file_digest(p) for p in paths if p}


def _write(out: Path, name, text, manifest: RunManifest):
    path = out / name
    path.write_text(text, encoding="utf-8")
    manifest.outputs.append(str(path))
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _require(path, what):
    if path is None:
        raise UsageError(f"missing {what}")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _train_freq(train_corpus, model=None, corpus_fallback=None) -> dict:
    """Training frequencies from --train-corpus, else train_freq.json beside the model."""
    if train_corpus:
        return entity_frequencies(load_corpus(_require(train_corpus, "training corpus")))
    if model:
        side = Path(model).parent / "train_freq.json"
        if side.exists():
            return {int(k): v for k, v in json.loads(side.read_text(encoding="utf-8")).items()}
    if corpus_fallback is not None:
        return entity_frequencies(corpus_fallback)
    raise UsageError("training frequencies unknown: pass --train-corpus or keep train_freq.json beside the model")


# --------------------------------------------------------------- commands


def cmd_gen_synthetic(args):
    spec = SyntheticSpec.load(args.spec) if args.spec else SyntheticSpec()
    out = _out_dir(args)
    manifest = RunManifest("gen-synthetic", spec.to_dict(), args.seed, _inputs(args.spec))
    catalog = generate_catalog(spec, args.seed)
    kb = generate_kb(catalog, args.seed)
    corpus = generate_synthetic_corpus(spec, args.seed, kb, catalog)
    save_corpus(corpus, out / "corpus.jsonl")
    save_kb(kb, out / "kb.jsonl")
    manifest.outputs += [str(out / "corpus.jsonl"), str(out / "catalog.tsv"), str(out / "kb.jsonl")]
    fractions = tuple(float(x) for x in args.split.split(","))
    for name, part in zip(("train", "dev", "test"), split_scenes(corpus, fractions, args.seed)):
        save_corpus(part, out / f"{name}.jsonl", out / "catalog.tsv")
        manifest.outputs.append(str(out / f"{name}.jsonl"))
    manifest.write(out)
    print(f"wrote {len(corpus.scenes)} scenes, {sum(1 for _ in corpus.mentions())} mentions to {out}")


def _train_config(args) -> TrainConfig:
    preset = TrainConfig.desk_defaults if args.preset == "desk" else TrainConfig.paper_defaults
    text = Path(_require(args.config, "config file")).read_text(encoding="utf-8") if args.config else ""
    kind = args.kind
    for line in text.splitlines():
        key, _, value = line.split("#", 1)[0].partition("=")
        if key.strip() == "kind":
            kind = value.strip()
    try:
        base = preset(kind)
    except KeyError:
        raise ConfigError(f"unknown model kind {kind!r}") from None
    cfg = parse_config(text, base)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_train(args):
    cfg = _train_config(args)
    train_corpus = load_corpus(_require(args.corpus, "training corpus"))
    dev = load_corpus(_require(args.dev, "dev corpus")) if args.dev else None
    out = _out_dir(args)
    manifest = RunManifest("train", cfg.to_dict(), cfg.seed, _inputs(args.config, args.corpus, args.dev))
    result = train(train_corpus, dev, cfg, log_every=1 if args.verbose else None)
    save_model(result.bundle, out / "model.bin")
    manifest.outputs.append(str(out / "model.bin"))
    _write(out, "history.jsonl", result.history_lines(), manifest)
    _write(out, "train_freq.json", _dump({str(k): v for k, v in sorted(result.freq.items())}), manifest)
    _write(out, "config.txt", cfg.dumps(), manifest)
    manifest.write(out)
    print(f"trained {cfg.kind}: best epoch {result.best_epoch} of {len(result.history)}; model at {out / 'model.bin'}")


def _render_report(rep, grouping):
    text = rep.render()
    if grouping == "both":
        return text
    drop = "main (" if grouping == "all" else "all ("
    return "".join(line + "\n" for line in text.splitlines() if not line.startswith(drop))


def cmd_eval(args):
    corpus = load_corpus(_require(args.corpus, "corpus"))
    out = _out_dir(args)
    if args.predictions:
        preds = PredictionSet.load(_require(args.predictions, "prediction file"))
        label = Path(args.predictions).name
        inputs = _inputs(args.corpus, args.predictions, args.train_corpus)
        freq = _train_freq(args.train_corpus, None, corpus)
    else:
        bundle = load_model(_require(args.model, "model file"))
        preds = predict(bundle, corpus)
        label = bundle.kind
        inputs = _inputs(args.model, args.corpus, args.train_corpus)
        freq = _train_freq(args.train_corpus, args.model)
    manifest = RunManifest("eval", {"grouping": args.grouping}, None, inputs)
    rep = metric_report(preds, freq, corpus.catalog, label)
    text = _render_report(rep, args.grouping)
    _write(out, "report.txt", text, manifest)
    _write(out, "report.json", _dump(rep.to_dict()), manifest)
    if not args.predictions:
        preds.save(out / "predictions.jsonl")
        manifest.outputs.append(str(out / "predictions.jsonl"))
    manifest.write(out)
    sys.stdout.write(text)


def cmd_compare(args):
    corpus = load_corpus(_require(args.corpus, "corpus"))
    a = load_model(_require(args.model_a, "model A"))
    b = load_model(_require(args.model_b, "model B"))
    out = _out_dir(args)
    manifest = RunManifest("compare", {"iterations": args.iterations, "grouping": args.grouping}, args.seed,
                           _inputs(args.model_a, args.model_b, args.corpus, args.train_corpus))
    pa, pb = predict(a, corpus), predict(b, corpus)
    freq = _train_freq(args.train_corpus, args.model_a, corpus)
    groupings = ("all", "main") if args.grouping == "both" else (args.grouping,)
    result = {}
    lines = [f"{'':6s} {'metric':9s} {'A':>7s} {'B':>7s} {'p':>8s}"]
    for g in groupings:
        grouping = ClassGrouping.for_corpora(g, freq, set(pa.gold.tolist()), corpus.catalog)
        for metric, fn in (("macro_f1", macro_f1), ("accuracy", accuracy)):
            p = approx_randomization_test(pa, pb, metric, grouping, args.iterations, args.seed)
            sa, sb = fn(pa, grouping), fn(pb, grouping)
            result[f"{g}/{metric}"] = {"a": sa, "b": sb, "p": p}
            lines.append(f"{g:6s} {metric:9s} {100 * sa:7.2f} {100 * sb:7.2f} {p:8.4f}")
    text = f"A: {a.kind} ({args.model_a})\nB: {b.kind} ({args.model_b})\n" + "\n".join(lines) + "\n"
    _write(out, "compare.txt", text, manifest)
    _write(out, "compare.json", _dump(result), manifest)
    manifest.write(out)
    sys.stdout.write(text)


def cmd_analyze(args):
    bundle = load_model(_require(args.model, "model file"))
    corpus = load_corpus(_require(args.corpus, "corpus"))
    out = _out_dir(args)
    manifest = RunManifest("analyze", {"which": args.which}, None,
                           _inputs(args.model, args.corpus, args.train_corpus))
    result: dict = {}
    if args.which == "rsa":
        names = name_map(load_corpus(args.train_corpus) if args.train_corpus else corpus)
        for g in ("all", "main"):
            try:
                result[g] = asdict(entity_name_rsa(bundle, names, g))
            except AnalysisError as err:
                result[g] = {"error": str(err)}
        text = "".join(f"{g:5s} " + (f"rho {r['rho']:.4f}  entities {r['n_entities']}  pairs {r['n_pairs']}"
                                     if "rho" in r else r["error"]) + "\n" for g, r in result.items())
    elif args.which == "pairs":
        dump = dump_activations(bundle, corpus)
        dump.save(out / "activations.jsonl")
        manifest.outputs.append(str(out / "activations.jsonl"))
        layers = ("h", "q") if bundle.kind != "bilstm" else ("h",)
        result = {layer: mention_pair_similarity(dump, layer) for layer in layers}
        text = "".join(f"{layer}  {v:.4f}\n" for layer, v in result.items())
    elif args.which == "drift":
        series = {s.scene_id: value_drift(bundle, s) for s in corpus.scenes}
        result = {sid: {"max_abs": d.max_abs.tolist(), "frobenius": d.frobenius.tolist()}
                  for sid, d in series.items()}
        text = "".join(f"{sid}  steps {len(d)}  first {d.max_abs[0]:.4g}  last {d.max_abs[-1]:.4g}  "
                       f"max {d.max_abs.max():.4g}\n" for sid, d in series.items())
    elif args.which == "ablation":
        freq = _train_freq(args.train_corpus, args.model, corpus)
        variants = []
        if bundle.kind == "entnet":
            variants.append({"updates_enabled": not bundle.flags.updates_enabled})
        if bundle.kind != "bilstm":
            other = "dot" if bundle.flags.gate_similarity == "cosine" else "cosine"
            variants.append({"gate_similarity": other})
        if not variants:
            raise UsageError("the biLSTM model has no structurally valid ablations")
        reports = [ablation_eval(bundle, corpus, freq, **v) for v in variants]
        result = {json.dumps(r.overrides, sort_keys=True): {"mismatched": r.mismatched,
                                                             "base": r.base.to_dict(), "variant": r.variant.to_dict()}
                  for r in reports}
        text = "".join(r.render() for r in reports)
    else:  # pca
        dump = dump_activations(bundle, corpus)
        layers = ("h", "q") if bundle.kind != "bilstm" else ("h",)
        for layer in layers:
            proj = pca_2d(dump.matrix(layer), dump.entities)
            _write(out, f"pca_{layer}.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in proj.records()),
                   manifest)
            result[layer] = {"variance": proj.variance.tolist()}
        text = "".join(f"{layer}  variance PC1 {v['variance'][0]:.4g}  PC2 {v['variance'][1]:.4g}\n"
                       for layer, v in result.items())
    _write(out, f"{args.which}.txt", text, manifest)
    _write(out, f"{args.which}.json", _dump(result), manifest)
    manifest.write(out)
    sys.stdout.write(text)


def cmd_probe(args):
    bundle = load_model(_require(args.model, "model file"))
    kb = load_kb(_require(args.kb, "knowledge base"), bundle.catalog)
    out = _out_dir(args)
    manifest = RunManifest("probe", {"which": args.which}, args.seed, _inputs(args.model, args.kb))
    if args.which == "descriptions":
        descs = generate_descriptions(kb, bundle.catalog, args.max_props)
        res = link_descriptions(bundle, descs)
        result = res.to_dict()
        result["n_descriptions"] = len(descs)
        result["n_entities"] = len({d.target for d in descs})
        text = (f"descriptions {len(descs)} of {result['n_entities']} entities\n"
                f"accuracy {100 * res.accuracy:.2f}\n")
    elif args.which == "attributes":
        result = {}
        for attr in kb.attribute_names():
            r = attribute_mrr(bundle, kb, attr, seed=args.seed)
            result[attr] = asdict(r)
        text = "".join(f"{a:10s} best {r['best']:.3f} ({r['best_mode']})  random {r['random']:.3f}  "
                       f"entities {r['n_entities']}  values {r['n_values']}\n" for a, r in result.items())
    else:
        r = relation_mrr(bundle["W_e"].data, kb)
        result = asdict(r)
        text = f"relations MRR {r.mrr:.3f}  random {r.random:.3f}  pairs {r.n_pairs}  types {r.n_relations}\n"
    _write(out, f"probe_{args.which}.txt", text, manifest)
    _write(out, f"probe_{args.which}.json", _dump(result), manifest)
    manifest.write(out)
    sys.stdout.write(text)


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="entlink", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
        return sp

    g = common(sub.add_parser("gen-synthetic", help="generate a synthetic corpus and knowledge base"))
    g.add_argument("--spec", help="JSON file with generator settings")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="0.6,0.15,0.25", help="train,dev,test fractions")
    g.set_defaults(func=cmd_gen_synthetic)

    t = common(sub.add_parser("train", help="train a model"))
    t.add_argument("--config", help="key=value training config")
    t.add_argument("--kind", default="entlib", choices=("bilstm", "entlib", "entnet"))
    t.add_argument("--preset", default="paper", choices=("paper", "desk"))
    t.add_argument("--corpus", required=True, help="training corpus (JSONL)")
    t.add_argument("--dev", help="validation corpus for early stopping")
    t.add_argument("--seed", type=int)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="score a model or a prediction file"))
    e.add_argument("--model")
    e.add_argument("--predictions", help="evaluate this prediction file instead of a model")
    e.add_argument("--corpus", required=True)
    e.add_argument("--train-corpus")
    e.add_argument("--grouping", default="both", choices=("all", "main", "both"))
    e.set_defaults(func=cmd_eval)

    c = common(sub.add_parser("compare", help="significance test between two models"))
    c.add_argument("--model-a", required=True)
    c.add_argument("--model-b", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--train-corpus")
    c.add_argument("--iterations", type=int, default=10000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--grouping", default="both", choices=("all", "main", "both"))
    c.set_defaults(func=cmd_compare)

    a = common(sub.add_parser("analyze", help="representation analyses"))
    a.add_argument("--model", required=True)
    a.add_argument("--corpus", required=True)
    a.add_argument("--train-corpus")
    a.add_argument("--which", required=True, choices=("rsa", "pairs", "drift", "ablation", "pca"))
    a.set_defaults(func=cmd_analyze)

    pr = common(sub.add_parser("probe", help="entity knowledge probes"))
    pr.add_argument("--model", required=True)
    pr.add_argument("--kb", required=True)
    pr.add_argument("--which", required=True, choices=("descriptions", "attributes", "relations"))
    pr.add_argument("--max-props", type=int, default=3)
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    if getattr(args, "model", None) is None and args.command == "eval" and not args.predictions:
        print("error: eval needs --model or --predictions", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except USER_ERRORS + (UsageError,) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
