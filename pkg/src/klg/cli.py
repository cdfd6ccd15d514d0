"""Command-line pipeline: ``klg <subcommand> --config <path> [--seed N] [--out DIR]``.

Stages run in order and hand artifacts to each other through the four
configured directories::

    gen-data    -> corpus/{vocab.json, meta.json, train|dev|test.jsonl}
    train-base  -> checkpoints/base.ckpt, reports/train-base.jsonl
    gen-topk    -> topk/{train|dev|test}.jsonl, topk/k.json
    train-klg   -> checkpoints/model.ckpt, reports/train-klg.jsonl
    eval        -> reports/report.json
    report      -> reports/recall_curve.csv, reports/weight_norms.csv

``train-klg`` trains whichever model ``method`` selects, so the two-stage
baselines (``base-ls``, ``base-prompt``) share the KLG slot.  Every stage
records its input and output digests in ``manifest.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from klg.base_model import (
    BaseConfig,
    choose_k,
    featurize,
    load_encoder,
    predict_probs,
    predict_topk,
    save_encoder,
    topk_recall_curve,
    train_base,
)
from klg.data import SPLITS, Corpus, generate_corpus, read_corpus, write_corpus
from klg.errors import (
    ConfigError,
    DivergenceError,
    KlgError,
    MissingArtifactError,
    ParseError,
)
from klg.label_graph import ACTIVATIONS
from klg.metrics import emit_csv, evaluate, frequency_order, weight_norm_report
from klg.serialize import read_topk, write_topk
from klg.trainer import KlgConfig, load_klg, predict_klg, save_klg, train_klg

SUBCOMMANDS = ("gen-data", "train-base", "gen-topk", "train-klg", "eval", "report")
METHODS = ("base", "base-ls", "base-prompt", "klg", "klg-no-ds")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 1, 2, 3, 4


# ---------------------------------------------------------------------------
# configuration


@dataclass
class Paths:
    corpus: str
    topk: str
    checkpoints: str
    reports: str


@dataclass
class CorpusKnobs:
    n_labels: int = 21
    zipf_exponent: float = 1.2
    sizes: list[int] = field(default_factory=lambda: [4000, 1000, 1000])
    template_noise: float = 0.3
    no_relation_rate: float = 0.3


@dataclass
class ModelKnobs:
    hidden: int = 32
    heads: int = 4
    sigma: str = "tanh"


@dataclass
class TrainingKnobs:
    k: int | None = None  # None: smallest k reaching recall_threshold on dev
    recall_threshold: float = 0.99
    tau: float = 0.05
    alpha: float = 0.9
    gamma: float = 0.9
    batch_size: int = 16
    epochs: int = 40
    base_epochs: int = 40
    learning_rate: float = 0.1
    normalize: bool = False
    use_types: bool = True


@dataclass
class RunConfig:
    paths: Paths
    seed: int = 0
    method: str = "klg"
    corpus: CorpusKnobs = field(default_factory=CorpusKnobs)
    model: ModelKnobs = field(default_factory=ModelKnobs)
    training: TrainingKnobs = field(default_factory=TrainingKnobs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"paths": Paths, "corpus": CorpusKnobs, "model": ModelKnobs, "training": TrainingKnobs}


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key {where + '.' if where else ''}{unknown[0]}")
    kwargs = {}
    for name, f in known.items():
        key = f"{where}.{name}" if where else name
        if name not in raw:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"missing required config key {key}")
            continue
        nested = cls is RunConfig and name in _SECTIONS
        kwargs[name] = _build(_SECTIONS[name], raw[name], key) if nested else raw[name]
    return cls(**kwargs)


def _check_types(obj, where: str) -> None:
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{where}.{f.name}" if where else f.name
        if dataclasses.is_dataclass(value):
            _check_types(value, key)
            continue
        expected = f.type.replace(" | None", "")
        if "None" in f.type and value is None:
            ok = True
        elif expected == "bool":
            ok = isinstance(value, bool)
        elif expected == "int":
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif expected == "float":
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif expected == "list[int]":
            ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        else:
            ok = isinstance(value, str)
        if not ok:
            raise ConfigError(f"{key} has the wrong type: {value!r}")


def validate(cfg: RunConfig) -> None:
    """Raise ``ConfigError`` naming the first offending field."""
    _check_types(cfg, "")
    t, c, m = cfg.training, cfg.corpus, cfg.model
    checks = [
        ("method", cfg.method in METHODS, f"must be one of {', '.join(METHODS)}"),
        ("training.tau", t.tau > 0, "must be positive"),
        ("training.alpha", 0.0 <= t.alpha <= 1.0, "must lie in [0, 1]"),
        ("training.gamma", 0.0 <= t.gamma <= 1.0, "must lie in [0, 1]"),
        ("training.recall_threshold", 0.0 < t.recall_threshold <= 1.0, "must lie in (0, 1]"),
        ("training.k", t.k is None or 1 <= t.k <= c.n_labels, f"must be null or in [1, {c.n_labels}]"),
        ("training.batch_size", t.batch_size >= 1, "must be at least 1"),
        ("training.epochs", t.epochs >= 0, "must be non-negative"),
        ("training.base_epochs", t.base_epochs >= 0, "must be non-negative"),
        ("training.learning_rate", t.learning_rate > 0, "must be positive"),
        ("corpus.n_labels", c.n_labels >= 21, "must be at least 21 (10 head, 10 tail, no_relation)"),
        ("corpus.sizes", len(c.sizes) == 3 and min(c.sizes) >= 1, "must hold three positive split sizes"),
        ("corpus.template_noise", 0.0 <= c.template_noise <= 1.0, "must lie in [0, 1]"),
        ("corpus.no_relation_rate", 0.0 <= c.no_relation_rate < 1.0, "must lie in [0, 1)"),
        ("corpus.zipf_exponent", c.zipf_exponent >= 0, "must be non-negative"),
        ("model.hidden", m.hidden >= 1, "must be at least 1"),
        ("model.heads", m.heads >= 1 and m.hidden % m.heads == 0, "must divide model.hidden"),
        ("model.sigma", m.sigma in ACTIVATIONS, f"must be one of {', '.join(sorted(ACTIVATIONS))}"),
    ]
    for key, ok, why in checks:
        if not ok:
            raise ConfigError(f"{key} {why}")
    roots = {name: Path(os.path.normpath(getattr(cfg.paths, name))) for name in ("corpus", "topk", "checkpoints", "reports")}
    names = sorted(roots)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            pa, pb = roots[a], roots[b]
            if pa == pb or pa in pb.parents or pb in pa.parents:
                raise ConfigError(f"paths.{a} and paths.{b} overlap")


def parse_config(raw: Any) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    return parse_config(raw)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, seed=seed)


# ---------------------------------------------------------------------------
# artifacts


class Workspace:
    """Resolves configured paths against one root and keeps the manifest there."""

    def __init__(self, cfg: RunConfig, root):
        self.cfg = cfg
        self.root = Path(root)
        p = cfg.paths
        self.corpus = self.root / p.corpus
        self.topk = self.root / p.topk
        self.checkpoints = self.root / p.checkpoints
        self.reports = self.root / p.reports
        self.manifest = self.root / "manifest.json"

    @property
    def base_ckpt(self) -> Path:
        return self.checkpoints / "base.ckpt"

    @property
    def model_ckpt(self) -> Path:
        return self.checkpoints / "model.ckpt"

    @property
    def k_file(self) -> Path:
        return self.topk / "k.json"

    def corpus_files(self) -> list[Path]:
        return [self.corpus / "vocab.json", self.corpus / "meta.json"] + [self.corpus / f"{s}.jsonl" for s in SPLITS]

    def topk_files(self) -> list[Path]:
        return [self.topk / f"{s}.jsonl" for s in SPLITS] + [self.k_file]

    def rel(self, path: Path) -> str:
        try:
            return path.relative_to(self.root).as_posix()
        except ValueError:
            return path.as_posix()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _write_jsonl(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
    os.replace(tmp, path)


def _require(paths: Sequence[Path], producer: str) -> None:
    for p in paths:
        if not p.exists():
            raise MissingArtifactError(p, producer)


def _record(ws: Workspace, stage: str, inputs: Sequence[Path], outputs: Sequence[Path]) -> None:
    manifest = {"seed": ws.cfg.seed, "stages": {}}
    if ws.manifest.exists():
        manifest = json.loads(ws.manifest.read_text(encoding="utf-8"))
    manifest["seed"] = ws.cfg.seed
    manifest["stages"][stage] = {
        "config_sha256": hashlib.sha256(json.dumps(ws.cfg.to_dict(), sort_keys=True).encode()).hexdigest(),
        "inputs": {ws.rel(p): sha256_file(p) for p in inputs},
        "outputs": {ws.rel(p): sha256_file(p) for p in outputs},
    }
    _write_json(ws.manifest, manifest)


def _load_topk(ws: Workspace, corpus: Corpus) -> dict:
    _require(ws.topk_files(), "gen-topk")
    sets = {}
    for split in SPLITS:
        for s in read_topk(ws.topk / f"{split}.jsonl", corpus.vocab):
            sets[s.example_id] = s
    return sets


def _chosen_k(ws: Workspace) -> int:
    _require([ws.k_file], "gen-topk")
    return int(json.loads(ws.k_file.read_text(encoding="utf-8"))["k"])


def _history_records(history) -> list[dict]:
    return [{key: (float(v) if isinstance(v, float) else v) for key, v in h.items()} for h in history]


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(ws: Workspace) -> None:
    c = ws.cfg.corpus
    corpus = generate_corpus(
        n_labels=c.n_labels,
        zipf_exponent=c.zipf_exponent,
        sizes=tuple(c.sizes),
        template_noise=c.template_noise,
        seed=ws.cfg.seed,
        no_relation_rate=c.no_relation_rate,
    )
    write_corpus(corpus, ws.corpus)
    _record(ws, "gen-data", [], ws.corpus_files())


def _base_config(cfg: RunConfig, method: str = "base", k: int = 1) -> BaseConfig:
    t = cfg.training
    return BaseConfig(
        hidden=cfg.model.hidden,
        epochs=t.base_epochs,
        batch_size=t.batch_size,
        learning_rate=t.learning_rate,
        seed=cfg.seed,
        use_types=t.use_types,
        method=method,
        gamma=t.gamma,
        k=k,
    )


def stage_train_base(ws: Workspace) -> None:
    _require(ws.corpus_files(), "gen-data")
    corpus = read_corpus(ws.corpus)
    run = train_base(corpus, _base_config(ws.cfg))
    save_encoder(run.params, ws.base_ckpt, {"method": "base", "best_epoch": run.fit.best_epoch})
    log = ws.reports / "train-base.jsonl"
    _write_jsonl(log, _history_records(run.fit.history))
    _record(ws, "train-base", ws.corpus_files(), [ws.base_ckpt, log])


def stage_gen_topk(ws: Workspace) -> None:
    _require(ws.corpus_files(), "gen-data")
    _require([ws.base_ckpt], "train-base")
    corpus = read_corpus(ws.corpus)
    params, _ = load_encoder(ws.base_ckpt)
    n = len(corpus.vocab)
    t = ws.cfg.training
    dev_sets = None
    for split in SPLITS:
        sets = predict_topk(params, corpus.split(split), n, t.use_types)
        write_topk(sets, corpus.vocab.names, ws.topk / f"{split}.jsonl")
        if split == "dev":
            dev_sets = sets
    curve = topk_recall_curve(dev_sets, {ex.id: ex.label for ex in corpus.dev})
    chosen, fallback = choose_k(curve, t.recall_threshold)
    k = t.k if t.k is not None else chosen
    _write_json(
        ws.k_file,
        {"k": k, "chosen_k": chosen, "fallback": fallback, "threshold": t.recall_threshold, "dev_recall_curve": curve},
    )
    _record(ws, "gen-topk", ws.corpus_files() + [ws.base_ckpt], ws.topk_files())


def klg_config(cfg: RunConfig, k: int) -> KlgConfig:
    t, m = cfg.training, cfg.model
    return KlgConfig(
        k=k,
        tau=t.tau,
        alpha=t.alpha,
        batch_size=t.batch_size,
        epochs=t.epochs,
        seed=cfg.seed,
        learning_rate=t.learning_rate,
        hidden=m.hidden,
        heads=m.heads,
        sigma=m.sigma,
        dynamic_k=cfg.method == "klg",
        normalize=t.normalize,
        use_types=t.use_types,
    )


def stage_train_klg(ws: Workspace) -> None:
    _require(ws.corpus_files(), "gen-data")
    corpus = read_corpus(ws.corpus)
    method = ws.cfg.method
    inputs = ws.corpus_files()
    if method == "base":
        _require([ws.base_ckpt], "train-base")
        params, meta = load_encoder(ws.base_ckpt)
        save_encoder(params, ws.model_ckpt, {**{k: v for k, v in meta.items() if k != "tokens"}, "method": "base"})
        history = []
        inputs = inputs + [ws.base_ckpt]
    else:
        topk = _load_topk(ws, corpus)
        k = _chosen_k(ws)
        inputs = inputs + ws.topk_files()
        if method in ("base-ls", "base-prompt"):
            run = train_base(corpus, _base_config(ws.cfg, method, k), topk)
            save_encoder(run.params, ws.model_ckpt, {"method": method, "k": k, "best_epoch": run.fit.best_epoch})
        else:
            run = train_klg(corpus, topk, klg_config(ws.cfg, k))
            save_klg(run.params, ws.model_ckpt, {"method": method, "k": k, "best_epoch": run.fit.best_epoch})
        history = run.fit.history
    log = ws.reports / "train-klg.jsonl"
    _write_jsonl(log, _history_records(history))
    _record(ws, "train-klg", inputs, [ws.model_ckpt, log])


def _model_probs(ws: Workspace, corpus: Corpus, examples) -> tuple[np.ndarray, dict]:
    _require([ws.model_ckpt], "train-klg")
    from klg.serialize import load_checkpoint

    _, meta = load_checkpoint(ws.model_ckpt)
    method = meta.get("method", "base")
    use_types = ws.cfg.training.use_types
    if meta.get("kind") == "klg":
        params, meta = load_klg(ws.model_ckpt)
        topk = _load_topk(ws, corpus)
        return predict_klg(params, examples, topk, int(meta["k"]), use_types), meta
    params, meta = load_encoder(ws.model_ckpt)
    prompts = None
    if method == "base-prompt":
        from klg.base_model import prompt_fns

        topk = _load_topk(ws, corpus)
        prompts = prompt_fns(examples, topk, int(meta["k"]), corpus.vocab, np.random.default_rng(ws.cfg.seed + 2))
    return predict_probs(params, featurize(params, examples, use_types, prompts)), meta


def stage_eval(ws: Workspace) -> None:
    _require(ws.corpus_files(), "gen-data")
    _require([ws.model_ckpt], "train-klg")
    corpus = read_corpus(ws.corpus)
    probs, meta = _model_probs(ws, corpus, corpus.test)
    preds = np.argmax(probs, axis=1)
    golds = [ex.label for ex in corpus.test]
    report = evaluate(preds, golds, corpus.vocab.names, corpus.vocab.no_relation_id, corpus.label_counts("train"))
    out = {"method": meta.get("method", "base"), "seed": ws.cfg.seed, "k": meta.get("k"), "metrics": report.to_dict()}
    path = ws.reports / "report.json"
    _write_json(path, out)
    inputs = ws.corpus_files() + [ws.model_ckpt]
    if meta.get("kind") == "klg" or meta.get("method") == "base-prompt":
        inputs += ws.topk_files()
    _record(ws, "eval", inputs, [path])


def stage_report(ws: Workspace) -> None:
    _require(ws.corpus_files(), "gen-data")
    _require([ws.model_ckpt], "train-klg")
    _require([ws.k_file], "gen-topk")
    corpus = read_corpus(ws.corpus)
    curve = json.loads(ws.k_file.read_text(encoding="utf-8"))["dev_recall_curve"]
    curve_path = ws.reports / "recall_curve.csv"
    emit_csv([(k, r) for k, r in enumerate(curve, start=1)], ("k", "recall"), curve_path)

    from klg.serialize import load_checkpoint

    _, meta = load_checkpoint(ws.model_ckpt)
    if meta.get("kind") == "klg":
        weights = load_klg(ws.model_ckpt)[0].graph.class_weights()
    else:
        weights = load_encoder(ws.model_ckpt)[0].class_weights()
    counts = corpus.label_counts("train")
    nr = corpus.vocab.no_relation_id
    norms = weight_norm_report(weights, frequency_order(counts, nr), nr)
    norm_path = ws.reports / "weight_norms.csv"
    emit_csv([(corpus.vocab.names[c], v, int(counts[c])) for c, v in norms], ("label", "norm", "train_support"), norm_path)
    _record(ws, "report", ws.corpus_files() + [ws.model_ckpt, ws.k_file], [curve_path, norm_path])


STAGES = {
    "gen-data": stage_gen_data,
    "train-base": stage_train_base,
    "gen-topk": stage_gen_topk,
    "train-klg": stage_train_klg,
    "eval": stage_eval,
    "report": stage_report,
}


def run(subcommand: str, config: RunConfig, out=".") -> int:
    """Run one stage; returns the process exit status and prints a one-line diagnostic on failure."""
    if subcommand not in STAGES:
        print(f"klg: unknown subcommand {subcommand!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        STAGES[subcommand](Workspace(config, out))
    except ConfigError as exc:
        print(f"klg {subcommand}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"klg {subcommand}: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"klg {subcommand}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (KlgError, OSError) as exc:
        print(f"klg {subcommand}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="klg", description="Label-graph relation classification pipeline.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--out", help="directory that relative paths resolve against (default: the config's directory)")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, ParseError) as exc:
        print(f"klg: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    out = args.out if args.out is not None else str(Path(args.config).resolve().parent)
    return run(args.subcommand, cfg, out)


if __name__ == "__main__":
    sys.exit(main())
