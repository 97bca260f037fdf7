"""Command-line entry point.

Exit status: 0 on success, 1 on a domain error (one-line diagnostic on
stderr), 2 on a usage error. Each command writes its outputs atomically
and a run manifest recording inputs, outputs and their SHA-256. The
manifest goes to ``--manifest`` if given, else ``<first output>.manifest.json``
(or next to the first input for commands without outputs).
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import __version__
from .agent import AgentConfig, SecurityAgent, make_stream, replay_stream, seed_store
from .bilstm import BiLstmModel, TrainConfig, predict_proba_sequences, to_sequences, train
from .data import (DataError, Dataset, FeatureMask, FeatureSchema, apply_mask, load_csv,
                   minmax_scale, normalize, save_csv, synth_generate)
from .ledger import DeviceRegistry, Ledger, LedgerError, LogicalClock, verify_chain
from .metrics import compare_methods, crossval_report, evaluate, CrossValReport, MetricsReport
from .patterns import PatternError, PatternStore
from .woa import BinaryWoaConfig, WoaConfig, select_features

DOMAIN_ERRORS = (DataError, LedgerError, PatternError, ValueError, KeyError, OSError,
                 FloatingPointError)


class DomainError(Exception):
    pass


# ------------------------------------------------------------- helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@contextlib.contextmanager
def atomic_path(path):
    """Yield a temp path in the target directory; rename onto ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_json(path, obj) -> None:
    with atomic_path(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")


def save_with(path, saver: Callable[[str], None]) -> None:
    with atomic_path(path) as tmp:
        saver(tmp)


class Run:
    """Collects inputs/outputs of one command and writes its manifest."""

    def __init__(self, args):
        self.args = args
        self.inputs: Dict[str, str] = {}
        self.outputs: List[str] = []
        self.started = time.perf_counter()

    def input(self, path) -> str:
        if path is None:
            raise DomainError("missing required input path")
        if not os.path.isfile(path):
            raise DomainError(f"file not found: {path}")
        self.inputs[str(path)] = sha256_file(path)
        return str(path)

    def output(self, path) -> str:
        self.outputs.append(str(path))
        return str(path)

    def manifest(self) -> dict:
        config = {k: v for k, v in vars(self.args).items() if k not in ("func", "manifest")}
        return {
            "command": self.args.command_name,
            "config": config,
            "seed": getattr(self.args, "seed", None),
            "inputs": self.inputs,
            "outputs": {p: sha256_file(p) for p in self.outputs if os.path.isfile(p)},
            "duration_seconds": time.perf_counter() - self.started,
            "version": __version__,
        }

    def finish(self) -> None:
        target = self.args.manifest
        if target is None:
            anchor = self.outputs[0] if self.outputs else next(iter(self.inputs), None)
            if anchor is None:
                return
            target = anchor + ".manifest.json"
        write_json(target, self.manifest())


def load_dataset(run: Run, args) -> Dataset:
    schema = FeatureSchema.load(run.input(args.schema))
    return load_csv(run.input(args.data), schema, header=args.header)


def load_mask(run: Run, path) -> FeatureMask:
    with open(run.input(path), encoding="utf-8") as fh:
        obj = json.load(fh)
    return FeatureMask(obj["mask"] if isinstance(obj, dict) else obj)


def scale_like_model(d: Dataset, model: BiLstmModel) -> np.ndarray:
    lo = np.asarray(model.meta["source_min"], dtype=float)
    hi = np.asarray(model.meta["source_max"], dtype=float)
    if lo.size != d.n_features:
        raise DomainError(f"model was trained on {lo.size} features, data has {d.n_features}")
    return np.clip(minmax_scale(d.X, lo, hi), 0.0, 1.0)


def model_predict(model: BiLstmModel, X_full: np.ndarray) -> np.ndarray:
    X = X_full[:, FeatureMask(model.meta["mask"]).indices]
    probs = predict_proba_sequences(model, to_sequences(X, model.seq_len))
    return np.argmax(probs, axis=1)


def train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs,
                       dropout=args.dropout, units_per_layer=args.units, num_layers=args.layers,
                       seed=args.seed, seq_len=args.seq_len)


# ------------------------------------------------------------ commands

def cmd_synth(args, run: Run):
    d = synth_generate(args.rows, args.informative, args.noise, args.classes, args.seed, args.separation)
    save_with(run.output(args.out), lambda p: save_csv(d, p, header=args.header))
    save_with(run.output(args.schema_out), d.schema.save)
    print(f"wrote {len(d)} rows x {d.n_features} features to {args.out}")


def cmd_ingest(args, run: Run):
    d = load_dataset(run, args)
    n = normalize(d)
    save_with(run.output(args.out), lambda p: save_csv(n, p, header=args.header))
    summary = {"rows": len(d), "features": d.n_features,
               "class_counts": {name: int(np.sum(d.y == i)) for i, name in enumerate(d.schema.class_names)},
               "source_min": d.feature_min.tolist(), "source_max": d.feature_max.tolist()}
    if args.summary:
        write_json(run.output(args.summary), summary)
    print(f"normalized {len(d)} rows x {d.n_features} features -> {args.out}")


def cmd_select(args, run: Run):
    d = normalize(load_dataset(run, args))
    cfg = BinaryWoaConfig(woa=WoaConfig(population=args.population, max_iters=args.iters, seed=args.seed),
                          lambda_weight=args.lambda_weight, beta_weight=1.0 - args.lambda_weight,
                          surrogate_k=args.surrogate_k)
    res = select_features(d, cfg)
    report = res.to_report(args.seed, cfg.to_dict())
    report["selected"] = [d.schema.feature_names[i] for i in res.mask.indices]
    write_json(run.output(args.out), report)
    print(f"selected {res.mask.count}/{d.n_features} features, fitness {res.fitness:.6f}")


def cmd_train(args, run: Run):
    d = normalize(load_dataset(run, args))
    mask = load_mask(run, args.mask) if args.mask else FeatureMask.all_ones(d.n_features)
    if len(mask) != d.n_features:
        raise DomainError(f"mask length {len(mask)} != feature count {d.n_features}")
    model, history = train(d, mask, train_config(args))
    save_with(run.output(args.out), model.save)
    if args.history:
        save_with(run.output(args.history), history.to_csv)
    print(f"trained {args.epochs} epochs, final train loss {history.train_loss[-1]:.6f}")


def cmd_evaluate(args, run: Run):
    d = load_dataset(run, args)
    model = BiLstmModel.load(run.input(args.model))
    y_pred = model_predict(model, scale_like_model(d, model))
    report = evaluate(d.y, y_pred, d.schema.positive_class, d.schema.class_names)
    write_json(run.output(args.out), report.to_dict())
    if args.csv:
        save_with(run.output(args.csv), report.write_csv)
    print(f"accuracy {report.accuracy:.4f}  dr {report.detection_rate:.4f}  far {report.false_alarm_rate:.4f}")


def _bilstm_pipeline(args, mask: Optional[FeatureMask]):
    cfg = train_config(args)

    def run_fold(tr: Dataset, te: Dataset) -> np.ndarray:
        m = mask if mask is not None else FeatureMask.all_ones(tr.n_features)
        model, _ = train(normalize(tr), m, cfg)
        return model_predict(model, scale_like_model(te, model))
    return run_fold


def cmd_crossval(args, run: Run):
    d = load_dataset(run, args)
    if args.method == "knn":
        from sklearn.neighbors import KNeighborsClassifier
        from sklearn.pipeline import make_pipeline
        from .data import MinMaxNormalizer
        pipeline = make_pipeline(MinMaxNormalizer(), KNeighborsClassifier(n_neighbors=args.knn_k))
        if args.mask:
            mask = load_mask(run, args.mask)
            d = apply_mask(d, mask)
    else:
        pipeline = _bilstm_pipeline(args, load_mask(run, args.mask) if args.mask else None)
    report = crossval_report(d, pipeline, args.k, args.seed)
    write_json(run.output(args.out), report.to_dict())
    print("  ".join(f"{m} {report.mean[m]:.4f}±{report.sd[m]:.4f}" for m in ("accuracy", "f1")))


def _load_cv(run: Run, path) -> CrossValReport:
    with open(run.input(path), encoding="utf-8") as fh:
        obj = json.load(fh)
    folds = []
    for f in obj["folds"]:
        r = MetricsReport(**{m: f[m] for m in ("precision", "recall", "f1", "accuracy",
                                                "detection_rate", "false_alarm_rate")},
                          counts=None, undefined=f.get("undefined", []))
        folds.append(r)
    return CrossValReport(folds, obj["mean"], obj["sd"])


def cmd_stats(args, run: Run):
    a, b = _load_cv(run, args.a), _load_cv(run, args.b)
    if len(a.folds) != len(b.folds):
        raise DomainError(f"fold counts differ: {len(a.folds)} vs {len(b.folds)}")
    metrics = args.metric or ["precision", "recall", "f1", "accuracy", "detection_rate", "false_alarm_rate"]
    out = compare_methods(a, b, metrics)
    write_json(run.output(args.out), out)
    for m, res in out.items():
        print(f"{m}: t p={res['paired_t']['p_value']:.4g}  wilcoxon p={res['wilcoxon']['p_value']:.4g}")


def cmd_ledger_verify(args, run: Run) -> int:
    ledger = Ledger.import_jsonl(run.input(args.file))
    status = verify_chain(ledger)
    if status.ok:
        print(f"ok: {len(ledger)} blocks")
        return 0
    print(f"broken_at {status.broken_at} ({status.cause})", file=sys.stderr)
    return 1


def cmd_patterns_import(args, run: Run):
    d = normalize(load_dataset(run, args))
    store = seed_store(d, args.limit, args.seed, d.schema.benign_class, args.model_ref)
    save_with(run.output(args.out), store.export_jsonl)
    print(f"stored {len(store)} patterns in {args.out}")


def cmd_patterns_export(args, run: Run):
    store = PatternStore.import_jsonl(run.input(args.store))

    def saver(p):
        with open(p, "w", encoding="utf-8") as fh:
            fh.write(",".join(["id", *(f"f{i}" for i in range(store.dim)), "label", "security_level",
                               "source"]) + "\n")
            for pat in store.patterns:
                fh.write(",".join([str(pat.id), *(repr(v) for v in pat.features), str(pat.label),
                                   pat.security_level.value, pat.source.value]) + "\n")
    save_with(run.output(args.out), saver)
    print(f"exported {len(store)} patterns to {args.out}")


def cmd_agent_simulate(args, run: Run):
    d = load_dataset(run, args)
    model = BiLstmModel.load(run.input(args.model))
    mask = load_mask(run, args.mask)
    store = PatternStore.import_jsonl(run.input(args.patterns))
    pool = Dataset(d.schema, scale_like_model(d, model), d.y)
    rng = np.random.default_rng([args.seed, 0xA6E])
    registry = DeviceRegistry.load(run.input(args.registry)) if args.registry else DeviceRegistry()
    config = AgentConfig(theta=args.theta, k=args.k, model_path=args.model, mask_path=args.mask,
                         registry_path=args.registry, patterns_path=args.patterns,
                         fast_path_enabled=not args.no_fast_path)
    clock = LogicalClock()
    agent = SecurityAgent(model, mask, store, registry, rng.bytes(32), config, clock=clock,
                          benign_class=d.schema.benign_class)
    stream = make_stream(pool, args.n, args.ap, registry, args.seed,
                         benign_class=d.schema.benign_class, clock=clock)
    out = Path(args.out_dir)
    ledger_path = str(out / "ledger.jsonl")
    # recorded relative to report.json so the output directory is relocatable
    report = replay_stream(agent, stream, args.ap, "ledger.jsonl")
    write_json(run.output(str(out / "report.json")), report.to_dict())
    save_with(run.output(str(out / "decisions.csv")), report.write_decisions_csv)
    save_with(run.output(ledger_path), agent.ledger.export_jsonl)
    save_with(run.output(str(out / "registry.json")), registry.save)
    save_with(run.output(str(out / "patterns.jsonl")), agent.store.export_jsonl)
    print(f"dr {report.dr:.4f}  far {report.far:.4f}  blocks {report.ledger_blocks}  chain "
          f"{'ok' if report.chain_ok else 'BROKEN'}")


# ------------------------------------------------------------- parser

def _data_args(p, schema=True):
    p.add_argument("--data", required=True, help="CSV file, label in the last column")
    if schema:
        p.add_argument("--schema", required=True, help="schema JSON")
    p.add_argument("--header", action="store_true", help="CSV has a header row")


def _train_args(p):
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--units", type=int, default=128)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--seq-len", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iomtguard", description="Intrusion-detection agent toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="JSON file of option defaults for the chosen command")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--manifest", help="run manifest path (default: <first output>.manifest.json)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic labeled corpus")
    p.add_argument("--rows", type=int, default=2000)
    p.add_argument("--informative", type=int, default=5)
    p.add_argument("--noise", type=int, default=15)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--header", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--schema-out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="validate and min-max normalize a CSV")
    _data_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", help="optional JSON with row counts and source ranges")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("select-features", parents=[common], help="binary WOA feature selection")
    _data_args(p)
    p.add_argument("--population", type=int, default=50)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lambda-weight", type=float, default=0.99)
    p.add_argument("--surrogate-k", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", parents=[common], help="train the BiLSTM classifier")
    _data_args(p)
    p.add_argument("--mask", help="mask JSON from select-features (default: all features)")
    _train_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="per-epoch loss/accuracy CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="score a trained model on a labeled CSV")
    _data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="per-class metrics table")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("crossval", parents=[common], help="stratified k-fold evaluation")
    _data_args(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--method", choices=("bilstm", "knn"), default="bilstm")
    p.add_argument("--knn-k", type=int, default=5)
    p.add_argument("--mask")
    _train_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("stats", parents=[common], help="paired t-test and Wilcoxon over two crossval reports")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--metric", action="append")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("ledger", help="ledger tools")
    lsub = p.add_subparsers(dest="ledger_command", required=True)
    q = lsub.add_parser("verify", parents=[common], help="audit a JSONL ledger")
    q.add_argument("file")
    q.set_defaults(func=cmd_ledger_verify)

    p = sub.add_parser("patterns", help="pattern store tools")
    psub = p.add_subparsers(dest="patterns_command", required=True)
    q = psub.add_parser("import", parents=[common], help="build a store from labeled rows")
    _data_args(q)
    q.add_argument("--limit", type=int)
    q.add_argument("--model-ref", help="model artifact path recorded in the store")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_patterns_import)
    q = psub.add_parser("export", parents=[common], help="write a store as CSV")
    q.add_argument("--store", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_patterns_export)

    p = sub.add_parser("agent", help="agent tools")
    asub = p.add_subparsers(dest="agent_command", required=True)
    q = asub.add_parser("simulate", parents=[common], help="replay a labeled request stream")
    _data_args(q)
    q.add_argument("--model", required=True)
    q.add_argument("--mask", required=True)
    q.add_argument("--patterns", required=True)
    q.add_argument("--registry", help="device registry JSON (default: enroll fresh devices)")
    q.add_argument("--ap", type=float, default=0.3, help="attack fraction in (0, 1)")
    q.add_argument("--n", type=int, default=1000)
    q.add_argument("--theta", type=float, default=0.05)
    q.add_argument("--k", type=int, default=5)
    q.add_argument("--no-fast-path", action="store_true")
    q.add_argument("--out-dir", required=True)
    q.set_defaults(func=cmd_agent_simulate)
    return parser


def _command_name(args) -> str:
    parts = [args.command]
    for attr in ("ledger_command", "patterns_command", "agent_command"):
        if getattr(args, attr, None):
            parts.append(getattr(args, attr))
    return " ".join(parts)


def _apply_config(parser, argv, args):
    """Re-parse with defaults taken from ``--config`` so explicit flags still win."""
    with open(args.config, encoding="utf-8") as fh:
        overrides = json.load(fh)
    if not isinstance(overrides, dict):
        raise DomainError(f"{args.config}: config must be a JSON object")
    known = vars(args)
    unknown = [k for k in overrides if k.replace("-", "_") not in known]
    if unknown:
        raise DomainError(f"{args.config}: unknown option(s) {', '.join(sorted(unknown))}")
    # argparse stores defaults per subparser; walk down to the leaf that was chosen
    action = parser._subparsers._group_actions[0]
    leaf = action.choices[args.command]
    for attr in ("ledger_command", "patterns_command", "agent_command"):
        name = getattr(args, attr, None)
        if name:
            leaf = leaf._subparsers._group_actions[0].choices[name]
    leaf.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
    return parser.parse_args(argv)


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.config:
            args = _apply_config(parser, argv, args)
        args.command_name = _command_name(args)
        r = Run(args)
        status = args.func(args, r) or 0
        r.finish()
        return int(status)
    except (DomainError, *DOMAIN_ERRORS) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        if isinstance(exc, OSError) and exc.filename:
            msg = f"{exc.strerror}: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
