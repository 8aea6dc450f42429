"""Command line pipeline: train, analyze, rank, synthesize, evaluate.

Every subcommand writes into a run directory and leaves a
``manifest_<command>.json`` there describing what it read and wrote.

Run layout::

    model.json                      train (or --model elsewhere)
    spectra/class_<c>.csv           analyze
    reports/rep<r>/class_<c>.json   rank (r > 0 only for the random baseline)
    synth/rep<r>/synth.csv          synthesize, plus raw vectors and timing.json
    eval/summary.json               evaluate, plus distribution.csv/.svg
    eval/mannwhitney.csv            evaluate --compare
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from deepfault import __version__
from deepfault.errors import DeepFaultError, SynthesisError
from deepfault.evaluate import (
    activation_increase_ratio,
    bar_chart_svg,
    counts_to_csv,
    mann_whitney_u,
    summarize,
)
from deepfault.model_io import (
    load_mnist,
    load_model,
    mnist_paths,
    resolve_data_dir,
    save_model,
    write_atomic,
)
from deepfault.spectrum import ALL_CLASSES, SpectrumTable, analyze
from deepfault.suspiciousness import MEASURES, RANDOM, Measure, SuspiciousnessReport, identify
from deepfault.synthesis import (
    NORMALIZATIONS,
    SynthesisConfig,
    load_vectors,
    rebuild_results,
    save_results,
    synthesize_batch,
)
from deepfault.trainer import LossHistory, TrainConfig, evaluate_accuracy, train

logger = logging.getLogger("deepfault")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2
VOLATILE_KEYS = frozenset({"started", "finished", "runtime_seconds", "argv", "paths"})


class UsageFailure(DeepFaultError):
    """Bad command line."""


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageFailure(f"{self.prog}: {message}")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj):
    write_atomic(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


class Manifest:
    """Collects run provenance; written atomically once the command succeeds."""

    def __init__(self, command, args, config):
        self.command = command
        self.config = config
        self.seed = getattr(args, "seed", None)
        self.inputs = {}
        self.outputs = []
        self.started = dt.datetime.now(dt.timezone.utc)
        self._t0 = time.perf_counter()

    def input(self, role, path):
        self.inputs[role] = {"sha256": sha256_file(path)}
        self.inputs[role]["paths"] = str(path)

    def output(self, run_dir, path):
        self.outputs.append(Path(path).relative_to(run_dir).as_posix())

    def write(self, run_dir):
        canonical = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        doc = {
            "command": self.command,
            "argv": sys.argv,
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "started": self.started.isoformat(),
            "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
            "runtime_seconds": time.perf_counter() - self._t0,
        }
        write_json(Path(run_dir) / f"manifest_{self.command}.json", doc)


def _model_path(args):
    return Path(args.model) if args.model else Path(args.run_dir) / "model.json"


def _load_split(args, manifest, split, limit=None):
    data_dir = resolve_data_dir(args.data_dir)
    images, labels = mnist_paths(data_dir, split)
    manifest.input(f"{split}_images", images)
    manifest.input(f"{split}_labels", labels)
    return load_mnist(data_dir, split, limit)


def _parse_hidden(text):
    text = text.strip().lower()
    if "x" in text:
        layers, width = text.split("x")
        return (int(width),) * int(layers)
    return tuple(int(v) for v in text.split(","))


def _class_dirs(root, pattern):
    return sorted(Path(root).glob(pattern), key=lambda p: int(p.stem.split("_")[-1])
                  if p.stem.split("_")[-1].isdigit() else -1)


def _rep_dirs(root):
    reps = sorted(Path(root).glob("rep*"), key=lambda p: int(p.name[3:]))
    if not reps:
        raise FileNotFoundError(f"no rep*/ directories under {root}")
    return reps


def _class_key(path):
    tail = path.stem.split("_", 1)[1]
    return ALL_CLASSES if tail == ALL_CLASSES else int(tail)


def cmd_train(args):
    run_dir = Path(args.run_dir)
    cfg = TrainConfig(hidden=_parse_hidden(args.hidden), learning_rate=args.lr,
                      batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    config = {"hidden": list(cfg.hidden), "learning_rate": cfg.learning_rate,
              "batch_size": cfg.batch_size, "epochs": cfg.epochs, "alpha": cfg.alpha,
              "train_limit": args.train_limit, "test_limit": args.test_limit}
    manifest = Manifest("train", args, config)
    train_set = _load_split(args, manifest, "train", args.train_limit)
    test_set = _load_split(args, manifest, "test", args.test_limit)
    history = LossHistory(train_set) if args.track_loss else None
    net = train(train_set, cfg, num_classes=10, on_epoch=history)
    accuracy = evaluate_accuracy(net, test_set)
    logger.info("test accuracy %.4f", accuracy)
    out = run_dir / "model.json"
    save_model(net, out)
    stats = {"test_accuracy": accuracy, "layer_widths": net.layer_widths}
    if history is not None:
        stats["train_loss_per_epoch"] = history.losses
    write_json(run_dir / "train.json", stats)
    manifest.output(run_dir, out)
    manifest.output(run_dir, run_dir / "train.json")
    manifest.write(run_dir)
    print(f"test accuracy {accuracy:.4f}; model written to {out}")


def cmd_analyze(args):
    run_dir = Path(args.run_dir)
    config = {"class": args.class_, "threshold": args.threshold, "test_limit": args.test_limit}
    manifest = Manifest("analyze", args, config)
    model = _model_path(args)
    manifest.input("model", model)
    net = load_model(model)
    tests = _load_split(args, manifest, "test", args.test_limit)
    if args.class_ == "per":
        classes = sorted(np.unique(tests.labels).tolist())
    elif args.class_ == ALL_CLASSES:
        classes = [ALL_CLASSES]
    else:
        classes = [int(args.class_)]
    out_dir = run_dir / "spectra"
    for c in classes:
        table = analyze(net, tests, c, args.threshold)
        path = out_dir / f"class_{c}.csv"
        write_atomic(path, table.to_csv())
        manifest.output(run_dir, path)
    write_json(out_dir / "meta.json", {"threshold": args.threshold, "classes": classes})
    manifest.output(run_dir, out_dir / "meta.json")
    manifest.write(run_dir)
    print(f"wrote {len(classes)} spectrum table(s) to {out_dir}")


def cmd_rank(args):
    run_dir = Path(args.run_dir)
    repeats = args.repeats if args.repeats is not None else (5 if args.measure == RANDOM else 1)
    if repeats < 1:
        raise UsageFailure("--repeats must be >= 1")
    if args.measure != RANDOM and repeats != 1:
        raise UsageFailure("--repeats only applies to the random measure")
    config = {"measure": args.measure, "k": args.k, "star": args.star,
              "stratified": args.stratified, "repeats": repeats}
    manifest = Manifest("rank", args, config)
    spectra = run_dir / "spectra"
    meta = read_json(spectra / "meta.json")
    net = None
    if args.model or (run_dir / "model.json").exists():
        manifest.input("model", _model_path(args))
        net = load_model(_model_path(args))
    for rep in range(repeats):
        measure = Measure(args.measure, star=args.star, seed=args.seed + rep,
                          stratified=args.stratified)
        for c in meta["classes"]:
            path = spectra / f"class_{c}.csv"
            manifest.input(f"spectrum_class_{c}", path)
            table = SpectrumTable.from_csv(path.read_text(encoding="utf-8"), c, meta["threshold"])
            report = identify(net, table, measure, args.k)
            out = run_dir / "reports" / f"rep{rep}" / f"class_{c}.json"
            write_atomic(out, report.to_json())
            manifest.output(run_dir, out)
    manifest.write(run_dir)
    print(f"ranked {len(meta['classes'])} class(es) x {repeats} repeat(s) with {args.measure}")


def cmd_synthesize(args):
    run_dir = Path(args.run_dir)
    cfg = SynthesisConfig(step=args.step, d=args.d, per_class_count=args.per_class,
                          gradient_normalization=args.normalization)
    config = {"step": cfg.step, "d": cfg.d, "per_class": cfg.per_class_count,
              "normalization": cfg.gradient_normalization, "class": args.class_,
              "test_limit": args.test_limit}
    manifest = Manifest("synthesize", args, config)
    model = _model_path(args)
    manifest.input("model", model)
    net = load_model(model)
    tests = _load_split(args, manifest, "test", args.test_limit)
    wanted = None if args.class_ in (None, ALL_CLASSES) else {int(args.class_)}
    timing = {}
    total = 0
    for rep_dir in _rep_dirs(run_dir / "reports"):
        results = []
        elapsed = 0.0
        for path in _class_dirs(rep_dir, "class_*.json"):
            report = SuspiciousnessReport.from_json(path.read_text(encoding="utf-8"))
            manifest.input(f"report_{rep_dir.name}_{path.stem}", path)
            classes = None
            if wanted is not None:
                if report.class_id == ALL_CLASSES:
                    classes = sorted(wanted)
                elif report.class_id not in wanted:
                    continue
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                t0 = time.perf_counter()
                try:
                    results.extend(synthesize_batch(net, tests, report, cfg, classes))
                except SynthesisError as exc:
                    logger.info("%s: %s", path.stem, exc)
                elapsed += time.perf_counter() - t0
            for w in caught:
                logger.warning("%s", w.message)
        if not results:
            raise DeepFaultError(f"nothing synthesized for {rep_dir.name}")
        out_dir = run_dir / "synth" / rep_dir.name
        save_results(results, out_dir)
        for name in ("synth.csv", "originals.f64", "synthesized.f64", "vectors.json"):
            manifest.output(run_dir, out_dir / name)
        timing[rep_dir.name] = {"runtime_seconds": elapsed, "inputs": len(results)}
        total += len(results)
    write_json(run_dir / "synth" / "timing.json", timing)
    manifest.write(run_dir)
    print(f"synthesized {total} input(s) into {run_dir / 'synth'}")


def _load_reports(rep_dir):
    return {_class_key(p): SuspiciousnessReport.from_json(p.read_text(encoding="utf-8"))
            for p in _class_dirs(rep_dir, "class_*.json")}


def _evaluate_run(run_dir, net, k_prime=None):
    """Per-class and pooled summaries of one run directory."""
    run_dir = Path(run_dir)
    timing = read_json(run_dir / "synth" / "timing.json")
    per_class = {}
    pooled, pooled_counts, measure, k = [], {}, None, None
    runtime = 0.0
    kprime_hits = {}
    for rep_dir in _rep_dirs(run_dir / "synth"):
        reports = _load_reports(run_dir / "reports" / rep_dir.name)
        labels, indices, originals, synthesized = load_vectors(rep_dir)
        runtime += timing[rep_dir.name]["runtime_seconds"]
        for key, report in reports.items():
            measure, k = report.measure, report.k
            rows = [i for i, lab in enumerate(labels) if key == ALL_CLASSES or lab == key]
            if not rows:
                continue
            results = rebuild_results(net, [labels[i] for i in rows], [indices[i] for i in rows],
                                      originals[rows], synthesized[rows], report.selected)
            summary = summarize(net, results, report)
            groups = ([(c, [r for r in results if r.label == c]) for c in sorted({r.label for r in results})]
                      if key == ALL_CLASSES else [(key, results)])
            for c, members in groups:
                entry = per_class.setdefault(str(c), {"repeats": []})
                entry["repeats"].append({
                    "accuracy": sum(r.still_correct for r in members) / len(members),
                    "loss": float(np.mean([r.loss() for r in members])),
                    "n_results": len(members),
                })
            for layer, count in summary.per_layer_counts.items():
                pooled_counts[layer] = pooled_counts.get(layer, 0) + count
            pooled.extend(results)
            if k_prime:
                top = report.ranking[:k_prime]
                kprime_hits.setdefault(k_prime, []).append(
                    (activation_increase_ratio(results, top), len(results)))
    for entry in per_class.values():
        entry["accuracy"] = float(np.mean([r["accuracy"] for r in entry["repeats"]]))
        entry["loss"] = float(np.mean([r["loss"] for r in entry["repeats"]]))
    dists = np.array([r.distances for r in pooled])
    overall = {
        "loss": float(np.mean([r.loss() for r in pooled])),
        "accuracy": sum(r.still_correct for r in pooled) / len(pooled),
        "distances": dict(zip(("mean_L1", "mean_L2", "mean_Linf"),
                              (float(v) for v in dists.mean(axis=0)))),
        "activation_increase_ratio": activation_increase_ratio(pooled),
        "per_layer_counts": {str(layer): c for layer, c in sorted(pooled_counts.items())},
        "runtime_seconds": runtime,
        "n_results": len(pooled),
    }
    doc = {"measure": measure.to_dict(), "k": k, "overall": overall, "per_class": per_class,
           "p_values": "two-sided"}
    if k_prime:
        pairs = kprime_hits[k_prime]
        doc["k_prime"] = {"k_prime": k_prime, "activation_increase_ratio":
                          sum(r * n for r, n in pairs) / sum(n for _, n in pairs)}
    return doc, pooled_counts


def cmd_evaluate(args):
    run_dir = Path(args.run_dir)
    config = {"compare": args.compare is not None, "k_prime": args.k_prime}
    manifest = Manifest("evaluate", args, config)
    model = _model_path(args)
    manifest.input("model", model)
    net = load_model(model)
    doc, counts = _evaluate_run(run_dir, net, args.k_prime)
    out_dir = run_dir / "eval"
    write_json(out_dir / "summary.json", doc)
    write_atomic(out_dir / "distribution.csv", counts_to_csv(counts))
    write_atomic(out_dir / "distribution.svg", bar_chart_svg(counts))
    for name in ("summary.json", "distribution.csv", "distribution.svg"):
        manifest.output(run_dir, out_dir / name)
    if args.compare is not None:
        other, _ = _evaluate_run(args.compare, net, None)
        classes = sorted(set(doc["per_class"]) & set(other["per_class"]), key=int)
        if not classes:
            raise DeepFaultError("runs share no classes to compare")
        lines = ["metric,U,p_two_sided,n,m,mean_this,mean_other"]
        for metric in ("accuracy", "loss"):
            a = [doc["per_class"][c][metric] for c in classes]
            b = [other["per_class"][c][metric] for c in classes]
            u, p = mann_whitney_u(a, b)
            lines.append(f"{metric},{u!r},{p!r},{len(a)},{len(b)},"
                         f"{float(np.mean(a))!r},{float(np.mean(b))!r}")
        write_atomic(out_dir / "mannwhitney.csv", "\n".join(lines) + "\n")
        manifest.output(run_dir, out_dir / "mannwhitney.csv")
    manifest.write(run_dir)
    o = doc["overall"]
    print(f"accuracy {o['accuracy']:.3f}  loss {o['loss']:.3f}  "
          f"L1 {o['distances']['mean_L1']:.2f}  activation increase "
          f"{o['activation_increase_ratio']:.3f}")


def build_parser():
    parser = Parser(prog="deepfault", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(p, data=True, model=True):
        p.add_argument("--run-dir", required=True, help="directory for this run's outputs")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1, help="BLAS thread limit")
        if data:
            p.add_argument("--data-dir", help="MNIST IDX directory (default: $DEEPFAULT_DATA_DIR)")
            p.add_argument("--test-limit", type=int, help="use only the first N test inputs")
        if model:
            p.add_argument("--model", help="model JSON (default: <run-dir>/model.json)")

    p = sub.add_parser("train", help="train a dense classifier on MNIST")
    common(p, model=False)
    p.add_argument("--hidden", default="8x20", help="'LAYERSxWIDTH' or comma-separated widths")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--train-limit", type=int, help="use only the first N training inputs")
    p.add_argument("--track-loss", action="store_true", help="record full training loss per epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="build hit spectra of hidden neurons")
    common(p)
    p.add_argument("--class", dest="class_", default="per",
                   help="'per' (one table per class), 'all', or a class index")
    p.add_argument("--threshold", type=float, default=0.0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("rank", help="score neurons and select the k most suspicious")
    common(p, data=False)
    p.add_argument("--measure", choices=MEASURES, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--star", type=float, default=3.0, help="D* exponent")
    p.add_argument("--stratified", action=argparse.BooleanOptionalAction, default=True,
                   help="random baseline samples per layer in proportion to width")
    p.add_argument("--repeats", type=int, help="random baseline repetitions (default 5)")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("synthesize", help="synthesize inputs guided by suspicious neurons")
    common(p)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--d", type=float, default=0.1)
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--class", dest="class_", help="restrict synthesis to one class")
    p.add_argument("--normalization", choices=NORMALIZATIONS, default="rms")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="loss, accuracy, distances, layer distribution")
    common(p, data=False)
    p.add_argument("--compare", help="another run directory to test against (Mann-Whitney)")
    p.add_argument("--k-prime", type=int, help="also report activation increase of the top-k' neurons")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageFailure as exc:
        print(exc, file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (DeepFaultError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
