"""Command-line interface: ``tart {train,eval,explain,bench,presets}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, data
from .interpret import (
    UnsupportedStructure,
    captured_mass,
    class_mean_relevance,
    conservation_factor,
    explain_prediction,
    is_conserving,
)
from .model import (
    FAMILIES,
    PRESETS,
    TartModel,
    build_model,
    forward,
    load_model,
    save_model,
)
from .train import TrainConfig, evaluate_accuracy, fit, write_loss_history
from .tree import TreeShape

log = logging.getLogger("tart")


class CliError(Exception):
    pass


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def _nonneg(value: str) -> int:
    n = int(value)
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return n


def _depth_list(value: str) -> list[int]:
    try:
        depths = [int(v) for v in value.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad depth list {value!r}") from None
    if not depths or min(depths) < 0:
        raise argparse.ArgumentTypeError("depths must be non-negative integers")
    return depths


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV file, label in --label-column")
    p.add_argument("--label-column", type=int, default=-1)
    p.add_argument("--header", action="store_true", help="first CSV row is a header")


def build_parser() -> argparse.ArgumentParser:
    return _build()[0]


def _build():
    parser = argparse.ArgumentParser(prog="tart", description=__doc__)
    parser.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = subs["train"] = sub.add_parser("train", help="fit a model on a CSV file")
    _data_args(p)
    p.add_argument("--preset", choices=sorted(PRESETS), type=str.upper)
    p.add_argument("--W", dest="window", type=_positive)
    p.add_argument("--S", dest="stride", type=_positive)
    p.add_argument("--D", dest="depth", type=_nonneg)
    p.add_argument("--H", dest="decision_layers", type=_nonneg)
    p.add_argument("--L", dest="leaf_layers", type=_nonneg)
    p.add_argument("--hidden-units", type=_positive, default=100)
    p.add_argument("--leaf-mode", choices=["multi", "single"])
    p.add_argument("--decision", choices=["softmax", "sigmoid"], default="softmax")
    p.add_argument("--dropout", type=float, default=0.15)
    p.add_argument("--epochs", type=_positive, default=100)
    p.add_argument("--batch-size", type=_positive, default=1024)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--history", help="loss history file (default: <out>.loss.txt)")

    p = subs["eval"] = sub.add_parser("eval", help="accuracy of a saved model")
    _data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--both-modes", action="store_true",
                   help="report multi-leaf and single-leaf accuracy")

    p = subs["explain"] = sub.add_parser("explain", help="feature relevances of a saved model")
    _data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=["multi", "single"])
    p.add_argument("--fallback", choices=["grad-x-input"])

    p = subs["bench"] = sub.add_parser("bench", help="time TConv vs dense-matrix inference")
    p.add_argument("--depths", type=_depth_list, default=[8, 10, 12])
    p.add_argument("--batch", type=_positive, default=1024)
    p.add_argument("--features", type=_positive, default=16)
    p.add_argument("--classes", type=_positive, default=10)
    p.add_argument("--repeats", type=_positive, default=5)
    p.add_argument("--jobs", type=_positive, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV output (default: stdout)")

    subs["presets"] = sub.add_parser("presets", help="list preset structures and the family table")
    return parser, subs


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = _build()
    args = parser.parse_args(argv)
    if args.config:
        try:
            defaults = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(defaults, dict):
            parser.error("config file must hold a JSON object")
        # Re-parse with file values as defaults so explicit flags override them.
        subparser = subs[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(defaults) - known)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _load_data(args, m: TartModel | None = None) -> data.Dataset:
    ds = data.load_csv(args.data, args.label_column, args.header)
    if m is None:
        return ds
    if ds.n_features != m.input_dim:
        raise CliError(
            f"feature dimension mismatch: {args.data} has {ds.n_features} features, "
            f"model expects {m.input_dim}"
        )
    if ds.class_count > m.class_count:
        raise CliError(f"{args.data} has {ds.class_count} classes, model knows {m.class_count}")
    if m.standardizer is not None:
        ds = data.apply(m.standardizer, ds)
    return ds


def _resolve_structure(args) -> dict:
    names = ("window", "stride", "depth", "decision_layers", "leaf_layers")
    values = {}
    if args.preset:
        p = PRESETS[args.preset]
        values = {n: getattr(p, n) for n in names}
        values["leaf_mode"] = p.leaf_mode
    for n in names:
        if getattr(args, n) is not None:
            values[n] = getattr(args, n)
    missing = [n for n in names if n not in values]
    if missing:
        raise CliError("give --preset or all of --W --S --D --H --L")
    if args.leaf_mode:
        values["leaf_mode"] = args.leaf_mode
    values.setdefault("leaf_mode", "multi")
    return values


def cmd_train(args) -> int:
    s = _resolve_structure(args)
    shape = TreeShape(s["window"], s["stride"], s["depth"])
    if not 0.0 <= args.dropout < 1.0:
        raise CliError("dropout must lie in [0, 1)")
    cfg = TrainConfig(batch_size=args.batch_size, epochs=args.epochs, seed=args.seed, lr=args.lr)
    ds = _load_data(args)
    stats = data.standardize(ds)
    ds = data.apply(stats, ds)
    m = build_model(
        shape, s["decision_layers"], s["leaf_layers"], ds.n_features, max(ds.class_count, 2),
        hidden_units=args.hidden_units, leaf_mode=s["leaf_mode"], decision=args.decision,
        dropout_prob=args.dropout, rng=np.random.default_rng([args.seed, 1]),
    )
    m.standardizer = stats
    m, history = fit(m, ds, cfg)
    save_model(m, args.out)
    history_path = args.history or f"{args.out}.loss.txt"
    write_loss_history(history_path, history)
    acc = evaluate_accuracy(m, ds)
    print(f"train accuracy {m.leaf_mode} {acc:.17g}")
    print(f"wrote {args.out} and {history_path}")
    return 0


def cmd_eval(args) -> int:
    m = load_model(args.model)
    ds = _load_data(args, m)
    modes = ["multi", "single"] if args.both_modes else [m.leaf_mode]
    for mode in modes:
        print(f"accuracy {mode} {evaluate_accuracy(m, ds, mode):.17g}")
    return 0


def cmd_explain(args) -> int:
    m = load_model(args.model)
    ds = _load_data(args, m)
    mode = args.mode or m.leaf_mode
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        reports = [explain_prediction(m, x, mode, args.fallback) for x in ds.features]
    except UnsupportedStructure as exc:
        raise CliError(f"{exc}; pass --fallback grad-x-input for a heuristic explanation") from None
    method = reports[0].method if reports else "lrp"

    with (out / "relevance.csv").open("w", encoding="utf-8") as fh:
        if method == "grad-x-input":
            fh.write("# method=grad-x-input (heuristic gradient times input, no conservation)\n")
        else:
            fh.write(f"# method=lrp mode={mode} factor={_report_factor(m):.17g}\n")
        fh.write("example,class,feature,score\n")
        for k, report in enumerate(reports):
            for c, rel in enumerate(report.classes):
                for j, score in enumerate(rel.scores):
                    fh.write(f"{k},{c},{j},{score:.17g}\n")

    means, empty = class_mean_relevance(m, ds, mode, args.fallback)
    with (out / "class_mean.csv").open("w", encoding="utf-8") as fh:
        fh.write(f"# method={method}\n")
        fh.write("class,empty," + ",".join(f"f{j}" for j in range(m.input_dim)) + "\n")
        for c, row in enumerate(means):
            fh.write(f"{c},{int(empty[c])}," + ",".join(f"{v:.17g}" for v in row) + "\n")

    with (out / "prototypes.csv").open("w", encoding="utf-8") as fh:
        fh.write("example,layer1_node,leaf,label\n")
        if len(ds):
            cache = forward(m, ds.features)
            layer1 = (np.argmax(cache.arrivals[1], axis=1) if m.shape.depth >= 1
                      else np.zeros(len(ds), dtype=int))
            leaves = np.argmax(cache.arrival, axis=1)
            for k in range(len(ds)):
                fh.write(f"{k},{layer1[k]},{leaves[k]},{ds.labels[k]}\n")

    print(f"wrote relevance.csv, class_mean.csv and prototypes.csv to {out}")
    if method == "lrp":
        _print_conservation(m, ds, reports, mode)
    return 0


def _report_factor(m: TartModel) -> float:
    return 1.0 if m.shape.depth == 0 else conservation_factor(m.shape.depth + 1)


def _print_conservation(m, ds, reports, mode) -> bool:
    factor = _report_factor(m)
    full, worst = 0, 0.0
    for x, report in zip(ds.features, reports):
        sums = np.array([rel.scores.sum() for rel in report.classes])
        worst = max(worst, float(np.max(np.abs(sums - captured_mass(m, x, mode)))))
        if is_conserving(m, x):
            full += 1
            values = np.array([rel.value for rel in report.classes])
            worst = max(worst, float(np.max(np.abs(sums - factor * values))))
    ok = worst <= 1e-9
    print(f"conservation check {'pass' if ok else 'FAIL'}: max deviation {worst:.3g} over "
          f"{len(reports)} examples; factor {factor:.17g} applies in full to {full} of them "
          f"(the rest have a vanishing z+ denominator)")
    return ok


def cmd_bench(args) -> int:
    rows = bench.run_benchmark(args.depths, batch=args.batch, features=args.features,
                               classes=args.classes, repeats=args.repeats, seed=args.seed,
                               jobs=args.jobs)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            bench.write_rows(rows, fh)
    else:
        bench.write_rows(rows, sys.stdout)
    return 0


def cmd_presets(args=None) -> int:
    print("name W S D H L leaf_mode")
    for p in PRESETS.values():
        print(f"{p.row()} {p.leaf_mode}  # {p.note}")
    print()
    print("family D/H/L")
    for name, region in FAMILIES.items():
        print(f"{name}: {region}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "bench": cmd_bench,
    "presets": cmd_presets,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, ValueError, OSError, AssertionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
