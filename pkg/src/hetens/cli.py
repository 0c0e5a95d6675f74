"""Command-line surface.

Machine-readable JSON goes to stdout (and, with --out, to a file); the
human-readable summary goes to stderr so piping the JSON stays clean. Train
and eval style commands read a JSON config file with flat keys; any
``--key=value`` argument overrides one key (values are parsed as JSON when
possible, last writer wins).

Exit codes: 0 success, 1 validation failure (bad dataset, bad config, failed
check), 2 runtime or usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .gradients import DegenerateAttentionError, vanishing_scenario
from .hetgraph import DatasetFormatError, load_dataset, save_dataset
from .synth import SynthConfig, default_train_config, generate, scaled_config
from .training import (
    TrainConfig,
    ablation_modes,
    evaluate_model,
    load_params,
    param_shapes,
    resolve_model,
    run_ablation,
    run_gradcheck,
    run_grid,
    run_to_dir,
    timed_epochs,
)


class CliUsageError(Exception):
    """Malformed invocation that argparse could not catch."""


def _jsonable(obj):
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def emit(report: dict, out: str | None, table: list[str]) -> None:
    for line in table:
        print(line, file=sys.stderr)
    text = json.dumps(report, indent=2, sort_keys=True, default=_jsonable)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def parse_overrides(tokens: list[str]) -> dict:
    out: dict = {}
    for tok in tokens:
        if not tok.startswith("--") or "=" not in tok:
            raise CliUsageError(
                f"unrecognized argument {tok!r}; config overrides look like "
                f"--key=value"
            )
        key, _, value = tok[2:].partition("=")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def no_overrides(overrides: dict) -> None:
    if overrides:
        raise CliUsageError(
            f"this command takes no --key=value overrides "
            f"(got {sorted(overrides)})"
        )


def load_config(config_path: str | None, data_dir: str | None,
                overrides: dict, seed: int | None,
                threads: int | None) -> TrainConfig:
    """Config file, then data-directory fallback, then overrides, then flags."""
    path = None
    if config_path:
        path = Path(config_path)
    elif data_dir and (Path(data_dir) / "config.json").exists():
        path = Path(data_dir) / "config.json"
    if path is None:
        raise ValueError(
            "no config: pass --config FILE or keep a config.json next to the "
            "dataset"
        )
    if not path.exists():
        raise ValueError(f"config file {path} does not exist")
    raw = json.loads(path.read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    raw.update(overrides)
    if seed is not None:
        raw["seed"] = seed
    if threads is not None:
        raw["threads"] = threads
    return TrainConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(args, overrides) -> int:
    no_overrides(overrides)
    cfg = SynthConfig(
        n_targets=args.n_targets,
        num_classes=args.classes,
        n_aux_b=args.n_aux_b,
        n_aux_c=args.n_aux_c,
        signal_b=tuple(float(s) for s in args.signal_b.split(",")),
        signal_c=tuple(float(s) for s in args.signal_c.split(",")),
        feature_noise=args.feature_noise,
        feature_dim=args.feature_dim,
        edges_per_node=args.edges_per_node,
        seed=args.seed,
    )
    graph = generate(cfg)
    out = Path(args.out)
    save_dataset(graph, out)
    (out / "config.json").write_text(
        json.dumps(default_train_config(args.seed), indent=2, sort_keys=True)
        + "\n")
    report = {
        "out_dir": str(out),
        "generator": cfg.to_dict(),
        "node_counts": dict(zip(graph.node_type_names, graph.node_counts)),
        "edge_counts": {
            et.name: int(e.shape[0])
            for et, e in zip(graph.edge_types, graph.edges)
        },
        "num_classes": graph.num_classes,
        "splits": {
            s: int(graph.split_ids(s).shape[0]) for s in ("train", "val", "test")
        },
    }
    emit(report, None, [f"wrote synthetic dataset to {out}"])
    return 0


def cmd_ingest(args, overrides) -> int:
    no_overrides(overrides)
    graph = load_dataset(args.data)
    report = {
        "data_dir": str(args.data),
        "node_counts": dict(zip(graph.node_type_names, graph.node_counts)),
        "edge_counts": {
            et.name: int(e.shape[0])
            for et, e in zip(graph.edge_types, graph.edges)
        },
        "feature_dims": {
            name: int(f.shape[1])
            for name, f in zip(graph.node_type_names, graph.features)
        },
        "target_type": graph.node_type_names[graph.target_type],
        "num_classes": graph.num_classes,
        "splits": {
            s: int(graph.split_ids(s).shape[0]) for s in ("train", "val", "test")
        },
        "ok": True,
    }
    table = [f"dataset {args.data}: "
             f"{sum(graph.node_counts)} nodes, "
             f"{sum(int(e.shape[0]) for e in graph.edges)} edges, "
             f"{graph.num_classes} classes"]
    emit(report, args.out, table)
    return 0


def cmd_train(args, overrides) -> int:
    graph = load_dataset(args.data)
    cfg = load_config(args.config, args.data, overrides, args.seed, args.threads)
    if args.grid:
        report = run_grid(graph, cfg)
        table = [
            "hidden layers dropout  val_acc test_acc",
            *(
                f"{p['hidden_dim']:>6} {p['num_layers']:>6} {p['dropout']:>7} "
                f"{p['val_acc']:>8.4f} {p['test_acc']:>8.4f}"
                for p in report["points"]
            ),
        ]
        emit(report, args.out and str(Path(args.out) / "grid.json"), table)
        return 0
    if not args.out:
        raise CliUsageError("train needs --out DIR for its artifacts")
    report = run_to_dir(graph, cfg, args.out)
    report["out_dir"] = str(args.out)
    table = [
        f"best epoch {report['best_epoch']}: "
        f"val {report['best_val_acc']:.4f}, test {report['test_acc']:.4f} "
        f"({report['epochs_run']} epochs run)"
    ]
    emit(report, None, table)
    return 0


def cmd_eval(args, overrides) -> int:
    graph = load_dataset(args.data)
    run_dir = Path(args.run)
    cfg = load_config(str(run_dir / "config.json"), None, overrides,
                      args.seed, args.threads)
    model = resolve_model(graph, cfg)
    params = load_params(run_dir / "best_model.bin")
    expected = param_shapes(model)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(
            f"parameter file does not match the model "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, shape in expected.items():
        if tuple(params[name].shape) != tuple(shape):
            raise ValueError(
                f"parameter {name!r} has shape {params[name].shape}, "
                f"model wants {shape}"
            )
    metrics = evaluate_model(model, params)
    report = {"run_dir": str(run_dir), "data_dir": str(args.data), **metrics}
    table = [" ".join(f"{k} {v:.4f}" for k, v in metrics.items())]
    emit(report, args.out, table)
    return 0


def cmd_ablate(args, overrides) -> int:
    graph = load_dataset(args.data)
    cfg = load_config(args.config, args.data, overrides, args.seed, args.threads)
    modes = args.modes.split(",") if args.modes else ablation_modes(cfg)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    report = run_ablation(graph, cfg, modes, seeds)
    table = ["mode                      mean_val  mean_test"]
    for mode in modes:
        s = report["summary"][mode]
        table.append(
            f"{mode:<25} {s['mean_val_acc']:>8.4f} {s['mean_test_acc']:>10.4f}"
        )
    emit(report, args.out, table)
    return 0


def cmd_gradcheck(args, overrides) -> int:
    no_overrides(overrides)
    fd_report, meta = run_gradcheck(seed=args.seed, eps=args.eps, tol=args.tol)
    report = {**fd_report.to_dict(), **meta}
    table = [
        f"checked {meta['n_parameters']} parameters over {meta['n_views']} "
        f"views: max_rel_err {fd_report.max_rel_err:.3e} at "
        f"{fd_report.worst_param}{list(fd_report.worst_index)} "
        f"({'PASS' if fd_report.passed else 'FAIL'} at tol {args.tol:g})"
    ]
    emit(report, args.out, table)
    return 0 if fd_report.passed else 1


def cmd_gradflow(args, overrides) -> int:
    no_overrides(overrides)
    flow = vanishing_scenario(args.k, args.spread, seed=args.seed)
    report = flow.to_dict()
    i = flow.min_source
    report["analyzed_source"] = i
    report["without_residual_min_source"] = flow.without_residual_norms[i]
    report["with_residual_min_source"] = flow.with_residual_norms[i]
    report["residual_floor"] = 1.0 / args.k
    table = [
        f"k={args.k} spread={flow.spread:.3e} analyzed source {i}",
        f"  gradient norm without residual: "
        f"{flow.without_residual_norms[i]:.3e}",
        f"  gradient norm with residual:    "
        f"{flow.with_residual_norms[i]:.3e} (floor 1/k = {1.0 / args.k:.3e})",
        f"  max |(with - without) - I/k|:   {flow.residual_identity_dev:.3e}",
    ]
    emit(report, args.out, table)
    return 0


def cmd_scaling(args, overrides) -> int:
    no_overrides(overrides)
    sizes = [int(s) for s in args.sizes.split(",")]
    if len(sizes) < 3:
        raise ValueError(f"scaling needs at least 3 sizes, got {len(sizes)}")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be strictly increasing")
    rows = []
    for size in sizes:
        graph = generate(scaled_config(size, seed=args.seed))
        cfg = TrainConfig.from_dict(default_train_config(args.seed))
        cfg = replace(cfg, threads=args.threads)
        timing = timed_epochs(graph, cfg, n_epochs=args.epochs, warmup=1)
        rows.append({
            "requested_edges": size,
            "n_edges": timing["n_edges"],
            "n_nodes": timing["n_nodes"],
            "volume": timing["n_edges"] + timing["n_nodes"],
            "mean_seconds": timing["mean_seconds"],
            "epoch_seconds": timing["epoch_seconds"],
        })
    slope = float(np.polyfit(
        np.log([r["volume"] for r in rows]),
        np.log([r["mean_seconds"] for r in rows]), 1,
    )[0])
    report = {"sizes": rows, "log_log_slope": slope, "epochs": args.epochs}
    table = ["     volume    edges  mean_sec"]
    for r in rows:
        table.append(
            f"{r['volume']:>11} {r['n_edges']:>8} {r['mean_seconds']:>9.4f}"
        )
    table.append(f"log-log slope: {slope:.3f}")
    emit(report, args.out, table)
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetens",
        description="Ensemble node classification on heterogeneous graphs.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-targets", type=int, default=300)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--n-aux-b", type=int, default=150)
    p.add_argument("--n-aux-c", type=int, default=150)
    p.add_argument("--signal-b", default="0.9,0.9,0.05")
    p.add_argument("--signal-c", default="0.05,0.9,0.9")
    p.add_argument("--feature-noise", type=float, default=2.0)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--edges-per-node", type=int, default=6)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="load and validate a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model (plus --key=value overrides)")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--grid", action="store_true",
                   help="run the hyperparameter sweep instead of one run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate saved parameters from a run dir")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="paired ablation study over seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--modes", help="comma-separated; default: all modes")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of every gradient path")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gradflow",
                       help="gradient norms through fusion with and without "
                            "the residual, at a chosen score spread")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--spread", type=float, required=True)
    p.add_argument("--seed", type=int, default=97)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradflow)

    p = sub.add_parser("scaling",
                       help="epoch wall time across synthetic graph sizes")
    p.add_argument("--sizes", default="10000,30000,100000")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_scaling)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(extras)
        return args.func(args, overrides)
    except CliUsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (DatasetFormatError, ValueError, DegenerateAttentionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
