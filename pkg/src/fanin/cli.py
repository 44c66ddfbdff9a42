"""Command-line front end: reproducible experiments with CSV outputs.

Subcommands: stats, cluster, train, evaluate, sweep, memory, synth.
Exit codes: 0 success, 1 configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import (balanced_kmeans, build_label_features,
                         default_num_clusters, load_clustering,
                         random_clustering, save_clustering)
from .config import (RunSpec, build_manifest, load_run_spec, spec_from_mapping,
                     spec_to_mapping, write_config, write_manifest)
from .data import (compute_propensities, compute_stats, generate_synthetic,
                   load_xmc_file, save_xmc_file)
from .errors import ConfigError, DataError, FaninError
from .layer import head_memory_bytes, memory_overhead, sparsity_of
from .model import load_checkpoint, save_checkpoint
from .train import Telemetry, evaluate, train

STATS_HEADER = "name,N,L,Ntest,Lbar,Lhat"
SWEEP_HEADER = "axis_value,P@1,P@3,P@5,PSP@1,wallclock"

_SWEEP_AXES = {
    "rewire_interval": "rewire_interval",
    "fan_in": "fan_in",
    "aux_cutoff": "aux_cutoff_epoch",
    "intermediate_size": "intermediate_size",
}


def _emit(text: str, out: str | None, command: str, manifest: dict) -> None:
    """Write text to --out (manifest alongside) or to stdout."""
    if out is None:
        print(text, end="" if text.endswith("\n") else "\n")
        return
    path = Path(out)
    write_manifest(manifest, path.with_name(path.name + ".manifest.json"))
    path.write_text(text if text.endswith("\n") else text + "\n",
                    encoding="utf-8")


def cmd_stats(args) -> int:
    manifest = build_manifest("stats", None, None,
                              {"dataset": args.dataset,
                               "test": args.test} if args.test else
                              {"dataset": args.dataset},
                              args.out or "-")
    ds = load_xmc_file(args.dataset)
    st = compute_stats(ds)
    ntest = ""
    if args.test:
        ntest = str(load_xmc_file(args.test).num_instances)
    name = args.name or Path(args.dataset).stem
    row = (f"{name},{st.num_instances},{st.num_labels},{ntest},"
           f"{st.avg_labels_per_instance:.2f},{st.avg_instances_per_label:.2f}")
    _emit(f"{STATS_HEADER}\n{row}\n", args.out, "stats", manifest)
    return 0


def cmd_cluster(args) -> int:
    manifest = build_manifest("cluster", None, args.seed,
                              {"dataset": args.dataset}, args.out,
                              extra={"k": args.k, "mode": args.mode})
    ds = load_xmc_file(args.dataset)
    k = args.k if args.k else default_num_clusters(ds.num_labels)
    manifest["k"] = k
    out_path = Path(args.out)
    write_manifest(manifest,
                   out_path.with_name(out_path.name + ".manifest.json"))
    if args.mode == "balanced":
        feats = build_label_features(ds)
        clustering = balanced_kmeans(feats, k, args.seed)
    else:
        clustering = random_clustering(ds.num_labels, k, args.seed)
    save_clustering(clustering, out_path)
    sizes = clustering.sizes()
    print(f"clusters={clustering.num_clusters} labels={clustering.num_labels} "
          f"min_size={int(sizes.min())} max_size={int(sizes.max())}")
    return 0


def cmd_synth(args) -> int:
    manifest = build_manifest("synth", None, args.seed, {}, args.out, extra={
        "n": args.n, "labels": args.labels, "features": args.features,
        "zipf": args.zipf, "per_instance": args.per_instance,
    })
    out_path = Path(args.out)
    write_manifest(manifest,
                   out_path.with_name(out_path.name + ".manifest.json"))
    ds = generate_synthetic(args.n, args.labels, args.features, args.zipf,
                            args.per_instance, args.seed)
    save_xmc_file(ds, out_path)
    print(f"wrote {args.out}: N={ds.num_instances} d={ds.num_features} "
          f"L={ds.num_labels}")
    return 0


def _metrics_csv(report: dict[str, float]) -> str:
    lines = ["metric,k,value"]
    for name, value in report.items():
        metric, _, k = name.partition("@")
        lines.append(f"{metric},{k},{value:.6f}")
    return "\n".join(lines) + "\n"


def _run_training(spec: RunSpec, out_dir: Path) -> dict[str, float]:
    """Train per the spec, write all artifacts, return the metrics report."""
    if spec.train_data is None:
        raise ConfigError("config must set train_data")
    train_set = load_xmc_file(spec.train_data)
    test_set = load_xmc_file(spec.test_data) if spec.test_data else None
    clustering = load_clustering(spec.clustering) if spec.clustering else None
    model, telemetry = train(train_set, test_set, clustering, spec.cfg)
    save_checkpoint(model, out_dir / "checkpoint.npz")
    telemetry.save(out_dir / "telemetry.csv", out_dir / "rewires.csv")
    report: dict[str, float] = {}
    if test_set is not None:
        props = None
        try:
            props = compute_propensities(train_set.label_counts(),
                                         train_set.num_instances)
        except ConfigError:
            props = None
        report = evaluate(model, test_set, propensities=props)
        (out_dir / "metrics.csv").write_text(_metrics_csv(report),
                                             encoding="utf-8")
    return report


def cmd_train(args) -> int:
    spec = load_run_spec(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(
        "train", spec, spec.cfg.seed,
        {"train_data": spec.train_data, "test_data": spec.test_data,
         "clustering": spec.clustering},
        str(out_dir))
    write_manifest(manifest, out_dir / "manifest.json")
    with open(out_dir / "config.resolved", "w", encoding="utf-8") as fh:
        write_config(spec, fh)
    report = _run_training(spec, out_dir)
    for name, value in report.items():
        print(f"{name} = {value:.4f}")
    print(f"artifacts in {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = build_manifest(
        "evaluate", None, None,
        {"checkpoint": args.checkpoint, "data": args.data,
         "train": args.train},
        args.out or "-")
    model = load_checkpoint(args.checkpoint)
    ds = load_xmc_file(args.data)
    props = None
    if args.train:
        ref = load_xmc_file(args.train)
        props = compute_propensities(ref.label_counts(), ref.num_instances)
    ks = tuple(int(k) for k in args.ks.split(","))
    report = evaluate(model, ds, ks=ks, propensities=props)
    _emit(_metrics_csv(report), args.out, "evaluate", manifest)
    return 0


def _sweep_one(payload: tuple[dict, str, str, str]) -> tuple[str, str]:
    """Run one sweep point; returns (value, csv_row_tail or error)."""
    mapping, axis_key, value, run_dir = payload
    mapping = dict(mapping)
    mapping[axis_key] = value
    if axis_key == "intermediate_size":
        mapping["use_intermediate"] = "true"
    out_dir = Path(run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = spec_from_mapping(mapping)
    write_manifest(build_manifest("sweep-run", spec, spec.cfg.seed,
                                  {"train_data": spec.train_data,
                                   "test_data": spec.test_data,
                                   "clustering": spec.clustering},
                                  run_dir),
                   out_dir / "manifest.json")
    started = time.perf_counter()
    report = _run_training(spec, out_dir)
    wall = time.perf_counter() - started
    row = (f"{report.get('P@1', float('nan')):.6f},"
           f"{report.get('P@3', float('nan')):.6f},"
           f"{report.get('P@5', float('nan')):.6f},"
           f"{report.get('PSP@1', float('nan')):.6f},{wall:.2f}")
    return value, row


def cmd_sweep(args) -> int:
    if args.axis not in _SWEEP_AXES:
        raise ConfigError(f"axis must be one of {sorted(_SWEEP_AXES)}")
    spec = load_run_spec(args.config)
    mapping = spec_to_mapping(spec)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("no sweep values given")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(
        "sweep", spec, spec.cfg.seed,
        {"train_data": spec.train_data, "test_data": spec.test_data,
         "clustering": spec.clustering},
        str(out_dir),
        extra={"axis": args.axis, "values": values})
    write_manifest(manifest, out_dir / "manifest.json")
    payloads = [(mapping, _SWEEP_AXES[args.axis], v,
                 str(out_dir / f"run_{args.axis}_{v}")) for v in values]
    rows: list[str] = []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_try, payloads))
    else:
        results = [_sweep_try(p) for p in payloads]
    # fan_in sweeps get a derived sparsity column appended
    header = SWEEP_HEADER
    head_dim = 0
    if args.axis == "fan_in":
        header += ",sparsity"
        head_dim = (spec.cfg.model.intermediate_size
                    if spec.cfg.model.use_intermediate
                    else spec.cfg.model.embed_dim)
    for value, row in results:
        line = f"{value},{row}"
        if args.axis == "fan_in" and not row.startswith("error"):
            line += f",{sparsity_of(int(value), head_dim):.4f}"
        rows.append(line)
        print(f"{args.axis}={value}: {row}")
    (out_dir / "sweep.csv").write_text(
        header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return 0


def _sweep_try(payload: tuple[dict, str, str, str]) -> tuple[str, str]:
    try:
        return _sweep_one(payload)
    except FaninError as exc:  # record the failure, keep sweeping
        return payload[2], f"error: {exc}"


def cmd_memory(args) -> int:
    index_bits = args.index_bits or (16 if args.d <= 65536 else 32)
    acct = head_memory_bytes(args.d, args.labels, args.fan_in,
                             args.weight_bits, index_bits)
    overhead = memory_overhead(args.weight_bits, index_bits,
                               shared_index_buffers=3)
    gib = 1024 ** 3
    lines = [
        f"dense_bytes = {acct['dense_bytes']:.0f} "
        f"({acct['dense_bytes'] / gib:.3f} GiB)",
        f"sparse_bytes = {acct['sparse_bytes']:.0f} "
        f"({acct['sparse_bytes'] / gib:.3f} GiB)",
        f"sparse_to_dense_ratio = {acct['ratio']:.6f}",
        f"sparsity = {sparsity_of(args.fan_in, args.d):.4f}",
        f"index_overhead_amortized = {overhead:.6f}",
    ]
    text = "\n".join(lines) + "\n"
    manifest = build_manifest("memory", None, None, {}, args.out or "-",
                              extra={"d": args.d, "labels": args.labels,
                                     "fan_in": args.fan_in})
    _emit(text, args.out, "memory", manifest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fanin",
        description="Dynamic sparse training with fixed fan-in output layers")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("stats", help="dataset statistics as one CSV row")
    sp.add_argument("dataset")
    sp.add_argument("--test", help="test-set file for the Ntest column")
    sp.add_argument("--name", help="row name (default: file stem)")
    sp.add_argument("--out", help="write CSV here instead of stdout")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("cluster", help="build a label clustering file")
    sp.add_argument("dataset")
    sp.add_argument("--k", type=int, default=0,
                    help="cluster count (power of 2; default: ~L/100)")
    sp.add_argument("--mode", choices=("balanced", "random"),
                    default="balanced")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("synth", help="generate a synthetic long-tailed dataset")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--labels", type=int, required=True)
    sp.add_argument("--features", type=int, required=True)
    sp.add_argument("--zipf", type=float, default=1.2)
    sp.add_argument("--per-instance", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train per a key=value config file")
    sp.add_argument("config")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--train", help="train file for propensities")
    sp.add_argument("--ks", default="1,3,5")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="train once per value of one axis")
    sp.add_argument("--config", required=True)
    sp.add_argument("--axis", required=True, choices=sorted(_SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--jobs", type=int, default=1,
                    help="run sweep points in parallel")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("memory", help="byte accounting for dense vs sparse head")
    sp.add_argument("--d", type=int, required=True)
    sp.add_argument("--labels", type=int, required=True)
    sp.add_argument("--fan-in", type=int, required=True)
    sp.add_argument("--weight-bits", type=int, default=32)
    sp.add_argument("--index-bits", type=int, default=0,
                    help="0 picks 16 or 32 from d")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_memory)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except FaninError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
