"""Experiment runner: single runs, sweeps, and validation commands.

Experiments are described by one JSON document (see README for the schema);
individual fields can be overridden from the command line. Each run writes
per-seed CSV metrics, a JSON summary echoing the configuration, and a plot
script that renders the CSVs. Exit codes: 0 success, 2 configuration error,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import itertools
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis
from .data import (
    load_cifar10_batches,
    load_idx_dataset,
    make_clustered_dataset,
    partition_iid,
    partition_single_label,
    shard_arrays,
)
from .errors import ConfigError, DataError, NumericsError
from .learner import SgdLearner
from .simulator import run_timeline
from .tasks import MlpTask, SoftmaxRegressionTask, make_quadratic
from .timing import SystemConfig, optimal_intentional_delay, profile

DATA_DIR_ENV = "TDMAFL_DATA_DIR"
CSV_HEADER = ["round", "slot", "loss", "grad_norm_sq", "staleness"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def canonical_json(obj) -> str:
    """Normalized JSON text: sorted keys, no whitespace padding."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# Experiment specification
# ---------------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    name: str
    mode: str
    system: dict
    task: dict
    seeds: list[int]
    metrics_every: int = 1
    out_dir: Optional[str] = None
    grid: Optional[dict] = None
    raw: Optional[dict] = None

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        if not isinstance(doc, dict):
            raise ConfigError("experiment spec must be a JSON object")
        known = {"name", "mode", "system", "task", "seeds", "metrics_every", "out_dir", "grid"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown spec fields: {sorted(unknown)}")
        try:
            spec = cls(
                name=doc["name"],
                mode=doc.get("mode", "run"),
                system=dict(doc["system"]),
                task=dict(doc.get("task", {"kind": "none"})),
                seeds=list(doc.get("seeds", [0])),
                metrics_every=int(doc.get("metrics_every", 1)),
                out_dir=doc.get("out_dir"),
                grid=doc.get("grid"),
                raw=doc,
            )
        except KeyError as exc:
            raise ConfigError(f"spec missing required field: {exc}") from exc
        if not spec.seeds:
            raise ConfigError("seeds must be non-empty")
        if spec.mode not in {"run", "sweep", "validate-timing", "validate-prop1", "rate-trend"}:
            raise ConfigError(f"unknown mode {spec.mode!r}")
        return spec

    @classmethod
    def from_path(cls, path) -> "ExperimentSpec":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def build_system_config(system: dict) -> SystemConfig:
    """Turn the spec's system block into a SystemConfig.

    Either ``samples_per_slot`` or the convenience field ``compute_slots``
    sets the local-compute cost; ``intentional_delay`` may be the string
    "optimal" to apply the largest free deferral.
    """
    sysd = dict(system)
    delay = sysd.pop("intentional_delay", 0)
    compute_slots = sysd.pop("compute_slots", None)
    field_map = {
        "num_devices": "num_devices",
        "group_size": "group_size",
        "slots_per_transfer": "slots_per_transfer",
        "samples_per_slot": "samples_per_slot",
        "local_steps": "local_steps",
        "batch_size": "batch_size",
        "step_size": "step_size",
        "horizon": "horizon",
    }
    unknown = set(sysd) - set(field_map)
    if unknown:
        raise ConfigError(f"unknown system fields: {sorted(unknown)}")
    kwargs = {field_map[k]: v for k, v in sysd.items()}
    if compute_slots is not None:
        if "samples_per_slot" in kwargs:
            raise ConfigError("give either compute_slots or samples_per_slot, not both")
        base = SystemConfig.from_times(
            kwargs.pop("num_devices"), kwargs.pop("group_size"),
            int(compute_slots), kwargs.pop("slots_per_transfer", 1), **kwargs,
        )
    else:
        base = SystemConfig(**kwargs)
    if delay == "optimal":
        delay = optimal_intentional_delay(base).alpha
    if delay:
        base = SystemConfig(
            num_devices=base.num_devices,
            group_size=base.group_size,
            slots_per_transfer=base.slots_per_transfer,
            samples_per_slot=base.samples_per_slot,
            local_steps=base.local_steps,
            batch_size=base.batch_size,
            step_size=base.step_size,
            horizon=base.horizon,
            intentional_delay=int(delay),
        )
    return base


def build_task(task_spec: dict, dataset_dir: Optional[str], *, num_devices: int):
    """Construct the task named by the spec. Returns (task, initial_model)."""
    kind = task_spec.get("kind", "none")
    if kind == "none":
        return None, None
    params = {k: v for k, v in task_spec.items() if k != "kind"}
    data_seed = int(params.pop("data_seed", 0))
    rng = np.random.default_rng([data_seed, 0xDA7A])

    if kind == "quadratic":
        init_offset = params.pop("init_offset", 0.0)
        eig_range = tuple(params.pop("eig_range", (1.0, 1.0)))
        task = make_quadratic(
            num_devices=num_devices,
            dim=int(params.pop("dim", 5)),
            heterogeneity=float(params.pop("heterogeneity", 1.0)),
            rng=rng,
            samples_per_device=int(params.pop("samples_per_device", 32)),
            sample_noise=float(params.pop("sample_noise", 0.0)),
            eig_range=eig_range,
        )
        _reject_unknown(kind, params)
        init = None
        if init_offset:
            init = task.w_star + init_offset * np.ones(task.dim) / np.sqrt(task.dim)
        return task, init

    if kind in {"logistic", "mlp"}:
        per_device = int(params.pop("per_device", 50))
        partition = params.pop("partition", "single_label")
        dataset_name = params.pop("dataset", "clusters")
        if dataset_name == "clusters":
            dataset = make_clustered_dataset(
                num_classes=int(params.pop("num_classes", 10)),
                dim=int(params.pop("feature_dim", 16)),
                per_class=int(params.pop("samples_per_class", 400)),
                rng=rng,
                spread=float(params.pop("spread", 3.0)),
                noise=float(params.pop("noise", 1.0)),
            )
        elif dataset_name == "mnist":
            dataset = _load_mnist(dataset_dir)
        elif dataset_name == "cifar10":
            dataset = _load_cifar(dataset_dir)
        else:
            raise ConfigError(f"unknown dataset {dataset_name!r}")
        if partition == "single_label":
            shards = partition_single_label(dataset, num_devices, per_device, rng)
        elif partition == "iid":
            shards = partition_iid(dataset, num_devices, per_device, rng)
        else:
            raise ConfigError(f"unknown partition {partition!r}")
        feats, labels = shard_arrays(shards)
        num_classes = dataset.num_classes
        if kind == "logistic":
            _reject_unknown(kind, params)
            return SoftmaxRegressionTask(feats, labels, num_classes), None
        hidden = int(params.pop("hidden", 32))
        _reject_unknown(kind, params)
        task = MlpTask(feats, labels, num_classes, hidden=hidden)
        return task, task.init_params(np.random.default_rng([data_seed, 0x1417]))

    raise ConfigError(f"unknown task kind {kind!r}")


def _reject_unknown(kind: str, params: dict) -> None:
    if params:
        raise ConfigError(f"unknown {kind} task fields: {sorted(params)}")


def _find_file(root: Path, names: Sequence[str]) -> Path:
    for name in names:
        cand = root / name
        if cand.exists():
            return cand
    raise DataError(f"none of {list(names)} found under {root}")


def _load_mnist(dataset_dir: Optional[str]):
    if dataset_dir is None:
        raise DataError("mnist task needs --dataset-dir or " + DATA_DIR_ENV)
    root = Path(dataset_dir)
    images = _find_file(root, ["train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"])
    labels = _find_file(root, ["train-labels-idx1-ubyte", "train-labels-idx1-ubyte.gz"])
    return load_idx_dataset(images, labels)


def _load_cifar(dataset_dir: Optional[str]):
    if dataset_dir is None:
        raise DataError("cifar10 task needs --dataset-dir or " + DATA_DIR_ENV)
    root = Path(dataset_dir)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    batches = sorted(root.glob("data_batch_*.bin"))
    if not batches:
        raise DataError(f"no data_batch_*.bin files under {root}")
    return load_cifar10_batches(batches)


# ---------------------------------------------------------------------------
# Metrics output
# ---------------------------------------------------------------------------


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i in range(len(metrics)):
            writer.writerow([
                metrics.rounds[i],
                metrics.slots[i],
                repr(metrics.loss[i]),
                repr(metrics.grad_norm_sq[i]),
                repr(metrics.staleness[i]),
            ])


def read_metrics_csv(path) -> dict[str, list]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise DataError(f"unexpected metrics header {header}")
        out: dict[str, list] = {name: [] for name in CSV_HEADER}
        for row in reader:
            out["round"].append(int(row[0]))
            out["slot"].append(int(row[1]))
            out["loss"].append(float(row[2]))
            out["grad_norm_sq"].append(float(row[3]))
            out["staleness"].append(float(row[4]))
    return out


PLOT_SCRIPT = '''#!/usr/bin/env python3
"""Render the metrics CSVs next to this script. Requires matplotlib."""
import csv
import glob
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

MARKER_SLOT_INTERVAL = 1000
HERE = os.path.dirname(os.path.abspath(__file__))


def load(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    slots = [int(r["slot"]) for r in rows]
    loss = [float(r["loss"]) for r in rows]
    keep = [i for i, v in enumerate(loss) if v == v]  # drop NaN rows
    return [slots[i] for i in keep], [loss[i] for i in keep]


def marker_indices(slots):
    out, last = [], -1
    for i, s in enumerate(slots):
        block = s // MARKER_SLOT_INTERVAL
        if block != last:
            out.append(i)
            last = block
    return out


def main():
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for path in sorted(glob.glob(os.path.join(HERE, "seed*", "metrics.csv"))):
        slots, loss = load(path)
        if not slots:
            continue
        label = os.path.basename(os.path.dirname(path))
        marks = marker_indices(slots)
        ax.plot(slots, loss, label=label, marker="o", markevery=marks, markersize=3)
    ax.set_xlabel("time slot")
    ax.set_ylabel("global loss")
    ax.legend()
    fig.tight_layout()
    out = os.path.join(HERE, "loss_vs_slots.png")
    fig.savefig(out, dpi=150)
    print("wrote", out)


if __name__ == "__main__":
    main()
'''


# ---------------------------------------------------------------------------
# run / sweep
# ---------------------------------------------------------------------------


def run_experiment(spec: ExperimentSpec, out_dir, dataset_dir=None) -> dict:
    """Execute one experiment spec; returns the summary dict it wrote."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = build_system_config(spec.system)
    task, init = build_task(spec.task, dataset_dir, num_devices=cfg.num_devices)
    prof = profile(cfg)

    summary: dict = {
        "name": spec.name,
        "config": spec.raw if spec.raw is not None else {},
        "timing": {
            "tau_comp": prof.tau_comp,
            "tau_comm": prof.tau_comm,
            "tau_asyn": str(prof.tau_asyn),
            "num_groups": prof.num_groups,
            "rounds_closed_form": cfg.rounds_closed_form(),
        },
        "per_seed": [],
    }
    error: Optional[NumericsError] = None
    for seed in spec.seeds:
        learner = None
        if task is not None:
            learner = SgdLearner(
                task=task,
                step_size=cfg.step_size,
                batch_size=cfg.batch_size,
                local_steps=cfg.local_steps,
                seed=seed,
                initial=init,
            )
        try:
            result = run_timeline(
                cfg, learner, record_events=False, metrics_every=spec.metrics_every
            )
        except NumericsError as exc:
            summary["per_seed"].append({"seed": seed, "error": str(exc)})
            error = exc
            break
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)
        write_metrics_csv(seed_dir / "metrics.csv", result.metrics)
        entry = {
            "seed": seed,
            "completed_rounds": result.completed_rounds,
            "steady_staleness": result.metrics.staleness[-1] if len(result.metrics) else None,
            "avg_grad_norm_sq": result.metrics.avg_grad_norm_sq(),
        }
        if task is not None and result.final_model is not None:
            entry["final_loss"] = task.loss(result.final_model)
        summary["per_seed"].append(entry)

    finals = [e["final_loss"] for e in summary["per_seed"] if "final_loss" in e]
    if finals:
        summary["mean_final_loss"] = float(np.mean(finals))
    counts = [e["completed_rounds"] for e in summary["per_seed"] if "completed_rounds" in e]
    if counts:
        summary["completed_rounds"] = counts[0]

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "plot_metrics.py").write_text(PLOT_SCRIPT)
    if error is not None:
        raise error
    return summary


def _grid_points(grid: dict) -> list[dict]:
    keys = sorted(grid)
    values = [grid[k] if isinstance(grid[k], list) else [grid[k]] for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def _run_sweep_point(args: tuple) -> dict:
    spec_doc, overrides, out_dir, dataset_dir = args
    doc = json.loads(json.dumps(spec_doc))  # deep copy
    doc["mode"] = "run"
    doc.pop("grid", None)
    doc.setdefault("system", {}).update(overrides)
    point_name = "_".join(f"{k}-{v}" for k, v in sorted(overrides.items()))
    doc["name"] = f"{doc.get('name', 'sweep')}_{point_name}"
    spec = ExperimentSpec.from_dict(doc)
    row = dict(overrides)
    try:
        summary = run_experiment(spec, Path(out_dir) / point_name, dataset_dir)
        row.update(
            status="ok",
            completed_rounds=summary.get("completed_rounds"),
            mean_final_loss=summary.get("mean_final_loss"),
            steady_staleness=summary["per_seed"][0].get("steady_staleness"),
        )
    except Exception as exc:  # record and continue with other points
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def run_sweep(spec: ExperimentSpec, out_dir, dataset_dir=None, workers: int = 1) -> list[dict]:
    if not spec.grid:
        raise ConfigError("sweep mode needs a non-empty grid")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = _grid_points(spec.grid)
    jobs = [(spec.raw, p, str(out), dataset_dir) for p in points]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_sweep_point, jobs))
    else:
        rows = [_run_sweep_point(j) for j in jobs]

    columns = sorted({k for row in rows for k in row})
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    (out / "sweep.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")

    _print_table(rows, columns)
    _print_delay_deltas(rows)
    return rows


def _print_table(rows: list[dict], columns: list[str]) -> None:
    widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns}
    print("  ".join(c.ljust(widths[c]) for c in columns))
    for row in rows:
        print("  ".join(str(row.get(c, "")).ljust(widths[c]) for c in columns))


def _print_delay_deltas(rows: list[dict]) -> None:
    """Final-loss gap between deferred-downlink and plain runs per group size."""
    plain, delayed = {}, {}
    for row in rows:
        if row.get("status") != "ok" or row.get("mean_final_loss") is None:
            continue
        key = row.get("group_size")
        if row.get("intentional_delay") == 0:
            plain[key] = row["mean_final_loss"]
        elif row.get("intentional_delay") in ("optimal",):
            delayed[key] = row["mean_final_loss"]
    common = sorted(k for k in plain if k in delayed and k is not None)
    if common:
        print("\nfinal-loss delta (optimal delay minus plain):")
        for key in common:
            print(f"  group_size={key}: {delayed[key] - plain[key]:+.6g}")


# ---------------------------------------------------------------------------
# validation commands
# ---------------------------------------------------------------------------

TIMING_SCENARIOS = [
    {"label": "N100_T50000_comp50", "num_devices": 100, "horizon": 50000,
     "compute_slots": 50, "slots_per_transfer": 1,
     "group_sizes": [1, 5, 10, 25, 50, 100]},
    {"label": "N20_T100000_comp4", "num_devices": 20, "horizon": 100000,
     "compute_slots": 4, "slots_per_transfer": 1,
     "group_sizes": [1, 2, 5, 10, 20]},
]


def validate_timing(scenarios=None) -> list[dict]:
    rows = []
    for sc in scenarios or TIMING_SCENARIOS:
        for s in sc["group_sizes"]:
            cfg = SystemConfig.from_times(
                sc["num_devices"], s, sc["compute_slots"],
                sc.get("slots_per_transfer", 1), horizon=sc["horizon"],
            )
            result = run_timeline(cfg, record_events=False, metrics_every=0)
            rows.append({
                "scenario": sc.get("label", "custom"),
                "group_size": s,
                "num_groups": cfg.num_groups,
                "tau_comp": cfg.tau_comp,
                "tau_comm": cfg.tau_comm,
                "tau_asyn": str(cfg.tau_asyn),
                "rounds_closed_form": cfg.rounds_closed_form(),
                "rounds_simulated": result.completed_rounds,
            })
    return rows


PROP1_TRIPLES = [(50, 1, 100), (10, 1, 100), (2, 1, 100)]


def validate_prop1(triples=None) -> list[dict]:
    rows = []
    for compute_slots, s, n in triples or PROP1_TRIPLES:
        cfg = SystemConfig.from_times(n, s, compute_slots)
        choice = optimal_intentional_delay(cfg)
        rows.append({
            "compute_over_transfer": compute_slots,
            "group_size": s,
            "num_devices": n,
            "alpha": choice.alpha,
            "d_star": choice.effective_delay,
        })
    return rows


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = doc
        parts = key.split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"cannot descend into {key!r}")
        target[parts[-1]] = value
    return doc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdmafl",
        description="Asynchronous federated learning over a TDMA channel: "
                    "experiment runner and validators.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="experiment JSON document")
        p.add_argument("--seed", type=int, help="run a single seed instead of the spec's list")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--workers", type=int, default=1, help="parallel sweep points")
        p.add_argument("--dataset-dir", type=Path,
                       help=f"dataset root (default: ${DATA_DIR_ENV})")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a spec field, e.g. system.group_size=5")

    p_run = sub.add_parser("run", help="run one experiment spec")
    common(p_run)
    p_sweep = sub.add_parser("sweep", help="run a grid of experiment variants")
    common(p_sweep)
    p_vt = sub.add_parser("validate-timing", help="round counts: algebra vs simulation")
    common(p_vt)
    p_vp = sub.add_parser("validate-prop1", help="optimal downlink deferral worked examples")
    common(p_vp)
    p_rt = sub.add_parser("rate-trend", help="avg squared gradient norm vs group count")
    common(p_rt)
    p_rt.add_argument("--groups", default="1,2,5,10")
    p_rt.add_argument("--rounds", type=int, default=2000)
    p_rt.add_argument("--num-seeds", type=int, default=10)
    p_rt.add_argument("--num-devices", type=int, default=20)
    p_rt.add_argument("--batch-size", type=int, default=4)
    p_rt.add_argument("--heterogeneity", type=float, default=2.0)
    return parser


def _load_spec(args, default_mode: str) -> ExperimentSpec:
    if args.config is None:
        raise ConfigError(f"{default_mode} needs --config")
    doc = json.loads(Path(args.config).read_text())
    doc = _apply_overrides(doc, args.set)
    spec = ExperimentSpec.from_dict(doc)
    if args.seed is not None:
        spec.seeds = [args.seed]
    return spec


def _dispatch(args) -> int:
    dataset_dir = args.dataset_dir or os.environ.get(DATA_DIR_ENV)
    if args.command == "run":
        spec = _load_spec(args, "run")
        out = args.out or spec.out_dir or f"runs/{spec.name}"
        summary = run_experiment(spec, out, dataset_dir)
        print(f"wrote {out}/summary.json ({len(summary['per_seed'])} seeds, "
              f"{summary.get('completed_rounds', 0)} rounds)")
        return EXIT_OK

    if args.command == "sweep":
        spec = _load_spec(args, "sweep")
        out = args.out or spec.out_dir or f"runs/{spec.name}_sweep"
        run_sweep(spec, out, dataset_dir, workers=args.workers)
        print(f"\nwrote {out}/sweep.csv")
        return EXIT_OK

    if args.command == "validate-timing":
        scenarios = None
        if args.config is not None:
            scenarios = json.loads(Path(args.config).read_text())
        rows = validate_timing(scenarios)
        cols = ["scenario", "group_size", "num_groups", "tau_comp", "tau_comm",
                "tau_asyn", "rounds_closed_form", "rounds_simulated"]
        _print_table(rows, cols)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "timing.json").write_text(
                json.dumps(rows, indent=2, sort_keys=True) + "\n")
        return EXIT_OK

    if args.command == "validate-prop1":
        triples = None
        if args.config is not None:
            triples = [tuple(t) for t in json.loads(Path(args.config).read_text())]
        rows = validate_prop1(triples)
        for row in rows:
            print(
                f"tau_comp/r={row['compute_over_transfer']} S={row['group_size']} "
                f"N={row['num_devices']}: (alpha, d*) = ({row['alpha']}, {row['d_star']})"
            )
        return EXIT_OK

    if args.command == "rate-trend":
        groups = [int(g) for g in str(args.groups).split(",") if g]
        rng = np.random.default_rng(5)
        task = make_quadratic(
            args.num_devices, 5, args.heterogeneity, rng,
            samples_per_device=40, sample_noise=0.5, eig_range=(0.5, 2.0),
        )
        init = task.w_star + 4.0 * np.ones(task.dim) / np.sqrt(task.dim)
        report = analysis.rate_trend(
            task, groups, args.rounds, range(args.num_seeds),
            batch_size=args.batch_size, initial=init,
        )
        for p in report.points:
            print(f"G={p.num_groups:3d} S={p.group_size:3d} eta={p.eta:.5f} "
                  f"avg|grad|^2={p.mean:.6f} (se {p.std_error:.2g})")
        print(f"monotone in G: {report.monotone_in_groups()}")
        if report.kscale_ratio is not None:
            print(f"K vs {4}K average ratio at G={report.kscale_group}: "
                  f"{report.kscale_ratio:.3f}")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "rate_trend.json").write_text(
                json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        return EXIT_OK

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
