"""Config-driven command line: prepare, cluster, train, sweep.

All four commands read one YAML config (see `default_config`) plus
optional dotted `--set section.key=value` overrides, and write their
outputs under `output_dir`:

- ``prepare``: dataset.csv (canonical per-client daily series) and
  manifest.json (counts, date ranges, cleaning report).
- ``cluster``: clusters.csv (client_id, cluster_id, medoid_id).
- ``train``: roundlog.csv, report.json, report.txt, config_echo.json,
  and one checkpoint per cluster.
- ``sweep``: sweep.csv plus one train run directory per grid point.

Runs are deterministic: the same config and seed produce byte-identical
dataset.csv, clusters.csv, and roundlog.csv.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import data as D
from .clustering import distance_matrix, kmedoids
from .federation import (
    ClientState,
    RoundRecord,
    run_federation,
    squared_error_totals,
    write_roundlog,
)
from .model import ForecastConfig, ModelParams, train_model
from .validation import check_ratio

POLICY_CHOICES = ("centralized", "online", "partial", "forward")


class ConfigError(ValueError):
    """A config value is missing, unknown, or out of range."""


@dataclass
class DataConfig:
    source: str = "synth"
    path: str | None = None
    profile: str = "nn5-like"
    num_clients: int = 20
    days: int = 600
    slack_days: int = 7
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    max_train_windows: int = 0
    max_eval_windows: int = 0


@dataclass
class ModelSection:
    lookback: int = 128
    horizon: int = 4
    patch_len: int = 16
    stride: int = 8
    embed_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    blocks: tuple[str, ...] = ("id", "id", "attention")


@dataclass
class ClusteringConfig:
    k: int = 1
    train_fraction: float = 0.7


@dataclass
class TrainingConfig:
    policy: str = "partial"
    lr: float = 1e-3
    peak_lr: float | None = None
    select_ratio: float = 0.5
    share_ratio: float = 0.5
    forward_ratio: float = 0.2
    epochs_per_round: int = 1
    batch_size: int = 32
    max_rounds: int = 100
    patience: int | None = 10
    max_epochs: int = 100
    centralized_patience: int = 20
    eval_cap: int = 64


@dataclass
class SweepConfig:
    policies: tuple[str, ...] = ("online", "partial", "forward")
    share_ratios: tuple[float, ...] = (0.5, 0.4, 0.3, 0.2)
    forward_ratios: tuple[float, ...] = (0.2, 0.3)


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


_SECTIONS = {
    "data": DataConfig,
    "model": ModelSection,
    "clustering": ClusteringConfig,
    "training": TrainingConfig,
    "sweep": SweepConfig,
}


def _build_section(cls, raw: dict, prefix: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown key {prefix}.{sorted(unknown)[0]}")
    kwargs = {}
    for name, value in raw.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"in section {prefix}: {e}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    unknown = set(raw) - ({"seed", "output_dir"} | set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key {sorted(unknown)[0]!r}")
    sections = {
        name: _build_section(cls, raw.get(name) or {}, name)
        for name, cls in _SECTIONS.items()
    }
    cfg = ExperimentConfig(
        seed=raw.get("seed", 0),
        output_dir=raw.get("output_dir", "runs/out"),
        **sections,
    )
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg.seed!r}")
    d, t = cfg.data, cfg.training
    if d.source not in ("synth", "transactions", "daily_matrix", "canonical"):
        raise ConfigError(f"data.source must be one of synth/transactions/daily_matrix/canonical, got {d.source!r}")
    if d.source != "synth" and not d.path:
        raise ConfigError(f"data.path is required for data.source={d.source!r}")
    if len(d.split) != 3 or abs(sum(d.split) - 1.0) > 1e-9:
        raise ConfigError(f"data.split must be three fractions summing to 1, got {d.split}")
    if t.policy not in POLICY_CHOICES:
        raise ConfigError(f"training.policy must be one of {POLICY_CHOICES}, got {t.policy!r}")
    try:
        check_ratio(t.select_ratio, "training.select_ratio")
        check_ratio(t.share_ratio, "training.share_ratio")
        check_ratio(t.forward_ratio, "training.forward_ratio", minimum_open=False)
        check_ratio(cfg.clustering.train_fraction, "clustering.train_fraction")
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if t.lr <= 0:
        raise ConfigError(f"training.lr must be positive, got {t.lr}")
    if cfg.clustering.k < 1:
        raise ConfigError(f"clustering.k must be >= 1, got {cfg.clustering.k}")
    try:
        model_config(cfg)
    except ValueError as e:
        raise ConfigError(f"in section model: {e}") from None


def model_config(cfg: ExperimentConfig) -> ForecastConfig:
    m = cfg.model
    return ForecastConfig(
        lookback=m.lookback,
        horizon=m.horizon,
        patch_len=m.patch_len,
        stride=m.stride,
        embed_dim=m.embed_dim,
        heads=m.heads,
        head_dim=m.head_dim,
        blocks=tuple(m.blocks),
    )


def load_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    for item in overrides or []:
        raw = _apply_override(raw, item)
    return config_from_dict(raw)


def _apply_override(raw: dict, item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    dotted, text = item.split("=", 1)
    value = yaml.safe_load(text)
    node = raw
    parts = dotted.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r} does not address a mapping")
    node[parts[-1]] = value
    return raw


def default_config() -> dict:
    """The full config schema with default values, as a plain dict."""
    return asdict(ExperimentConfig())


# ---------------------------------------------------------------------------
# pipeline pieces shared by commands


def _build_dataset(cfg: ExperimentConfig) -> tuple[list[D.DailySeries], dict]:
    """Run the data pipeline from the configured source; returns the
    cleaned canonical series plus manifest details."""
    d = cfg.data
    rejects: list = []
    if d.source == "synth":
        series = D.synth_dataset(d.num_clients, d.days, cfg.seed, profile=d.profile)
    elif d.source == "transactions":
        records, rejects = D.ingest_transactions(d.path)
        series = D.aggregate_daily(records)
    elif d.source == "daily_matrix":
        series = D.load_daily_matrix(d.path)
    else:
        series = D.load_series_csv(d.path)
    kept, report = D.clean_stations(series, slack_days=d.slack_days)
    manifest = {
        "source": d.source,
        "num_clients": len(kept),
        "rejected_rows": len(rejects),
        "clients": [
            {
                "client_id": s.client_id,
                "start": s.start.isoformat(),
                "end": s.end.isoformat(),
                "days": len(s.values),
                "missing_days": int(s.missing.sum()),
            }
            for s in kept
        ],
        "cleaning": {
            "slack_days": report.slack_days,
            "end_date": report.end_date.isoformat() if report.end_date else None,
            "dropped": report.dropped,
        },
    }
    return kept, manifest


def _load_dataset(cfg: ExperimentConfig) -> list[D.DailySeries]:
    """Prefer the prepared dataset in output_dir; else build in memory."""
    path = Path(cfg.output_dir) / "dataset.csv"
    if path.exists():
        return D.load_series_csv(path)
    return _build_dataset(cfg)[0]


def _cluster_assignment(cfg: ExperimentConfig, series: list[D.DailySeries]) -> dict[str, int]:
    """Client -> cluster mapping; from clusters.csv when present, else
    computed (all clients in cluster 0 when clustering.k == 1)."""
    k = cfg.clustering.k
    if k <= 1:
        return {s.client_id: 0 for s in series}
    path = Path(cfg.output_dir) / "clusters.csv"
    if path.exists():
        mapping: dict[str, int] = {}
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                mapping[row["client_id"]] = int(row["cluster_id"])
        missing = [s.client_id for s in series if s.client_id not in mapping]
        if missing:
            raise ConfigError(f"clusters.csv lacks clients: {missing[:5]}")
        return mapping
    result = _run_clustering(cfg, series)
    return {s.client_id: int(result.labels[i]) for i, s in enumerate(series)}


def _run_clustering(cfg: ExperimentConfig, series: list[D.DailySeries]):
    frac = cfg.clustering.train_fraction
    slices = [s.values[: max(2, int(len(s.values) * frac))] for s in series]
    dist = distance_matrix(slices, znorm=True)
    return kmedoids(dist, cfg.clustering.k, cfg.seed)


def _client_windows(cfg: ExperimentConfig, series: D.DailySeries) -> D.SplitWindows:
    m = cfg.model
    sw = D.make_windows(series.values, m.lookback, m.horizon, cfg.data.split)
    return D.SplitWindows(
        train=D.subsample_windows(sw.train, cfg.data.max_train_windows),
        val=D.subsample_windows(sw.val, cfg.data.max_eval_windows),
        test=D.subsample_windows(sw.test, cfg.data.max_eval_windows),
    )


def _json_dump(obj, path: Path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    series, manifest = _build_dataset(cfg)
    if not series:
        raise ConfigError("data pipeline produced no clients")
    D.save_series_csv(out / "dataset.csv", series)
    _json_dump(manifest, out / "manifest.json")
    print(f"prepared {len(series)} clients -> {out / 'dataset.csv'}")
    return 0


def cmd_cluster(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    series = _load_dataset(cfg)
    if cfg.clustering.k > len(series):
        raise ConfigError(
            f"clustering.k={cfg.clustering.k} exceeds client count {len(series)}"
        )
    result = _run_clustering(cfg, series)
    with open(out / "clusters.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["client_id", "cluster_id", "medoid_id"])
        for i, s in enumerate(series):
            ci = int(result.labels[i])
            writer.writerow([s.client_id, ci, series[result.medoids[ci]].client_id])
    sizes = np.bincount(result.labels, minlength=cfg.clustering.k)
    print(f"clusters: {list(sizes)}  cost={result.cost:.4f}  -> {out / 'clusters.csv'}")
    return 0


def _train_centralized_cluster(
    cfg: ExperimentConfig, windows: list[D.SplitWindows], seed: int
) -> tuple[np.ndarray, list[RoundRecord], dict]:
    t = cfg.training
    fc = model_config(cfg)
    x = np.concatenate([w.train.inputs for w in windows])
    y = np.concatenate([w.train.targets for w in windows])
    val_sets = [(w.val.inputs, w.val.targets) for w in windows if len(w.val)]
    val = None
    if val_sets:
        val = (
            np.concatenate([v[0] for v in val_sets]),
            np.concatenate([v[1] for v in val_sets]),
        )
    records: list[RoundRecord] = []

    def on_epoch(epoch: int, vec: np.ndarray, train_loss: float, monitored: float) -> None:
        rmse = float("nan")
        if val is not None:
            sq, cnt = squared_error_totals(vec, fc, [val])
            rmse = float(np.sqrt(sq / cnt)) if cnt else float("nan")
        records.append(
            RoundRecord(
                round_index=epoch,
                policy="centralized",
                downlink=0,
                uplink=0,
                cum_downlink=0,
                cum_uplink=0,
                global_loss=train_loss,
                rmse_val=rmse,
            )
        )

    result = train_model(
        x,
        y,
        fc,
        seed=seed,
        lr=t.lr,
        peak_lr=t.peak_lr,
        schedule="one_cycle",
        max_epochs=t.max_epochs,
        patience=t.centralized_patience,
        batch_size=t.batch_size,
        val=val,
        on_epoch=on_epoch,
    )
    info = {"rounds": len(result.history), "best_round": result.best_epoch}
    return result.vector, records, info


def _train_federated_cluster(
    cfg: ExperimentConfig, windows: list[D.SplitWindows], seed: int
) -> tuple[np.ndarray, list[RoundRecord], dict]:
    t = cfg.training
    fc = model_config(cfg)
    vec0 = ModelParams.init(fc, seed).as_vector()
    clients = [
        ClientState.create(
            i,
            vec0,
            w.train.inputs,
            w.train.targets,
            val_inputs=w.val.inputs,
            val_targets=w.val.targets,
            test_inputs=w.test.inputs,
            test_targets=w.test.targets,
        )
        for i, w in enumerate(windows)
    ]
    result = run_federation(
        clients,
        fc,
        t.policy,
        seed=seed,
        select_ratio=t.select_ratio,
        share_ratio=t.share_ratio,
        forward_ratio=t.forward_ratio,
        lr=t.lr,
        epochs=t.epochs_per_round,
        batch_size=t.batch_size,
        max_rounds=t.max_rounds,
        patience=t.patience,
        eval_cap=t.eval_cap,
        init_vector=vec0,
    )
    info = {
        "rounds": result.rounds_run,
        "best_round": result.best_round,
        "best_loss": result.best_loss,
    }
    return result.best_vector, result.records, info


def run_train(cfg: ExperimentConfig, out: Path) -> dict:
    """Shared by cmd_train and each sweep point; returns the report."""
    started = time.time()
    out.mkdir(parents=True, exist_ok=True)
    fc = model_config(cfg)
    series = _load_dataset(cfg)
    assignment = _cluster_assignment(cfg, series)
    n_clusters = max(assignment.values()) + 1
    all_records: list[RoundRecord] = []
    cluster_rows: list[dict] = []
    sq_total, pt_total = 0.0, 0
    for ci in range(n_clusters):
        members = [s for s in series if assignment[s.client_id] == ci]
        if not members:
            continue
        windows = [_client_windows(cfg, s) for s in members]
        if cfg.training.policy == "centralized":
            vec, records, info = _train_centralized_cluster(cfg, windows, cfg.seed)
        else:
            vec, records, info = _train_federated_cluster(cfg, windows, cfg.seed)
        all_records.extend(records)
        ModelParams.from_vector(fc, vec).save(out / f"checkpoint_c{ci}.json")
        test_sets = [(w.test.inputs, w.test.targets) for w in windows if len(w.test)]
        sq, cnt = squared_error_totals(vec, fc, test_sets)
        sq_total += sq
        pt_total += cnt
        row = {
            "cluster": ci,
            "clients": [s.client_id for s in members],
            "rmse_test": float(np.sqrt(sq / cnt)) if cnt else None,
            "cum_downlink": records[-1].cum_downlink if records else 0,
            "cum_uplink": records[-1].cum_uplink if records else 0,
            **info,
        }
        cluster_rows.append(row)
    write_roundlog(out / "roundlog.csv", all_records)
    report = {
        "policy": cfg.training.policy,
        "seed": cfg.seed,
        "clusters": cluster_rows,
        "pooled_rmse_test": float(np.sqrt(sq_total / pt_total)) if pt_total else None,
        "total_downlink": sum(r["cum_downlink"] for r in cluster_rows),
        "total_uplink": sum(r["cum_uplink"] for r in cluster_rows),
        "wall_time_s": round(time.time() - started, 3),
    }
    report["total_scalars"] = report["total_downlink"] + report["total_uplink"]
    _json_dump(report, out / "report.json")
    _json_dump({"config": _config_echo(cfg)}, out / "config_echo.json")
    _write_report_txt(out / "report.txt", report)
    return report


def _config_echo(cfg: ExperimentConfig) -> dict:
    echo = asdict(cfg)
    return echo


def _write_report_txt(path: Path, report: dict) -> None:
    lines = [
        f"policy: {report['policy']}   seed: {report['seed']}",
        f"pooled test RMSE: {report['pooled_rmse_test']}",
        f"scalars down/up: {report['total_downlink']} / {report['total_uplink']}",
        "",
        f"{'cluster':>7} {'clients':>7} {'rounds':>6} {'rmse_test':>12} {'scalars':>14}",
    ]
    for row in report["clusters"]:
        scalars = row["cum_downlink"] + row["cum_uplink"]
        rmse = "-" if row["rmse_test"] is None else f"{row['rmse_test']:.6f}"
        lines.append(
            f"{row['cluster']:>7} {len(row['clients']):>7} {row['rounds']:>6} "
            f"{rmse:>12} {scalars:>14}"
        )
    path.write_text("\n".join(lines) + "\n")


def cmd_train(cfg: ExperimentConfig) -> int:
    report = run_train(cfg, Path(cfg.output_dir))
    print(
        f"policy={report['policy']} pooled_rmse_test={report['pooled_rmse_test']} "
        f"scalars={report['total_scalars']}"
    )
    return 0


def _sweep_points(cfg: ExperimentConfig) -> list[dict]:
    points = []
    s = cfg.sweep
    for policy in s.policies:
        if policy == "online":
            points.append({"policy": "online", "share_ratio": 1.0, "forward_ratio": 0.0})
        elif policy == "partial":
            for share in s.share_ratios:
                points.append({"policy": "partial", "share_ratio": share, "forward_ratio": 0.0})
        elif policy == "forward":
            for share, fwd in itertools.product(s.share_ratios, s.forward_ratios):
                points.append({"policy": "forward", "share_ratio": share, "forward_ratio": fwd})
        else:
            raise ConfigError(f"sweep.policies cannot include {policy!r}")
    return points


def _point_label(p: dict) -> str:
    label = p["policy"]
    if p["policy"] != "online":
        label += f"_s{int(round(p['share_ratio'] * 100))}"
    if p["policy"] == "forward":
        label += f"_f{int(round(p['forward_ratio'] * 100))}"
    return label


def cmd_sweep(cfg: ExperimentConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, point in enumerate(_sweep_points(cfg)):
        derived = int(np.random.SeedSequence((cfg.seed, index)).generate_state(1)[0])
        run_cfg = replace(
            cfg,
            seed=derived,
            training=replace(cfg.training, **point),
        )
        label = _point_label(point)
        report = run_train(run_cfg, out / "sweep" / label)
        rows.append(
            {
                "policy": point["policy"],
                "share_ratio": point["share_ratio"],
                "forward_ratio": point["forward_ratio"],
                "rounds": sum(r["rounds"] for r in report["clusters"]),
                "downlink": report["total_downlink"],
                "uplink": report["total_uplink"],
                "total_scalars": report["total_scalars"],
                "rmse_test": report["pooled_rmse_test"],
                "run_dir": str(out / "sweep" / label),
            }
        )
        print(f"swept {label}: rmse={rows[-1]['rmse_test']} scalars={rows[-1]['total_scalars']}")
    rows.sort(key=lambda r: (r["total_scalars"], r["policy"], r["share_ratio"], r["forward_ratio"]))
    with open(out / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep table -> {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcast",
        description="Federated patch-transformer forecasting experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("prepare", "build the canonical per-client daily dataset"),
        ("cluster", "group clients by DTW distance"),
        ("train", "train one configuration (centralized or federated)"),
        ("sweep", "train a grid of policies and sharing ratios"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the YAML config")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry, e.g. --set training.policy=online",
        )
    return parser


_COMMANDS = {
    "prepare": cmd_prepare,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as e:
        print(f"fedcast {args.command}: config error: {e}", file=sys.stderr)
        return 2
    try:
        return _COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"fedcast {args.command}: config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # surface the failing stage, not a bare traceback
        print(f"fedcast {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
