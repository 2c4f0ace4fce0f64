"""Config loading, dataset construction, metrics files, and the command line.

Config files are flat JSON with units spelled out in the key names.  Every
file this module writes is byte-deterministic for a given (config, seed).
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .federation import (
    BANDWIDTH_MODES,
    CHANNEL_MODES,
    RoundConfig,
    RoundRecord,
    WorkerProfile,
    partition_iid,
    partition_noniid,
    run_experiment,
)
from .learning import LabeledDataset
from .resource_optimizer import DeviceBounds
from .streams import DOMAIN_DATA, DOMAIN_PARTITION, DOMAIN_PROFILE, substream

GLOBAL_HEADER = "round,test_loss,test_accuracy,inst_energy_j,cum_energy_j,excluded_fraction"
WORKERS_HEADER = (
    "trial,round,worker_id,kappa,e_cmp_j,e_up_j,t_cmp_s,t_up_s,f_cmp_hz,p_up_w,lambda,feasible"
)

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


class ConfigError(ValueError):
    """Bad configuration file: parse failure or constraint violation."""


class IdxFormatError(ValueError):
    """Malformed IDX dataset file."""


def _dbm_to_w(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class MetricsRow:
    """One line of the global metrics file."""

    round_index: int
    test_loss: float
    test_accuracy: float
    inst_energy_j: float
    cum_energy_j: float
    excluded_fraction: float


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; defaults follow the reference hardware profile."""

    rounds: int = 100
    workers: int = 20
    trials: int = 1
    seed: int = 0
    select_fraction: float = 0.1
    threshold: float = 0.8
    epochs: int = 5
    batch_size: int = 20
    learning_rate: float = 0.001
    deadline_s: float | None = None
    bandwidth_hz: float = 10e6
    noise_power_w: float = 1e-8
    bandwidth_mode: str = "equal"
    channel_mode: str = "block"
    antennas: int = 4
    pathloss_exp: float = 3.2
    rician_k_db: float = 8.0
    distance_min_m: float = 25.0
    distance_max_m: float = 100.0
    f_min_hz: float = 1e9
    f_max_hz: float = 9e9
    p_min_dbm: float = -10.0
    p_max_dbm: float = 20.0
    capacitance: float = 2e-28
    cycles_per_sample: float = 20.0
    energy_budget_j: float = math.inf
    hidden_width: int | None = None
    data_source: str = "synthetic"
    synthetic_dim: int = 8
    synthetic_classes: int = 4
    synthetic_samples: int = 4000
    synthetic_spread: float = 0.3
    mnist_images_path: str | None = None
    mnist_labels_path: str | None = None
    mnist_subset: int | None = None
    partition: str = "iid"
    classes_per_worker: int = 2
    train_fraction: float = 0.8
    parallel_workers: int = 1
    output_dir: str = "runs"

    @property
    def p_min_w(self) -> float:
        return _dbm_to_w(self.p_min_dbm)

    @property
    def p_max_w(self) -> float:
        return _dbm_to_w(self.p_max_dbm)

    def __post_init__(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.rounds >= 1, f"rounds must be >= 1, got {self.rounds}")
        need(self.workers >= 1, f"workers must be >= 1, got {self.workers}")
        need(self.trials >= 1, f"trials must be >= 1, got {self.trials}")
        need(0.0 < self.select_fraction <= 1.0,
             f"select_fraction must be in (0, 1], got {self.select_fraction}")
        need(0.0 <= self.threshold <= 1.0,
             f"threshold must be in [0, 1], got {self.threshold}")
        need(self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}")
        need(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}")
        need(self.learning_rate > 0.0,
             f"learning_rate must be positive, got {self.learning_rate}")
        need(self.deadline_s is None or self.deadline_s > 0.0,
             f"deadline_s must be positive when given, got {self.deadline_s}")
        need(self.bandwidth_hz > 0.0, f"bandwidth_hz must be positive, got {self.bandwidth_hz}")
        need(self.noise_power_w > 0.0,
             f"noise_power_w must be positive, got {self.noise_power_w}")
        need(self.bandwidth_mode in BANDWIDTH_MODES,
             f"bandwidth_mode must be one of {BANDWIDTH_MODES}, got {self.bandwidth_mode!r}")
        need(self.channel_mode in CHANNEL_MODES,
             f"channel_mode must be one of {CHANNEL_MODES}, got {self.channel_mode!r}")
        need(self.antennas >= 1, f"antennas must be >= 1, got {self.antennas}")
        need(self.pathloss_exp > 0.0, f"pathloss_exp must be positive, got {self.pathloss_exp}")
        need(0.0 < self.distance_min_m <= self.distance_max_m,
             "need 0 < distance_min_m <= distance_max_m")
        need(0.0 < self.f_min_hz <= self.f_max_hz, "need 0 < f_min_hz <= f_max_hz")
        need(self.p_min_dbm <= self.p_max_dbm, "need p_min_dbm <= p_max_dbm")
        need(self.capacitance > 0.0, f"capacitance must be positive, got {self.capacitance}")
        need(self.cycles_per_sample > 0.0,
             f"cycles_per_sample must be positive, got {self.cycles_per_sample}")
        need(self.energy_budget_j >= 0.0,
             f"energy_budget_j must be non-negative, got {self.energy_budget_j}")
        need(self.hidden_width is None or self.hidden_width >= 1,
             f"hidden_width must be >= 1 when given, got {self.hidden_width}")
        need(self.data_source in ("synthetic", "mnist"),
             f"data_source must be 'synthetic' or 'mnist', got {self.data_source!r}")
        need(self.synthetic_dim >= 1, f"synthetic_dim must be >= 1, got {self.synthetic_dim}")
        need(self.synthetic_classes >= 2,
             f"synthetic_classes must be >= 2, got {self.synthetic_classes}")
        need(self.synthetic_samples >= self.synthetic_classes,
             "synthetic_samples must be >= synthetic_classes")
        need(self.synthetic_spread > 0.0,
             f"synthetic_spread must be positive, got {self.synthetic_spread}")
        if self.data_source == "mnist":
            need(self.mnist_images_path is not None and self.mnist_labels_path is not None,
                 "mnist data_source needs mnist_images_path and mnist_labels_path")
        need(self.mnist_subset is None or self.mnist_subset >= 1,
             f"mnist_subset must be >= 1 when given, got {self.mnist_subset}")
        need(self.partition in ("iid", "noniid"),
             f"partition must be 'iid' or 'noniid', got {self.partition!r}")
        need(self.classes_per_worker >= 1,
             f"classes_per_worker must be >= 1, got {self.classes_per_worker}")
        need(0.0 < self.train_fraction < 1.0,
             f"train_fraction must be in (0, 1), got {self.train_fraction}")
        need(self.parallel_workers >= 1,
             f"parallel_workers must be >= 1, got {self.parallel_workers}")

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if math.isinf(self.energy_budget_j):
            d["energy_budget_j"] = None  # JSON has no infinity
        return d


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a JSON config; see ExperimentConfig for the fields."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config {path} is not valid JSON: line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s) in {path}: {', '.join(unknown)}")
    if raw.get("energy_budget_j", 0) is None:
        raw = dict(raw)
        raw["energy_budget_j"] = math.inf
    try:
        return ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"config {path}: {exc}") from exc


def write_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.as_dict(), indent=2, sort_keys=True) + "\n")


def generate_synthetic(
    dim: int, classes: int, samples: int, spread: float, rng: np.random.Generator
) -> LabeledDataset:
    """Gaussian blobs with near-balanced labels and unit-separated class means."""
    if classes < 2 or dim < 1 or samples < classes:
        raise ValueError("need classes >= 2, dim >= 1, samples >= classes")
    if spread <= 0.0:
        raise ValueError(f"spread must be positive, got {spread}")
    means = np.zeros((classes, dim))
    for c in range(classes):
        means[c, c % dim] = 1.0 + c // dim
    base, extra = divmod(samples, classes)
    labels = np.repeat(np.arange(classes), base)
    labels = np.concatenate([labels, np.arange(extra)])
    labels = labels[rng.permutation(samples)]
    features = means[labels] + spread * rng.standard_normal((samples, dim))
    return LabeledDataset(features=features, labels=labels.astype(np.int64))


def _read_idx(path: Path, expected_magic: int, kind: str) -> np.ndarray:
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IdxFormatError(f"cannot read {kind} file {path}: {exc}") from exc
    if len(blob) < 8:
        raise IdxFormatError(f"{kind} file {path} is truncated before the header")
    magic, count = struct.unpack(">II", blob[:8])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{kind} file {path} has magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    if expected_magic == _IDX_IMAGES_MAGIC:
        if len(blob) < 16:
            raise IdxFormatError(f"{kind} file {path} is truncated before the dimensions")
        rows, cols = struct.unpack(">II", blob[8:16])
        body = np.frombuffer(blob, dtype=np.uint8, offset=16)
        if body.size != count * rows * cols:
            raise IdxFormatError(
                f"{kind} file {path} declares {count}x{rows}x{cols} pixels "
                f"but holds {body.size}"
            )
        return body.reshape(count, rows * cols)
    body = np.frombuffer(blob, dtype=np.uint8, offset=8)
    if body.size != count:
        raise IdxFormatError(f"{kind} file {path} declares {count} labels but holds {body.size}")
    return body


def load_mnist_idx(
    images_path: str | Path,
    labels_path: str | Path,
    subset_size: int | None,
    rng: np.random.Generator,
) -> LabeledDataset:
    """Load an IDX image/label pair, scale pixels to [0, 1], shuffle, subset."""
    images = _read_idx(Path(images_path), _IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(Path(labels_path), _IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image/label counts differ: {images.shape[0]} vs {labels.shape[0]}"
        )
    n = images.shape[0]
    if n == 0:
        raise IdxFormatError("dataset files contain zero examples")
    order = rng.permutation(n)
    if subset_size is not None:
        if not 1 <= subset_size <= n:
            raise ValueError(f"subset_size must be in [1, {n}], got {subset_size}")
        order = order[:subset_size]
    return LabeledDataset(
        features=images[order].astype(np.float64) / 255.0,
        labels=labels[order].astype(np.int64),
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def global_rows(records: list[RoundRecord]) -> list[MetricsRow]:
    return [
        MetricsRow(
            round_index=r.round_index,
            test_loss=r.test_loss,
            test_accuracy=r.test_accuracy,
            inst_energy_j=r.inst_energy_j,
            cum_energy_j=r.cum_energy_j,
            excluded_fraction=r.excluded_fraction,
        )
        for r in records
    ]


def mean_rows(per_trial: list[list[RoundRecord]]) -> list[MetricsRow]:
    """Round-by-round mean of the global curves across trials."""
    rounds = len(per_trial[0])
    if any(len(t) != rounds for t in per_trial):
        raise ValueError("trials ran different numbers of rounds")
    out = []
    for i in range(rounds):
        rows = [t[i] for t in per_trial]
        out.append(MetricsRow(
            round_index=rows[0].round_index,
            test_loss=float(np.mean([r.test_loss for r in rows])),
            test_accuracy=float(np.mean([r.test_accuracy for r in rows])),
            inst_energy_j=float(np.mean([r.inst_energy_j for r in rows])),
            cum_energy_j=float(np.mean([r.cum_energy_j for r in rows])),
            excluded_fraction=float(np.mean([r.excluded_fraction for r in rows])),
        ))
    return out


def write_metrics(
    per_trial: list[list[RoundRecord]],
    out_dir: str | Path,
    config: ExperimentConfig,
    seed: int,
) -> dict[str, Path]:
    """Write global.csv, workers.csv, and the run manifest; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "global": out / "global.csv",
        "workers": out / "workers.csv",
        "manifest": out / "manifest.json",
    }

    with paths["global"].open("w", newline="") as fh:
        fh.write(GLOBAL_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in mean_rows(per_trial):
            w.writerow([
                row.round_index, _fmt(row.test_loss), _fmt(row.test_accuracy),
                _fmt(row.inst_energy_j), _fmt(row.cum_energy_j),
                _fmt(row.excluded_fraction),
            ])

    if len(per_trial) > 1:
        paths["global_by_trial"] = out / "global_by_trial.csv"
        with paths["global_by_trial"].open("w", newline="") as fh:
            fh.write("trial," + GLOBAL_HEADER + "\n")
            w = csv.writer(fh, lineterminator="\n")
            for t, records in enumerate(per_trial):
                for row in global_rows(records):
                    w.writerow([
                        t, row.round_index, _fmt(row.test_loss), _fmt(row.test_accuracy),
                        _fmt(row.inst_energy_j), _fmt(row.cum_energy_j),
                        _fmt(row.excluded_fraction),
                    ])

    with paths["workers"].open("w", newline="") as fh:
        fh.write(WORKERS_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for t, records in enumerate(per_trial):
            for rec in records:
                for s in rec.worker_stats:
                    w.writerow([
                        t, rec.round_index, s.worker_id, s.kappa,
                        _fmt(s.e_cmp_j), _fmt(s.e_up_j), _fmt(s.t_cmp_s), _fmt(s.t_up_s),
                        _fmt(s.f_cmp_hz), _fmt(s.p_up_w), _fmt(s.bandwidth_share),
                        int(s.feasible),
                    ])

    manifest = {"version": __version__, "seed": seed, "config": config.as_dict()}
    paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def build_workers(
    config: ExperimentConfig, train: LabeledDataset, seed: int, trial: int
) -> list[WorkerProfile]:
    """Partition the training data and attach hardware/placement profiles."""
    part_rng = substream(seed, DOMAIN_PARTITION, trial)
    if config.partition == "iid":
        shards = partition_iid(train, config.workers, part_rng)
    else:
        shards = partition_noniid(
            train, config.workers, part_rng, classes_per_worker=config.classes_per_worker
        )
    bounds = DeviceBounds(
        f_min_hz=config.f_min_hz,
        f_max_hz=config.f_max_hz,
        p_min_w=config.p_min_w,
        p_max_w=config.p_max_w,
        capacitance=config.capacitance,
        energy_budget_j=config.energy_budget_j,
    )
    prof_rng = substream(seed, DOMAIN_PROFILE, trial)
    profiles = []
    for wid, shard in enumerate(shards):
        distance = float(prof_rng.uniform(config.distance_min_m, config.distance_max_m))
        los_angle = float(prof_rng.uniform(0.0, 2.0 * np.pi))
        profiles.append(WorkerProfile(
            worker_id=wid, dataset=shard, bounds=bounds, distance_m=distance,
            los_angle=los_angle, remaining_energy_j=config.energy_budget_j,
        ))
    return profiles


def _round_config(config: ExperimentConfig) -> RoundConfig:
    return RoundConfig(
        select_fraction=config.select_fraction,
        threshold=config.threshold,
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        bandwidth_hz=config.bandwidth_hz,
        noise_power_w=config.noise_power_w,
        cycles_per_sample=config.cycles_per_sample,
        antennas=config.antennas,
        pathloss_exp=config.pathloss_exp,
        rician_k_db=config.rician_k_db,
        deadline_s=config.deadline_s,
        bandwidth_mode=config.bandwidth_mode,
        channel_mode=config.channel_mode,
    )


def load_dataset(config: ExperimentConfig, seed: int) -> LabeledDataset:
    """Build the full dataset the config describes (shared by all trials)."""
    rng = substream(seed, DOMAIN_DATA)
    if config.data_source == "synthetic":
        return generate_synthetic(
            config.synthetic_dim, config.synthetic_classes,
            config.synthetic_samples, config.synthetic_spread, rng,
        )
    return load_mnist_idx(
        config.mnist_images_path, config.mnist_labels_path, config.mnist_subset, rng
    )


def split_train_test(
    data: LabeledDataset, train_fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    n = len(data)
    n_train = int(round(train_fraction * n))
    if not 0 < n_train < n:
        raise ValueError(f"train fraction {train_fraction} leaves an empty split of {n}")
    order = substream(seed, DOMAIN_DATA, 1).permutation(n)
    return data.take(order[:n_train]), data.take(order[n_train:])


def run_from_config(
    config: ExperimentConfig,
    seed: int | None = None,
    out_dir: str | Path | None = None,
    quiet: bool = False,
) -> tuple[list[list[RoundRecord]], dict[str, Path]]:
    """Run all trials, write metrics, and return (per-trial records, paths)."""
    seed = config.seed if seed is None else int(seed)
    data = load_dataset(config, seed)
    train, test = split_train_test(data, config.train_fraction, seed)
    if config.hidden_width is not None:
        hidden = config.hidden_width
    else:
        hidden = 32 if config.data_source == "mnist" else 16
    n_classes = int(data.labels.max()) + 1
    architecture = [data.features.shape[1], hidden, n_classes]
    rcfg = _round_config(config)
    per_trial = []
    for t in range(config.trials):
        workers = build_workers(config, train, seed, t)
        records, _ = run_experiment(
            workers, test, architecture, rcfg, config.rounds, seed,
            trial=t, max_workers=config.parallel_workers,
        )
        per_trial.append(records)
        if not quiet:
            last = records[-1]
            print(
                f"trial {t}: loss {last.test_loss:.4f} acc {last.test_accuracy:.4f} "
                f"energy {last.cum_energy_j:.6g} J"
            )
    paths = write_metrics(per_trial, out_dir or config.output_dir, config, seed)
    return per_trial, paths


def cli_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="feelsim",
        description="Deadline-driven federated edge learning simulator with "
        "confidence-based sample filtering and per-round energy optimization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the experiment described by a JSON config")
    run_p.add_argument("--config", required=True, help="path to the JSON config file")
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--out", default=None, help="override the config output directory")

    gen_p = sub.add_parser("gen-data", help="write a synthetic dataset to an .npz file")
    gen_p.add_argument("--out", required=True, help="output .npz path")
    gen_p.add_argument("--dim", type=int, default=8)
    gen_p.add_argument("--classes", type=int, default=4)
    gen_p.add_argument("--samples", type=int, default=4000)
    gen_p.add_argument("--spread", type=float, default=0.3)
    gen_p.add_argument("--seed", type=int, default=0)

    sub.add_parser("selftest", help="run the built-in numerical checks")

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message
        return int(exc.code) if exc.code else 0

    if args.command == "run":
        try:
            config = load_config(args.config)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        _, paths = run_from_config(config, seed=args.seed, out_dir=args.out)
        for name in sorted(paths):
            print(f"{name}: {paths[name]}")
        return 0

    if args.command == "gen-data":
        rng = substream(args.seed, DOMAIN_DATA)
        try:
            data = generate_synthetic(args.dim, args.classes, args.samples, args.spread, rng)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        np.savez(out, features=data.features, labels=data.labels)
        print(f"wrote {len(data)} samples to {out}")
        return 0

    from .selftest import run_selftest  # deferred: keeps CLI startup light

    return run_selftest()


def main() -> None:
    sys.exit(cli_main())
