"""Learning-rate x seed sweeps, the append-only JSONL run log, and aggregation."""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from oui_lab import envs
from oui_lab.ppo_engine import PpoConfig, train_run
from oui_lab.records import CheckpointMetrics, RunRecord, run_id_for

log = logging.getLogger(__name__)

LR_MIN = 3.16e-5
LR_MAX = 3.16e-2
N_LRS = 13
DEFAULT_SEEDS = tuple(range(10))

METRIC_FIELDS = {
    "return": "return_ma50",
    "oui_actor": "oui_actor",
    "oui_critic": "oui_critic",
    "kl": "approx_kl",
    "clip": "clip_fraction",
    "flip": "flip_fraction",
}


def lr_grid(n: int = N_LRS, lo: float = LR_MIN, hi: float = LR_MAX) -> list[float]:
    """Geometric grid with the printed endpoints kept exact."""
    grid = [float(v) for v in np.geomspace(lo, hi, n)]
    grid[0], grid[-1] = lo, hi
    return grid


@dataclass
class SweepSpec:
    env_id: str
    lr_grid: list = field(default_factory=lr_grid)
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        envs.check_env_id(self.env_id)
        self.lr_grid = [float(v) for v in self.lr_grid]
        self.seeds = [int(s) for s in self.seeds]
        if any(b <= a for a, b in zip(self.lr_grid, self.lr_grid[1:])):
            raise ValueError("lr_grid must be strictly increasing")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("duplicate seeds")


def expand_grid(spec: SweepSpec) -> list[PpoConfig]:
    return [
        PpoConfig.for_env(spec.env_id, lr, seed, **spec.overrides) for lr in spec.lr_grid for seed in spec.seeds
    ]


# ---------------------------------------------------------------- log I/O


@dataclass
class LogReadResult:
    records: list
    bad_lines: list  # (line number, reason)


def read_log(path) -> LogReadResult:
    """Parse a JSONL run log; malformed lines are collected, not fatal."""
    records, bad = [], []
    path = Path(path)
    if not path.exists():
        return LogReadResult(records, bad)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(RunRecord.from_line(line))
            except (ValueError, KeyError, TypeError) as exc:
                bad.append((lineno, str(exc)))
    return LogReadResult(records, bad)


class LogWriter:
    """Single appender; each record is one complete line, flushed and fsynced."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists() and self.path.stat().st_size > 0:
            with open(self.path, "rb") as fh:
                fh.seek(-1, os.SEEK_END)
                if fh.read(1) != b"\n":
                    # a previous writer died mid-line; terminate it so it parses as one bad line
                    with open(self.path, "ab") as out:
                        out.write(b"\n")

    def append(self, record: RunRecord) -> None:
        line = (record.to_line() + "\n").encode("utf-8")
        fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            os.write(fd, line)
            os.fsync(fd)
        finally:
            os.close(fd)


# ---------------------------------------------------------------- execution


def _run_one(args):
    env_id, config = args
    return train_run(env_id, config)


def max_parallelism(requested: int) -> int:
    cap = os.environ.get("OUI_LAB_THREADS")
    n = max(1, int(requested))
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def execute_sweep(spec: SweepSpec, log_path, parallelism: int = 1, progress=None) -> list[RunRecord]:
    """Run every missing config of ``spec`` and append results to ``log_path``.

    Runs already present in the log (by run_id) are skipped, so an interrupted
    sweep resumes where it stopped. Returns all records of the spec.
    """
    configs = expand_grid(spec)
    existing = {r.run_id: r for r in read_log(log_path).records}
    pending = [c for c in configs if run_id_for(spec.env_id, c.to_json()) not in existing]
    envs.load_probe_batch(spec.env_id)
    writer = LogWriter(log_path)
    workers = max_parallelism(parallelism)
    if workers == 1 or len(pending) <= 1:
        for cfg in pending:
            rec = train_run(spec.env_id, cfg)
            writer.append(rec)
            existing[rec.run_id] = rec
            if progress:
                progress(rec)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, (spec.env_id, cfg)) for cfg in pending]
            for fut in as_completed(futures):
                rec = fut.result()
                writer.append(rec)
                existing[rec.run_id] = rec
                if progress:
                    progress(rec)
    ids = [run_id_for(spec.env_id, c.to_json()) for c in configs]
    return [existing[i] for i in ids]


# ---------------------------------------------------------------- aggregation


@dataclass
class AggregateRow:
    lr: float
    median: float | None
    q25: float | None
    q75: float | None
    n: int
    n_missing: int


def metric_value(record: RunRecord, metric: str, at_fraction: float):
    if metric not in METRIC_FIELDS:
        raise ValueError(f"unknown metric {metric!r}")
    cp = record.checkpoint_at(at_fraction)
    if cp is None:
        return None
    value = getattr(cp, METRIC_FIELDS[metric])
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def aggregate(records, metric: str, at_fraction: float, env_id: str | None = None) -> list[AggregateRow]:
    """Per-LR median and inclusive linear-interpolation quartiles across seeds."""
    by_lr: dict[float, list] = {}
    for rec in records:
        if env_id is not None and rec.env_id != env_id:
            continue
        by_lr.setdefault(rec.lr, []).append(metric_value(rec, metric, at_fraction))
    rows = []
    for lr in sorted(by_lr):
        # sort so the result does not depend on log order
        values = sorted(v for v in by_lr[lr] if v is not None)
        missing = len(by_lr[lr]) - len(values)
        if values:
            q25, med, q75 = (float(v) for v in np.quantile(values, [0.25, 0.5, 0.75]))
            rows.append(AggregateRow(lr, med, q25, q75, len(values), missing))
        else:
            rows.append(AggregateRow(lr, None, None, None, 0, missing))
    return rows
