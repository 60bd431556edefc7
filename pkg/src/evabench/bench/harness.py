"""Runtime and approximation-error sweeps over sequence lengths."""
from __future__ import annotations

import contextlib
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from ..causal import causal_eva
from ..eva import (
    ideal_eva,
    ideal_eva_flops,
    ideal_eva_peak_bytes,
    practical_eva,
    practical_eva_flops,
    practical_eva_peak_bytes,
    scatterbrain,
    scatterbrain_flops,
    scatterbrain_peak_bytes,
)
from ..exact import random_instance, softmax_attention, softmax_flops, softmax_peak_bytes
from ..features import RFConfig, performer_attention, performer_flops, performer_peak_bytes
from ..partition import PartitionSpec
from .config import BenchConfig, ConfigError

MAX_EXACT_N = 4096
ERROR_COLUMNS = ("estimator", "N", "d", "K", "C", "seed", "mse")
BENCH_COLUMNS = ("estimator", "N", "median_ns", "p10_ns", "p90_ns", "flop_estimate",
                 "peak_bytes_estimate", "mse_vs_exact")


@dataclass
class BenchRecord:
    estimator: str
    N: int
    median_ns: int
    p10_ns: int
    p90_ns: int
    flop_estimate: int
    peak_bytes_estimate: int
    mse_vs_exact: float | None = None


@dataclass
class Estimator:
    run: Callable  # instance -> output matrix
    flops: int
    peak_bytes: int
    causal: bool = False


def instance_rng(seed: int, N: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, N])))


def make_estimator(name: str, cfg: BenchConfig, N: int, seed: int) -> Estimator:
    """Bind an estimator name to the config's parameters at length N.

    eva-ideal uses ratio coefficients from S directions in sample mode and
    single-sample coefficients at the proposal mean in deterministic-mean
    mode; its groups are disjoint from the local block.
    """
    d, K, C, S = cfg.d, cfg.K, cfg.C, cfg.S
    rf = RFConfig(S=S, seed=seed, mode=cfg.mode)
    if name == "softmax":
        return Estimator(softmax_attention, softmax_flops(N, N, d), softmax_peak_bytes(N, N, d))
    if name == "performer":
        return Estimator(lambda inst: performer_attention(inst, rf).output,
                         performer_flops(N, N, d, S), performer_peak_bytes(N, N, d, S))
    if name == "eva-ideal":
        part = PartitionSpec(N, N, K, C, over_full_range=not (K and C))
        if cfg.mode == "deterministic-mean":
            rf1 = RFConfig(S=1, seed=seed, mode=cfg.mode)
            run = lambda inst: ideal_eva(inst, part, rf1, "single-sample", proposal=cfg.proposal).output  # noqa: E731
        else:
            run = lambda inst: ideal_eva(inst, part, rf, "ratio").output  # noqa: E731
        return Estimator(run, ideal_eva_flops(part, d, S), ideal_eva_peak_bytes(part, d, S))
    if name in ("eva-practical", "eva-causal"):
        part = PartitionSpec(N, N, K, C)
        if name == "eva-causal":
            if K < 1:
                raise ConfigError("eva-causal needs K >= 1")
            run = lambda inst: causal_eva(inst, part, rf, proposal=cfg.proposal).output  # noqa: E731
        else:
            run = lambda inst: practical_eva(inst, part, rf, proposal=cfg.proposal).output  # noqa: E731
        return Estimator(run, practical_eva_flops(part, d), practical_eva_peak_bytes(part, d),
                         causal=name == "eva-causal")
    if name == "scatterbrain":
        part = PartitionSpec(N, N, K, C)
        if K < 1:
            raise ConfigError("scatterbrain needs K >= 1")
        return Estimator(lambda inst: scatterbrain(inst, part, rf).output,
                         scatterbrain_flops(part, d, S), scatterbrain_peak_bytes(part, d, S))
    raise ConfigError(f"unknown estimator {name!r}")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def time_call(fn, arg, repeats: int, warmup: int) -> np.ndarray:
    """Wall-clock durations in ns of ``repeats`` calls after discarded warmups."""
    for _ in range(warmup):
        fn(arg)
    out = np.empty(repeats, dtype=np.int64)
    for i in range(repeats):
        t0 = time.perf_counter_ns()
        fn(arg)
        out[i] = time.perf_counter_ns() - t0
    return out


def run_bench(cfg: BenchConfig) -> list[BenchRecord]:
    """One record per (estimator, N), timed single-threaded on the first seed."""
    seed = cfg.seeds[0]
    records = []
    with threadpool_limits(limits=1):
        for name in cfg.estimators:
            for N in cfg.lengths:
                est = make_estimator(name, cfg, N, seed)
                inst = random_instance(instance_rng(seed, N), N, d=cfg.d)
                times = time_call(est.run, inst, cfg.repeats, cfg.warmup)
                p10, med, p90 = np.percentile(times, [10, 50, 90])
                err = None
                if cfg.compute_mse:
                    err = mse(est.run(inst), softmax_attention(inst, causal=est.causal))
                records.append(BenchRecord(name, N, int(round(med)), int(round(p10)), int(round(p90)),
                                           est.flops, est.peak_bytes, err))
    return records


def run_error(cfg: BenchConfig) -> list[dict]:
    """Output MSE against exact softmax for every (estimator, N, seed)."""
    if cfg.lengths[-1] > MAX_EXACT_N:
        raise ConfigError(f"error sweeps need N <= {MAX_EXACT_N}, got {cfg.lengths[-1]}")
    rows = []
    for name in cfg.estimators:
        for N in cfg.lengths:
            for seed in cfg.seeds:
                est = make_estimator(name, cfg, N, seed)
                inst = random_instance(instance_rng(seed, N), N, d=cfg.d)
                err = mse(est.run(inst), softmax_attention(inst, causal=est.causal))
                rows.append(dict(estimator=name, N=N, d=cfg.d, K=cfg.K, C=cfg.C, seed=seed, mse=err))
    return rows


def summarize_errors(rows: list[dict]) -> list[dict]:
    """Mean and standard error of the MSE per (estimator, N)."""
    keyed: dict[tuple, list[float]] = {}
    for r in rows:
        keyed.setdefault((r["estimator"], r["N"]), []).append(r["mse"])
    out = []
    for (name, N), vals in keyed.items():
        v = np.asarray(vals)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        out.append(dict(estimator=name, N=N, count=int(v.size), mean_mse=float(v.mean()), stderr_mse=se))
    return out


def loglog_slope(lengths, times) -> float:
    """Least-squares slope of log(time) against log(N)."""
    x = np.log(np.asarray(lengths, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


# output -----------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def to_json(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def render_bench(records: list[BenchRecord], fmt: str) -> str:
    rows = [asdict(r) for r in records]
    if fmt == "csv":
        return to_csv(rows, BENCH_COLUMNS)
    return to_json({"records": rows})


def render_error(rows: list[dict], fmt: str) -> str:
    if fmt == "csv":
        return to_csv(rows, ERROR_COLUMNS)
    return to_json({"rows": rows, "summary": summarize_errors(rows)})


def write_output(text: str, path: str | None) -> None:
    """Write to ``path`` atomically (temp file in the same directory, then rename),
    or to stdout when ``path`` is None."""
    if path is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    target = Path(path)
    fd, tmp = tempfile.mkstemp(dir=target.parent or Path("."), prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, target)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise
