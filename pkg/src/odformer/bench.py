"""Sparse vs full self-attention benchmark with exact key-visit counts."""
from __future__ import annotations

import csv
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .exceptions import ContractError, NoPeriodicityError
from .temporal import (MultiHeadParams, PeriodSet, WorkMeter, causal_visits, extract_periods, fallback_periods,
                       period_sparse_attention, select_heads)
from .tensor import DTYPE

OUT_OF_MEMORY = "out-of-memory"


@dataclass
class BenchPoint:
    input_length: int
    output_length: int
    attention_kind: str
    wall_time_ms: float | None
    peak_bytes: int | None
    key_visit_count: int
    heads: int
    periods: list
    status: str = "ok"

    @property
    def sequence_length(self) -> int:
        return self.input_length + self.output_length


def planted_series(length: int, period: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    return np.sin(2 * np.pi * t / period) + 0.05 * rng.normal(size=length)


def sparse_periods(series: np.ndarray, max_heads: int, c: float) -> PeriodSet:
    try:
        cands = extract_periods(series, max_heads)
    except NoPeriodicityError:
        cands = fallback_periods(len(series))
    return select_heads(cands, len(series), c).head(max_heads)


def predicted_bytes(length: int, periods) -> int:
    """Score plus weight buffers the meter will record for one forward pass."""
    total = 0
    for p in periods:
        m = -(-length // p)
        total += 2 * p * m * m * 8
    return total


def _workload(length: int, d_model: int, heads: int, periods, seed: int):
    g = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        params = MultiHeadParams(d_model, heads)
    x = torch.randn(1, length, d_model, dtype=DTYPE, generator=g, requires_grad=True)

    def run():
        out = period_sparse_attention(x, params, list(periods))
        out.square().sum().backward()

    return run


def bench_point(i: int, o: int, kind: str, d_model: int = 32, max_heads: int = 4, c: float = 2.0,
                period_fraction: float = 0.125, repeats: int = 5, memory_cap_bytes: int | None = None,
                seed: int = 0) -> BenchPoint:
    """One forward+backward self-attention workload over ``L = i + o`` positions.

    The sparse kind extracts periods from a series with a planted period of
    ``round(period_fraction * L)`` and keeps heads under the budget ``c``;
    the full kind uses period 1 with the same head count.
    """
    length = i + o
    planted = max(2, round(period_fraction * length))
    sparse = sparse_periods(planted_series(length, planted, seed), max_heads, c)
    if kind not in ("period_sparse", "full"):
        raise ValueError(f"unknown attention kind {kind!r}")
    periods = sparse.periods if kind == "period_sparse" else [1] * len(sparse)
    visits = sum(causal_visits(length, p) for p in periods)
    if memory_cap_bytes is not None and predicted_bytes(length, periods) > memory_cap_bytes:
        return BenchPoint(i, o, kind, None, None, visits, len(periods), list(periods), OUT_OF_MEMORY)

    run = _workload(length, d_model, len(periods), periods, seed)
    meter = WorkMeter()
    with meter.activate():
        run()
    if meter.key_visits != visits:
        raise ContractError(f"counted {meter.key_visits} key visits, expected {visits}")
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        run()
        times.append((time.perf_counter() - start) * 1e3)
    return BenchPoint(i, o, kind, statistics.median(times), meter.peak_bytes, visits, len(periods), list(periods))


def run_bench(grid, kinds=("period_sparse", "full"), **kw) -> list:
    return [bench_point(i, o, kind, **kw) for i, o in grid for kind in kinds]


def visit_budget(length: int, c: float) -> int:
    return math.ceil(c * length * math.log(length))


def growth_ratios(points: list, kind: str) -> list:
    """Key-visit ratio between consecutive grid points of one attention kind."""
    pts = sorted((p for p in points if p.attention_kind == kind), key=lambda p: p.sequence_length)
    return [b.key_visit_count / a.key_visit_count for a, b in zip(pts, pts[1:])]


# --- report files ------------------------------------------------------------

_FIELDS = [f.name for f in fields(BenchPoint)]


def write_bench(points: list, out_dir) -> tuple:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path, csv_path = out / "bench.json", out / "bench.csv"
    json_path.write_text(json.dumps([asdict(p) for p in points], indent=2))
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_FIELDS)
        w.writeheader()
        for p in points:
            row = asdict(p)
            row["periods"] = " ".join(map(str, p.periods))
            w.writerow({k: "" if v is None else v for k, v in row.items()})
    return json_path, csv_path


def read_bench_json(path) -> list:
    return [BenchPoint(**d) for d in json.loads(Path(path).read_text())]


def read_bench_csv(path) -> list:
    points = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            points.append(BenchPoint(
                input_length=int(row["input_length"]),
                output_length=int(row["output_length"]),
                attention_kind=row["attention_kind"],
                wall_time_ms=float(row["wall_time_ms"]) if row["wall_time_ms"] else None,
                peak_bytes=int(row["peak_bytes"]) if row["peak_bytes"] else None,
                key_visit_count=int(row["key_visit_count"]),
                heads=int(row["heads"]),
                periods=[int(p) for p in row["periods"].split()],
                status=row["status"],
            ))
    return points
