"""Temporal dependency: period extraction and PeriodSparse multi-head attention."""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .exceptions import NoPeriodicityError, ShapeError
from .tensor import DTYPE, autocorrelation_fft, masked_softmax

# a fundamental lag wins over its multiple when its score is at least this share of the multiple's
FUNDAMENTAL_RATIO = 0.7


@dataclass
class PeriodSet:
    periods: list
    scores: list = field(default_factory=list)

    def __post_init__(self):
        self.periods = [int(p) for p in self.periods]
        self.scores = [float(s) for s in self.scores] or [0.0] * len(self.periods)
        if len(set(self.periods)) != len(self.periods):
            raise ValueError(f"duplicate periods in {self.periods}")
        if len(self.scores) != len(self.periods):
            raise ValueError("periods and scores differ in length")

    def __len__(self):
        return len(self.periods)

    @property
    def p_max(self) -> int:
        return max(self.periods)

    def head(self, k: int) -> "PeriodSet":
        return PeriodSet(self.periods[:k], self.scores[:k])

    def to_dict(self) -> dict:
        return {"periods": list(self.periods), "scores": list(self.scores)}


# --- periodicity extraction ----------------------------------------------------


def default_window(length: int) -> int:
    """min(25, largest odd <= L/4), never below 3."""
    w = min(25, length // 4)
    if w % 2 == 0:
        w -= 1
    return max(3, w)


def detrend(series, window: int):
    """Centered moving average trend (window shrinks at the edges) and the remainder."""
    s = np.asarray(series, dtype=np.float64)
    n = s.shape[0]
    if window % 2 == 0:
        raise ValueError(f"moving-average window must be odd, got {window}")
    if not 3 <= window <= n:
        raise ValueError(f"moving-average window {window} outside [3, {n}]")
    half = window // 2
    csum = np.concatenate([[0.0], np.cumsum(s)])
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, n)
    trend = (csum[hi] - csum[lo]) / (hi - lo)
    return trend, s - trend


def lag_similarity(periodic) -> np.ndarray:
    """Unbiased lagged-product similarity ``R[P] = mean_t x[t] x[t-P]`` over the overlap.

    The circular autocorrelation of the zero-padded series equals the linear
    lag sum; dividing by the overlap length removes the decay with P.
    """
    x = np.asarray(periodic, dtype=np.float64)
    n = x.shape[0]
    lin = autocorrelation_fft(np.concatenate([x, np.zeros(n)]))[:n] * (2 * n)
    return lin / (n - np.arange(n))


def _near_multiple(p: int, q: int) -> bool:
    m = round(p / q)
    return m >= 2 and abs(p - m * q) <= m


def extract_periods(series, max_k: int, window: int | None = None) -> PeriodSet:
    """Top-``max_k`` periods of a scalar series.

    The series is detrended with a centered moving average; the interior of
    the periodic component (where the full window fits) is scored by lagged
    similarity. Candidates are positive local maxima at lags 2..L/2. A lag
    within +-1 of, or near a multiple of, an already chosen period is skipped,
    and a candidate defers to its own fundamental when that fundamental scores
    at least ``FUNDAMENTAL_RATIO`` of it.
    """
    s = np.asarray(series, dtype=np.float64)
    n = s.shape[0]
    if n < 8:
        raise ValueError(f"period extraction needs at least 8 samples, got {n}")
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    window = default_window(n) if window is None else window
    _, periodic = detrend(s, window)
    scale = max(1.0, float(np.max(np.abs(s))))
    half = window // 2
    interior = periodic[half:n - half]
    if interior.size < 4 or np.max(np.abs(interior)) <= 1e-12 * scale:
        raise NoPeriodicityError("series has no periodic component after detrending")
    r = lag_similarity(interior)
    top = min(n // 2, interior.size - 2)
    cands = [p for p in range(2, top + 1) if r[p] > 0 and r[p] >= r[p - 1] and r[p] >= r[p + 1]]
    if not cands:
        raise NoPeriodicityError("no positive autocorrelation peak")
    cands.sort(key=lambda p: (-r[p], p))
    chosen = []
    for p in cands:
        base = [q for q in cands if q < p and _near_multiple(p, q) and r[q] >= FUNDAMENTAL_RATIO * r[p]]
        if base:
            p = min(base)
        if any(abs(p - q) <= 1 or _near_multiple(p, q) for q in chosen):
            continue
        chosen.append(p)
        if len(chosen) == max_k:
            break
    return PeriodSet(chosen, [r[p] for p in chosen])


def fallback_periods(length: int) -> PeriodSet:
    """Single period ``max(2, floor(L / ln L))`` used when extraction finds nothing."""
    return PeriodSet([max(2, int(length / math.log(length)))], [0.0])


def select_heads(candidates: PeriodSet, l: int, c: float) -> PeriodSet:
    """Keep the leading periods while ``sum(l / P) <= c * ln(l)``; the first is always kept."""
    if c <= 0:
        raise ValueError("sparsity factor must be positive")
    if l < 2:
        raise ValueError("sequence length must be >= 2")
    if not len(candidates):
        raise ValueError("no candidate periods")
    budget = c * math.log(l)
    kept, used = 0, 0.0
    for p in candidates.periods:
        cost = l / p
        if kept and used + cost > budget:
            break
        used += cost
        kept += 1
    return candidates.head(kept)


# --- connectivity ------------------------------------------------------------


@dataclass
class ConnectivityPattern:
    """``sets[h][i]``: ascending key positions head ``h`` attends from query ``i``."""

    sets: list
    sequence_length: int
    periods: list

    @property
    def heads(self) -> int:
        return len(self.sets)

    def key_visits(self) -> int:
        return sum(len(a) for head in self.sets for a in head)


def build_connectivity(l: int, p: PeriodSet | list) -> ConnectivityPattern:
    periods = list(p.periods if isinstance(p, PeriodSet) else p)
    for period in periods:
        if period < 1 or period >= l:
            raise ValueError(f"period {period} must lie in [1, {l})")
    sets = [[list(range(i % period, i + 1, period)) for i in range(l)] for period in periods]
    return ConnectivityPattern(sets, l, periods)


def causal_visits(l: int, period: int) -> int:
    """Closed form of ``sum_i floor(i / P) + 1``."""
    return sum(i // period + 1 for i in range(l))


# --- work metering -----------------------------------------------------------


@dataclass
class WorkMeter:
    """Counts evaluated (query, key) pairs and the bytes of score/weight buffers.

    Buffers are assumed to stay alive for the backward pass, so ``current``
    only grows until ``reset``; ``peak_bytes`` is its high-water mark.
    """

    key_visits: int = 0
    current_bytes: int = 0
    peak_bytes: int = 0

    def allocate(self, nbytes: int) -> None:
        self.current_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)

    def reset(self) -> None:
        self.key_visits = self.current_bytes = self.peak_bytes = 0

    @contextlib.contextmanager
    def activate(self):
        token = _ACTIVE_METER.set(self)
        try:
            yield self
        finally:
            _ACTIVE_METER.reset(token)


_ACTIVE_METER: contextvars.ContextVar = contextvars.ContextVar("odformer_meter", default=None)


def _record(visits: int, nbytes: int) -> None:
    meter = _ACTIVE_METER.get()
    if meter is not None:
        meter.key_visits += visits
        meter.allocate(nbytes)


# --- attention ---------------------------------------------------------------


class MultiHeadParams(nn.Module):
    """Per-head query/key/value projections plus the output projection.

    Holds ``max_heads`` heads; a call that uses ``k`` heads reads the first
    ``k`` and the matching rows of ``output_proj``.
    """

    def __init__(self, d_model: int, max_heads: int, d_head: int | None = None):
        super().__init__()
        d_head = d_head or max(1, d_model // max_heads)
        self.d_model, self.max_heads, self.d_head = d_model, max_heads, d_head
        s_in = 1.0 / math.sqrt(d_model)
        self.w_q = nn.Parameter(torch.randn(max_heads, d_model, d_head, dtype=DTYPE) * s_in)
        self.w_k = nn.Parameter(torch.randn(max_heads, d_model, d_head, dtype=DTYPE) * s_in)
        self.w_v = nn.Parameter(torch.randn(max_heads, d_model, d_head, dtype=DTYPE) * s_in)
        self.output_proj = nn.Parameter(torch.randn(max_heads * d_head, d_model, dtype=DTYPE) / math.sqrt(max_heads * d_head))

    def project_out(self, heads: list) -> torch.Tensor:
        cat = torch.cat(heads, dim=-1)
        return cat @ self.output_proj[: cat.shape[-1]]


def _periodic_head(q, k, v, period: int, return_weights: bool):
    """Causal attention restricted to keys congruent to the query modulo ``period``.

    Positions are regrouped by residue class so each class is a short dense
    causal block of length ``ceil(L / period)``.
    """
    *lead, length, dh = q.shape
    m = -(-length // period)
    pad = m * period - length

    def blocks(x):
        if pad:
            x = torch.cat([x, x.new_zeros(*lead, pad, x.shape[-1])], dim=-2)
        return x.reshape(*lead, m, period, x.shape[-1]).transpose(-3, -2)

    qb, kb, vb = blocks(q), blocks(k), blocks(v)
    pos = torch.arange(m)[:, None] * period + torch.arange(period)[None, :]  # [m, P]
    valid = (pos < length).T  # [P, m]
    causal = torch.ones(m, m, dtype=torch.bool).tril()
    mask = causal[None] & valid[:, None, :]  # [P, m(query), m(key)]
    scores = (qb @ kb.transpose(-1, -2)) / math.sqrt(dh)
    weights = masked_softmax(scores, mask)
    out = (weights @ vb).transpose(-3, -2).reshape(*lead, m * period, dh)[..., :length, :]

    batch = int(np.prod(lead)) if lead else 1
    visits = int((mask & valid[:, :, None]).sum()) * batch
    _record(visits, 2 * scores.numel() * scores.element_size())

    dense = None
    if return_weights:
        dense = weights.new_zeros(*lead, length, length)
        qi = pos.T[:, :, None].expand(period, m, m)
        kj = pos.T[:, None, :].expand(period, m, m)
        keep = mask & valid[:, :, None]
        dense[..., qi[keep], kj[keep]] = weights[..., keep]
    return out, dense


def period_sparse_attention(s: torch.Tensor, params: MultiHeadParams, pattern, return_weights: bool = False):
    """Multi-head attention where head ``h`` at position ``i`` sees ``j <= i`` with ``(i - j) % P_h == 0``.

    ``s`` is [..., L, d_model]; ``pattern`` is a ``ConnectivityPattern``,
    a ``PeriodSet`` or a list of periods (one head per period). With
    ``return_weights`` the per-head dense [L, L] weight matrices come back too.
    """
    if isinstance(pattern, ConnectivityPattern):
        if pattern.sequence_length != s.shape[-2]:
            raise ShapeError(f"pattern built for L={pattern.sequence_length}, input has L={s.shape[-2]}")
        periods = pattern.periods
    else:
        periods = list(pattern.periods if isinstance(pattern, PeriodSet) else pattern)
    if not periods or len(periods) > params.max_heads:
        raise ShapeError(f"{len(periods)} heads requested, parameters hold {params.max_heads}")
    if s.shape[-1] != params.d_model:
        raise ShapeError(f"input width {s.shape[-1]} != d_model {params.d_model}")
    outs, weights = [], []
    for h, period in enumerate(periods):
        q, k, v = s @ params.w_q[h], s @ params.w_k[h], s @ params.w_v[h]
        out, w = _periodic_head(q, k, v, int(period), return_weights)
        outs.append(out)
        weights.append(w)
    y = params.project_out(outs)
    return (y, weights) if return_weights else y


def cross_attention(queries: torch.Tensor, memory: torch.Tensor, params: MultiHeadParams, heads: int | None = None,
                    return_weights: bool = False):
    """Dense multi-head attention of decoder positions over all encoder positions."""
    heads = heads or params.max_heads
    if queries.shape[-1] != params.d_model or memory.shape[-1] != params.d_model:
        raise ShapeError("query/memory width does not match d_model")
    outs, weights = [], []
    for h in range(heads):
        q, k, v = queries @ params.w_q[h], memory @ params.w_k[h], memory @ params.w_v[h]
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(params.d_head)
        w = masked_softmax(scores)
        _record(scores.numel(), 2 * scores.numel() * scores.element_size())
        outs.append(w @ v)
        weights.append(w)
    y = params.project_out(outs)
    return (y, weights) if return_weights else y
