"""Encoder-decoder ODformer network."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from torch import nn

from .data import RegionGraph
from .exceptions import ConfigError, ContractError, NoPeriodicityError, ShapeError
from .spatial import SpatialConfig, SpatialModule
from .temporal import (MultiHeadParams, PeriodSet, cross_attention, extract_periods, fallback_periods,
                       period_sparse_attention, select_heads)
from .tensor import DTYPE


@dataclass
class ModelConfig:
    n: int
    n_prime: int
    f: int = 1
    input_length: int = 48
    output_length: int = 24
    d_model: int = 32
    d_ff: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 1
    start_token_length: int | None = None
    alpha: float = 0.5
    chebyshev_order: int = 2
    d_attn: int = 16
    sparsity_factor: float = 2.0
    max_heads: int = 4
    dominant_refresh: int | str = "pmax"
    importance: str = "printed"
    moving_average_window: int | None = None
    center_inputs: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.start_token_length is None:
            self.start_token_length = self.input_length // 2
        if self.output_length < 1:
            raise ConfigError("output_length must be >= 1")
        if self.input_length < 2:
            raise ConfigError("input_length must be >= 2")
        if not 0 <= self.start_token_length <= self.input_length:
            raise ConfigError("start_token_length must lie in [0, input_length]")
        if min(self.n, self.n_prime, self.f, self.d_model, self.d_ff, self.max_heads, self.d_attn) < 1:
            raise ConfigError("dimensions must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.sparsity_factor <= 0:
            raise ConfigError("sparsity_factor must be positive")
        if not (self.dominant_refresh == "pmax" or (isinstance(self.dominant_refresh, int) and self.dominant_refresh >= 1)):
            raise ConfigError("dominant_refresh must be a positive int or 'pmax'")

    @property
    def decoder_length(self) -> int:
        return self.start_token_length + self.output_length

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def positional_encoding(length: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=DTYPE)[:, None]
    div = torch.exp(torch.arange(0, d_model, 2, dtype=DTYPE) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model, dtype=DTYPE)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d_model // 2]
    return pe


class Embedding(nn.Module):
    """Flatten each OD matrix, project to ``d_model`` and add sinusoidal positions."""

    def __init__(self, in_features: int, d_model: int):
        super().__init__()
        self.proj = nn.Linear(in_features, d_model, dtype=DTYPE)

    def forward(self, matrices: torch.Tensor) -> torch.Tensor:
        flat = matrices.reshape(*matrices.shape[:-3], -1)
        if flat.shape[-1] != self.proj.in_features:
            raise ShapeError(f"matrices flatten to {flat.shape[-1]} features, expected {self.proj.in_features}")
        return self.proj(flat) + positional_encoding(flat.shape[-2], self.proj.out_features)


def embed(matrices, params: Embedding) -> torch.Tensor:
    """[..., T, N, N', F] -> [..., T, d_model]."""
    return params(torch.as_tensor(matrices, dtype=DTYPE))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.lin1 = nn.Linear(d_model, d_ff, dtype=DTYPE)
        self.lin2 = nn.Linear(d_ff, d_model, dtype=DTYPE)

    def forward(self, x):
        return self.lin2(torch.nn.functional.gelu(self.lin1(x)))


def grouped_sparse_attention(x: torch.Tensor, params: MultiHeadParams, periods: list) -> torch.Tensor:
    """PeriodSparse attention when batch items carry different period sets.

    ``periods[b]`` is the period list of item ``b``; items sharing a list run together.
    """
    groups = defaultdict(list)
    for b, p in enumerate(periods):
        groups[tuple(p)].append(b)
    if len(groups) == 1:
        return period_sparse_attention(x, params, list(periods[0]))
    order, outs = [], []
    for key, idx in groups.items():
        outs.append(period_sparse_attention(x[idx], params, list(key)))
        order.extend(idx)
    inv = torch.empty(len(order), dtype=torch.long)
    inv[torch.tensor(order)] = torch.arange(len(order))
    return torch.cat(outs)[inv]


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, d_ff: int, max_heads: int):
        super().__init__()
        self.attn = MultiHeadParams(d_model, max_heads)
        self.ff = FeedForward(d_model, d_ff)
        self.norm1 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d_model, dtype=DTYPE)

    def forward(self, x, periods):
        x = self.norm1(x + grouped_sparse_attention(x, self.attn, periods))
        return self.norm2(x + self.ff(x))


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, d_ff: int, max_heads: int):
        super().__init__()
        self.self_attn = MultiHeadParams(d_model, max_heads)
        self.cross_attn = MultiHeadParams(d_model, max_heads)
        self.ff = FeedForward(d_model, d_ff)
        self.norm1 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.norm3 = nn.LayerNorm(d_model, dtype=DTYPE)

    def forward(self, x, memory, periods):
        x = self.norm1(x + grouped_sparse_attention(x, self.self_attn, periods))
        x = self.norm2(x + cross_attention(x, memory, self.cross_attn))
        return self.norm3(x + self.ff(x))


class ODformer(nn.Module):
    """Spatial blocks per timestep, PeriodSparse encoder, one-pass generative decoder."""

    def __init__(self, config: ModelConfig, origin_graph: RegionGraph | None = None,
                 destination_graph: RegionGraph | None = None):
        super().__init__()
        self.config = c = config
        og = origin_graph or RegionGraph.edgeless(c.n)
        dg = destination_graph or RegionGraph.edgeless(c.n_prime)
        if og.region_count != c.n or dg.region_count != c.n_prime:
            raise ConfigError("region graphs do not match n / n_prime")
        self.origin_graph, self.destination_graph = og, dg
        refresh = c.dominant_refresh if isinstance(c.dominant_refresh, int) else 1
        sc = SpatialConfig(c.alpha, c.d_attn, c.chebyshev_order, refresh, c.importance)
        cells = c.n * c.n_prime * c.f
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(c.seed)
            self.enc_spatial = SpatialModule(c.n, c.n_prime, c.f, og, dg, sc)
            self.dec_spatial = SpatialModule(c.n, c.n_prime, c.f, og, dg, sc)
            self.enc_embed = Embedding(cells, c.d_model)
            self.dec_embed = Embedding(cells, c.d_model)
            self.encoder = nn.ModuleList(EncoderLayer(c.d_model, c.d_ff, c.max_heads) for _ in range(c.encoder_layers))
            self.decoder = nn.ModuleList(DecoderLayer(c.d_model, c.d_ff, c.max_heads) for _ in range(c.decoder_layers))
            self.head = nn.Linear(c.d_model, cells, dtype=DTYPE)
        self.last_periods: list = []

    # -- period handling ----------------------------------------------------

    def extract(self, reduced: np.ndarray) -> PeriodSet:
        """Encoder PeriodSet for one reduced (scalar per step) series."""
        c = self.config
        try:
            cands = extract_periods(reduced, c.max_heads, c.moving_average_window)
        except NoPeriodicityError:
            cands = fallback_periods(len(reduced))
        return select_heads(cands, len(reduced), c.sparsity_factor).head(c.max_heads)

    def decoder_periods(self, periods: PeriodSet) -> list:
        length = self.config.decoder_length
        kept = [p for p in periods.periods if p < length]
        if kept:
            return kept
        return fallback_periods(length).periods if length >= 3 else [1]

    def refresh_steps(self, x: torch.Tensor):
        c = self.config
        if isinstance(c.dominant_refresh, int):
            return c.dominant_refresh
        reduced = x.detach().mean(dim=(-3, -2, -1)).numpy()
        return torch.tensor([self.extract(r).p_max for r in reduced])

    # -- forward ----------------------------------------------------------------

    def forward(self, history: torch.Tensor) -> torch.Tensor:
        """[B, I, N, N', F] (or unbatched [I, N, N', F]) -> [B, O, N, N', F]."""
        c = self.config
        x = torch.as_tensor(history, dtype=DTYPE)
        unbatched = x.dim() == 4
        if unbatched:
            x = x[None]
        if x.dim() != 5 or x.shape[2:] != (c.n, c.n_prime, c.f):
            raise ShapeError(f"history must be [B, I, {c.n}, {c.n_prime}, {c.f}], got {tuple(history.shape)}")
        if x.shape[1] != c.input_length:
            raise ContractError(f"history length {x.shape[1]} != input_length {c.input_length}")
        b = x.shape[0]
        level = x.mean(dim=1, keepdim=True) if c.center_inputs else x.new_zeros(b, 1, c.n, c.n_prime, c.f)
        x = x - level

        refresh = self.refresh_steps(x)
        s = self.enc_spatial(x, refresh)
        reduced = s.detach().mean(dim=(-3, -2, -1)).numpy()
        period_sets = [self.extract(r) for r in reduced]
        self.last_periods = period_sets
        enc_p = [ps.periods for ps in period_sets]
        dec_p = [self.decoder_periods(ps) for ps in period_sets]

        h = self.enc_embed(s)
        for layer in self.encoder:
            h = layer(h, enc_p)

        placeholders = x.new_zeros(b, c.output_length, c.n, c.n_prime, c.f)
        dec_in = torch.cat([x[:, c.input_length - c.start_token_length:], placeholders], dim=1)
        g = self.dec_embed(self.dec_spatial(dec_in, refresh))
        for layer in self.decoder:
            g = layer(g, h, dec_p)

        out = self.head(g[:, -c.output_length:]).reshape(b, c.output_length, c.n, c.n_prime, c.f) + level
        return out[0] if unbatched else out


def forward(history, model: ODformer) -> torch.Tensor:
    return model(history)
