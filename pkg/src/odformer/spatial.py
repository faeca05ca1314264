"""Spatial dependency: OD attention, 2D Chebyshev graph convolution, and their blend."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import RegionGraph
from .exceptions import ContractError, DataError, ShapeError
from .tensor import DTYPE, as_tensor, chebyshev_stack, masked_softmax

EXP_CLAMP = 30.0


@dataclass
class SpatialConfig:
    alpha: float = 0.5
    d_attn: int = 16
    chebyshev_order: int = 2
    dominant_refresh: int = 1
    importance: str = "printed"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.d_attn < 1 or self.chebyshev_order < 1 or self.dominant_refresh < 1:
            raise ValueError("d_attn, chebyshev_order and dominant_refresh must be positive")
        if self.importance not in ("printed", "entropy"):
            raise ValueError("importance must be 'printed' or 'entropy'")


# --- dominant query selection -------------------------------------------------


def importance_scores(queries, keys, variant: str = "printed") -> torch.Tensor:
    """Importance of each query row; smaller means more informative.

    ``printed``: ``I_i = -sum_j p(k_j|q_i) * sum_{j' != j} kappa(q_i, k_j')``
    with ``kappa = exp(q k^T / sqrt(d))`` (exponent clamped to +-30) and
    ``p`` the row-normalized kernel. ``entropy``: ``-sum_j p log p``.
    Leading batch dimensions are allowed.
    """
    q, k = as_tensor(queries), as_tensor(keys)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    d = q.shape[-1]
    logits = (q @ k.transpose(-1, -2)) / math.sqrt(d)
    logits = logits.clamp(-EXP_CLAMP, EXP_CLAMP)
    # p(k_j | q_i) = kappa_ij / sum_j kappa_ij, i.e. a softmax of the logits
    p = masked_softmax(logits, dim=-1)
    if variant == "entropy":
        return -(p * torch.log(p.clamp_min(1e-300))).sum(-1)
    kappa = torch.exp(logits)
    others = kappa.sum(-1, keepdim=True) - kappa
    return -(p * others).sum(-1)


def dominant_count(r: int) -> int:
    return max(1, math.ceil(math.log(r))) if r > 1 else 1


def select_dominant(scores) -> list:
    """Indices of the ``max(1, ceil(ln R))`` smallest scores, ties to the lower index."""
    s = np.asarray(scores.detach() if isinstance(scores, torch.Tensor) else scores, dtype=np.float64)
    u = min(dominant_count(s.shape[0]), s.shape[0])
    order = np.argsort(s, kind="stable")
    return sorted(int(i) for i in order[:u])


def dominant_mask(scores: torch.Tensor) -> torch.Tensor:
    """Batched ``select_dominant``: boolean mask over the last axis."""
    r = scores.shape[-1]
    u = min(dominant_count(r), r)
    order = torch.argsort(scores.detach(), dim=-1, stable=True)[..., :u]
    mask = torch.zeros(scores.shape, dtype=torch.bool)
    return mask.scatter(-1, order, True)


# --- OD attention ---------------------------------------------------------------


class RegionAttention(nn.Module):
    """Attention coefficients among the ``regions`` row vectors of one side of an OD matrix.

    Each region's OD vector (length ``vector_len``) is projected to a query
    and a key; the raw score is ``tanh(q_i B k_i'^T + b_ii')``.
    """

    def __init__(self, regions: int, vector_len: int, d_attn: int = 16):
        super().__init__()
        self.regions, self.vector_len, self.d_attn = regions, vector_len, d_attn
        scale = 1.0 / math.sqrt(vector_len)
        self.query_proj = nn.Parameter(torch.randn(vector_len, d_attn, dtype=DTYPE) * scale)
        self.key_proj = nn.Parameter(torch.randn(vector_len, d_attn, dtype=DTYPE) * scale)
        self.bilinear = nn.Parameter(torch.randn(d_attn, d_attn, dtype=DTYPE) / d_attn)
        self.bias = nn.Parameter(torch.zeros(regions, regions, dtype=DTYPE))

    def project(self, vectors: torch.Tensor):
        return vectors @ self.query_proj, vectors @ self.key_proj

    def scores(self, vectors: torch.Tensor, variant: str = "printed") -> torch.Tensor:
        with torch.no_grad():
            q, k = self.project(vectors)
            return importance_scores(q, k, variant)

    def forward(self, vectors: torch.Tensor, dominant: torch.Tensor) -> torch.Tensor:
        """``vectors``: [..., R, vector_len]; ``dominant``: bool [..., R]. Returns [..., R, R]."""
        if vectors.shape[-2:] != (self.regions, self.vector_len):
            raise ShapeError(f"expected [..., {self.regions}, {self.vector_len}], got {tuple(vectors.shape)}")
        q, k = self.project(vectors)
        raw = torch.tanh(q @ self.bilinear @ k.transpose(-1, -2) + self.bias)
        # non-dominant rows are zero before the softmax and so become uniform
        raw = raw * dominant.unsqueeze(-1).to(raw.dtype)
        return masked_softmax(raw, dim=-1)


def _as_mask(dominant, r: int) -> torch.Tensor:
    if isinstance(dominant, torch.Tensor) and dominant.dtype == torch.bool:
        return dominant
    mask = torch.zeros(r, dtype=torch.bool)
    idx = list(dominant)
    if any(not 0 <= i < r for i in idx):
        raise ShapeError("dominant index out of range")
    mask[idx] = True
    return mask


def origin_vectors(x: torch.Tensor) -> torch.Tensor:
    """[..., N, N', F] -> [..., N, N'*F]."""
    return x.reshape(*x.shape[:-2], x.shape[-2] * x.shape[-1])


def destination_vectors(x: torch.Tensor) -> torch.Tensor:
    """[..., N, N', F] -> [..., N', N*F]."""
    y = x.transpose(-3, -2)
    return y.reshape(*y.shape[:-2], y.shape[-2] * y.shape[-1])


def origin_attention(x, p: RegionAttention, dominant) -> torch.Tensor:
    """Row-stochastic [N, N] origin coefficients for an OD matrix ``x`` [N, N', F]."""
    x = as_tensor(x)
    if x.dim() != 3:
        raise ShapeError("origin_attention expects [N, N', F]")
    return p(origin_vectors(x), _as_mask(dominant, x.shape[0]))


def destination_attention(y, p: RegionAttention, dominant) -> torch.Tensor:
    """Row-stochastic [N', N'] destination coefficients for destination vectors ``y`` [N', N, F]."""
    y = as_tensor(y)
    if y.dim() != 3:
        raise ShapeError("destination_attention expects [N', N, F]")
    return p(origin_vectors(y), _as_mask(dominant, y.shape[0]))


def od_attention_apply(m, omega, delta) -> torch.Tensor:
    """``omega @ M @ delta`` per feature slice; ``m`` is [..., N, N', F] (or [N, N'])."""
    m, omega, delta = as_tensor(m), as_tensor(omega), as_tensor(delta)
    if m.dim() == 2:
        return omega @ m @ delta
    if omega.shape[-1] != m.shape[-3] or delta.shape[-2] != m.shape[-2]:
        raise ShapeError("attention matrices do not match the OD matrix")
    return torch.einsum("...ab,...bcf,...cd->...adf", omega, m, delta)


# --- 2D graph convolution ------------------------------------------------------


def normalized_laplacian(g: RegionGraph) -> np.ndarray:
    a = np.asarray(g.adjacency, dtype=np.float64)
    if not np.allclose(a, a.T, rtol=0, atol=1e-12):
        raise DataError("adjacency must be symmetric")
    deg = a.sum(axis=1)
    with np.errstate(divide="ignore"):
        d_inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(a.shape[0]) - d_inv_sqrt[:, None] * a * d_inv_sqrt[None, :]


def largest_eigenvalue(m: np.ndarray, iters: int = 1000, tol: float = 1e-12, seed: int = 0) -> float:
    """Power iteration with Rayleigh-quotient estimate; ``m`` symmetric PSD."""
    n = m.shape[0]
    v = np.random.default_rng(seed).uniform(0.5, 1.5, size=n)
    v /= np.linalg.norm(v)
    lam = float(v @ m @ v)
    for _ in range(iters):
        w = m @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return 0.0
        v = w / norm
        new = float(v @ m @ v)
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    return lam


def scaled_laplacian(g: RegionGraph) -> np.ndarray:
    """``2 L / lambda_max - I`` for the symmetric normalized Laplacian ``L``."""
    lap = normalized_laplacian(g)
    lam = largest_eigenvalue(lap)
    if lam <= 0:
        lam = 1.0
    return 2.0 * lap / lam - np.eye(lap.shape[0])


def gcn2d_forward(h, t_origin, t_dest, weights, activation=torch.tanh) -> torch.Tensor:
    """``act(sum_ij T_i(L_o) H T_j(L_d) W_ij)``.

    ``h``: [..., N, N', F_in]; ``t_origin``: [K, N, N]; ``t_dest``: [K, N', N'];
    ``weights``: [K, K, F_in, F_out]. ``activation=None`` gives the linear map.
    """
    h = as_tensor(h)
    t_origin = torch.stack([as_tensor(t) for t in t_origin]) if isinstance(t_origin, (list, tuple)) else as_tensor(t_origin)
    t_dest = torch.stack([as_tensor(t) for t in t_dest]) if isinstance(t_dest, (list, tuple)) else as_tensor(t_dest)
    k = weights.shape[0]
    if t_origin.shape[0] != k or t_dest.shape[0] != k or weights.shape[1] != k:
        raise ShapeError("Chebyshev stacks and weights disagree on the order K")
    if h.shape[-3] != t_origin.shape[-1] or h.shape[-2] != t_dest.shape[-1] or h.shape[-1] != weights.shape[2]:
        raise ShapeError(f"input of shape {tuple(h.shape)} does not match graphs/weights")
    left = torch.einsum("iab,...bcf->...iacf", t_origin, h)
    both = torch.einsum("...iacf,jcd->...ijadf", left, t_dest)
    out = torch.einsum("...ijadf,ijfg->...adg", both, weights)
    return out if activation is None else activation(out)


class GCN2D(nn.Module):
    def __init__(self, origin_graph: RegionGraph, destination_graph: RegionGraph, order: int,
                 f_in: int = 1, f_out: int = 1, activation: str | None = "tanh"):
        super().__init__()
        self.order = order
        self.activation = activation
        self.register_buffer("t_origin", torch.stack([as_tensor(t) for t in chebyshev_stack(scaled_laplacian(origin_graph), order)]))
        self.register_buffer("t_dest", torch.stack([as_tensor(t) for t in chebyshev_stack(scaled_laplacian(destination_graph), order)]))
        w = torch.randn(order, order, f_in, f_out, dtype=DTYPE) * (0.1 / order)
        if f_in == f_out:
            w[0, 0] += torch.eye(f_in, dtype=DTYPE)
        self.weights = nn.Parameter(w)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        act = torch.tanh if self.activation == "tanh" else None
        return gcn2d_forward(h, self.t_origin, self.t_dest, self.weights, act)


def combine_spatial(m_gcn, m_att, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return m_gcn
    if alpha == 1.0:
        return m_att
    return (1.0 - alpha) * m_gcn + alpha * m_att


# --- full spatial module -------------------------------------------------------


class SpatialModule(nn.Module):
    """Per-timestep spatial block: ``(1 - alpha) * GCN2D(M) + alpha * Omega M Delta``.

    ``forward`` takes ``[..., T, N, N', F]`` and re-selects dominant queries
    only at timesteps ``t % dominant_refresh == 0``; in between the last
    selection is reused.
    """

    def __init__(self, n: int, n_prime: int, f: int, origin_graph: RegionGraph,
                 destination_graph: RegionGraph, config: SpatialConfig):
        super().__init__()
        self.n, self.n_prime, self.f = n, n_prime, f
        self.config = config
        self.origin = RegionAttention(n, n_prime * f, config.d_attn)
        self.destination = RegionAttention(n_prime, n * f, config.d_attn)
        self.gcn = GCN2D(origin_graph, destination_graph, config.chebyshev_order, f, f)
        self.refresh_count = 0

    def select(self, x: torch.Tensor):
        """Dominant masks for origin and destination sides of ``x`` [..., N, N', F]."""
        v = self.config.importance
        so = self.origin.scores(origin_vectors(x), v)
        sd = self.destination.scores(destination_vectors(x), v)
        return dominant_mask(so), dominant_mask(sd)

    def attention(self, x: torch.Tensor, mask_o: torch.Tensor, mask_d: torch.Tensor) -> torch.Tensor:
        omega = self.origin(origin_vectors(x), mask_o)
        delta = self.destination(destination_vectors(x), mask_d)
        return od_attention_apply(x, omega, delta)

    def forward(self, x: torch.Tensor, refresh=None) -> torch.Tensor:
        """``refresh`` overrides the configured cadence: an int, or a LongTensor
        with one cadence per leading batch item of ``x`` [B, T, N, N', F]."""
        refresh = self.config.dominant_refresh if refresh is None else refresh
        if x.shape[-3:] != (self.n, self.n_prime, self.f):
            raise ShapeError(f"expected [..., T, {self.n}, {self.n_prime}, {self.f}], got {tuple(x.shape)}")
        alpha = self.config.alpha
        if alpha == 0.0:
            return self.gcn(x)
        t_len = x.shape[-4]
        steps = torch.arange(t_len)
        mask_o, mask_d = self.select(x)
        if isinstance(refresh, torch.Tensor):
            if x.dim() != 5 or refresh.shape != (x.shape[0],):
                raise ShapeError("per-item refresh needs x of shape [B, T, N, N', F] and one cadence per item")
            anchors = steps[None, :] - steps[None, :] % refresh[:, None]
            mask_o = torch.gather(mask_o, 1, anchors[..., None].expand(-1, -1, self.n))
            mask_d = torch.gather(mask_d, 1, anchors[..., None].expand(-1, -1, self.n_prime))
            self.refresh_count += int(sum(len(range(0, t_len, int(r))) for r in refresh))
        else:
            anchors = steps - steps % refresh
            mask_o, mask_d = mask_o[..., anchors, :], mask_d[..., anchors, :]
            self.refresh_count += len(range(0, t_len, refresh))
        m_att = self.attention(x, mask_o, mask_d)
        if alpha == 1.0:
            return m_att
        return combine_spatial(self.gcn(x), m_att, alpha)


def spatial_module_forward(m, module: SpatialModule, step_index: int, cache: dict | None) -> torch.Tensor:
    """Process one OD matrix [N, N', F] at position ``step_index`` of a sequence.

    ``cache`` holds the dominant selections between refresh points and counts
    recomputations in ``cache["recomputations"]``. Passing no cache on a
    non-refresh step is a contract violation.
    """
    x = as_tensor(m)
    refresh = module.config.dominant_refresh
    if module.config.alpha == 0.0:
        return module.gcn(x)
    if step_index % refresh == 0:
        if cache is None:
            cache = {}
        cache["origin"], cache["destination"] = module.select(x)
        cache["recomputations"] = cache.get("recomputations", 0) + 1
    elif cache is None or "origin" not in cache:
        raise ContractError(f"step {step_index} is not a refresh step and no dominant cache was given")
    m_att = module.attention(x, cache["origin"], cache["destination"])
    if module.config.alpha == 1.0:
        return m_att
    return combine_spatial(module.gcn(x), m_att, module.config.alpha)
