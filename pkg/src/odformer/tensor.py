"""Dense numeric primitives used throughout the package.

Tensors are ``torch.Tensor`` objects in float64; differentiable parameters are
``torch.nn.Parameter`` instances registered on modules, so their identifier is
the dotted name from ``Module.named_parameters()``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch

from .exceptions import ContractError, LengthError, ShapeError

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def softmax_rows(m) -> torch.Tensor:
    """Row-wise softmax of a rank-2 tensor with max-subtraction."""
    m = as_tensor(m)
    if m.dim() != 2:
        raise ShapeError(f"softmax_rows expects a rank-2 tensor, got shape {tuple(m.shape)}")
    if m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError("softmax_rows got an empty dimension")
    return masked_softmax(m, dim=-1)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor | None = None, dim: int = -1) -> torch.Tensor:
    """Softmax along ``dim``; entries where ``mask`` is False get exactly zero weight.

    Every slice must keep at least one unmasked entry.
    """
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    shift = scores.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(scores - shift)
    return e / e.sum(dim=dim, keepdim=True)


def autocorrelation_fft(s) -> np.ndarray:
    """Circular autocorrelation ``R[P] = (1/L) sum_t s[t] s[(t-P) mod L]``.

    Computed as irfft(|rfft(s)|^2) / L; numpy's FFT handles any length exactly,
    so no padding is needed for non power-of-two inputs.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError("autocorrelation_fft expects a vector")
    n = s.shape[0]
    if n < 2:
        raise LengthError(f"autocorrelation needs at least 2 samples, got {n}")
    spec = np.fft.rfft(s)
    return np.fft.irfft(spec * np.conj(spec), n=n) / n


def chebyshev_stack(lap, k: int) -> list:
    """Chebyshev polynomials ``[T_0(l), ..., T_{k-1}(l)]`` of a square matrix.

    Works on numpy arrays and torch tensors alike.
    """
    if k < 1:
        raise ValueError("chebyshev order must be >= 1")
    if lap.ndim != 2 or lap.shape[0] != lap.shape[1]:
        raise ShapeError(f"chebyshev_stack expects a square matrix, got shape {tuple(lap.shape)}")
    n = lap.shape[0]
    if isinstance(lap, torch.Tensor):
        eye = torch.eye(n, dtype=lap.dtype)
    else:
        eye = np.eye(n)
    out = [eye]
    if k > 1:
        out.append(lap)
    for _ in range(2, k):
        out.append(2 * lap @ out[-1] - out[-2])
    return out


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` of every parameter reachable from a scalar loss.

    Gradients accumulate; call ``module.zero_grad(set_to_none=False)`` first to
    start from zero.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise ContractError("backward() needs a scalar loss")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any differentiable parameter")
    loss.reshape(()).backward()


def finite_difference_check(
    f: Callable[[], torch.Tensor],
    p: torch.nn.Parameter,
    eps: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between the autograd gradient of ``f`` w.r.t. ``p``
    and central differences.

    ``f`` takes no arguments and reads ``p`` (and anything else) from its
    closure; it must be deterministic, otherwise the result is meaningless.
    Relative error per coordinate is ``|a - d| / max(|a|, |d|, 1e-8)``.
    ``indices`` restricts the check to a subset of flat coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if p.grad is not None:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = p.grad.detach().reshape(-1).clone() if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
    p.grad = None

    flat = p.data.view(-1)
    coords = range(flat.numel()) if indices is None else indices
    worst = 0.0
    with torch.no_grad():
        for idx in coords:
            orig = flat[idx].item()
            flat[idx] = orig + eps
            f_plus = f().item()
            flat[idx] = orig - eps
            f_minus = f().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            a = analytic[idx].item()
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def assert_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise ContractError(f"{what} contains non-finite values")
    return t
