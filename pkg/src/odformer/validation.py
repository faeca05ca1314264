"""Input checks shared by the estimator layer and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .exceptions import LengthError, ShapeError


def check_od_array(x, *, name: str = "X", allow_nan: bool = False, batched: bool | None = False) -> np.ndarray:
    """Return ``x`` as a float64 OD array with an explicit feature axis.

    ``batched=False`` expects ``[T, N, N']`` or ``[T, N, N', F]``;
    ``batched=True`` expects ``[B, T, N, N']`` or ``[B, T, N, N', F]``;
    ``batched=None`` accepts either and never adds a batch axis.
    """
    arr = check_array(np.asarray(x, dtype=np.float64), allow_nd=True, ensure_2d=False, dtype=np.float64,
                      ensure_all_finite="allow-nan" if allow_nan else True, input_name=name, copy=False)
    ranks = {False: (3, 4), True: (4, 5), None: (3, 4, 5)}[batched]
    if arr.ndim not in ranks:
        raise ShapeError(f"{name} must have rank {' or '.join(map(str, ranks))}, got shape {arr.shape}")
    if batched is False and arr.ndim == 3:
        arr = arr[..., None]
    elif batched is True and arr.ndim == 4:
        arr = arr[..., None]
    return arr


def check_nonnegative(x: np.ndarray, name: str = "X") -> None:
    if np.nanmin(x, initial=0.0) < 0:
        raise ValueError(f"{name} contains negative flows")


def check_region_dims(x: np.ndarray, n: int, n_prime: int, f: int, name: str = "X") -> None:
    if tuple(x.shape[-3:]) != (n, n_prime, f):
        raise ShapeError(f"{name} has OD dimensions {tuple(x.shape[-3:])}, expected {(n, n_prime, f)}")


def check_length(x: np.ndarray, minimum: int, name: str = "X", axis: int = 0) -> None:
    if x.shape[axis] < minimum:
        raise LengthError(f"{name} has {x.shape[axis]} timesteps, at least {minimum} are required")
