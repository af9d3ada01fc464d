"""Probability-simplex primitives.

Distributions are plain 1-D float64 numpy arrays. :func:`as_distribution`
is the single validation point: it checks non-negativity, renormalizes
when the sum is within :data:`SUM_TOL` of one and rejects anything else.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateVectorError, InvalidInputError

SUM_TOL = 1e-9


def _as_real_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidInputError("expected a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("vector has non-finite entries")
    return arr


def is_distribution(w, tol: float = SUM_TOL) -> bool:
    arr = np.asarray(w, dtype=np.float64)
    return bool(
        arr.ndim == 1
        and arr.size > 0
        and np.all(np.isfinite(arr))
        and np.all(arr >= 0)
        and abs(arr.sum() - 1.0) <= tol
    )


def as_distribution(weights) -> np.ndarray:
    """Validate ``weights`` as a point of the simplex and return a copy.

    Raises:
        InvalidInputError: negative entries, or a sum further than 1e-9 from 1.
    """
    arr = _as_real_vector(weights).copy()
    if np.any(arr < 0):
        raise InvalidInputError("distribution has negative weights")
    total = arr.sum()
    if abs(total - 1.0) > SUM_TOL:
        raise InvalidInputError(f"weights sum to {total!r}, not 1")
    return arr / total


def uniform(size: int) -> np.ndarray:
    if size < 1:
        raise InvalidInputError("size must be positive")
    return np.full(size, 1.0 / size)


def point_mass(size: int, index: int) -> np.ndarray:
    d = np.zeros(size)
    d[index] = 1.0
    return d


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto the probability simplex.

    Sort-and-threshold: with ``u`` sorted descending, the threshold is
    ``(sum(u[:k]) - 1) / k`` for the largest ``k`` where it stays below
    ``u[k-1]``.
    """
    y = _as_real_vector(v)
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, y.size + 1)
    k = ks[u - css / ks > 0][-1]
    tau = css[k - 1] / k
    return np.maximum(y - tau, 0.0)


def truncate_normalize(v) -> np.ndarray:
    """Clamp negatives to zero and rescale to unit sum.

    Raises:
        DegenerateVectorError: when no entry is positive.
    """
    y = np.maximum(_as_real_vector(v), 0.0)
    total = y.sum()
    if total <= 0:
        raise DegenerateVectorError("no positive entries to normalize")
    return y / total


def sample_categorical(d, rng: np.random.Generator, count: int) -> np.ndarray:
    """Draw ``count`` i.i.d. indices from distribution ``d``.

    Inverse-CDF sampling on ``rng.random``, so a given generator state
    always yields the same index sequence.
    """
    p = as_distribution(d)
    if count < 1:
        raise InvalidInputError("count must be positive")
    cdf = np.cumsum(p)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, rng.random(count), side="right")
    # guard against landing on trailing zero-probability entries
    last = np.flatnonzero(p)[-1]
    return np.minimum(idx, last).astype(np.int64)
