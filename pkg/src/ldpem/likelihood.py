"""Statistical core of the local privacy model.

Each user ``i`` reports a vector of observables, each produced by some known
mechanism from the same hidden input. The outputs probability matrix ``G``
(``|X| x n``) holds ``g[x, i] = P(observed vector of user i | X^i = x)``.
Everything else here is a function of ``theta`` and ``G``:

* log-likelihood ``L(theta) = sum_i log sum_x theta_x g[x, i]``
* posterior responsibilities ``P(X^i = x | z^i; theta)``
* the EM surrogate ``Q(theta | theta')`` and its complement ``H``.

Functions accept an optional ``counts`` vector of column multiplicities so a
matrix with duplicated columns can be passed once in compressed form (see
:func:`compress_columns`); results are identical to the expanded matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import xlogy

from .errors import InfeasibleError, InvalidInputError
from .mechanisms import Mechanism


@dataclass(frozen=True)
class ObservationRecord:
    """One user's output vector: ``(observable index, mechanism id)`` pairs."""

    observables: tuple
    user_index: int = 0

    def __post_init__(self):
        obs = tuple((int(z), str(mid)) for z, mid in self.observables)
        if not obs:
            raise InvalidInputError("an observation record needs at least one observable")
        object.__setattr__(self, "observables", obs)


def records_from_observables(zs: Sequence[int], mech_id: str) -> list[ObservationRecord]:
    """One single-observable record per entry of ``zs``, all under ``mech_id``."""
    return [ObservationRecord(((z, mech_id),), i) for i, z in enumerate(zs)]


def build_g(records: Sequence[ObservationRecord], registry: Mapping[str, Mechanism]) -> np.ndarray:
    """Outputs probability matrix: ``g[x, i] = prod_j a^{ij}[x, z^i_j]``."""
    if not records:
        raise InvalidInputError("no observation records")
    n_inputs = None
    cols = []
    for rec in records:
        col = None
        for z, mid in rec.observables:
            try:
                mech = registry[mid]
            except KeyError:
                raise InvalidInputError(f"unknown mechanism id {mid!r}") from None
            if n_inputs is None:
                n_inputs = mech.n_inputs
            elif mech.n_inputs != n_inputs:
                raise InvalidInputError("mechanisms disagree on the input space size")
            c = mech.column(z)
            col = c.copy() if col is None else col * c
        cols.append(col)
    return np.column_stack(cols)


def compress_columns(g, counts=None) -> tuple[np.ndarray, np.ndarray]:
    """Merge identical columns of ``g``, summing their multiplicities.

    Column order in the result follows first appearance.
    """
    g = np.asarray(g, dtype=np.float64)
    w = _counts(g, counts)
    uniq, first, inverse = np.unique(g.T, axis=0, return_index=True, return_inverse=True)
    merged = np.bincount(inverse.ravel(), weights=w, minlength=uniq.shape[0])
    order = np.argsort(first)
    return uniq[order].T.copy(), merged[order]


def _counts(g: np.ndarray, counts) -> np.ndarray:
    if counts is None:
        return np.ones(g.shape[1])
    w = np.asarray(counts, dtype=np.float64)
    if w.shape != (g.shape[1],) or np.any(w < 0):
        raise InvalidInputError("counts must be non-negative, one per column")
    return w


def _check_dims(theta, g) -> tuple[np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or theta.shape != (g.shape[0],):
        raise InvalidInputError(
            f"theta of shape {theta.shape} does not match G of shape {g.shape}"
        )
    return theta, g


def column_sums(theta, g) -> np.ndarray:
    """Inner sums ``sum_x theta_x g[x, i]`` for every column."""
    theta, g = _check_dims(theta, g)
    return theta @ g


def log_likelihood(theta, g, counts=None) -> float:
    """``sum_i log sum_x theta_x g[x, i]``; ``-inf`` when any inner sum is zero."""
    theta, g = _check_dims(theta, g)
    w = _counts(g, counts)
    s = theta @ g
    active = w > 0
    if np.any(s[active] <= 0):
        return -np.inf
    return float(np.dot(w[active], np.log(s[active])))


def posteriors(theta, g) -> np.ndarray:
    """Matrix of ``P(X^i = x | z^i; theta)``, shape ``|X| x n``."""
    theta, g = _check_dims(theta, g)
    s = theta @ g
    if np.any(s <= 0):
        raise InfeasibleError("theta gives zero probability to an observed output")
    return theta[:, None] * g / s[None, :]


def posterior(theta, g, i: int) -> np.ndarray:
    """Posterior over inputs for user ``i``."""
    theta, g = _check_dims(theta, g)
    col = g[:, i]
    s = float(theta @ col)
    if s <= 0:
        raise InfeasibleError(f"theta gives zero probability to the output of user {i}")
    return theta * col / s


def expected_counts(theta_prev, g, counts=None) -> np.ndarray:
    """``psi_x = sum_i w_i P(X^i = x | z^i; theta_prev)``."""
    theta_prev, g = _check_dims(theta_prev, g)
    return posteriors(theta_prev, g) @ _counts(g, counts)


def q_value(theta, theta_prev, g, counts=None) -> float:
    """Expected complete-data log-likelihood ``Q(theta | theta_prev)``.

    Equals ``sum_x psi_x log theta_x + K(theta_prev)`` with
    ``K = sum_i sum_x P(x | z^i; theta_prev) log g[x, i]``. ``K`` is kept so
    that ``Q + H = L`` holds exactly.

    Raises:
        InfeasibleError: ``L(theta_prev) = -inf``.
    """
    theta, g = _check_dims(theta, g)
    w = _counts(g, counts)
    post = posteriors(theta_prev, g)
    psi = post @ w
    k_term = float(np.sum(xlogy(post, g) @ w))
    return float(np.sum(xlogy(psi, theta))) + k_term


def h_value(theta, theta_prev, g, counts=None) -> float:
    """``H(theta | theta_prev) = -sum_i sum_x P(x|z^i;theta_prev) log P(x|z^i;theta)``."""
    theta, g = _check_dims(theta, g)
    w = _counts(g, counts)
    post_prev = posteriors(theta_prev, g)
    s = theta @ g
    safe = np.where(s > 0, s, 1.0)
    post = np.where(s[None, :] > 0, theta[:, None] * g / safe[None, :], 0.0)
    return float(-np.sum(xlogy(post_prev, post) @ w))
