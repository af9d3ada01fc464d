"""Post-hoc analysis of estimates and likelihood surfaces.

Uniqueness of the MLE is decided by a rank test: the MLE is unique when no
non-zero row vector ``v`` with ``sum(v) = 0`` satisfies ``v G' = 0``, where
``G'`` is ``G`` with duplicate columns removed. Using every distinct column
is the largest column subset, so if any subset certifies uniqueness this one
does too.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .errors import InvalidInputError
from .likelihood import log_likelihood
from .simplex import SUM_TOL


@dataclass(frozen=True)
class UniquenessReport:
    unique: bool
    rank: int
    required_rank: int
    witness: tuple[np.ndarray, np.ndarray] | None = None

    def __str__(self) -> str:
        lines = [
            f"unique: {str(self.unique).lower()}",
            f"rank: {self.rank}",
            f"required_rank: {self.required_rank}",
        ]
        if self.witness is not None:
            theta, phi = self.witness
            fmt = lambda a: " ".join(f"{v:.12g}" for v in a)  # noqa: E731
            lines += [f"witness_theta: {fmt(theta)}", f"witness_phi: {fmt(phi)}"]
        return "\n".join(lines)


def check_uniqueness(g, tol: float = 1e-9) -> UniquenessReport:
    """Rank test for MLE uniqueness on the columns of ``g``.

    ``[G' | 1]`` must have rank ``|X|``; singular values below
    ``tol * s_max`` count as zero. Otherwise a left null vector ``v`` gives
    two distinct distributions ``u +/- c v`` around uniform ``u`` with
    identical output probabilities on every observed column.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.size == 0:
        raise InvalidInputError("G must be a non-empty matrix")
    n_inputs = g.shape[0]
    distinct = np.unique(g.T, axis=0).T
    aug = np.column_stack([distinct, np.ones(n_inputs)])
    u_mat, sv, _ = np.linalg.svd(aug)
    rank = int(np.sum(sv > tol * sv[0]))
    if rank == n_inputs:
        return UniquenessReport(True, rank, n_inputs)
    v = u_mat[:, -1]
    # v is orthogonal to the ones column up to round-off; remove the residue
    v = v - v.mean()
    v /= np.abs(v).max()
    c = 1.0 / n_inputs
    base = np.full(n_inputs, 1.0 / n_inputs)
    theta = np.maximum(base + c * v, 0.0)
    phi = np.maximum(base - c * v, 0.0)
    return UniquenessReport(False, rank, n_inputs, (theta / theta.sum(), phi / phi.sum()))


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise InvalidInputError("distributions must have equal length")
    return p, q


def total_variation(p, q) -> float:
    """Half the L1 distance; lies in [0, 1] for distributions."""
    p, q = _pair(p, q)
    return 0.5 * float(np.abs(p - q).sum())


def kl_divergence(p, q) -> float:
    """``sum_x p_x ln(p_x / q_x)``; +inf when ``p`` charges a zero of ``q``."""
    p, q = _pair(p, q)
    pos = p > 0
    if np.any(q[pos] <= 0):
        return math.inf
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


EMD_DUST = 1e-15


def emd(p, q, ground) -> float:
    """Exact earth mover's distance under ground-cost table ``ground``.

    Solves the transportation LP restricted to the supports of ``p`` and
    ``q`` with HiGHS.
    """
    p, q = _pair(p, q)
    ground = np.asarray(ground, dtype=np.float64)
    if ground.shape != (p.size, p.size):
        raise InvalidInputError("ground table must be |X| x |X|")
    if abs(p.sum() - q.sum()) > SUM_TOL:
        raise InvalidInputError("distributions carry different total mass")
    # mass already in place costs nothing; only the excess has to move
    common = np.minimum(p, q)
    ps, qs = p - common, q - common
    # excess below EMD_DUST is round-off; dropping it shifts the result by at
    # most diameter * EMD_DUST * |X| and keeps the LP small
    src = np.flatnonzero(ps > EMD_DUST)
    dst = np.flatnonzero(qs > EMD_DUST)
    if src.size == 0 or dst.size == 0:
        return 0.0
    cost = ground[np.ix_(src, dst)]
    ns, nd = src.size, dst.size
    flow = np.arange(ns * nd)
    rows_eq = sparse.coo_matrix(
        (np.ones(2 * ns * nd), (np.concatenate([flow // nd, ns + flow % nd]), np.tile(flow, 2))),
        shape=(ns + nd, ns * nd),
    ).tocsr()
    # HiGHS presolve reported some feasible transport problems with a wide
    # spread of masses as infeasible, so it is switched off. Both sides are
    # rescaled to total ns + nd, which keeps entries near 1 for the absolute
    # tolerances and balances the round-off difference between the totals.
    scale = (ns + nd) / ps[src].sum()
    b = np.concatenate([ps[src] * scale, qs[dst] * (ns + nd) / qs[dst].sum()])
    res = linprog(cost.ravel(), A_eq=rows_eq, b_eq=b, bounds=(0, None), method="highs",
                  options={"presolve": False})
    if not res.success:
        raise InvalidInputError(f"transport problem failed: {res.message}")
    return float(res.fun) / scale


def line_ground(size: int) -> np.ndarray:
    """``|i - j|`` ground metric for points on a unit-spaced line."""
    idx = np.arange(size)
    return np.abs(idx[:, None] - idx[None, :]).astype(np.float64)


def types_bound(k: int, z_size: int, delta: float) -> float:
    """``(1 + k)^|Z| * 2^(-k delta)``: bound on P(D_KL(q_hat || a) > delta), KL in bits."""
    if k < 1 or z_size < 1 or not delta > 0:
        raise InvalidInputError("k, |Z| and delta must be positive")
    return math.exp(z_size * math.log1p(k) - k * delta * math.log(2))


@dataclass(frozen=True)
class SurfacePoint:
    theta1: float
    theta3: float
    value: float


def likelihood_surface(g, resolution: int, counts=None) -> list[SurfacePoint]:
    """Sample ``L`` on a triangular grid over 3-input distributions.

    ``theta = (theta1, 1 - theta1 - theta3, theta3)`` with both free weights
    stepping by ``1 / (resolution - 1)``. Cells where ``L = -inf`` keep that
    value.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != 3:
        raise InvalidInputError("likelihood surface needs exactly 3 inputs")
    if resolution < 2:
        raise InvalidInputError("resolution must be at least 2")
    step = 1.0 / (resolution - 1)
    points = []
    for i in range(resolution):
        for j in range(resolution - i):
            t1, t3 = i * step, j * step
            theta = np.array([t1, max(0.0, 1.0 - t1 - t3), t3])
            points.append(SurfacePoint(t1, t3, log_likelihood(theta, g, counts)))
    return points


def surface_to_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theta1", "theta3", "L"])
        for pt in points:
            w.writerow([repr(pt.theta1), repr(pt.theta3), repr(pt.value)])

