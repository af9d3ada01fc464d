"""Distribution reconstruction from obfuscated observations.

The main estimator is the EM iteration over an outputs probability matrix
``G``::

    theta'_x = (1/n) sum_i theta_x g[x, i] / sum_u theta_u g[u, i]

run from a fully supported start until successive log-likelihoods differ by
less than ``delta``. It covers the IBU (one fixed mechanism, one observable
per user), users with individual mechanisms, and users reporting several
observables. The matrix-inversion baselines INV-N (truncate and normalize)
and INV-P (simplex projection) are here as well, plus the closed-form MLE
set for a single input.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    InfeasibleError,
    InvalidInputError,
    NonIdentifiableError,
    NotInvertibleError,
)
from .likelihood import compress_columns
from .mechanisms import Mechanism, rappor_keep_probability
from .simplex import as_distribution, project_to_simplex, truncate_normalize, uniform

MAX_CONDITION = 1e12


@dataclass(frozen=True)
class EmConfig:
    """Stopping rule and starting point for :func:`em_estimate`.

    ``theta0=None`` means the uniform distribution.
    """

    delta: float = 1e-10
    max_iters: int = 1_000_000
    theta0: np.ndarray | None = None

    def __post_init__(self):
        if not self.delta > 0:
            raise InvalidInputError("delta must be positive")
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be positive")
        if self.theta0 is not None:
            t0 = as_distribution(self.theta0)
            if np.any(t0 <= 0):
                raise InvalidInputError(
                    "starting distribution must give every input positive probability; "
                    "a zero component stays zero for every later iterate"
                )
            object.__setattr__(self, "theta0", t0)


@dataclass
class EmTrace:
    estimate: np.ndarray
    log_likelihoods: np.ndarray
    iterations: int
    converged: bool
    tv_steps: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_csv(self, path) -> None:
        """Columns: iteration, log_likelihood, tv_to_previous (empty at t=0)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "log_likelihood", "tv_to_previous"])
            for t, ll in enumerate(self.log_likelihoods):
                tv = "" if t == 0 else repr(float(self.tv_steps[t - 1]))
                w.writerow([t, repr(float(ll)), tv])


@dataclass(frozen=True)
class EmpiricalDistribution:
    """Observed output frequencies ``q_z = counts_z / n``."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 1 or c.size == 0 or np.any(c < 0):
            raise InvalidInputError("counts must be a non-empty non-negative vector")
        if c.sum() <= 0:
            raise InvalidInputError("no observations")
        object.__setattr__(self, "counts", c.astype(np.float64))

    @classmethod
    def from_observations(cls, zs, size: int) -> "EmpiricalDistribution":
        zs = np.asarray(zs, dtype=np.int64)
        if zs.size and (zs.min() < 0 or zs.max() >= size):
            raise InvalidInputError("observable index outside output space")
        return cls(np.bincount(zs, minlength=size))

    @property
    def n(self) -> float:
        return float(self.counts.sum())

    @property
    def q(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def _as_q(q) -> np.ndarray:
    if isinstance(q, EmpiricalDistribution):
        return q.q
    return as_distribution(q)


def em_estimate(g, cfg: EmConfig | None = None, counts=None) -> EmTrace:
    """Run the EM iteration on outputs probability matrix ``g``.

    Args:
        g: ``|X| x n`` matrix, column ``i`` is ``P(z^i | x)``.
        cfg: stopping rule and start; defaults to :class:`EmConfig`.
        counts: optional multiplicity of each column, for compressed input.

    Returns:
        The trace. ``converged`` is False when ``max_iters`` ran out first.

    Raises:
        InfeasibleError: the start gives zero probability to some column.
    """
    cfg = cfg or EmConfig()
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[1] == 0:
        raise InvalidInputError("G must be a matrix with at least one column")
    w = np.ones(g.shape[1]) if counts is None else np.asarray(counts, dtype=np.float64)
    if w.shape != (g.shape[1],) or np.any(w < 0):
        raise InvalidInputError("counts must be non-negative, one per column")
    active = w > 0
    g, w = g[:, active], w[active]
    total = w.sum()
    if cfg.theta0 is None:
        theta = uniform(g.shape[0])
    else:
        if cfg.theta0.shape != (g.shape[0],):
            raise InvalidInputError("theta0 length does not match G")
        theta = cfg.theta0.copy()

    s = theta @ g
    if np.any(s <= 0):
        raise InfeasibleError("starting distribution has log-likelihood -inf")
    ll = float(w @ np.log(s))
    lls = [ll]
    tvs = []
    converged = False
    t = 0
    while t < cfg.max_iters:
        nxt = theta * (g @ (w / s)) / total
        nxt /= nxt.sum()
        s = nxt @ g
        new_ll = float(w @ np.log(s))
        tvs.append(0.5 * float(np.abs(nxt - theta).sum()))
        lls.append(new_ll)
        theta = nxt
        t += 1
        if abs(new_ll - ll) < cfg.delta:
            converged = True
            break
        ll = new_ll
    return EmTrace(theta, np.array(lls), t, converged, np.array(tvs))


def mechanism_g(mech: Mechanism, q) -> tuple[np.ndarray, np.ndarray]:
    """Compressed ``G`` for users sharing ``mech``: observed columns plus counts."""
    counts = q.counts if isinstance(q, EmpiricalDistribution) else np.asarray(q, dtype=np.float64)
    if counts.shape != (mech.n_outputs,):
        raise InvalidInputError("empirical distribution does not match mechanism outputs")
    seen = np.flatnonzero(counts > 0)
    return mech.probs[:, seen], counts[seen]


def ibu(mech: Mechanism, q, cfg: EmConfig | None = None) -> EmTrace:
    """EM for a single shared mechanism, fed by the empirical output counts."""
    g, w = mechanism_g(mech, q)
    return em_estimate(g, cfg, counts=w)


def empirical_start(q, mech: Mechanism) -> np.ndarray:
    """Use the empirical distribution itself as EM start (square mechanisms only).

    Raises:
        InvalidInputError: the empirical distribution has a zero entry. Such an
            input would be excluded from every later iterate.
    """
    qv = _as_q(q)
    if mech.n_inputs != mech.n_outputs or qv.size != mech.n_inputs:
        raise InvalidInputError("empirical start needs a square mechanism")
    if np.any(qv <= 0):
        raise InvalidInputError(
            "empirical start is only valid when every observable was seen; "
            "zero entries would stay zero for the whole run"
        )
    return qv


def ibu_step(theta, mech: Mechanism, q) -> np.ndarray:
    """One update ``theta'_x = sum_z q_z theta_x a_xz / sum_u theta_u a_uz``."""
    theta = as_distribution(theta)
    qv = _as_q(q)
    if theta.size != mech.n_inputs or qv.size != mech.n_outputs:
        raise InvalidInputError("theta or q does not match mechanism shape")
    out = np.zeros_like(theta)
    support = theta > 0
    for z in np.flatnonzero(qv > 0):
        a = mech.probs[:, z]
        denom = float(theta @ a)
        if denom <= 0:
            raise InfeasibleError(f"observable {z} has zero probability under theta")
        out[support] += qv[z] * theta[support] * a[support] / denom
    return out / out.sum()


def heterogeneous_step(theta, per_user: Sequence[tuple[int, Mechanism]]) -> np.ndarray:
    """One update when user ``i`` reported ``z^i`` through its own mechanism."""
    theta = as_distribution(theta)
    if not per_user:
        raise InvalidInputError("no users")
    out = np.zeros_like(theta)
    for z, mech in per_user:
        a = mech.column(z)
        if a.size != theta.size:
            raise InvalidInputError("mechanism input space does not match theta")
        denom = float(theta @ a)
        if denom <= 0:
            raise InfeasibleError(f"observable {z} has zero probability under theta")
        out += theta * a / denom
    return out / len(per_user)


def single_input_mle_set(g_column, rel_tol: float = 1e-12) -> frozenset:
    """Inputs whose likelihood ``P(z | x)`` ties the maximum.

    A distribution is an MLE for one user exactly when it puts all its mass
    on this set.
    """
    col = np.asarray(g_column, dtype=np.float64)
    top = col.max() if col.size else 0.0
    if not top > 0:
        raise InfeasibleError("every input has zero probability of the observation")
    return frozenset(int(x) for x in np.flatnonzero(col >= (1 - rel_tol) * top))


def kl_to_rows(q, mech: Mechanism) -> np.ndarray:
    """``D_KL(q || a_x)`` for each row ``x`` (natural log, +inf on support violation)."""
    qv = _as_q(q)
    if qv.size != mech.n_outputs:
        raise InvalidInputError("q does not match mechanism outputs")
    pos = qv > 0
    a = mech.probs[:, pos]
    with np.errstate(divide="ignore"):
        log_ratio = np.log(qv[pos])[None, :] - np.log(a)
    return (qv[pos][None, :] * log_ratio).sum(axis=1)


def single_input_mle_kl(q, mech: Mechanism, tol: float = 1e-12) -> frozenset:
    """Inputs whose mechanism row is KL-closest to the empirical ``q``."""
    d = kl_to_rows(q, mech)
    finite = np.isfinite(d)
    if not np.any(finite):
        raise InfeasibleError("every row has infinite divergence from q")
    best = d[finite].min()
    return frozenset(int(x) for x in np.flatnonzero(finite & (d <= best + tol * max(1.0, abs(best)))))


def inversion_vector(q, mech: Mechanism) -> np.ndarray:
    """``v = q A^{-1}``, the unconstrained solution of ``v A = q``.

    Raises:
        NotInvertibleError: ``A`` is not square or its condition number
            reaches 1e12.
    """
    a = mech.probs
    if a.shape[0] != a.shape[1]:
        raise NotInvertibleError(f"mechanism is {a.shape[0]}x{a.shape[1]}, not square")
    cond = np.linalg.cond(a)
    if not cond < MAX_CONDITION:
        raise NotInvertibleError(f"mechanism condition number {cond:.3g} too large")
    return np.linalg.solve(a.T, _as_q(q))


INV_MODES = {"truncate": truncate_normalize, "project": project_to_simplex}


def _post_process(v: np.ndarray, mode: str) -> np.ndarray:
    try:
        fn = INV_MODES[mode]
    except KeyError:
        raise InvalidInputError(f"mode must be one of {sorted(INV_MODES)}") from None
    return fn(v)


def inv_estimate(q, mech: Mechanism, mode: str = "project") -> np.ndarray:
    """Matrix-inversion estimate, made a distribution by ``mode``.

    ``"truncate"`` is INV-N (clamp negatives, renormalize); ``"project"`` is
    INV-P (Euclidean projection onto the simplex).
    """
    return _post_process(inversion_vector(q, mech), mode)


def rappor_unbiased_frequencies(bits, epsilon: float) -> np.ndarray:
    """Per-bit debiased frequencies ``(f_b - p_flip) / (p_keep - p_flip)``."""
    bits = np.asarray(bits)
    if bits.ndim != 2 or bits.shape[0] == 0:
        raise InvalidInputError("expected a non-empty (n, m) bit array")
    if epsilon < 0:
        raise InvalidInputError("epsilon must be non-negative")
    keep = rappor_keep_probability(epsilon)
    flip = 1.0 - keep
    if math.isclose(keep, flip):
        raise NonIdentifiableError("keep and flip probabilities coincide")
    f = bits.mean(axis=0)
    t = (f - flip) / (keep - flip)
    # f == flip should give exactly 0; clear the round-off left by 1 - keep
    t[np.abs(t) <= 1e-12] = 0.0
    return t


def rappor_inv_estimate(bits, epsilon: float, mode: str = "project") -> np.ndarray:
    """INV-N / INV-P adapted to RAPPOR through per-bit unbiasing."""
    return _post_process(rappor_unbiased_frequencies(bits, epsilon), mode)


def rappor_g(bits, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Compressed ``G`` for RAPPOR reports without the 2^m table.

    Returns the distinct reported bit vectors as columns
    ``g[x, i] = P(B'_i | x)`` and how often each was reported.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.ndim != 2 or bits.shape[0] == 0:
        raise InvalidInputError("expected a non-empty (n, m) bit array")
    keep = rappor_keep_probability(epsilon)
    flip = 1.0 - keep
    uniq, counts = np.unique(bits, axis=0, return_counts=True)
    m = bits.shape[1]
    ones = uniq.sum(axis=1)
    base = flip**ones * keep ** (m - ones)  # P(B' | all-zero encoding)
    ratio = np.where(uniq == 1, keep / flip, flip / keep)  # n_uniq x m
    g = (base[:, None] * ratio).T
    return g, counts.astype(np.float64)


def em_from_columns(g, counts=None, cfg: EmConfig | None = None) -> EmTrace:
    """EM after merging duplicate columns; same result, less work."""
    gc, wc = compress_columns(g, counts)
    return em_estimate(gc, cfg, counts=wc)
