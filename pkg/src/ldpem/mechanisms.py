"""Obfuscation mechanisms as explicit row-stochastic tables.

A :class:`Mechanism` maps input index ``x`` (row) to observable index ``z``
(column) with probability ``probs[x, z]``. Constructors in this module build
the k-ary randomized response, the linear geometric mechanism and its
truncated variant, the truncated planar geometric mechanism on a
:class:`Grid`, and Basic One-Time RAPPOR.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CapacityError, InvalidInputError

ROW_TOL = 1e-9
RAPPOR_MAX_BITS = 20


@dataclass(frozen=True, eq=False)
class Mechanism:
    """Row-stochastic conditional probability table.

    Attributes:
        probs: ``|inputs| x |outputs|`` matrix, rows sum to one.
        input_labels: identifiers of the rows.
        output_labels: identifiers of the columns.
        id: name used to look the mechanism up in a registry.
    """

    probs: np.ndarray
    input_labels: tuple = ()
    output_labels: tuple = ()
    id: str = "mechanism"

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 2 or p.size == 0:
            raise InvalidInputError("mechanism table must be a non-empty matrix")
        if np.any(p < 0) or np.any(p > 1 + ROW_TOL) or not np.all(np.isfinite(p)):
            raise InvalidInputError("mechanism entries must lie in [0, 1]")
        dev = np.abs(p.sum(axis=1) - 1.0).max()
        if dev > ROW_TOL:
            raise InvalidInputError(f"rows must sum to 1 (max deviation {dev:.3g})")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        if not self.input_labels:
            object.__setattr__(self, "input_labels", tuple(range(p.shape[0])))
        if not self.output_labels:
            object.__setattr__(self, "output_labels", tuple(range(p.shape[1])))
        if len(self.input_labels) != p.shape[0] or len(self.output_labels) != p.shape[1]:
            raise InvalidInputError("label counts do not match table shape")

    @property
    def n_inputs(self) -> int:
        return self.probs.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.probs.shape[1]

    def column(self, z: int) -> np.ndarray:
        if not 0 <= z < self.n_outputs:
            raise InvalidInputError(f"observable {z} outside output space")
        return self.probs[:, z]

    def to_csv(self, path) -> None:
        """Write one row per input, headed by the output labels."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["input"] + [str(lbl) for lbl in self.output_labels])
            for lbl, row in zip(self.input_labels, self.probs):
                w.writerow([str(lbl)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, id: str = "") -> "Mechanism":
        """Read a table written by :meth:`to_csv`; labels come back as strings."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 2 or len(rows[0]) < 2:
            raise InvalidInputError(f"{path}: not a mechanism table")
        try:
            probs = [[float(v) for v in r[1:]] for r in rows[1:]]
        except ValueError as exc:
            raise InvalidInputError(f"{path}: {exc}") from None
        if any(len(r) != len(rows[0]) - 1 for r in probs):
            raise InvalidInputError(f"{path}: ragged rows")
        return cls(
            np.array(probs),
            tuple(r[0] for r in rows[1:]),
            tuple(rows[0][1:]),
            id or str(path),
        )


def identity(k: int) -> Mechanism:
    if k < 1:
        raise InvalidInputError("k must be positive")
    return Mechanism(np.eye(k), id=f"identity-{k}")


def ambiguous3() -> Mechanism:
    """The singular 3x3 mechanism whose rows 1 and 3 mirror each other.

    Every input distribution with equal first and last weight induces the
    uniform output distribution, so the MLE for uniform data is not unique.
    """
    third, sixth = 1.0 / 3.0, 1.0 / 6.0
    probs = np.array(
        [[0.5, third, sixth], [third, third, third], [sixth, third, 0.5]]
    )
    return Mechanism(probs, id="ambiguous3")


def krr(k: int, epsilon: float) -> Mechanism:
    """k-ary randomized response: keep with prob e^eps/(k-1+e^eps)."""
    if k < 2:
        raise InvalidInputError("k-RR needs k >= 2")
    if not epsilon > 0:
        raise InvalidInputError("epsilon must be positive")
    denom = k - 1 + math.exp(epsilon)
    probs = np.full((k, k), 1.0 / denom)
    np.fill_diagonal(probs, math.exp(epsilon) / denom)
    return Mechanism(probs, id=f"krr-{k}-{epsilon:g}")


def geometric_row(y: int, z: int, epsilon: float) -> float:
    """P(z | y) of the (untruncated) geometric mechanism on the integers."""
    if not epsilon > 0:
        raise InvalidInputError("epsilon must be positive")
    alpha = math.exp(-epsilon)
    c = (1 - alpha) / (1 + alpha)
    return c * alpha ** abs(z - y)


def geometric_columns(values: Sequence[int], epsilon: float) -> np.ndarray:
    """G restricted to reported ``values``: entry (x, z) = P(z | x) for x, z in values."""
    v = np.asarray(values, dtype=np.int64)
    alpha = math.exp(-epsilon)
    c = (1 - alpha) / (1 + alpha)
    return c * alpha ** np.abs(v[:, None] - v[None, :]).astype(np.float64)


def truncated_geometric(r1: int, r2: int, epsilon: float) -> Mechanism:
    """Geometric mechanism folded onto the integer range [r1, r2]."""
    if r1 >= r2:
        raise InvalidInputError("need r1 < r2")
    if not epsilon > 0:
        raise InvalidInputError("epsilon must be positive")
    alpha = math.exp(-epsilon)
    size = r2 - r1 + 1
    pos = np.arange(size)
    cz = np.full(size, (1 - alpha) / (1 + alpha))
    cz[0] = cz[-1] = 1 / (1 + alpha)
    probs = cz[None, :] * alpha ** np.abs(pos[:, None] - pos[None, :]).astype(np.float64)
    labels = tuple(range(r1, r2 + 1))
    return Mechanism(probs, labels, labels, id=f"tgeom-{r1}-{r2}-{epsilon:g}")


@dataclass(frozen=True)
class Grid:
    """Rectangular discretization of a lat/lon box into equal-degree cells.

    Cell index is row-major from the (lat_min, lon_min) corner: rows follow
    latitude, columns follow longitude.
    """

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    rows: int
    cols: int
    cell_side_km: float = field(default=0.5)

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise InvalidInputError("grid bounds must satisfy min < max")
        if self.rows < 1 or self.cols < 1:
            raise InvalidInputError("grid needs at least one row and column")
        if not self.cell_side_km > 0:
            raise InvalidInputError("cell side must be positive")

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def dlat(self) -> float:
        return (self.lat_max - self.lat_min) / self.rows

    @property
    def dlon(self) -> float:
        return (self.lon_max - self.lon_min) / self.cols

    def centers(self) -> np.ndarray:
        """(size, 2) array of (lat, lon) cell centers in index order."""
        r, c = np.divmod(np.arange(self.size), self.cols)
        return np.column_stack(
            [self.lat_min + (r + 0.5) * self.dlat, self.lon_min + (c + 0.5) * self.dlon]
        )

    def distance_km(self) -> np.ndarray:
        """Pairwise Euclidean distance between cell centers, in km."""
        r, c = np.divmod(np.arange(self.size), self.cols)
        dr = r[:, None] - r[None, :]
        dc = c[:, None] - c[None, :]
        return self.cell_side_km * np.hypot(dr, dc)


def san_francisco_grid() -> Grid:
    """North San Francisco box, 16 latitude rows x 24 longitude columns of 0.5 km."""
    return Grid(37.7228, 37.7946, -122.5153, -122.3789, rows=16, cols=24, cell_side_km=0.5)


OUTSIDE = -1


def locate_cell(grid: Grid, lat: float, lon: float) -> int:
    """Row-major cell index containing (lat, lon), or :data:`OUTSIDE`."""
    if not (grid.lat_min <= lat <= grid.lat_max and grid.lon_min <= lon <= grid.lon_max):
        return OUTSIDE
    row = min(int(math.floor((lat - grid.lat_min) / grid.dlat)), grid.rows - 1)
    col = min(int(math.floor((lon - grid.lon_min) / grid.dlon)), grid.cols - 1)
    return row * grid.cols + col


def locate_cells(grid: Grid, lat, lon) -> np.ndarray:
    """Vectorized :func:`locate_cell`."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    inside = (
        (lat >= grid.lat_min) & (lat <= grid.lat_max)
        & (lon >= grid.lon_min) & (lon <= grid.lon_max)
    )
    row = np.minimum(np.floor((lat - grid.lat_min) / grid.dlat), grid.rows - 1)
    col = np.minimum(np.floor((lon - grid.lon_min) / grid.dlon), grid.cols - 1)
    idx = np.where(inside, row * grid.cols + col, OUTSIDE)
    return idx.astype(np.int64)


def _ring_tail(radius: int, decay: float) -> float:
    """Upper bound on sum of exp(-decay * ||p||) over lattice points p with
    Chebyshev norm > radius: ring k holds 8k points, each at distance >= k."""
    r = math.exp(-decay)
    n = radius + 1
    # sum_{k>=n} k r^k = r^n (n - (n-1) r) / (1-r)^2
    return 8.0 * r**n * (n - (n - 1) * r) / (1.0 - r) ** 2


def planar_window_radius(epsilon: float, cell_side_km: float, tail_tol: float) -> int:
    """Smallest square half-width whose analytic tail bound is below ``tail_tol``."""
    decay = epsilon * cell_side_km
    radius = 1
    while _ring_tail(radius, decay) >= tail_tol:
        radius *= 2
    lo, hi = radius // 2, radius
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _ring_tail(mid, decay) < tail_tol:
            hi = mid
        else:
            lo = mid
    return hi


def planar_geometric(grid: Grid, epsilon: float, tail_tol: float = 1e-9) -> Mechanism:
    """Truncated planar geometric mechanism over the cell centers of ``grid``.

    The untruncated mechanism reports lattice point z with probability
    lambda * exp(-epsilon * d(x, z)), d in km. Points outside the grid are
    remapped to the nearest in-grid center, which for an axis-aligned block
    of lattice points is the coordinate-wise clamp. The infinite sum is cut
    to a square window whose omitted mass is below ``tail_tol``; lambda is
    the reciprocal of the window sum so every row sums to one.
    """
    if not epsilon > 0:
        raise InvalidInputError("epsilon must be positive")
    if not 0 < tail_tol <= 1e-6:
        raise InvalidInputError("tail_tol must lie in (0, 1e-6]")
    R = planar_window_radius(epsilon, grid.cell_side_km, tail_tol)
    off = np.arange(-R, R + 1)
    kernel = np.exp(-epsilon * grid.cell_side_km * np.hypot(off[:, None], off[None, :]))
    kernel /= kernel.sum()

    # fold[r0] is the (rows x window) 0/1 map sending offset i to clamp(r0 + i)
    def fold(n: int) -> np.ndarray:
        maps = np.zeros((n, n, off.size))
        for start in range(n):
            dest = np.clip(start + off, 0, n - 1)
            maps[start, dest, np.arange(off.size)] = 1.0
        return maps

    row_fold = fold(grid.rows)
    col_fold = fold(grid.cols)
    probs = np.empty((grid.size, grid.size))
    for r0 in range(grid.rows):
        partial = row_fold[r0] @ kernel  # rows x window(col offsets)
        for c0 in range(grid.cols):
            block = partial @ col_fold[c0].T  # rows x cols
            probs[r0 * grid.cols + c0] = block.ravel()
    labels = tuple(range(grid.size))
    return Mechanism(probs, labels, labels, id=f"planar-geom-{epsilon:g}")


def rappor_keep_probability(epsilon: float) -> float:
    return math.exp(epsilon / 2) / (1 + math.exp(epsilon / 2))


def bits_of(index: int, m: int) -> tuple:
    """Bit vector encoded by output index: bit b is ``(index >> b) & 1``."""
    return tuple((index >> b) & 1 for b in range(m))


def rappor(space_size: int, epsilon: float) -> Mechanism:
    """Basic One-Time RAPPOR with the full 2^m output table.

    Output index k encodes the bit vector whose bit b is ``(k >> b) & 1``.
    """
    if space_size < 2:
        raise InvalidInputError("RAPPOR needs space_size >= 2")
    if space_size > RAPPOR_MAX_BITS:
        raise CapacityError(
            f"2^{space_size} outputs exceed the explicit-table cap of 2^{RAPPOR_MAX_BITS}"
        )
    if not epsilon > 0:
        raise InvalidInputError("epsilon must be positive")
    keep = rappor_keep_probability(epsilon)
    flip = 1.0 - keep
    m = space_size
    outputs = np.arange(2**m)
    bits = (outputs[None, :] >> np.arange(m)[:, None]) & 1  # m x 2^m
    n_ones = bits.sum(axis=0)
    # all-zero encoding: each 1 in the output is a flip, each 0 a keep
    base = flip**n_ones * keep ** (m - n_ones)
    ratio = np.where(bits == 1, keep / flip, flip / keep)
    probs = base[None, :] * ratio
    labels = tuple("".join(str(b) for b in bits_of(int(k), m)) for k in outputs)
    return Mechanism(probs, tuple(range(m)), labels, id=f"rappor-{m}-{epsilon:g}")


def sample_output(mech: Mechanism, x: int, rng: np.random.Generator) -> int:
    """Draw one observable for input ``x``."""
    if not 0 <= x < mech.n_inputs:
        raise InvalidInputError(f"input index {x} out of range")
    return int(sample_outputs(mech, np.array([x]), rng)[0])


def sample_outputs(mech: Mechanism, xs, rng: np.random.Generator) -> np.ndarray:
    """Obfuscate each input in ``xs`` independently, preserving order."""
    xs = np.asarray(xs, dtype=np.int64)
    if xs.size and (xs.min() < 0 or xs.max() >= mech.n_inputs):
        raise InvalidInputError("input index out of range")
    u = rng.random(xs.size)
    out = np.empty(xs.size, dtype=np.int64)
    cdf = np.cumsum(mech.probs, axis=1)
    cdf[:, -1] = 1.0
    for x in np.unique(xs):
        sel = xs == x
        z = np.searchsorted(cdf[x], u[sel], side="right")
        last = np.flatnonzero(mech.probs[x])[-1]
        out[sel] = np.minimum(z, last)
    return out


def sample_rappor_bits(
    xs, space_size: int, epsilon: float, rng: np.random.Generator
) -> np.ndarray:
    """Sample RAPPOR reports directly as an (n, m) 0/1 array, no table needed."""
    xs = np.asarray(xs, dtype=np.int64)
    flip = 1.0 - rappor_keep_probability(epsilon)
    onehot = np.zeros((xs.size, space_size), dtype=np.uint8)
    onehot[np.arange(xs.size), xs] = 1
    flips = rng.random((xs.size, space_size)) < flip
    return onehot ^ flips.astype(np.uint8)
