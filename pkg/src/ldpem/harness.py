"""Experiment pipeline: sample, obfuscate, estimate, measure, emit.

Experiments are described by a flat ``key = value`` text file, one key per
line, ``#`` starts a comment. Example::

    source = binomial
    space_size = 100
    mechanism = truncated_geometric
    epsilons = 0.1
    n = 100000
    repetitions = 5
    estimators = em, invn, invp
    metrics = tv, emd
    seed = 7

Each (epsilon, repetition) cell draws its own generator from
``SeedSequence(seed, spawn_key=(rep, bits(epsilon)))``, so cells are
independent and a whole run is reproducible from the seed alone.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import binom

from . import analysis, estimators, mechanisms
from .errors import InvalidInputError, LdpemError
from .estimators import EmConfig, EmpiricalDistribution
from .likelihood import log_likelihood
from .mechanisms import Grid, Mechanism
from .simplex import as_distribution, sample_categorical, uniform

log = logging.getLogger(__name__)

SOURCES = ("binomial", "uniform-interval", "custom", "gowalla")
MECHANISMS = ("identity", "krr", "truncated_geometric", "planar_geometric", "rappor", "ambiguous3")
ESTIMATORS = ("em", "invn", "invp")
METRICS = ("tv", "emd", "kl")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _names(text: str) -> tuple[str, ...]:
    return tuple(t.strip().lower() for t in text.replace(",", " ").split() if t.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    source: str = "binomial"
    space_size: int = 100
    binomial_p: float = 0.5
    interval: tuple[int, int] = (0, 0)
    weights: tuple[float, ...] = ()
    gowalla_path: str = ""
    lat_col: int = 2
    lon_col: int = 3
    grid: Grid | None = None
    mechanism: str = "truncated_geometric"
    epsilons: tuple[float, ...] = (1.0,)
    n: int = 100_000
    repetitions: int = 1
    estimators: tuple[str, ...] = ESTIMATORS
    metrics: tuple[str, ...] = ("tv",)
    seed: int = 0
    em_delta: float = 1e-3
    em_max_iters: int = 1_000_000
    tail_tol: float = 1e-9

    def __post_init__(self):
        if self.source not in SOURCES:
            raise InvalidInputError(f"source must be one of {SOURCES}")
        if self.mechanism not in MECHANISMS:
            raise InvalidInputError(f"mechanism must be one of {MECHANISMS}")
        if self.n < 1 or self.repetitions < 1:
            raise InvalidInputError("n and repetitions must be positive")
        if not self.estimators or not set(self.estimators) <= set(ESTIMATORS):
            raise InvalidInputError(f"estimators must be a non-empty subset of {ESTIMATORS}")
        if not self.metrics or not set(self.metrics) <= set(METRICS):
            raise InvalidInputError(f"metrics must be a non-empty subset of {METRICS}")
        if not self.epsilons or any(not e > 0 for e in self.epsilons):
            raise InvalidInputError("epsilons must be a non-empty list of positive values")
        if self.source == "gowalla" and not self.gowalla_path:
            raise InvalidInputError("gowalla source needs gowalla_path")
        if self.mechanism == "planar_geometric" and self.grid is None:
            raise InvalidInputError("planar_geometric needs a grid")

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "ExperimentConfig":
        kw: dict = {}
        conv: dict[str, Callable[[str], object]] = {
            "source": str.strip,
            "space_size": int,
            "binomial_p": float,
            "interval": lambda s: tuple(int(float(v)) for v in _floats(s)),
            "weights": _floats,
            "gowalla_path": str.strip,
            "lat_col": int,
            "lon_col": int,
            "mechanism": str.strip,
            "epsilons": _floats,
            "epsilon": _floats,
            "n": lambda s: int(float(s)),
            "repetitions": int,
            "estimators": _names,
            "metrics": _names,
            "seed": int,
            "em_delta": float,
            "em_max_iters": lambda s: int(float(s)),
            "tail_tol": float,
        }
        for key, value in raw.items():
            if key == "grid":
                kw["grid"] = parse_grid(value)
            elif key in conv:
                kw["epsilons" if key == "epsilon" else key] = conv[key](value)
            else:
                raise InvalidInputError(f"unknown config key {key!r}")
        if kw.get("source") == "gowalla" and "grid" not in kw:
            kw["grid"] = mechanisms.san_francisco_grid()
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_mapping(read_key_values(path))

    def digest(self) -> str:
        payload = repr(sorted(asdict(self).items())).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


def read_key_values(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip().lower()] = value.strip()
    return out


def parse_grid(text: str) -> Grid:
    """``sf`` for the built-in San Francisco grid, else
    ``lat_min lat_max lon_min lon_max rows cols [cell_km]``."""
    if text.strip().lower() in ("sf", "san-francisco", "default"):
        return mechanisms.san_francisco_grid()
    vals = _floats(text)
    if len(vals) not in (6, 7):
        raise InvalidInputError("grid needs 6 or 7 numbers")
    side = vals[6] if len(vals) == 7 else 0.5
    return Grid(vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]), side)


@dataclass
class GowallaData:
    counts: EmpiricalDistribution
    cells: np.ndarray
    total_lines: int
    skipped_outside: int
    skipped_malformed: int

    @property
    def skipped(self) -> int:
        return self.skipped_outside + self.skipped_malformed


def ingest_gowalla(path, grid: Grid, lat_col: int = 2, lon_col: int = 3) -> GowallaData:
    """Count check-ins per grid cell from a whitespace-separated file.

    Blank lines are not data lines. Lines with too few fields or
    unparseable coordinates are tallied as malformed, points outside the
    box as outside; both are skipped.

    Raises:
        OSError: unreadable file.
        InvalidInputError: no check-in falls inside the grid.
    """
    need = max(lat_col, lon_col) + 1
    lats, lons = [], []
    total = malformed = 0
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            fields = line.split()
            if not fields:
                continue
            total += 1
            if len(fields) < need:
                malformed += 1
                continue
            try:
                lat, lon = float(fields[lat_col]), float(fields[lon_col])
            except ValueError:
                malformed += 1
                continue
            if not (math.isfinite(lat) and math.isfinite(lon)):
                malformed += 1
                continue
            lats.append(lat)
            lons.append(lon)
    cells = mechanisms.locate_cells(grid, lats, lons)
    inside = cells[cells != mechanisms.OUTSIDE]
    if inside.size == 0:
        raise InvalidInputError(f"{path}: no check-ins inside the grid")
    counts = EmpiricalDistribution(np.bincount(inside, minlength=grid.size))
    return GowallaData(counts, inside, total, int(cells.size - inside.size), malformed)


@dataclass(frozen=True)
class ResultRow:
    epsilon: float
    repetition: int
    estimator: str
    metric: str
    value: float


@dataclass
class RunResult:
    rows: list[ResultRow] = field(default_factory=list)
    baselines: list[ResultRow] = field(default_factory=list)
    em_iterations: dict[tuple[float, int], int] = field(default_factory=dict)
    em_traces: dict[tuple[float, int], np.ndarray] = field(default_factory=dict)
    estimates: dict[tuple[float, int, str], np.ndarray] = field(default_factory=dict)
    errors: list[tuple[float, int, str, str]] = field(default_factory=list)
    truth: np.ndarray | None = None
    grid: Grid | None = None
    digest: str = "empty"

    def value(self, epsilon: float, repetition: int, estimator: str, metric: str) -> float:
        for r in self.rows + self.baselines:
            if (r.epsilon, r.repetition, r.estimator, r.metric) == (epsilon, repetition, estimator, metric):
                return r.value
        raise KeyError((epsilon, repetition, estimator, metric))


def source_distribution(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray | None]:
    """True input distribution, plus the fixed inputs for file-backed sources."""
    if cfg.source == "binomial":
        return binom.pmf(np.arange(cfg.space_size), cfg.space_size - 1, cfg.binomial_p), None
    if cfg.source == "uniform-interval":
        lo, hi = cfg.interval
        if not 0 <= lo <= hi < cfg.space_size:
            raise InvalidInputError("interval must lie inside [0, space_size)")
        p = np.zeros(cfg.space_size)
        p[lo:hi + 1] = 1.0 / (hi - lo + 1)
        return p, None
    if cfg.source == "custom":
        w = np.asarray(cfg.weights, dtype=np.float64)
        if w.size == 0 or np.any(w < 0) or w.sum() <= 0:
            raise InvalidInputError("custom weights must be non-negative with positive sum")
        return as_distribution(w / w.sum()), None
    data = ingest_gowalla(cfg.gowalla_path, cfg.grid, cfg.lat_col, cfg.lon_col)
    log.info(
        "gowalla: %d in grid, %d outside, %d malformed",
        data.cells.size, data.skipped_outside, data.skipped_malformed,
    )
    return data.counts.q, data.cells


def build_mechanism(cfg: ExperimentConfig, size: int, epsilon: float) -> Mechanism | None:
    """Mechanism for one epsilon; ``None`` for RAPPOR, which is sampled bitwise."""
    name = cfg.mechanism
    if name == "identity":
        return mechanisms.identity(size)
    if name == "krr":
        return mechanisms.krr(size, epsilon)
    if name == "truncated_geometric":
        return mechanisms.truncated_geometric(0, size - 1, epsilon)
    if name == "planar_geometric":
        if cfg.grid.size != size:
            raise InvalidInputError("grid size does not match the input space")
        return mechanisms.planar_geometric(cfg.grid, epsilon, cfg.tail_tol)
    if name == "ambiguous3":
        if size != 3:
            raise InvalidInputError("ambiguous3 acts on 3 inputs")
        return mechanisms.ambiguous3()
    return None


def cell_rng(seed: int, epsilon: float, repetition: int) -> np.random.Generator:
    eps_bits = int(np.float64(epsilon).view(np.uint64))
    ss = np.random.SeedSequence(seed, spawn_key=(repetition, eps_bits))
    return np.random.default_rng(ss)


def _ground(cfg: ExperimentConfig, size: int) -> np.ndarray:
    if cfg.grid is not None and cfg.grid.size == size:
        return cfg.grid.distance_km()
    return analysis.line_ground(size)


def _metric(name: str, est: np.ndarray, truth: np.ndarray, ground: np.ndarray) -> float:
    if name == "tv":
        return analysis.total_variation(est, truth)
    if name == "kl":
        return analysis.kl_divergence(truth, est)
    return analysis.emd(est, truth, ground)


def run_experiment(cfg: ExperimentConfig) -> RunResult:
    """Run every (epsilon, repetition) cell of ``cfg``.

    Estimator failures (for example inversion of a singular mechanism) are
    recorded in ``errors`` and the run continues.
    """
    truth, fixed_inputs = source_distribution(cfg)
    size = truth.size
    ground = _ground(cfg, size) if "emd" in cfg.metrics else None
    em_cfg = EmConfig(delta=cfg.em_delta, max_iters=cfg.em_max_iters)
    result = RunResult(truth=truth, grid=cfg.grid, digest=cfg.digest())

    for eps in sorted(cfg.epsilons):
        mech = build_mechanism(cfg, size, eps)
        for rep in range(cfg.repetitions):
            rng = cell_rng(cfg.seed, eps, rep)
            xs = fixed_inputs if fixed_inputs is not None else sample_categorical(truth, rng, cfg.n)
            outputs = _obfuscate_and_estimate(cfg, mech, xs, size, eps, rng, em_cfg, result, rep)
            for name, est in outputs.items():
                result.estimates[(eps, rep, name)] = est
                target = result.baselines if name == "noisy" else result.rows
                for metric in cfg.metrics:
                    target.append(ResultRow(eps, rep, name, metric, _metric(metric, est, truth, ground)))
    return result


def _obfuscate_and_estimate(cfg, mech, xs, size, eps, rng, em_cfg, result, rep) -> dict:
    out: dict[str, np.ndarray] = {}
    if mech is None:
        bits = mechanisms.sample_rappor_bits(xs, size, eps, rng)
        freq = bits.mean(axis=0)
        out["noisy"] = freq / freq.sum() if freq.sum() > 0 else uniform(size)
        runners = {
            "em": lambda: _run_em(result, eps, rep, *estimators.rappor_g(bits, eps), em_cfg),
            "invn": lambda: estimators.rappor_inv_estimate(bits, eps, "truncate"),
            "invp": lambda: estimators.rappor_inv_estimate(bits, eps, "project"),
        }
    else:
        zs = mechanisms.sample_outputs(mech, xs, rng)
        q = EmpiricalDistribution.from_observations(zs, mech.n_outputs)
        if mech.n_outputs == size:
            out["noisy"] = q.q
        runners = {
            "em": lambda: _run_em(result, eps, rep, *estimators.mechanism_g(mech, q), em_cfg),
            "invn": lambda: estimators.inv_estimate(q, mech, "truncate"),
            "invp": lambda: estimators.inv_estimate(q, mech, "project"),
        }
    for name in cfg.estimators:
        try:
            out[name] = runners[name]()
        except LdpemError as exc:
            log.warning("eps=%g rep=%d %s failed: %s", eps, rep, name, exc)
            result.errors.append((eps, rep, name, str(exc)))
    return out


def _run_em(result: RunResult, eps, rep, g, counts, em_cfg) -> np.ndarray:
    trace = estimators.em_estimate(g, em_cfg, counts=counts)
    result.em_iterations[(eps, rep)] = trace.iterations
    result.em_traces[(eps, rep)] = trace.log_likelihoods
    return trace.estimate


CSV_HEADER = ["epsilon", "repetition", "estimator", "metric", "value"]


def _write_rows(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([repr(r.epsilon), r.repetition, r.estimator, r.metric, repr(r.value)])


def emit_results(result: RunResult, out_dir, formats=("csv",)) -> list[Path]:
    """Write result files into ``out_dir``; names derive from the config digest.

    ``csv`` writes ``results-<digest>.csv`` (one row per epsilon, repetition,
    estimator, metric) and ``baseline-<digest>.csv`` (noisy-vs-original).
    ``heatmap-svg`` renders the original distribution and every estimate of
    repetition 0 as a color matrix shaped like the grid (one strip when the
    space is linear).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    unknown = set(formats) - {"csv", "heatmap-svg"}
    if unknown:
        raise InvalidInputError(f"unknown output formats {sorted(unknown)}")
    written: list[Path] = []
    if "csv" in formats:
        main = out / f"results-{result.digest}.csv"
        _write_rows(main, result.rows)
        written.append(main)
        if result.baselines:
            base = out / f"baseline-{result.digest}.csv"
            _write_rows(base, result.baselines)
            written.append(base)
    if "heatmap-svg" in formats and result.truth is not None:
        shape = (result.grid.rows, result.grid.cols) if result.grid is not None else (1, result.truth.size)
        items = [("original", None, result.truth)]
        items += [(name, eps, est) for (eps, rep, name), est in sorted(result.estimates.items()) if rep == 0]
        for name, eps, dist in items:
            suffix = "" if eps is None else f"-eps{eps:g}"
            path = out / f"heatmap-{result.digest}-{name}{suffix}.svg"
            path.write_text(heatmap_svg(np.asarray(dist), shape, title=f"{name}{suffix}"))
            written.append(path)
    return written


def heatmap_svg(dist: np.ndarray, shape: tuple[int, int], title: str = "", cell_px: int = 16) -> str:
    """White-to-red color matrix; row 0 (lowest latitude) is drawn at the bottom."""
    rows, cols = shape
    if dist.size != rows * cols:
        raise InvalidInputError("distribution size does not match heatmap shape")
    top = float(dist.max()) or 1.0
    width, height = cols * cell_px, rows * cell_px + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<text x="2" y="14" font-family="sans-serif" font-size="12">{title}</text>',
    ]
    for idx, v in enumerate(dist):
        r, c = divmod(idx, cols)
        level = int(round(255 * (1 - float(v) / top)))
        y = 20 + (rows - 1 - r) * cell_px
        parts.append(
            f'<rect x="{c * cell_px}" y="{y}" width="{cell_px}" height="{cell_px}" '
            f'fill="rgb(255,{level},{level})"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    detail: str


def stationarity_partials(mech: Mechanism, observations, at=(0.0, 1.0, 0.0), h: float = 1e-6):
    """Central-difference partials of ``L`` in (theta1, theta3) with theta2 = 1 - theta1 - theta3.

    ``L`` is evaluated off the simplex edge too, which is fine as long as
    the inner sums stay positive.
    """
    g = mech.probs[:, list(observations)]

    def ll(t1, t3):
        return log_likelihood(np.array([t1, 1.0 - t1 - t3, t3]), g)

    t1, _, t3 = at
    d1 = (ll(t1 + h, t3) - ll(t1 - h, t3)) / (2 * h)
    d3 = (ll(t1, t3 + h) - ll(t1, t3 - h)) / (2 * h)
    return d1, d3


# 0-based encodings of the observation multisets used by the checks
NONUNIQUE_OBS = (0, 1, 2)
BOUNDARY_OBS = (0, 1, 1, 2)
NONSTATIONARY_OBS = (0, 1, 1, 1, 2)


def verify_counterexamples(rr3: Mechanism | None = None) -> list[CheckResult]:
    """Run the four counterexample checks on the 3-input mechanisms.

    ``rr3`` replaces the 3-ary randomized response with keep probability
    1/2 (useful to see how the checks react to a perturbed table).
    """
    amb = mechanisms.ambiguous3()
    rr3 = rr3 if rr3 is not None else mechanisms.krr(3, math.log(2))
    checks: list[CheckResult] = []

    rep = analysis.check_uniqueness(amb.probs[:, list(NONUNIQUE_OBS)])
    ok = not rep.unique and rep.witness is not None
    if ok:
        theta, phi = rep.witness
        resid = float(np.abs((theta - phi) @ amb.probs).max())
        ok = resid <= 1e-8 and analysis.total_variation(theta, phi) > 0
        detail = f"rank {rep.rank} < {rep.required_rank}; witness residual {resid:.2e}"
    else:
        resid, detail = math.nan, f"reported unique (rank {rep.rank})"
    checks.append(CheckResult("non-unique MLE", ok, rep.rank, detail))

    fixed = np.array([0.5, 0.0, 0.5])
    moved = estimators.ibu_step(fixed, amb, np.full(3, 1 / 3))
    dev = float(np.abs(moved - fixed).max())
    checks.append(CheckResult("fixed point away from truth", dev <= 1e-12, dev, f"max deviation {dev:.2e}"))

    d1, d3 = stationarity_partials(rr3, BOUNDARY_OBS)
    ok = abs(d1 + 0.5) <= 1e-4 and abs(d3 + 0.5) <= 1e-4
    checks.append(
        CheckResult(
            "non-stationary MLE", ok, d1,
            f"partials at (0,1,0) for observations 1,2,2,3: {d1:.6f}, {d3:.6f} (expected -0.5)",
        )
    )

    g = rr3.probs[:, list(BOUNDARY_OBS)]
    trace = estimators.em_estimate(g, EmConfig(delta=1e-14, max_iters=1_000_000))
    tv = analysis.total_variation(trace.estimate, np.array([0.0, 1.0, 0.0]))
    checks.append(
        CheckResult(
            "EM reaches boundary MLE", tv <= 1e-4, tv,
            f"TV to (0,1,0) after {trace.iterations} iterations: {tv:.2e}",
        )
    )
    return checks


def run_counterexamples() -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    checks = verify_counterexamples()
    return checks, time.perf_counter() - start
