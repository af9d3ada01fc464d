"""Command-line entry point.

Subcommands::

    ldpem estimate        one dataset, one estimator
    ldpem experiment      a full config-driven sweep
    ldpem counterexamples the four built-in counterexample checks
    ldpem surface         log-likelihood over 3-input distributions, as CSV
    ldpem uniqueness      MLE uniqueness report for a mechanism and observations

Observation files hold whitespace-separated 0-based output indices. For
RAPPOR each line is one user's bit vector (``0``/``1`` tokens).
Exit status is 0 on success and 1 on any error, any recorded per-cell
failure, or any failed counterexample check.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, estimators, harness, mechanisms
from .errors import LdpemError
from .estimators import EmConfig, EmpiricalDistribution
from .mechanisms import Mechanism

log = logging.getLogger("ldpem")


def _mechanism_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("mechanism")
    g.add_argument("--mechanism", default="krr",
                   help="identity, krr, truncated_geometric, planar_geometric, rappor, "
                        "ambiguous3, or a CSV table path written by --dump-mechanism")
    g.add_argument("--space-size", type=int, default=None, help="number of inputs")
    g.add_argument("--epsilon", type=float, default=1.0)
    g.add_argument("--grid", default="sf",
                   help="'sf' or 'lat_min lat_max lon_min lon_max rows cols [cell_km]'")
    g.add_argument("--dump-mechanism", metavar="PATH", help="write the mechanism table as CSV")


def _build_mechanism(args) -> Mechanism:
    name = args.mechanism
    if Path(name).suffix == ".csv":
        return Mechanism.from_csv(name)
    if name == "ambiguous3":
        return mechanisms.ambiguous3()
    if name == "planar_geometric":
        return mechanisms.planar_geometric(harness.parse_grid(args.grid), args.epsilon)
    if args.space_size is None:
        raise LdpemError(f"--space-size is required for {name}")
    k = args.space_size
    builders = {
        "identity": lambda: mechanisms.identity(k),
        "krr": lambda: mechanisms.krr(k, args.epsilon),
        "truncated_geometric": lambda: mechanisms.truncated_geometric(0, k - 1, args.epsilon),
        "rappor": lambda: mechanisms.rappor(k, args.epsilon),
    }
    if name not in builders:
        raise LdpemError(f"unknown mechanism {name!r}")
    return builders[name]()


def _read_indices(path) -> np.ndarray:
    text = Path(path).read_text().split()
    try:
        return np.array([int(t) for t in text], dtype=np.int64)
    except ValueError as exc:
        raise LdpemError(f"{path}: {exc}") from None


def _read_bits(path) -> np.ndarray:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise LdpemError(f"{path}: bit rows must be non-empty and of equal length")
    bits = np.array(rows, dtype=np.int64)
    if np.any((bits != 0) & (bits != 1)):
        raise LdpemError(f"{path}: bits must be 0 or 1")
    return bits.astype(np.uint8)


def _write_distribution(dist, dest) -> None:
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["input", "probability"])
    for i, v in enumerate(dist):
        w.writerow([i, repr(float(v))])


def cmd_estimate(args) -> int:
    em_cfg = EmConfig(delta=args.delta, max_iters=args.max_iters)
    trace = None
    if args.mechanism == "rappor":
        bits = _read_bits(args.observations)
        if args.estimator == "em":
            g, counts = estimators.rappor_g(bits, args.epsilon)
            trace = estimators.em_estimate(g, em_cfg, counts=counts)
            est = trace.estimate
        else:
            mode = "truncate" if args.estimator == "invn" else "project"
            est = estimators.rappor_inv_estimate(bits, args.epsilon, mode)
    else:
        mech = _build_mechanism(args)
        if args.dump_mechanism:
            mech.to_csv(args.dump_mechanism)
        q = EmpiricalDistribution.from_observations(_read_indices(args.observations), mech.n_outputs)
        if args.estimator == "em":
            trace = estimators.ibu(mech, q, em_cfg)
            est = trace.estimate
        else:
            est = estimators.inv_estimate(q, mech, "truncate" if args.estimator == "invn" else "project")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "estimate.csv", "w", newline="") as fh:
            _write_distribution(est, fh)
        if trace is not None:
            trace.to_csv(out / "em_trace.csv")
        print(f"wrote {out / 'estimate.csv'}")
    else:
        _write_distribution(est, sys.stdout)
    if trace is not None:
        log.info("EM: %d iterations, converged=%s", trace.iterations, trace.converged)
    return 0


def cmd_experiment(args) -> int:
    raw = harness.read_key_values(args.config)
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    cfg = harness.ExperimentConfig.from_mapping(raw)
    if args.dump_mechanism:
        size = len(harness.source_distribution(cfg)[0])
        mech = harness.build_mechanism(cfg, size, min(cfg.epsilons))
        if mech is None:
            mech = mechanisms.rappor(size, min(cfg.epsilons))
        mech.to_csv(args.dump_mechanism)
    result = harness.run_experiment(cfg)
    formats = tuple(f.strip() for f in args.format.split(",") if f.strip())
    for path in harness.emit_results(result, args.out, formats):
        print(f"wrote {path}")
    _print_summary(result)
    for eps, rep, name, msg in result.errors:
        print(f"error: epsilon={eps:g} repetition={rep} {name}: {msg}", file=sys.stderr)
    return 1 if result.errors else 0


def _print_summary(result: harness.RunResult) -> None:
    groups: dict[tuple, list[float]] = {}
    for r in result.rows + result.baselines:
        groups.setdefault((r.epsilon, r.estimator, r.metric), []).append(r.value)
    for (eps, name, metric), vals in sorted(groups.items()):
        print(f"epsilon={eps:g} {name:6s} {metric}: mean {np.mean(vals):.4f} over {len(vals)}")


def cmd_counterexamples(args) -> int:
    checks, elapsed = harness.run_counterexamples()
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    print(f"runtime {elapsed:.2f} s")
    return 0 if all(c.passed for c in checks) else 1


def cmd_surface(args) -> int:
    mech = _build_mechanism(args)
    if mech.n_inputs != 3:
        raise LdpemError("the surface needs a 3-input mechanism")
    obs = _read_indices(args.observations) if args.observations else np.arange(mech.n_outputs)
    g, counts = estimators.mechanism_g(mech, EmpiricalDistribution.from_observations(obs, mech.n_outputs))
    points = analysis.likelihood_surface(g, args.resolution, counts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.surface_to_csv(points, out / "surface.csv")
    print(f"wrote {out / 'surface.csv'}")
    return 0


def cmd_uniqueness(args) -> int:
    mech = _build_mechanism(args)
    if args.dump_mechanism:
        mech.to_csv(args.dump_mechanism)
    obs = _read_indices(args.observations) if args.observations else np.arange(mech.n_outputs)
    if obs.size and (obs.min() < 0 or obs.max() >= mech.n_outputs):
        raise LdpemError("observation outside the output space")
    print(analysis.check_uniqueness(mech.probs[:, np.unique(obs)]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldpem", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimate the input distribution from one dataset")
    _mechanism_args(p)
    p.add_argument("--observations", required=True, metavar="PATH")
    p.add_argument("--estimator", choices=harness.ESTIMATORS, default="em")
    p.add_argument("--delta", type=float, default=EmConfig.delta)
    p.add_argument("--max-iters", type=int, default=EmConfig.max_iters)
    p.add_argument("--out", metavar="DIR", help="write estimate.csv (and em_trace.csv) here")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("experiment", help="run a config-driven sweep")
    p.add_argument("--config", required=True, metavar="PATH")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=".", metavar="DIR")
    p.add_argument("--format", default="csv", help="comma list of csv, heatmap-svg")
    p.add_argument("--dump-mechanism", metavar="PATH",
                   help="write the mechanism at the smallest epsilon as CSV")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("counterexamples", help="run the counterexample checks")
    p.set_defaults(func=cmd_counterexamples)

    p = sub.add_parser("surface", help="log-likelihood surface for a 3-input mechanism")
    _mechanism_args(p)
    p.add_argument("--observations", metavar="PATH", help="defaults to one of each output")
    p.add_argument("--resolution", type=int, default=101)
    p.add_argument("--out", default=".", metavar="DIR")
    p.set_defaults(func=cmd_surface)

    p = sub.add_parser("uniqueness", help="check whether the MLE is unique")
    _mechanism_args(p)
    p.add_argument("--observations", metavar="PATH", help="defaults to every output")
    p.set_defaults(func=cmd_uniqueness)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (LdpemError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
