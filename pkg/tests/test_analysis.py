import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldpem import analysis as A
from ldpem import mechanisms as M
from ldpem.errors import InvalidInputError
from ldpem.simplex import sample_categorical
from oracles import emd_bruteforce_3, emd_line_cdf

RR3 = M.krr(3, math.log(2))
AMB = M.ambiguous3()


class TestUniqueness:
    def test_krr_unique(self):
        rep = A.check_uniqueness(RR3.probs)
        assert rep.unique and rep.rank == rep.required_rank == 3 and rep.witness is None

    def test_singular_mechanism_witness(self):
        rep = A.check_uniqueness(AMB.probs)
        assert not rep.unique and rep.rank == 2
        theta, phi = rep.witness
        assert theta.sum() == pytest.approx(1) and phi.sum() == pytest.approx(1)
        assert np.all(theta >= 0) and np.all(phi >= 0)
        assert np.abs((theta - phi) @ AMB.probs).max() <= 10 * 1e-9
        assert A.total_variation(theta, phi) > 0
        assert theta[0] == pytest.approx(theta[2]) and phi[0] == pytest.approx(phi[2])

    def test_single_output(self):
        assert not A.check_uniqueness(RR3.probs[:, [1, 1, 1]]).unique

    def test_duplicates_ignored(self):
        g = RR3.probs[:, [0, 1, 2, 2, 0, 1]]
        assert A.check_uniqueness(g).unique

    @pytest.mark.parametrize("seed", range(5))
    def test_corollaries(self, seed):
        rng = np.random.default_rng(seed)
        eps = rng.uniform(0.05, 3)
        r1 = int(rng.integers(-10, 10))
        r2 = r1 + int(rng.integers(1, 12))
        assert A.check_uniqueness(M.krr(int(rng.integers(2, 12)), eps).probs).unique
        assert A.check_uniqueness(M.truncated_geometric(r1, r2, eps).probs).unique
        vals = sorted(rng.choice(np.arange(-20, 20), size=int(rng.integers(2, 8)), replace=False))
        assert A.check_uniqueness(M.geometric_columns(vals, eps)).unique

    def test_report_text(self):
        text = str(A.check_uniqueness(AMB.probs))
        assert text.startswith("unique: false\nrank: 2\nrequired_rank: 3\nwitness_theta:")

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            A.check_uniqueness(np.zeros((0, 0)))


class TestDistances:
    def test_tv_examples(self):
        assert A.total_variation([1, 0, 0], [0, 1, 0]) == 1
        assert A.total_variation([0.3, 0.7], [0.3, 0.7]) == 0
        assert A.total_variation([0.5, 0.5], [1, 0]) == 0.5

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 8))
    def test_tv_metric(self, seed, size):
        p, q, r = np.random.default_rng(seed).dirichlet(np.ones(size), size=3)
        assert A.total_variation(p, q) == pytest.approx(A.total_variation(q, p), abs=1e-12)
        assert A.total_variation(p, r) <= A.total_variation(p, q) + A.total_variation(q, r) + 1e-12
        assert 0 <= A.total_variation(p, q) <= 1 + 1e-12

    def test_kl_examples(self):
        assert A.kl_divergence([0.2, 0.8], [0.2, 0.8]) == 0
        assert A.kl_divergence([1, 0], [0.5, 0.5]) == pytest.approx(math.log(2))
        assert A.kl_divergence([1, 0], [0, 1]) == math.inf

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            A.total_variation([1], [0.5, 0.5])
        with pytest.raises(InvalidInputError):
            A.kl_divergence([1], [0.5, 0.5])


class TestEmd:
    def test_point_masses(self):
        assert A.emd([1, 0, 0], [0, 0, 1], A.line_ground(3)) == pytest.approx(2)

    def test_identical(self):
        p = [0.2, 0.3, 0.5]
        assert A.emd(p, p, A.line_ground(3)) == 0

    def test_three_point_bruteforce(self):
        p, q = [0.5, 0.5, 0], [0, 0.5, 0.5]
        ref = emd_bruteforce_3(p, q)
        assert ref == pytest.approx(1.0, abs=1e-12)
        assert A.emd(p, q, A.line_ground(3)) == pytest.approx(ref, abs=1e-9)

    def test_line_matches_cdf(self):
        rng = np.random.default_rng(21)
        for _ in range(30):
            size = int(rng.integers(2, 40))
            p, q = rng.dirichlet(np.ones(size) * 0.5, size=2)
            assert A.emd(p, q, A.line_ground(size)) == pytest.approx(emd_line_cdf(p, q), abs=1e-9)

    def test_near_identical_pairs(self):
        # tiny, widely spread excess masses used to trip the LP presolve
        rng = np.random.default_rng(24)
        for _ in range(200):
            p = rng.dirichlet(np.ones(100) * rng.choice([0.01, 0.1, 1.0]))
            q = p + rng.normal(scale=rng.choice([1e-3, 1e-6, 1e-12]), size=100) * (p > 1e-3)
            q = np.maximum(q, 0)
            q /= q.sum()
            assert A.emd(p, q, A.line_ground(100)) == pytest.approx(emd_line_cdf(p, q), abs=1e-9)

    def test_bounded_by_diameter_tv(self):
        rng = np.random.default_rng(22)
        g = M.Grid(0, 1, 0, 1, 4, 5, cell_side_km=0.5)
        ground = g.distance_km()
        for _ in range(20):
            p, q = rng.dirichlet(np.ones(g.size) * 0.3, size=2)
            assert A.emd(p, q, ground) <= ground.max() * A.total_variation(p, q) + 1e-9

    def test_san_francisco_grid_size(self):
        rng = np.random.default_rng(23)
        g = M.san_francisco_grid()
        p, q = rng.dirichlet(np.ones(g.size), size=2)
        val = A.emd(p, q, g.distance_km())
        assert 0 < val <= g.distance_km().max() * A.total_variation(p, q)

    def test_mass_mismatch(self):
        with pytest.raises(InvalidInputError):
            A.emd([1, 0], [0.5, 0.4], A.line_ground(2))


class TestTypesBound:
    def test_value(self):
        assert A.types_bound(10, 2, 1.0) == pytest.approx(121 / 1024)

    def test_vanishes(self):
        assert A.types_bound(100_000, 3, 0.1) < 1e-100

    def test_eventually_decreasing(self):
        vals = [A.types_bound(k, 3, 0.5) for k in range(60, 400)]
        assert np.all(np.diff(vals) < 0)

    def test_monte_carlo(self):
        rng = np.random.default_rng(17)
        row = M.krr(3, 1.0).probs[0]
        k, trials, delta = 200, 1000, 0.1
        hits = 0
        for _ in range(trials):
            q = np.bincount(sample_categorical(row, rng, k), minlength=3) / k
            # divergence in bits, matching the bound's base
            if A.kl_divergence(q, row) / math.log(2) > delta:
                hits += 1
        assert hits / trials <= A.types_bound(k, 3, delta)

    def test_invalid(self):
        with pytest.raises(InvalidInputError):
            A.types_bound(0, 3, 0.1)


class TestSurface:
    def test_boundary_maximum(self):
        pts = A.likelihood_surface(RR3.probs[:, [0, 1, 1, 2]], 51)
        best = max(pts, key=lambda p: p.value)
        assert (best.theta1, best.theta3) == (0.0, 0.0)
        assert best.value == pytest.approx(-6 * math.log(2), abs=1e-12)

    def test_ridge_for_singular_mechanism(self):
        pts = A.likelihood_surface(AMB.probs, 41)
        top = max(p.value for p in pts)
        ridge = [p.value for p in pts if abs(p.theta1 - p.theta3) < 1e-12]
        np.testing.assert_allclose(ridge, top, atol=1e-12)
        off = [p.value for p in pts if abs(p.theta1 - p.theta3) > 0.2]
        assert max(off) < top

    def test_triangular_count_and_csv(self, tmp_path):
        pts = A.likelihood_surface(M.identity(3).probs, 5)
        assert len(pts) == 15
        assert any(p.value == -math.inf for p in pts)
        A.surface_to_csv(pts, tmp_path / "s.csv")
        rows = list(csv.reader(open(tmp_path / "s.csv")))
        assert rows[0] == ["theta1", "theta3", "L"] and len(rows) == 16

    def test_wrong_dimension(self):
        with pytest.raises(InvalidInputError):
            A.likelihood_surface(M.identity(4).probs, 5)
