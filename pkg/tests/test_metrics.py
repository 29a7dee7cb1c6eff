"""Measure distances: tensor kernel norm, test-function norm, lower bounds."""
import json
import math

import numpy as np
import pytest
from scipy import stats

import spikefield.metrics as metrics
from spikefield.graphon import StepGraphon, modulus_of_continuity
from spikefield.meanfield import SpatialMeasure, initial_law, measure_from_atoms
from spikefield.metrics import (
    default_test_family,
    h1x_distance,
    h11_distance,
    phi_w_lb_distance,
    phi_w_norm,
    second_moment,
)


def full_cell_atom(x, mass=1.0):
    """Single atom with the uniform full-interval xi-factor."""
    return SpatialMeasure(1, [0], [x], [mass])


def random_measure(rng, m, n_atoms):
    return SpatialMeasure(m, rng.integers(0, m, n_atoms),
                          rng.normal(size=n_atoms), rng.random(n_atoms))


class TestH11:
    def test_zero_on_identical(self):
        rng = np.random.default_rng(0)
        mu = random_measure(rng, 4, 12)
        assert h11_distance(mu, mu).value == 0.0

    @pytest.mark.parametrize("x", [0.3, 1.0, 2.5])
    def test_two_delta_closed_form(self, x):
        # full-torus xi factor integrates to 1, so the squared distance is
        # 2 (Lambda(0) - Lambda(x)) = 1 - e^{-|x|}
        d = h11_distance(full_cell_atom(0.0), full_cell_atom(x))
        assert d.value == pytest.approx(math.sqrt(1 - math.exp(-abs(x))),
                                        abs=1e-9)

    def test_fourier_side_agreement(self):
        # transform of Lambda is 1/(1 + 4 pi^2 v^2); trapezoid in v plus the
        # analytic diagonal tail reproduces the kernel-sum norm
        xs = np.array([0.2, -0.4, 0.9])
        cs = np.array([1.0, -0.5, -0.5])
        mu1 = SpatialMeasure(1, [0], [xs[0]], [cs[0]])
        mu2 = SpatialMeasure(1, [0, 0], xs[1:], -cs[1:])
        kernel_side = h11_distance(mu1, mu2).value

        V, dv = 200.0, 0.02
        v = np.arange(-V, V + dv / 2, dv)
        nu_hat = cs @ np.exp(-2j * np.pi * np.outer(xs, v))
        F2 = np.trapezoid(np.abs(nu_hat) ** 2 / (1 + 4 * np.pi**2 * v**2),
                          dx=dv)
        F2 += float(np.sum(cs**2)) / np.pi * (np.pi / 2 - math.atan(2 * np.pi * V))
        assert abs(math.sqrt(F2) - kernel_side) <= 1e-6

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = random_measure(rng, 3, 7), random_measure(rng, 3, 9)
        assert h11_distance(a, b).value == pytest.approx(
            h11_distance(b, a).value, abs=1e-12)

    def test_triangle_inequality(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            a = random_measure(rng, 4, 6)
            b = random_measure(rng, 4, 8)
            c = random_measure(rng, 4, 5)
            dab = h11_distance(a, b).value
            dbc = h11_distance(b, c).value
            dac = h11_distance(a, c).value
            assert dac <= dab + dbc + 1e-10

    def test_mass_scaling_homogeneous(self):
        rng = np.random.default_rng(3)
        a, b = random_measure(rng, 2, 6), random_measure(rng, 2, 6)
        d1 = h11_distance(a, b).value
        a2 = SpatialMeasure(2, a.cell, a.x, 2.0 * a.mass)
        b2 = SpatialMeasure(2, b.cell, b.x, 2.0 * b.mass)
        assert h11_distance(a2, b2).value == pytest.approx(2 * d1, rel=1e-12)

    def test_cross_grid_same_measure(self):
        # xi-independent law on 2 and 4 cells is the same measure
        law = initial_law({"kind": "two_point", "a": 0.3, "b": -0.3})
        assert h11_distance(law.measure(2), law.measure(4)).value <= 1e-7

    def test_matches_x_marginal_on_full_cell(self):
        rng = np.random.default_rng(4)
        xa, ma = rng.normal(size=5), rng.random(5)
        xb, mb = rng.normal(size=7), rng.random(7)
        mu1 = SpatialMeasure(1, np.zeros(5, dtype=int), xa, ma)
        mu2 = SpatialMeasure(1, np.zeros(7, dtype=int), xb, mb)
        assert h11_distance(mu1, mu2).value == pytest.approx(
            h1x_distance((xa, ma), (xb, mb)), abs=1e-9)

    def test_prefix_route_matches_direct(self, monkeypatch):
        rng = np.random.default_rng(5)
        a, b = random_measure(rng, 3, 40), random_measure(rng, 3, 30)
        direct = h11_distance(a, b).value
        monkeypatch.setattr(metrics, "_DIRECT_PAIR_LIMIT", 1)
        assert h11_distance(a, b).value == pytest.approx(direct, rel=1e-9)

    def test_truncation_guard(self):
        mu = full_cell_atom(0.0)
        with pytest.raises(ValueError):
            h11_distance(mu, mu, K=5)

    def test_report_shape(self):
        r = h11_distance(full_cell_atom(0.0), full_cell_atom(1.0))
        assert r.metric == "h11" and r.exact
        assert r.params["K"] == 20 and r.params["m1"] == 1
        assert json.loads(r.to_json_str())["value"] == r.value


class TestPhiWNorm:
    def make_eps(self, m=64):
        return modulus_of_continuity(
            StepGraphon.from_kernel("uniform_attachment_limit", m))

    def test_zero_slice(self):
        assert phi_w_norm(np.zeros((4, 11)), 0.1, self.make_eps(4)) == 0.0

    def test_constant_slice(self):
        v = phi_w_norm(np.full((4, 11), 0.7), 0.1, self.make_eps(4))
        assert v == pytest.approx(0.7)

    def test_flat_modulus_makes_xi_variation_infinite(self):
        eps0 = modulus_of_continuity(StepGraphon.from_kernel("constant", 4, w0=1.0))
        vals = np.array([[1.0, 1.0], [0.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
        assert phi_w_norm(vals, 0.1, eps0) == math.inf

    def test_quadrature_oracle(self):
        # sin(2 pi xi) exp(-x^2) against the 1-max modulus; fine-grid oracle
        m, nx = 64, 1025
        xg = np.linspace(-4, 4, nx)
        dx = float(xg[1] - xg[0])
        xi_mid = (np.arange(m) + 0.5) / m
        vals = np.sin(2 * np.pi * xi_mid)[:, None] * np.exp(-xg**2)[None, :]
        eps = self.make_eps(m)
        v = phi_w_norm(vals, dx, eps)

        fine = 4096
        xif = (np.arange(fine) + 0.5) / fine
        xf = np.linspace(-4, 4, 8193)
        g = np.exp(-xf**2)
        tv = float(np.sum(np.abs(np.diff(g))))
        lip = float(np.max(np.abs(np.diff(g)))) / float(xf[1] - xf[0])
        shift_c = 0.0
        for k in range(1, m):
            h = k / m
            meas = float(np.mean(np.abs(
                np.sin(2 * np.pi * ((xif + h) % 1.0)) - np.sin(2 * np.pi * xif))))
            cap = float(eps(h))
            if cap > 0:
                shift_c = max(shift_c, meas / cap)
        oracle = max(1.0, tv, lip, shift_c)
        assert v == pytest.approx(oracle, rel=1e-2)

    def test_validation(self):
        eps = self.make_eps(2)
        with pytest.raises(ValueError):
            phi_w_norm(np.zeros((2, 1)), 0.1, eps)
        with pytest.raises(ValueError):
            phi_w_norm(np.zeros((2, 5)), 0.0, eps)


class TestPhiWLowerBound:
    def make_eps(self, m):
        return modulus_of_continuity(
            StepGraphon.from_kernel("uniform_attachment_limit", m))

    def test_zero_on_identical(self):
        rng = np.random.default_rng(6)
        mu = random_measure(rng, 8, 16)
        r = phi_w_lb_distance(mu, mu, self.make_eps(8))
        assert r.value == 0.0
        assert not r.exact

    def test_duality_upper_bound(self):
        # every normalized member has sup <= 1, so the pairing is at most
        # the total variation of the difference
        rng = np.random.default_rng(7)
        for _ in range(4):
            a, b = random_measure(rng, 4, 6), random_measure(rng, 4, 8)
            tv = (np.sum(a.mass) + np.sum(b.mass)) / 4
            assert phi_w_lb_distance(a, b, self.make_eps(4)).value <= tv + 1e-12

    def test_ramp_recovers_half_atom_shift(self):
        # atoms 0 and 0.5: best possible pairing is 0.5; the normalized ramp
        # x/2 gets half of it
        m = 4
        mu1 = measure_from_atoms(m, [0.0], [1.0])
        mu2 = measure_from_atoms(m, [0.5], [1.0])
        r = phi_w_lb_distance(mu1, mu2, self.make_eps(m))
        assert r.value >= 0.4 * 0.5
        assert r.value == pytest.approx(0.25, abs=1e-12)

    def test_monotone_under_translation(self):
        m = 4
        eps = self.make_eps(m)
        vals = []
        for d in (0.1, 0.3, 0.5, 1.0):
            vals.append(phi_w_lb_distance(
                measure_from_atoms(m, [0.0], [1.0]),
                measure_from_atoms(m, [d], [1.0]), eps).value)
        assert all(np.diff(vals) >= -1e-12)

    def test_empty_family(self):
        mu = measure_from_atoms(2, [0.0], [1.0])
        with pytest.raises(ValueError):
            phi_w_lb_distance(mu, mu, self.make_eps(2), family={"shapes": []})

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            phi_w_lb_distance(measure_from_atoms(2, [0.0], [1.0]),
                              measure_from_atoms(3, [0.0], [1.0]),
                              self.make_eps(2))

    def test_default_family_shape(self):
        fam = default_test_family()
        assert fam["q_max"] >= 1 and "ramp" in fam["shapes"]


class TestSecondMoment:
    def test_point_masses(self):
        assert second_moment(measure_from_atoms(3, [0.0], [1.0])) == 0.0
        assert second_moment(measure_from_atoms(5, [2.0], [1.0])) == pytest.approx(4.0)

    def test_mixed_cells(self):
        mu = measure_from_atoms(4, [1.0, -1.0], [0.5, 0.5])
        assert second_moment(mu) == pytest.approx(1.0)

    def test_empty(self):
        mu = SpatialMeasure(2, [], [], [])
        assert second_moment(mu) == 0.0


def test_weak_star_sequence_consistency():
    # empirical draws from a fixed law: both metrics decrease toward 0 and
    # order the sequence the same way
    law = initial_law({"kind": "two_point", "a": 0.3, "b": -0.3, "p": 0.5})
    rng = np.random.default_rng(1)
    hs, ps = [], []
    for N in (8, 16, 32, 64, 128):
        target = law.measure(N)
        eps = modulus_of_continuity(
            StepGraphon.from_kernel("uniform_attachment_limit", N))
        hv, pv = [], []
        for _ in range(12):
            xs = law.sample(rng, N)
            emp = SpatialMeasure(N, np.arange(N), xs, np.ones(N))
            hv.append(h11_distance(emp, target).value)
            pv.append(phi_w_lb_distance(emp, target, eps).value)
        hs.append(float(np.mean(hv)))
        ps.append(float(np.mean(pv)))
    assert all(np.diff(hs) < 0)
    assert all(np.diff(ps) < 0)
    assert hs[-1] < 0.3 * hs[0]
    rho = stats.spearmanr(hs, ps).statistic
    assert rho >= 0.9
