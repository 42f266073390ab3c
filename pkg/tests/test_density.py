import math

import numpy as np
import pytest
from scipy import integrate

from inertial_coalescence import density as dn
from inertial_coalescence.fields import AlignedCoefficients, FieldBundle
from inertial_coalescence.stochastics import brownian_path

PI = math.pi


def test_zero_loss_conserves(trig_bundle):
    f0 = dn.uniform_density(trig_bundle.geometry)
    sol = dn.solve_characteristics(f0, 32, brownian_path(1, 1.0, 1e-3), 1.0, 0.0, 1.0,
                                   trig_bundle, record_every=100)
    assert np.allclose(sol.h_det, sol.f0[None, :])
    m = dn.mass_timeseries(sol).mean
    assert np.all(m == m[0])


def test_zero_density(trig_bundle):
    f0 = dn.InitialDensity(lambda x: np.zeros(x.shape[:-1]), "zero")
    sol = dn.solve_characteristics(f0, 32, brownian_path(1, 0.5, 1e-3), 1.0, 10.0, 0.5,
                                   trig_bundle, record_every=100)
    assert np.all(sol.h_det == 0)


def test_initial_mass_derivative(trig_bundle):
    g = trig_bundle.geometry
    c = 0.7
    base = dn.uniform_density(g)
    f0 = dn.InitialDensity(lambda x: c * base(x), "c on D_r")
    R0 = 10.0
    sol = dn.solve_characteristics(f0, 64, brownian_path(2, 0.01, 1e-4), 1.0, R0, 0.01,
                                   trig_bundle)
    m = dn.mass_timeseries(sol).mean
    slope = (m[5] - m[0]) / (5e-4)
    want = -R0 * sol.weight * np.sum(sol.f0 ** 2)
    assert slope == pytest.approx(want, rel=0.05)


def test_initial_mass_matches_integral(trig_bundle):
    rho = 0.5
    f0 = dn.bump_density((PI / 4, PI / 4), rho)
    sol = dn.solve_characteristics(f0, 128, brownian_path(0, 1e-3, 1e-3), 1.0, 0.0, 1e-3,
                                   trig_bundle)
    radial, _ = integrate.quad(lambda s: math.exp(1 - 1 / (1 - s * s)) * s, 0, 1)
    exact = 2 * PI * rho ** 2 * radial
    assert dn.mass_timeseries(sol).mean[0] == pytest.approx(exact, rel=1e-4)


def test_mass_nonincreasing_and_positive(trig_bundle):
    f0 = dn.uniform_density(trig_bundle.geometry)
    for s in range(3):
        sol = dn.solve_characteristics(f0, 32, brownian_path(s, 2.0, 1e-3), 1.0, 10.0, 2.0,
                                       trig_bundle, record_every=10)
        m = dn.mass_timeseries(sol).mean
        assert np.all(np.diff(m) <= 0) and np.all(sol.h_det >= 0)
        assert np.allclose(sol.h_det[0], sol.f0)


def test_support_violation(trig_bundle):
    f0 = dn.InitialDensity(lambda x: np.ones(x.shape[:-1]), "one")
    with pytest.raises(dn.InputError):
        dn.solve_characteristics(f0, 32, brownian_path(0, 0.1, 1e-3), 1.0, 1.0, 0.1, trig_bundle)


def test_grid_nodes_inside_balls_zeroed(trig_bundle):
    g = trig_bundle.geometry
    f0 = dn.bump_density(g.centers[0] + np.array([0.5, 0.0]), 0.4)
    nodes, _ = dn.quadrature_grid(g, 64)
    v = dn.initial_values(f0, g, nodes)
    assert np.all(v[~g.in_domain(nodes)] == 0.0)
    assert np.any(v > 0)


def test_normalizations(trig_geometry):
    m = dn.uniform_density(trig_geometry, normalization="mass")
    nodes, w = dn.quadrature_grid(trig_geometry, 256)
    assert w * m(nodes).sum() == pytest.approx(1.0, rel=2e-3)
    with pytest.raises(dn.InputError):
        dn.uniform_density(trig_geometry, normalization="peak")


def test_rate_factor():
    c = AlignedCoefficients.constant(1.0, 1.0)
    assert dn.theoretical_rate_factor(1.0, c) == pytest.approx(0.5)
    assert dn.theoretical_rate_factor(1e9, c) == pytest.approx(1.0, rel=1e-8)
    assert dn.theoretical_rate_factor(1e-6, c) == pytest.approx(1e-6, rel=1e-5)
    c2 = AlignedCoefficients.constant(2.0, 1.0)
    assert dn.theoretical_rate_factor(1.0, c2) == pytest.approx(1 / 12)


def test_area_identity_and_loss_inequality(trig_bundle):
    g = trig_bundle.geometry
    f0 = dn.uniform_density(g)
    fam = dn.expected_mass_family(f0, 1.0, [0.0, 10.0], 3.0, range(4), 48, trig_bundle,
                                  skip_empty=False)
    assert np.abs(fam["area"].per_path / g.area - 1).max() < 1e-3
    zero = fam[0.0].per_path
    assert np.allclose(zero, zero[:, :1])
    assert dn.loss_inequality_violation(fam[10.0], 10.0, g.area) <= 1e-6
    assert fam[10.0].at(3.0)[0] <= dn.algebraic_bound(g, 10.0, 3.0)


def test_riccati_cross_check(trig_bundle):
    g = trig_bundle.geometry
    nodes, _ = dn.quadrature_grid(g, 32)
    nodes = nodes[g.in_domain(nodes)][::97][:10]
    f = np.full(nodes.shape[0], 1.0)
    err = dn.riccati_ode_check(brownian_path(3, 1.0, 1e-3), 1.0, 10.0, trig_bundle, nodes, f)
    assert err.max() <= 1e-4


def test_array_path_matches_compiled(trig_bundle):
    g = trig_bundle.geometry
    coeffs = AlignedCoefficients.constant(1.0, 1.0)
    opaque = AlignedCoefficients(l=coeffs.l, dl=coeffs.dl, r=coeffs.r, dr=coeffs.dr,
                                 label="callable")
    b2 = FieldBundle(g, opaque)
    assert not opaque.is_polynomial
    f0 = dn.uniform_density(g)
    a = dn.expected_mass(f0, 1.0, 10.0, 0.5, [1, 2], 32, trig_bundle)
    b = dn.expected_mass(f0, 1.0, 10.0, 0.5, [1, 2], 32, b2)
    assert np.allclose(a.per_path, b.per_path, rtol=1e-8)


def test_friction_suppresses_decay(trig_geometry):
    f0 = dn.uniform_density(trig_geometry)
    rates = {}
    for l in (1.0, 2.0):
        b = FieldBundle(trig_geometry, AlignedCoefficients.constant(l, 1.0))
        s = dn.expected_mass(f0, 1.0, 10.0, 8.0, range(20), 32, b)
        rates[l] = dn.fit_decay(s, (2.0, 8.0))
    assert rates[2.0].hi < rates[1.0].lo


def test_jacobian_matches_finite_differences(trig_bundle):
    g = trig_bundle.geometry
    nodes, _ = dn.quadrature_grid(g, 32)
    nodes = nodes[g.in_domain(nodes)][::53][:12]
    err = dn.jacobian_fd_check(brownian_path(4, 1.0, 1e-3), 1.0, trig_bundle, nodes, t=1.0)
    assert err.max() <= 0.02
