import math

import numpy as np
import pytest

from inertial_coalescence import flow as fl
from inertial_coalescence.fields import AlignedCoefficients, FieldBundle
from inertial_coalescence.stochastics import BrownianPath, brownian_path

PI = math.pi
X0 = np.array([PI / 4, PI / 4])


@pytest.mark.parametrize("step", [fl.step_ito, fl.step_split])
@pytest.mark.parametrize("x", [(PI / 2, 0.0), (3 * PI / 2, PI), (0.0, PI / 2), (PI, 3 * PI / 2)])
def test_fixed_points(trig_bundle, step, x):
    x = np.array(x)
    y = step(x, 0.3, 1e-3, 1.0, trig_bundle)
    assert np.allclose(y, x, atol=1e-15)


@pytest.mark.parametrize("alpha", [1e-6, 0.1, 1.0, 10.0, 1e6])
def test_drift_factor_range(trig_bundle, alpha):
    h = np.linspace(-1, 1, 11)
    f = 0.5 - trig_bundle.coeffs.beta(h, alpha)
    assert np.all((f > 0) & (f < 0.5))


def test_ito_step_formula(trig_bundle):
    x = np.array([0.7, 1.9])
    dW, dt, a = 0.02, 1e-3, 2.0
    want = x + trig_bundle.sigma_alpha(x) * dW + trig_bundle.b_alpha(x, a) * dt
    assert np.allclose(fl.step_ito(x, dW, dt, a, trig_bundle), want, atol=1e-15)


def test_compiled_matches_array(trig_bundle):
    paths = [brownian_path(s, 0.5, 1e-3) for s in range(3)]
    a = fl.simulate_ensemble(X0, paths, 1.0, trig_bundle, backend="compiled")
    b = fl.simulate_ensemble(X0, paths, 1.0, trig_bundle, backend="array")
    assert np.allclose(a.states, b.states, atol=1e-10)
    assert np.allclose(a.divg, b.divg, atol=1e-10)


def test_separatrix_start_stays(trig_bundle):
    tr = fl.simulate_flow((0.0, 1.0), brownian_path(1, 2.0, 1e-3), 1.0, trig_bundle)
    assert np.abs(tr.H_values).max() <= 1e-9
    assert fl.check_H_identity(tr) <= 1e-9


def test_strict_contraction_every_seed(trig_bundle):
    paths = [brownian_path(s, 10.0, 1e-4) for s in range(10)]
    ens = fl.simulate_ensemble(X0, paths, 1.0, trig_bundle, record_every=100)
    H0 = abs(trig_bundle.H(X0))
    assert np.all(np.abs(ens.H[:, -1]) < H0)
    for i in range(len(ens)):
        assert fl.monotonicity_violation(ens.H[i], ens.dt) == 0.0
        assert np.all(np.sign(ens.H[i]) == 1)
    env = fl.contraction_envelope(trig_bundle, 1.0, ens.times)
    assert np.all(np.abs(ens.H) <= env[None, :] * (1 + 1e-9))


def test_identity_self_convergence(trig_bundle):
    errs = []
    for dt in (1e-3, 5e-4):
        paths = [brownian_path(s, 5.0, dt) for s in range(10)]
        ens = fl.simulate_ensemble(X0, paths, 1.0, trig_bundle)
        errs.append(max(fl.check_H_identity(ens[i]) for i in range(len(ens))))
    assert errs[1] <= 0.75 * errs[0]


def test_small_alpha_conserves_H(trig_bundle):
    tr = fl.simulate_flow(X0, brownian_path(2, 1.0, 1e-3), 1e-6, trig_bundle)
    assert abs(tr.H_values[-1] - tr.H_values[0]) <= 1e-3
    assert tr.contraction_integral[-1] < 1e-5


def test_entry_time_trivial(trig_bundle):
    tr = fl.simulate_flow(X0, brownian_path(0, 0.1, 1e-3), 1.0, trig_bundle)
    assert fl.entry_time(tr, 0.6) == 0.0
    assert fl.entry_time(tr, 1e-9) is None


def test_entry_time_shrinks_with_alpha(trig_bundle):
    paths = [brownian_path(s, 60.0, 2e-3) for s in range(40)]
    med = []
    for a in (0.25, 0.5):
        ens = fl.simulate_ensemble(X0, paths, a, trig_bundle, record_every=5)
        med.append(np.median(fl.entry_times(ens, 0.01)))
    assert 0.4 <= med[1] / med[0] <= 0.7


def test_entry_time_bound_value(trig_bundle):
    T = fl.entry_time_bound(trig_bundle, 0.01, 1.0)
    g = trig_bundle.geometry.gamma_r
    lam = trig_bundle.lambda_star(0.3)
    assert T == pytest.approx(2 * 2 / lam * math.log(g / 0.01), rel=1e-12)


def test_occupation_zero_band(trig_bundle):
    paths = [brownian_path(s, 3.0, 1e-3) for s in range(5)]
    ens = fl.simulate_ensemble(X0, paths, 1.0, trig_bundle)
    q = trig_bundle.geometry.midpoints[0]
    rep = fl.occupation_report(ens, q, [0.0, 0.1], 1.0)
    assert np.all(rep.fractions[:, 0] == 0.0)
    assert np.all((rep.fractions >= 0) & (rep.fractions <= 1))
    with pytest.raises(ValueError):
        fl.occupation_report(ens, q, [0.1], 2.5)


def test_j_alpha_on_separatrix(trig_bundle):
    # on x1 = 0, div g = sin^2(x2)/2 >= 0 with zeros only at the midpoints
    paths = [brownian_path(s, 2.0, 1e-3) for s in range(5)]
    ens = fl.simulate_ensemble((0.0, PI / 4), paths, 1.0, trig_bundle)
    rep = fl.j_alpha_report(ens, 0.5, 1.0, trig_bundle)
    assert np.all(rep.J < 1.0)


def test_coefficient_bounds_along_paths(trig_bundle):
    c_sig, c_b = trig_bundle.coefficient_bounds
    paths = [brownian_path(s, 2.0, 1e-3) for s in range(5)]
    for a in (0.5, 4.0):
        ens = fl.simulate_ensemble(X0, paths, a, trig_bundle, record_every=10)
        x = ens.states.reshape(-1, 2)
        assert np.abs(trig_bundle.sigma_alpha(x)).max() <= c_sig + 1e-12
        assert np.abs(trig_bundle.b_alpha(x, a)).max() <= c_b + 1e-12


def test_strong_self_convergence(trig_bundle):
    base = [brownian_path(s, 1.0, 2.5e-4) for s in range(20)]
    ends = {}
    for f in (1, 2, 4):
        ps = [p.coarsen(f) for p in base]
        ends[f] = fl.simulate_ensemble(X0, ps, 1.0, trig_bundle).states[:, -1]
    P = trig_bundle.geometry.periods
    e_coarse = fl.torus_rms_distance(ends[4], ends[2], P)
    e_fine = fl.torus_rms_distance(ends[2], ends[1], P)
    assert e_coarse >= 1.3 * e_fine


def test_scheme_validation(trig_bundle):
    with pytest.raises(ValueError):
        fl.simulate_flow(X0, brownian_path(0, 0.1, 1e-3), 1.0, trig_bundle, scheme="heun")
    with pytest.raises(ValueError):
        fl.simulate_flow(X0, brownian_path(0, 0.1, 1e-3), 0.0, trig_bundle)


def test_ito_scheme_runs_and_drifts(trig_bundle):
    tr = fl.simulate_flow(X0, brownian_path(0, 1.0, 1e-3), 1.0, trig_bundle, scheme="ito")
    assert tr.scheme == "ito" and np.all(np.isfinite(tr.states))
    assert fl.check_H_identity(tr) < 0.5


def test_second_order_damping_at_center(trig_bundle):
    mu, eps = 0.05, 0.05
    dt = fl.max_second_order_dt(mu, eps, trig_bundle)
    n = int(round(0.2 / dt))
    # without noise the velocity only feels the implicit friction step
    p = BrownianPath(0, dt, n * dt, np.zeros(n))
    v0 = np.array([1e-3, 0.0])
    tr = fl.simulate_second_order((PI / 2, 0.0), v0, p, mu, eps, trig_bundle, record_every=1)
    t = tr.times[-1]
    ratio = tr.v[-1, 0] / v0[0]
    assert ratio == pytest.approx((1 + dt / mu) ** -n, rel=1e-12)
    assert ratio == pytest.approx(math.exp(-t / mu), rel=0.05)


def test_second_order_rejects_large_dt(trig_bundle):
    with pytest.raises(ValueError, match="use dt"):
        fl.simulate_second_order(X0, (0, 0), brownian_path(0, 1.0, 1e-2), 1e-3, 1e-3, trig_bundle)


def test_second_order_depends_on_alpha(trig_bundle):
    eps = 1e-2
    out = {}
    for a in (0.2, 5.0):
        mu = a * eps
        dt = 1e-2 * 0.2 / 50
        paths = [brownian_path(s, 1.0, dt) for s in range(30)]
        tr = fl.simulate_second_order_batch(X0, (0, 0), paths, mu, eps, trig_bundle)
        out[a] = np.abs(trig_bundle.H(np.stack([t.x[-1] for t in tr])))
    diff = out[0.2].mean() - out[5.0].mean()
    se = math.sqrt(out[0.2].var() / 30 + out[5.0].var() / 30)
    assert diff > 3 * se
