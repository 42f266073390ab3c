import math

import numpy as np
import pytest

from inertial_coalescence import particles as pt
from inertial_coalescence.stochastics import brownian_path

PI = math.pi


def brute_pairs(pos, delta, L):
    d = pos[:, None, :] - pos[None, :, :]
    d -= L * np.round(d / L)
    r2 = (d ** 2).sum(-1)
    i, j = np.nonzero(np.triu(r2 <= delta ** 2, 1))
    return np.stack([i, j], axis=1)


@pytest.mark.parametrize("n, delta", [(2000, 0.05), (300, 0.5), (50, 3.0), (200, 0.0)])
def test_neighbor_pairs_match_brute_force(n, delta):
    rng = np.random.default_rng(n)
    pos = rng.uniform(0, 2 * PI, size=(n, 2))
    got = pt.neighbor_pairs(pos, delta, (2 * PI, 2 * PI))
    want = brute_pairs(pos, delta, 2 * PI)
    assert np.array_equal(got, want)


def test_neighbor_pairs_identical_points():
    pos = np.full((100, 2), 1.0)
    assert pt.neighbor_pairs(pos, 0.01, (2 * PI, 2 * PI)).shape[0] == 4950


def test_uniform_init_respects_exclusion(trig_geometry):
    e = pt.init_ensemble("uniform", 1000, trig_geometry, seed=1)
    assert np.all(trig_geometry.center_distance(e.positions) >= 0.3)
    assert e.n_alive == 1000 and e.mass == 1.0


def test_point_mass_init(trig_geometry):
    e = pt.init_ensemble((PI / 4, PI / 4), 100, trig_geometry)
    assert np.all(e.positions == e.positions[0])
    with pytest.raises(pt.SupportError):
        pt.init_ensemble((PI / 2, 0.05), 10, trig_geometry)


def test_uniform_init_without_exclusion(trig_geometry):
    e = pt.init_ensemble("uniform", 20000, trig_geometry, exclusion_r=0.0, seed=3)
    d = trig_geometry.center_distance(e.positions)
    # fraction inside the 0.3 balls should match their area share
    share = 4 * PI * 0.09 / trig_geometry.area
    assert abs((d < 0.3).mean() - share) < 0.01


def test_sampler_hitting_centers_aborts(trig_geometry):
    c = trig_geometry.centers[0]
    with pytest.raises(pt.SupportError):
        pt.init_ensemble(lambda rng, k: np.tile(c, (k, 1)), 10, trig_geometry)


def test_init_validation(trig_geometry):
    with pytest.raises(ValueError):
        pt.init_ensemble("uniform", 1, trig_geometry)
    with pytest.raises(ValueError):
        pt.init_ensemble("uniform", 10, trig_geometry, R0=-1.0)


def test_zero_rate_is_pure_transport(trig_geometry, trig_bundle):
    e = pt.init_ensemble("uniform", 200, trig_geometry, seed=2, R0=0.0, delta=0.5)
    rng = np.random.default_rng(0)
    e2 = pt.step_ensemble(e, 0.03, 1e-3, trig_bundle, rng)
    assert np.all(e2.alive) and e2.events == 0


def test_thinning_probability(trig_geometry, trig_bundle):
    # two particles at a center (fixed point) with R0 dt = ln 2
    dt = 1e-3
    R0 = math.log(2) / dt
    hits = 0
    rng = np.random.default_rng(5)
    trials = 4000
    c = trig_geometry.centers[0]
    for _ in range(trials):
        pos = np.tile(c, (2, 1))
        alive, ev = pt.coalesce(pos, np.ones(2, bool), R0, 0.01, dt, trig_geometry.periods, rng)
        hits += ev
        assert alive.sum() == 2 - ev
    p = hits / trials
    assert abs(p - 0.5) < 4 * math.sqrt(0.25 / trials)


def test_zero_radius_never_coalesces(trig_geometry, trig_bundle):
    e = pt.init_ensemble("uniform", 300, trig_geometry, seed=4, R0=100.0, delta=0.0)
    s = pt.run(e, brownian_path(4, 0.2, 1e-3), 0.2, trig_bundle)
    assert np.all(s.mean == 1.0)


def test_far_pair_keeps_mass(trig_geometry, trig_bundle):
    pos = np.array([[PI / 4, PI / 4], [5 * PI / 4, 5 * PI / 4]])
    e = pt.init_ensemble(lambda rng, k: pos[:k], 2, trig_geometry, R0=10.0, delta=1e-3)
    s = pt.run(e, brownian_path(0, 0.5, 1e-3), 0.5, trig_bundle)
    assert np.all(s.mean == 1.0)


def test_shared_noise_rigidity(trig_geometry, trig_bundle):
    p = brownian_path(9, 0.3, 1e-3)
    a = pt.init_ensemble("uniform", 100, trig_geometry, seed=9)
    b = pt.init_ensemble("uniform", 100, trig_geometry, seed=9)
    ra = pt.run(a, p, 0.3, trig_bundle)
    rb = pt.run(b, p, 0.3, trig_bundle)
    assert np.array_equal(ra.meta["final"].positions, rb.meta["final"].positions)


def test_run_invariants(trig_geometry, trig_bundle):
    e = pt.init_ensemble("uniform", 500, trig_geometry, seed=6, R0=10.0, delta=0.1)
    s = pt.run(e, brownian_path(6, 2.0, 1e-3), 2.0, trig_bundle, record_every=10,
               snapshot_times=[1.0])
    m = s.per_path[0]
    assert np.all(np.diff(m) <= 0) and m[0] == 1.0 and np.all((m >= 0) & (m <= 1))
    assert s.meta["removed"] == s.meta["events"]
    fin = s.meta["final"]
    L = 2 * PI
    p = fin.positions[fin.alive]
    assert np.all((p >= 0) & (p < L))
    assert set(s.meta["snapshots"]) == {1.0}
    assert s.meta["tie_break"] == "uniform_coin"


def test_fit_exact_exponential():
    t = np.linspace(0, 10, 101)
    s = pt.MassSeries.from_paths(t, np.exp(-0.7 * t)[None, :])
    f = pt.fit_decay(s, (2, 10))
    assert f.rate == pytest.approx(0.7, abs=1e-6) and f.linear


def test_fit_inverse_linear_flags_curvature():
    # slope of log(1/(1+t)) over [2, 10] by least squares: computed oracle
    t = np.linspace(0, 10, 1001)
    s = pt.MassSeries.from_paths(t, (1 / (1 + t))[None, :])
    f = pt.fit_decay(s, (2, 10))
    sel = (t >= 2) & (t <= 10)
    want = -np.polyfit(t[sel], -np.log1p(t[sel]), 1)[0]
    assert f.rate == pytest.approx(want, rel=1e-9)
    assert f.r2 < 0.98 and not f.linear


def test_fit_window_errors():
    t = np.linspace(0, 1, 11)
    s = pt.MassSeries.from_paths(t, np.r_[np.ones(5), np.zeros(6)][None, :])
    with pytest.raises(pt.WindowError):
        pt.fit_decay(s, (0, 2))
    with pytest.raises(pt.WindowError):
        pt.fit_decay(s, (0, 1))


def test_calibration():
    assert pt.pde_loss_calibration(2000, 10.0, 0.05) == pytest.approx(0.5 * 10 * PI * 0.0025 * 2000)
