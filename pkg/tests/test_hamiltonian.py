import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inertial_coalescence.hamiltonian import (GeometryError, ProfileError, build_geometry,
                                              find_critical_points, find_zeros,
                                              make_fourier_profile, make_perturbed_trig_profile,
                                              make_sturm_liouville_profile, make_trig_profile,
                                              torus_distance, verify_conditions, wrap)

PI = math.pi


def test_trig_zeros_and_crits():
    p = make_trig_profile(1)
    assert np.allclose(p.zeros, [0.0, PI], atol=1e-12)
    assert np.allclose(p.crits, [PI / 2, 3 * PI / 2], atol=1e-12)


def test_phase_shift_gives_cosine():
    p = make_trig_profile(1, PI / 2)
    x = np.linspace(0, 2 * PI, 50)
    assert np.allclose(p(x), np.cos(x), atol=1e-14)
    assert np.allclose(find_zeros(p), [PI / 2, 3 * PI / 2], atol=1e-12)
    assert np.allclose(find_critical_points(p), [0.0, PI], atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3, -2])
def test_wave_number(k):
    p = make_trig_profile(k)
    assert len(p.zeros) == len(p.crits) == 2 * abs(k)
    assert verify_conditions(p).N == abs(k)


def test_zero_wave_number_rejected():
    with pytest.raises(ProfileError):
        make_trig_profile(0)


def test_derivatives_match_finite_differences():
    p = make_perturbed_trig_profile(0.25)
    x = np.linspace(0, 2 * PI, 37)
    h = 1e-5
    for lo, hi in ((p, p.d1), (p.d1, p.d2), (p.d2, p.d3)):
        fd = (lo(x + h) - lo(x - h)) / (2 * h)
        assert np.allclose(fd, hi(x), atol=1e-8)


def test_perturbed_structure():
    p = make_perturbed_trig_profile(0.25)
    assert np.allclose(p.zeros, [0.0, PI], atol=1e-12)
    c = p.crits
    assert len(c) == 2 and 0 < c[0] < PI < c[1] < 2 * PI
    assert np.allclose(np.cos(c) + 0.25 * np.cos(2 * c), 0.0, atol=1e-12)
    rep = verify_conditions(p)
    assert rep.passed and rep.N == 1
    assert np.max(np.abs(p(np.linspace(0, 2 * PI, 4001)))) == pytest.approx(1.0, abs=1e-6)


def test_perturbed_zero_amplitude_is_sine():
    p = make_perturbed_trig_profile(0.0)
    assert np.allclose(p.zeros, [0.0, PI], atol=1e-12)
    x = np.linspace(0, 2 * PI, 21)
    assert np.allclose(p(x), np.sin(x), atol=1e-14)


def test_sine_passes_with_N1():
    rep = verify_conditions(make_trig_profile(1))
    assert rep.passed and rep.N == 1
    assert set(rep.checks) >= {"H1", "H2", "H3"}


def test_double_zero_fails_simple_zero_condition():
    # sin^2 x = 1/2 - cos(2x)/2
    p = make_fourier_profile([0.5, 0.0, -0.5], [0.0, 0.0, 0.0])
    rep = verify_conditions(p)
    assert not rep.passed and "H1" in rep.failed()


def test_constant_potential_mode_is_trigonometric():
    p = make_sturm_liouville_profile(lambda x: np.zeros_like(x), 1)
    x = 2 * PI * np.arange(512) / 512
    u = p(x)
    best = max(abs(np.dot(u, np.sin(x + ph))) / (np.linalg.norm(u) * np.linalg.norm(np.sin(x + ph)))
               for ph in np.linspace(0, PI, 721))
    assert best >= 0.999


def test_sturm_liouville_cosine_potential_passes():
    V = lambda x: 0.3 * np.cos(x)
    p = make_sturm_liouville_profile(V, 1)
    assert p.params["eigenvalue"] > 0.3
    rep = verify_conditions(p)
    assert rep.passed
    # dense-grid sign oracle for h h''
    x = np.linspace(0, 2 * PI, 20001)
    assert np.max(p(x) * p.d2(x)) <= 1e-10


def test_sturm_liouville_second_harmonic_has_four_zeros():
    p = make_sturm_liouville_profile(lambda x: np.zeros_like(x), 3)
    assert p.params["eigenvalue"] == pytest.approx(4.0, abs=1e-8)
    assert len(p.zeros) == 4


def test_sturm_liouville_rejects_low_eigenvalue():
    with pytest.raises(ProfileError, match="lambda_n - V > 0"):
        make_sturm_liouville_profile(lambda x: 2.0 * np.cos(x), 0)


def test_sturm_liouville_grid_size_check():
    with pytest.raises(ProfileError):
        make_sturm_liouville_profile(lambda x: np.zeros_like(x), 1, grid_size=100)


def test_geometry_counts(trig_geometry):
    g = trig_geometry
    assert len(g.cells) == 4 and len(g.centers) == 4
    assert len(g.corners) == 4 and len(g.midpoints) == 8
    kinds = [m.kind for m in g.midpoints]
    assert kinds.count("Z1xM2") == 4 and kinds.count("M1xZ2") == 4


def test_center_value(trig_geometry):
    c = [tuple(np.round(p, 12)) for p in trig_geometry.centers]
    assert (round(PI / 2, 12), 0.0) in c
    assert trig_geometry.H(np.array([PI / 2, 0.0])) == pytest.approx(1.0)


def test_gamma_r_dominates_grid(trig_geometry):
    g = trig_geometry
    assert g.gamma_r < 1.0
    x = np.linspace(0, 2 * PI, 401, endpoint=False)
    P = np.stack(np.meshgrid(x, x, indexing="ij"), axis=-1).reshape(-1, 2)
    inside = g.in_domain(P)
    assert np.all(np.abs(g.H(P[inside])) <= g.gamma_r + 1e-12)


def test_cell_signs_constant(trig_geometry):
    rng = np.random.default_rng(0)
    for cell in trig_geometry.cells:
        a1, b1 = cell.x1
        a2, b2 = cell.x2
        u = rng.uniform(0.02, 0.98, size=(500, 2))
        pts = np.stack([a1 + u[:, 0] * ((b1 - a1) % (2 * PI)), a2 + u[:, 1] * ((b2 - a2) % (2 * PI))], -1)
        assert np.all(np.sign(trig_geometry.H(pts)) == cell.sign)


def test_sets_disjoint(trig_geometry):
    g = trig_geometry
    mids = g.midpoint_array()
    for A, B in ((g.centers, g.corners), (g.centers, mids), (g.corners, mids)):
        d = torus_distance(A[:, None, :], B[None, :, :], g.periods)
        assert d.min() > 0.1


def test_overlapping_balls_rejected():
    with pytest.raises(GeometryError):
        build_geometry(make_trig_profile(1), make_trig_profile(1, PI / 2), 1.7)


def test_failing_profile_rejected():
    bad = make_fourier_profile([0.5, 0.0, -0.5], [0.0, 0.0, 0.0])
    with pytest.raises(GeometryError):
        build_geometry(bad, make_trig_profile(1))


@given(x=st.floats(-100, 100), L=st.floats(0.5, 10))
@settings(max_examples=100, deadline=None)
def test_wrap_in_fundamental_domain(x, L):
    y = wrap(x, L)
    assert 0.0 <= y < L
    assert math.isclose(math.remainder(x - y, L), 0.0, abs_tol=1e-9 * max(1.0, abs(x)))


@given(k=st.integers(1, 4), phase=st.floats(0, 2 * PI))
@settings(max_examples=25, deadline=None)
def test_trig_structure_theorem(k, phase):
    p = make_trig_profile(k, phase)
    Z, M = p.zeros, p.crits
    assert len(Z) == len(M) == 2 * k
    allp = np.sort(np.concatenate([Z, M]))
    tags = [0 if np.min(np.abs(Z - v)) < 1e-9 else 1 for v in allp]
    assert all(tags[i] != tags[i + 1] for i in range(len(tags) - 1))
