import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inertial_coalescence.stochastics import (OU_STREAM, brownian_path, n_steps, ou_path,
                                              stream_split)


def test_length_is_ceil():
    assert brownian_path(1, 1.0, 0.5).n_steps == 2
    assert brownian_path(1, 1.0, 0.3).n_steps == 4


@given(T=st.floats(0.01, 10.0), k=st.integers(1, 2000))
@settings(max_examples=60, deadline=None)
def test_n_steps_matches_ceil(T, k):
    dt = T / k
    assert n_steps(T, dt) == k


def test_deterministic():
    a = brownian_path(1, 1.0, 1e-3)
    b = brownian_path(1, 1.0, 1e-3)
    assert np.array_equal(a.increments, b.increments)
    assert not a.increments.flags.writeable


def test_sample_variance():
    # 99% chi-square band for n = 1e4 is about +-3.7%
    p = brownian_path(1, 10.0, 1e-3)
    v = p.increments[:10_000].var(ddof=1)
    assert abs(v / 1e-3 - 1.0) < 0.10


@pytest.mark.parametrize("T, dt", [(0.0, 0.1), (-1.0, 0.1), (1.0, 0.0), (1.0, -0.1), (1.0, 2.0),
                                   (math.inf, 0.1)])
def test_rejects_bad_parameters(T, dt):
    with pytest.raises(ValueError):
        brownian_path(0, T, dt)


def test_coarsen_sums_increments():
    p = brownian_path(3, 1.0, 1e-3)
    c = p.coarsen(10)
    assert c.n_steps == 100 and c.dt == pytest.approx(1e-2)
    assert np.allclose(c.values(), p.values()[::10])
    with pytest.raises(ValueError):
        p.coarsen(7)


def test_ou_starts_at_zero_and_follows_exact_update():
    p = brownian_path(5, 1.0, 1e-3)
    eps = 0.05
    z = ou_path(p, eps)
    assert z.values[0] == 0.0 and z.coupled
    decay = math.exp(-p.dt / eps)
    sd = math.sqrt(-math.expm1(-2 * p.dt / eps) / (2 * eps))
    xi = p.increments * sd / math.sqrt(p.dt)
    assert np.allclose(z.values[1:], decay * z.values[:-1] + xi, atol=1e-12)


def test_ou_large_epsilon_stays_small():
    p = brownian_path(2, 1.0, 1e-3)
    eps = 1e3
    assert abs(ou_path(p, eps).values[-1]) <= 5 * math.sqrt(1.0) / eps


def test_ou_stationary_variance():
    p = brownian_path(9, 10.0, 1e-4)
    z = ou_path(p, 0.1).values
    tail = z[z.size // 5:]
    assert abs(tail.var() / 5.0 - 1.0) < 0.15


def test_ou_uncoupled_stream_when_dt_exceeds_epsilon():
    p = brownian_path(4, 1.0, 1e-2)
    z = ou_path(p, 1e-3)
    assert not z.coupled and z.values[0] == 0.0


def test_ou_rejects_nonpositive_epsilon():
    with pytest.raises(ValueError):
        ou_path(brownian_path(0, 1.0, 0.1), 0.0)


def test_ou_refinement_consistency():
    # RMS difference at T between dt and dt/2 shrinks as dt is halved
    eps, T = 0.05, 1.0
    diffs = []
    for dt in (4e-3, 2e-3):
        d = []
        for s in range(100):
            fine = brownian_path(s, T, dt / 2)
            coarse = fine.coarsen(2)
            d.append(ou_path(fine, eps).values[-1] - ou_path(coarse, eps).values[-1])
        diffs.append(math.sqrt(np.mean(np.square(d))))
    # a finer base pair uses the next level down
    d = []
    for s in range(100):
        fine = brownian_path(s, T, 5e-4)
        d.append(ou_path(fine, eps).values[-1] - ou_path(fine.coarsen(2), eps).values[-1])
    diffs.append(math.sqrt(np.mean(np.square(d))))
    assert diffs[2] < diffs[1] < diffs[0]


def test_stream_split():
    assert stream_split(7, 0) == stream_split(7, 0)
    vals = {stream_split(7, i) for i in range(64)}
    assert len(vals) == 64
    assert stream_split(7, OU_STREAM) != stream_split(7, 0)
    with pytest.raises(ValueError):
        stream_split(7, -1)


def test_stream_correlation():
    a = brownian_path(stream_split(11, 0), 10.0, 1e-3).increments
    b = brownian_path(stream_split(11, 1), 10.0, 1e-3).increments
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05
