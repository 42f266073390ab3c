"""Reproducible noise: Brownian increments, the exact Ornstein-Uhlenbeck
driver and derived independent streams.

Paths are drawn from counter-based Philox generators keyed by a 64-bit seed,
so a path is a pure function of ``(seed, dt, T)`` and distinct stream indices
are statistically independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal

# stream index reserved for the OU driver's own Gaussian draws
OU_STREAM = 0x5EED_0001


def n_steps(T: float, dt: float) -> int:
    """``ceil(T/dt)`` robust to the representation error of ``T/dt``."""
    q = T / dt
    k = round(q)
    if abs(q - k) <= 1e-9 * max(1.0, abs(q)):
        return int(k)
    return int(math.ceil(q))


def stream_split(seed: int, index: int) -> int:
    """Derive a 64-bit child seed for stream ``index`` of ``seed``."""
    if index < 0:
        raise ValueError("stream index must be nonnegative")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _generator(seed: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class BrownianPath:
    """Increments ``dW_k ~ N(0, dt)`` of one scalar Brownian motion on ``[0, T]``."""

    seed: int
    dt: float
    T: float
    increments: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def n_steps(self) -> int:
        return self.increments.size

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def values(self) -> np.ndarray:
        """``W(t_k)`` with ``W(0) = 0``."""
        return np.concatenate([[0.0], np.cumsum(self.increments)])

    def coarsen(self, factor: int) -> "BrownianPath":
        """Same Brownian motion sampled on a grid ``factor`` times coarser."""
        factor = int(factor)
        if factor < 1 or self.n_steps % factor:
            raise ValueError("factor must divide the number of steps")
        inc = self.increments.reshape(-1, factor).sum(axis=1)
        return BrownianPath(self.seed, self.dt * factor, self.T, inc)

    def identity(self) -> str:
        return f"seed={self.seed};dt={self.dt!r};T={self.T!r}"


def brownian_path(seed: int, T: float, dt: float) -> BrownianPath:
    """Generate ``ceil(T/dt)`` Brownian increments from ``seed``."""
    if not (T > 0 and math.isfinite(T)):
        raise ValueError("T must be positive and finite")
    if not (0 < dt <= T):
        raise ValueError("dt must satisfy 0 < dt <= T")
    n = n_steps(T, dt)
    inc = _generator(seed).standard_normal(n) * math.sqrt(dt)
    return BrownianPath(int(seed), float(dt), float(T), inc)


@dataclass(frozen=True)
class OUPath:
    """Exact-transition samples ``z(t_k)`` of ``eps dz = -z dt + dW``, ``z(0) = 0``.

    The stationary variance is ``1/(2 eps)``.  When ``dt <= eps`` the Gaussian
    innovation of each step is the rescaled Brownian increment of the same step,
    which couples ``z`` to the source path; otherwise it comes from a derived
    independent stream.
    """

    epsilon: float
    values: np.ndarray
    source: str
    coupled: bool

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def ou_path(path: BrownianPath, epsilon: float) -> OUPath:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    dt = path.dt
    decay = math.exp(-dt / epsilon)
    var = -math.expm1(-2.0 * dt / epsilon) / (2.0 * epsilon)
    coupled = dt <= epsilon
    if coupled:
        innov = path.increments * (math.sqrt(var) / math.sqrt(dt))
    else:
        innov = _generator(stream_split(path.seed, OU_STREAM)).standard_normal(path.n_steps)
        innov = innov * math.sqrt(var)
    z = np.empty(path.n_steps + 1)
    z[0] = 0.0
    z[1:] = signal.lfilter([1.0], [1.0, -decay], innov)
    return OUPath(float(epsilon), z, path.identity(), coupled)
