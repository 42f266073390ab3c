"""Coalescing particle system driven by one shared Brownian motion, plus the
mass-series container and decay-rate fit shared with the density solver.

Every step advances all survivors with the same increment, then each
unordered pair within distance ``delta`` coalesces with probability
``1 - exp(-R0 dt)``; one member of a coalescing pair, chosen by a fair coin,
is removed.  Pairs are resolved in lexicographic index order and pairs with
an already removed member are skipped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numba import njit

from . import engine
from .fields import FieldBundle
from .flow import step_ito, step_split
from .hamiltonian import TorusGeometry, wrap
from .stochastics import BrownianPath

R2_LINEAR = 0.98


class SupportError(ValueError):
    """Initial sampler keeps hitting the center exclusion balls."""


class WindowError(ValueError):
    """Fit window invalid for the series."""


# ---------------------------------------------------------------------------
# mass series and fits


@dataclass(frozen=True)
class MassSeries:
    """Total mass against time for one or more shared-noise paths.

    ``per_path`` has shape ``(paths, times)``; ``lo``/``hi`` bound the mean
    with a 95% bootstrap interval over paths (equal to the mean for a
    single path).
    """

    times: np.ndarray
    per_path: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_paths(cls, times, per_path, meta: dict | None = None, n_boot: int = 1000,
                   seed: int = 2024) -> "MassSeries":
        v = np.atleast_2d(np.asarray(per_path, dtype=float))
        mean = v.mean(axis=0)
        if v.shape[0] > 1:
            rng = np.random.default_rng(seed)
            idx = rng.integers(0, v.shape[0], size=(n_boot, v.shape[0]))
            means = np.stack([v[i].mean(axis=0) for i in idx])
            lo, hi = np.quantile(means, [0.025, 0.975], axis=0)
        else:
            lo, hi = mean.copy(), mean.copy()
        return cls(np.asarray(times, dtype=float), v, mean, lo, hi, dict(meta or {}))

    @property
    def n_paths(self) -> int:
        return self.per_path.shape[0]

    def at(self, t: float) -> tuple:
        """``(mean, lo, hi)`` at the recorded time nearest ``t``."""
        i = int(np.argmin(np.abs(self.times - t)))
        return float(self.mean[i]), float(self.lo[i]), float(self.hi[i])

    def rows(self) -> list[tuple]:
        return [(t, m, a, b, self.n_paths) for t, m, a, b in
                zip(self.times, self.mean, self.lo, self.hi)]


@dataclass(frozen=True)
class DecayFit:
    """Least-squares rate of ``log(mean mass)`` on a window.

    ``lo``/``hi`` are a 95% bootstrap interval over paths; ``linear`` flags
    ``r2 >= 0.98``.
    """

    rate: float
    lo: float
    hi: float
    r2: float
    intercept: float
    window: tuple
    n_points: int
    linear: bool


def _slope(t, y):
    tm = t.mean()
    ym = y.mean(axis=-1, keepdims=True)
    return ((t - tm) * (y - ym)).sum(axis=-1) / ((t - tm) ** 2).sum()


def fit_decay(series: MassSeries, window: Sequence[float], n_boot: int = 2000,
              seed: int = 7) -> DecayFit:
    """Exponential decay rate of the ensemble-mean mass on ``[t_a, t_b]``."""
    ta, tb = float(window[0]), float(window[1])
    t = series.times
    if not (ta < tb and ta >= t[0] - 1e-9 and tb <= t[-1] + 1e-9):
        raise WindowError(f"window [{ta}, {tb}] not inside [{t[0]}, {t[-1]}]")
    sel = (t >= ta - 1e-9) & (t <= tb + 1e-9)
    if sel.sum() < 3:
        raise WindowError("fewer than three samples in the window")
    ts = t[sel]
    m = series.mean[sel]
    if np.any(m <= 0):
        raise WindowError("nonpositive mass in the fit window")
    y = np.log(m)
    slope = float(_slope(ts, y))
    intercept = float(y.mean() - slope * ts.mean())
    resid = y - (intercept + slope * ts)
    sst = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / sst if sst > 0 else 1.0
    rate = -slope
    lo = hi = rate
    v = series.per_path[:, sel]
    if v.shape[0] > 1:
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, v.shape[0], size=(n_boot, v.shape[0]))
        means = np.stack([v[i].mean(axis=0) for i in idx])
        ok = np.all(means > 0, axis=1)
        rates = -_slope(ts, np.log(means[ok]))
        lo, hi = (float(q) for q in np.quantile(rates, [0.025, 0.975]))
    return DecayFit(rate, lo, hi, r2, intercept, (ta, tb), int(sel.sum()), r2 >= R2_LINEAR)


# ---------------------------------------------------------------------------
# ensemble


@dataclass(frozen=True)
class ParticleEnsemble:
    N: int
    positions: np.ndarray
    alive: np.ndarray
    R0: float
    delta: float
    alpha: float
    rng_seed: int
    scheme: str = "split"
    events: int = 0
    rng_state: dict | None = None

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    @property
    def mass(self) -> float:
        return self.n_alive / self.N


def sample_uniform_domain(geometry: TorusGeometry, n: int, r: float,
                          rng: np.random.Generator, max_draws: int | None = None) -> np.ndarray:
    """``n`` uniform points on ``D_r`` by rejection."""
    max_draws = 100 * n if max_draws is None else max_draws
    L1, L2 = geometry.periods
    out = np.empty((0, 2))
    drawn = 0
    while out.shape[0] < n:
        k = max(2 * (n - out.shape[0]), 16)
        if drawn + k > max_draws:
            k = max_draws - drawn
        if k <= 0:
            raise SupportError(f"rejection sampling exceeded {max_draws} draws")
        p = rng.random((k, 2)) * np.array([L1, L2])
        drawn += k
        if r > 0:
            p = p[geometry.center_distance(p) >= r]
        out = np.concatenate([out, p])
    return out[:n]


def init_ensemble(sampler, N: int, geometry: TorusGeometry, exclusion_r: float | None = None,
                  seed: int = 0, R0: float = 0.0, delta: float = 0.0, alpha: float = 1.0,
                  scheme: str = "split") -> ParticleEnsemble:
    """Draw ``N`` initial positions supported away from every center.

    ``sampler`` is ``"uniform"`` (uniform on ``D_r``), a 2-tuple (point mass)
    or a callable ``(rng, k) -> (k, 2)`` array whose draws are filtered by
    rejection.
    """
    if N < 2:
        raise ValueError("need at least two particles")
    if R0 < 0 or delta < 0:
        raise ValueError("R0 and delta must be nonnegative")
    r = geometry.exclusion_r if exclusion_r is None else float(exclusion_r)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    if isinstance(sampler, str):
        if sampler != "uniform":
            raise ValueError(f"unknown sampler {sampler!r}")
        pos = sample_uniform_domain(geometry, N, r, rng)
    elif callable(sampler):
        pos = np.empty((0, 2))
        drawn = 0
        while pos.shape[0] < N:
            if drawn >= 100 * N:
                raise SupportError(f"sampler support meets a center ball ({drawn} draws)")
            k = N - pos.shape[0]
            p = np.asarray(sampler(rng, k), dtype=float).reshape(-1, 2)
            drawn += p.shape[0]
            if r > 0:
                p = p[geometry.center_distance(p) >= r]
            pos = np.concatenate([pos, p])
        pos = pos[:N]
    else:
        x = np.asarray(sampler, dtype=float).reshape(2)
        if r > 0 and geometry.center_distance(x) < r:
            raise SupportError("point mass lies inside a center exclusion ball")
        pos = np.tile(x, (N, 1))
    L1, L2 = geometry.periods
    pos = np.stack([wrap(pos[:, 0], L1), wrap(pos[:, 1], L2)], axis=-1)
    coal_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    return ParticleEnsemble(N=N, positions=pos, alive=np.ones(N, dtype=bool), R0=float(R0),
                            delta=float(delta), alpha=float(alpha), rng_seed=int(seed),
                            scheme=scheme, rng_state=coal_rng.bit_generator.state)


@njit(inline="always", cache=True)
def _close(pos, i, j, d2max, L1, L2):
    d1 = pos[i, 0] - pos[j, 0]
    d1 -= L1 * math.floor(d1 / L1 + 0.5)
    e = pos[i, 1] - pos[j, 1]
    e -= L2 * math.floor(e / L2 + 0.5)
    return d1 * d1 + e * e <= d2max


@njit(cache=True)
def _neighbor_pairs(pos, delta, L1, L2):
    """All pairs ``i < j`` within minimal-image distance ``delta``.

    Cell list with bins no smaller than ``delta``; two passes (count, fill)
    so the output is allocated once.
    """
    n = pos.shape[0]
    d2max = delta * delta
    nb1 = max(1, min(1024, int(L1 / max(delta, 1e-12))))
    nb2 = max(1, min(1024, int(L2 / max(delta, 1e-12))))
    if nb1 < 3 or nb2 < 3:
        m = 0
        for i in range(n):
            for j in range(i + 1, n):
                if _close(pos, i, j, d2max, L1, L2):
                    m += 1
        pi = np.empty(m, dtype=np.int64)
        pj = np.empty(m, dtype=np.int64)
        m = 0
        for i in range(n):
            for j in range(i + 1, n):
                if _close(pos, i, j, d2max, L1, L2):
                    pi[m] = i
                    pj[m] = j
                    m += 1
        return pi, pj
    head = -np.ones(nb1 * nb2, dtype=np.int64)
    nxt = -np.ones(n, dtype=np.int64)
    cx = np.empty(n, dtype=np.int64)
    cy = np.empty(n, dtype=np.int64)
    for i in range(n - 1, -1, -1):
        a = min(nb1 - 1, int(pos[i, 0] / L1 * nb1))
        b = min(nb2 - 1, int(pos[i, 1] / L2 * nb2))
        cx[i] = a
        cy[i] = b
        c = a * nb2 + b
        nxt[i] = head[c]
        head[c] = i
    m = 0
    for sweep in range(2):
        if sweep == 1:
            pi = np.empty(m, dtype=np.int64)
            pj = np.empty(m, dtype=np.int64)
            m = 0
        for i in range(n):
            for da in range(-1, 2):
                for db in range(-1, 2):
                    j = head[((cx[i] + da) % nb1) * nb2 + (cy[i] + db) % nb2]
                    while j >= 0:
                        if j > i and _close(pos, i, j, d2max, L1, L2):
                            if sweep == 1:
                                pi[m] = i
                                pj[m] = j
                            m += 1
                        j = nxt[j]
    return pi, pj


def neighbor_pairs(pos, delta: float, periods) -> np.ndarray:
    """Pairs ``(i, j)``, ``i < j``, within distance ``delta``, sorted lexicographically."""
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    if pos.shape[0] < 2:
        return np.empty((0, 2), dtype=np.int64)
    pi, pj = _neighbor_pairs(pos, float(delta), float(periods[0]), float(periods[1]))
    order = np.lexsort((pj, pi))
    return np.stack([pi[order], pj[order]], axis=-1)


def _advance_positions(x, dW, dt, alpha, bundle, scheme):
    if x.shape[0] == 0:
        return x
    if scheme == "split" and bundle.coeffs.is_polynomial:
        return engine.advance(bundle, x, np.array([dW]), dt, alpha)
    step = step_split if scheme == "split" else step_ito
    return step(x, np.full(x.shape[0], dW), dt, alpha, bundle)


@njit(cache=True)
def _resolve(pi, pj, u, p_acc, idx, alive):
    events = 0
    for k in range(pi.size):
        if u[k, 0] >= p_acc:
            continue
        i = idx[pi[k]]
        j = idx[pj[k]]
        if not (alive[i] and alive[j]):
            continue
        if u[k, 1] < 0.5:
            alive[i] = False
        else:
            alive[j] = False
        events += 1
    return events


def coalesce(positions, alive, R0: float, delta: float, dt: float, periods,
             rng: np.random.Generator) -> tuple:
    """One thinning pass; returns ``(new_alive, n_events)``."""
    alive = alive.copy()
    if R0 <= 0:
        return alive, 0
    idx = np.nonzero(alive)[0]
    pairs = neighbor_pairs(positions[idx], delta, periods)
    if pairs.shape[0] == 0:
        return alive, 0
    u = rng.random((pairs.shape[0], 2))
    events = _resolve(pairs[:, 0], pairs[:, 1], u, -math.expm1(-R0 * dt), idx, alive)
    return alive, int(events)


def step_ensemble(e: ParticleEnsemble, dW: float, dt: float, bundle: FieldBundle,
                  rng: np.random.Generator | None = None) -> ParticleEnsemble:
    """Advance survivors with the shared increment ``dW`` and apply coalescence."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if rng is None:
        rng = np.random.default_rng()
        rng.bit_generator.state = e.rng_state
    pos = e.positions.copy()
    live = np.nonzero(e.alive)[0]
    pos[live] = _advance_positions(pos[live], float(dW), dt, e.alpha, bundle, e.scheme)
    alive, ev = coalesce(pos, e.alive, e.R0, e.delta, dt, bundle.geometry.periods, rng)
    return replace(e, positions=pos, alive=alive, events=e.events + ev,
                   rng_state=rng.bit_generator.state)


def run(e: ParticleEnsemble, path: BrownianPath, T: float, bundle: FieldBundle,
        record_every: int = 1, snapshot_times: Sequence[float] = ()) -> MassSeries:
    """Evolve the ensemble to ``T`` and record the surviving fraction.

    The returned series carries run metadata, the final ensemble and any
    requested position snapshots in ``meta``.
    """
    k_end = int(round(T / path.dt))
    if k_end > path.n_steps or k_end < 1:
        raise ValueError("horizon exceeds the Brownian path")
    rng = np.random.default_rng()
    rng.bit_generator.state = e.rng_state
    snaps = {int(round(t / path.dt)): t for t in snapshot_times}
    times, masses = [0.0], [e.mass]
    snapshots = {}
    n0 = e.n_alive
    pos = e.positions.copy()
    alive = e.alive.copy()
    events = e.events
    periods = bundle.geometry.periods
    for k in range(k_end):
        live = np.nonzero(alive)[0]
        pos[live] = _advance_positions(pos[live], float(path.increments[k]), path.dt,
                                       e.alpha, bundle, e.scheme)
        alive, ev = coalesce(pos, alive, e.R0, e.delta, path.dt, periods, rng)
        events += ev
        if (k + 1) % record_every == 0:
            times.append((k + 1) * path.dt)
            masses.append(alive.sum() / e.N)
        if (k + 1) in snaps:
            snapshots[snaps[k + 1]] = pos[alive].copy()
    e = replace(e, positions=pos, alive=alive, events=events,
                rng_state=rng.bit_generator.state)
    meta = {"N": e.N, "R0": e.R0, "delta": e.delta, "alpha": e.alpha,
            "rng_seed": e.rng_seed, "path": path.identity(), "scheme": e.scheme,
            "events": e.events, "removed": n0 - e.n_alive, "tie_break": "uniform_coin",
            "final": e, "snapshots": snapshots}
    return MassSeries.from_paths(np.array(times), np.array(masses)[None, :], meta)


def ensemble_mass(runs: Sequence[MassSeries]) -> MassSeries:
    """Combine single-path particle runs on a common time grid."""
    times = runs[0].times
    v = np.stack([r.per_path[0] for r in runs])
    return MassSeries.from_paths(times, v, {"n_runs": len(runs)})


def pde_loss_calibration(N: int, R0: float, delta: float) -> float:
    """Mean-field loss coefficient matching the particle system.

    For a smooth empirical density ``f`` with unit total mass, the expected
    rate of pair events is ``(R0/2) N^2 pi delta^2 int f^2``, so the mass
    fraction obeys ``dM/dt = -R0_pde int f^2`` with
    ``R0_pde = (1/2) R0 pi delta^2 N``.
    """
    return 0.5 * R0 * math.pi * delta ** 2 * N
