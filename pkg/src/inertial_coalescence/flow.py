"""Characteristic flow of the limiting SDE, its diagnostics, and the
second-order inertial system it approximates.

The limiting flow is ``dphi = nu xi o dW - g_alpha dt`` (Stratonovich), with
Ito form ``dphi = nu xi dW + (1/2 - beta_alpha) nu^2 Dxi xi dt``.  Two schemes
are available:

``"split"`` (default)
    Noise substep that keeps ``H`` fixed (Taylor step plus projection onto the
    level set), then an Euler drift substep.  Along the drift
    ``dH = -beta nu^2 Lambda H dt``, so ``|H|`` contracts step by step.
``"ito"``
    Euler-Maruyama on the Ito form.  Simple and consistent, but the
    ``|H|``-change per step has a random sign.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine
from .engine import FlowIntegrationError
from .fields import FieldBundle, _check_alpha
from .hamiltonian import wrap, wrapped_delta
from .stochastics import BrownianPath, OUPath, ou_path

SCHEMES = ("split", "ito")


def _wrap_points(x, bundle: FieldBundle):
    L1, L2 = bundle.geometry.periods
    return np.stack([wrap(x[..., 0], L1), wrap(x[..., 1], L2)], axis=-1)


def step_ito(x, dW, dt: float, alpha: float, bundle: FieldBundle):
    """One Euler-Maruyama step of the Ito form, wrapped to the torus."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    y = x + bundle.sigma_alpha(x) * dW[..., None] + bundle.b_alpha(x, alpha) * dt
    if not np.all(np.isfinite(y)):
        raise FlowIntegrationError("state became non-finite")
    return _wrap_points(y, bundle)


def step_split(x, dW, dt: float, alpha: float, bundle: FieldBundle):
    """One step of the level-set-preserving splitting scheme (array reference)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    _check_alpha(alpha)
    x = np.asarray(x, dtype=float)
    w = np.asarray(dW, dtype=float)[..., None]
    h = bundle.H(x)
    c = bundle.coeffs
    n = c.n(h)[..., None]
    beta = c.beta(h, alpha)[..., None]
    y = x + n * w * bundle.xi(x) + 0.5 * (n * w) ** 2 * bundle.dxi_xi(x)
    gH = bundle.grad_H(y)
    gg = np.sum(gH * gH, axis=-1)
    safe = gg > 1e-300
    f = np.where(safe, (h - bundle.H(y)) / np.where(safe, gg, 1.0), 0.0)[..., None]
    z = y + f * gH - beta * n ** 2 * bundle.dxi_xi(y) * dt
    if not np.all(np.isfinite(z)):
        raise FlowIntegrationError("state became non-finite")
    return _wrap_points(z, bundle)


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class FlowTrajectory:
    x0: tuple
    alpha: float
    times: np.ndarray
    states: np.ndarray
    H_values: np.ndarray
    contraction_integral: np.ndarray
    divg_integral: np.ndarray
    path_ref: str
    scheme: str = "split"

    def rows(self) -> list[tuple]:
        return list(zip(self.times, self.states[:, 0], self.states[:, 1], self.H_values,
                        self.contraction_integral, self.divg_integral))


@dataclass(frozen=True)
class FlowEnsemble:
    """Trajectories of one start point per path, stacked as ``[path, record]``."""

    x0: np.ndarray
    alpha: float
    times: np.ndarray
    states: np.ndarray
    H: np.ndarray
    contraction: np.ndarray
    divg: np.ndarray
    path_refs: tuple
    scheme: str = "split"

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i: int) -> FlowTrajectory:
        return FlowTrajectory(tuple(self.x0[i]), self.alpha, self.times, self.states[i],
                              self.H[i], self.contraction[i], self.divg[i],
                              self.path_refs[i], self.scheme)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


def _integrands(x, alpha: float, bundle: FieldBundle):
    h = bundle.H(x)
    c = bundle.coeffs
    contr = c.beta(h, alpha) * c.n(h) ** 2 * bundle.lambda_big(x)
    return h, contr, bundle.div_g_alpha_closed(x, alpha)


def _array_flow(x0, dW, dt, alpha, bundle, scheme, record_every):
    step = step_split if scheme == "split" else step_ito
    P, S = dW.shape
    R = S // record_every + 1
    xs = np.empty((R, P, 2))
    Hs = np.empty((R, P))
    Cs = np.empty((R, P))
    Ds = np.empty((R, P))
    x = _wrap_points(np.asarray(x0, dtype=float), bundle)
    h, pc, pd = _integrands(x, alpha, bundle)
    ic = np.zeros(P)
    idv = np.zeros(P)
    xs[0], Hs[0], Cs[0], Ds[0] = x, h, ic, idv
    for k in range(S):
        x = step(x, dW[:, k], dt, alpha, bundle)
        h, ac, ad = _integrands(x, alpha, bundle)
        ic = ic + 0.5 * dt * (pc + ac)
        idv = idv + 0.5 * dt * (pd + ad)
        pc, pd = ac, ad
        if (k + 1) % record_every == 0:
            r = (k + 1) // record_every
            xs[r], Hs[r], Cs[r], Ds[r] = x, h, ic, idv
    return xs, Hs, Cs, Ds


def _check_scheme(scheme: str) -> None:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")


def simulate_ensemble(x0, paths: Sequence[BrownianPath], alpha: float, bundle: FieldBundle,
                      scheme: str = "split", record_every: int = 1,
                      backend: str = "auto") -> FlowEnsemble:
    """Integrate one trajectory per path.

    Parameters
    ----------
    x0 : array_like, shape (2,) or (P, 2)
        Start point shared by all paths, or one per path.
    paths : sequence of BrownianPath
        Paths with a common ``dt`` and length.
    record_every : int
        Store every ``record_every``-th state; integrals are still accumulated
        on the full grid.
    backend : {"auto", "compiled", "array"}
        ``auto`` uses the compiled kernel whenever it applies.
    """
    _check_alpha(alpha)
    _check_scheme(scheme)
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one path")
    dt = paths[0].dt
    S = paths[0].n_steps
    if any(p.dt != dt or p.n_steps != S for p in paths):
        raise ValueError("paths must share dt and length")
    if S % record_every:
        raise ValueError("record_every must divide the number of steps")
    P = len(paths)
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (P, 2)).copy()
    dW = np.stack([p.increments for p in paths])
    use_compiled = (backend == "compiled" or
                    (backend == "auto" and scheme == "split" and bundle.coeffs.is_polynomial))
    if use_compiled:
        if scheme != "split":
            raise ValueError("the compiled kernel implements the split scheme only")
        out = engine.run_flow(bundle, x0[:, None, :], dW, dt, alpha, record_every)
        xs = out["x"][:, :, 0, :]
        Hs, Cs, Ds = out["H"][:, :, 0], out["contraction"][:, :, 0], out["divg"][:, :, 0]
    else:
        xs, Hs, Cs, Ds = _array_flow(x0, dW, dt, alpha, bundle, scheme, record_every)
    times = dt * record_every * np.arange(xs.shape[0])
    return FlowEnsemble(x0=x0, alpha=float(alpha), times=times,
                        states=np.ascontiguousarray(np.moveaxis(xs, 0, 1)),
                        H=np.ascontiguousarray(Hs.T), contraction=np.ascontiguousarray(Cs.T),
                        divg=np.ascontiguousarray(Ds.T),
                        path_refs=tuple(p.identity() for p in paths), scheme=scheme)


def simulate_flow(x0, path: BrownianPath, alpha: float, bundle: FieldBundle,
                  scheme: str = "split", record_every: int = 1,
                  backend: str = "auto") -> FlowTrajectory:
    """Single trajectory of the characteristic flow from ``x0``."""
    return simulate_ensemble(np.asarray(x0, dtype=float)[None, :], [path], alpha, bundle,
                             scheme, record_every, backend)[0]


def flow_map(points, path: BrownianPath, alpha: float, bundle: FieldBundle, t: float):
    """Positions ``phi(t, x)`` and ``int_0^t div g`` for many start points on one path.

    Returns unwrapped-consistent positions (wrapped to the torus) and the
    divergence integrals at the recorded time nearest ``t``.
    """
    k = int(round(t / path.dt))
    if k < 1 or k > path.n_steps:
        raise ValueError("t outside the path horizon")
    pts = np.asarray(points, dtype=float)
    dW = path.increments[None, :k]
    if bundle.coeffs.is_polynomial:
        out = engine.run_flow(bundle, pts[None, :, :], dW, path.dt, alpha, k)
        return out["x"][-1, 0], out["divg"][-1, 0]
    xs, _, _, Ds = _array_flow(pts, np.repeat(dW, pts.shape[0], axis=0), path.dt, alpha,
                               bundle, "split", k)
    return xs[-1], Ds[-1]


# ---------------------------------------------------------------------------
# diagnostics


def check_H_identity(traj: FlowTrajectory) -> float:
    """Max relative deviation of ``H(phi(t))`` from ``H(x0) exp(-int beta nu^2 Lambda)``."""
    pred = traj.H_values[0] * np.exp(-traj.contraction_integral)
    den = np.maximum(np.abs(pred), 1e-12)
    return float(np.max(np.abs(traj.H_values - pred) / den))


def monotonicity_violation(H_values, dt: float) -> float:
    """Largest per-step increase of ``|H|`` in excess of ``1e-6 dt`` (0 if none)."""
    a = np.abs(np.asarray(H_values))
    inc = np.diff(a, axis=-1) - 1e-6 * dt
    return float(max(0.0, inc.max())) if inc.size else 0.0


def entry_time(traj: FlowTrajectory, eta: float):
    """First recorded time with ``|H| <= eta``, or ``None``."""
    hit = np.nonzero(np.abs(traj.H_values) <= eta)[0]
    return float(traj.times[hit[0]]) if hit.size else None


def entry_times(ens: FlowEnsemble, eta: float) -> np.ndarray:
    """Entry times for every path (``nan`` where not reached)."""
    hit = np.abs(ens.H) <= eta
    first = np.argmax(hit, axis=1)
    return np.where(hit.any(axis=1), ens.times[first], np.nan)


def entry_time_bound(bundle: FieldBundle, eta: float, alpha: float,
                     r: float | None = None) -> float:
    """Deterministic time after which every trajectory from ``D_r`` has ``|H| <= eta``.

    ``T = 2 (l* + alpha) / (alpha m*^2 Lambda*(r)) log(gamma_r / eta)``.
    """
    _check_alpha(alpha)
    gamma = bundle.gamma(r)
    if not 0 < eta < gamma:
        raise ValueError("eta must lie in (0, gamma_r)")
    c = bundle.coeffs
    lam = bundle.lambda_star(r)
    return 2.0 * (c.lstar + alpha) / (alpha * c.m_star_sq * lam) * math.log(gamma / eta)


def contraction_envelope(bundle: FieldBundle, alpha: float, times, r: float | None = None):
    """``gamma_r exp(-beta_* m*^2 Lambda*(r) t)`` bounding ``|H|`` along the flow."""
    c = bundle.coeffs
    beta_star = alpha / (2.0 * (c.lstar + alpha))
    rate = beta_star * c.m_star_sq * bundle.lambda_star(r)
    return bundle.gamma(r) * np.exp(-rate * np.asarray(times))


def _window_slice(times, s: float, length: float) -> slice:
    if s < 0 or s + length > times[-1] + 1e-9:
        raise ValueError(f"window [{s}, {s + length}] exceeds the horizon {times[-1]}")
    i0 = int(np.searchsorted(times, s - 1e-12))
    i1 = int(np.searchsorted(times, s + length - 1e-12))
    return slice(i0, i1)


def _bootstrap_mean_ci(values, n_boot: int = 2000, seed: int = 12345, level: float = 0.95):
    v = np.asarray(values, dtype=float)
    if v.shape[0] < 2:
        m = v.mean(axis=0)
        return m, m
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, v.shape[0], size=(n_boot, v.shape[0]))
    means = v[idx].mean(axis=1)
    q = 0.5 * (1.0 - level)
    return np.quantile(means, q, axis=0), np.quantile(means, 1.0 - q, axis=0)


@dataclass(frozen=True)
class OccupationReport:
    """Fraction of ``[s, s + window]`` spent in bands around a midpoint coordinate.

    ``fractions`` has shape ``(paths, len(thetas))``; ``kappa0_hat`` is the
    least-squares slope through the origin of the mean fraction against
    ``theta`` and ``kappa0_max`` the largest mean/theta ratio.
    """

    midpoint: tuple
    kind: str
    thetas: np.ndarray
    window: tuple
    fractions: np.ndarray
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    kappa0_hat: float
    kappa0_max: float

    def ratio(self, theta: float) -> float:
        """``mean(theta) / mean(2 theta)`` when both bands were measured."""
        th = list(np.round(self.thetas, 12))
        i, j = th.index(round(theta, 12)), th.index(round(2 * theta, 12))
        return float(self.mean[i] / self.mean[j])


def occupation_report(ens: FlowEnsemble, q, thetas, s: float, window: float = 1.0,
                      kind: str | None = None, periods=None) -> OccupationReport:
    """Measure band occupation near midpoint ``q``.

    ``q`` is a :class:`~inertial_coalescence.hamiltonian.Midpoint` or a point
    with ``kind`` given (``'Z1xM2'`` tests coordinate 2, ``'M1xZ2'``
    coordinate 1).
    """
    if hasattr(q, "kind"):
        kind, point = q.kind, tuple(q.point)
    else:
        point = tuple(q)
        if kind is None:
            raise ValueError("kind is required when q is a bare point")
    axis = 1 if kind == "Z1xM2" else 0
    periods = periods or (2 * math.pi, 2 * math.pi)
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    sl = _window_slice(ens.times, s, window)
    coord = ens.states[:, sl, axis]
    d = np.abs(wrapped_delta(coord, point[axis], periods[axis]))
    fr = np.stack([np.where(th > 0, (d <= th).mean(axis=1), 0.0) for th in thetas], axis=1)
    mean = fr.mean(axis=0)
    lo, hi = _bootstrap_mean_ci(fr)
    pos = thetas > 0
    kap = float(np.dot(thetas[pos], mean[pos]) / np.dot(thetas[pos], thetas[pos])) if pos.any() else 0.0
    kmax = float(np.max(mean[pos] / thetas[pos])) if pos.any() else 0.0
    return OccupationReport(point, kind, thetas, (s, s + window), fr, mean, lo, hi, kap, kmax)


@dataclass(frozen=True)
class JAlphaReport:
    s: float
    alpha: float
    J: np.ndarray
    mean: float
    lo: float
    hi: float
    kappa_bar_hat: float


def j_alpha_report(ens: FlowEnsemble, s: float, alpha: float, bundle: FieldBundle,
                   window: float = 1.0) -> JAlphaReport:
    """Per-path ``J = exp(-int_s^{s+1} div g)`` and the implied contraction constant."""
    _window_slice(ens.times, s, window)
    i0 = int(np.argmin(np.abs(ens.times - s)))
    i1 = int(np.argmin(np.abs(ens.times - (s + window))))
    J = np.exp(-(ens.divg[:, i1] - ens.divg[:, i0]))
    m = float(J.mean())
    lo, hi = _bootstrap_mean_ci(J)
    kb = -math.log(m) / bundle.coeffs.chi(alpha) if m > 0 else math.inf
    return JAlphaReport(s, alpha, J, m, float(lo), float(hi), kb)


# ---------------------------------------------------------------------------
# second-order inertial system


@dataclass(frozen=True)
class SecondOrderTrajectory:
    mu: float
    epsilon: float
    times: np.ndarray
    x: np.ndarray
    v: np.ndarray
    ou_ref: str


def max_second_order_dt(mu: float, epsilon: float, bundle: FieldBundle) -> float:
    return min(mu / bundle.coeffs.lstar, epsilon) / 50.0


def simulate_second_order_batch(x0, v0, paths: Sequence[BrownianPath], mu: float,
                                epsilon: float, bundle: FieldBundle,
                                record_every: int | None = None) -> list:
    """Integrate ``mu dv = -lam(x) v dt + sigma(x) z dt``, ``dx = v dt`` for each path.

    The damping term is implicit, the forcing and position update explicit.
    By default only the initial and final states are kept.
    """
    if not (mu > 0 and epsilon > 0):
        raise ValueError("mu and epsilon must be positive")
    paths = list(paths)
    dt = paths[0].dt
    dt_max = max_second_order_dt(mu, epsilon, bundle)
    if dt > dt_max * (1 + 1e-12):
        raise ValueError(f"dt={dt:g} too large for mu={mu:g}, epsilon={epsilon:g}; "
                         f"use dt <= {dt_max:.3g}")
    S = paths[0].n_steps
    rec = S if record_every is None else int(record_every)
    z = np.stack([ou_path(p, epsilon).values for p in paths])
    P = len(paths)
    x = np.broadcast_to(np.asarray(x0, dtype=float), (P, 2)).copy()
    v = np.broadcast_to(np.asarray(v0, dtype=float), (P, 2)).copy()
    xs, vs = [x.copy()], [v.copy()]
    c = bundle.coeffs
    for k in range(S):
        h = bundle.H(x)
        lam = c.l(h)
        sig = c.r(h)[:, None] * bundle.xi(x)
        v = (v + (dt / mu) * sig * z[:, k, None]) / (1.0 + (dt / mu) * lam)[:, None]
        x = x + v * dt
        if (k + 1) % rec == 0:
            xs.append(_wrap_points(x, bundle))
            vs.append(v.copy())
    if not np.all(np.isfinite(x)):
        raise FlowIntegrationError("state became non-finite")
    times = dt * rec * np.arange(len(xs))
    X = np.stack(xs, axis=1)
    V = np.stack(vs, axis=1)
    return [SecondOrderTrajectory(mu, epsilon, times, X[i], V[i],
                                  f"ou(eps={epsilon!r});{paths[i].identity()}")
            for i in range(P)]


def simulate_second_order(x0, v0, path: BrownianPath, mu: float, epsilon: float,
                          bundle: FieldBundle, record_every: int | None = None
                          ) -> SecondOrderTrajectory:
    return simulate_second_order_batch(x0, v0, [path], mu, epsilon, bundle, record_every)[0]


def torus_rms_distance(a, b, periods) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    d1 = wrapped_delta(a[..., 0], b[..., 0], periods[0])
    d2 = wrapped_delta(a[..., 1], b[..., 1], periods[1])
    return float(np.sqrt(np.mean(d1 ** 2 + d2 ** 2)))
