"""Transport with quadratic loss solved along characteristics.

Along the characteristic flow ``phi`` the density ``h(t, x) = f(t, phi(t, x))``
obeys the Riccati equation ``dh/dt = div g(phi) h - R0 h^2``, whose solution
multiplied by the Jacobian ``|det psi| = exp(-D)``, ``D = int_0^t div g``, is

    h |det psi| = f0 / (1 + R0 f0 I(t)),    I(t) = int_0^t exp(D(s)) ds.

Total mass is the midpoint quadrature of this product over a uniform grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import engine
from .fields import AlignedCoefficients, FieldBundle, _check_alpha
from .flow import _array_flow, simulate_flow
from .hamiltonian import TorusGeometry, torus_distance
from .particles import DecayFit, MassSeries, fit_decay
from .stochastics import BrownianPath, brownian_path


class InputError(ValueError):
    """Initial density violates the support condition or is malformed."""


@dataclass(frozen=True)
class InitialDensity:
    """Bounded nonnegative initial density with a readable label.

    ``func`` maps points ``(..., 2)`` to values; the solver zeroes it inside
    the center exclusion balls.
    """

    func: Callable
    label: str
    params: dict = field(default_factory=dict)

    def __call__(self, x):
        return np.asarray(self.func(np.asarray(x, dtype=float)), dtype=float)


def uniform_density(geometry: TorusGeometry, r: float | None = None,
                    normalization: str = "height") -> InitialDensity:
    """Constant density on ``D_r``.

    ``normalization='height'`` gives the indicator of ``D_r`` (value 1);
    ``'mass'`` divides by ``|D_r|`` so the total mass is one.
    """
    r = geometry.exclusion_r if r is None else float(r)
    area = geometry.area - len(geometry.centers) * math.pi * r * r
    if normalization == "height":
        level = 1.0
    elif normalization == "mass":
        level = 1.0 / area
    else:
        raise InputError(f"unknown normalization {normalization!r}")
    f = lambda x: np.where(geometry.center_distance(x) >= r, level, 0.0)
    return InitialDensity(f, f"uniform(r={r}, {normalization})",
                          {"r": r, "level": level, "normalization": normalization})


def bump_density(center, radius: float, height: float = 1.0,
                 periods=(2 * math.pi, 2 * math.pi)) -> InitialDensity:
    """Smooth compactly supported bump ``height exp(1 - 1/(1 - rho^2))``."""
    c = np.asarray(center, dtype=float)

    def f(x):
        rho2 = (torus_distance(x, c, periods) / radius) ** 2
        inside = rho2 < 1.0
        safe = np.where(inside, rho2, 0.0)
        return np.where(inside, height * np.exp(1.0 - 1.0 / (1.0 - safe)), 0.0)

    return InitialDensity(f, f"bump(c={tuple(c)}, r={radius})",
                          {"center": tuple(c), "radius": radius, "height": height})


def sum_of_bumps(bumps: Sequence[InitialDensity]) -> InitialDensity:
    return InitialDensity(lambda x: sum(b(x) for b in bumps),
                          "sum(" + ", ".join(b.label for b in bumps) + ")")


def quadrature_grid(geometry: TorusGeometry, grid_size: int) -> tuple:
    """Midpoint nodes ``(M, 2)`` of a ``grid_size^2`` tensor grid and the common weight."""
    if grid_size < 32:
        raise InputError("grid_size must be at least 32")
    L1, L2 = geometry.periods
    g1 = (np.arange(grid_size) + 0.5) * L1 / grid_size
    g2 = (np.arange(grid_size) + 0.5) * L2 / grid_size
    X1, X2 = np.meshgrid(g1, g2, indexing="ij")
    nodes = np.stack([X1.ravel(), X2.ravel()], axis=-1)
    return nodes, L1 * L2 / grid_size ** 2


def initial_values(f0: InitialDensity, geometry: TorusGeometry, nodes) -> np.ndarray:
    """``f0`` at the nodes, zero inside the exclusion balls.

    Raises
    ------
    InputError
        If ``f0`` is negative, non-finite or positive at a center.
    """
    at_centers = f0(geometry.centers)
    if np.any(at_centers > 0):
        raise InputError("initial density is positive at a center point")
    v = f0(nodes)
    if not np.all(np.isfinite(v)) or np.any(v < 0):
        raise InputError("initial density must be finite and nonnegative")
    return np.where(geometry.in_domain(nodes), v, 0.0)


@dataclass(frozen=True)
class CharacteristicSolution:
    """Per-node closed-form solution on one shared-noise path.

    ``D`` and ``I`` have shape ``(times, nodes)``.
    """

    nodes: np.ndarray
    weight: float
    f0: np.ndarray
    times: np.ndarray
    D: np.ndarray
    I: np.ndarray
    R0: float
    alpha: float
    path_ref: str

    @property
    def det_psi(self) -> np.ndarray:
        return np.exp(-self.D)

    @property
    def h_det(self) -> np.ndarray:
        """``h |det psi|`` from the inverse-affine closed form."""
        return self.f0 / (1.0 + self.R0 * self.f0 * self.I)

    @property
    def h_alpha(self) -> np.ndarray:
        return self.h_det * np.exp(self.D)


def _dW(paths: Sequence[BrownianPath], T: float):
    dt = paths[0].dt
    k = int(round(T / dt))
    if k > paths[0].n_steps or any(p.dt != dt for p in paths):
        raise ValueError("paths must share dt and cover the horizon")
    return np.stack([p.increments[:k] for p in paths]), dt, k


def _array_density(nodes, f0, bundle, dW, dt, alpha, record_every):
    """Reference path for non-polynomial coefficients: per-node D and I arrays."""
    P, S = dW.shape
    out_D, out_I = [], []
    for ip in range(P):
        x0 = nodes
        xs, Hs, Cs, Ds = _array_flow(x0, np.repeat(dW[ip:ip + 1], nodes.shape[0], axis=0),
                                     dt, alpha, bundle, "split", 1)
        E = np.exp(Ds)
        I = np.concatenate([np.zeros((1, nodes.shape[0])),
                            np.cumsum(0.5 * dt * (E[1:] + E[:-1]), axis=0)])
        out_D.append(Ds[::record_every])
        out_I.append(I[::record_every])
    return np.stack(out_D), np.stack(out_I)


def solve_characteristics(f0: InitialDensity, grid_size: int, path: BrownianPath, alpha: float,
                          R0: float, T: float, bundle: FieldBundle,
                          record_every: int = 1) -> CharacteristicSolution:
    """Closed-form solution at every grid node for one Brownian path."""
    _check_alpha(alpha)
    if R0 < 0:
        raise InputError("R0 must be nonnegative")
    nodes, w = quadrature_grid(bundle.geometry, grid_size)
    fv = initial_values(f0, bundle.geometry, nodes)
    dW, dt, k = _dW([path], T)
    if bundle.coeffs.is_polynomial:
        out = engine.run_density(bundle, nodes, fv, w, dW, dt, alpha, record_every, [R0],
                                 store_nodes=True)
        D, I = out["D"][0], out["I"][0]
    else:
        D, I = (a[0] for a in _array_density(nodes, fv, bundle, dW, dt, alpha, record_every))
    times = dt * record_every * np.arange(D.shape[0])
    return CharacteristicSolution(nodes, w, fv, times, D, I, float(R0), float(alpha),
                                  path.identity())


def mass_timeseries(sol: CharacteristicSolution) -> MassSeries:
    m = sol.weight * sol.h_det.sum(axis=1)
    return MassSeries.from_paths(sol.times, m[None, :],
                                 {"R0": sol.R0, "alpha": sol.alpha, "path": sol.path_ref})


def jacobian_area(sol: CharacteristicSolution) -> np.ndarray:
    """Quadrature of ``|det psi|`` over the torus; equals the torus area exactly."""
    return sol.weight * sol.det_psi.sum(axis=1)


def expected_mass_family(f0: InitialDensity, alpha: float, R0s: Sequence[float], T: float,
                         seeds: Sequence[int], grid_size: int, bundle: FieldBundle,
                         dt: float = 1e-3, record_every: int = 10, skip_empty: bool = True
                         ) -> dict:
    """Ensemble masses for several loss rates sharing the same flows.

    Returns ``{R0: MassSeries}`` plus the key ``'area'`` holding the per-path
    Jacobian quadrature (meaningful only with ``skip_empty=False``).
    """
    _check_alpha(alpha)
    R0s = [float(r) for r in R0s]
    if any(r < 0 for r in R0s):
        raise InputError("R0 must be nonnegative")
    nodes, w = quadrature_grid(bundle.geometry, grid_size)
    fv = initial_values(f0, bundle.geometry, nodes)
    paths = [brownian_path(s, T, dt) for s in seeds]
    dW, dt, k = _dW(paths, T)
    active = np.nonzero(fv > 0)[0] if skip_empty else np.arange(nodes.shape[0])
    if bundle.coeffs.is_polynomial:
        out = engine.run_density(bundle, nodes, fv, w, dW, dt, alpha, record_every, R0s,
                                 active=active)
        mass, area = out["mass"], out["area"]
    else:
        D, I = _array_density(nodes[active], fv[active], bundle, dW, dt, alpha, record_every)
        fa = fv[active]
        mass = np.stack([w * (fa / (1.0 + r * fa * I)).sum(axis=-1) for r in R0s], axis=-1)
        area = w * np.exp(-D).sum(axis=-1)
    times = dt * record_every * np.arange(mass.shape[1])
    meta = {"alpha": alpha, "grid_size": grid_size, "dt": dt, "seeds": list(seeds),
            "f0": f0.label}
    res = {r: MassSeries.from_paths(times, mass[:, :, i], {**meta, "R0": r})
           for i, r in enumerate(R0s)}
    res["area"] = MassSeries.from_paths(times, area, {**meta, "quantity": "jacobian_area"})
    return res


def expected_mass(f0: InitialDensity, alpha: float, R0: float, T: float, seeds: Sequence[int],
                  grid_size: int, bundle: FieldBundle, dt: float = 1e-3,
                  record_every: int = 10) -> MassSeries:
    """Ensemble-mean mass with a bootstrap interval across Brownian seeds."""
    return expected_mass_family(f0, alpha, [R0], T, seeds, grid_size, bundle, dt,
                                record_every)[float(R0)]


def theoretical_rate_factor(alpha: float, coeffs: AlignedCoefficients) -> float:
    """``alpha r(0)^2 / (l(0)^2 (l(0) + alpha))``."""
    _check_alpha(alpha)
    l0, r0 = coeffs.l_at0, coeffs.r_at0
    return alpha * r0 ** 2 / (l0 ** 2 * (l0 + alpha))


def algebraic_bound(geometry: TorusGeometry, R0: float, t) -> np.ndarray:
    """``|T^2| / (R0 t)``, valid for any initial density."""
    return geometry.area / (R0 * np.asarray(t, dtype=float))


@dataclass(frozen=True)
class RateSummary:
    alphas: np.ndarray
    rates: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    r2: np.ndarray
    factors: np.ndarray
    kappa_hat: np.ndarray
    window: tuple
    fits: tuple = ()
    series: tuple = ()

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.rates) >= 0))

    @property
    def dispersion(self) -> float:
        """max/min of the implied contraction constants."""
        return float(self.kappa_hat.max() / self.kappa_hat.min())

    def rows(self) -> list[tuple]:
        return list(zip(self.alphas, self.rates, self.lo, self.hi, self.r2, self.factors,
                        self.kappa_hat))


def rate_curve(f0: InitialDensity, alphas: Sequence[float], R0: float, T: float,
               seeds: Sequence[int], bundle: FieldBundle, grid_size: int = 64,
               dt: float = 1e-3, window: Sequence[float] = (3.0, 12.0),
               record_every: int = 10, series: dict | None = None) -> RateSummary:
    """Fitted decay rate per alpha and the implied ``kappa_hat = rate / factor``.

    ``series`` may supply precomputed ``{alpha: MassSeries}`` to avoid reruns.
    """
    series = dict(series or {})
    fits, ss = [], []
    for a in alphas:
        s = series.get(a)
        if s is None:
            s = expected_mass(f0, a, R0, T, seeds, grid_size, bundle, dt, record_every)
        fits.append(fit_decay(s, window))
        ss.append(s)
    alphas = np.asarray(alphas, dtype=float)
    rates = np.array([f.rate for f in fits])
    factors = np.array([theoretical_rate_factor(a, bundle.coeffs) for a in alphas])
    return RateSummary(alphas=alphas, rates=rates, lo=np.array([f.lo for f in fits]),
                       hi=np.array([f.hi for f in fits]), r2=np.array([f.r2 for f in fits]),
                       factors=factors, kappa_hat=rates / factors, window=tuple(window),
                       fits=tuple(fits), series=tuple(ss))


# ---------------------------------------------------------------------------
# cross-checks


def jacobian_fd_check(path: BrownianPath, alpha: float, bundle: FieldBundle, nodes,
                      t: float = 1.0, spacing: float = 1e-4) -> np.ndarray:
    """Relative gap between ``exp(-D(t))`` and a central-difference flow-map Jacobian."""
    from .flow import flow_map

    nodes = np.asarray(nodes, dtype=float)
    e1 = np.array([spacing, 0.0])
    e2 = np.array([0.0, spacing])
    stencil = np.concatenate([nodes, nodes + e1, nodes - e1, nodes + e2, nodes - e2])
    pos, divg = flow_map(stencil, path, alpha, bundle, t)
    n = nodes.shape[0]
    L1, L2 = bundle.geometry.periods

    def diff(a, b):
        d = pos[a * n:(a + 1) * n] - pos[b * n:(b + 1) * n]
        d[:, 0] -= L1 * np.round(d[:, 0] / L1)
        d[:, 1] -= L2 * np.round(d[:, 1] / L2)
        return d / (2.0 * spacing)

    c1 = diff(1, 2)
    c2 = diff(3, 4)
    det_fd = c1[:, 0] * c2[:, 1] - c1[:, 1] * c2[:, 0]
    det_int = np.exp(-divg[:n])
    return np.abs(det_fd - det_int) / np.abs(det_int)


def riccati_ode_check(path: BrownianPath, alpha: float, R0: float, bundle: FieldBundle,
                      nodes, f0_values) -> np.ndarray:
    """Relative gap between the closed form and a Heun integration of
    ``dh/dt = div g h - R0 h^2`` along each node's trajectory."""
    out = []
    for x, f in zip(np.asarray(nodes, dtype=float), np.asarray(f0_values, dtype=float)):
        tr = simulate_flow(x, path, alpha, bundle)
        dg = bundle.div_g_alpha_closed(tr.states, alpha)
        dt = path.dt
        h = f
        for k in range(dg.size - 1):
            k1 = dg[k] * h - R0 * h * h
            hp = h + dt * k1
            k2 = dg[k + 1] * hp - R0 * hp * hp
            h = h + 0.5 * dt * (k1 + k2)
        D = tr.divg_integral
        E = np.exp(D)
        I = np.sum(0.5 * dt * (E[1:] + E[:-1]))
        closed = f / (1.0 + R0 * f * I)
        out.append(abs(h * math.exp(-D[-1]) - closed) / max(abs(closed), 1e-300))
    return np.array(out)


def loss_inequality_violation(series: MassSeries, R0: float, area: float) -> float:
    """Largest relative violation of ``1/M(t_{k+1}) - 1/M(t_k) >= R0 dt / |T^2|``.

    This is the exactly integrated form of ``dM/dt <= -(R0/|T^2|) M^2`` on
    each path; the value is 0 when the inequality holds everywhere.
    """
    m = series.per_path
    dt = np.diff(series.times)
    inc = 1.0 / m[:, 1:] - 1.0 / m[:, :-1]
    need = R0 * dt / area
    return float(max(0.0, np.max((need - inc) / need)))
