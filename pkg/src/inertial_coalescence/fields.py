"""Derived vector and scalar fields of a factorized Hamiltonian with aligned
friction and noise amplitude.

Sign convention: ``xi = rot90(grad H) = (-d2 H, d1 H) = (-h1 h2', h1' h2)``.
The curvature term ``Dxi xi`` is quadratic in ``xi`` and does not depend on
this choice; only the sign of the noise coefficient does.

All evaluators accept points of shape ``(..., 2)`` and broadcast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import optimize

from .hamiltonian import (TorusGeometry, optimize_over_domain, torus_distance, wrap,
                          wrapped_delta)


class CoefficientError(ValueError):
    """Invalid friction or amplitude profile."""


class SurveyError(ValueError):
    """Sign survey could not be carried out as requested."""


def _sup_on_interval(f: Callable, lo: float = -1.0, hi: float = 1.0, n: int = 4097,
                     mode: str = "max") -> float:
    t = np.linspace(lo, hi, n)
    v = np.asarray(f(t), dtype=float)
    if mode == "min":
        v = -v
    i = int(np.argmax(v))
    best = float(v[i])
    a, b = t[max(i - 1, 0)], t[min(i + 1, n - 1)]
    if b > a:
        sgn = -1.0 if mode == "max" else 1.0
        res = optimize.minimize_scalar(lambda s: sgn * float(f(np.array(s))), bounds=(a, b),
                                       method="bounded", options={"xatol": 1e-13})
        best = max(best, -float(res.fun))
    return best if mode == "max" else -best


# ---------------------------------------------------------------------------
# aligned coefficients


@dataclass(frozen=True)
class AlignedCoefficients:
    """Friction ``l`` and noise amplitude ``r`` as functions of the level ``h``.

    Built-in forms are polynomials in ``h`` (``l_poly``/``r_poly`` hold
    ascending coefficients) and are evaluated in compiled kernels; custom
    forms carry explicit derivative callables and use the array path only.
    """

    l: Callable
    dl: Callable
    r: Callable
    dr: Callable
    l_poly: np.ndarray | None = None
    r_poly: np.ndarray | None = None
    label: str = "custom"

    def __post_init__(self):
        if self.l0 <= 0:
            raise CoefficientError(f"friction must be positive on [-1,1]; min l = {self.l0:.6g}")
        if self.r0 <= 0:
            raise CoefficientError(f"amplitude must not vanish on [-1,1]; min r^2 = {self.r0:.6g}")

    @classmethod
    def polynomial(cls, l_coeffs: Sequence[float], r_coeffs: Sequence[float],
                   label: str | None = None) -> "AlignedCoefficients":
        lc = np.asarray(l_coeffs, dtype=float)
        rc = np.asarray(r_coeffs, dtype=float)
        dlc = P.polyder(lc) if lc.size > 1 else np.zeros(1)
        drc = P.polyder(rc) if rc.size > 1 else np.zeros(1)
        return cls(l=lambda h: P.polyval(h, lc), dl=lambda h: P.polyval(h, dlc),
                   r=lambda h: P.polyval(h, rc), dr=lambda h: P.polyval(h, drc),
                   l_poly=lc, r_poly=rc,
                   label=label or f"poly(l={lc.tolist()}, r={rc.tolist()})")

    @classmethod
    def constant(cls, l: float = 1.0, r: float = 1.0) -> "AlignedCoefficients":
        return cls.polynomial([l], [r], label=f"constant(l={l}, r={r})")

    @property
    def is_polynomial(self) -> bool:
        return self.l_poly is not None and self.r_poly is not None

    def n(self, h):
        return self.r(h) / self.l(h)

    def dn(self, h):
        lv = self.l(h)
        return (self.dr(h) * lv - self.r(h) * self.dl(h)) / lv ** 2

    @cached_property
    def l0(self) -> float:
        """Lower bound of ``l`` on ``[-1, 1]``."""
        return _sup_on_interval(self.l, mode="min")

    @cached_property
    def lstar(self) -> float:
        """Upper bound of ``l`` on ``[-1, 1]``."""
        return _sup_on_interval(self.l, mode="max")

    @cached_property
    def r0(self) -> float:
        """Lower bound of ``r^2`` on ``[-1, 1]``."""
        return _sup_on_interval(lambda h: self.r(h) ** 2, mode="min")

    @cached_property
    def n_sup(self) -> float:
        return _sup_on_interval(lambda h: np.abs(self.n(h)), mode="max")

    @cached_property
    def m_star_sq(self) -> float:
        """min of ``n^2`` on ``[-1, 1]``."""
        return _sup_on_interval(lambda h: self.n(h) ** 2, mode="min")

    @property
    def l_at0(self) -> float:
        return float(self.l(np.array(0.0)))

    @property
    def r_at0(self) -> float:
        return float(self.r(np.array(0.0)))

    def chi(self, alpha: float) -> float:
        """Separatrix prefactor ``alpha n(0)^2 / (l(0) + alpha)``."""
        return alpha * (self.r_at0 / self.l_at0) ** 2 / (self.l_at0 + alpha)

    def beta(self, h, alpha: float):
        return alpha / (2.0 * (self.l(h) + alpha))

    def theta(self, h, alpha: float):
        """Profile multiplying ``-H Lambda`` in the divergence of the drift."""
        lv = self.l(h)
        nv = self.n(h)
        return (alpha * self.dl(h) * nv ** 2 / (2.0 * (lv + alpha) ** 2)
                - alpha * nv * self.dn(h) / (lv + alpha))


def coefficients_from_spec(kind: str, **params) -> tuple:
    """Polynomial coefficients (ascending) for a named built-in profile.

    ``constant`` (value), ``affine`` (a, b: a + b h), ``quadratic``
    (a, b: a + b h^2) and ``polynomial`` (coeffs).
    """
    if kind == "constant":
        return (float(params.get("value", 1.0)),)
    if kind == "affine":
        return (float(params["a"]), float(params["b"]))
    if kind == "quadratic":
        return (float(params["a"]), 0.0, float(params["b"]))
    if kind == "polynomial":
        return tuple(float(c) for c in params["coeffs"])
    raise CoefficientError(f"unknown coefficient kind {kind!r}")


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")


# ---------------------------------------------------------------------------
# bundle


@dataclass(frozen=True)
class FieldBundle:
    geometry: TorusGeometry
    coeffs: AlignedCoefficients

    def _profiles(self, x, order: int = 2):
        x = np.asarray(x, dtype=float)
        d1 = self.geometry.h1.derivatives(x[..., 0], order)
        d2 = self.geometry.h2.derivatives(x[..., 1], order)
        return d1, d2

    # --- Hamiltonian and its derivatives

    def H(self, x):
        (a, *_), (b, *_) = self._profiles(x, 0)
        return a * b

    def grad_H(self, x):
        (a, ap), (b, bp) = self._profiles(x, 1)
        return np.stack([ap * b, a * bp], axis=-1)

    def hess_H(self, x):
        (a, ap, app), (b, bp, bpp) = self._profiles(x, 2)
        row1 = np.stack([app * b, ap * bp], axis=-1)
        row2 = np.stack([ap * bp, a * bpp], axis=-1)
        return np.stack([row1, row2], axis=-2)

    def xi(self, x):
        (a, ap), (b, bp) = self._profiles(x, 1)
        return np.stack([-a * bp, ap * b], axis=-1)

    def dxi(self, x):
        """Jacobian matrix ``d xi_i / d x_j``."""
        (a, ap, app), (b, bp, bpp) = self._profiles(x, 2)
        row1 = np.stack([-ap * bp, -a * bpp], axis=-1)
        row2 = np.stack([app * b, ap * bp], axis=-1)
        return np.stack([row1, row2], axis=-2)

    def dxi_xi(self, x):
        (a, ap, app), (b, bp, bpp) = self._profiles(x, 2)
        return np.stack([a * ap * bp ** 2 - a * ap * b * bpp,
                         ap ** 2 * b * bp - a * app * b * bp], axis=-1)

    def lambda_big(self, x):
        (a, ap, app), (b, bp, bpp) = self._profiles(x, 2)
        return 2.0 * ap ** 2 * bp ** 2 - ap ** 2 * b * bpp - a * app * bp ** 2

    def d_h(self, x):
        (a, ap, app), (b, bp, bpp) = self._profiles(x, 2)
        return ap ** 2 * bp ** 2 - a * app * b * bpp

    def d_h_det(self, x):
        """``-det Hess H`` computed from the assembled Hessian matrix."""
        return -np.linalg.det(self.hess_H(x))

    # --- aligned coefficients along the flow

    def nu(self, x):
        return self.coeffs.n(self.H(x))

    def beta(self, x, alpha: float):
        _check_alpha(alpha)
        return self.coeffs.beta(self.H(x), alpha)

    def theta(self, h, alpha: float):
        _check_alpha(alpha)
        return self.coeffs.theta(h, alpha)

    def sigma_alpha(self, x):
        """Noise coefficient ``nu xi`` of the limiting flow."""
        return self.nu(x)[..., None] * self.xi(x)

    def b_alpha(self, x, alpha: float):
        """Ito drift ``(1/2 - beta) nu^2 Dxi xi``."""
        h = self.H(x)
        c = (0.5 - self.coeffs.beta(h, alpha)) * self.coeffs.n(h) ** 2
        return c[..., None] * self.dxi_xi(x)

    def g_alpha_reduced(self, x, alpha: float):
        _check_alpha(alpha)
        h = self.H(x)
        c = self.coeffs.beta(h, alpha) * self.coeffs.n(h) ** 2
        return c[..., None] * self.dxi_xi(x)

    def g_alpha_general(self, x, alpha: float):
        """Drift from the unreduced formula, chain rule through ``H``.

        ``Gamma = D(u) u + sigma (sigma . grad lam) / lam^3`` with
        ``u = sigma / lam``, ``sigma = rho xi``, ``rho = r(H)``, ``lam = l(H)``.
        """
        _check_alpha(alpha)
        c = self.coeffs
        h = self.H(x)
        gH = self.grad_H(x)
        xi = self.xi(x)
        Dxi = self.dxi(x)
        lam, dlam = c.l(h), c.dl(h)
        rho, drho = c.r(h), c.dr(h)
        grad_lam = dlam[..., None] * gH
        grad_rho = drho[..., None] * gH
        q = rho / lam
        grad_q = (grad_rho * lam[..., None] - rho[..., None] * grad_lam) / lam[..., None] ** 2
        u = q[..., None] * xi
        # D(q xi) = xi (x) grad q + q D xi
        Du = xi[..., :, None] * grad_q[..., None, :] + q[..., None, None] * Dxi
        Du_u = np.einsum("...ij,...j->...i", Du, u)
        sigma = rho[..., None] * xi
        s_dot = np.einsum("...i,...i->...", sigma, grad_lam)
        gamma = Du_u + sigma * (s_dot / lam ** 3)[..., None]
        return (alpha / (2.0 * (lam + alpha)))[..., None] * gamma

    def div_g_alpha_closed(self, x, alpha: float):
        _check_alpha(alpha)
        c = self.coeffs
        h = self.H(x)
        return (alpha / (c.l(h) + alpha) * c.n(h) ** 2 * self.d_h(x)
                - h * self.lambda_big(x) * c.theta(h, alpha))

    def div_g_alpha_fd(self, x, alpha: float, step: float = 1e-4):
        """Central-difference divergence of :meth:`g_alpha_reduced`."""
        if not 1e-6 <= step <= 1e-3:
            raise ValueError("step must lie in [1e-6, 1e-3]")
        x = np.asarray(x, dtype=float)
        e1 = np.array([step, 0.0])
        e2 = np.array([0.0, step])
        g = self.g_alpha_reduced
        d1 = g(x + e1, alpha)[..., 0] - g(x - e1, alpha)[..., 0]
        d2 = g(x + e2, alpha)[..., 1] - g(x - e2, alpha)[..., 1]
        return (d1 + d2) / (2.0 * step)

    def div_dxi_xi(self, x):
        """Divergence of ``Dxi xi`` by the product rule on its factorized components."""
        (a, ap, app), (b, bp, bpp) = self._profiles(x, 2)
        # (Dxi xi)_1 = [a a'] [(b')^2 - b b''],  (Dxi xi)_2 = [(a')^2 - a a''] [b b']
        d1 = (ap ** 2 + a * app) * (bp ** 2 - b * bpp)
        d2 = (ap ** 2 - a * app) * (bp ** 2 + b * bpp)
        return d1 + d2

    def div_xi(self, x):
        """``d1 xi_1 + d2 xi_2`` from the Jacobian; vanishes identically."""
        D = self.dxi(x)
        return D[..., 0, 0] + D[..., 1, 1]

    # --- identity oracles

    def identity_residuals(self, x):
        """Residuals ``(r_i, r_ii, r_iii)`` with matching magnitude scales.

        (i)   grad H . Dxi xi - H Lambda
        (ii)  div(Dxi xi) - 2 D_H
        (iii) 2 D_H - Lambda - [(h1')^2 - h1 h1''] h2 h2'' - [(h2')^2 - h2 h2''] h1 h1''

        Returns
        -------
        residuals : ndarray, shape (..., 3)
        scales : ndarray, shape (..., 3)
            Sum of absolute values of the terms in each identity, for relative
            error reporting.
        """
        (a, ap, app), (b, bp, bpp) = self._profiles(x, 2)
        gH = self.grad_H(x)
        v = self.dxi_xi(x)
        h = a * b
        lam = self.lambda_big(x)
        dh = self.d_h(x)
        t1 = gH[..., 0] * v[..., 0]
        t2 = gH[..., 1] * v[..., 1]
        r1 = t1 + t2 - h * lam
        s1 = np.abs(t1) + np.abs(t2) + np.abs(h * lam)
        dv = self.div_dxi_xi(x)
        r2 = dv - 2.0 * dh
        s2 = np.abs(dv) + 2.0 * (np.abs(ap ** 2 * bp ** 2) + np.abs(a * app * b * bpp))
        u1 = (ap ** 2 - a * app) * (b * bpp)
        u2 = (bp ** 2 - b * bpp) * (a * app)
        r3 = 2.0 * dh - lam - u1 - u2
        s3 = 2.0 * np.abs(dh) + np.abs(lam) + np.abs(u1) + np.abs(u2)
        return np.stack([r1, r2, r3], axis=-1), np.stack([s1, s2, s3], axis=-1)

    # --- constants used by the flow diagnostics

    @cached_property
    def coefficient_bounds(self) -> tuple:
        """``(c_sigma, c_b)``: componentwise bounds on the noise and Ito drift.

        ``c_sigma = |n|_inf max(|h1|_inf |h2'|_inf, |h1'|_inf |h2|_inf)`` and
        ``c_b = 1/2 |n|_inf^2 |Dxi xi|_inf``; both are alpha independent.
        Suprema of products of one-variable factors are taken factor by factor.
        """
        h1, h2 = self.geometry.h1, self.geometry.h2

        def sup(p, fn):
            return _sup_on_interval(lambda t: np.abs(fn(p.derivatives(t, 2))), 0.0, p.period,
                                    n=8193)

        s_h1, s_h1p = sup(h1, lambda d: d[0]), sup(h1, lambda d: d[1])
        s_h2, s_h2p = sup(h2, lambda d: d[0]), sup(h2, lambda d: d[1])
        ns = self.coeffs.n_sup
        c_sigma = ns * max(s_h1 * s_h2p, s_h1p * s_h2)
        v1 = sup(h1, lambda d: d[0] * d[1]) * sup(h2, lambda d: d[1] ** 2 - d[0] * d[2])
        v2 = sup(h1, lambda d: d[1] ** 2 - d[0] * d[2]) * sup(h2, lambda d: d[0] * d[1])
        c_b = 0.5 * ns ** 2 * max(v1, v2)
        return float(c_sigma), float(c_b)

    def lambda_star(self, r: float | None = None) -> float:
        """min of ``Lambda`` over ``D_r`` (positive off the centers)."""
        r = self.geometry.exclusion_r if r is None else r
        val, _ = optimize_over_domain(self.lambda_big, self.geometry, r, mode="min")
        return float(val)

    def gamma(self, r: float | None = None) -> float:
        """max of ``|H|`` over ``D_r``."""
        if r is None or r == self.geometry.exclusion_r:
            return self.geometry.gamma_r
        val, _ = optimize_over_domain(lambda x: np.abs(self.H(x)), self.geometry, r, mode="max")
        return float(val)


# ---------------------------------------------------------------------------
# sign survey


@dataclass(frozen=True)
class DichotomyReport:
    """Sign structure of the drift divergence on the thin set ``{|H| <= eta}``.

    ``F`` collects samples within ``theta`` of a midpoint and ``G`` the rest.
    ``c1_hat`` and ``c2_hat`` are the measured constants in
    ``max_F |div g| <= c1 chi theta`` and ``min_G div g >= c2 chi theta^2``
    with ``chi = alpha n(0)^2 / (l(0) + alpha)``.
    """

    alpha: float
    eta: float
    theta: float
    seed: int
    n_F: int
    n_G: int
    min_div_G: float
    max_abs_div_F: float
    c1_hat: float
    c2_hat: float
    midpoint_fits: tuple = field(default_factory=tuple)
    passed: bool = False

    def to_kv(self) -> dict:
        out = {k: getattr(self, k) for k in
               ("alpha", "eta", "theta", "seed", "n_F", "n_G", "min_div_G",
                "max_abs_div_F", "c1_hat", "c2_hat", "passed")}
        for i, f in enumerate(self.midpoint_fits):
            out[f"midpoint.{i}.point"] = f"{f['point'][0]:.17g},{f['point'][1]:.17g}"
            out[f"midpoint.{i}.fitted"] = f["fitted"]
            out[f"midpoint.{i}.expected"] = f["expected"]
        return out


def separatrix_tube_samples(geometry: TorusGeometry, eta: float, samples: int,
                            seed: int = 0) -> np.ndarray:
    """Stratified jittered samples of ``{|H| <= eta}``.

    Each separatrix circle (``x1 = a`` for ``a`` in Z1, ``x2 = b`` for ``b`` in
    Z2) gets a tangential-by-transverse grid of strata, one uniform point per
    stratum.  The transverse half-width is wide enough to contain the whole
    tube away from corners; points outside the tube are dropped.
    """
    rng = np.random.default_rng(seed)
    h1, h2 = geometry.h1, geometry.h2
    lines = [(0, a) for a in h1.zeros] + [(1, b) for b in h2.zeros]
    per_line = max(1, samples // len(lines))
    n_tr = max(2, int(round(math.sqrt(per_line / 16))))
    n_tg = max(1, per_line // n_tr)
    pts = []
    for axis, c in lines:
        hn, hp = (h1, h2) if axis == 0 else (h2, h1)
        slope = abs(float(hn.d1(np.array(c))))
        w = min(4.0 * eta / max(slope, 1e-12), 0.25 * hn.period)
        i, j = np.meshgrid(np.arange(n_tg), np.arange(n_tr), indexing="ij")
        tg = (i + rng.random(i.shape)) * hp.period / n_tg
        tr = -w + (j + rng.random(j.shape)) * (2.0 * w / n_tr)
        if axis == 0:
            p = np.stack([c + tr, tg], axis=-1)
        else:
            p = np.stack([tg, c + tr], axis=-1)
        pts.append(p.reshape(-1, 2))
    pts = np.concatenate(pts)
    pts[:, 0] = wrap(pts[:, 0], h1.period)
    pts[:, 1] = wrap(pts[:, 1], h2.period)
    H = geometry.H(pts)
    return pts[np.abs(H) <= eta]


def midpoint_quadratic_fit(bundle: FieldBundle, tau_max: float = 0.05, n: int = 201) -> list:
    """Fit ``D_H(q + tau e_t) ~ c tau^2 + d tau^4`` along the tangential axis at each
    midpoint and compare ``c`` with ``(h_n'(q_n))^2 (h_t''(q_t))^2``."""
    g = bundle.geometry
    out = []
    tau = np.linspace(-tau_max, tau_max, n)
    A = np.stack([tau ** 2, tau ** 4], axis=-1)
    for m in g.midpoints:
        q = np.array(m.point)
        e = np.zeros(2)
        e[m.tangential_axis - 1] = 1.0
        vals = bundle.d_h(q + tau[:, None] * e)
        coef, *_ = np.linalg.lstsq(A, vals, rcond=None)
        if m.tangential_axis == 2:
            expected = float(g.h1.d1(np.array(q[0])) ** 2 * g.h2.d2(np.array(q[1])) ** 2)
        else:
            expected = float(g.h2.d1(np.array(q[1])) ** 2 * g.h1.d2(np.array(q[0])) ** 2)
        out.append({"point": tuple(q), "kind": m.kind, "fitted": float(coef[0]),
                    "expected": expected})
    return out


def sign_survey(bundle: FieldBundle, alpha: float, eta: float, theta: float,
                samples: int = 20000, seed: int = 0) -> DichotomyReport:
    """Split ``{|H| <= eta}`` into midpoint neighbourhoods ``F`` and the rest ``G``
    and measure ``div g_alpha`` on each.

    Raises
    ------
    SurveyError
        If ``theta`` exceeds the smallest midpoint neighbourhood radius or no
        samples land in ``G``.
    """
    _check_alpha(alpha)
    g = bundle.geometry
    rmin = min(m.vq_radius for m in g.midpoints)
    if theta >= rmin:
        raise SurveyError(f"theta={theta} is not below the midpoint radius {rmin:.6g}")
    pts = separatrix_tube_samples(g, eta, samples, seed)
    mids = g.midpoint_array()
    d = torus_distance(pts[:, None, :], mids, g.periods).min(axis=1)
    inF = d < theta
    F, G = pts[inF], pts[~inF]
    if G.shape[0] == 0:
        raise SurveyError("no samples in G; theta too large")
    chi = bundle.coeffs.chi(alpha)
    divG = bundle.div_g_alpha_closed(G, alpha)
    min_G = float(divG.min())
    max_F = float(np.abs(bundle.div_g_alpha_closed(F, alpha)).max()) if F.shape[0] else 0.0
    c1 = max_F / (chi * theta)
    c2 = min_G / (chi * theta ** 2)
    fits = tuple(midpoint_quadratic_fit(bundle))
    return DichotomyReport(alpha=alpha, eta=eta, theta=theta, seed=seed, n_F=int(F.shape[0]),
                           n_G=int(G.shape[0]), min_div_G=min_G, max_abs_div_F=max_F,
                           c1_hat=c1, c2_hat=c2, midpoint_fits=fits,
                           passed=bool(min_G > 0 and math.isfinite(c1)))


def stratified_points(geometry: TorusGeometry, n: int, seed: int = 0) -> np.ndarray:
    """One jittered uniform point per cell of a near-square ``n``-cell grid on the torus."""
    rng = np.random.default_rng(seed)
    m1 = max(1, int(round(math.sqrt(n))))
    m2 = max(1, n // m1)
    L1, L2 = geometry.periods
    i, j = np.meshgrid(np.arange(m1), np.arange(m2), indexing="ij")
    x1 = (i + rng.random(i.shape)) * L1 / m1
    x2 = (j + rng.random(j.shape)) * L2 / m2
    return np.stack([x1.ravel(), x2.ravel()], axis=-1)


def divergence_zero_set(bundle: FieldBundle, alpha: float, n_lines: int = 64,
                        n_scan: int = 512, xtol: float = 1e-13) -> np.ndarray:
    """Points of ``{div g_alpha = 0}`` on horizontal lines, refined by Brent's method.

    Each line ``x2 = const`` is scanned for sign changes of the closed-form
    divergence in ``x1``; returns an ``(n, 2)`` array.
    """
    L1, L2 = bundle.geometry.periods
    x1 = np.linspace(0.0, L1, n_scan + 1)
    out = []
    for x2 in (np.arange(n_lines) + 0.5) * L2 / n_lines:
        f = lambda s: float(bundle.div_g_alpha_closed(np.array([s, x2]), alpha))
        v = bundle.div_g_alpha_closed(np.stack([x1, np.full_like(x1, x2)], axis=-1), alpha)
        for i in np.nonzero(np.sign(v[:-1]) * np.sign(v[1:]) < 0)[0]:
            a, b = x1[i], x1[i + 1]
            if f(a) * f(b) < 0:
                out.append((optimize.brentq(f, a, b, xtol=xtol, rtol=1e-15), x2))
    return np.array(out).reshape(-1, 2)
