"""Compiled inner loops for the characteristic flow.

One step of the default scheme, for a shared increment ``w``:

1. noise substep ``y = x + nu xi w + (1/2) nu^2 Dxi xi w^2`` (second-order
   Taylor expansion of the flow of ``nu xi`` over time ``w``), followed by one
   Newton projection back onto the level set ``H = H(x)``, which the exact
   noise flow preserves;
2. drift substep ``x' = y - g_alpha(y) dt``.

The pair is the Stratonovich splitting of ``dphi = nu xi o dW - g_alpha dt``.
Profiles are Fourier series, so each point carries ``(cos w x, sin w x)`` per
axis and displacements are applied as rotations; the state is resynchronised
from the coordinates periodically.  Friction and amplitude profiles are
polynomials in the level ``h``.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

# fast-math without the no-nan/no-inf assumptions, so finiteness checks survive
FM = {"nsz", "arcp", "contract", "afn", "reassoc"}
RESYNC = 128


class FlowIntegrationError(FloatingPointError):
    """The integrated state became non-finite."""


@njit(inline="always", fastmath=FM, cache=True)
def _rot(c, s, d):
    # cos/sin of the small increment d by truncated series (|d| < 0.3 in practice)
    d2 = d * d
    if d2 > 0.09:
        cd = math.cos(d)
        sd = math.sin(d)
    else:
        cd = 1.0 - d2 * (0.5 - d2 * (1.0 / 24.0 - d2 * (1.0 / 720.0 - d2 / 40320.0)))
        sd = d * (1.0 - d2 * (1.0 / 6.0 - d2 * (1.0 / 120.0 - d2 * (1.0 / 5040.0 - d2 / 362880.0))))
    return c * cd - s * sd, s * cd + c * sd


@njit(inline="always", fastmath=FM, cache=True)
def _prof(c, s, a, b, om):
    h = a[0]
    d1 = 0.0
    d2 = 0.0
    ck = 1.0
    sk = 0.0
    for k in range(1, a.size):
        ck, sk = ck * c - sk * s, sk * c + ck * s
        kw = k * om
        u = a[k] * ck + b[k] * sk
        h += u
        d1 += kw * (b[k] * ck - a[k] * sk)
        d2 -= kw * kw * u
    return h, d1, d2


@njit(inline="always", fastmath=FM, cache=True)
def _poly(coef, h):
    v = 0.0
    dv = 0.0
    for i in range(coef.size - 1, -1, -1):
        dv = dv * h + v
        v = v * h + coef[i]
    return v, dv


@njit(inline="always", fastmath=FM, cache=True)
def _coef(H, alpha, lc, rc):
    l, dl = _poly(lc, H)
    r, dr = _poly(rc, H)
    n = r / l
    dn = (dr * l - r * dl) / (l * l)
    la = l + alpha
    beta = alpha / (2.0 * la)
    pref = alpha / la * n * n
    theta = alpha * dl * n * n / (2.0 * la * la) - alpha * n * dn / la
    return n, beta, pref, theta


@njit(inline="always", fastmath=FM, cache=True)
def _integrands(p, pd, pdd, q, qd, qdd, n, beta, pref, theta):
    H = p * q
    pd2 = pd * pd
    qd2 = qd * qd
    lam = 2.0 * pd2 * qd2 - pd2 * q * qdd - p * pdd * qd2
    dh = pd2 * qd2 - p * pdd * q * qdd
    return H, beta * n * n * lam, pref * dh - H * lam * theta


@njit(inline="always", fastmath=FM, cache=True)
def _step(x1, x2, c1, s1, c2, s2, p, pd, pdd, q, qd, qdd, n, beta, w, dt,
          a1, b1, om1, a2, b2, om2):
    nw = n * w
    hn2w2 = 0.5 * nw * nw
    del1 = -nw * p * qd + hn2w2 * (p * pd * qd * qd - p * pd * q * qdd)
    del2 = nw * pd * q + hn2w2 * (pd * pd * q * qd - p * pdd * q * qd)
    yc1, ys1 = _rot(c1, s1, om1 * del1)
    yc2, ys2 = _rot(c2, s2, om2 * del2)
    P, Pd, Pdd = _prof(yc1, ys1, a1, b1, om1)
    Q, Qd, Qdd = _prof(yc2, ys2, a2, b2, om2)
    gx = Pd * Q
    gy = P * Qd
    gg = gx * gx + gy * gy
    f = 0.0
    if gg > 1e-300:
        f = (p * q - P * Q) / gg
    bn = beta * n * n * dt
    dx1 = f * gx - bn * (P * Pd * Qd * Qd - P * Pd * Q * Qdd)
    dx2 = f * gy - bn * (Pd * Pd * Q * Qd - P * Pdd * Q * Qd)
    c1n, s1n = _rot(yc1, ys1, om1 * dx1)
    c2n, s2n = _rot(yc2, ys2, om2 * dx2)
    r1 = 1.5 - 0.5 * (c1n * c1n + s1n * s1n)
    r2 = 1.5 - 0.5 * (c2n * c2n + s2n * s2n)
    return (x1 + del1 + dx1, x2 + del2 + dx2, c1n * r1, s1n * r1, c2n * r2, s2n * r2)


@njit(inline="always", cache=True)
def _wrap(x, L):
    y = x - L * math.floor(x / L)
    if y >= L:
        y -= L
    return y


@njit(cache=True, fastmath=FM, parallel=True)
def _flow_kernel(x0, dW, dt, alpha, rec, a1, b1, om1, L1, a2, b2, om2, L2, lc, rc,
                 out_x, out_H, out_c, out_d, status):
    P = x0.shape[0]
    Qn = x0.shape[1]
    S = dW.shape[1]
    for ip in prange(P):
        for iq in range(Qn):
            x1 = x0[ip, iq, 0]
            x2 = x0[ip, iq, 1]
            c1 = math.cos(om1 * x1)
            s1 = math.sin(om1 * x1)
            c2 = math.cos(om2 * x2)
            s2 = math.sin(om2 * x2)
            ic = 0.0
            idv = 0.0
            pc = 0.0
            pdv = 0.0
            for k in range(S + 1):
                p, pd, pdd = _prof(c1, s1, a1, b1, om1)
                q, qd, qdd = _prof(c2, s2, a2, b2, om2)
                H0 = p * q
                n, beta, pref, theta = _coef(H0, alpha, lc, rc)
                H, ac, ad = _integrands(p, pd, pdd, q, qd, qdd, n, beta, pref, theta)
                if k > 0:
                    ic += 0.5 * dt * (pc + ac)
                    idv += 0.5 * dt * (pdv + ad)
                pc = ac
                pdv = ad
                if k % rec == 0:
                    r = k // rec
                    out_x[r, ip, iq, 0] = _wrap(x1, L1)
                    out_x[r, ip, iq, 1] = _wrap(x2, L2)
                    out_H[r, ip, iq] = H
                    out_c[r, ip, iq] = ic
                    out_d[r, ip, iq] = idv
                if k == S:
                    break
                x1, x2, c1, s1, c2, s2 = _step(x1, x2, c1, s1, c2, s2, p, pd, pdd, q, qd, qdd,
                                               n, beta, dW[ip, k], dt, a1, b1, om1, a2, b2, om2)
                if (k + 1) % RESYNC == 0:
                    if not (abs(x1) < 1e300 and abs(x2) < 1e300):
                        status[ip] = 1
                        break
                    x1 = _wrap(x1, L1)
                    x2 = _wrap(x2, L2)
                    c1 = math.cos(om1 * x1)
                    s1 = math.sin(om1 * x1)
                    c2 = math.cos(om2 * x2)
                    s2 = math.sin(om2 * x2)
            if not (abs(x1) < 1e300 and abs(x2) < 1e300):
                status[ip] = 1


@njit(cache=True, fastmath=FM, parallel=True)
def _density_kernel(nodes, f0, active, weight, dW, dt, alpha, rec, R0s,
                    a1, b1, om1, L1, a2, b2, om2, L2, lc, rc,
                    out_mass, out_area, store, out_D, out_I, status):
    P = dW.shape[0]
    S = dW.shape[1]
    nR = R0s.size
    for ip in prange(P):
        for jj in range(active.size):
            j = active[jj]
            x1 = nodes[j, 0]
            x2 = nodes[j, 1]
            fj = f0[j]
            c1 = math.cos(om1 * x1)
            s1 = math.sin(om1 * x1)
            c2 = math.cos(om2 * x2)
            s2 = math.sin(om2 * x2)
            D = 0.0
            E = 1.0  # exp(D)
            I = 0.0
            pdv = 0.0
            for k in range(S + 1):
                p, pd, pdd = _prof(c1, s1, a1, b1, om1)
                q, qd, qdd = _prof(c2, s2, a2, b2, om2)
                n, beta, pref, theta = _coef(p * q, alpha, lc, rc)
                H, ac, ad = _integrands(p, pd, pdd, q, qd, qdd, n, beta, pref, theta)
                if k > 0:
                    u = 0.5 * dt * (pdv + ad)
                    D += u
                    if abs(u) < 1e-2:
                        En = E * (1.0 + u * (1.0 + u * (0.5 + u * (1.0 / 6.0 + u / 24.0))))
                    else:
                        En = math.exp(D)
                    I += 0.5 * dt * (E + En)
                    E = En
                pdv = ad
                if k % rec == 0:
                    r = k // rec
                    for i in range(nR):
                        out_mass[ip, r, i] += weight * fj / (1.0 + R0s[i] * fj * I)
                    out_area[ip, r] += weight / E
                    if store:
                        out_D[ip, r, j] = D
                        out_I[ip, r, j] = I
                if k == S:
                    break
                x1, x2, c1, s1, c2, s2 = _step(x1, x2, c1, s1, c2, s2, p, pd, pdd, q, qd, qdd,
                                               n, beta, dW[ip, k], dt, a1, b1, om1, a2, b2, om2)
                if (k + 1) % RESYNC == 0:
                    if not (abs(x1) < 1e300 and abs(x2) < 1e300):
                        status[ip] = 1
                        break
                    x1 = _wrap(x1, L1)
                    x2 = _wrap(x2, L2)
                    c1 = math.cos(om1 * x1)
                    s1 = math.sin(om1 * x1)
                    c2 = math.cos(om2 * x2)
                    s2 = math.sin(om2 * x2)


@njit(cache=True, fastmath=FM)
def _advance_kernel(x, dW, dt, alpha, a1, b1, om1, L1, a2, b2, om2, L2, lc, rc):
    ok = True
    for i in range(x.shape[0]):
        x1 = x[i, 0]
        x2 = x[i, 1]
        c1 = math.cos(om1 * x1)
        s1 = math.sin(om1 * x1)
        c2 = math.cos(om2 * x2)
        s2 = math.sin(om2 * x2)
        for k in range(dW.size):
            p, pd, pdd = _prof(c1, s1, a1, b1, om1)
            q, qd, qdd = _prof(c2, s2, a2, b2, om2)
            n, beta, pref, theta = _coef(p * q, alpha, lc, rc)
            x1, x2, c1, s1, c2, s2 = _step(x1, x2, c1, s1, c2, s2, p, pd, pdd, q, qd, qdd,
                                           n, beta, dW[k], dt, a1, b1, om1, a2, b2, om2)
            if (k + 1) % RESYNC == 0:
                x1 = _wrap(x1, L1)
                x2 = _wrap(x2, L2)
                c1 = math.cos(om1 * x1)
                s1 = math.sin(om1 * x1)
                c2 = math.cos(om2 * x2)
                s2 = math.sin(om2 * x2)
        if not (abs(x1) < 1e300 and abs(x2) < 1e300):
            ok = False
        x[i, 0] = _wrap(x1, L1)
        x[i, 1] = _wrap(x2, L2)
    return ok


# ---------------------------------------------------------------------------
# python wrappers


def kernel_params(bundle) -> tuple:
    """Flat parameter tuple understood by the kernels."""
    c = bundle.coeffs
    if not c.is_polynomial:
        raise TypeError("compiled kernels need polynomial friction and amplitude profiles")
    h1, h2 = bundle.geometry.h1, bundle.geometry.h2
    f = lambda v: np.ascontiguousarray(v, dtype=np.float64)
    return (f(h1.cos_coeffs), f(h1.sin_coeffs), float(h1.omega), float(h1.period),
            f(h2.cos_coeffs), f(h2.sin_coeffs), float(h2.omega), float(h2.period),
            f(c.l_poly), f(c.r_poly))


def run_flow(bundle, x0, dW, dt: float, alpha: float, record_every: int = 1) -> dict:
    """Integrate ``x0`` of shape ``(P, Q, 2)`` with increments ``dW`` of shape ``(P, S)``.

    Returns arrays indexed ``[record, path, point]``: ``x``, ``H``,
    ``contraction`` and ``divg`` (running trapezoid integrals).
    """
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    dW = np.ascontiguousarray(dW, dtype=np.float64)
    P, Q, _ = x0.shape
    S = dW.shape[1]
    if S % record_every:
        raise ValueError("record_every must divide the number of steps")
    R = S // record_every + 1
    out_x = np.empty((R, P, Q, 2))
    out_H = np.empty((R, P, Q))
    out_c = np.empty((R, P, Q))
    out_d = np.empty((R, P, Q))
    status = np.zeros(P, dtype=np.int64)
    _flow_kernel(x0, dW, float(dt), float(alpha), int(record_every), *kernel_params(bundle),
                 out_x, out_H, out_c, out_d, status)
    if status.any() or not np.all(np.isfinite(out_x)):
        raise FlowIntegrationError("state became non-finite")
    return {"x": out_x, "H": out_H, "contraction": out_c, "divg": out_d}


def run_density(bundle, nodes, f0, weight: float, dW, dt: float, alpha: float,
                record_every: int, R0s, active=None, store_nodes: bool = False) -> dict:
    """Closed-form masses for every shared-noise path.

    Returns ``mass`` ``(P, R, len(R0s))``, ``area`` ``(P, R)`` (quadrature of
    ``|det psi|`` over the active nodes) and, if requested, per-node ``D`` and
    ``I`` of shape ``(P, R, M)``.
    """
    nodes = np.ascontiguousarray(nodes, dtype=np.float64)
    f0 = np.ascontiguousarray(f0, dtype=np.float64)
    dW = np.ascontiguousarray(np.atleast_2d(dW), dtype=np.float64)
    R0s = np.ascontiguousarray(np.atleast_1d(R0s), dtype=np.float64)
    if active is None:
        active = np.arange(nodes.shape[0])
    active = np.ascontiguousarray(active, dtype=np.int64)
    P, S = dW.shape
    if S % record_every:
        raise ValueError("record_every must divide the number of steps")
    R = S // record_every + 1
    M = nodes.shape[0]
    out_mass = np.zeros((P, R, R0s.size))
    out_area = np.zeros((P, R))
    shape = (P, R, M) if store_nodes else (1, 1, 1)
    out_D = np.zeros(shape)
    out_I = np.zeros(shape)
    status = np.zeros(P, dtype=np.int64)
    _density_kernel(nodes, f0, active, float(weight), dW, float(dt), float(alpha),
                    int(record_every), R0s, *kernel_params(bundle), out_mass, out_area,
                    bool(store_nodes), out_D, out_I, status)
    if status.any() or not np.all(np.isfinite(out_mass)):
        raise FlowIntegrationError("state became non-finite")
    out = {"mass": out_mass, "area": out_area}
    if store_nodes:
        out["D"] = out_D
        out["I"] = out_I
    return out


def advance(bundle, x, dW, dt: float, alpha: float) -> np.ndarray:
    """Advance points ``x`` (n, 2) through the increments ``dW``; returns a new array."""
    y = np.array(x, dtype=np.float64, order="C")
    dW = np.ascontiguousarray(np.atleast_1d(dW), dtype=np.float64)
    if not _advance_kernel(y, dW, float(dt), float(alpha), *kernel_params(bundle)):
        raise FlowIntegrationError("state became non-finite")
    return y
