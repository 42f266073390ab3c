"""Factor profiles h(x), their zero/critical-point structure, and the torus
cell geometry induced by a factorized Hamiltonian H(x1, x2) = h1(x1) h2(x2).

Every profile is stored as a finite real Fourier series on its own period L,

    h(x) = a_0 + sum_{k>=1} a_k cos(k w x) + b_k sin(k w x),   w = 2 pi / L,

which covers the trigonometric, perturbed-trigonometric, spectrally computed
Sturm-Liouville and user-supplied coefficient kinds with one evaluator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy import linalg, optimize

TWO_PI = 2.0 * math.pi

SCAN_POINTS = 4096
H3_SAMPLES = 8192
ROOT_TOL = 1e-12
SIMPLE_TOL = 1e-6
SAMPLE_TOL = 1e-10


class ProfileError(ValueError):
    """Invalid profile parameters."""


class GeometryError(ValueError):
    """Invalid geometry request, e.g. overlapping exclusion balls."""


def wrap(x, period):
    """Map ``x`` into the half-open fundamental interval ``[0, period)``."""
    y = np.mod(x, period)
    # np.mod can return ``period`` itself for tiny negative inputs
    return np.where(y >= period, y - period, y)


def wrapped_delta(a, b, period):
    """Signed minimal-image difference ``a - b`` on a circle of length ``period``."""
    d = np.mod(np.asarray(a, dtype=float) - b + 0.5 * period, period) - 0.5 * period
    return d


def torus_distance(p, q, periods):
    """Euclidean minimal-image distance between points ``p`` and ``q`` on the torus."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d1 = wrapped_delta(p[..., 0], q[..., 0], periods[0])
    d2 = wrapped_delta(p[..., 1], q[..., 1], periods[1])
    return np.hypot(d1, d2)


@dataclass(frozen=True)
class FactorProfile:
    """A smooth periodic scalar profile with derivatives up to order three.

    Parameters
    ----------
    cos_coeffs : ndarray
        ``a_0 .. a_K``; ``a_0`` is the constant term.
    sin_coeffs : ndarray
        ``b_0 .. b_K``; ``b_0`` is ignored and stored as zero.
    period : float
        Period ``L`` of the profile.
    kind : str
        Constructor label used in reports and configs.
    scale : float
        Factor that was applied to the raw coefficients to reach ``max|h| = 1``.
    params : dict
        Constructor parameters, kept for reporting.
    """

    cos_coeffs: np.ndarray
    sin_coeffs: np.ndarray
    period: float = TWO_PI
    kind: str = "custom_fourier"
    scale: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.cos_coeffs, dtype=float)).copy()
        b = np.atleast_1d(np.asarray(self.sin_coeffs, dtype=float)).copy()
        n = max(a.size, b.size, 2)
        a = np.pad(a, (0, n - a.size))
        b = np.pad(b, (0, n - b.size))
        b[0] = 0.0
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ProfileError("Fourier coefficients must be finite")
        if not self.period > 0:
            raise ProfileError("period must be positive")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "cos_coeffs", a)
        object.__setattr__(self, "sin_coeffs", b)

    @property
    def omega(self) -> float:
        return TWO_PI / self.period

    @property
    def n_modes(self) -> int:
        return self.cos_coeffs.size - 1

    def derivatives(self, x, order: int = 3):
        """Return ``(h, h', ..., h^(order))`` evaluated at ``x`` (any shape)."""
        x = np.asarray(x, dtype=float)
        k = np.arange(1, self.n_modes + 1) * self.omega
        theta = x[..., None] * k
        c = np.cos(theta)
        s = np.sin(theta)
        a = self.cos_coeffs[1:]
        b = self.sin_coeffs[1:]
        out = [self.cos_coeffs[0] + c @ a + s @ b]
        # d/dx of (a cos + b sin) cycles through (b, -a) scaled by k
        ca, sb = a, b
        for _ in range(order):
            ca, sb = sb * k, -ca * k
            out.append(c @ ca + s @ sb)
        return tuple(out)

    def __call__(self, x):
        return self.derivatives(x, 0)[0]

    def d1(self, x):
        return self.derivatives(x, 1)[1]

    def d2(self, x):
        return self.derivatives(x, 2)[2]

    def d3(self, x):
        return self.derivatives(x, 3)[3]

    def derivative_profile(self) -> "FactorProfile":
        """The profile of ``h'`` as another Fourier series (not normalized)."""
        k = np.arange(self.n_modes + 1) * self.omega
        return FactorProfile(
            cos_coeffs=self.sin_coeffs * k,
            sin_coeffs=-self.cos_coeffs * k,
            period=self.period,
            kind="derivative",
        )

    @cached_property
    def zeros(self) -> np.ndarray:
        return find_zeros(self, ROOT_TOL)

    @cached_property
    def crits(self) -> np.ndarray:
        return find_critical_points(self, ROOT_TOL)

    @cached_property
    def sup_norm(self) -> float:
        """max |h| over one period (dense scan plus refinement at critical points)."""
        xs = np.linspace(0.0, self.period, SCAN_POINTS, endpoint=False)
        best = float(np.max(np.abs(self(xs))))
        if self.crits.size:
            best = max(best, float(np.max(np.abs(self(self.crits)))))
        return best

    def normalized(self) -> "FactorProfile":
        """Rescale so that ``max|h| = 1``; the applied factor accumulates in ``scale``."""
        m = self.sup_norm
        if m == 0.0:
            raise ProfileError("cannot normalize the zero profile")
        return FactorProfile(
            cos_coeffs=self.cos_coeffs / m,
            sin_coeffs=self.sin_coeffs / m,
            period=self.period,
            kind=self.kind,
            scale=self.scale / m,
            params=dict(self.params),
        )

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "period": self.period,
            "scale": self.scale,
            "n_modes": self.n_modes,
            **{f"param.{k}": v for k, v in self.params.items()},
        }


# ---------------------------------------------------------------------------
# constructors


def make_fourier_profile(cos_coeffs: Sequence[float], sin_coeffs: Sequence[float],
                         period: float = TWO_PI, normalize: bool = True) -> FactorProfile:
    """Profile from explicit Fourier coefficients ``a_0..a_K`` and ``b_0..b_K``."""
    p = FactorProfile(np.asarray(cos_coeffs, float), np.asarray(sin_coeffs, float),
                      period=period, kind="custom_fourier",
                      params={"cos": list(map(float, cos_coeffs)),
                              "sin": list(map(float, sin_coeffs))})
    return p.normalized() if normalize else p


def make_trig_profile(k: int, phase: float = 0.0) -> FactorProfile:
    """``sin(k x + phase)`` on period 2 pi."""
    if int(k) != k or k == 0:
        raise ProfileError("wave number k must be a nonzero integer")
    k = int(k)
    sign = 1.0 if k > 0 else -1.0
    m = abs(k)
    a = np.zeros(m + 1)
    b = np.zeros(m + 1)
    # sin(|k| x s + phase) = s sin(|k|x) cos(phase) + cos(|k|x) sin(phase)
    a[m] = math.sin(phase)
    b[m] = sign * math.cos(phase)
    return FactorProfile(a, b, kind="trig", params={"k": k, "phase": float(phase)})


def make_perturbed_trig_profile(amplitude: float = 0.25) -> FactorProfile:
    """``(1 + a cos x) sin x``, normalized to unit maximum.

    The product expands to ``sin x + (a/2) sin 2x``.  The condition report is
    not enforced here; callers inspect :func:`verify_conditions`.
    """
    a = float(amplitude)
    p = FactorProfile(np.zeros(3), np.array([0.0, 1.0, 0.5 * a]),
                      kind="perturbed_trig", params={"amplitude": a})
    return p.normalized()


def fourier_second_derivative_matrix(m: int, period: float = TWO_PI) -> np.ndarray:
    """Spectral collocation matrix for d^2/dx^2 on ``m`` equispaced periodic nodes."""
    if m % 2:
        raise ProfileError("grid size must be even")
    h = TWO_PI / m
    j = np.arange(m)
    col = np.empty(m)
    col[0] = -math.pi ** 2 / (3.0 * h ** 2) - 1.0 / 6.0
    jj = j[1:]
    col[1:] = -0.5 * (-1.0) ** jj / np.sin(0.5 * h * jj) ** 2
    return linalg.toeplitz(col) * (TWO_PI / period) ** 2


def make_sturm_liouville_profile(V: Callable, n: int, grid_size: int = 256,
                                 period: float = TWO_PI,
                                 coeff_tol: float = 1e-13) -> FactorProfile:
    """Eigenfunction ``h_n`` of ``-h'' + V h = lambda h`` with periodic conditions.

    Eigenpairs are sorted by eigenvalue and ``n`` indexes them from zero, so
    ``n = 0`` is the ground state.  Degenerate pairs (e.g. ``V = 0``) return an
    arbitrary but deterministic member of the eigenspace.

    Raises
    ------
    ProfileError
        If ``lambda_n <= max V``: the construction needs ``W = lambda_n - V > 0``
        everywhere, otherwise the eigenfunction is not oscillatory enough to
        satisfy the simple-zero and concavity conditions.
    """
    if grid_size < 256 or grid_size & (grid_size - 1):
        raise ProfileError("grid_size must be a power of two >= 256")
    if n < 0:
        raise ProfileError("mode index must be nonnegative")
    x = period * np.arange(grid_size) / grid_size
    v = np.broadcast_to(np.asarray(V(x), dtype=float), x.shape)
    A = -fourier_second_derivative_matrix(grid_size, period) + np.diag(v)
    evals, evecs = linalg.eigh(A)
    lam = float(evals[n])
    vmax = float(np.max(v))
    if lam <= vmax:
        raise ProfileError(
            f"eigenvalue lambda_{n} = {lam:.6g} does not exceed max V = {vmax:.6g}; "
            "positivity W = lambda_n - V > 0 is required")
    u = evecs[:, n]
    c = np.fft.rfft(u) / grid_size
    kmax = grid_size // 2 - 1
    a = np.empty(kmax + 1)
    b = np.empty(kmax + 1)
    a[0] = c[0].real
    b[0] = 0.0
    a[1:] = 2.0 * c[1:kmax + 1].real
    b[1:] = -2.0 * c[1:kmax + 1].imag
    mag = np.maximum(np.abs(a), np.abs(b))
    keep = np.nonzero(mag > coeff_tol * mag.max())[0]
    last = int(keep.max()) if keep.size else 1
    a = a[:last + 1]
    b = b[:last + 1]
    a[np.abs(a) <= coeff_tol * mag.max()] = 0.0
    b[np.abs(b) <= coeff_tol * mag.max()] = 0.0
    # deterministic sign: the largest coefficient is positive
    flat = np.concatenate([a, b])
    if flat[np.argmax(np.abs(flat))] < 0:
        a, b = -a, -b
    p = FactorProfile(a, b, period=period, kind="sturm_liouville",
                      params={"n": int(n), "eigenvalue": lam, "max_V": vmax,
                              "grid_size": int(grid_size)})
    return p.normalized()


# ---------------------------------------------------------------------------
# roots


def _refine_root(f: Callable, df: Callable, lo: float, hi: float, tol: float) -> float:
    flo, fhi = float(f(lo)), float(f(hi))
    if flo == 0.0 or fhi == 0.0 or flo * fhi > 0.0:
        # scan and scalar evaluations can disagree in the last bit near a root
        return lo if abs(flo) <= abs(fhi) else hi
    x = optimize.brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    for _ in range(4):
        fx = float(f(x))
        if abs(fx) <= tol * 1e-3:
            break
        d = float(df(x))
        if d == 0.0:
            break
        step = fx / d
        if abs(step) > (hi - lo):
            break
        x -= step
    return x


def _scan_roots(f: Callable, df: Callable, period: float, tol: float,
                n_scan: int) -> list[float]:
    xs = period * np.arange(n_scan + 1) / n_scan
    vals = np.asarray(f(xs), dtype=float)
    # periodic closure: rounding in f(L) must not hide a sign change at 0
    vals[-1] = vals[0]
    roots: list[float] = []
    for i in range(n_scan):
        v0, v1 = vals[i], vals[i + 1]
        if v0 == 0.0:
            roots.append(float(xs[i]))
        elif v0 * v1 < 0.0:
            roots.append(_refine_root(f, df, xs[i], xs[i + 1], tol))
    return roots


def _dedupe(roots: Sequence[float], period: float, sep: float = 1e-9) -> np.ndarray:
    out: list[float] = []
    snapped = [0.0 if period - r < sep else r for r in (float(wrap(r, period)) for r in roots)]
    for r in sorted(snapped):
        if out and abs(wrapped_delta(r, out[-1], period)) < sep:
            continue
        out.append(r)
    if len(out) > 1 and abs(wrapped_delta(out[0], out[-1], period)) < sep:
        out.pop()
    return np.array(out)


def _touch_roots(f: Callable, df: Callable, ddf: Callable, period: float, tol: float,
                 n_scan: int) -> list[float]:
    """Even-multiplicity roots of ``f``: zeros of ``f'`` where ``|f|`` is tiny."""
    cands = _scan_roots(df, ddf, period, tol, n_scan)
    return [c for c in cands if abs(float(f(c))) <= max(tol, 1e-10)]


def find_zeros(p: FactorProfile, tol: float = ROOT_TOL, n_scan: int = SCAN_POINTS) -> np.ndarray:
    """Sorted zeros of ``p`` in ``[0, L)``.

    Sign changes on a dense scan are bracketed, refined by a bisection-hybrid
    solver and polished by Newton steps.  Roots of even multiplicity (no sign
    change) are found as critical points with ``|h| <= tol``; they are
    reported so that the simple-zero check can flag them.
    """
    if not 0 < tol <= 1e-6:
        raise ProfileError("tol must lie in (0, 1e-6]")
    f = p
    dp = p.derivative_profile()
    roots = _scan_roots(f, dp, p.period, tol, n_scan)
    roots += _touch_roots(f, dp, dp.derivative_profile(), p.period, tol, n_scan)
    return _dedupe(roots, p.period)


def find_critical_points(p: FactorProfile, tol: float = ROOT_TOL,
                         n_scan: int = SCAN_POINTS) -> np.ndarray:
    """Sorted zeros of ``p'`` in ``[0, L)`` (see :func:`find_zeros`)."""
    return find_zeros(p.derivative_profile(), tol, n_scan)


# ---------------------------------------------------------------------------
# condition checks


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    location: float
    message: str = ""


@dataclass(frozen=True)
class ConditionReport:
    """Outcome of the structural checks on a single profile.

    ``checks`` maps names to :class:`CheckResult`; the names ``H1``, ``H2``
    and ``H3`` denote simple zeros, Morse critical points and ``h h'' <= 0``.
    """

    checks: dict
    N: int
    zeros: np.ndarray
    crits: np.ndarray

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def failed(self) -> list[str]:
        return [k for k, c in self.checks.items() if not c.passed]

    def to_rows(self) -> list[dict]:
        return [{"check": c.name, "passed": int(c.passed), "worst": c.worst,
                 "location": c.location, "message": c.message}
                for c in self.checks.values()]


def verify_conditions(p: FactorProfile, simple_tol: float = SIMPLE_TOL,
                      sample_tol: float = SAMPLE_TOL,
                      n_samples: int = H3_SAMPLES) -> ConditionReport:
    """Check simple zeros, Morse critical points, ``h h'' <= 0`` and interlacing."""
    Z, M = p.zeros, p.crits
    checks: dict[str, CheckResult] = {}

    def add(name, passed, worst, loc, msg=""):
        checks[name] = CheckResult(name, bool(passed), float(worst), float(loc), msg)

    if Z.size:
        h0, h1 = p.derivatives(Z, 1)
        i = int(np.argmin(np.abs(h1)))
        ok = np.all(np.abs(h0) <= sample_tol) and np.abs(h1[i]) >= simple_tol
        add("H1", ok, abs(h1[i]), Z[i], "" if ok else "zero with vanishing derivative")
    else:
        add("H1", False, 0.0, math.nan, "no zeros found")

    if M.size:
        _, d1, d2 = p.derivatives(M, 2)
        i = int(np.argmin(np.abs(d2)))
        ok = np.all(np.abs(d1) <= sample_tol) and np.abs(d2[i]) >= simple_tol
        add("H2", ok, abs(d2[i]), M[i], "" if ok else "degenerate critical point")
    else:
        add("H2", False, 0.0, math.nan, "no critical points found")

    xs = p.period * np.arange(n_samples) / n_samples
    h, _, hpp = p.derivatives(xs, 2)
    prod = h * hpp
    i = int(np.argmax(prod))
    add("H3", prod[i] <= sample_tol, prod[i], xs[i])

    n_even = Z.size == M.size and Z.size >= 2 and Z.size % 2 == 0
    inter = n_even
    if n_even:
        merged = sorted([(z, 0) for z in Z] + [(m, 1) for m in M])
        tags = [t for _, t in merged]
        inter = all(tags[j] != tags[(j + 1) % len(tags)] for j in range(len(tags)))
    add("interlacing", inter, abs(Z.size - M.size), math.nan,
        f"|Z|={Z.size}, |M|={M.size}")

    if M.size:
        hb, _, hbpp = p.derivatives(M, 2)
        v = hb * hbpp
        i = int(np.argmax(v))
        add("crit_sign", v[i] < 0, v[i], M[i])
    else:
        add("crit_sign", False, 0.0, math.nan, "no critical points")

    # |h| concave on each zero interval: sign(h) h'' <= 0 where h != 0
    worst, loc = -math.inf, math.nan
    if Z.size >= 2:
        for j, a in enumerate(Z):
            b = Z[(j + 1) % Z.size] + (p.period if j + 1 == Z.size else 0.0)
            t = np.linspace(a, b, 257)[1:-1]
            ht, _, htpp = p.derivatives(t, 2)
            sgn = np.sign(ht[len(t) // 2])
            val = sgn * htpp
            k = int(np.argmax(val))
            if val[k] > worst:
                worst, loc = float(val[k]), float(wrap(t[k], p.period))
            # sign must also be constant on the open interval
            if np.any(np.sign(ht) != sgn):
                worst, loc = math.inf, float(wrap(t[0], p.period))
    add("concavity", worst <= sample_tol, worst, loc)

    xs0 = np.linspace(0.0, p.period, 64, endpoint=False)
    d0 = np.array(p.derivatives(xs0, 3))
    dL = np.array(p.derivatives(xs0 + p.period, 3))
    per = float(np.max(np.abs(d0 - dL) / (1.0 + np.abs(d0))))
    add("periodicity", per <= sample_tol, per, math.nan)

    N = Z.size // 2 if n_even else 0
    return ConditionReport(checks=checks, N=N, zeros=Z, crits=M)


# ---------------------------------------------------------------------------
# torus geometry


@dataclass(frozen=True)
class Cell:
    """Open rectangle between consecutive zeros; side intervals may wrap past L."""

    index: tuple
    x1: tuple
    x2: tuple
    center: tuple
    sign: int


@dataclass(frozen=True)
class Midpoint:
    """A point of Z1 x M2 (``kind='Z1xM2'``, tangential coordinate 2) or of
    M1 x Z2 (``kind='M1xZ2'``, tangential coordinate 1)."""

    point: tuple
    kind: str
    tangential_axis: int
    vq_interval: tuple
    vq_radius: float


@dataclass(frozen=True)
class TorusGeometry:
    h1: FactorProfile
    h2: FactorProfile
    exclusion_r: float
    cells: tuple
    centers: np.ndarray
    corners: np.ndarray
    midpoints: tuple
    gamma_r: float
    gamma_r_location: tuple

    @property
    def periods(self) -> tuple:
        return (self.h1.period, self.h2.period)

    @property
    def area(self) -> float:
        return self.h1.period * self.h2.period

    def H(self, x):
        x = np.asarray(x, dtype=float)
        return self.h1(x[..., 0]) * self.h2(x[..., 1])

    def midpoint_array(self) -> np.ndarray:
        return np.array([m.point for m in self.midpoints])

    def center_distance(self, x) -> np.ndarray:
        """Minimal-image distance from each point to the nearest center."""
        x = np.asarray(x, dtype=float)
        d = torus_distance(x[..., None, :], self.centers, self.periods)
        return d.min(axis=-1)

    def in_domain(self, x, r: float | None = None) -> np.ndarray:
        """Mask of points outside every open center ball of radius ``r``."""
        r = self.exclusion_r if r is None else r
        return self.center_distance(x) >= r

    def cell_of(self, x) -> int:
        """Index of the cell containing point ``x`` (closed boundaries resolve low)."""
        for k, c in enumerate(self.cells):
            if _in_interval(x[0], c.x1, self.h1.period) and _in_interval(x[1], c.x2, self.h2.period):
                return k
        raise GeometryError("point not in any cell")

    def to_rows(self) -> list[dict]:
        rows = []
        for k, c in enumerate(self.cells):
            rows.append({"kind": "cell", "index": k, "x1": c.center[0], "x2": c.center[1],
                         "H": float(self.H(np.array(c.center))),
                         "extra": f"[{c.x1[0]:.17g},{c.x1[1]:.17g}]x[{c.x2[0]:.17g},{c.x2[1]:.17g}]"})
        for k, p in enumerate(self.centers):
            rows.append({"kind": "center", "index": k, "x1": p[0], "x2": p[1],
                         "H": float(self.H(p)), "extra": ""})
        for k, p in enumerate(self.corners):
            rows.append({"kind": "corner", "index": k, "x1": p[0], "x2": p[1],
                         "H": float(self.H(p)), "extra": ""})
        for k, m in enumerate(self.midpoints):
            rows.append({"kind": "midpoint", "index": k, "x1": m.point[0], "x2": m.point[1],
                         "H": float(self.H(np.array(m.point))),
                         "extra": f"{m.kind};vq_radius={m.vq_radius:.17g}"})
        return rows


def _in_interval(x: float, iv: tuple, period: float) -> bool:
    a, b = iv
    t = float(wrap(x - a, period))
    return t <= (b - a) + 1e-12


def _intervals(zeros: np.ndarray, period: float) -> list[tuple]:
    out = []
    for j, a in enumerate(zeros):
        b = zeros[j + 1] if j + 1 < zeros.size else zeros[0] + period
        out.append((float(a), float(b)))
    return out


def _crit_in(iv: tuple, crits: np.ndarray, period: float) -> float:
    a, b = iv
    for c in crits:
        t = float(wrap(c - a, period))
        if 0.0 < t < b - a:
            return float(wrap(c, period))
    raise GeometryError(f"no critical point in ({a}, {b})")


def _vq_interval(h: FactorProfile, p: float, zeros: np.ndarray) -> tuple:
    """Component of {|h| > |h(p)|/2} containing the critical point ``p``."""
    level = 0.5 * abs(float(h(p)))
    g = lambda t: abs(float(h(t))) - level
    # the component lies inside the zero interval around p
    left = max((z for z in np.concatenate([zeros - h.period, zeros]) if z < p), default=p - h.period)
    right = min((z for z in np.concatenate([zeros, zeros + h.period]) if z > p), default=p + h.period)
    lo = optimize.brentq(g, left, p)
    hi = optimize.brentq(g, p, right)
    return (lo, hi)


def optimize_over_domain(func: Callable, geometry_like, r: float, mode: str = "max",
                         grid: int = 512) -> tuple:
    """Extremum of ``func`` over ``D_r`` (torus minus open center balls).

    A dense grid locates the candidate; if it lies next to a ball boundary the
    circle is searched in angle, otherwise a local simplex search refines it.
    Returns ``(value, (x1, x2))``.
    """
    L1, L2 = geometry_like.periods
    centers = geometry_like.centers
    sgn = 1.0 if mode == "max" else -1.0
    g1 = (np.arange(grid) + 0.5) * L1 / grid
    g2 = (np.arange(grid) + 0.5) * L2 / grid
    X1, X2 = np.meshgrid(g1, g2, indexing="ij")
    pts = np.stack([X1, X2], axis=-1)
    vals = sgn * func(pts)
    dist = torus_distance(pts[..., None, :], centers, (L1, L2)).min(axis=-1)
    vals = np.where(dist >= r, vals, -np.inf)
    i = np.unravel_index(np.argmax(vals), vals.shape)
    best = float(vals[i])
    loc = (float(pts[i][0]), float(pts[i][1]))
    spacing = max(L1, L2) / grid

    # refine on any nearby ball boundary
    for c in centers:
        if r <= 0:
            break
        if torus_distance(np.array(loc), c, (L1, L2)) < r + 2.0 * spacing:
            th = np.linspace(0.0, TWO_PI, 2048, endpoint=False)
            circ = np.stack([c[0] + r * np.cos(th), c[1] + r * np.sin(th)], axis=-1)
            cv = sgn * func(circ)
            j = int(np.argmax(cv))
            step = TWO_PI / 2048
            res = optimize.minimize_scalar(
                lambda t: -sgn * float(func(np.array([c[0] + r * math.cos(t), c[1] + r * math.sin(t)]))),
                bounds=(th[j] - step, th[j] + step), method="bounded",
                options={"xatol": 1e-12})
            cand = -float(res.fun)
            if cand > best:
                best = cand
                loc = (c[0] + r * math.cos(res.x), c[1] + r * math.sin(res.x))

    # interior refinement
    res = optimize.minimize(lambda y: -sgn * float(func(np.asarray(y))), np.array(loc),
                            method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-15, "maxiter": 2000})
    if -res.fun > best and torus_distance(res.x, centers, (L1, L2)).min() >= r:
        best = float(-res.fun)
        loc = (float(res.x[0]), float(res.x[1]))
    return sgn * best, (float(wrap(loc[0], L1)), float(wrap(loc[1], L2)))


def build_geometry(h1: FactorProfile, h2: FactorProfile, exclusion_r: float = 0.3) -> TorusGeometry:
    """Cells, centers, corners, midpoints and ``gamma_r`` for ``H = h1 h2``.

    Raises
    ------
    GeometryError
        If a profile fails its condition report, if two exclusion balls
        overlap, or if an exclusion ball contains a midpoint.
    """
    for name, p in (("h1", h1), ("h2", h2)):
        rep = verify_conditions(p)
        if not rep.passed:
            raise GeometryError(f"{name} fails conditions: {', '.join(rep.failed())}")
    if exclusion_r < 0:
        raise GeometryError("exclusion_r must be nonnegative")
    Z1, Z2 = h1.zeros, h2.zeros
    M1, M2 = h1.crits, h2.crits
    L = (h1.period, h2.period)
    I1, I2 = _intervals(Z1, L[0]), _intervals(Z2, L[1])

    cells = []
    centers = []
    for i, iv1 in enumerate(I1):
        c1 = _crit_in(iv1, M1, L[0])
        for j, iv2 in enumerate(I2):
            c2 = _crit_in(iv2, M2, L[1])
            s = int(np.sign(float(h1(c1) * h2(c2))))
            cells.append(Cell((i, j), iv1, iv2, (c1, c2), s))
            centers.append((c1, c2))
    centers = np.array(centers)
    corners = np.array([(a, b) for a in Z1 for b in Z2])

    mids = []
    for a in Z1:
        for p2 in M2:
            iv = _vq_interval(h2, p2, Z2)
            mids.append(Midpoint((float(a), float(p2)), "Z1xM2", 2, iv,
                                 float(min(p2 - iv[0], iv[1] - p2))))
    for p1 in M1:
        for b in Z2:
            iv = _vq_interval(h1, p1, Z1)
            mids.append(Midpoint((float(p1), float(b)), "M1xZ2", 1, iv,
                                 float(min(p1 - iv[0], iv[1] - p1))))

    if exclusion_r > 0:
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                d = float(torus_distance(centers[i], centers[j], L))
                if d <= 2.0 * exclusion_r:
                    raise GeometryError(
                        f"exclusion balls of centers {i} {tuple(centers[i])} and "
                        f"{j} {tuple(centers[j])} overlap (distance {d:.6g})")
        mp = np.array([m.point for m in mids])
        for i, c in enumerate(centers):
            d = torus_distance(mp, c, L)
            if np.any(d <= exclusion_r):
                raise GeometryError(f"exclusion ball of center {i} contains a midpoint")

    proto = _GeomProto(L, centers)
    H = lambda x: h1(np.asarray(x)[..., 0]) * h2(np.asarray(x)[..., 1])
    gamma, gloc = optimize_over_domain(lambda x: np.abs(H(x)), proto, exclusion_r, "max")
    return TorusGeometry(h1=h1, h2=h2, exclusion_r=float(exclusion_r), cells=tuple(cells),
                         centers=centers, corners=corners, midpoints=tuple(mids),
                         gamma_r=float(gamma), gamma_r_location=gloc)


@dataclass(frozen=True)
class _GeomProto:
    periods: tuple
    centers: np.ndarray
