"""INI experiment configuration.

Values are plain numbers or small arithmetic expressions in ``pi``; lists are
comma separated; profile specs are a kind followed by ``key=value`` tokens::

    [model]
    h1 = trig k=1
    h2 = trig k=1 phase=pi/2
    l = constant value=1
    r = quadratic a=1 b=0.25
    exclusion_r = 0.3

    [run]
    alpha = 0.5, 1, 4
    dt = 1e-3
    T = 5
    seeds = 0-99
"""

from __future__ import annotations

import ast
import configparser
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import AlignedCoefficients, CoefficientError, FieldBundle, coefficients_from_spec
from .hamiltonian import (FactorProfile, ProfileError, build_geometry, make_fourier_profile,
                          make_perturbed_trig_profile, make_sturm_liouville_profile,
                          make_trig_profile)


class ParameterError(ValueError):
    """Invalid configuration value."""


_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
        ast.Div: operator.truediv, ast.Pow: operator.pow, ast.USub: operator.neg,
        ast.UAdd: operator.pos}


def number(text: str) -> float:
    """Evaluate a numeric literal or arithmetic expression in ``pi``."""
    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id == "pi":
            return math.pi
        if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.operand))
        raise ParameterError(f"not a number: {text!r}")

    try:
        return ev(ast.parse(text.strip(), mode="eval"))
    except (SyntaxError, ZeroDivisionError) as exc:
        raise ParameterError(f"not a number: {text!r}") from exc


def numbers(text: str) -> tuple[float, ...]:
    return tuple(number(t) for t in text.split(",") if t.strip())


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0-99"``, ``"1,5,9"`` or a mix such as ``"0-3,10"``."""
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        if "-" in tok[1:]:
            a, b = tok.split("-", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ParameterError(f"empty seed range {tok!r}")
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(tok))
    if not out:
        raise ParameterError("no seeds given")
    return tuple(out)


def parse_spec(text: str) -> tuple[str, dict]:
    """Split ``"kind k1=v1 k2=v2"`` into the kind and a raw-string dict."""
    parts = text.split()
    if not parts:
        raise ParameterError("empty specification")
    kv = {}
    for p in parts[1:]:
        if "=" not in p:
            raise ParameterError(f"expected key=value, got {p!r}")
        k, v = p.split("=", 1)
        kv[k] = v
    return parts[0], kv


def parse_profile(text: str) -> FactorProfile:
    kind, kv = parse_spec(text)
    try:
        if kind == "trig":
            return make_trig_profile(int(number(kv.get("k", "1"))), number(kv.get("phase", "0")))
        if kind in ("perturbed_trig", "perturbed"):
            return make_perturbed_trig_profile(number(kv.get("a", "0.25")))
        if kind in ("custom_fourier", "fourier"):
            normalize = kv.get("normalize", "1") not in ("0", "false", "no")
            return make_fourier_profile(numbers(kv.get("cos", "0")), numbers(kv.get("sin", "0")),
                                        normalize=normalize)
        if kind == "sturm_liouville":
            vc = np.array(numbers(kv.get("v_cos", "0")))
            V = lambda x: sum(c * np.cos(k * x) for k, c in enumerate(vc))
            return make_sturm_liouville_profile(V, int(number(kv.get("n", "1"))),
                                                int(number(kv.get("grid", "256"))))
    except ProfileError as exc:
        raise ParameterError(str(exc)) from exc
    raise ParameterError(f"unknown profile kind {kind!r}")


def parse_coefficient(text: str) -> tuple[float, ...]:
    kind, kv = parse_spec(text)
    params = {k: (numbers(v) if k == "coeffs" else number(v)) for k, v in kv.items()}
    try:
        return coefficients_from_spec(kind, **params)
    except (CoefficientError, KeyError) as exc:
        raise ParameterError(f"bad coefficient spec {text!r}: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment parameters plus the raw text for echoing."""

    text: str
    h1: FactorProfile
    h2: FactorProfile
    l_coeffs: tuple
    r_coeffs: tuple
    exclusion_r: float
    alphas: tuple
    dt: float
    T: float
    seeds: tuple
    threads: int
    record_every: int
    R0: float
    delta: float
    N: int
    f0: str
    grid_size: int
    out: str
    sections: dict = field(default_factory=dict)

    def get(self, section: str, key: str, default: str) -> str:
        return self.sections.get(section, {}).get(key, default)

    def number(self, section: str, key: str, default: float) -> float:
        return number(self.get(section, key, repr(default)))

    def numbers(self, section: str, key: str, default: str) -> tuple:
        return numbers(self.get(section, key, default))

    def geometry(self):
        return build_geometry(self.h1, self.h2, self.exclusion_r)

    def bundle(self) -> FieldBundle:
        return FieldBundle(self.geometry(),
                           AlignedCoefficients.polynomial(self.l_coeffs, self.r_coeffs))

    def with_seed_offset(self, m: int) -> "ExperimentConfig":
        from dataclasses import replace

        return replace(self, seeds=tuple(s + int(m) for s in self.seeds))


def _validate(c: dict) -> None:
    if any(a <= 0 for a in c["alphas"]):
        raise ParameterError("alpha must be positive")
    if c["R0"] < 0:
        raise ParameterError("R0 must be nonnegative")
    if c["delta"] < 0:
        raise ParameterError("delta must be nonnegative")
    if not c["dt"] > 0:
        raise ParameterError("dt must be positive")
    if not c["T"] >= c["dt"]:
        raise ParameterError("T must be at least dt")
    if c["N"] < 1 or c["grid_size"] < 32 or c["threads"] < 1 or c["record_every"] < 1:
        raise ParameterError("N, grid_size (>= 32), threads and record_every must be positive")
    if not 0 < c["exclusion_r"]:
        raise ParameterError("exclusion_r must be positive")
    for name in ("l_coeffs", "r_coeffs"):
        if c[name][0] <= 0:
            raise ParameterError(f"{name[0]}(0) must be positive")
    try:
        AlignedCoefficients.polynomial(c["l_coeffs"], c["r_coeffs"])
    except CoefficientError as exc:
        raise ParameterError(str(exc)) from exc


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate every field before any computation starts."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParameterError(f"malformed config: {exc}") from exc
    sections = {s: dict(cp[s]) for s in cp.sections()}

    def g(sec, key, default):
        return sections.get(sec, {}).get(key, default)

    try:
        c = dict(
            h1=parse_profile(g("model", "h1", "trig k=1")),
            h2=parse_profile(g("model", "h2", "trig k=1 phase=pi/2")),
            l_coeffs=parse_coefficient(g("model", "l", "constant value=1")),
            r_coeffs=parse_coefficient(g("model", "r", "constant value=1")),
            exclusion_r=number(g("model", "exclusion_r", "0.3")),
            alphas=numbers(g("run", "alpha", "1")),
            dt=number(g("run", "dt", "1e-3")),
            T=number(g("run", "T", "5")),
            seeds=parse_seeds(g("run", "seeds", "0-9")),
            threads=int(number(g("run", "threads", "1"))),
            record_every=int(number(g("run", "record_every", "10"))),
            R0=number(g("run", "R0", "10")),
            delta=number(g("particles", "delta", "0.05")),
            N=int(number(g("particles", "N", "2000"))),
            f0=g("density", "f0", "uniform"),
            grid_size=int(number(g("density", "grid_size", "64"))),
            out=g("run", "out", "out"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParameterError):
            raise
        raise ParameterError(str(exc)) from exc
    _validate(c)
    return ExperimentConfig(text=text, sections=sections, **c)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ParameterError(f"config file not found: {p}")
    with open(p, newline="") as fh:
        return parse_config(fh.read())


def parse_f0(text: str, geometry):
    """Initial density: ``uniform``, ``bump`` or bumps joined by ``;``."""
    from . import density as dn

    parts = [p.strip() for p in text.split(";") if p.strip()]
    out = []
    for p in parts:
        kind, kv = parse_spec(p)
        if kind == "uniform":
            r = number(kv["r"]) if "r" in kv else None
            try:
                out.append(dn.uniform_density(geometry, r, kv.get("normalization", "height")))
            except dn.InputError as exc:
                raise ParameterError(str(exc)) from exc
        elif kind == "bump":
            try:
                c = (number(kv["x1"]), number(kv["x2"]))
                out.append(dn.bump_density(c, number(kv["radius"]),
                                           number(kv.get("height", "1")), geometry.periods))
            except KeyError as exc:
                raise ParameterError(f"bump needs x1, x2 and radius: {p!r}") from exc
        else:
            raise ParameterError(f"unknown f0 kind {kind!r}")
    if not out:
        raise ParameterError("empty f0 specification")
    if len(out) == 1:
        return out[0]
    if any(o.label.startswith("uniform") for o in out):
        raise ParameterError("uniform f0 cannot be combined with bumps")
    return dn.sum_of_bumps(out)
