"""Command line entry point.

Subcommands ``verify``, ``fields``, ``flow``, ``particles``, ``density`` and
``rates`` each read an INI config (see :mod:`inertial_coalescence.config`),
echo it into the output directory and write comma-separated tables plus SVG
figures.

Exit status: 0 success, 1 verification failure, 2 parameter error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import density as dn
from . import flow as fl
from . import particles as pt
from .config import ExperimentConfig, ParameterError, load_config, parse_f0
from .engine import FlowIntegrationError
from .fields import (CoefficientError, SurveyError, divergence_zero_set, midpoint_quadratic_fit,
                     sign_survey, stratified_points)
from .hamiltonian import GeometryError, ProfileError, verify_conditions
from .output import contour_figure, echo_config, line_figure, write_dict_rows, write_table
from .stochastics import brownian_path, stream_split

EXIT_OK, EXIT_VERIFY, EXIT_PARAM, EXIT_NUMERIC = 0, 1, 2, 3
IDENTITY_TOL = 1e-10
LOSS_TOL = 1e-6
# stream index for per-seed random start points
X0_STREAM = 2
IDENTITY_NAMES = ("gradH_dot_dxixi_eq_H_Lambda", "div_dxixi_eq_2DH", "twoDH_eq_Lambda_split")


def _log(msg: str) -> None:
    print(msg, flush=True)


def _grid(geometry, n: int = 257):
    L1, L2 = geometry.periods
    X1, X2 = np.meshgrid(np.linspace(0, L1, n), np.linspace(0, L2, n), indexing="ij")
    return X1, X2, np.stack([X1, X2], axis=-1)


# ---------------------------------------------------------------------------
# verify


def cmd_verify(cfg: ExperimentConfig, out: Path, figures: bool) -> int:
    failed = []
    for name, prof in (("h1", cfg.h1), ("h2", cfg.h2)):
        rep = verify_conditions(prof)
        write_dict_rows(out / f"conditions_{name}.csv", rep.to_rows())
        write_table(out / f"profile_{name}.csv", ["quantity", "value"],
                    [("kind", prof.kind), ("wave_number_N", rep.N),
                     ("zeros", " ".join(format(z, ".17g") for z in rep.zeros)),
                     ("critical_points", " ".join(format(z, ".17g") for z in rep.crits)),
                     ("passed", rep.passed)])
        failed += [f"{name}: ({k})" if k.startswith("H") else f"{name}: {k}"
                   for k in rep.failed()]
    lines = []
    if not failed:
        try:
            geom = cfg.geometry()
        except GeometryError as exc:
            failed.append(f"geometry: {exc}")
        else:
            write_dict_rows(out / "geometry.csv", geom.to_rows())
            lines += [f"cells {len(geom.cells)}", f"centers {len(geom.centers)}",
                      f"corners {len(geom.corners)}", f"midpoints {len(geom.midpoints)}",
                      f"gamma_r {geom.gamma_r:.17g}"]
    lines += ["status " + ("pass" if not failed else "fail")] + [f"failed {f}" for f in failed]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    for ln in lines:
        _log(ln)
    return EXIT_OK if not failed else EXIT_VERIFY


# ---------------------------------------------------------------------------
# fields


def cmd_fields(cfg: ExperimentConfig, out: Path, figures: bool) -> int:
    bundle = cfg.bundle()
    geom = bundle.geometry
    n = int(cfg.number("fields", "samples", 10000))
    pts = stratified_points(geom, n, seed=cfg.seeds[0])
    res, scale = bundle.identity_residuals(pts)
    rel = np.abs(res) / np.maximum(scale, 1e-300)
    rows = [(nm, float(rel[..., i].max())) for i, nm in enumerate(IDENTITY_NAMES)]
    g_gap = max(float(np.max(np.abs(bundle.g_alpha_general(pts, a) - bundle.g_alpha_reduced(pts, a))))
                for a in cfg.alphas)
    rows.append(("g_general_eq_g_reduced", g_gap))
    dh_gap = float(np.max(np.abs(bundle.d_h(pts) - bundle.d_h_det(pts))))
    rows.append(("DH_eq_minus_det_hess", dh_gap))
    write_table(out / "identities.csv", ["identity", "max_residual"], rows)
    worst = max(r[1] for r in rows)

    survey_rows = []
    eta = cfg.number("fields", "survey_eta", 0.05)
    theta = cfg.number("fields", "survey_theta", 0.05)
    for a in cfg.alphas:
        try:
            survey_rows.append(sign_survey(bundle, a, eta, theta, seed=cfg.seeds[0]).to_kv())
        except SurveyError as exc:
            _log(f"sign survey skipped for alpha={a}: {exc}")
    if survey_rows:
        write_dict_rows(out / "sign_survey.csv", survey_rows)
    write_dict_rows(out / "midpoint_fits.csv", midpoint_quadratic_fit(bundle))

    for a in cfg.alphas:
        zs = divergence_zero_set(bundle, a)
        cols = [(p[0], p[1], float(bundle.div_g_alpha_closed(p, a))) for p in zs]
        write_table(out / f"divg_zero_set_alpha{a:g}.csv", ["x1", "x2", "div_g"], cols)

    if figures:
        X1, X2, P = _grid(geom)
        H = bundle.H(P)
        contour_figure(out / "level_H.svg", X1, X2, H, "level curves of H", periods=geom.periods)
        for a in cfg.alphas:
            dg = bundle.div_g_alpha_closed(P, a)
            contour_figure(out / f"level_divg_alpha{a:g}.svg", X1, X2, dg,
                           f"level curves of div g, alpha={a:g}", periods=geom.periods)
            contour_figure(out / f"joint_alpha{a:g}.svg", X1, X2, dg,
                           f"div g >= 0.3 with level curves of H, alpha={a:g}",
                           shade_above=0.3, overlay=H, periods=geom.periods)
    _log(f"max identity residual {worst:.3e}")
    return EXIT_OK if worst <= IDENTITY_TOL else EXIT_VERIFY


# ---------------------------------------------------------------------------
# flow


def _flow_x0(cfg, geom, seeds):
    spec = cfg.get("flow", "x0", "pi/4, pi/4")
    if spec.strip() == "uniform":
        return np.concatenate([pt.sample_uniform_domain(
            geom, 1, geom.exclusion_r, np.random.default_rng(stream_split(s, X0_STREAM)))
            for s in seeds])
    from .config import numbers

    x0 = np.array(numbers(spec))
    if x0.shape != (2,):
        raise ParameterError("flow x0 must be two numbers or 'uniform'")
    return np.tile(x0, (len(seeds), 1))


def cmd_flow(cfg: ExperimentConfig, out: Path, figures: bool) -> int:
    bundle = cfg.bundle()
    geom = bundle.geometry
    seeds = cfg.seeds
    eta = cfg.number("flow", "eta", 0.01)
    thetas = cfg.numbers("flow", "thetas", "0.05, 0.1, 0.2")
    window = cfg.number("flow", "window", 1.0)
    s_j = cfg.number("flow", "j_s", 5.0)
    paths = [brownian_path(s, cfg.T, cfg.dt) for s in seeds]
    x0 = _flow_x0(cfg, geom, seeds)
    ok = True
    id_rows, entry_rows, occ_rows, j_rows = [], [], [], []
    for a in cfg.alphas:
        ens = fl.simulate_ensemble(x0, paths, a, bundle, record_every=cfg.record_every)
        bound = fl.entry_time_bound(bundle, eta, a)
        ent = fl.entry_times(ens, eta)
        for i, s in enumerate(seeds):
            tr = ens[i]
            err = fl.check_H_identity(tr)
            viol = fl.monotonicity_violation(tr.H_values, ens.dt)
            sign_ok = bool(np.all(np.sign(tr.H_values) == np.sign(tr.H_values[0])))
            id_rows.append((a, s, err, viol, int(viol <= 0.0), int(sign_ok)))
            reached = math.isfinite(ent[i])
            entry_rows.append((a, s, ent[i], bound, int(reached), int(ent[i] <= bound)))
            ok &= viol <= 0.0 and sign_ok and (not reached or ent[i] <= bound)
        finite = ent[np.isfinite(ent)]
        s_occ = cfg.get("flow", "s", "auto")
        s_occ = float(math.ceil(finite.max())) if s_occ == "auto" and finite.size else (
            float(s_occ) if s_occ != "auto" else 0.0)
        if s_occ + window <= cfg.T:
            for q in geom.midpoints:
                rep = fl.occupation_report(ens, q, thetas, s_occ, window, periods=geom.periods)
                for k, th in enumerate(rep.thetas):
                    ratio = rep.ratio(th) if round(2 * th, 12) in np.round(rep.thetas, 12) else math.nan
                    lin = int(math.isnan(ratio) or 0.35 <= ratio <= 0.7)
                    occ_rows.append((a, q.point[0], q.point[1], q.kind, s_occ, th, rep.mean[k],
                                     rep.lo[k], rep.hi[k], rep.kappa0_hat, ratio, lin))
        if s_j + 1.0 <= cfg.T:
            jr = fl.j_alpha_report(ens, s_j, a, bundle)
            j_rows.append((a, s_j, jr.mean, jr.lo, jr.hi, jr.kappa_bar_hat))
        write_table(out / f"trajectory_alpha{a:g}_seed{seeds[0]}.csv",
                    ["t", "x1", "x2", "H", "contraction_integral", "divg_integral"],
                    ens[0].rows())
        if figures:
            tr = ens[0]
            line_figure(out / f"H_alpha{a:g}.svg",
                        {"|H|": (tr.times, np.abs(tr.H_values), None, None),
                         "prediction": (tr.times, np.abs(tr.H_values[0]) *
                                        np.exp(-tr.contraction_integral), None, None)},
                        f"|H| along one path, alpha={a:g}", logy=True)
    write_table(out / "h_identity.csv", ["alpha", "seed", "max_rel_error", "monotonicity_violation",
                                         "monotone", "sign_constant"], id_rows)
    write_table(out / "entry_times.csv", ["alpha", "seed", "measured", "bound_T_eta_alpha",
                                          "reached", "within_bound"], entry_rows)
    if occ_rows:
        write_table(out / "occupation.csv",
                    ["alpha", "q1", "q2", "kind", "s", "theta", "mean", "lo", "hi", "kappa0_hat",
                     "ratio_theta_2theta", "linear_scaling_pass"], occ_rows)
    if j_rows:
        write_table(out / "j_alpha.csv", ["alpha", "s", "mean_J", "lo", "hi", "kappa_bar_hat"],
                    j_rows)
    _log("flow checks " + ("pass" if ok else "fail"))
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# particles / density / rates


def _window(cfg, section):
    w = cfg.numbers(section, "window", "")
    if not w:
        return (0.25 * cfg.T, cfg.T)
    if len(w) != 2:
        raise ParameterError("window needs two numbers")
    return w


def cmd_particles(cfg: ExperimentConfig, out: Path, figures: bool) -> int:
    bundle = cfg.bundle()
    geom = bundle.geometry
    window = _window(cfg, "particles")
    snaps = cfg.numbers("particles", "snapshot_times", "")
    mass_rows, fit_rows, curves = [], [], {}
    for a in cfg.alphas:
        runs = []
        for s in cfg.seeds:
            e = pt.init_ensemble("uniform", cfg.N, geom, seed=s, R0=cfg.R0, delta=cfg.delta,
                                 alpha=a)
            runs.append(pt.run(e, brownian_path(s, cfg.T, cfg.dt), cfg.T, bundle,
                               cfg.record_every, snaps))
        series = pt.ensemble_mass(runs)
        mass_rows += [(a,) + r for r in series.rows()]
        try:
            f = pt.fit_decay(series, window)
            fit_rows.append((a, window[0], window[1], f.rate, f.lo, f.hi, f.r2, int(f.linear)))
        except pt.SupportError as exc:
            _log(f"fit skipped for alpha={a}: {exc}")
        for t, p in runs[0].meta["snapshots"].items():
            write_table(out / f"particles_alpha{a:g}_t{t:g}.csv", ["x1", "x2"], p.tolist())
        curves[f"alpha={a:g}"] = (series.times, series.mean, series.lo, series.hi)
    write_table(out / "particles_mass.csv", ["alpha", "t", "mean", "lo", "hi", "n_paths"],
                mass_rows)
    write_table(out / "particles_fit.csv",
                ["alpha", "t_start", "t_end", "rate", "lo", "hi", "r2", "linear"], fit_rows)
    write_table(out / "calibration.csv", ["N", "R0", "delta", "R0_pde"],
                [(cfg.N, cfg.R0, cfg.delta, pt.pde_loss_calibration(cfg.N, cfg.R0, cfg.delta))])
    if figures:
        line_figure(out / "particles_mass.svg", curves, "particle mass fraction", logy=True)
    return EXIT_OK


def _density_snapshot(cfg, bundle, f0, a, t, seed):
    """Grid density at time ``t`` by depositing transported node masses."""
    n = cfg.grid_size
    path = brownian_path(seed, t, cfg.dt)
    sol = dn.solve_characteristics(f0, n, path, a, cfg.R0, t, bundle, record_every=path.n_steps)
    pos, _ = fl.flow_map(sol.nodes, path, a, bundle, t)
    L1, L2 = bundle.geometry.periods
    i = np.minimum((pos[:, 0] / L1 * n).astype(int), n - 1)
    j = np.minimum((pos[:, 1] / L2 * n).astype(int), n - 1)
    grid = np.zeros((n, n))
    np.add.at(grid, (i, j), sol.h_det[-1])
    return sol.nodes, grid.ravel()


def cmd_density(cfg: ExperimentConfig, out: Path, figures: bool) -> int:
    bundle = cfg.bundle()
    f0 = parse_f0(cfg.f0, bundle.geometry)
    window = _window(cfg, "density")
    snaps = cfg.numbers("density", "snapshot_times", "")
    mass_rows, fit_rows, check_rows, curves = [], [], [], {}
    conserve = cfg.R0 == 0
    for a in cfg.alphas:
        fam = dn.expected_mass_family(f0, a, [cfg.R0], cfg.T, cfg.seeds, cfg.grid_size, bundle,
                                      cfg.dt, cfg.record_every, skip_empty=not conserve)
        series = fam[float(cfg.R0)]
        mass_rows += [(a,) + r for r in series.rows()]
        if conserve:
            area = bundle.geometry.area
            area_err = float(np.max(np.abs(fam["area"].per_path - area))) / area
            drift = float(np.max(np.abs(series.per_path - series.per_path[:, :1])
                                 / series.per_path[:, :1]))
            check_rows.append((a, area_err, drift, int(area_err <= 1e-3 and drift <= 1e-3)))
        else:
            try:
                f = dn.fit_decay(series, window)
                fit_rows.append((a, window[0], window[1], f.rate, f.lo, f.hi, f.r2,
                                 int(f.linear)))
            except pt.WindowError as exc:
                _log(f"fit skipped for alpha={a}: {exc}")
            viol = dn.loss_inequality_violation(series, cfg.R0, bundle.geometry.area)
            check_rows.append((a, viol, int(viol <= LOSS_TOL)))
        curves[f"alpha={a:g}"] = (series.times, series.mean, series.lo, series.hi)
        cell = bundle.geometry.area / cfg.grid_size ** 2
        for t in snaps:
            nodes, vals = _density_snapshot(cfg, bundle, f0, a, t, cfg.seeds[0])
            dens = vals / cell
            write_table(out / f"density_alpha{a:g}_t{t:g}.csv", ["x1", "x2", "f"],
                        np.column_stack([nodes, dens]).tolist())
            if figures:
                n = cfg.grid_size
                contour_figure(out / f"density_alpha{a:g}_t{t:g}.svg",
                               nodes[:, 0].reshape(n, n), nodes[:, 1].reshape(n, n),
                               dens.reshape(n, n), f"density at t={t:g}, alpha={a:g}",
                               periods=bundle.geometry.periods)
    write_table(out / "density_mass.csv", ["alpha", "t", "mean", "lo", "hi", "n_paths"], mass_rows)
    if fit_rows:
        write_table(out / "density_fit.csv",
                    ["alpha", "t_start", "t_end", "rate", "lo", "hi", "r2", "linear"], fit_rows)
    if conserve:
        write_table(out / "conservation.csv",
                    ["alpha", "max_area_error", "max_mass_drift", "pass"], check_rows)
    else:
        write_table(out / "loss_inequality.csv", ["alpha", "max_rel_violation", "pass"],
                    check_rows)
    if figures:
        line_figure(out / "density_mass.svg", curves, "expected mass", logy=not conserve)
    ok = all(r[-1] for r in check_rows)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_rates(cfg: ExperimentConfig, out: Path, figures: bool) -> int:
    bundle = cfg.bundle()
    f0 = parse_f0(cfg.f0, bundle.geometry)
    alphas = cfg.numbers("rates", "alphas", ",".join(map(repr, cfg.alphas)))
    window = _window(cfg, "rates")
    R0s = [cfg.R0, 2.0 * cfg.R0]
    per_r0 = {r: {} for r in R0s}
    for a in alphas:
        fam = dn.expected_mass_family(f0, a, R0s, cfg.T, cfg.seeds, cfg.grid_size, bundle,
                                      cfg.dt, cfg.record_every)
        for r in R0s:
            per_r0[r][a] = fam[r]
    rows, summaries = [], {}
    for r in R0s:
        summ = dn.rate_curve(f0, alphas, r, cfg.T, cfg.seeds, bundle, cfg.grid_size, cfg.dt,
                             window, cfg.record_every, series=per_r0[r])
        summaries[r] = summ
        rows += [(r,) + tuple(x) + (int(summ.monotone),) for x in summ.rows()]
    write_table(out / "rates.csv", ["R0", "alpha", "rate", "lo", "hi", "r2", "factor",
                                    "kappa_hat", "monotone"], rows)
    if figures:
        s = summaries[cfg.R0]
        line_figure(out / "rates.svg", {"fitted rate": (s.alphas, s.rates, s.lo, s.hi)},
                    "fitted decay rate", xlabel="alpha", ylabel="rate")
    mono = summaries[cfg.R0].monotone
    _log("rates monotone " + ("yes" if mono else "no"))
    return EXIT_OK if mono else EXIT_VERIFY


COMMANDS = {"verify": cmd_verify, "fields": cmd_fields, "flow": cmd_flow,
            "particles": cmd_particles, "density": cmd_density, "rates": cmd_rates}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="inertial-coalescence", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="INI configuration file")
    ap.add_argument("--out", help="output directory (overrides [run] out)")
    ap.add_argument("--threads", type=int, help="worker threads for compiled kernels")
    ap.add_argument("--no-figures", action="store_true", help="skip SVG output")
    ap.add_argument("--seed-offset", type=int, default=0, help="add M to every seed")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed_offset:
            cfg = cfg.with_seed_offset(args.seed_offset)
        threads = args.threads if args.threads is not None else cfg.threads
        if threads < 1:
            raise ParameterError("threads must be positive")
        import numba

        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        out = Path(args.out or cfg.out) / args.command
        out.mkdir(parents=True, exist_ok=True)
        echo_config(cfg.text, out)
        return COMMANDS[args.command](cfg, out, not args.no_figures)
    except (ParameterError, ProfileError, CoefficientError, dn.InputError, pt.SupportError,
            pt.WindowError) as exc:
        print(f"parameter error: {exc}", file=sys.stderr)
        return EXIT_PARAM
    except GeometryError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (FlowIntegrationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
