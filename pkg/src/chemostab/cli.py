"""Command-line front end: scenario JSON in, JSON reports and CSV datasets out.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 certification refusal.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import ValidationError

from . import age, age_pde, analysis, lumped
from . import config as C
from .config import ConfigError
from .kinetics import DomainError
from .sim import IntegrationError, IntegratorConfig, convergence_metrics, integrate, simulate_closed_loop

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_REFUSED = 0, 2, 3, 4
REPRO_NAMES = ("example1", "example2", "theorem2")


class Refusal(Exception):
    def __init__(self, report: dict):
        super().__init__(report.get("reason", "refused"))
        self.report = report


# --- output helpers ---------------------------------------------------------


def _num(v) -> str:
    # shortest decimal that round-trips
    return repr(float(v))


def write_csv(path: Path, header: list[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _num(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list]]:
    """Inverse of :func:`write_csv`; numeric cells come back as floats."""
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = []
        for row in r:
            out = []
            for cell in row:
                try:
                    out.append(float(cell))
                except ValueError:
                    out.append(cell)
            rows.append(out)
    return header, rows


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


class Context:
    """Resolved scenario plus output settings shared by all verbs."""

    def __init__(self, cfg: C.ScenarioConfig, out: Path, seed: int, threads: int):
        self.cfg, self.out, self.seed, self.threads = cfg, out, seed, threads
        self.sys = C.build_system(cfg)
        self.eq = C.target_equilibrium(cfg, self.sys)

    @property
    def is_age(self) -> bool:
        return isinstance(self.sys, age.AgeSystem)

    def path(self, name: str) -> Path:
        prefix = self.cfg.outputs.prefix
        return self.out / (f"{prefix}_{name}" if prefix else name)

    def integrator(self) -> IntegratorConfig:
        run = self.cfg.run
        if run is None:
            return IntegratorConfig()
        return IntegratorConfig(rel_tol=run.rel_tol, abs_tol=run.abs_tol)

    def require_run(self) -> C.RunSpec:
        if self.cfg.run is None:
            raise ConfigError("scenario has no run section")
        return self.cfg.run

    def require_eq(self):
        if self.eq is None:
            raise ConfigError("no interior equilibrium to work with")
        return self.eq

    def state_names(self) -> list[str]:
        return ["X", "Y", "S"] if self.is_age else ["X", "S"]

    def initial_states(self, sampled: bool) -> np.ndarray:
        """Listed initial conditions, or the grid/random samples when ``sampled``.

        Either source is used when the preferred one is absent.
        """
        run = self.require_run()
        dim = 3 if self.is_age else 2
        listed, samples = [], []
        if run.initial_conditions:
            ics = np.array(run.initial_conditions, dtype=float)
            if ics.ndim != 2 or ics.shape[1] != dim:
                raise ConfigError(f"run.initial_conditions entries must have {dim} components")
            listed.append(ics)
        if run.grid is not None:
            g = run.grid
            samples.append(analysis.initial_grid(self.sys, g.n_X, g.n_S, g.X_range, g.S_fraction))
        if run.random is not None:
            r = run.random
            samples.append(analysis.random_initial_states(self.sys, r.n, self.seed, r.X_range, r.S_fraction))
        blocks = (samples or listed) if sampled else (listed or samples)
        if not blocks:
            raise ConfigError("run section gives no initial conditions")
        out = np.concatenate(blocks)
        bad = [x for x in out if not self.sys.contains(x)]
        if bad:
            raise ConfigError(f"initial condition {list(bad[0])} lies outside the open state domain")
        return out

    def mode(self) -> analysis.Mode:
        run = self.require_run()
        if run.mode == "open":
            return analysis.OpenLoop(self.sys.D_star if run.D is None else run.D)
        return analysis.ClosedLoop(C.feedback_config(self.cfg))


def _emit(payload: dict) -> None:
    print(json.dumps(_jsonable(payload), indent=2, sort_keys=True))


# --- verbs ------------------------------------------------------------------


def cmd_equilibria(ctx: Context) -> dict:
    sys_ = ctx.sys
    if ctx.is_age:
        eqs = age.equilibria3(sys_)
    else:
        eqs = lumped.equilibria(sys_)
    rows = []
    for eq in eqs:
        ref = C.reference_for(ctx.cfg, eq.S_star)
        if ctx.is_age:
            rep = age.classify_equilibrium3(sys_, eq, ref)
            lam, lam_alt = age.lambda_both(sys_, eq)
            row = {"X_star": eq.X_star, "Y_star": eq.Y_star, "S_star": eq.S_star,
                   "kappa": eq.kappa, "lambda": lam, "lambda_check": lam_alt}
        else:
            rep = lumped.classify_equilibrium(sys_, eq, ref)
            row = {"X_star": eq.X_star, "S_star": eq.S_star, "kappa": eq.kappa}
        row["stability"] = rep.to_dict()
        row["verdict"] = rep.verdict.value
        rows.append(row)
    report = {"model": ctx.cfg.model, "equilibria": rows}
    if ctx.is_age and ctx.eq is not None and ctx.cfg.feedback is not None:
        lin = age.closed_loop_linearization3(sys_, ctx.eq, C.feedback_config(ctx.cfg))
        ev = np.sort_complex(np.linalg.eigvals(lin))
        report["closed_loop_eigenvalues"] = [[e.real, e.imag] for e in ev]
    if not rows:
        report["message"] = "no interior equilibrium"
    write_json(ctx.path("equilibria.json"), report)
    return report


def _theorem2_block(ctx: Context) -> Optional[dict]:
    spec = ctx.cfg.theorem2 or C.Theorem2Spec()
    try:
        sc = lumped.theorem2_scenario(ctx.sys, spec.S_bar)
    except lumped.AssumptionError as exc:
        return {"available": False, "reason": str(exc)}
    return {
        "available": True, "S_bar": sc.S_bar, "theta": sc.theta, "beta": sc.beta,
        "xbar2": sc.xbar2, "x1_0": sc.x1_0, "G": sc.G, "M": sc.M, "margin": sc.margin,
        "equilibrium": {"X_star": sc.eq.X_star, "S_star": sc.eq.S_star},
    }


def cmd_check(ctx: Context) -> dict:
    eq = ctx.require_eq()
    fb = C.feedback_config(ctx.cfg) if ctx.cfg.feedback else lumped.FeedbackConfig(1.0, 0.0)
    if not ctx.is_age:
        chk = lumped.check_assumption_A(ctx.sys, eq)
        report = {"model": "lumped", "target": {"X_star": eq.X_star, "S_star": eq.S_star},
                  "assumption_A": {"holds": chk.holds, "margin": chk.margin}}
        if not chk.holds:
            report["status"] = "refused"
            report["reason"] = "mortality exceeds reproduction somewhere on [S*, S_in]"
            report["divergence_scenario"] = _theorem2_block(ctx)
            write_json(ctx.path("check.json"), report)
            raise Refusal(report)
        consts = lumped.lyapunov_constants(ctx.sys, eq, fb)
        report["constants"] = {"A": consts.A, "r": consts.r, "c": consts.c, "R": consts.R,
                               "R_lower_bound": lumped.R_lower_bound(ctx.sys, consts.A, consts.c)}
    else:
        phi = ctx.cfg.feedback.phi if ctx.cfg.feedback and ctx.cfg.feedback.phi else age.find_phi(ctx.sys, eq)
        report = {"model": ctx.cfg.model, "target": {"X_star": eq.X_star, "Y_star": eq.Y_star, "S_star": eq.S_star},
                  "lambda": eq.lam}
        chk = age.check_assumption_C(ctx.sys, eq, phi) if phi is not None else None
        report["assumption_C"] = (
            {"holds": chk.holds, "margin": chk.margin, "r": chk.r, "phi": phi} if chk else {"holds": False, "phi": None}
        )
        if chk is None or not chk.holds:
            report["status"] = "refused"
            report["reason"] = "no phi > 1 satisfies the 3-state growth/mortality inequality" if chk is None else (
                f"the 3-state growth/mortality inequality fails at phi={phi}")
            write_json(ctx.path("check.json"), report)
            raise Refusal(report)
        consts = age.lyapunov_constants3(ctx.sys, eq, fb, phi)
        report["constants"] = {
            "A": consts.A, "Omega": consts.Omega, "B": consts.B, "r": consts.r, "c": consts.c,
            "R": consts.R, "phi": consts.phi,
            "R_lower_bound": age.R_lower_bound3(ctx.sys, consts.A, consts.Omega, consts.c),
        }
    audit = analysis.lyapunov_audit(ctx.sys, eq, fb, consts, seed=ctx.seed)
    report["audit"] = {"n_samples": audit.n_samples, "n_violations": audit.n_violations,
                       "worst_V_dot": audit.worst_V_dot, "worst_point": audit.worst_point}
    report["feedback"] = {"delta": fb.delta, "alpha": fb.alpha}
    report["status"] = "certified"
    write_json(ctx.path("check.json"), report)
    return report


def _trajectory_rows(traj, V=None):
    for i, t in enumerate(traj.times):
        row = [t, *traj.states[i], traj.inputs[i]]
        if V is not None:
            row.append(V[i])
        yield row


def cmd_simulate(ctx: Context) -> dict:
    run = ctx.require_run()
    if ctx.cfg.model == "age_pde":
        return _simulate_pde(ctx)
    inits = ctx.initial_states(sampled=False)
    mode = ctx.mode()
    header = ["t", *ctx.state_names(), "D"]
    results, failures = [], 0
    deltas = run.deltas if (run.deltas and isinstance(mode, analysis.ClosedLoop)) else [None]
    for delta in deltas:
        for i, x0 in enumerate(inits):
            tag = f"d{delta:g}_{i}" if delta is not None else f"{i}"
            entry = {"id": tag, "init": x0, "delta": delta}
            try:
                if isinstance(mode, analysis.OpenLoop):
                    traj = integrate(analysis.field_for(ctx.sys, ctx.eq, mode), (0.0, run.t_final),
                                              x0, ctx.integrator(), ctx.sys.contains)
                    traj.inputs = np.full(len(traj), mode.D)
                else:
                    eq = ctx.require_eq()
                    fb = C.feedback_config(ctx.cfg, delta)
                    traj = simulate_closed_loop(ctx.sys, eq, fb, x0, run.t_final, ctx.integrator())
            except (IntegrationError, DomainError) as exc:
                failures += 1
                entry.update(status="failed", message=str(exc))
                results.append(entry)
                continue
            write_csv(ctx.path(f"traj_{tag}.csv"), header, _trajectory_rows(traj))
            entry.update(status="ok", final_state=traj.final_state, n_steps=len(traj))
            if ctx.eq is not None:
                target = analysis.eq_state(ctx.eq)
                m = convergence_metrics(traj, target, run.settle_tol)
                s_idx = len(target) - 1
                ms = convergence_metrics(traj, target[s_idx:], run.settle_tol, components=[s_idx])
                entry.update(converged=m.converged, settle_time=m.settle_time, final_error=m.final_error,
                             S_settle_time=ms.settle_time)
            results.append(entry)
    report = {"model": ctx.cfg.model, "mode": run.mode, "runs": results}
    write_json(ctx.path("simulate.json"), report)
    if failures == len(results):
        raise IntegrationError("every trajectory failed")
    return report


def _simulate_pde(ctx: Context) -> dict:
    eq = ctx.require_eq()
    spec = ctx.cfg.pde or C.PdeSpec()
    kernel = C.build_kernel(ctx.cfg)
    init = C.initial_profile(ctx.cfg, kernel, ctx.sys, eq)
    dt = spec.courant * kernel.grid.da
    run = ctx.require_run()
    if run.mode == "open":
        res = age_pde.open_loop_pde(init, kernel, ctx.sys, ctx.sys.D_star if run.D is None else run.D, run.t_final, dt)
    else:
        res = age_pde.closed_loop_pde(init, kernel, ctx.sys, eq, C.feedback_config(ctx.cfg), run.t_final, dt)
    write_csv(ctx.path("pde_moments.csv"), ["t", "X", "Y", "S", "D"], _trajectory_rows(res.trajectory))
    report = {"model": "age_pde", "n_cells": kernel.grid.n_cells, "a_max": kernel.grid.a_max,
              "dt": res.trajectory.meta["dt"], "final_moments": res.trajectory.final_state,
              "boundary_ratio": res.boundary_ratio}
    write_json(ctx.path("simulate.json"), report)
    return report


def _portrait(ctx: Context, mode, name: str) -> dict:
    run = ctx.require_run()
    data = analysis.phase_portrait(ctx.sys, ctx.eq, mode, ctx.initial_states(sampled=True), run.t_final,
                                   ctx.integrator(), ctx.threads)
    rows = []
    for tid, track in enumerate(data.tracks):
        if track.trajectory is None:
            continue
        for t, y in zip(track.trajectory.times, track.trajectory.states):
            rows.append([str(tid), t, *y])
    write_csv(ctx.path(f"{name}.csv"), ["id", "t", *ctx.state_names()], rows)
    statuses = [{"id": i, "status": tr.status.value, "message": tr.message} for i, tr in enumerate(data.tracks)]
    return {"file": ctx.path(f"{name}.csv").name, "tracks": statuses,
            "final_states": [tr.final_state for tr in data.tracks]}


def cmd_portrait(ctx: Context) -> dict:
    report = _portrait(ctx, ctx.mode(), "portrait")
    write_json(ctx.path("portrait.json"), report)
    return report


def _basin(ctx: Context, mode, name: str) -> dict:
    run = ctx.require_run()
    eq = ctx.require_eq()
    bm = analysis.basin_sample(ctx.sys, eq, mode, ctx.initial_states(sampled=True), run.t_final, run.basin_tol,
                               ctx.integrator(), ctx.threads)
    names = ["X0", "S0", "Y0"] if ctx.is_age else ["X0", "S0"]
    order = [0, 2, 1] if ctx.is_age else [0, 1]
    rows = [[*(x[j] for j in order), lab.value] for x, lab in zip(bm.inits, bm.labels)]
    write_csv(ctx.path(f"{name}.csv"), [*names, "label"], rows)
    return {"file": ctx.path(f"{name}.csv").name, "counts": bm.counts()}


def cmd_basin(ctx: Context) -> dict:
    report = _basin(ctx, ctx.mode(), "basin")
    write_json(ctx.path("basin.json"), report)
    return report


def cmd_pde_compare(ctx: Context) -> dict:
    if not ctx.is_age:
        raise ConfigError("pde-compare needs an age or age_pde scenario")
    eq = ctx.require_eq()
    spec = ctx.cfg.pde or C.PdeSpec()
    fb = C.feedback_config(ctx.cfg) if ctx.cfg.feedback else None
    table = []
    finest = None
    for n in spec.refinements:
        kernel = C.build_kernel(ctx.cfg, n)
        init = C.initial_profile(ctx.cfg, kernel, ctx.sys, eq)
        cmp = age_pde.compare_with_ode(init, kernel, ctx.sys, eq, fb, spec.t_final, spec.courant * kernel.grid.da)
        ratio = table[-1]["max_rel_error"] / cmp.max_rel_error if table else None
        table.append({"n_cells": n, "da": cmp.da, "dt": cmp.dt, "max_rel_error": cmp.max_rel_error,
                      "errors_XYS": cmp.component_errors, "ratio": ratio,
                      "boundary_ratio": cmp.pde.boundary_ratio})
        finest = cmp
    write_csv(ctx.path("pde_refinement.csv"), ["n_cells", "da", "dt", "max_rel_error", "ratio"],
              [[r["n_cells"], r["da"], r["dt"], r["max_rel_error"], "" if r["ratio"] is None else r["ratio"]]
               for r in table])
    write_csv(ctx.path("pde_moments.csv"), ["t", "X", "Y", "S", "D"], _trajectory_rows(finest.pde.trajectory))
    ode = finest.ode
    ode.inputs = np.array([
        age.feedback_D3(ctx.sys, eq, fb, y) if fb else ctx.sys.D_star for y in ode.states
    ])
    write_csv(ctx.path("ode_moments.csv"), ["t", "X", "Y", "S", "D"], _trajectory_rows(ode))
    report = {"t_final": spec.t_final, "courant": spec.courant, "table": table,
              "max_rel_error_finest": finest.max_rel_error}
    write_json(ctx.path("pde_compare.json"), report)
    return report


def _divergence(ctx: Context) -> dict:
    spec = ctx.cfg.theorem2 or C.Theorem2Spec()
    sc = lumped.theorem2_scenario(ctx.sys, spec.S_bar)
    out = {}
    for label, fb in (("constant", None), ("feedback", C.feedback_config(ctx.cfg) if ctx.cfg.feedback else lumped.FeedbackConfig(1.0))):
        run = analysis.divergence_run(ctx.sys, sc, fb, spec.t_final, config=ctx.integrator())
        long = analysis.divergence_run(ctx.sys, sc, fb, spec.decay_horizon, config=ctx.integrator())
        rows = [[t, z[0], z[1], X, sc.x1_0 - sc.theta * t] for t, z, X in zip(run.times, run.z, run.X)]
        write_csv(ctx.path(f"divergence_{label}.csv"), ["t", "x1", "x2", "X", "x1_bound"], rows)
        out[label] = {"bound_slack": run.bound_slack, "bound_holds": run.holds,
                      "X_ratio_at_t_final": run.X[-1] / run.X[0],
                      "X_ratio_at_decay_horizon": long.X[-1] / long.X[0]}
    return out


def cmd_repro(ctx: Context, name: str) -> dict:
    bundle = {"scenario": name, "equilibria": cmd_equilibria(ctx)}
    try:
        bundle["check"] = cmd_check(ctx)
    except Refusal as r:
        bundle["check"] = r.report
    if name == "theorem2":
        bundle["divergence"] = _divergence(ctx)
    else:
        if ctx.eq is not None and ctx.cfg.feedback is not None:
            bundle["simulate"] = cmd_simulate(ctx)
        bundle["portrait_open"] = _portrait(ctx, analysis.OpenLoop(ctx.sys.D_star), "portrait_open")
        bundle["portrait_closed"] = _portrait(ctx, analysis.ClosedLoop(C.feedback_config(ctx.cfg)), "portrait_closed")
        bundle["basin_open"] = _basin(ctx, analysis.OpenLoop(ctx.sys.D_star), "basin_open")
        bundle["basin_closed"] = _basin(ctx, analysis.ClosedLoop(C.feedback_config(ctx.cfg)), "basin_closed")
        for key in ("portrait_open", "portrait_closed"):
            bundle[key].pop("final_states", None)
    write_json(ctx.path("repro.json"), bundle)
    return bundle


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chemostab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, type=Path, help="scenario JSON file")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
        p.add_argument("--seed", type=int, default=0, help="seed for random sampling")
        p.add_argument("--threads", type=int, default=1, help="worker processes for sampling")

    for verb, text in [
        ("equilibria", "list interior equilibria with stability reports"),
        ("check", "certify the feedback or explain why it cannot exist"),
        ("simulate", "integrate trajectories and write CSV files"),
        ("portrait", "phase-portrait polylines from a grid of initial states"),
        ("basin", "label initial states by their limit"),
        ("pde-compare", "age-PDE moments versus the 3-state ODE"),
    ]:
        common(sub.add_parser(verb, help=text))
    rp = sub.add_parser("repro", help="run a canned scenario end to end")
    rp.add_argument("name", choices=REPRO_NAMES)
    common(rp, needs_config=False)
    return parser


VERBS = {
    "equilibria": cmd_equilibria,
    "check": cmd_check,
    "simulate": cmd_simulate,
    "portrait": cmd_portrait,
    "basin": cmd_basin,
    "pde-compare": cmd_pde_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        path = C.scenario_path(args.name) if args.verb == "repro" else args.config
        cfg = C.load_config(path)
        ctx = Context(cfg, args.out, args.seed, max(1, args.threads))
        if args.verb == "repro":
            report = cmd_repro(ctx, args.name)
        else:
            report = VERBS[args.verb](ctx)
    except (ValidationError, ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Refusal as r:
        _emit(r.report)
        return EXIT_REFUSED
    except (IntegrationError, DomainError, age_pde.CFLError, age_pde.KernelError,
            lumped.AssumptionError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _emit(report)
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
