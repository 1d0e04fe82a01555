"""``kwl run <config>``: staged experiment pipeline with CSV/SVG/manifest output.

Exit codes: 0 ok, 1 invariant failure, 2 config error, 3 solver non-convergence.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (SWEEP_COLUMNS, concentration_sweep, linking_geometry,
                       mountain_pass_floor, nontriviality_threshold, ps_bound,
                       sample_high_sphere, sample_linking_boundary)
from .config import STAGES, ExperimentConfig, load_config
from .domain import check_zero_set, lambda0, measure_A_inf, measure_A_lambda, validate_well
from .errors import (BoxTooSmall, ConfigError, InvalidGrid, InvalidParams, KWLError, MaxItersExceeded,
                     NonPositiveCap, SolverFailure, ThresholdOrder)
from .operators import (assemble, discrete_sobolev_constant, embedding_constants, export_matrices,
                        sobolev_p_constant, talenti_constant)
from .report import CheckLog, blob_sha1, log_plot, write_csv, write_json
from .solver import (default_seed, limit_problem_solve, linking_solve, mountain_pass_solve,
                     nehari_scale, nehari_solve, ray_profile)
from .spectrum import FLOW_COLUMNS, dirichlet_spectrum, k0_star, well_spectrum, well_spectrum_flow

log = logging.getLogger("kwl")

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
CONFIG_ERRORS = (ConfigError, NonPositiveCap, ThresholdOrder, InvalidGrid, InvalidParams, BoxTooSmall)

SOLUTION_COLUMNS = ["method", "lambda", "alpha", "p", "energy", "grad_norm", "nehari_defect", "norm",
                    "mass_outside", "iterations", "newton_steps", "ps_max_ratio", "ps_bound"]


def _solution_row(rec):
    return [rec.method, rec.lam, rec.alpha, rec.p, rec.energy, rec.grad_norm, rec.nehari_defect,
            rec.norm, rec.mass_outside, rec.iterations, rec.newton_steps, rec.ps_max_ratio, rec.ps_bound]


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, outdir: Path, threads: int):
        self.cfg = cfg
        self.out = outdir
        self.threads = threads
        self.checks = CheckLog()
        self.constants = {}
        self.notes = []
        self.outputs = []
        self.stages_run = []
        self.grid = cfg.grid()
        self.well = cfg.well()
        self.alpha = cfg.alpha
        self.ops = self.spec = self.wspec = self.geometry = self.record = None
        self.S = self.S_p = None
        self.lam_min = 0.0

    # bookkeeping ------------------------------------------------------------
    def const(self, name, value, source):
        self.constants[name] = {"value": value, "source": source}

    def emit(self, path: Path) -> Path:
        self.outputs.append(path.name)
        return path

    def params(self):
        return self.cfg.params(self.alpha)

    def execute(self, upto: str = "sweep"):
        for stage in STAGES[: STAGES.index(upto) + 1]:
            log.info("stage %s", stage)
            getattr(self, f"stage_{stage}")()
            self.stages_run.append(stage)

    # stages -------------------------------------------------------------------
    def stage_validate(self):
        cfg, g, w = self.cfg, self.grid, self.well
        rep = validate_well(w)
        self.checks.extend("validate", rep.checks)
        self.notes.extend(rep.notes)
        self.checks.add("validate", "a == 0 exactly on closed Omega, > 0 off it", check_zero_set(g, w))
        self.checks.add("validate", "box contains the ramp (R >= r_Omega + w)", g.halfwidth >= w.outer_halfwidth,
                        f"R = {g.halfwidth!r}")
        self.const("grid.halfwidth", g.halfwidth, "config (aligned to the Omega faces)" if cfg.align else "config")
        self.const("grid.h", g.h, "closed-form")
        self.const("measure_A_inf", rep.measure_A_inf, "closed-form (Steiner formula)")
        self.const("Lambda0", rep.Lambda0, "closed-form")
        self.const("measure_A_lambda", measure_A_lambda(w), "closed-form (ramp inverse)")
        if w.offset < 0:
            lams = sorted({cfg.solve_lambda, *cfg.flow_lambdas, *cfg.sweep_lambdas})
            inside = w.in_omega(g.coords)
            ok = all(np.all(w.with_lambda(lam).potential(g.coords[inside]) < 0) for lam in lams)
            self.checks.add("validate", "Omega nodes lie in A_lambda for every configured lambda", ok)
            self.checks.add("validate", "all lambdas exceed Lambda0", all(l > lambda0(w) for l in lams),
                            f"Lambda0 = {lambda0(w)!r}")

    def stage_assemble(self):
        self.ops = ops = assemble(self.grid, self.well)
        V = self.well.potential(self.grid.coords)
        diff = ops.Mplus - ops.Mminus
        err = float(np.max(np.abs(diff.diagonal() - ops.weight * V)))
        self.checks.add("assemble", "Mplus - Mminus equals the weighted potential mass",
                        err <= 1e-14 * max(1.0, ops.weight * np.max(np.abs(V))), f"max err {err:.2e}")
        asym = abs(ops.K - ops.K.T).max()
        self.checks.add("assemble", "stiffness symmetric", asym == 0, f"max |K - K^T| = {asym}")
        dmask = ops.minus_nodes
        self.checks.add("assemble", "supp(Mminus) within A_lambda nodes", bool(np.all(V[dmask] < 0)))
        if self.cfg.export_matrices:
            for p in export_matrices(ops, str(self.out / "matrices")):
                self.outputs.append("matrices/" + Path(p).name)

    def stage_dirichlet(self):
        cfg, w = self.cfg, self.well
        if w.offset == 0:
            self.notes.append("a0 = 0: the Omega eigenproblem is not defined; Dirichlet stage skipped")
            return
        need = max(cfg.count, 2 * cfg.m_max + 1)
        self.spec = spec = dirichlet_spectrum(self.grid, w, need)
        rows = [[i, spec.gamma(i), spec.multiplicities[i - 1]] for i in range(1, len(spec) + 1)]
        write_csv(self.emit(self.out / "spectrum.csv"), ["i", "gamma", "multiplicity"], rows)
        self.checks.add("dirichlet", "gamma_1 simple", spec.multiplicities[0] == 1)
        om = spec.omega_ops
        res = 0.0
        for i in range(1, len(spec) + 1):
            phi = spec.eigenspace(i)[om.index]
            r = om.K @ phi - spec.gamma(i) * abs(w.offset) * (om.M @ phi)
            res = max(res, float(np.max(np.linalg.norm(r, axis=0) / np.linalg.norm(om.K @ phi, axis=0))))
        self.checks.add("dirichlet", "eigen-residual below 1e-8", res <= 1e-8, f"{res:.2e}")
        Phi = spec.basis(len(spec))[om.index]
        G = abs(w.offset) * Phi.T @ (om.M @ Phi)
        orth = float(np.max(np.abs(G - np.eye(G.shape[0]))))
        self.checks.add("dirichlet", "|a0| M-orthonormal eigenvectors", orth <= 1e-10, f"{orth:.2e}")
        for i in range(1, len(spec) + 1):
            self.const(f"gamma_{i}", spec.gamma(i), "grid eigenproblem on the Omega subgrid")
        if w.offset < 0:
            self.const("k0_star", k0_star(spec), "first gamma above 1")

    def stage_flow(self):
        cfg, w, spec = self.cfg, self.well, self.spec
        if w.offset >= 0 or not cfg.flow_lambdas:
            self.notes.append("flow stage skipped (needs a0 < 0 and [spectrum] flow_lambdas)")
            return
        rows, spectra = well_spectrum_flow(self.grid, w, cfg.flow_lambdas, cfg.m_max, spec=spec,
                                           threads=self.threads, keep=True)
        write_csv(self.emit(self.out / "flow.csv"), FLOW_COLUMNS, [r.as_csv() for r in rows])
        lams = np.array(cfg.flow_lambdas)
        betas = np.array([[ws.beta(m) for m in range(1, cfg.m_max + 1)] for ws in spectra])
        b1 = betas[:, 0]
        mono = all(b >= a - 1e-12 * abs(a) for a, b in zip(b1, b1[1:]))
        self.checks.add("flow", "beta_1 nondecreasing in lambda", mono)
        self.checks.add("flow", "beta_1 <= gamma_1 (grid value)", bool(np.all(b1 <= spec.gamma(1) * (1 + 1e-12))))
        self.checks.add("flow", "beta_1 <= beta_2 <= ... at every lambda",
                        bool(np.all(np.diff(betas, axis=1) >= -1e-12 * np.abs(betas[:, :-1]))))
        dn, cross, dim_ok = 0.0, 0.0, True
        for ws in spectra:
            V = ws.all_vectors
            dn = max(dn, max(abs(ws.ops.D(v) - 1.0) for v in V.T))
            G = V.T @ (ws.ops.Q @ V)
            cross = max(cross, float(np.max(np.abs(G - np.diag(np.diag(G))))))
            dim_ok &= all(ws.level_vectors(m).shape[1] <= spec.multiplicities[m - 1]
                          for m in range(1, cfg.m_max + 1))
        self.checks.add("flow", "D(e_m, e_m) = 1 within 1e-10", dn <= 1e-10, f"{dn:.2e}")
        self.checks.add("flow", "E_lambda cross-orthogonality within 1e-8", cross <= 1e-8, f"{cross:.2e}")
        self.checks.add("flow", "captured level dimension <= Dirichlet multiplicity", dim_ok)
        for m in range(2, cfg.m_max + 1):
            bm = betas[:, m - 1]
            mono_m = all(b >= a - 1e-12 * abs(a) for a, b in zip(bm, bm[1:]))
            self.notes.append(f"beta_{m} nondecreasing over the flow: {mono_m} (measured, not asserted)")
        if cfg.emit_svg:
            series = {f"beta_{m}": (lams, betas[:, m - 1]) for m in range(1, cfg.m_max + 1)}
            log_plot(self.emit(self.out / "beta_flow.svg"), series, "lambda", "beta_m(lambda)",
                     "constrained well spectrum")

    def _sobolev_constants(self):
        cfg, w = self.cfg, self.well
        mode = cfg.S
        if mode == "auto":
            mode = "talenti" if cfg.dim == 3 else "discrete"
        if mode == "discrete":
            self.S = discrete_sobolev_constant(self.ops, w)
            self.const("S", self.S, "grid-exact constant of the A_inf L2 bound")
        elif mode == "talenti":
            if cfg.dim != 3:
                raise ConfigError("[constants] S = talenti needs dim = 3")
            self.S = talenti_constant(3)
            self.const("S", self.S, "closed-form best Sobolev constant, dim 3")
        else:
            self.S = float(mode)
            self.const("S", self.S, "config")
        if cfg.S_p in ("discrete", "auto"):
            self.S_p = sobolev_p_constant(self.grid, cfg.p)
            self.const("S_p", self.S_p, "grid ground state (Petviashvili iteration)")
        elif cfg.S_p == "talenti":
            raise ConfigError("[constants] S_p has no closed form; use discrete or a number")
        else:
            self.S_p = float(cfg.S_p)
            self.const("S_p", self.S_p, "config")

    def stage_geometry(self):
        cfg, w, ops = self.cfg, self.well, self.ops
        lam = cfg.solve_lambda
        self._sobolev_constants()
        consts = embedding_constants(w, lam, self.S, self.S_p)
        self.const("d_lambda", consts.d_lam, "closed-form")
        if w.offset < 0:
            k0 = k0_star(self.spec)
            self.wspec = ws = well_spectrum(ops, w, max(k0, 1) + 1)
            geo = linking_geometry(consts, self.spec, cfg.params(1.0), lam, wspec=ws,
                                   samples=cfg.M_samples, seed=cfg.seed)
            self.geometry = geo
            if self.alpha is None:
                self.alpha = cfg.alpha_fraction * geo.alpha0
                self.const("alpha", self.alpha, f"alpha_fraction * alpha0 ({cfg.alpha_fraction!r})")
            else:
                self.const("alpha", self.alpha, "config")
            for key, val in geo.as_dict().items():
                if key not in ("S", "S_p", "d_lambda", "p", "lambda_floor"):
                    self.const(key, val, "closed-form" if key != "M" else "sampled sphere minimum + polish")
            self.const("rho_split", geo.rho_split, "design choice")
            self.const("beta_k0_minus_1", ws.beta(k0 - 1) if k0 > 1 else math.nan, "well spectrum at solve lambda")
            params = self.params()
            self.checks.add("geometry", "rho > 0, d0 > 0, R0 > rho, alpha0 > 0",
                            geo.rho > 0 and geo.d0 > 0 and geo.R0 > geo.rho and geo.alpha0 > 0)
            self.checks.add("geometry", "alpha < alpha0", self.alpha < geo.alpha0,
                            f"alpha = {self.alpha:.4e}, alpha0 = {geo.alpha0:.4e}")
            hs = sample_high_sphere(ops, params, ws, k0, geo.rho, 200, cfg.seed)
            bs = sample_linking_boundary(ops, params, ws, k0, geo.R0, 200, cfg.seed + 1)
            self.checks.add("geometry", "min J on high rho-sphere >= d0 - 1e-9", hs.min() >= geo.d0 - 1e-9,
                            f"min {hs.min():.6e} vs d0 {geo.d0:.6e}")
            self.checks.add("geometry", "max J on expanding-set boundary <= d0/2 + 1e-9",
                            bs.max() <= geo.d0 / 2 + 1e-9, f"max {bs.max():.6e} vs d0/2 {geo.d0 / 2:.6e}")
            self.const("energy_cap", geo.energy_cap(self.alpha), "closed-form")
            B = ps_bound(self.alpha, geo.energy_cap(self.alpha), w.offset, measure_A_inf(w), self.S, cfg.p)
            self.lam_min = nontriviality_threshold(self.alpha, cfg.p, self.S, w.offset, w.floor_threshold, B)
            self.const("ps_bound_at_cap", B, "closed-form")
        else:
            if self.alpha is None:
                raise ConfigError("[problem] alpha = auto needs a0 < 0 (alpha0 comes from the linking geometry)")
            self.const("alpha", self.alpha, "config")
            rho_bar, floor = mountain_pass_floor(consts, cfg.p)
            self.const("rho_bar", rho_bar, "closed-form")
            self.const("mountain_pass_floor", floor, "closed-form")
            self.lam_min = max(0.0, -w.offset / w.floor_threshold)
        self.const("lambda_min", self.lam_min, "closed-form surrogate, safety factor 2")
        if lam <= self.lam_min:
            self.notes.append(f"solve lambda {lam:g} is at or below the nontriviality surrogate {self.lam_min:.4g}")

    def stage_solve(self):
        cfg, w, ops = self.cfg, self.well, self.ops
        params = self.params()
        method = cfg.method
        if method == "auto":
            method = "nehari" if w.offset >= 0 else "linking"
        opts = dict(tol=cfg.tol, max_iter=cfg.max_iters, S=self.S)
        if method == "linking":
            if w.offset >= 0:
                raise ConfigError("[solve] method = linking needs a0 < 0")
            rec = linking_solve(ops, params, self.wspec, self.spec, geometry=self.geometry, **opts)
        elif method == "nehari":
            rec = nehari_solve(ops, params, default_seed(self.grid, w), **opts)
        else:
            seed = default_seed(self.grid, w)
            t = nehari_scale(ops, params, seed)
            rec = mountain_pass_solve(ops, params, 2.0 * t * seed, nodes=cfg.path_nodes, **opts)
        self.record = rec
        self.checks.extend("solve", rec.checks())
        J3, slope = ray_profile(ops, params, ops.restrict(rec.u))
        self.checks.add("solve", "J(3u) < 0", J3 < 0, f"{J3:.6e}")
        if slope > 0:
            self.checks.add("solve", "ray derivative positive near t = 0", True, f"{slope:.6e}")
        if self.geometry is not None:
            cap = self.geometry.energy_cap(params.alpha)
            self.checks.add("solve", "energy in [d0, cap]", self.geometry.d0 <= rec.energy <= cap,
                            f"{self.geometry.d0:.6e} <= {rec.energy:.6e} <= {cap:.6e}")
            self.checks.add("solve", "projection on e_k0* >= 1e-3", rec.top_component >= 1e-3,
                            f"{rec.top_component:.4f}")
        elif "mountain_pass_floor" in self.constants:
            floor = self.constants["mountain_pass_floor"]["value"]
            self.checks.add("solve", "energy >= mountain-pass floor", rec.energy >= floor,
                            f"{rec.energy:.6e} >= {floor:.6e}")
        self.const("energy", rec.energy, f"{rec.method} solver")
        write_csv(self.emit(self.out / "solution.csv"), SOLUTION_COLUMNS, [_solution_row(rec)])
        coords = self.grid.coords
        write_csv(self.emit(self.out / "profile.csv"), [f"x{j}" for j in range(self.grid.dim)] + ["u"],
                  (list(coords[k]) + [rec.u[k]] for k in range(self.grid.size)))

    def stage_sweep(self):
        cfg, w = self.cfg, self.well
        if not cfg.sweep_lambdas:
            self.notes.append("sweep stage skipped (no [sweep] lambdas)")
            return
        params = self.params()
        limit = limit_problem_solve(self.grid, w, params, spec=self.spec, tol=cfg.tol,
                                    max_iter=cfg.max_iters, S=self.S)
        self.checks.extend("limit", limit.checks())
        self.const("limit_energy", limit.energy, "limit problem on the Omega subgrid")
        res = concentration_sweep(self.grid, w, params, cfg.sweep_lambdas, limit, spec=self.spec,
                                  lam_min=self.lam_min, warm_start=cfg.warm_start, mass_cap=cfg.mass_cap,
                                  h1_cap=cfg.h1_cap, solver_options={"tol": cfg.tol, "max_iter": cfg.max_iters},
                                  S=self.S)
        write_csv(self.emit(self.out / "sweep.csv"), SWEEP_COLUMNS, [r.as_csv() for r in res.rows])
        self.checks.extend("sweep", res.checks)
        for r in res.rows:
            if r.note:
                self.notes.append(f"sweep lambda={r.lam:g}: {r.note}")
        if cfg.emit_svg:
            good = [r for r in res.rows if not math.isnan(r.mass_outside)]
            log_plot(self.emit(self.out / "mass_outside.svg"),
                     {"mass outside Omega": ([r.lam for r in good], [max(r.mass_outside, 1e-300) for r in good])},
                     "lambda", "mass fraction outside Omega", "concentration in Omega", logy=True)

    # manifest ---------------------------------------------------------------------
    def manifest(self, status: str, exit_code: int, error: str = ""):
        cfg = self.cfg
        return {
            "package": {"name": "kwl", "version": __version__},
            "config_path": cfg.path,
            "config": cfg.echo,
            "input_sha1": blob_sha1(cfg.source.encode()),
            "stages_run": self.stages_run,
            "threads": self.threads,
            "constants": self.constants,
            "checks": self.checks.as_list(),
            "notes": self.notes,
            "outputs": sorted(set(self.outputs)),
            "status": status,
            "exit_code": exit_code,
            "error": error,
        }


def run(config_path: str, out=None, stage=None, threads=None) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"kwl: {config_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = Path(out if out is not None else cfg.directory)
    outdir.mkdir(parents=True, exist_ok=True)
    marker = outdir / "FAILED"
    if marker.exists():
        marker.unlink()
    try:
        pipe = Pipeline(cfg, outdir, threads or cfg.threads)
    except CONFIG_ERRORS as exc:
        print(f"kwl: {config_path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    code, error = EXIT_OK, ""
    try:
        pipe.execute(stage or STAGES[-1])
    except CONFIG_ERRORS as exc:
        code, error = EXIT_CONFIG, f"{type(exc).__name__}: {exc}"
    except (MaxItersExceeded, SolverFailure) as exc:
        code, error = EXIT_SOLVER, f"{type(exc).__name__}: {exc}"
    except KWLError as exc:
        code, error = EXIT_INVARIANT, f"{type(exc).__name__}: {exc}"
    if code == EXIT_OK and pipe.checks.failed:
        code = EXIT_INVARIANT
        error = "; ".join(f"{s}: {n}" for s, n, _, _ in pipe.checks.failed)

    status = "ok" if code == EXIT_OK else "failed"
    write_json(outdir / "manifest.json", pipe.manifest(status, code, error))
    report = pipe.checks.render()
    if pipe.notes:
        report += "\nnotes:\n" + "".join(f"  - {n}\n" for n in pipe.notes)
    if error:
        report += f"\nerror: {error}\n"
    (outdir / "report.txt").write_text(report)
    if code != EXIT_OK:
        marker.write_text(f"exit {code}: {error}\n")
        print(f"kwl: run failed (exit {code}): {error}", file=sys.stderr)
    else:
        print(f"kwl: ok, {len(pipe.checks.entries)} checks passed; outputs in {outdir}")
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kwl", description="Kirchhoff potential-well numerical lab")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="output directory (overrides [output] directory)")
    p_run.add_argument("--stage", choices=STAGES, help="stop after this stage")
    p_run.add_argument("--threads", type=int, help="worker threads for per-lambda spectra")
    p_run.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        parser.error("--threads must be >= 1")
    return run(args.config, out=args.out, stage=args.stage, threads=args.threads)


if __name__ == "__main__":
    sys.exit(main())
