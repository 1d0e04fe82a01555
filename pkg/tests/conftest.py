"""Shared scenarios.  The expensive ones are session-scoped and built once."""
import math
from types import SimpleNamespace

import numpy as np
import pytest

from kwl.domain import Grid, PotentialWell, ProblemParams
from kwl.operators import (assemble, discrete_sobolev_constant, embedding_constants, energy,
                           gradient, sobolev_p_constant)

HALF_PI = math.pi / 2

# three settings for derivative checks: definite 1D, indefinite 1D, indefinite 2D
FD_CASES = [
    ("definite-1d", 1, 201, 1.0, 50.0, ProblemParams(5.0, 0.3)),
    ("indefinite-1d", 1, 201, -2.0, 1e3, ProblemParams(4.5, 0.05)),
    ("indefinite-2d", 2, 31, -1.0, 20.0, ProblemParams(5.5, 1.0)),
]


def fd_ops(dim, n, a0, lam):
    well = steep_well(a0, lam=lam, dim=dim, ramp=0.5, cap=10.0)
    return assemble(Grid.aligned(dim, n, HALF_PI, HALF_PI + 0.6), well)


def fd_gradient_errors(ops, params, count=20, seed=0, eps=1e-6):
    """Central differences of ``energy`` along random directions against ``g^T v``."""
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(count):
        u = rng.standard_normal(ops.size)
        v = rng.standard_normal(ops.size)
        u *= rng.uniform(0.2, 1.5) / ops.norm(u)
        v /= ops.norm(v)
        fd = (energy(ops, params, u + eps * v) - energy(ops, params, u - eps * v)) / (2 * eps)
        an = float(gradient(ops, params, u) @ v)
        errs.append(abs(fd - an) / max(abs(an), 1e-12))
    return np.array(errs)


def steep_well(a0, a_inf=1.0, lam=1.0, dim=1, ramp=0.1, cap=1000.0, r=HALF_PI):
    return PotentialWell(dim, r, ramp, cap, a_inf, a0, lam)


def interval_grid(n=4000, r=HALF_PI, min_halfwidth=2.0):
    return Grid.aligned(1, n, r, min_halfwidth)


def build_indefinite(lam=1e5, n=4000, seed=7):
    """Interval well with gamma ~ (1/2, 2, 9/2): a0 = -2, alpha = alpha0/2."""
    from kwl.analysis import linking_geometry
    from kwl.spectrum import dirichlet_spectrum, k0_star, well_spectrum

    grid = interval_grid(n)
    well = steep_well(-2.0, lam=lam)
    ops = assemble(grid, well)
    spec = dirichlet_spectrum(grid, well, count=4)
    S = discrete_sobolev_constant(ops, well)
    S_p = sobolev_p_constant(grid, 5.0)
    consts = embedding_constants(well, well.lam, S, S_p)
    k0 = k0_star(spec)
    wspec = well_spectrum(ops, well, k0 + 1)
    geo = linking_geometry(consts, spec, ProblemParams(5.0, 1.0), well.lam, wspec=wspec, seed=seed)
    params = ProblemParams(5.0, 0.5 * geo.alpha0)
    return SimpleNamespace(grid=grid, well=well, ops=ops, spec=spec, S=S, S_p=S_p, consts=consts,
                           k0=k0, wspec=wspec, geo=geo, params=params)


@pytest.fixture(scope="session")
def indefinite():
    return build_indefinite()


@pytest.fixture(scope="session")
def indefinite_solution(indefinite):
    from kwl.solver import linking_solve
    sc = indefinite
    return linking_solve(sc.ops, sc.params, sc.wspec, sc.spec, geometry=sc.geo, S=sc.S)


@pytest.fixture(scope="session")
def flow():
    """a0 = -1 well swept over lambda = 1e1 .. 1e6, two levels."""
    from kwl.spectrum import dirichlet_spectrum, well_spectrum_flow

    grid = interval_grid()
    well = steep_well(-1.0, a_inf=0.5)
    spec = dirichlet_spectrum(grid, well, count=7)
    lambdas = [10.0**k for k in range(1, 7)]
    rows, spectra = well_spectrum_flow(grid, well, lambdas, 2, spec=spec, keep=True)
    return SimpleNamespace(grid=grid, well=well, spec=spec, lambdas=lambdas, rows=rows, spectra=spectra)


@pytest.fixture(scope="session")
def definite():
    """a0 = +1 interval problem, alpha = 0.01, lambda = 100."""
    grid = interval_grid()
    well = steep_well(1.0, lam=100.0)
    return SimpleNamespace(grid=grid, well=well, ops=assemble(grid, well), params=ProblemParams(5.0, 0.01))


# -- acceptance bookkeeping ----------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, title, checks, elapsed, budget=None):
    """Store one verdict line per criterion; ``checks`` maps a label to ``(ok, detail)``."""
    if budget is not None:
        checks = dict(checks)
        checks[f"runtime < {budget:g} s"] = (elapsed < budget, f"{elapsed:.2f} s")
    ok = all(v for v, _ in checks.values())
    failed = [k for k, (v, _) in checks.items() if not v]
    detail = "; ".join(f"{k}: {d}" for k, (_, d) in checks.items() if d)
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
    if failed:
        line += f"  [failed: {', '.join(failed)}]"
    ACCEPTANCE[number] = line + f"\n              {detail}"
    print(ACCEPTANCE[number])
    return ok, failed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
