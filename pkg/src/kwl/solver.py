"""Critical points of the Kirchhoff functional.

Three searches share one finishing step.  Each runs a preconditioned
descent (the Riesz map ``Q^{-1}`` turns the gradient into an
``E_lambda``-vector) until the dual gradient norm is small, then a Newton
polish drives it to the requested tolerance.  The Hessian is sparse plus
the rank-one Kirchhoff term, so a single sparse LU and a Sherman-Morrison
correction give each Newton step.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.optimize as so
import scipy.sparse.linalg as spla

from .analysis import ps_bound
from .domain import Grid, PotentialWell, ProblemParams, measure_A_inf
from .errors import (DefiniteCase, EndpointNotBelowZero, GeometryViolated, MaxItersExceeded,
                     NoCrossing, PSBoundViolation, SeedZero, SolverFailure)
from .operators import (OperatorSet, discrete_sobolev_constant, energy, energy_and_gradient,
                        energy_parts, gradient, hessian_parts, omega_operators)
from .spectrum import DirichletSpectrum, WellSpectrum, dirichlet_spectrum, k0_star

log = logging.getLogger(__name__)

ARMIJO = 1e-4
MONOTONE_TOL = 1e-12
DEFAULT_TOL = 1e-8
NEWTON_SWITCH = 1e-4
MAX_ITERS = 100_000


@dataclass(frozen=True)
class SolutionRecord:
    u: np.ndarray
    alpha: float
    lam: float
    p: float
    energy: float
    grad_norm: float
    nehari_defect: float
    norm: float
    mass_outside: float
    iterations: int
    method: str
    newton_steps: int = 0
    history: tuple = ()
    ps_max_ratio: float = math.nan
    ps_bound: float = math.nan
    top_component: float = math.nan
    tol: float = DEFAULT_TOL

    def checks(self) -> list:
        """``(name, ok, detail)`` for every acceptance invariant of a record."""
        return [
            ("gradient norm <= tol", self.grad_norm <= self.tol, f"{self.grad_norm:.3e}"),
            ("nehari_defect <= 1e-6", self.nehari_defect <= 1e-6, f"{self.nehari_defect:.3e}"),
            ("nontrivial ||u|| >= 1e-6", self.norm >= 1e-6, f"{self.norm:.6g}"),
            ("PS bound on all iterates", not self.ps_max_ratio > 1.0, f"max ratio {self.ps_max_ratio:.3e}"),
        ]

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks())


class PSGuard:
    """Checks ``alpha A^2 + ||u||^2 <= B(c_cap)`` with ``c_cap`` the running max energy."""

    def __init__(self, alpha: float, p: float, a0: float, measure: float, S: float):
        self.alpha, self.p, self.a0, self.measure, self.S = alpha, p, a0, measure, S
        self.c_cap = 0.0
        self.worst = 0.0
        self.bound = math.nan
        self.count = 0

    def __call__(self, J: float, parts) -> None:
        self.c_cap = max(self.c_cap, J)
        B = ps_bound(self.alpha, self.c_cap, self.a0, self.measure, self.S, self.p)
        val = self.alpha * parts.A**2 + parts.B
        self.count += 1
        self.bound = B
        self.worst = max(self.worst, val / B)
        if val > B:
            raise PSBoundViolation(
                f"iterate {self.count}: alpha A^2 + ||u||^2 = {val:.6g} exceeds bound {B:.6g}",
                {"iterate": self.count, "value": val, "bound": B, "c_cap": self.c_cap, "energy": J})


def make_ps_guard(ops: OperatorSet, params: ProblemParams, S: Optional[float] = None) -> PSGuard:
    well = ops.well
    a0 = well.offset
    if a0 < 0 and S is None:
        S = discrete_sobolev_constant(ops, well)
    return PSGuard(params.alpha, params.p, a0, measure_A_inf(well), 1.0 if S is None else S)


# -- shared pieces -------------------------------------------------------------

def _mass_outside(ops: OperatorSet, u_full: np.ndarray) -> float:
    grid, well = ops.grid, ops.well
    inside = well.in_omega(grid.coords, tol=1e-9 * grid.h)
    tot = float(u_full @ u_full)
    return float(u_full[~inside] @ u_full[~inside]) / tot if tot > 0 else 0.0


def nehari_defect(ops: OperatorSet, params: ProblemParams, u: np.ndarray) -> float:
    pt = energy_parts(ops, u, params.p)
    return abs(params.alpha * pt.A**2 + pt.B - pt.D - pt.P) / max(1.0, pt.B)


def _newton_direction(ops, params, u, g):
    Hs, Ku = hessian_parts(ops, params, u)
    lu = spla.splu(Hs)
    y = lu.solve(g)
    z = lu.solve(Ku)
    coef = 2.0 * params.alpha / (1.0 + 2.0 * params.alpha * float(Ku @ z))
    return -(y - coef * float(Ku @ y) * z)


def newton_polish(ops: OperatorSet, params: ProblemParams, u: np.ndarray, tol: float,
                  guard: Optional[PSGuard] = None, max_steps: int = 40):
    """Damped Newton on ``J'(u) = 0`` with the dual norm as merit; returns ``(u, steps, gnorm)``."""
    J, g, parts = energy_and_gradient(ops, params, u)
    gn = ops.dual_norm(g)
    for step in range(max_steps):
        if gn <= tol:
            return u, step, gn
        try:
            delta = _newton_direction(ops, params, u, g)
        except RuntimeError as exc:   # singular factor
            raise SolverFailure(f"Newton polish: singular Hessian ({exc})") from exc
        s = 1.0
        while s >= 1.0 / 1024:
            un = u + s * delta
            Jn, gnew, pn = energy_and_gradient(ops, params, un)
            gnn = ops.dual_norm(gnew)
            if gnn < gn:
                break
            s *= 0.5
        else:
            return u, step, gn
        u, J, g, parts, gn = un, Jn, gnew, pn, gnn
        if guard is not None:
            guard(J, parts)
    return u, max_steps, gn


def _record(ops, params, u, method, iters, history, guard, tol, newton_steps, top=math.nan):
    J, g, parts = energy_and_gradient(ops, params, u)
    gn = ops.dual_norm(g)
    full = ops.extend(u)
    rec = SolutionRecord(
        u=full, alpha=params.alpha, lam=ops.well.lam if ops.index is None else math.inf,
        p=params.p, energy=J, grad_norm=gn, nehari_defect=nehari_defect(ops, params, u),
        norm=math.sqrt(parts.B), mass_outside=_mass_outside(ops, full), iterations=iters,
        method=method, newton_steps=newton_steps, history=tuple(history),
        ps_max_ratio=guard.worst if guard else math.nan,
        ps_bound=guard.bound if guard else math.nan, top_component=top, tol=tol)
    if gn > tol:
        raise MaxItersExceeded(f"{method}: gradient norm {gn:.3e} above tol {tol:.1e}",
                               {"record": rec, "grad_norm": gn, "iterations": iters})
    return rec


def _check_monotone(history, method):
    if len(history) >= 2 and history[-1] > history[-2] + MONOTONE_TOL * max(1.0, abs(history[-2])):
        raise SolverFailure(f"{method}: energy increased {history[-2]!r} -> {history[-1]!r}")


def ray_profile(ops: OperatorSet, params: ProblemParams, u: np.ndarray):
    """``(J(3u), d/dt J(tu) at t -> 0+)``; the latter is ``||u||^2 - D(u,u)``."""
    pt = energy_parts(ops, u, params.p)
    return energy(ops, params, 3.0 * u), pt.B - pt.D


# -- Nehari --------------------------------------------------------------------

def nehari_scale(ops: OperatorSet, params: ProblemParams, v: np.ndarray) -> float:
    """Unique ``t > 0`` with ``alpha t^2 A^2 + B - D = t^(p-2) C`` for the direction ``v``."""
    pt = energy_parts(ops, v, params.p)
    A, Beff, C = pt.A, pt.B - pt.D, pt.P
    if not C > 0:
        raise NoCrossing(f"p-mass of the direction is {C!r}; assembly is corrupt")
    if not Beff > 0:
        raise SolverFailure("quadratic form is not positive on the direction; Nehari ray undefined")
    pm2 = params.p - 2.0
    f = lambda t: params.alpha * A * A * t * t + Beff - C * t**pm2
    hi = 1.0
    while f(hi) > 0:
        hi *= 2.0
    lo = hi / 2.0 if hi > 1.0 else 0.0
    while lo > 0 and f(lo) < 0:
        lo /= 2.0
    return so.brentq(f, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def nehari_solve(ops: OperatorSet, params: ProblemParams, seed: np.ndarray, tol: float = DEFAULT_TOL,
                 max_iter: int = MAX_ITERS, switch: float = NEWTON_SWITCH, S: Optional[float] = None,
                 ps_guard: Optional[PSGuard] = None) -> SolutionRecord:
    """Descent on the Nehari set, seeded along ``seed``.

    Applies whenever the quadratic part ``||u||^2 - D(u,u)`` is positive
    definite, which covers ``a0 >= 0``.
    """
    seed = np.asarray(seed, dtype=float)
    if seed.shape[0] != ops.size:
        seed = ops.restrict(seed)
    if not np.any(seed):
        raise SeedZero("seed vector is identically zero")
    guard = ps_guard or make_ps_guard(ops, params, S)
    u = nehari_scale(ops, params, seed) * seed
    J, g, parts = energy_and_gradient(ops, params, u)
    history = [J]
    it = 0
    for it in range(1, max_iter + 1):
        guard(J, parts)
        d = -ops.solve_Q(g)
        gn2 = -float(g @ d)
        if math.sqrt(max(gn2, 0.0)) <= switch:
            break
        s = 1.0
        while True:
            w = u + s * d
            w = nehari_scale(ops, params, w) * w
            Jn, gn_, pn = energy_and_gradient(ops, params, w)
            if Jn <= J - ARMIJO * s * gn2:
                break
            s *= 0.5
            if s < 1e-14:
                raise SolverFailure("nehari: line search failed")
        u, J, g, parts = w, Jn, gn_, pn
        history.append(J)
        _check_monotone(history, "nehari")
    else:
        raise MaxItersExceeded("nehari: descent did not reach the Newton switch",
                               {"iterations": it, "energy": J, "u": ops.extend(u)})
    u, ns, _ = newton_polish(ops, params, u, tol, guard)
    return _record(ops, params, u, "nehari", it, history, guard, tol, ns)


# -- mountain pass ---------------------------------------------------------------

def _reparametrize(ops, path):
    seg = np.array([ops.norm(path[k + 1] - path[k]) for k in range(len(path) - 1)])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, cum[-1], len(path))
    new = np.empty_like(path)
    for j, s in enumerate(targets):
        k = min(np.searchsorted(cum, s, side="right") - 1, len(path) - 2)
        frac = 0.0 if seg[k] == 0 else (s - cum[k]) / seg[k]
        new[j] = (1.0 - frac) * path[k] + frac * path[k + 1]
    new[0], new[-1] = path[0], path[-1]
    return new


def mountain_pass_solve(ops: OperatorSet, params: ProblemParams, endpoint: np.ndarray,
                        nodes: int = 33, tol: float = DEFAULT_TOL, max_iter: int = MAX_ITERS,
                        switch: float = NEWTON_SWITCH, reparam_every: int = 10,
                        S: Optional[float] = None, ps_guard: Optional[PSGuard] = None) -> SolutionRecord:
    """Path deformation from 0 to ``endpoint``: relocate the highest node downhill."""
    endpoint = np.asarray(endpoint, dtype=float)
    if not np.any(endpoint):
        raise SeedZero("endpoint is zero")
    Jend = energy(ops, params, endpoint)
    if Jend > 0:
        raise EndpointNotBelowZero(f"J(endpoint) = {Jend!r} > 0")
    guard = ps_guard or make_ps_guard(ops, params, S)
    path = np.linspace(0.0, 1.0, nodes)[:, None] * endpoint[None, :]
    E = np.array([energy(ops, params, z) for z in path])
    history = [float(E.max())]
    it = 0
    for it in range(1, max_iter + 1):
        i = int(np.argmax(E[1:-1])) + 1
        J, g, parts = energy_and_gradient(ops, params, path[i])
        guard(J, parts)
        # move across the path only; sliding along it would drain the node toward 0
        d = -ops.solve_Q(g)
        tan = path[i + 1] - path[i - 1]
        d -= (ops.inner(d, tan) / ops.inner(tan, tan)) * tan
        gn2 = -float(g @ d)
        if math.sqrt(max(gn2, 0.0)) <= switch:
            break
        s = 1.0
        while True:
            z = path[i] + s * d
            Jn = energy(ops, params, z)
            if Jn <= J - ARMIJO * s * gn2:
                break
            s *= 0.5
            if s < 1e-14:
                raise SolverFailure("mountain pass: line search failed")
        path[i], E[i] = z, Jn
        if it % reparam_every == 0:
            cand = _reparametrize(ops, path)
            Ec = np.array([energy(ops, params, zz) for zz in cand])
            if Ec.max() <= E.max():
                path, E = cand, Ec
        history.append(float(E.max()))
        _check_monotone(history, "mountain_pass")
    else:
        raise MaxItersExceeded("mountain pass: path max did not reach the Newton switch",
                               {"iterations": it, "path_max": float(E.max())})
    # locate the maximum on the polygon through the top node before polishing
    a, b = path[i - 1], path[i + 1]
    mid = path[i]
    def along(x):
        z = a + (mid - a) * (x + 1.0) if x < 0 else mid + (b - mid) * x
        return -energy(ops, params, z)
    x = so.minimize_scalar(along, bounds=(-1.0, 1.0), method="bounded", options={"xatol": 1e-10}).x
    start = a + (mid - a) * (x + 1.0) if x < 0 else mid + (b - mid) * x
    u, ns, _ = newton_polish(ops, params, start, tol, guard)
    return _record(ops, params, u, "mountain_pass", it, history, guard, tol, ns)


# -- local minimax (linking) ------------------------------------------------------

def _q_orthonormalize(ops, V):
    if V.shape[1] == 0:
        return V
    G = V.T @ (ops.Q @ V)
    return sla.solve_triangular(np.linalg.cholesky(G), V.T, lower=True).T


def _inner_max(ops, params, L, w, y0, max_steps=200):
    """Maximize ``J(L c + t w)`` over ``c`` and ``t >= 0`` by damped Newton."""
    Bm = np.column_stack([L, w])
    k = Bm.shape[1]
    y = y0.copy()
    alpha = params.alpha
    J = energy(ops, params, Bm @ y)
    for _ in range(max_steps):
        u = Bm @ y
        J, g, parts = energy_and_gradient(ops, params, u)
        grad = Bm.T @ g
        Hs, Ku = hessian_parts(ops, params, u)
        BKu = Bm.T @ Ku
        H = Bm.T @ (Hs @ Bm) + 2.0 * alpha * np.outer(BKu, BKu)
        lam, vec = np.linalg.eigh(H)
        scale = max(1.0, np.max(np.abs(lam)))
        if lam[-1] < -1e-12 * scale:
            step = -np.linalg.solve(H, grad)
        else:
            # not locally concave: shifted Newton, or escape along the rising mode
            shift = lam[-1] + 1e-3 * scale
            step = -np.linalg.solve(H - shift * np.eye(k), grad)
            if np.linalg.norm(step) < 1e-10 * max(1.0, np.linalg.norm(y)):
                v = vec[:, -1]
                step = 1e-2 * max(1.0, np.linalg.norm(y)) * v * (1.0 if v[np.argmax(np.abs(v))] > 0 else -1.0)
        if y[-1] + step[-1] < 0:
            step *= y[-1] / max(-step[-1], 1e-300) * 0.5
        s = 1.0
        while s > 1e-12:
            Jn = energy(ops, params, Bm @ (y + s * step))
            if Jn >= J - 1e-15 * max(1.0, abs(J)):
                break
            s *= 0.5
        y = y + s * step
        if np.linalg.norm(s * step) <= 1e-14 * max(1.0, np.linalg.norm(y)) and lam[-1] < 0:
            break
    return Bm @ y, y


def _linking_core(ops, params, low, w0, top, tol, max_iter, switch, guard, R0, method):
    L = _q_orthonormalize(ops, low)
    k = L.shape[1]

    def clean(w):
        if k:
            w = w - L @ (L.T @ (ops.Q @ w))
        return w / ops.norm(w)

    w = clean(np.asarray(w0, dtype=float))
    pt = energy_parts(ops, w, params.p)
    t0 = nehari_scale(ops, params, w) if pt.B - pt.D > 0 else 1.0
    y = np.concatenate([np.zeros(k), [t0]])
    u, y = _inner_max(ops, params, L, w, y)

    def guarded(u):
        if R0 is not None and ops.norm(u) > R0:
            raise GeometryViolated(f"inner maximizer left the R0 ball: ||u|| = {ops.norm(u):.6g} > R0 = {R0:.6g}")

    guarded(u)
    J, g, parts = energy_and_gradient(ops, params, u)
    history = [J]
    it = 0
    for it in range(1, max_iter + 1):
        guard(J, parts)
        d = -ops.solve_Q(g)
        Bm = np.column_stack([L, w])
        d = d - Bm @ (Bm.T @ (ops.Q @ d))
        gn2 = -float(g @ ops.solve_Q(g))
        if math.sqrt(max(gn2, 0.0)) <= switch:
            break
        t = y[-1]
        if t <= 1e-14:
            raise SolverFailure(f"{method}: inner maximizer collapsed onto the low span")
        dn2 = ops.inner(d, d)
        s = 1.0
        while True:
            ws = clean(w + (s / t) * d)
            us, ys = _inner_max(ops, params, L, ws, y)
            Jn = energy(ops, params, us)
            if Jn <= J - ARMIJO * s * dn2:
                break
            s *= 0.5
            if s < 1e-14:
                raise SolverFailure(f"{method}: line search failed")
        guarded(us)
        w, u, y = ws, us, ys
        J, g, parts = energy_and_gradient(ops, params, u)
        history.append(J)
        _check_monotone(history, method)
    else:
        raise MaxItersExceeded(f"{method}: local minimax did not reach the Newton switch",
                               {"iterations": it, "energy": J})
    u, ns, _ = newton_polish(ops, params, u, tol, guard)
    guarded(u)
    topc = abs(ops.inner(u, top)) / (ops.norm(u) * ops.norm(top))
    return _record(ops, params, u, method, it, history, guard, tol, ns, top=topc)


def linking_solve(ops: OperatorSet, params: ProblemParams, wspec: WellSpectrum,
                  spec: DirichletSpectrum, geometry=None, start: Optional[np.ndarray] = None,
                  tol: float = DEFAULT_TOL, max_iter: int = MAX_ITERS, switch: float = NEWTON_SWITCH,
                  S: Optional[float] = None, ps_guard: Optional[PSGuard] = None) -> SolutionRecord:
    """Local minimax over ``span(e_1..e_{k0*-1}) + t w`` with ``w`` seeded at ``e_k0*``.

    ``geometry`` (a :class:`~kwl.analysis.LinkingGeometry`) enables the
    ``R0``-ball check.  ``start`` warm-starts ``w`` from a previous solution.
    """
    if ops.well.offset >= 0:
        raise DefiniteCase("linking needs a0 < 0; use nehari_solve or mountain_pass_solve")
    k0 = k0_star(spec)
    if len(wspec.levels) < k0:
        raise SolverFailure(f"well spectrum holds {len(wspec.levels)} levels, need {k0}")
    low = wspec.basis(k0 - 1)
    top = wspec.e(k0)
    w0 = top if start is None else np.asarray(start, dtype=float)
    guard = ps_guard or make_ps_guard(ops, params, S)
    R0 = geometry.R0 if geometry is not None else None
    return _linking_core(ops, params, low, w0, top, tol, max_iter, switch, guard, R0, "linking")


# -- the limit problem on Omega ------------------------------------------------------

def default_seed(grid: Grid, well: PotentialWell) -> np.ndarray:
    """Ground state of the Laplacian on the Omega-subgrid, zero-extended, max 1."""
    om = omega_operators(grid, well)
    if om.size <= 400:
        vec = sla.eigh(om.K.toarray(), subset_by_index=[0, 0])[1][:, 0]
    else:
        vec = spla.eigsh(om.K, k=1, sigma=0.0, which="LM", v0=np.ones(om.size))[1][:, 0]
    vec = vec / vec[np.argmax(np.abs(vec))]
    return om.extend(vec)


def limit_problem_solve(grid: Grid, well: PotentialWell, params: ProblemParams,
                        spec: Optional[DirichletSpectrum] = None, tol: float = DEFAULT_TOL,
                        max_iter: int = MAX_ITERS, switch: float = NEWTON_SWITCH,
                        S: Optional[float] = None) -> SolutionRecord:
    """Dirichlet problem on Omega with constant potential ``a0``; ``u`` zero-extended."""
    om = omega_operators(grid, well)
    a0 = well.offset
    if a0 != 0 and spec is None:
        spec = dirichlet_spectrum(grid, well, count=6)
    if a0 >= 0 or spec.gamma(1) > 1.0:
        rec = nehari_solve(om, params, om.restrict(default_seed(grid, well)), tol=tol,
                           max_iter=max_iter, switch=switch, S=S)
    else:
        k0 = k0_star(spec)
        low = spec.basis(k0 - 1)[om.index]
        top = spec.eigenspace(k0)[om.index][:, 0]
        guard = make_ps_guard(om, params, S)
        rec = _linking_core(om, params, low, top, top, tol, max_iter, switch, guard, None, "limit")
    return _replace_method(rec, "limit")


def _replace_method(rec: SolutionRecord, method: str) -> SolutionRecord:
    return replace(rec, method=method)
