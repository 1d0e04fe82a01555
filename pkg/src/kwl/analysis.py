"""Explicit a priori constants and the concentration study as ``lambda`` grows.

Closed-form pieces (``rho``, ``d0``, ``R0``, ``alpha0``, the PS bound and the
nontriviality threshold) are cheap.  The only sampled quantity is the
``L^p`` floor ``M`` over the normalized top span, which is a minimum over
a sphere of dimension at most a handful.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.optimize as so

from .domain import PotentialWell, ProblemParams
from .errors import BadExponent, GammaBelowOne, InvalidParams, KWLError
from .operators import EmbeddingConstants, OperatorSet, embedding_constants, energy
from .spectrum import DirichletSpectrum, WellSpectrum, k0_star

log = logging.getLogger(__name__)

RHO_SPLIT = 0.5          # rho makes the bracket equal half its first term
THRESHOLD_SAFETY = 2.0   # left side of the nontriviality test kept below 1/2
M_SAMPLES = 10_000


def _check_p(p: float):
    if not 4.0 < p < 6.0:
        raise BadExponent(f"need 4 < p < 6, got {p}")


# -- closed forms ------------------------------------------------------------

def ps_bound(alpha: float, c_cap: float, a0: float, measure_A_inf: float, S: float, p: float) -> float:
    """Upper bound on ``alpha ||grad u||^4 + ||u||_lambda^2`` along PS sequences at level ``<= c_cap``."""
    _check_p(p)
    if not alpha > 0:
        raise InvalidParams(f"alpha must be positive, got {alpha}")
    tail = 0.0
    if a0 != 0:
        tail = 2.0 * (p - 2.0) ** 2 * a0**2 * measure_A_inf ** (4.0 / 3.0) / (S**2 * alpha * (p - 4.0) * p)
    return 8.0 * p / (p - 4.0) * (c_cap + tail)


def nontriviality_threshold(alpha: float, p: float, S: float, a0: float, a_inf: float,
                            ps_B: float, safety: float = THRESHOLD_SAFETY) -> float:
    """Infimum of the ``lambda`` for which the nontriviality test holds.

    The test is ``S^{-3(p-2)/4} B^{(5p-10)/8} (a0 + a_inf lambda)^{-(6-p)/4} < 1/safety``;
    ``alpha`` enters only through ``B``.
    """
    _check_p(p)
    X = S ** (-3.0 * (p - 2.0) / 4.0) * ps_B ** ((5.0 * p - 10.0) / 8.0)
    lam = ((safety * X) ** (4.0 / (6.0 - p)) - a0) / a_inf
    return max(lam, max(0.0, -a0 / a_inf))


def rho_from_constants(gamma: float, S_p: float, d_lam: float, p: float) -> float:
    if not gamma > 1.0:
        raise GammaBelowOne(f"gamma_k0* = {gamma} must exceed 1")
    _check_p(p)
    return ((1.0 - 1.0 / gamma) * S_p ** (p / 2.0)
            / (8.0 * (1.0 + d_lam**2) ** (p / 2.0))) ** (1.0 / (p - 2.0))


def mountain_pass_floor(consts: EmbeddingConstants, p: float):
    """Sphere radius and floor of ``J`` for the definite case.

    ``J(u) >= ||u||^2/2 - C^p ||u||^p / p`` with ``C`` the ``L^p`` embedding
    coefficient; the right side peaks at ``rho = C^{-p/(p-2)}``.
    """
    _check_p(p)
    C = consts.lp_coefficient
    rho = C ** (-p / (p - 2.0))
    return rho, 0.5 * rho**2 - C**p * rho**p / p


# -- the L^p floor of a normalized span ---------------------------------------

def sphere_lp_minimum(basis: np.ndarray, gram: np.ndarray, weight: float, p: float,
                      samples: int = M_SAMPLES, seed: int = 0) -> float:
    """``min ||u||_p`` over ``{u = basis c : c^T gram c = 1}``; sampling then local polish."""
    k = basis.shape[1]
    L = np.linalg.cholesky(gram)
    B = np.linalg.solve(L, basis.T).T      # columns now gram-orthonormal

    def lp(Z):
        U = B @ Z
        return (weight * np.sum(np.abs(U) ** p, axis=0)) ** (1.0 / p)

    if k == 1:
        return float(lp(np.ones((1, 1)))[0])
    rng = np.random.default_rng(seed)
    best_val, best_z = math.inf, None
    for start in range(0, samples, 1000):
        Z = rng.standard_normal((k, min(1000, samples - start)))
        Z /= np.linalg.norm(Z, axis=0)
        vals = lp(Z)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val, best_z = float(vals[j]), Z[:, j].copy()
    res = so.minimize(lambda z: float(lp((z / np.linalg.norm(z))[:, None])[0]), best_z,
                      method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
    return min(best_val, float(res.fun))


# -- linking geometry ---------------------------------------------------------

@dataclass(frozen=True)
class LinkingGeometry:
    rho: float
    d0: float
    R0: float
    alpha0: float
    M: float
    gamma: float
    gamma_below: float
    k0: int
    S: float
    S_p: float
    d_lam: float
    p: float
    lam_floor: float
    rho_split: float = RHO_SPLIT
    M_sources: dict = field(default_factory=dict)

    def energy_cap(self, alpha: float) -> float:
        """Upper end of the level bracket."""
        return 0.25 * alpha * self.R0**4 + 0.5 * (1.0 - 1.0 / self.gamma) * self.R0**2

    def as_dict(self) -> dict:
        return {"rho": self.rho, "d0": self.d0, "R0": self.R0, "alpha0": self.alpha0, "M": self.M,
                "gamma_k0": self.gamma, "gamma_k0_minus_1": self.gamma_below, "k0_star": self.k0,
                "S": self.S, "S_p": self.S_p, "d_lambda": self.d_lam, "p": self.p,
                "lambda_floor": self.lam_floor, "rho_split": self.rho_split}


def geometry_from_values(gamma: float, S_p: float, d_lam: float, p: float, M: float):
    """``(rho, d0, R0, alpha0)`` from the scalar inputs."""
    rho = rho_from_constants(gamma, S_p, d_lam, p)
    d0 = rho**2 / 8.0 * (1.0 - 1.0 / gamma)
    root = ((p / 2.0) * (1.0 - 1.0 / gamma) * M ** (-p)) ** (1.0 / (p - 2.0))
    R0 = max(root, rho * (1.0 + 1e-9))
    return rho, d0, R0, 2.0 * d0 / R0**4


def linking_geometry(consts: EmbeddingConstants, spec: DirichletSpectrum, params: ProblemParams,
                     lam_floor: float, well: Optional[PotentialWell] = None,
                     wspec: Optional[WellSpectrum] = None, samples: int = M_SAMPLES,
                     seed: int = 0) -> LinkingGeometry:
    """Radii and level bounds of the linking structure.

    ``d_lambda`` is re-evaluated at ``lam_floor`` when ``well`` is given
    (otherwise ``consts`` must already refer to ``lam_floor``).  ``M`` is the
    smaller of the ``L^p`` floors over the normalized Dirichlet span and,
    when ``wspec`` is given, over the normalized span of ``e_1..e_k0*``.
    """
    p = params.p
    if well is not None:
        consts = embedding_constants(well, lam_floor, consts.S, consts.S_p, consts.measure_A_inf)
    k0 = k0_star(spec)
    gamma = spec.gamma(k0)
    gamma_below = spec.gamma(k0 - 1) if k0 > 1 else math.nan

    om = spec.omega_ops
    Phi = spec.basis(k0)[om.index]
    sources = {"dirichlet": sphere_lp_minimum(Phi, Phi.T @ (om.K @ Phi), om.weight, p, samples, seed)}
    if wspec is not None:
        E = wspec.basis(k0)
        sources["well"] = sphere_lp_minimum(E, E.T @ (wspec.ops.Q @ E), wspec.ops.weight, p, samples, seed)
    M = min(sources.values())
    rho, d0, R0, alpha0 = geometry_from_values(gamma, consts.S_p, consts.d_lam, p, M)
    return LinkingGeometry(rho=rho, d0=d0, R0=R0, alpha0=alpha0, M=M, gamma=gamma,
                           gamma_below=gamma_below, k0=k0, S=consts.S, S_p=consts.S_p,
                           d_lam=consts.d_lam, p=p, lam_floor=lam_floor, M_sources=sources)


def _q_orthonormal(ops: OperatorSet, V: np.ndarray) -> np.ndarray:
    G = V.T @ (ops.Q @ V)
    return np.linalg.solve(np.linalg.cholesky(G), V.T).T


def sample_high_sphere(ops: OperatorSet, params: ProblemParams, wspec: WellSpectrum, k0: int,
                       radius: float, count: int = 200, seed: int = 0) -> np.ndarray:
    """``J`` on random points of the ``radius``-sphere in the complement of the low span.

    Samples mix the captured high levels with smooth random fields
    (``Q^{-1}`` applied to white noise), then remove the low-span component.
    """
    rng = np.random.default_rng(seed)
    low = wspec.basis(k0 - 1)
    high = wspec.all_vectors[:, low.shape[1]:]
    out = np.empty(count)
    for j in range(count):
        u = high @ rng.standard_normal(high.shape[1])
        u += rng.uniform(0.0, 2.0) * ops.solve_Q(ops.M @ rng.standard_normal(ops.size)) * ops.norm(u) \
            / max(ops.norm(ops.solve_Q(ops.M @ np.ones(ops.size))), 1e-300)
        if low.shape[1]:
            u -= low @ np.linalg.solve(low.T @ (ops.Q @ low), low.T @ (ops.Q @ u))
        u *= radius / ops.norm(u)
        out[j] = energy(ops, params, u)
    return out


def sample_linking_boundary(ops: OperatorSet, params: ProblemParams, wspec: WellSpectrum, k0: int,
                            radius: float, count: int = 200, seed: int = 0) -> np.ndarray:
    """``J`` on random points of the expanding-set boundary at ``radius``.

    Half the points lie in the low span (``t = 0``), the rest mix the low
    span with ``e_k0*`` at ``t > 0``.
    """
    rng = np.random.default_rng(seed)
    low = _q_orthonormal(ops, wspec.basis(k0 - 1)) if k0 > 1 else np.zeros((ops.size, 0))
    top = wspec.level_vectors(k0)
    top = top / np.sqrt(np.sum(top * (ops.Q @ top), axis=0))
    out = np.empty(count)
    for j in range(count):
        if low.shape[1] and (j % 2 == 0):
            u = low @ rng.standard_normal(low.shape[1])
        else:
            u = top @ np.abs(rng.standard_normal(top.shape[1]))
            if low.shape[1]:
                u = u + low @ (rng.standard_normal(low.shape[1]) * rng.uniform(0.0, 3.0))
        u *= radius / ops.norm(u)
        out[j] = energy(ops, params, u)
    return out


# -- concentration sweep -------------------------------------------------------

@dataclass(frozen=True)
class ConcentrationRow:
    lam: float
    energy: float
    grad_norm: float
    nehari_defect: float
    mass_outside: float
    h1_dist_rel: float
    well_energy: float
    flagged: int
    note: str = ""

    def as_csv(self) -> list:
        return [self.lam, self.energy, self.grad_norm, self.nehari_defect, self.mass_outside,
                self.h1_dist_rel, self.well_energy, self.flagged]


SWEEP_COLUMNS = ["lambda", "energy", "grad_norm", "nehari_defect", "mass_outside",
                 "h1_dist_rel", "well_energy", "flagged"]


def h1_distance(ops: OperatorSet, u: np.ndarray, ref: np.ndarray) -> float:
    """Relative ``H^1`` distance ``||u - ref|| / ||ref||``, minimized over the sign of ``u``."""
    H = ops.K + ops.M
    dists = []
    for s in (1.0, -1.0):
        r = s * u - ref
        dists.append(float(r @ (H @ r)))
    return math.sqrt(min(dists) / float(ref @ (H @ ref)))


def well_energy(ops: OperatorSet, u: np.ndarray) -> float:
    """``int lambda a u^2`` by nodal quadrature."""
    a = ops.well.lam * ops.well.a(ops.grid.coords)
    return ops.weight * float(np.sum(a * u * u))


@dataclass
class SweepResult:
    rows: list
    records: list
    checks: list

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)


def concentration_sweep(grid, well: PotentialWell, params: ProblemParams, lambdas: Sequence[float],
                        limit_record, spec: Optional[DirichletSpectrum] = None,
                        lam_min: float = 0.0, warm_start: bool = True,
                        mass_cap: float = 1e-2, h1_cap: float = 0.05, solver_options=None,
                        S: Optional[float] = None) -> SweepResult:
    """Solve along increasing ``lambda`` and measure localization in Omega."""
    from . import solver as slv
    from .operators import assemble
    from .spectrum import dirichlet_spectrum, well_spectrum

    lambdas = [float(x) for x in lambdas]
    if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambda list must be strictly increasing")
    opts = dict(solver_options or {})
    ref = limit_record.u
    if well.offset < 0 and spec is None:
        spec = dirichlet_spectrum(grid, well, count=6)
    rows, records, prev = [], [], None
    for lam in lambdas:
        w = well.with_lambda(lam)
        ops = assemble(grid, w)
        try:
            if well.offset >= 0:
                seed = prev.u if (warm_start and prev is not None) else slv.default_seed(grid, w)
                rec = slv.nehari_solve(ops, params, seed, S=S, **opts)
            else:
                k0 = k0_star(spec)
                ws = well_spectrum(ops, w, k0)
                start = prev.u if (warm_start and prev is not None) else None
                rec = slv.linking_solve(ops, params, ws, spec, start=start, S=S, **opts)
        except KWLError as exc:
            log.warning("sweep: lambda=%g failed: %s", lam, exc)
            rows.append(ConcentrationRow(lam, math.nan, math.nan, math.nan, math.nan, math.nan,
                                         math.nan, 1, f"solver failure: {exc}"))
            records.append(None)
            continue
        flagged = int(lam <= lam_min)
        rows.append(ConcentrationRow(
            lam=lam, energy=rec.energy, grad_norm=rec.grad_norm, nehari_defect=rec.nehari_defect,
            mass_outside=rec.mass_outside, h1_dist_rel=h1_distance(ops, rec.u, ref),
            well_energy=well_energy(ops, rec.u), flagged=flagged,
            note="below nontriviality threshold" if flagged else ""))
        records.append(rec)
        prev = rec

    good = [r for r in rows if not math.isnan(r.energy)]
    checks = []
    if len(good) >= 2:
        first, last = good[0], good[-1]
        checks.append(("mass_outside decreases first->last", last.mass_outside < first.mass_outside,
                       f"{first.mass_outside:.3e} -> {last.mass_outside:.3e}"))
        checks.append(("h1_dist_rel decreases first->last", last.h1_dist_rel < first.h1_dist_rel,
                       f"{first.h1_dist_rel:.3e} -> {last.h1_dist_rel:.3e}"))
        top = [r for r in good if r.lam >= last.lam / 10.0]
        checks.append(("well_energy decreasing over top decade",
                       all(b.well_energy < a.well_energy for a, b in zip(top, top[1:])) and len(top) >= 2,
                       ", ".join(f"{r.well_energy:.3e}" for r in top)))
    if good:
        last = good[-1]
        checks.append((f"mass_outside(final) < {mass_cap:g}", last.mass_outside < mass_cap,
                       f"{last.mass_outside:.3e}"))
        checks.append((f"h1_dist_rel(final) < {h1_cap:g}", last.h1_dist_rel < h1_cap,
                       f"{last.h1_dist_rel:.3e}"))
    checks.append(("no solver failures", len(good) == len(rows), f"{len(rows) - len(good)} failed"))
    return SweepResult(rows=rows, records=records, checks=checks)
