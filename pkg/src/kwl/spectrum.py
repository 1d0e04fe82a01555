"""Dirichlet spectrum on Omega and the constrained well spectrum ``beta_m(lambda)``.

The well spectrum minimizes ``||u||_lambda^2`` over ``D_lambda(u, u) = 1``
inside ``F_lambda^perp``, the ``E_lambda``-orthogonal complement of the
functions supported off ``A_lambda``.  On the grid, ``F_lambda^perp`` is the
set of vectors that are ``Q``-harmonic off ``A_lambda``; each one is fixed by
its values on ``A_lambda`` nodes, and ``||u||_lambda^2`` becomes the Schur
complement quadratic form there.  Successive levels with deflation against
earlier eigenlevel subspaces are then the ordered eigenlevels of the reduced
pencil ``(S, Mminus_AA)``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import Grid, PotentialWell, lambda0
from .errors import (DefiniteCase, DegenerateThreshold, LambdaBelowLambda0,
                     SpectrumTooShort, SubspaceMismatch, ZeroOffset)
from .operators import OperatorSet, assemble, omega_operators

log = logging.getLogger(__name__)

CLUSTER_TOL = 1e-6
TIE_EPS = 1e-9
DENSE_LIMIT = 600


def _cluster(values: np.ndarray, tol: float) -> list:
    """Split sorted ``values`` into runs whose consecutive relative gaps are ``<= tol``."""
    groups, start = [], 0
    for j in range(1, len(values) + 1):
        if j == len(values) or values[j] - values[j - 1] > tol * max(abs(values[j - 1]), 1e-300):
            groups.append((start, j))
            start = j
    return groups


def _fix_sign(vecs: np.ndarray) -> np.ndarray:
    """Largest-magnitude component of each column made positive."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


class _CountingSolver:
    def __init__(self, A):
        self.lu = spla.splu(sp.csc_matrix(A))
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return self.lu.solve(np.asarray(x, dtype=float))


def _smallest_eigs(A: sp.spmatrix, k: int):
    """``k`` smallest eigenpairs of a sparse SPD matrix; returns (vals, vecs, solves)."""
    n = A.shape[0]
    if n <= DENSE_LIMIT or k >= n - 1:
        k = min(k, n)
        vals, vecs = sla.eigh(A.toarray(), subset_by_index=[0, k - 1])
        return vals, vecs, 0
    solver = _CountingSolver(A)
    OPinv = spla.LinearOperator(A.shape, matvec=solver, dtype=float)
    vals, vecs = spla.eigsh(A, k=k, sigma=0.0, which="LM", OPinv=OPinv,
                            v0=np.ones(n), tol=0.0, ncv=min(n, max(2 * k + 1, 20)))
    order = np.argsort(vals)
    return vals[order], vecs[:, order], solver.calls


def _levels_from_eigs(vals, vecs, tol, n_total, want):
    """Group eigenpairs into complete levels; ``None`` if more pairs are needed."""
    groups = _cluster(vals, tol)
    complete = groups if len(vals) >= n_total else groups[:-1]
    if want is None:
        want = len(complete)
    if len(complete) < want and len(vals) < n_total:
        return None
    return [(float(np.mean(vals[a:b])), vecs[:, a:b]) for a, b in complete[:want]]


# -- Dirichlet spectrum ------------------------------------------------------

@dataclass
class DirichletSpectrum:
    """Distinct eigenvalues ``gamma_i`` of ``-Delta u = gamma |a0| u`` on Omega.

    ``vectors[i]`` holds the ``k_i`` eigenvectors of ``gammas[i]`` as columns,
    zero-extended to the full grid and normalized by ``|a0| phi^T M phi = 1``.
    """

    gammas: np.ndarray
    multiplicities: list
    vectors: list
    a0: float
    cluster_tol: float
    omega_ops: OperatorSet

    def gamma(self, i: int) -> float:
        """1-based access, as in ``gamma_1 < gamma_2 < ...``."""
        return float(self.gammas[i - 1])

    def eigenspace(self, i: int) -> np.ndarray:
        return self.vectors[i - 1]

    def basis(self, upto: int) -> np.ndarray:
        """All eigenvectors of levels ``1..upto`` stacked as columns."""
        if upto <= 0:
            return np.zeros((self.vectors[0].shape[0], 0))
        return np.hstack(self.vectors[:upto])

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.repeat(self.gammas, self.multiplicities)

    def __len__(self):
        return len(self.gammas)


def dirichlet_spectrum(grid: Grid, well: PotentialWell, count: int,
                       cluster_tol: float = CLUSTER_TOL) -> DirichletSpectrum:
    if well.offset == 0:
        raise ZeroOffset("the Omega eigenproblem is scaled by |a0|; a0 = 0 is excluded")
    om = omega_operators(grid, well)
    scale = abs(well.offset) * om.weight
    n = om.size
    k = min(count + 4, n)
    while True:
        vals, vecs, _ = _smallest_eigs(om.K, k)
        levels = _levels_from_eigs(vals, vecs, cluster_tol, n, want=None)
        total = sum(v.shape[1] for _, v in levels)
        if total >= count or k >= n:
            break
        k = min(2 * k, n)
    kept, total = [], 0
    for val, v in levels:
        if total >= count:
            break
        kept.append((val, v))
        total += v.shape[1]
    gammas = np.array([val / scale for val, _ in kept])
    vectors = []
    for _, v in kept:
        v = v / np.sqrt(scale * np.sum(v * v, axis=0))
        v = _fix_sign(v)
        full = np.zeros((grid.size, v.shape[1]))
        full[om.index] = v
        vectors.append(full)
    return DirichletSpectrum(gammas=gammas, multiplicities=[v.shape[1] for v in vectors],
                             vectors=vectors, a0=well.offset, cluster_tol=cluster_tol,
                             omega_ops=om)


def k0_star(spec, eps: float = TIE_EPS) -> int:
    """Smallest 1-based ``k`` with ``gamma_k > 1``."""
    gammas = spec.gammas if isinstance(spec, DirichletSpectrum) else np.asarray(spec, dtype=float)
    for k, g in enumerate(gammas, start=1):
        if abs(g - 1.0) <= eps:
            raise DegenerateThreshold(f"gamma_{k} = {g!r} is within {eps} of 1")
        if g > 1.0 + eps:
            return k
    raise SpectrumTooShort("no computed eigenvalue exceeds 1; request more eigenvalues")


# -- well spectrum -----------------------------------------------------------

@dataclass
class WellLevel:
    beta: float
    vectors: np.ndarray   # columns: D-normalized minimizers, full grid


@dataclass
class WellSpectrum:
    lam: float
    levels: list
    ops: OperatorSet
    diagnostics: dict = field(default_factory=dict)

    @property
    def betas(self) -> np.ndarray:
        return np.array([lv.beta for lv in self.levels])

    def beta(self, m: int) -> float:
        return self.levels[m - 1].beta

    def e(self, m: int) -> np.ndarray:
        """Representative minimizer ``e_m(lambda)``."""
        return self.levels[m - 1].vectors[:, 0]

    def level_vectors(self, m: int) -> np.ndarray:
        return self.levels[m - 1].vectors

    def basis(self, upto: int) -> np.ndarray:
        """Union of captured level subspaces ``1..upto``."""
        if upto <= 0:
            return np.zeros((self.ops.size, 0))
        return np.hstack([lv.vectors for lv in self.levels[:upto]])

    @property
    def all_vectors(self) -> np.ndarray:
        return self.basis(len(self.levels))


class _Reduction:
    """Schur complement of ``Q`` onto ``A_lambda`` nodes and the harmonic extension."""

    def __init__(self, ops: OperatorSet):
        Q = ops.Q.tocsr()
        self.ops = ops
        self.a = np.flatnonzero(ops.minus_nodes)
        self.o = np.flatnonzero(~ops.minus_nodes)
        Qaa = Q[self.a][:, self.a].tocsr()
        if self.o.size:
            self.Qoa = Q[self.o][:, self.a].tocsc()
            self.Qoo_lu = spla.splu(Q[self.o][:, self.o].tocsc())
            b = np.flatnonzero(np.diff(self.Qoa.indptr) > 0)
            if b.size:
                Qob = self.Qoa[:, b].toarray()
                Z = self.Qoo_lu.solve(Qob)
                C = Qob.T @ Z
                bi, bj = np.meshgrid(b, b, indexing="ij")
                corr = sp.coo_matrix((C.ravel(), (bi.ravel(), bj.ravel())), shape=Qaa.shape)
                Qaa = (Qaa - corr).tocsr()
        else:
            self.Qoa = None
        self.S = Qaa
        self.dm = ops.Mminus.diagonal()[self.a]

    def extend(self, va: np.ndarray) -> np.ndarray:
        va = np.atleast_2d(va.T).T
        u = np.zeros((self.ops.size, va.shape[1]))
        u[self.a] = va
        if self.o.size:
            u[self.o] = -self.Qoo_lu.solve(np.asarray(self.Qoa @ va))
        return u


def well_spectrum(ops: OperatorSet, well: PotentialWell, m_max: int,
                  cluster_tol: float = CLUSTER_TOL) -> WellSpectrum:
    if well.offset >= 0:
        raise DefiniteCase("D_lambda vanishes identically for a0 >= 0")
    if not well.lam > lambda0(well):
        raise LambdaBelowLambda0(f"lambda={well.lam} <= Lambda0={lambda0(well)}")
    if m_max < 1:
        raise ValueError("m_max must be >= 1")
    red = _Reduction(ops)
    n_a = red.a.size
    isq = 1.0 / np.sqrt(red.dm)
    St = sp.diags(isq) @ red.S @ sp.diags(isq)
    St = ((St + St.T) * 0.5).tocsr()
    k = min(m_max + 3, n_a)
    while True:
        vals, vecs, solves = _smallest_eigs(St, k)
        levels = _levels_from_eigs(vals, vecs, cluster_tol, n_a, m_max)
        if levels is not None:
            break
        k = min(2 * k, n_a)
    out, resid = [], []
    for beta, y in levels:
        u = red.extend(y * isq[:, None])
        u = _fix_sign(u)
        r = ops.Q @ u - beta * (ops.Mminus @ u)
        resid.append(float(np.max(np.linalg.norm(r, axis=0) / np.linalg.norm(ops.Q @ u, axis=0))))
        out.append(WellLevel(beta=beta, vectors=u))
    diag = {"reduced_size": int(n_a), "eigenpairs": int(len(vals)),
            "solves": int(solves), "max_residual": max(resid)}
    return WellSpectrum(lam=well.lam, levels=out, ops=ops, diagnostics=diag)


def subspace_distance(ops: OperatorSet, u: np.ndarray, basis: np.ndarray) -> float:
    """Relative ``H^1`` distance from ``u`` to ``span(basis)``; scale- and sign-free."""
    H = ops.K + ops.M
    Hb = H @ basis
    c = np.linalg.solve(basis.T @ Hb, Hb.T @ u)
    r = u - basis @ c
    return math.sqrt(max(float(r @ (H @ r)), 0.0) / float(u @ (H @ u)))


@dataclass
class FlowRow:
    lam: float
    m: int
    beta: float
    gamma_disc: float
    subspace_dist: float
    iters: int
    dim: int

    def as_csv(self) -> list:
        return [self.lam, self.m, self.beta, self.gamma_disc, self.subspace_dist, self.iters]


FLOW_COLUMNS = ["lambda", "m", "beta_m", "gamma_m_disc", "subspace_dist", "iters"]


def well_spectrum_flow(grid: Grid, well: PotentialWell, lambdas: Sequence[float], m_max: int,
                       spec: Optional[DirichletSpectrum] = None, threads: int = 1,
                       keep: bool = False):
    """Per-lambda table of ``beta_m``, the matching ``gamma_m`` and subspace distances.

    Returns the list of :class:`FlowRow`; with ``keep=True`` also the
    per-lambda :class:`WellSpectrum` objects.
    """
    lambdas = [float(x) for x in lambdas]
    if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambda list must be strictly increasing")
    if spec is None:
        spec = dirichlet_spectrum(grid, well, count=3 * m_max + 2)
    if len(spec) < m_max:
        raise SpectrumTooShort(f"Dirichlet spectrum has {len(spec)} levels, need {m_max}")

    def one(lam):
        w = well.with_lambda(lam)
        return well_spectrum(assemble(grid, w), w, m_max)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            spectra = list(pool.map(one, lambdas))
    else:
        spectra = [one(lam) for lam in lambdas]

    rows = []
    for lam, ws in zip(lambdas, spectra):
        for m in range(1, m_max + 1):
            phis = spec.eigenspace(m)
            dist = max(subspace_distance(ws.ops, v, phis) for v in ws.level_vectors(m).T)
            rows.append(FlowRow(lam, m, ws.beta(m), spec.gamma(m), dist,
                                ws.diagnostics["solves"], ws.level_vectors(m).shape[1]))
    return (rows, spectra) if keep else rows


# -- level diagnostics -------------------------------------------------------

@dataclass
class SplitResult:
    lhs: float
    rhs: float
    holds: bool
    vacuous: bool = False


def coercivity_split(wspec: WellSpectrum, spec: DirichletSpectrum, u: np.ndarray,
                     side: str, tol: float = 1e-8) -> SplitResult:
    """Evaluate ``||u||^2 - D(u,u)`` against ``(1/2)(1 - 1/gamma)||u||^2``.

    ``side="low"`` tests the upper bound on ``span(e_1..e_{k0*-1})`` with
    ``gamma_{k0*-1}``; ``side="high"`` tests the lower bound on the
    ``E_lambda``-orthogonal complement of that span with ``gamma_{k0*}``.
    """
    if side not in ("low", "high"):
        raise ValueError("side must be 'low' or 'high'")
    ops = wspec.ops
    k0 = k0_star(spec)
    low = wspec.basis(k0 - 1)
    u = np.asarray(u, dtype=float)
    nu2 = ops.inner(u, u)
    if side == "low" and low.shape[1] == 0:
        return SplitResult(0.0, 0.0, True, vacuous=True)
    if low.shape[1]:
        G = low.T @ (ops.Q @ low)
        c = np.linalg.solve(G, low.T @ (ops.Q @ u))
        proj = low @ c
        off = u - proj if side == "low" else proj
        if ops.inner(off, off) > (tol**2) * nu2:
            raise SubspaceMismatch(f"u has a component outside the {side} subspace")
    lhs = nu2 - ops.D(u)
    gamma = spec.gamma(k0 - 1) if side == "low" else spec.gamma(k0)
    rhs = 0.5 * (1.0 - 1.0 / gamma) * nu2
    holds = lhs <= rhs if side == "low" else lhs >= rhs
    return SplitResult(lhs, rhs, bool(holds))


def level_dichotomy(wspec: WellSpectrum, m: int, align_tol: float = 0.2,
                    ortho_tol: float = 0.1) -> list:
    """Pairwise case split for the captured level-``m`` minimizers.

    Each pair either aligns (relative ``H^1`` distance below ``align_tol``
    up to sign) or is ``|a0| M``-orthogonal below ``ortho_tol``.  Returns
    ``(i, j, case, value)`` tuples with case ``"align"``, ``"orthogonal"``
    or ``"neither"``.
    """
    ops = wspec.ops
    a0 = abs(ops.well.offset)
    V = wspec.level_vectors(m)
    out = []
    for i in range(V.shape[1]):
        for j in range(i + 1, V.shape[1]):
            x, y = V[:, i], V[:, j]
            ov = a0 * float(x @ (ops.M @ y))
            ov /= math.sqrt(a0 * float(x @ (ops.M @ x)) * a0 * float(y @ (ops.M @ y)))
            d = subspace_distance(ops, x, y[:, None])
            if d < align_tol:
                out.append((i, j, "align", d))
            elif abs(ov) < ortho_tol:
                out.append((i, j, "orthogonal", abs(ov)))
            else:
                out.append((i, j, "neither", abs(ov)))
    return out
