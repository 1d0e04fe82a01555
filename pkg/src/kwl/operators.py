"""Discrete operators for the energy space ``E_lambda`` and the Kirchhoff functional.

All zeroth-order terms use nodal (lumped) quadrature, so the mass-type
matrices are diagonal and the functional's gradient and Hessian are exact
closed forms.  ``Q = K + M_plus`` is the Gram matrix of ``<.,.>_lambda`` and
doubles as the Riesz-map preconditioner of every solver.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .domain import Grid, PotentialWell, measure_A_inf
from .errors import BoxTooSmall, LambdaBelowThreshold

__all__ = [
    "OperatorSet",
    "EmbeddingConstants",
    "stiffness",
    "assemble",
    "omega_operators",
    "energy",
    "gradient",
    "energy_parts",
    "hessian_parts",
    "embedding_constants",
    "talenti_constant",
    "discrete_sobolev_constant",
    "sobolev_p_constant",
    "export_matrices",
]


def stiffness(grid: Grid) -> sp.csr_matrix:
    """Dirichlet Laplacian stiffness: the (2 dim + 1)-point star times ``h^(dim-2)``."""
    n = grid.n
    T = sp.diags([-np.ones(n - 1), 2.0 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")
    eye = sp.identity(n, format="csr")
    K = sp.csr_matrix((grid.size, grid.size))
    for axis in range(grid.dim):
        factors = [T if j == axis else eye for j in range(grid.dim)]
        term = factors[0]
        for f in factors[1:]:
            term = sp.kron(term, f, format="csr")
        K = K + term
    return (grid.h ** (grid.dim - 2) * K).tocsr()


@dataclass(frozen=True)
class OperatorSet:
    """Stiffness, mass and split weighted-mass matrices on one node set.

    ``K`` realizes ``int |grad u|^2``, ``M`` the ``L^2`` mass, ``Mplus`` and
    ``Mminus`` the weighted masses of ``(lambda a + a0)^+`` and ``^-``.
    ``potential`` holds the nodal values of ``lambda a + a0`` on the same
    node set.  ``index`` maps local nodes to the full grid when the set is a
    restriction (the Omega-subgrid); it is ``None`` for full-grid sets.
    """

    K: sp.csr_matrix
    M: sp.csr_matrix
    Mplus: sp.csr_matrix
    Mminus: sp.csr_matrix
    weight: float
    potential: Optional[np.ndarray] = None
    grid: Optional[Grid] = None
    well: Optional[PotentialWell] = None
    index: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.K.shape[0]

    @cached_property
    def Q(self) -> sp.csc_matrix:
        """Gram matrix of the ``E_lambda`` inner product."""
        return (self.K + self.Mplus).tocsc()

    @cached_property
    def _Q_lu(self):
        return spla.splu(self.Q)

    def solve_Q(self, g: np.ndarray) -> np.ndarray:
        return self._Q_lu.solve(np.asarray(g, dtype=float))

    def inner(self, u, v) -> float:
        return float(u @ (self.Q @ v))

    def norm(self, u) -> float:
        return math.sqrt(max(self.inner(u, u), 0.0))

    def D(self, u, v=None) -> float:
        v = u if v is None else v
        return float(u @ (self.Mminus @ v))

    def dual_norm(self, g) -> float:
        """``sqrt(g^T Q^{-1} g)``: the ``E_lambda^*`` norm of a residual."""
        return math.sqrt(max(float(g @ self.solve_Q(g)), 0.0))

    def h1_norm(self, u) -> float:
        return math.sqrt(float(u @ (self.K @ u)) + float(u @ (self.M @ u)))

    def lp_power(self, u, p: float) -> float:
        return self.weight * float(np.sum(np.abs(u) ** p))

    def extend(self, u: np.ndarray) -> np.ndarray:
        """Zero-extend a restricted vector to the full grid."""
        if self.index is None:
            return np.asarray(u, dtype=float)
        full = np.zeros(self.grid.size)
        full[self.index] = u
        return full

    def restrict(self, u: np.ndarray) -> np.ndarray:
        if self.index is None:
            return np.asarray(u, dtype=float)
        return np.asarray(u, dtype=float)[self.index]

    @property
    def minus_nodes(self) -> np.ndarray:
        """Mask of nodes in ``A_lambda`` (strictly negative potential)."""
        return self.Mminus.diagonal() > 0


def _diag(values) -> sp.csr_matrix:
    return sp.diags(np.asarray(values, dtype=float), 0, format="csr")


def assemble(grid: Grid, well: PotentialWell) -> OperatorSet:
    if grid.dim != well.dim:
        raise ValueError(f"grid dim {grid.dim} != well dim {well.dim}")
    if grid.halfwidth < well.outer_halfwidth:
        raise BoxTooSmall(
            f"box halfwidth {grid.halfwidth} < r_Omega + w = {well.outer_halfwidth}"
        )
    w = grid.weight
    V = well.potential(grid.coords)
    return OperatorSet(
        K=stiffness(grid),
        M=_diag(np.full(grid.size, w)),
        Mplus=_diag(w * np.maximum(V, 0.0)),
        Mminus=_diag(w * np.maximum(-V, 0.0)),
        weight=w,
        potential=V,
        grid=grid,
        well=well,
    )


def omega_operators(grid: Grid, well: PotentialWell) -> OperatorSet:
    """Operators of the limit problem on the open Omega-subgrid.

    The potential there is the constant ``a0``; nodes on the box faces of
    Omega act as the homogeneous Dirichlet boundary.
    """
    # nodes within rounding distance of a face belong to the boundary
    mask = well.in_omega(grid.coords, tol=1e-9 * grid.h)
    if not mask.any():
        raise ValueError("Omega-subgrid is empty")
    idx = np.flatnonzero(mask)
    K = stiffness(grid)[idx][:, idx].tocsr()
    w = grid.weight
    m = idx.size
    a0 = well.offset
    return OperatorSet(
        K=K,
        M=_diag(np.full(m, w)),
        Mplus=_diag(np.full(m, w * max(a0, 0.0))),
        Mminus=_diag(np.full(m, w * max(-a0, 0.0))),
        weight=w,
        potential=np.full(m, a0),
        grid=grid,
        well=well,
        index=idx,
    )


# -- the functional ----------------------------------------------------------

@dataclass
class EnergyParts:
    Ku: np.ndarray
    A: float        # u^T K u, the Dirichlet integral
    B: float        # ||u||_lambda^2
    D: float        # D_lambda(u, u)
    P: float        # h^dim sum |u|^p

    def energy(self, alpha: float, p: float) -> float:
        return 0.25 * alpha * self.A**2 + 0.5 * self.B - 0.5 * self.D - self.P / p

    def kirchhoff(self, alpha: float) -> float:
        """Nonlocal coefficient ``alpha * int |grad u|^2 + 1``."""
        return alpha * self.A + 1.0


def energy_parts(ops: OperatorSet, u: np.ndarray, p: float, nonlinear: bool = True) -> EnergyParts:
    u = np.asarray(u, dtype=float)
    Ku = ops.K @ u
    A = float(u @ Ku)
    B = A + float(u @ (ops.Mplus @ u))
    D = float(u @ (ops.Mminus @ u))
    P = ops.lp_power(u, p) if nonlinear else 0.0
    return EnergyParts(Ku, A, B, D, P)


def energy(ops: OperatorSet, params, u, nonlinear: bool = True) -> float:
    """``J(u) = alpha/4 A^2 + B/2 - D/2 - P/p`` with the notation of :class:`EnergyParts`."""
    return energy_parts(ops, u, params.p, nonlinear).energy(params.alpha, params.p)


def _gradient_from_parts(ops, params, u, parts, nonlinear=True):
    g = parts.kirchhoff(params.alpha) * parts.Ku + ops.Mplus @ u - ops.Mminus @ u
    if nonlinear:
        g = g - ops.weight * np.abs(u) ** (params.p - 2.0) * u
    return g


def gradient(ops: OperatorSet, params, u, nonlinear: bool = True) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    parts = energy_parts(ops, u, params.p, nonlinear)
    return _gradient_from_parts(ops, params, u, parts, nonlinear)


def energy_and_gradient(ops: OperatorSet, params, u):
    """Both from one evaluation of ``u^T K u`` (no drift between the two paths)."""
    u = np.asarray(u, dtype=float)
    parts = energy_parts(ops, u, params.p)
    return parts.energy(params.alpha, params.p), _gradient_from_parts(ops, params, u, parts), parts


def hessian_parts(ops: OperatorSet, params, u):
    """Hessian as ``H_sparse + 2 alpha (Ku)(Ku)^T``; returns ``(H_sparse, Ku)``."""
    u = np.asarray(u, dtype=float)
    Ku = ops.K @ u
    c = params.alpha * float(u @ Ku) + 1.0
    nl = ops.weight * (params.p - 1.0) * np.abs(u) ** (params.p - 2.0)
    H = c * ops.K + ops.Mplus - ops.Mminus - _diag(nl)
    return H.tocsc(), Ku


# -- embedding constants -----------------------------------------------------

@dataclass(frozen=True)
class EmbeddingConstants:
    S: float
    S_p: float
    d_lam: float
    lam: float
    measure_A_inf: float

    @property
    def l2_coefficient(self) -> float:
        """``||u||_2 <= d_lambda ||u||_lambda``."""
        return self.d_lam

    @property
    def lp_coefficient(self) -> float:
        """``||u||_p <= S_p^{-1/2} sqrt(1 + d_lambda^2) ||u||_lambda``."""
        return self.S_p ** -0.5 * math.sqrt(1.0 + self.d_lam**2)


def embedding_constants(well: PotentialWell, lam: float, S: float, S_p: float,
                        measure: Optional[float] = None) -> EmbeddingConstants:
    a0, a_inf = well.offset, well.floor_threshold
    if not (lam > 0 and lam > -a0 / a_inf):
        raise LambdaBelowThreshold(
            f"lambda={lam} must exceed max(0, -a0/a_inf) = {max(0.0, -a0 / a_inf)}"
        )
    if not (S > 0 and S_p > 0):
        raise ValueError("Sobolev constants must be positive")
    mA = measure_A_inf(well) if measure is None else measure
    d2 = max(mA ** (2.0 / 3.0) / S, 1.0 / (a0 + a_inf * lam))
    return EmbeddingConstants(S=S, S_p=S_p, d_lam=math.sqrt(d2), lam=lam, measure_A_inf=mA)


def talenti_constant(dim: int = 3) -> float:
    """Best constant of ``||grad u||_2^2 >= S ||u||_{2*}^2`` in ``R^dim``, ``dim >= 3``."""
    if dim < 3:
        raise ValueError("the critical Sobolev constant needs dim >= 3")
    N = dim
    return math.pi * N * (N - 2) * (math.gamma(N / 2) / math.gamma(N)) ** (2.0 / N)


def discrete_sobolev_constant(ops: OperatorSet, well: PotentialWell) -> float:
    """Grid-exact ``S`` making ``int_{A_inf} u^2 <= |A_inf|^{2/3} S^{-1} u^T K u``.

    ``S = |A_inf|^{2/3} / mu`` with ``mu`` the largest eigenvalue of the
    pencil ``(M restricted to A_inf, K)``.
    """
    a = well.a(ops.grid.coords) if ops.index is None else well.a(ops.grid.coords[ops.index])
    mask = (a < well.floor_threshold).astype(float)
    MA = _diag(ops.weight * mask)
    if ops.size <= 400:
        from scipy.linalg import eigh
        mu = eigh(MA.toarray(), ops.K.toarray(), eigvals_only=True)[-1]
    else:
        Klu = spla.splu(ops.K.tocsc())
        Kinv = spla.LinearOperator(ops.K.shape, matvec=Klu.solve, dtype=float)
        mu = spla.eigsh(MA, k=1, M=ops.K, Minv=Kinv, which="LA",
                        v0=np.ones(ops.size), tol=1e-12)[0][0]
    return measure_A_inf(well) ** (2.0 / 3.0) / float(mu)


def sobolev_p_constant(grid: Grid, p: float, tol: float = 1e-13, max_iter: int = 2000) -> float:
    """Discrete ``S_p = inf (||grad u||^2 + ||u||^2) / ||u||_p^2`` on ``grid``.

    The infimum is attained by the positive ground state of
    ``(K + M) u = h^dim |u|^{p-2} u``, found by Petviashvili iteration;
    then ``S_p = N^{1 - 2/p}`` with ``N = u^T (K + M) u``.
    """
    K = stiffness(grid)
    w = grid.weight
    H = (K + w * sp.identity(grid.size)).tocsc()
    lu = spla.splu(H)
    r2 = np.sum(grid.coords**2, axis=1)
    u = np.exp(-r2)
    gamma = (p - 1.0) / (p - 2.0)
    prev = math.inf
    for _ in range(max_iter):
        Nu = w * np.abs(u) ** (p - 2.0) * u
        stab = float(u @ (H @ u)) / float(u @ Nu)
        u = stab**gamma * lu.solve(Nu)
        val = float(u @ (H @ u)) / (w * float(np.sum(np.abs(u) ** p))) ** (2.0 / p)
        if abs(val - prev) <= tol * val and abs(stab - 1.0) <= 1e-10:
            break
        prev = val
    return val


def export_matrices(ops: OperatorSet, directory: str) -> list:
    """Write the four matrices in Matrix Market coordinate format."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for name in ("K", "M", "Mplus", "Mminus"):
        path = os.path.join(directory, f"{name}.mtx")
        scipy.io.mmwrite(path, getattr(ops, name))
        paths.append(path)
    return paths
