"""Computational domains and the box/ramp potential-well family.

The well is ``a(x) = 0`` on the box ``Omega = (-r, r)^dim``, rises through a
smooth cubic cutoff over a ramp of width ``w`` and is flat at ``a_cap``
beyond it.  Every set the theory needs (``A_inf``, ``A_lambda``) is a
dilated box, so its Lebesgue measure follows from the Steiner formula.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import InvalidGrid, InvalidParams, NonPositiveCap, ThresholdOrder

__all__ = [
    "Grid",
    "PotentialWell",
    "ProblemParams",
    "ValidationReport",
    "validate_well",
    "measure_A_lambda",
    "measure_A_inf",
    "lambda0",
    "smoothstep",
    "smoothstep_inverse",
    "dilated_box_volume",
    "check_zero_set",
]


def smoothstep(t):
    """Cubic cutoff ``t^2 (3 - 2t)`` clamped to [0, 1]."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def smoothstep_inverse(y: float) -> float:
    """Inverse of :func:`smoothstep` on [0, 1] (trigonometric closed form)."""
    if not 0.0 <= y <= 1.0:
        raise ValueError(f"smoothstep_inverse needs y in [0, 1], got {y}")
    return 0.5 - math.sin(math.asin(1.0 - 2.0 * y) / 3.0)


def _unit_ball_volume(m: int) -> float:
    return math.pi ** (m / 2.0) / math.gamma(m / 2.0 + 1.0)


def dilated_box_volume(dim: int, halfwidth: float, delta: float) -> float:
    """Volume of ``{x : dist(x, [-r, r]^dim) < delta}``.

    Steiner formula with the intrinsic volumes of a cube of side ``L``:
    ``V = sum_j C(dim, j) L^j kappa_{dim-j} delta^{dim-j}``.
    """
    side = 2.0 * halfwidth
    return sum(
        math.comb(dim, j) * side**j * _unit_ball_volume(dim - j) * delta ** (dim - j)
        for j in range(dim + 1)
    )


@dataclass(frozen=True)
class Grid:
    """Tensor lattice of interior nodes on the box ``[-R, R]^dim``.

    Homogeneous Dirichlet data sits on the box faces, so the ``n`` nodes per
    axis are ``-R + k h`` for ``k = 1..n`` with ``h = 2R/(n+1)``.
    """

    dim: int
    halfwidth: float
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise InvalidGrid(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.n < 8:
            raise InvalidGrid(f"need at least 8 points per axis, got {self.n}")
        if not (self.halfwidth > 0 and math.isfinite(self.halfwidth)):
            raise InvalidGrid(f"box halfwidth must be positive, got {self.halfwidth}")

    @classmethod
    def aligned(cls, dim: int, n: int, omega_halfwidth: float, min_halfwidth: float) -> "Grid":
        """Grid with ``R >= min_halfwidth`` whose nodes land exactly on ``+-r_Omega``.

        Node ``k`` sits on ``r_Omega`` iff ``R = r (n+1) / q`` with
        ``q = 2k - (n+1)``, so we take the largest admissible ``q`` of the
        parity of ``n+1``.
        """
        q = int(math.floor(omega_halfwidth * (n + 1) / min_halfwidth))
        if (q - (n + 1)) % 2:
            q -= 1
        if q < 2:
            raise InvalidGrid("grid too coarse to resolve Omega with aligned nodes")
        return cls(dim, omega_halfwidth * (n + 1) / q, n)

    @property
    def h(self) -> float:
        return 2.0 * self.halfwidth / (self.n + 1)

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def weight(self) -> float:
        """Nodal quadrature weight ``h^dim``."""
        return self.h**self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.halfwidth + self.h * np.arange(1, self.n + 1)

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape ``(size, dim)``, C-order raveling."""
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class PotentialWell:
    """Box-plateau well ``lambda a(x) + a0`` with smooth cubic ramp."""

    dim: int
    omega_halfwidth: float
    ramp_width: float
    cap: float
    floor_threshold: float
    offset: float
    lam: float = 1.0

    def with_lambda(self, lam: float) -> "PotentialWell":
        return replace(self, lam=float(lam))

    @property
    def omega_volume(self) -> float:
        return (2.0 * self.omega_halfwidth) ** self.dim

    @property
    def outer_halfwidth(self) -> float:
        """Halfwidth of the box beyond which ``a`` is flat at ``cap``."""
        return self.omega_halfwidth + self.ramp_width

    def distance_to_omega(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        excess = np.maximum(np.abs(x) - self.omega_halfwidth, 0.0)
        return np.sqrt(np.sum(excess * excess, axis=1))

    def a(self, x) -> np.ndarray:
        """Well profile ``a(x)``; exactly zero on the closed box."""
        return self.cap * smoothstep(self.distance_to_omega(x) / self.ramp_width)

    def potential(self, x) -> np.ndarray:
        """Full potential ``lambda a(x) + a0``."""
        return self.lam * self.a(x) + self.offset

    def in_omega(self, x, tol: float = 0.0) -> np.ndarray:
        """Open-box membership; points within ``tol`` of a face count as boundary."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.all(np.abs(x) < self.omega_halfwidth - tol, axis=1)


@dataclass(frozen=True)
class ProblemParams:
    p: float
    alpha: float

    def __post_init__(self):
        if not 4.0 < self.p < 6.0:
            raise InvalidParams(f"exponent must satisfy 4 < p < 6, got {self.p}")
        if not self.alpha > 0.0:
            raise InvalidParams(f"alpha must be positive, got {self.alpha}")


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)
    measure_A_inf: float = math.nan
    Lambda0: float = math.nan
    notes: list = field(default_factory=list)

    def add(self, name: str, passed: bool, detail: str = ""):
        self.checks.append((name, bool(passed), detail))

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)


def measure_A_inf(well: PotentialWell) -> float:
    """Exact measure of ``{a < a_inf}``; infinite if ``a_inf >= a_cap``."""
    if well.floor_threshold >= well.cap:
        return math.inf
    delta = well.ramp_width * smoothstep_inverse(well.floor_threshold / well.cap)
    return dilated_box_volume(well.dim, well.omega_halfwidth, delta)


def lambda0(well: PotentialWell) -> float:
    """``inf{lambda > 0 : |A_lambda| < inf}``; for this family ``-a0/a_cap``."""
    return -well.offset / well.cap if well.offset < 0 else 0.0


def measure_A_lambda(well: PotentialWell) -> float:
    """Exact measure of ``A_lambda = {lambda a + a0 < 0}`` (``math.inf`` if unbounded)."""
    if well.offset >= 0:
        return 0.0
    if well.lam <= lambda0(well):
        return math.inf
    level = -well.offset / (well.lam * well.cap)
    delta = well.ramp_width * smoothstep_inverse(level)
    return dilated_box_volume(well.dim, well.omega_halfwidth, delta)


def validate_well(well: PotentialWell) -> ValidationReport:
    if not well.cap > 0:
        raise NonPositiveCap(f"a_cap must be positive, got {well.cap}")
    if well.floor_threshold >= well.cap:
        raise ThresholdOrder(
            f"a_inf={well.floor_threshold} >= a_cap={well.cap}: A_inf is the whole space"
        )
    fields_ = (well.omega_halfwidth, well.ramp_width, well.cap,
               well.floor_threshold, well.offset, well.lam)
    if not all(math.isfinite(v) for v in fields_):
        raise InvalidParams("well parameters must be finite")

    rep = ValidationReport()
    rep.measure_A_inf = measure_A_inf(well)
    rep.Lambda0 = lambda0(well)
    # continuity holds by construction; nonnegativity needs a_cap > 0
    rep.add("well continuous and nonnegative", well.cap > 0 and well.ramp_width > 0,
            "cubic ramp between plateau levels 0 and a_cap")
    rep.add("|A_inf| finite", 0 < well.floor_threshold < well.cap and math.isfinite(rep.measure_A_inf),
            f"|A_inf| = {rep.measure_A_inf!r}")
    rep.add("Omega = int a^-1(0) bounded, closure = a^-1(0)",
            well.omega_halfwidth > 0 and well.ramp_width > 0,
            f"Omega = (-{well.omega_halfwidth}, {well.omega_halfwidth})^{well.dim}")
    rep.add("lambda > 0", well.lam > 0, f"lambda = {well.lam!r}")
    rep.notes.append("Omega is a coordinate box, so its boundary is not smooth (modeling deviation)")
    return rep


def check_zero_set(grid: Grid, well: PotentialWell) -> bool:
    """Nodewise check that ``a == 0`` exactly on the closed box and ``a > 0`` off it."""
    x = grid.coords
    a = well.a(x)
    closed = np.all(np.abs(x) <= well.omega_halfwidth, axis=1)
    return bool(np.all(a[closed] == 0.0) and np.all(a[~closed] > 0.0))
