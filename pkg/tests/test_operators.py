import math

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from kwl.domain import Grid, PotentialWell, ProblemParams, measure_A_inf
from kwl.errors import BoxTooSmall, LambdaBelowThreshold
from kwl.operators import (OperatorSet, assemble, discrete_sobolev_constant, embedding_constants,
                           energy, energy_and_gradient, energy_parts, export_matrices, gradient,
                           hessian_parts, omega_operators, sobolev_p_constant, stiffness,
                           talenti_constant)

from conftest import FD_CASES, HALF_PI, fd_gradient_errors, fd_ops, steep_well
from oracles import soliton_sobolev_constant


def one_node_ops():
    one = sp.csr_matrix(np.ones((1, 1)))
    return OperatorSet(K=2.0 * one, M=one, Mplus=0.0 * one, Mminus=0.0 * one, weight=1.0)


def test_stiffness_stencil():
    g = Grid(1, 1.0, 8)
    K = stiffness(g).toarray() * g.h
    assert np.allclose(np.diag(K), 2.0)
    assert np.allclose(np.diag(K, 1), -1.0) and np.allclose(np.diag(K, -1), -1.0)
    assert np.count_nonzero(np.triu(K, 2)) == 0
    assert (stiffness(g) != stiffness(g).T).nnz == 0


def test_dirichlet_integral_of_cosine_converges_order_two():
    errs, hs = [], []
    for n in (200, 400, 800):
        g = Grid.aligned(1, n, HALF_PI, 2.0)
        x = g.axis
        u = np.where(np.abs(x) < HALF_PI, np.cos(x), 0.0)
        errs.append(abs(float(u @ (stiffness(g) @ u)) - HALF_PI))
        hs.append(g.h)
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert errs[-1] < 1e-4
    assert 1.8 <= order <= 2.2


def test_box_too_small():
    with pytest.raises(BoxTooSmall):
        assemble(Grid(1, 1.6, 50), steep_well(-1.0, ramp=0.5))


def test_D_vanishes_when_offset_nonnegative():
    ops = assemble(Grid.aligned(1, 101, HALF_PI, 2.0), steep_well(0.0, lam=10.0))
    u = np.random.default_rng(1).standard_normal(ops.size)
    assert ops.D(u) == 0.0
    assert ops.Mminus.nnz == 0 or not np.any(ops.Mminus.data)


def test_energy_zero_and_one_node_example():
    ops = one_node_ops()
    params = ProblemParams(5.0, 1.0)
    assert energy(ops, params, np.zeros(1)) == 0.0
    assert energy(ops, params, np.ones(1)) == pytest.approx(1.8, abs=1e-15)
    assert np.all(gradient(ops, params, np.zeros(1)) == 0.0)


@pytest.mark.parametrize("t", [0.5, 2.0])
def test_energy_scaling(t):
    _, dim, n, a0, lam, params = FD_CASES[1]
    ops = fd_ops(dim, n, a0, lam)
    u = np.random.default_rng(3).standard_normal(ops.size) * 0.1
    pt = energy_parts(ops, u, params.p)
    expect = (params.alpha / 4 * t**4 * pt.A**2 + t * t / 2 * (pt.B - pt.D)
              - t**params.p / params.p * pt.P)
    assert energy(ops, params, t * u) == pytest.approx(expect, rel=1e-12)


@pytest.mark.parametrize("name,dim,n,a0,lam,params", FD_CASES, ids=[c[0] for c in FD_CASES])
def test_gradient_finite_differences(name, dim, n, a0, lam, params):
    errs = fd_gradient_errors(fd_ops(dim, n, a0, lam), params)
    assert errs.max() <= 1e-5


def test_gradient_linear_part():
    _, dim, n, a0, lam, params = FD_CASES[0]
    ops = fd_ops(dim, n, a0, lam)
    u = np.sin(np.linspace(0, 3, ops.size))
    A = float(u @ (ops.K @ u))
    expect = (params.alpha * A + 1.0) * (ops.K @ u) + ops.Mplus @ u - ops.Mminus @ u
    assert np.array_equal(gradient(ops, params, u, nonlinear=False), expect)


def test_energy_and_gradient_share_one_evaluation():
    _, dim, n, a0, lam, params = FD_CASES[2]
    ops = fd_ops(dim, n, a0, lam)
    u = np.random.default_rng(5).standard_normal(ops.size) * 0.2
    J, g, parts = energy_and_gradient(ops, params, u)
    assert J == energy(ops, params, u)
    assert np.array_equal(g, gradient(ops, params, u))
    assert parts.kirchhoff(params.alpha) == params.alpha * float(u @ (ops.K @ u)) + 1.0


def test_hessian_matches_gradient_differences():
    _, dim, n, a0, lam, params = FD_CASES[1]
    ops = fd_ops(dim, n, a0, lam)
    rng = np.random.default_rng(9)
    u, v = rng.standard_normal(ops.size) * 0.3, rng.standard_normal(ops.size)
    H, Ku = hessian_parts(ops, params, u)
    Hv = H @ v + 2 * params.alpha * Ku * float(Ku @ v)
    eps = 1e-6
    fd = (gradient(ops, params, u + eps * v) - gradient(ops, params, u - eps * v)) / (2 * eps)
    assert np.linalg.norm(fd - Hv) <= 1e-6 * np.linalg.norm(Hv)


def test_embedding_constants_examples():
    well = steep_well(-1.0)
    c = embedding_constants(well, 2.0, 5.0, 1.0, measure=1.0)
    assert c.d_lam == 1.0
    assert c.lp_coefficient == pytest.approx(math.sqrt(2.0))
    far = embedding_constants(well, 1e15, 5.0, 1.0, measure=1.0)
    assert far.d_lam == pytest.approx(math.sqrt(0.2))
    with pytest.raises(LambdaBelowThreshold):
        embedding_constants(well, 1.0, 5.0, 1.0, measure=1.0)


def test_l2_embedding_and_D_bound_on_random_vectors():
    well = steep_well(-1.0, lam=50.0, ramp=0.5, cap=10.0)
    ops = assemble(Grid.aligned(1, 301, HALF_PI, 2.2), well)
    S = discrete_sobolev_constant(ops, well)
    d = embedding_constants(well, well.lam, S, 1.0).d_lam
    in_A_inf = (well.a(ops.grid.coords) < well.floor_threshold).astype(float)
    rng = np.random.default_rng(11)
    for _ in range(50):
        u = rng.standard_normal(ops.size) * rng.uniform(0.01, 10)
        l2 = math.sqrt(float(u @ (ops.M @ u)))
        assert l2 <= d * ops.norm(u) * (1 + 1e-12)
        assert ops.D(u) <= abs(well.offset) * ops.weight * float(np.sum(in_A_inf * u * u)) * (1 + 1e-12)


def test_talenti_closed_form():
    assert talenti_constant(3) == pytest.approx(3 * (math.pi / 2) ** (4 / 3), rel=1e-14)
    with pytest.raises(ValueError):
        talenti_constant(2)


@pytest.mark.parametrize("p", [4.5, 5.0])
def test_sobolev_p_constant_against_soliton(p):
    exact = soliton_sobolev_constant(p)
    coarse = sobolev_p_constant(Grid(1, 20.0, 1000), p)
    fine = sobolev_p_constant(Grid(1, 20.0, 4000), p)
    assert abs(fine - exact) < abs(coarse - exact)
    assert fine == pytest.approx(exact, rel=1e-4)


def test_omega_operators_use_open_subgrid():
    g = Grid.aligned(1, 4000, HALF_PI, 2.0)
    om = omega_operators(g, steep_well(-2.0))
    x = g.coords[om.index, 0]
    assert np.all(np.abs(x) < HALF_PI - 1e-9 * g.h)
    # the two nodes on the faces are excluded
    assert om.size == np.count_nonzero(np.abs(g.axis) < HALF_PI + 1e-9 * g.h) - 2
    assert np.allclose(om.Mminus.diagonal(), 2.0 * g.weight)


def test_export_matrices_roundtrip(tmp_path):
    ops = fd_ops(1, 50, -1.0, 10.0)
    paths = export_matrices(ops, str(tmp_path))
    assert len(paths) == 4
    K = scipy.io.mmread(paths[0]).tocsr()
    assert abs(K - ops.K).max() <= 1e-14 * abs(ops.K).max()


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 10.0), st.floats(4.1, 5.9), st.integers(0, 2**31 - 1))
def test_random_directions_gradient_property(alpha, p, seed):
    ops = fd_ops(1, 60, -1.0, 30.0)
    errs = fd_gradient_errors(ops, ProblemParams(p, alpha), count=2, seed=seed)
    assert errs.max() <= 1e-5


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(-5.0, 5.0))
def test_measure_A_inf_independent_of_offset(lam, a0):
    w = PotentialWell(2, 1.0, 0.3, 4.0, 1.0, a0, lam)
    assert measure_A_inf(w) == measure_A_inf(w.with_lambda(1.0))
