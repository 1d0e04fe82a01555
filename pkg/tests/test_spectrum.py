import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from kwl.domain import Grid
from kwl.errors import (DefiniteCase, DegenerateThreshold, LambdaBelowLambda0, SpectrumTooShort,
                        SubspaceMismatch, ZeroOffset)
from kwl.operators import assemble
from kwl.spectrum import (coercivity_split, dirichlet_spectrum, k0_star, level_dichotomy,
                          subspace_distance, well_spectrum, well_spectrum_flow)

from conftest import HALF_PI, interval_grid, steep_well


def dense_betas(ops, count):
    """Finite eigenvalues of ``Q x = beta Mminus x`` from a dense QZ solve."""
    vals = sla.eig(ops.Q.toarray(), ops.Mminus.toarray(), right=False)
    vals = vals[np.isfinite(vals)]
    vals = np.sort(vals.real[(np.abs(vals.imag) < 1e-8) & (vals.real > 0)])
    return vals[:count]


def small_case(lam, a0=-1.0, n=200):
    well = steep_well(a0, lam=lam, ramp=0.5, cap=10.0)
    grid = Grid.aligned(1, n, HALF_PI, 2.2)
    return grid, well, assemble(grid, well)


@pytest.mark.parametrize("a0", [-1.0, 2.0])
def test_interval_eigenvalues(a0):
    spec = dirichlet_spectrum(interval_grid(512), steep_well(a0), 5)
    exact = np.arange(1, 6) ** 2 / abs(a0)
    assert np.all(np.abs(spec.gammas - exact) / exact <= 5e-3)
    assert spec.multiplicities == [1] * 5


def test_interval_eigenvalue_order():
    hs, errs = [], []
    for n in (128, 256, 512):
        g = interval_grid(n)
        hs.append(g.h)
        errs.append(abs(dirichlet_spectrum(g, steep_well(-1.0), 3).gamma(3) - 9.0))
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert 1.8 <= order <= 2.2


def test_square_clustering():
    g = Grid.aligned(2, 81, HALF_PI, HALF_PI + 0.2)
    spec = dirichlet_spectrum(g, steep_well(-1.0, dim=2), 6)
    assert spec.multiplicities[:3] == [1, 2, 1]
    assert spec.gammas[:3] == pytest.approx([2.0, 5.0, 8.0], rel=2e-3)
    assert spec.basis(2).shape[1] == 3


def test_dirichlet_normalization_and_sign():
    g = interval_grid(300)
    spec = dirichlet_spectrum(g, steep_well(-2.0), 3)
    for i in range(1, 4):
        v = spec.eigenspace(i)[:, 0]
        assert 2.0 * g.weight * float(v @ v) == pytest.approx(1.0, rel=1e-12)
        assert v[np.argmax(np.abs(v))] > 0


def test_zero_offset_rejected():
    with pytest.raises(ZeroOffset):
        dirichlet_spectrum(interval_grid(100), steep_well(0.0), 3)


def test_k0_star_examples():
    assert k0_star([0.5, 2.0, 4.5]) == 2
    assert k0_star([2.0, 8.0, 18.0]) == 1
    with pytest.raises(DegenerateThreshold):
        k0_star([0.25, 1.0, 2.25])
    with pytest.raises(SpectrumTooShort):
        k0_star([0.1, 0.5])


def test_well_spectrum_errors():
    grid, well, ops = small_case(10.0, a0=1.0)
    with pytest.raises(DefiniteCase):
        well_spectrum(ops, well, 1)
    well = steep_well(-1.0, lam=0.05, ramp=0.5, cap=10.0)
    with pytest.raises(LambdaBelowLambda0):
        well_spectrum(assemble(grid, well), well, 1)


@pytest.mark.parametrize("lam", [10.0, 1e3])
def test_well_spectrum_against_dense_pencil(lam):
    _, well, ops = small_case(lam)
    ws = well_spectrum(ops, well, 3)
    assert ws.betas == pytest.approx(dense_betas(ops, 3), rel=1e-9)
    assert ws.diagnostics["max_residual"] < 1e-8


def test_beta_one_monotone_and_below_gamma():
    grid, well, _ = small_case(1.0)
    g1 = dirichlet_spectrum(grid, well, 2).gamma(1)
    betas = []
    for lam in (10.0, 100.0, 1000.0):
        w = well.with_lambda(lam)
        betas.append(well_spectrum(assemble(grid, w), w, 1).beta(1))
    assert all(b >= a - 1e-12 * a for a, b in zip(betas, betas[1:]))
    assert all(0 < b <= g1 for b in betas)


def test_flow_beta_one_at_1e4(flow):
    row = next(r for r in flow.rows if r.lam == 1e4 and r.m == 1)
    assert abs(row.beta - row.gamma_disc) <= 0.02 * row.gamma_disc


def test_flow_threads_do_not_change_results():
    grid, well, _ = small_case(1.0)
    lams = [10.0, 100.0, 1e3, 1e4]
    one = well_spectrum_flow(grid, well, lams, 2, threads=1)
    many = well_spectrum_flow(grid, well, lams, 2, threads=3)
    assert [r.as_csv() for r in one] == [r.as_csv() for r in many]


def test_flow_rejects_unsorted_lambdas():
    grid, well, _ = small_case(1.0)
    with pytest.raises(ValueError):
        well_spectrum_flow(grid, well, [100.0, 10.0], 1)


def test_coercivity_split_both_sides(indefinite):
    sc = indefinite
    low = coercivity_split(sc.wspec, sc.spec, sc.wspec.e(1), "low")
    high = coercivity_split(sc.wspec, sc.spec, sc.wspec.e(2), "high")
    assert low.holds and high.holds and not low.vacuous
    with pytest.raises(SubspaceMismatch):
        coercivity_split(sc.wspec, sc.spec, sc.wspec.e(1), "high")
    with pytest.raises(SubspaceMismatch):
        coercivity_split(sc.wspec, sc.spec, sc.wspec.e(1) + sc.wspec.e(2), "low")


def test_coercivity_split_vacuous_low_side():
    grid, well, _ = small_case(1e3, a0=-0.5)
    spec = dirichlet_spectrum(grid, well, 3)
    assert k0_star(spec) == 1
    ws = well_spectrum(assemble(grid, well), well, 1)
    res = coercivity_split(ws, spec, ws.e(1), "low")
    assert res.vacuous and res.holds


def test_level_dichotomy_square():
    well = steep_well(-1.0, lam=1e3, dim=2, ramp=0.3, cap=100.0)
    grid = Grid.aligned(2, 61, HALF_PI, HALF_PI + 0.4)
    ws = well_spectrum(assemble(grid, well), well, 2)
    assert ws.level_vectors(2).shape[1] == 2
    cases = level_dichotomy(ws, 2)
    assert len(cases) == 1 and cases[0][2] == "orthogonal"
    assert level_dichotomy(ws, 1) == []


@settings(max_examples=25, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda s: abs(s) > 1e-6), st.integers(0, 1000))
def test_subspace_distance_scale_free(scale, seed):
    _, _, ops = small_case(10.0, n=60)
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((ops.size, 2))
    u = B @ rng.standard_normal(2)
    assert subspace_distance(ops, scale * u, B) <= 1e-6
    w = rng.standard_normal(ops.size)
    assert subspace_distance(ops, scale * w, B) == pytest.approx(subspace_distance(ops, w, B), rel=1e-9)
    assert 0.0 <= subspace_distance(ops, w, B) <= 1.0 + 1e-12
