import numpy as np
import pytest

from fbmgrushin import (FbmPath, SampledFn, TimeGrid, compute_constants,
                        draw_wiener_pair, gram_matrix, ito_integral_singular,
                        sample_volterra, solve, vartheta, weight_M,
                        weight_Mtilde, weight_N, young_integral)
from tests.conftest import make_general, make_grushin


def _setup(model, seed, indices):
    c = compute_constants(model.H)
    wp = draw_wiener_pair(model.grid, model.d1, model.l, seed, indices)
    paths = FbmPath(B=sample_volterra(c, model.grid, wp.dW),
                    Bt=sample_volterra(c, model.grid, wp.dWt))
    sol = solve(model, paths)
    return c, wp, paths, sol


# ---------------------------------------------------------------------------
# singular Ito sums

def test_ito_exponent_zero_telescopes():
    grid = TimeGrid(1.0, 64)
    wp = draw_wiener_pair(grid, 1, 1, 1, [0, 1, 2])
    g = SampledFn(grid, np.ones((65, 3)))
    out = ito_integral_singular(0.0, g, wp.dW[..., 0])
    assert np.allclose(out, np.sum(wp.dW[..., 0], axis=0))


def test_ito_zero_increments():
    grid = TimeGrid(1.0, 64)
    g = SampledFn(grid, np.ones(65))
    assert ito_integral_singular(-0.25, g, np.zeros(64)) == 0.0


def test_ito_rejects_steep_exponent():
    grid = TimeGrid(1.0, 64)
    with pytest.raises(ValueError):
        ito_integral_singular(-0.5, SampledFn(grid, np.ones(65)), np.zeros(64))


def test_ito_isometry():
    # second moment of sum w_i dW_i matches int_0^T t^(2e) dt up to the
    # (computable) cell-average deficit
    H, N, n = 0.75, 10000, 256
    e = 0.5 - H
    grid = TimeGrid(1.0, n)
    wp = draw_wiener_pair(grid, 1, 1, 77, np.arange(N))
    g = SampledFn(grid, np.ones((n + 1, N)))
    vals = ito_integral_singular(e, g, wp.dW[..., 0])
    target = grid.T ** (2 - 2 * H) / (2 - 2 * H)
    from fbmgrushin.fbm import _avg_pow_weights
    w = _avg_pow_weights(grid, e)
    allowance = abs(np.sum(w ** 2) * grid.dt - target)
    m2 = np.mean(vals ** 2)
    se = np.std(vals ** 2, ddof=1) / np.sqrt(N)
    assert abs(m2 - target) <= 4 * se + allowance


# ---------------------------------------------------------------------------
# Gram matrix and control vector

def test_gram_constant_sigma():
    model = make_grushin(n=64, sigma=("constant", (2.0,)))
    _, _, paths, sol = _setup(model, 3, [0, 1])
    gram = gram_matrix(model, sol)
    assert np.allclose(gram.A, 4.0)          # int_0^1 sigma^2 du = 4
    assert np.allclose(gram.inverse, 0.25)
    assert np.all(gram.condition == 1.0)


def test_vartheta_constant_sigma_reduces():
    model = make_grushin(n=64, sigma=("constant", (2.0,)))
    _, _, paths, sol = _setup(model, 5, [0, 1])
    gram = gram_matrix(model, sol)
    th = vartheta(model, sol, paths, np.array([1.0, 3.0]), gram)
    assert np.allclose(th, 3.0 / 4.0)


def test_vartheta_zero_direction():
    model = make_grushin(n=64)
    _, _, paths, sol = _setup(model, 7, [0, 1])
    th = vartheta(model, sol, paths, np.zeros(2), gram_matrix(model, sol))
    assert np.allclose(th, 0.0)


def test_vartheta_compositional_oracle():
    # scalar case: manually compose the Young sum and the Gram reciprocal
    model = make_grushin(n=64)
    _, _, paths, sol = _setup(model, 9, [0])
    v = np.array([1.3, -0.4])
    gram = gram_matrix(model, sol)
    th = vartheta(model, sol, paths, v, gram)
    wt = (1.0 - model.grid.nodes[:-1])
    sig = model.coefficients["sigma"]
    dsig = sig.dir_deriv(sol.X.values[:-1], v[:1])[..., 0, 0]
    young = SampledFn(model.grid, np.concatenate([
        wt * dsig[:, 0], [0.0]]))
    dBt = paths.Bt.values[:, 0, 0]
    brute = np.sum(young.values[:-1] * (dBt[1:] - dBt[:-1]))
    expect = (v[1] + brute) / gram.A[0, 0, 0]
    assert abs(th[0, 0] - expect) <= 1e-12


# ---------------------------------------------------------------------------
# weights: structure and exact reductions

def test_weight_M_classical_brownian():
    # H = 1/2, sigma = 1: M = <v1, W_T>/T + <v2, Wt_T>/T, no trace
    model = make_grushin(H=0.5, n=64, sigma=("constant", (1.0,)))
    c, wp, paths, sol = _setup(model, 11, [0, 1, 2])
    v = np.array([1.0, 2.0])
    wb = weight_M(model, sol, paths, wp, v, c)
    WT = np.sum(wp.dW[:, :, 0], axis=0)
    WtT = np.sum(wp.dWt[:, :, 0], axis=0)
    assert np.allclose(wb.total, WT + 2.0 * WtT, atol=1e-12)
    assert np.allclose(wb.trace, 0.0)
    # Mtilde coincides for constant isotropic sigma
    wbt = weight_Mtilde(model, sol, paths, wp, v, c)
    assert np.allclose(wbt.total, wb.total, atol=1e-12)


def test_weight_collapse_at_half_with_varying_sigma():
    # at H = 1/2 the applicator is the identity; weight_M must equal the
    # classical Bismut structure assembled by hand with the same
    # first-cell convention
    model = make_grushin(H=0.5, n=64)
    c, wp, paths, sol = _setup(model, 13, [0, 1])
    v = np.array([0.7, -1.1])
    wb = weight_M(model, sol, paths, wp, v, c)
    sig = model.coefficients["sigma"]
    sigv = sig.eval(sol.X.values)[..., 0, 0]
    gstar = sigv[:-1].copy()
    gstar[0] = sigv[1]
    gram = gram_matrix(model, sol)
    theta = vartheta(model, sol, paths, v, gram)[..., 0]
    term1 = 0.7 * np.sum(wp.dW[:, :, 0], axis=0)
    term2 = theta * np.sum(gstar * wp.dWt[:, :, 0], axis=0)
    wt = (1.0 - model.grid.nodes[:-1])[:, None]
    dsig = sig.dir_deriv(sol.X.values[:-1], v[:1])[..., 0, 0]
    trace = (model.grid.dt * np.sum(wt * dsig * sigv[:-1], axis=0)
             / gram.A[..., 0, 0])
    assert np.allclose(wb.term1, term1, atol=1e-12)
    assert np.allclose(wb.term2, term2, atol=1e-12)
    assert np.allclose(wb.trace, trace, atol=1e-12)


def test_weights_linear_in_v():
    model = make_grushin(n=64)
    c, wp, paths, sol = _setup(model, 17, [0, 1])
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    for fn in (weight_M, weight_Mtilde):
        w1 = fn(model, sol, paths, wp, e1, c).total
        w2 = fn(model, sol, paths, wp, e2, c).total
        w = fn(model, sol, paths, wp, 2.0 * e1 - 0.5 * e2, c).total
        assert np.max(np.abs(w - (2.0 * w1 - 0.5 * w2))) <= 1e-12


def test_weight_N_linear_in_v():
    model = make_general(n=64)
    c, wp, paths, sol = _setup(model, 19, [0, 1])
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    w1 = weight_N(model, sol, paths, wp, e1, c).total
    w2 = weight_N(model, sol, paths, wp, e2, c).total
    w = weight_N(model, sol, paths, wp, -1.5 * e1 + 0.25 * e2, c).total
    assert np.max(np.abs(w - (-1.5 * w1 + 0.25 * w2))) <= 1e-12


def test_weight_zero_direction():
    model = make_grushin(n=64)
    c, wp, paths, sol = _setup(model, 23, [0, 1])
    for fn in (weight_M, weight_Mtilde):
        assert np.all(fn(model, sol, paths, wp, np.zeros(2), c).total == 0.0)


def test_weight_N_equals_M_when_degenerate():
    from fbmgrushin import catalog_lookup
    from fbmgrushin.models import ModelSpec
    mg = make_grushin(n=64)
    mr = ModelSpec("general", 1, 1, 1, [0.0], [0.0],
                   {"b1": catalog_lookup("constant", [0.0], (1,)),
                    "b2": catalog_lookup("constant", [0.0], (1,)),
                    "sigma1": catalog_lookup("identity", (), (1, 1)),
                    "sigma2": mg.coefficients["sigma"]}, 0.75, mg.grid)
    c, wp, paths, _ = _setup(mg, 29, [0, 1, 2])
    sg = solve(mg, paths)
    sr = solve(mr, paths)
    v = np.array([1.0, 1.0])
    wm = weight_M(mg, sg, paths, wp, v, c)
    wn = weight_N(mr, sr, paths, wp, v, c)
    assert np.max(np.abs(wm.total - wn.total)) <= 1e-12


def test_weight_Mtilde_structure_collapse():
    # grad sigma = 0: term2 pairs v2/T with the psi-route integral, trace 0
    model = make_grushin(n=64, sigma=("constant", (2.0,)))
    c, wp, paths, sol = _setup(model, 31, [0, 1])
    v = np.array([0.0, 1.0])
    wb = weight_Mtilde(model, sol, paths, wp, v, c)
    assert np.allclose(wb.trace, 0.0)
    from fbmgrushin.fbm import khinv_table, khinv_weight_nodes
    tab = khinv_table(c, model.grid)
    psi = np.full((65, 2, 1, 1), 0.5)  # sigma^* (sigma sigma^*)^{-1} = 1/2
    F = khinv_weight_nodes(psi, c, tab)
    expect = np.einsum("inld,inl->nd", F, wp.dWt)[:, 0] / model.grid.T
    assert np.allclose(wb.term2, expect, atol=1e-12)


def test_weight_Mtilde_rejects_uncertified_sigma():
    from fbmgrushin.models import AssumptionError
    model = make_grushin(n=64, sigma=("affine", (0.0, 1.0)))
    c, wp, paths, sol = _setup(model, 37, [0])
    with pytest.raises(AssumptionError):
        weight_Mtilde(model, sol, paths, wp, np.array([1.0, 0.0]), c)


def test_term1_isometry():
    # var(term1) = |v1|^2 c0^2 / T^2 * int_0^T t^(1-2H) dt (+ allowance)
    model = make_grushin(n=256)
    c, wp, paths, sol = _setup(model, 41, np.arange(10000))
    v = np.array([1.0, 0.0])
    wb = weight_M(model, sol, paths, wp, v, c)
    H = model.H
    target = c.c0 ** 2 * 1.0 ** (2 - 2 * H) / (2 - 2 * H)
    from fbmgrushin.fbm import _avg_pow_weights
    w = _avg_pow_weights(model.grid, 0.5 - H)
    allowance = c.c0 ** 2 * abs(np.sum(w ** 2) * model.grid.dt
                                - 1.0 / (2 - 2 * H))
    m2 = np.mean(wb.term1 ** 2)
    se = np.std(wb.term1 ** 2, ddof=1) / np.sqrt(wb.term1.size)
    assert abs(m2 - target) <= 4 * se + allowance


def test_null_expectations():
    # f = 1: E[weight] = 0 within 4 stderr for all three weights
    v = np.array([1.0, 1.0])
    for model, fn in ((make_grushin(n=256), weight_M),
                      (make_grushin(n=256), weight_Mtilde),
                      (make_general(n=256), weight_N)):
        c, wp, paths, sol = _setup(model, 43, np.arange(4000))
        tot = fn(model, sol, paths, wp, v, c).total
        se = np.std(tot, ddof=1) / np.sqrt(tot.size)
        assert abs(np.mean(tot)) <= 4 * se, fn.__name__
