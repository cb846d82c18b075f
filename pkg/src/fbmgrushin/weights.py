"""Assembly of the Malliavin weights for the three derivative formulae.

Each weight has the same skeleton: a stochastic integral against the
underlying Wiener process of the first driving noise, a stochastic
integral against the second one paired with a control vector, minus a
trace correction:

    total = term1 + term2 - trace.

All integrands that carry the singular t^(1/2-H) prefactor are summed
with exact cell averages of the prefactor and left-node values of the
smooth factor (right node on the first cell, whose left node is the
singular-convention slot).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fbm import KHinvTable, _avg_pow_weights, khinv_table, khinv_weight_nodes
from .fraccalc import FracConstants
from .grids import SampledFn
from .models import ModelSpec, SolutionPath

CONDITION_LIMIT = 1e12


class GramSingularError(RuntimeError):
    """The pointwise diffusion square was singular where (H3) needs it."""


@dataclass
class GramMatrix:
    """Left-point quadrature of int_0^T sigma sigma^*(X_u) du.

    ``condition`` drives the per-sample exclusion policy: samples beyond
    CONDITION_LIMIT are flagged by the harness, never silently
    regularized.  Fields carry leading batch axes in batched use.
    """

    A: np.ndarray
    inverse: np.ndarray
    condition: np.ndarray


@dataclass
class WeightBreakdown:
    term1: np.ndarray
    term2: np.ndarray
    trace: np.ndarray
    total: np.ndarray
    theorem: str


@dataclass
class DirectionVector:
    v1: np.ndarray
    v2: np.ndarray

    @classmethod
    def from_vector(cls, v, d1: int) -> "DirectionVector":
        v = np.asarray(v, dtype=float)
        return cls(v1=v[:d1], v2=v[d1:])


def ito_integral_singular(exponent: float, g: SampledFn, dW: np.ndarray):
    """sum_i w_i g(t_i*) dW_i with w_i the exact cell average of t^e.

    t_i* is the cell's left node except on the first cell, where the right
    node is used (the left one is the singular-convention slot).
    """
    if exponent <= -0.5:
        raise ValueError(f"prefactor exponent must exceed -1/2, got {exponent}")
    grid = g.grid
    if dW.shape[0] != grid.n:
        raise ValueError(f"expected {grid.n} increments, got {dW.shape[0]}")
    w = _avg_pow_weights(grid, exponent)
    gstar = g.values[:-1].copy()
    gstar[0] = g.values[1]
    extra = gstar.ndim - 1
    return np.einsum("i...,i...->...", w.reshape((grid.n,) + (1,) * extra) * gstar, dW)


def _sigma_of(model: ModelSpec):
    return model.coefficients["sigma" if model.kind == "grushin" else "sigma2"]


def gram_matrix(model: ModelSpec, sol: SolutionPath) -> GramMatrix:
    """A = dt * sum_{i<n} (sigma sigma^*)(X(t_i)), with inverse and condition."""
    sig = _sigma_of(model).eval(sol.X.values[:-1])
    A = model.grid.dt * np.einsum("i...rc,i...sc->...rs", sig, sig)
    condition = np.linalg.cond(A)
    safe = condition <= CONDITION_LIMIT
    Areg = np.where(safe[..., None, None], A, np.eye(model.d2)) if A.ndim > 2 \
        else (A if safe else np.eye(model.d2))
    inverse = np.linalg.inv(Areg)
    return GramMatrix(A=A, inverse=inverse, condition=np.asarray(condition))


def _weighted_dsig_dBt(model: ModelSpec, sol: SolutionPath, paths, v1):
    """int_0^T ((T-u)/T) grad_sigma(X_u) v1 dBt_u, left-point Young sum."""
    sig = _sigma_of(model)
    X = sol.X.values
    dBt = paths.Bt.values[1:] - paths.Bt.values[:-1]
    wt = (model.grid.T - model.grid.nodes[:-1]) / model.grid.T
    dsig = sig.dir_deriv(X[:-1], v1)
    extra = dsig.ndim - 3
    wts = wt.reshape((model.grid.n,) + (1,) * (extra + 2))
    return np.einsum("i...rc,i...c->...r", wts * dsig, dBt)


def vartheta(model: ModelSpec, sol: SolutionPath, paths, v,
             gram: GramMatrix) -> np.ndarray:
    """Control vector of the Gram-inverse route:
    A^{-1} (v2 + int ((T-u)/T) grad_sigma(X_u) v1 dBt_u)."""
    dv = DirectionVector.from_vector(v, model.d1)
    young = _weighted_dsig_dBt(model, sol, paths, dv.v1)
    return np.einsum("...rs,...s->...r", gram.inverse, dv.v2 + young)


def _khinv_stoch(gmat: np.ndarray, c: FracConstants, tab: KHinvTable,
                 dW: np.ndarray) -> np.ndarray:
    """sum_i [K_H^{-1}-applied matrix at t_i]^T dW_i (cell-adjusted)."""
    F = khinv_weight_nodes(gmat, c, tab)
    return np.einsum("i...ld,i...l->...d", F, dW)


def _trace_term(model: ModelSpec, sol: SolutionPath, v1, inverse=None,
                scale: float = 1.0, psi: np.ndarray | None = None):
    """Tr(inv * int ((T-u)/T) grad_sigma(X_u) v1 M(X_u) du) with M the
    transposed diffusion (or psi), left-point quadrature."""
    sig = _sigma_of(model)
    X = sol.X.values
    wt = (model.grid.T - model.grid.nodes[:-1]) / model.grid.T
    dsig = sig.dir_deriv(X[:-1], v1)
    mat = psi if psi is not None else np.swapaxes(sig.eval(X[:-1]), -1, -2)
    extra = dsig.ndim - 3
    wts = wt.reshape((model.grid.n,) + (1,) * (extra + 2))
    S = model.grid.dt * np.einsum("i...rl,i...ld->...rd", wts * dsig, mat)
    if inverse is None:
        return scale * np.einsum("...rr->...", S)
    return scale * np.einsum("...rd,...dr->...", inverse, S)


def weight_M(model: ModelSpec, sol: SolutionPath, paths, wiener, v,
             c: FracConstants) -> WeightBreakdown:
    """Gram-inverse route weight for the grushin model.

    term1 pairs the closed form c0 t^(1/2-H)/T v1 with dW; term2 pairs the
    control vector with the inverse-operator image of the antiderivative
    of sigma^*(X); the trace subtracts the divergence correction.
    """
    dv = DirectionVector.from_vector(v, model.d1)
    grid = model.grid
    tab = khinv_table(c, grid)
    gram = gram_matrix(model, sol)

    dWv = np.einsum("i...c,c->i...", wiener.dW, dv.v1)
    ones = SampledFn(grid, np.ones((grid.n + 1,) + dWv.shape[1:]))
    term1 = (c.c0 / grid.T) * ito_integral_singular(0.5 - c.H, ones, dWv)

    theta = vartheta(model, sol, paths, v, gram)
    sigT = np.swapaxes(_sigma_of(model).eval(sol.X.values), -1, -2)
    stoch = _khinv_stoch(sigT, c, tab, wiener.dWt)
    term2 = np.einsum("...d,...d->...", theta, stoch)

    trace = _trace_term(model, sol, dv.v1, inverse=gram.inverse)
    return WeightBreakdown(term1=term1, term2=term2, trace=trace,
                           total=term1 + term2 - trace, theorem="3.1")


def _psi(model: ModelSpec, X: np.ndarray) -> np.ndarray:
    """psi = sigma^* (sigma sigma^*)^{-1}, pointwise along the path."""
    sig = _sigma_of(model).eval(X)
    ss = np.einsum("...rc,...sc->...rs", sig, sig)
    try:
        inv = np.linalg.inv(ss)
    except np.linalg.LinAlgError as exc:
        raise GramSingularError(
            "sigma sigma^* singular at a node; the Holder-inverse "
            "assumption fails on this path") from exc
    if not np.all(np.isfinite(inv)):
        raise GramSingularError("sigma sigma^* inverse overflowed at a node")
    return np.einsum("...rc,...rs->...cs", sig, inv)


def weight_Mtilde(model: ModelSpec, sol: SolutionPath, paths, wiener, v,
                  c: FracConstants) -> WeightBreakdown:
    """Gram-free route weight for the grushin model (Holder certificate).

    Same skeleton as the Gram-inverse route with psi = sigma^*(sigma
    sigma^*)^{-1} in the second integral, the control vector divided by T
    instead of multiplied by the Gram inverse, and a Gram-free trace.
    """
    model.check_assumptions("3.2")
    dv = DirectionVector.from_vector(v, model.d1)
    grid = model.grid
    tab = khinv_table(c, grid)

    dWv = np.einsum("i...c,c->i...", wiener.dW, dv.v1)
    ones = SampledFn(grid, np.ones((grid.n + 1,) + dWv.shape[1:]))
    term1 = (c.c0 / grid.T) * ito_integral_singular(0.5 - c.H, ones, dWv)

    young = _weighted_dsig_dBt(model, sol, paths, dv.v1)
    theta = (dv.v2 + young) / grid.T
    psi = _psi(model, sol.X.values)
    stoch = _khinv_stoch(psi, c, tab, wiener.dWt)
    term2 = np.einsum("...d,...d->...", theta, stoch)

    trace = _trace_term(model, sol, dv.v1, inverse=None, scale=1.0 / grid.T,
                        psi=psi[:-1])
    return WeightBreakdown(term1=term1, term2=term2, trace=trace,
                           total=term1 + term2 - trace, theorem="3.2")


def _jacobian(coef, X: np.ndarray, d1: int) -> np.ndarray:
    """Full Jacobian (..., rows, d1) from directional derivatives."""
    cols = [coef.dir_deriv(X, np.eye(d1)[j]) for j in range(d1)]
    return np.stack(cols, axis=-1)


def weight_N(model: ModelSpec, sol: SolutionPath, paths, wiener, v,
             c: FracConstants) -> WeightBreakdown:
    """Weight for the general model (drifts, constant invertible sigma1).

    term1 applies the inverse operator entrywise to the matrix
    g1(u) = ((T-u)/T) grad_b1(X_u) + I/T, then contracts with sigma1^{-1},
    v1 and dW; term2 and the trace mirror the grushin route with sigma2.
    """
    model.check_assumptions("4.1")
    dv = DirectionVector.from_vector(v, model.d1)
    grid = model.grid
    tab = khinv_table(c, grid)
    gram = gram_matrix(model, sol)
    X = sol.X.values

    wt = (grid.T - grid.nodes) / grid.T
    jac_b1 = _jacobian(model.coefficients["b1"], X, model.d1)
    extra = jac_b1.ndim - 3
    wts = wt.reshape((grid.n + 1,) + (1,) * (extra + 2))
    g1 = wts * jac_b1 + np.eye(model.d1) / grid.T
    F1 = khinv_weight_nodes(g1, c, tab)
    s1inv = np.linalg.inv(model.sigma1_matrix())
    integrand = np.einsum("ab,i...bc,c->i...a", s1inv, F1, dv.v1)
    term1 = np.einsum("i...a,i...a->...", integrand, wiener.dW)

    # control vector with the extra drift contribution
    jac_b2v = model.coefficients["b2"].dir_deriv(X[:-1], dv.v1)
    wts_n = wt[:-1].reshape((grid.n,) + (1,) * (extra + 1))
    drift_part = grid.dt * np.sum(wts_n * jac_b2v, axis=0)
    young = _weighted_dsig_dBt(model, sol, paths, dv.v1)
    chi = np.einsum("...rs,...s->...r", gram.inverse, dv.v2 + drift_part + young)

    sigT = np.swapaxes(_sigma_of(model).eval(X), -1, -2)
    stoch = _khinv_stoch(sigT, c, tab, wiener.dWt)
    term2 = np.einsum("...d,...d->...", chi, stoch)

    trace = _trace_term(model, sol, dv.v1, inverse=gram.inverse)
    return WeightBreakdown(term1=term1, term2=term2, trace=trace,
                           total=term1 + term2 - trace, theorem="4.1")
