"""Fractional Brownian motion: covariance, Volterra kernel, samplers,
and the closed-form inverse-operator applicator.

The kernel uses the H > 1/2 integral form

    K_H(t, s) = cK * s^(1/2-H) * int_s^t (u-s)^(H-3/2) u^(H-1/2) du,

whose correctness is enforced by the covariance-factorization invariant
rather than by special-function evaluation.  At H = 1/2 the kernel is the
indicator of [0, t) and every operator here collapses to its classical
Brownian counterpart.

Sampling always produces the underlying Wiener increments together with
the fBm path built from them through the same kernel table, so weights
integrating against dW stay consistent with paths integrating against dB.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .fraccalc import FracConstants, compute_constants
from .grids import SampledFn, TimeGrid

_CACHE_ENV = "FBMGRUSHIN_CACHE_DIR"
_GAUSS_CELL = 4          # Gauss-Legendre points per cell for the kappa table
_INNER_GJ = 16           # Gauss-Jacobi order for the kernel inner integral
_INNER_GL = 12           # Gauss-Legendre order per log panel
_PANEL_RATIO = 8.0       # geometric growth of the log panels
_CHUNK = 1 << 20

_table_cache: dict = {}
_rules_cache: dict = {}


class FactorizationError(RuntimeError):
    """Covariance factorization failed even after diagonal jitter."""


def check_hurst(H: float) -> float:
    if not 0.5 <= H < 1.0:
        raise ValueError(f"Hurst parameter must lie in [1/2, 1), got {H}")
    return float(H)


def covariance(H: float, t, s):
    """R_H(t, s) = (t^2H + s^2H - |t-s|^2H) / 2."""
    check_hurst(H)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(t < 0) or np.any(s < 0):
        raise ValueError("covariance is defined for nonnegative times")
    out = 0.5 * (t ** (2 * H) + s ** (2 * H) - np.abs(t - s) ** (2 * H))
    return float(out) if out.ndim == 0 else out


def _inner_rules(H: float):
    rules = _rules_cache.get(H)
    if rules is None:
        xj, wj = roots_jacobi(_INNER_GJ, 0.0, H - 1.5)
        thj = 0.5 * (xj + 1.0)
        wj = wj * 0.5 ** (H - 0.5)
        xl, wl = roots_legendre(_INNER_GL)
        rules = (thj, wj, xl, wl)
        _rules_cache[H] = rules
    return rules


def _kernel_inner(H: float, t: np.ndarray, s: np.ndarray) -> np.ndarray:
    """int_s^t (u-s)^(H-3/2) u^(H-1/2) du, elementwise, for 0 < s < t.

    Split at u = 2s: the near-singular piece becomes a Gauss-Jacobi sum
    with an analytic smooth factor, the tail is Gauss-Legendre on
    geometrically graded log panels.  Relative accuracy ~1e-12.
    """
    thj, wj, xl, wl = _inner_rules(H)
    tau1 = np.minimum(1.0, t / s - 1.0)
    out = (s ** (2 * H - 1.0) * tau1 ** (H - 0.5)
           * ((1.0 + tau1[..., None] * thj) ** (H - 0.5) @ wj))
    j = 0
    while True:
        a = 2.0 * s * _PANEL_RATIO ** j
        active = a < t
        if not active.any():
            break
        b = np.minimum(_PANEL_RATIO * a, t)
        with np.errstate(invalid="ignore"):
            la = np.log(np.where(active, a, 1.0))
            lb = np.log(np.where(active, b, 2.0))
        half = 0.5 * (lb - la)
        x = half[..., None] * xl + (0.5 * (la + lb))[..., None]
        u = np.exp(x)
        gap = np.maximum(u - s[..., None], 1e-300)  # inactive rows are discarded
        contrib = half * ((gap ** (H - 1.5) * u ** (H + 0.5)) @ wl)
        out += np.where(active, contrib, 0.0)
        j += 1
    return out


def kernel_KH(c: FracConstants, t, s):
    """Volterra kernel K_H(t, s); 0 outside the support 0 < s < t.

    At H = 1/2 this is the indicator of the support.
    """
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    scalar = t.ndim == 0 and s.ndim == 0
    t, s = np.broadcast_arrays(np.atleast_1d(t), np.atleast_1d(s))
    out = np.zeros(t.shape)
    inside = (s > 0) & (s < t)
    if c.H == 0.5:
        out[inside] = 1.0
    elif inside.any():
        ti, si = t[inside], s[inside]
        out[inside] = c.cK * si ** (0.5 - c.H) * _kernel_inner(c.H, ti, si)
    return float(out[0]) if scalar else out


def factorization_check(c: FracConstants, times, resolution: int = 4096):
    """Rows (t, s, quadrature, covariance, rel_err) over a test lattice.

    Checks int_0^(t^s) K_H(t,r) K_H(s,r) dr against the covariance by
    product quadrature: the integrable endpoint power r^(1-2H) is
    integrated exactly per cell, the smooth remainder at cell midpoints.
    """
    times = np.asarray(times, dtype=float)
    rows = []
    for t in times:
        for s in times:
            m = min(t, s)
            edges = np.linspace(0.0, m, resolution + 1)
            mids = 0.5 * (edges[:-1] + edges[1:])
            if c.H == 0.5:
                val = m
            else:
                wcell = (edges[1:] ** (2 - 2 * c.H)
                         - edges[:-1] ** (2 - 2 * c.H)) / (2 - 2 * c.H)
                smooth = (c.cK ** 2 * _kernel_inner(c.H, np.full_like(mids, t), mids)
                          * _kernel_inner(c.H, np.full_like(mids, s), mids))
                val = float(np.sum(wcell * smooth))
            exact = covariance(c.H, t, s)
            rows.append((float(t), float(s), val, exact,
                         abs(val - exact) / abs(exact)))
    return rows


# ---------------------------------------------------------------------------
# kernel weight table (Volterra sampling)

def _build_kappa(c: FracConstants, grid: TimeGrid, m: int) -> np.ndarray:
    """kappa[i, k] = (1/dt) int_{t_k}^{t_{k+1}} K_H(t_i, s) ds, k < i."""
    n = grid.n
    dt = grid.dt
    kappa = np.zeros((n + 1, n))
    if c.H == 0.5:
        kappa[1:] = np.tril(np.ones((n, n)))
        return kappa
    xg, wg = roots_legendre(m)
    ii, kk = np.tril_indices(n, k=0)          # pairs with k <= i-1 for node i = ii+1
    ti = grid.nodes[ii + 1]
    tk = grid.nodes[kk]
    vals = np.zeros(ii.shape)
    for q in range(m):
        sq = tk + dt * 0.5 * (xg[q] + 1.0)
        acc = np.empty_like(sq)
        for lo in range(0, sq.size, _CHUNK):
            hi = min(lo + _CHUNK, sq.size)
            acc[lo:hi] = _kernel_inner(c.H, ti[lo:hi], sq[lo:hi])
        vals += 0.5 * wg[q] * c.cK * sq ** (0.5 - c.H) * acc
    kappa[ii + 1, kk] = vals
    return kappa


def save_kappa_table(path: str, H: float, T: float, n: int, m: int,
                     kappa: np.ndarray) -> None:
    """Binary cache: header (H, T as f64 LE; n, m as i64 LE), then the
    row-major (n+1) x n float64 LE table."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<ddqq", H, T, n, m))
        fh.write(np.ascontiguousarray(kappa, dtype="<f8").tobytes())


def load_kappa_table(path: str):
    with open(path, "rb") as fh:
        H, T, n, m = struct.unpack("<ddqq", fh.read(32))
        data = np.frombuffer(fh.read(), dtype="<f8")
    kappa = data.reshape(n + 1, n).astype(float)
    return H, T, int(n), int(m), kappa


def volterra_table(c: FracConstants, grid: TimeGrid, m: int = _GAUSS_CELL) -> np.ndarray:
    """Cached kappa table for (H, T, n, m); read-only once built."""
    key = (c.H, grid.T, grid.n, m)
    kappa = _table_cache.get(key)
    if kappa is not None:
        return kappa
    cache_dir = os.environ.get(_CACHE_ENV)
    fname = None
    if cache_dir:
        fname = os.path.join(
            cache_dir, f"kappa_H{c.H:.10g}_T{grid.T:.10g}_n{grid.n}_m{m}.bin")
        if os.path.exists(fname):
            _, _, _, _, kappa = load_kappa_table(fname)
            _table_cache[key] = kappa
            return kappa
    kappa = _build_kappa(c, grid, m)
    kappa.setflags(write=False)
    _table_cache[key] = kappa
    if fname:
        os.makedirs(cache_dir, exist_ok=True)
        save_kappa_table(fname, c.H, grid.T, grid.n, m, kappa)
    return kappa


# ---------------------------------------------------------------------------
# sampling

@dataclass
class WienerPair:
    """Underlying Wiener increments for the pair (B, B-tilde).

    dW has shape (n, *batch, d1), dWt shape (n, *batch, l); each column is
    i.i.d. N(0, dt).  seed_tag records the (seed, first index) material.
    """

    dW: np.ndarray
    dWt: np.ndarray
    seed_tag: tuple


@dataclass
class FbmPath:
    B: SampledFn
    Bt: SampledFn


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based per-sample stream; independent of worker layout."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(index)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def draw_wiener_pair(grid: TimeGrid, d1: int, l: int, seed: int,
                     indices) -> WienerPair:
    """Draw increments for the given sample indices, one stream each.

    Per sample the draw order is fixed: the (n, d1) block for dW, then the
    (n, l) block for dWt.
    """
    indices = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    n = grid.n
    root = np.sqrt(grid.dt)
    dW = np.empty((n, indices.size, d1))
    dWt = np.empty((n, indices.size, l))
    for j, idx in enumerate(indices):
        rng = sample_rng(seed, int(idx))
        dW[:, j, :] = rng.standard_normal((n, d1)) * root
        dWt[:, j, :] = rng.standard_normal((n, l)) * root
    return WienerPair(dW=dW, dWt=dWt, seed_tag=(int(seed), int(indices[0])))


def sample_volterra(c: FracConstants, grid: TimeGrid, dW: np.ndarray) -> SampledFn:
    """fBm path from Wiener increments: B(t_i) = sum_{k<i} kappa(i,k) dW_k.

    At H = 1/2 this is exactly the cumulative sum of increments.
    """
    if dW.shape[0] != grid.n:
        raise ValueError(f"expected {grid.n} increments, got {dW.shape[0]}")
    if c.H == 0.5:
        out = np.zeros((grid.n + 1,) + dW.shape[1:])
        np.cumsum(dW, axis=0, out=out[1:])
        return SampledFn(grid, out)
    kappa = volterra_table(c, grid)
    out = np.tensordot(kappa, dW, axes=([1], [0]))
    return SampledFn(grid, out)


def sample_cholesky(H: float, grid: TimeGrid, dims: int, rng,
                    size=None) -> SampledFn:
    """Exact Gaussian sampling from the covariance matrix on the grid.

    Each component is an independent centered Gaussian vector with
    covariance R_H(t_i, t_j) over the interior nodes; the value at t_0 is
    0.  A factorization failure triggers one retry with diagonal jitter.
    """
    check_hurst(H)
    if grid.n > 4096:
        raise ValueError("dense factorization budget is n <= 4096")
    if isinstance(rng, (int, np.integer)):
        rng = sample_rng(int(rng), 0)
    nodes = grid.nodes[1:]
    cov = covariance(H, nodes[:, None], nodes[None, :])
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * np.max(np.diag(cov))
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(grid.n))
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(
                f"covariance factorization failed after jitter; "
                f"condition ~ {np.linalg.cond(cov):.3e}") from exc
    batch = () if size is None else (int(size),)
    g = rng.standard_normal((grid.n,) + batch + (dims,))
    out = np.zeros((grid.n + 1,) + batch + (dims,))
    out[1:] = np.tensordot(chol, g, axes=([1], [0]))
    return SampledFn(grid, out)


# ---------------------------------------------------------------------------
# inverse operator applied to an antiderivative

@dataclass(frozen=True)
class KHinvTable:
    """Precomputed product-quadrature weights for the closed-form inverse.

    omega[i, k] carries the exact cell integral of (t_i - r)^(-1/2-H)
    times the midpoint value of r^(1/2-H), for cells k <= i-2; the cell
    adjacent to the singularity is handled by lastcell[i] against the
    slope of g.  avg_pow[i] is the cell average of t^(1/2-H) used when the
    applicator output feeds a left-point stochastic sum.
    """

    grid: TimeGrid
    H: float
    omega: np.ndarray        # (n+1, n), strictly lower (k <= i-2)
    omega_rowsum: np.ndarray  # (n+1,)
    lastcell: np.ndarray     # (n+1,), coefficient of (g_i - g_{i-1})
    tpow_neg: np.ndarray     # t^(1/2-H), inf slot zeroed at node 0
    tpow_pos: np.ndarray     # t^(H-1/2)
    avg_pow: np.ndarray      # (n,), cell averages of t^(1/2-H)


def _avg_pow_weights(grid: TimeGrid, e: float) -> np.ndarray:
    """w_i = (1/dt) int_{t_i}^{t_{i+1}} t^e dt, exact."""
    nodes = grid.nodes
    return (nodes[1:] ** (e + 1.0) - nodes[:-1] ** (e + 1.0)) / (grid.dt * (e + 1.0))


def khinv_table(c: FracConstants, grid: TimeGrid) -> KHinvTable:
    key = ("khinv", c.H, grid.T, grid.n)
    tab = _table_cache.get(key)
    if tab is not None:
        return tab
    H = c.H
    n = grid.n
    p = 0.5 - H
    nodes = grid.nodes
    mids = 0.5 * (nodes[:-1] + nodes[1:])
    omega = np.zeros((n + 1, n))
    if H > 0.5:
        for i in range(2, n + 1):
            u2 = nodes[i] - nodes[:i - 1]
            u1 = nodes[i] - nodes[1:i]
            wK = (u1 ** p - u2 ** p) / (H - 0.5)
            omega[i, :i - 1] = wK * mids[:i - 1] ** p
    lastcell = np.zeros(n + 1)
    lastcell[1:] = grid.dt ** (0.5 - H) / (1.5 - H) * mids ** p
    tpow_neg = np.zeros(n + 1)
    tpow_neg[1:] = nodes[1:] ** p
    tpow_pos = np.zeros(n + 1)
    tpow_pos[1:] = nodes[1:] ** (H - 0.5)
    if H == 0.5:
        tpow_pos[0] = 1.0
        tpow_neg[0] = 1.0
    tab = KHinvTable(grid=grid, H=H, omega=omega,
                     omega_rowsum=omega.sum(axis=1), lastcell=lastcell,
                     tpow_neg=tpow_neg, tpow_pos=tpow_pos,
                     avg_pow=_avg_pow_weights(grid, p))
    _table_cache[key] = tab
    return tab


def _khinv_J(vals: np.ndarray, tab: KHinvTable) -> np.ndarray:
    """J(t_i) = int_0^{t_i} (g(t_i)-g(r)) (t_i-r)^(-1/2-H) r^(1/2-H) dr
    by product quadrature on the grid cells."""
    extra = vals.ndim - 1
    shp = (slice(None),) + (None,) * extra
    mid = 0.5 * (vals[:-1] + vals[1:])
    J = vals * tab.omega_rowsum[shp] - np.tensordot(tab.omega, mid, axes=([1], [0]))
    J[1:] += tab.lastcell[1:][shp] * (vals[1:] - vals[:-1])
    return J


def apply_KHinv_antideriv(g: SampledFn, c: FracConstants) -> SampledFn:
    """Closed form of the inverse kernel operator on an antiderivative:

        t -> c0 t^(1/2-H) g(t) + c1 t^(H-1/2) J(t),
        J(t) = int_0^t (g(t) - g(r)) (t-r)^(-1/2-H) r^(1/2-H) dr.

    Node t_0 stores the right-limit convention 0 and the output carries
    the singular-node flag.  At H = 1/2 the operator is the identity on g.
    """
    if c.H < 0.5:
        raise ValueError("closed form requires H >= 1/2")
    if c.H == 0.5:
        return SampledFn(g.grid, g.values.copy())
    tab = khinv_table(c, g.grid)
    extra = g.values.ndim - 1
    shp = (slice(None),) + (None,) * extra
    J = _khinv_J(g.values, tab)
    out = c.c0 * tab.tpow_neg[shp] * g.values + c.c1 * tab.tpow_pos[shp] * J
    out[0] = 0.0
    return SampledFn(g.grid, out, singular_node0=True)


def khinv_weight_nodes(gvals: np.ndarray, c: FracConstants,
                       tab: KHinvTable) -> np.ndarray:
    """Left-point node values of the applicator for stochastic sums.

    Returns F[i], i = 0..n-1, with the singular prefactor cell-averaged
    exactly and the first cell evaluated at the right node:

        F[i] = c0 * avg(t^(1/2-H); cell i) * g(t_i*) + c1 * t_i^(H-1/2) * J(t_i),

    t_i* = t_i except t_0* = t_1.  A stochastic integral of the applicator
    output against increments is then sum_i F[i] . dW_i.
    """
    extra = gvals.ndim - 1
    shp = (slice(None),) + (None,) * extra
    gstar = gvals[:-1].copy()
    gstar[0] = gvals[1]
    out = c.c0 * tab.avg_pow[shp] * gstar
    if c.c1 != 0.0:
        J = _khinv_J(gvals, tab)
        out = out + c.c1 * tab.tpow_pos[:-1][shp] * J[:-1]
    return out
