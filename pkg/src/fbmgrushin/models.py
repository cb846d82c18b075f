"""Coefficient catalog, pathwise Young-Euler solvers, and the variational
(directional-derivative) solver used as the low-variance oracle.

Two model kinds:

* grushin:  dX = dB,  dY = sigma(X) dBt            (X exact, Y left-point)
* general:  dX = b1(X) dt + sigma1 dB,  dY = b2(X) dt + sigma2(X) dBt

The discrete variational solutions are the exact pathwise derivatives of
the discrete schemes, so they match common-random-number finite
differences up to O(eps^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fbm import FbmPath
from .grids import SampledFn, TimeGrid


class AssumptionError(ValueError):
    """Model configuration violates a catalog-checkable assumption."""


class NonFiniteStateError(RuntimeError):
    """The Euler iteration produced a non-finite state."""


@dataclass
class CoefficientFn:
    """Catalog coefficient with analytic directional derivative.

    ``eval(x)`` maps (..., d1) -> (..., *shape); ``dir_deriv(x, v)`` is the
    directional derivative at x along v, linear in v, with v broadcastable
    against x.  ``shape`` is (rows,) for drifts and (rows, cols) for
    diffusion matrices.
    """

    name: str
    params: tuple
    shape: tuple
    eval: callable
    dir_deriv: callable
    metadata: dict = field(default_factory=dict)


def _xsum(x):
    return np.sum(x, axis=-1)


def _fill(shape):
    def expand(vals):
        out = np.empty(vals.shape + shape)
        out[...] = vals.reshape(vals.shape + (1,) * len(shape))
        return out
    return expand


def catalog_lookup(name: str, params, shape) -> CoefficientFn:
    """Built-in coefficients: constant, identity, affine, sine-affine,
    sine-affine-vector, sine-affine-diag, linear-drift.

    constant      entries all equal params[0], or the row-major entry list
    identity      the identity matrix (square shapes only)
    affine        entries a + b * sum(x)
    sine-affine   entries a + b * sin(c * sum(x)); carries an (H3)
                  certificate (gamma = 1 and a Holder bound) when a > |b|
    sine-affine-vector   vector alias of sine-affine for drifts
    sine-affine-diag     diagonal matrix, k-th entry a + b*sin(c*x_{k mod d1});
                  same (H3) certificate shape-adjusted
    linear-drift  x -> -kappa x (square input/output)
    """
    shape = tuple(int(s) for s in shape)
    params = tuple(float(p) for p in np.atleast_1d(params)) if params is not None else ()
    size = int(np.prod(shape))
    expand = _fill(shape)

    if name in ("constant", "identity"):
        if name == "identity":
            if len(shape) != 2 or shape[0] != shape[1]:
                raise ValueError(f"identity needs a square shape, got {shape}")
            entries = (params[0] if params else 1.0) * np.eye(shape[0])
        elif len(params) == size:
            entries = np.array(params, dtype=float).reshape(shape)
        elif len(params) == 1:
            entries = np.full(shape, params[0])
        else:
            raise ValueError(f"constant needs 1 or {size} params, got {len(params)}")
        def ev(x):
            return np.broadcast_to(entries, x.shape[:-1] + shape).copy()
        def dd(x, v):
            return np.zeros(np.broadcast_shapes(x.shape[:-1], v.shape[:-1]) + shape)
        meta = {"bounded_deriv": True, "lipschitz": 0.0}
        if len(shape) == 2:
            ss = entries @ entries.T
            if np.linalg.cond(ss) < 1e12:
                # a constant invertible square: Holder with any exponent
                meta["gamma"] = 1.0
                meta["hoelder_K"] = 0.0
                meta["inv_bound"] = float(np.linalg.norm(np.linalg.inv(ss), 2))
        return CoefficientFn(name, params, shape, ev, dd, meta)

    if name == "affine":
        a, b = params
        def ev(x):
            return expand(a + b * _xsum(x))
        def dd(x, v):
            s = b * _xsum(np.broadcast_to(v, np.broadcast_shapes(x.shape, v.shape)))
            return expand(s)
        return CoefficientFn(name, params, shape, ev, dd,
                             {"bounded_deriv": True, "lipschitz": abs(b) * size})

    if name in ("sine-affine", "sine-affine-vector"):
        a, b, cfreq = params
        def ev(x):
            return expand(a + b * np.sin(cfreq * _xsum(x)))
        def dd(x, v):
            shp = np.broadcast_shapes(x.shape, v.shape)
            s = (b * cfreq * np.cos(cfreq * _xsum(np.broadcast_to(x, shp)))
                 * _xsum(np.broadcast_to(v, shp)))
            return expand(s)
        meta = {"bounded_deriv": True, "lipschitz": abs(b * cfreq) * size}
        if len(shape) == 2 and a > abs(b) > 0:
            # 1 x 1 certificate; larger all-equal matrices are rank one
            if shape == (1, 1):
                meta["gamma"] = 1.0
                meta["hoelder_K"] = 2 * abs(b) * abs(cfreq) / (a - abs(b)) ** 3
                meta["inv_bound"] = (a - abs(b)) ** (-2)
        return CoefficientFn(name, params, shape, ev, dd, meta)

    if name == "sine-affine-diag":
        a, b, cfreq = params
        if len(shape) != 2 or shape[0] != shape[1]:
            raise ValueError(f"sine-affine-diag needs a square shape, got {shape}")
        d = shape[0]
        def ev(x):
            d1 = x.shape[-1]
            diag = a + b * np.sin(cfreq * x[..., [k % d1 for k in range(d)]])
            out = np.zeros(x.shape[:-1] + shape)
            for k in range(d):
                out[..., k, k] = diag[..., k]
            return out
        def dd(x, v):
            shp = np.broadcast_shapes(x.shape, v.shape)
            x = np.broadcast_to(x, shp)
            v = np.broadcast_to(v, shp)
            d1 = x.shape[-1]
            idx = [k % d1 for k in range(d)]
            diag = b * cfreq * np.cos(cfreq * x[..., idx]) * v[..., idx]
            out = np.zeros(shp[:-1] + shape)
            for k in range(d):
                out[..., k, k] = diag[..., k]
            return out
        meta = {"bounded_deriv": True, "lipschitz": abs(b * cfreq)}
        if a > abs(b) > 0:
            meta["gamma"] = 1.0
            meta["hoelder_K"] = np.sqrt(d) * 2 * abs(b) * abs(cfreq) / (a - abs(b)) ** 3
            meta["inv_bound"] = (a - abs(b)) ** (-2)
        return CoefficientFn(name, params, shape, ev, dd, meta)

    if name == "linear-drift":
        kappa = params[0]
        if len(shape) != 1:
            raise ValueError(f"linear-drift is vector-valued, got shape {shape}")
        def ev(x):
            if x.shape[-1] != shape[0]:
                raise ValueError("linear-drift needs matching input/output dims")
            return -kappa * x
        def dd(x, v):
            shp = np.broadcast_shapes(x.shape, v.shape)
            return -kappa * np.broadcast_to(v, shp)
        return CoefficientFn(name, params, shape, ev, dd,
                             {"bounded_deriv": True, "lipschitz": abs(kappa)})

    raise KeyError(f"unknown catalog coefficient {name!r}")


@dataclass
class ModelSpec:
    """Dimensions, initial point and catalog coefficients of one model."""

    kind: str                      # "grushin" | "general"
    d1: int
    d2: int
    l: int
    x0: np.ndarray
    y0: np.ndarray
    coefficients: dict
    H: float
    grid: TimeGrid

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(self.d1)
        self.y0 = np.asarray(self.y0, dtype=float).reshape(self.d2)
        if not 0.5 <= self.H < 1.0:
            raise AssumptionError(
                f"Hurst parameter must lie in [1/2, 1), got H={self.H}")
        if self.kind == "grushin":
            sig = self.coefficients["sigma"]
            if sig.shape != (self.d2, self.l):
                raise AssumptionError(
                    f"sigma must be {self.d2} x {self.l}, got {sig.shape}")
        elif self.kind == "general":
            b1 = self.coefficients["b1"]
            b2 = self.coefficients["b2"]
            s1 = self.coefficients["sigma1"]
            s2 = self.coefficients["sigma2"]
            if b1.shape != (self.d1,):
                raise AssumptionError(f"b1 must be ({self.d1},), got {b1.shape}")
            if b2.shape != (self.d2,):
                raise AssumptionError(f"b2 must be ({self.d2},), got {b2.shape}")
            if s1.shape != (self.d1, self.d1):
                raise AssumptionError(
                    f"sigma1 must be {self.d1} x {self.d1}, got {s1.shape}")
            if s2.shape != (self.d2, self.l):
                raise AssumptionError(
                    f"sigma2 must be {self.d2} x {self.l}, got {s2.shape}")
            mat = self.sigma1_matrix()
            cond = np.linalg.cond(mat)
            if not np.isfinite(cond) or cond > 1e12:
                raise AssumptionError(
                    f"sigma1 must be invertible; condition number {cond:.3e}")
            self.sigma1_condition = float(cond)
        else:
            raise AssumptionError(f"unknown model kind {self.kind!r}")

    def sigma1_matrix(self) -> np.ndarray:
        s1 = self.coefficients["sigma1"]
        return s1.eval(self.x0[None, :])[0]

    def check_assumptions(self, theorem: str) -> None:
        """Catalog-decidable parts of the standing assumptions.

        Bounded derivatives are required throughout; the Gram-matrix
        moment conditions are runtime per-sample diagnostics, while the
        Holder-inverse condition needs a cataloged certificate.
        """
        for cname, coef in self.coefficients.items():
            if not coef.metadata.get("bounded_deriv", False):
                raise AssumptionError(
                    f"coefficient {cname} lacks a bounded-derivative certificate")
        if theorem == "3.2":
            sig = self.coefficients["sigma"]
            if sig.metadata.get("gamma") is None:
                raise AssumptionError(
                    "theorem 3.2 needs a Holder certificate (gamma metadata) "
                    f"for sigma; coefficient {sig.name!r} has none")
        if theorem in ("3.1", "3.2") and self.kind != "grushin":
            raise AssumptionError(f"theorem {theorem} applies to the grushin model")
        if theorem == "4.1" and self.kind != "general":
            raise AssumptionError("theorem 4.1 applies to the general model")


@dataclass
class SolutionPath:
    X: SampledFn
    Y: SampledFn


def solve(model: ModelSpec, paths: FbmPath) -> SolutionPath:
    """Left-point Young-Euler solution along given driving paths.

    grushin:  X = x0 + B exactly;  Y_{i+1} = Y_i + sigma(X_i) dBt_i.
    general:  X_{i+1} = X_i + b1(X_i) dt + sigma1 dB_i, and Y accordingly.
    """
    grid = model.grid
    B, Bt = paths.B.values, paths.Bt.values
    dBt = Bt[1:] - Bt[:-1]
    batch = B.shape[1:-1]
    if model.kind == "grushin":
        X = model.x0 + B
        sig = model.coefficients["sigma"].eval(X)
        incr = np.einsum("i...rc,i...c->i...r", sig[:-1], dBt)
    else:
        b1 = model.coefficients["b1"]
        s1mat = model.sigma1_matrix()
        dB = B[1:] - B[:-1]
        X = np.empty((grid.n + 1,) + batch + (model.d1,))
        X[0] = model.x0
        dt = grid.dt
        for i in range(grid.n):
            X[i + 1] = X[i] + b1.eval(X[i]) * dt + dB[i] @ s1mat.T
        if not np.all(np.isfinite(X[-1])):
            raise NonFiniteStateError("Euler iteration for X overflowed")
        b2 = model.coefficients["b2"].eval(X[:-1])
        s2 = model.coefficients["sigma2"].eval(X[:-1])
        incr = b2 * dt + np.einsum("i...rc,i...c->i...r", s2, dBt)
    Y = np.empty((grid.n + 1,) + batch + (model.d2,))
    Y[0] = model.y0
    np.cumsum(incr, axis=0, out=Y[1:])
    Y[1:] += model.y0
    if not (np.all(np.isfinite(Y[-1])) and np.all(np.isfinite(X[-1]))):
        raise NonFiniteStateError("Young-Euler iteration overflowed")
    return SolutionPath(X=SampledFn(grid, X), Y=SampledFn(grid, Y))


def variational(model: ModelSpec, paths: FbmPath, sol: SolutionPath, v):
    """Terminal directional derivative (grad_v X_T, grad_v Y_T).

    This is the exact derivative of the discrete scheme in its initial
    condition, which is what makes it a valid pathwise oracle for the
    derivative of the discrete semigroup.
    Returns an array (*batch, d1 + d2).
    """
    v = np.asarray(v, dtype=float)
    v1, v2 = v[: model.d1], v[model.d1:]
    grid = model.grid
    X = sol.X.values
    dBt = paths.Bt.values[1:] - paths.Bt.values[:-1]
    batch = X.shape[1:-1]
    if model.kind == "grushin":
        sig = model.coefficients["sigma"]
        dsig = sig.dir_deriv(X[:-1], v1)
        dY = v2 + np.einsum("i...rc,i...c->...r", dsig, dBt)
        dXT = np.broadcast_to(v1, batch + (model.d1,))
    else:
        b1 = model.coefficients["b1"]
        b2 = model.coefficients["b2"]
        s2 = model.coefficients["sigma2"]
        dt = grid.dt
        dX = np.broadcast_to(v1, batch + (model.d1,)).copy()
        dY = np.broadcast_to(v2, batch + (model.d2,)).astype(float).copy()
        for i in range(grid.n):
            dY = dY + (b2.dir_deriv(X[i], dX) * dt
                       + np.einsum("...rc,...c->...r",
                                   s2.dir_deriv(X[i], dX), dBt[i]))
            dX = dX + b1.dir_deriv(X[i], dX) * dt
        dXT = dX
    return np.concatenate([dXT, np.broadcast_to(dY, batch + (model.d2,))], axis=-1)


# ---------------------------------------------------------------------------
# bounded C^1 observables

def observable(name: str):
    """Test functions f(x, y) with analytic gradients.

    Returns (f, grad) where f maps ((..., d1), (..., d2)) -> (...) and
    grad returns the (..., d1 + d2) gradient.  The catalog is deliberately
    C^1-bounded: sin and tanh of sum(x) + sum(y), plus the constant 1 used
    only by null tests.
    """
    if name == "sin":
        def f(x, y):
            return np.sin(np.sum(x, axis=-1) + np.sum(y, axis=-1))
        def grad(x, y):
            g = np.cos(np.sum(x, axis=-1) + np.sum(y, axis=-1))
            d = x.shape[-1] + y.shape[-1]
            return np.repeat(g[..., None], d, axis=-1)
        return f, grad
    if name == "tanh":
        def f(x, y):
            return np.tanh(np.sum(x, axis=-1) + np.sum(y, axis=-1))
        def grad(x, y):
            g = 1.0 - np.tanh(np.sum(x, axis=-1) + np.sum(y, axis=-1)) ** 2
            d = x.shape[-1] + y.shape[-1]
            return np.repeat(g[..., None], d, axis=-1)
        return f, grad
    if name == "const":
        def f(x, y):
            return np.ones(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]))
        def grad(x, y):
            d = x.shape[-1] + y.shape[-1]
            return np.zeros(np.broadcast_shapes(x.shape[:-1], y.shape[:-1]) + (d,))
        return f, grad
    raise KeyError(f"unknown observable {name!r}")
