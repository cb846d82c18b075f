"""Monte Carlo estimators, three-way derivative-formula verification, and
the gradient-estimate bound scan.

Verification compares, sample by sample on the same driving path,

  (a) f(X_T, Y_T) * weight          (the formula under test)
  (b) <grad f(X_T, Y_T), variational>   (pathwise oracle)
  (c) CRN central finite difference of f at shifted initial points

and forms paired z-scores from the per-sample differences (a-b), (a-c).
The identity is exact in continuous time, so the discretization bias must
sit inside Monte Carlo noise at the shipped (n, N) for a pass.

Determinism: per-sample Philox streams are keyed by (seed, index) and all
reductions run over the fully assembled per-sample arrays in index order,
so results are independent of batch layout and worker count.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import __version__
from .fbm import FbmPath, draw_wiener_pair, khinv_table, sample_rng, \
    sample_volterra, volterra_table
from .fraccalc import compute_constants
from .grids import TimeGrid
from .models import ModelSpec, observable, solve, variational
from .weights import CONDITION_LIMIT, gram_matrix, weight_M, weight_Mtilde, \
    weight_N

_BATCH = 2048
EXCLUSION_BUDGET = 1e-3

_WEIGHTS = {"3.1": weight_M, "3.2": weight_Mtilde, "4.1": weight_N}


class ExclusionBudgetError(RuntimeError):
    """More than the allowed fraction of samples was degenerate."""


@dataclass
class McEstimate:
    """Monte Carlo mean with its standard error and exclusion count."""

    mean: float
    stderr: float
    n: int
    excluded: int = 0


@dataclass
class VerificationReport:
    weight_est: McEstimate
    oracle_est: McEstimate
    fd_est: McEstimate
    z_weight_oracle: float
    z_weight_fd: float
    config: dict
    passed: bool


@dataclass
class BoundScanRow:
    T: float
    lhs: float
    lhs_stderr: float
    envelope: float
    ratio: float


def _estimate(values: np.ndarray, excluded: int = 0) -> McEstimate:
    n = values.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples for a standard error")
    return McEstimate(mean=float(np.mean(values)),
                      stderr=float(np.std(values, ddof=1) / np.sqrt(n)),
                      n=n, excluded=excluded)


def _paired_z(diff: np.ndarray) -> float:
    m = float(np.mean(diff))
    sd = float(np.std(diff, ddof=1))
    if sd == 0.0:
        return 0.0 if m == 0.0 else float(np.sign(m)) * np.inf
    return m / (sd / np.sqrt(diff.shape[0]))


def _run_batches(evaluate, N: int, width: int, workers: int = 1) -> np.ndarray:
    """Assemble per-sample rows in index order; batch size is fixed so the
    result cannot depend on the worker count."""
    out = np.empty((N, width))
    spans = [(lo, min(lo + _BATCH, N)) for lo in range(0, N, _BATCH)]
    if workers <= 1 or len(spans) == 1:
        for lo, hi in spans:
            out[lo:hi] = evaluate(np.arange(lo, hi))
    else:
        def job(span):
            lo, hi = span
            out[lo:hi] = evaluate(np.arange(lo, hi))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(job, spans))
    return out


def mc_estimate(evaluator, N: int, seed: int, workers: int = 1,
                batched: bool = False) -> McEstimate:
    """Monte Carlo mean/stderr with per-sample RNG streams (seed, index).

    ``evaluator(rng) -> float`` by default; with ``batched=True`` it is
    called as ``evaluator(indices) -> array`` and must derive its own
    streams from the indices.  A NaN return marks the sample as excluded.
    Deterministic for fixed (seed, N, evaluator) regardless of ``workers``.
    """
    if N < 2:
        raise ValueError("need N >= 2 samples")
    if batched:
        vals = _run_batches(lambda idx: np.asarray(evaluator(idx))[:, None],
                            N, 1, workers)[:, 0]
    else:
        def batch(indices):
            return np.array([[float(evaluator(sample_rng(seed, int(i))))]
                             for i in indices])
        vals = _run_batches(batch, N, 1, workers)[:, 0]
    good = ~np.isnan(vals)
    excluded = int(N - good.sum())
    if excluded == N:
        raise ExclusionBudgetError("all samples were excluded")
    return _estimate(vals[good], excluded)


def _fd_step(v: np.ndarray) -> float:
    return 1e-4 / (1.0 + float(np.linalg.norm(v)))


def _shifted(model: ModelSpec, v: np.ndarray, eps: float) -> ModelSpec:
    return dataclasses.replace(model, x0=model.x0 + eps * v[:model.d1],
                               y0=model.y0 + eps * v[model.d1:])


def _sample_columns(model: ModelSpec, theorem: str, v, f_name: str, seed: int):
    """Batched evaluator producing per-sample (a, b, c, condition) rows."""
    c = compute_constants(model.H)
    f, gradf = observable(f_name)
    v = np.asarray(v, dtype=float)
    weight_fn = _WEIGHTS[theorem]
    eps = _fd_step(v)
    plus = _shifted(model, v, eps)
    minus = _shifted(model, v, -eps)
    # build shared read-only tables before any thread touches them
    volterra_table(c, model.grid)
    khinv_table(c, model.grid)

    def evaluate(indices):
        wp = draw_wiener_pair(model.grid, model.d1, model.l, seed, indices)
        paths = FbmPath(B=sample_volterra(c, model.grid, wp.dW),
                        Bt=sample_volterra(c, model.grid, wp.dWt))
        sol = solve(model, paths)
        wb = weight_fn(model, sol, paths, wp, v, c)
        a = f(sol.X.values[-1], sol.Y.values[-1]) * wb.total
        grads = gradf(sol.X.values[-1], sol.Y.values[-1])
        b = np.einsum("...d,...d->...", grads, variational(model, paths, sol, v))
        sp = solve(plus, paths)
        sm = solve(minus, paths)
        fd = (f(sp.X.values[-1], sp.Y.values[-1])
              - f(sm.X.values[-1], sm.Y.values[-1])) / (2.0 * eps)
        if theorem in ("3.1", "4.1"):
            cond = np.asarray(gram_matrix(model, sol).condition, dtype=float)
        else:
            cond = np.ones(indices.size)
        cond = np.broadcast_to(cond, indices.shape)
        return np.stack([a, b, fd, cond], axis=-1)

    return evaluate


def verify_derivative(theorem, model: ModelSpec, v, f_name: str, N: int,
                      seed: int, workers: int = 1) -> VerificationReport:
    """Three-way paired verification of one derivative formula.

    Raises AssumptionError if the model fails the theorem's
    catalog-checkable assumptions and ExclusionBudgetError if degenerate
    samples exceed the 0.1% budget.
    """
    theorem = str(theorem)
    model.check_assumptions(theorem)
    evaluate = _sample_columns(model, theorem, v, f_name, seed)
    rows = _run_batches(evaluate, N, 4, workers)
    good = rows[:, 3] <= CONDITION_LIMIT
    excluded = int(N - good.sum())
    if excluded > EXCLUSION_BUDGET * N:
        raise ExclusionBudgetError(
            f"{excluded} of {N} samples exceeded the Gram condition limit "
            f"{CONDITION_LIMIT:g} (budget {EXCLUSION_BUDGET:.1%})")
    a, b, fd = rows[good, 0], rows[good, 1], rows[good, 2]
    z_ab = _paired_z(a - b)
    z_ac = _paired_z(a - fd)
    config = {
        "theorem": theorem, "H": model.H, "T": model.grid.T,
        "n": model.grid.n, "N": N, "seed": seed, "v": list(np.asarray(v, float)),
        "f": f_name, "kind": model.kind,
        "dims": [model.d1, model.d2, model.l],
        "version": f"fbmgrushin-{__version__}",
    }
    return VerificationReport(
        weight_est=_estimate(a, excluded), oracle_est=_estimate(b, excluded),
        fd_est=_estimate(fd, excluded), z_weight_oracle=z_ab,
        z_weight_fd=z_ac, config=config,
        passed=bool(abs(z_ab) <= 3.0 and abs(z_ac) <= 3.0))


def default_epsilon_tilde(H: float, gamma: float) -> float:
    """Half of the admissible upper bound H - (H - 1/2)/gamma."""
    return 0.5 * (H - (H - 0.5) / gamma)


def envelope_bracket(H: float, gamma: float, eps_t: float, T: float,
                     v1_norm: float, v2_norm: float) -> float:
    """The T-dependent bracket of the gradient-estimate envelope:
    |v1| (T^-H + 1 + T^(g(H-e)) + T^(H-e)) + |v2| (T^-H + T^-(H-g(H-e)))."""
    g_he = gamma * (H - eps_t)
    part1 = T ** (-H) + 1.0 + T ** g_he + T ** (H - eps_t)
    part2 = T ** (-H) + T ** (-(H - g_he))
    return v1_norm * part1 + v2_norm * part2


def bound_scan(model: ModelSpec, v, f_name: str, p: float, epsilon_tilde,
               T_list, N: int, seed: int, workers: int = 1):
    """Scan the gradient-estimate ratio |grad_v P_T f| / envelope over T.

    The left side is estimated by the pathwise oracle; the envelope uses a
    Monte Carlo estimate of (P_T |f|^p)^(1/p) times the closed-form
    bracket.  Only finiteness and seed-stability of the ratio are
    checkable (the bound's constant is unknown), so rows report the raw
    ratio.
    """
    model.check_assumptions("3.2")
    H = model.H
    if not p > 1.0 / (1.5 - H):
        raise ValueError(f"p must exceed 1/(3/2 - H) = {1/(1.5-H):.6g}, got {p}")
    gamma = model.coefficients["sigma"].metadata["gamma"]
    limit = H - (H - 0.5) / gamma
    if epsilon_tilde is None:
        epsilon_tilde = default_epsilon_tilde(H, gamma)
    if not 0.0 < epsilon_tilde < limit:
        raise ValueError(
            f"epsilon_tilde must lie in (0, {limit:.6g}), got {epsilon_tilde}")
    v = np.asarray(v, dtype=float)
    c = compute_constants(H)
    f, gradf = observable(f_name)
    rows = []
    for T in T_list:
        m = dataclasses.replace(model, grid=TimeGrid(float(T), model.grid.n))
        volterra_table(c, m.grid)

        def evaluate(indices, m=m):
            wp = draw_wiener_pair(m.grid, m.d1, m.l, seed, indices)
            paths = FbmPath(B=sample_volterra(c, m.grid, wp.dW),
                            Bt=sample_volterra(c, m.grid, wp.dWt))
            sol = solve(m, paths)
            grads = gradf(sol.X.values[-1], sol.Y.values[-1])
            b = np.einsum("...d,...d->...", grads, variational(m, paths, sol, v))
            fabs = np.abs(f(sol.X.values[-1], sol.Y.values[-1])) ** p
            return np.stack([b, fabs], axis=-1)

        cols = _run_batches(evaluate, N, 2, workers)
        oracle = _estimate(cols[:, 0])
        pf = float(np.mean(cols[:, 1])) ** (1.0 / p)
        env = pf * envelope_bracket(H, gamma, float(epsilon_tilde), float(T),
                                    float(np.linalg.norm(v[:model.d1])),
                                    float(np.linalg.norm(v[model.d1:])))
        lhs = abs(oracle.mean)
        rows.append(BoundScanRow(T=float(T), lhs=lhs, lhs_stderr=oracle.stderr,
                                 envelope=env, ratio=lhs / env))
    return rows
