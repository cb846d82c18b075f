"""Command line interface: config-driven, deterministic, machine-readable.

Subcommands (selected inside the JSON config):

  covcheck   covariance-factorization error table
  fraccheck  fractional-operator identity suite
  simulate   one solution path as CSV (t, X components, Y components)
  verify     three-way derivative-formula verification (JSON + CSV)
  bound      gradient-estimate bound scan (CSV)

Exit codes: 0 all asserted checks pass; 1 statistical failure;
2 config/schema violation; 3 assumption-check failure.

Every output file carries header lines echoing (H, T, n, N, seed) and the
version string; floats are rendered with 17 significant digits so
byte-level determinism is checkable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import jsonschema

from . import __version__
from .fbm import FbmPath, draw_wiener_pair, factorization_check, sample_volterra
from .fraccalc import compute_constants
from .grids import TimeGrid
from .harness import ExclusionBudgetError, bound_scan, verify_derivative
from .models import AssumptionError, ModelSpec, catalog_lookup, solve

VERSION_TAG = f"fbmgrushin-{__version__}"

_HURST = {"type": "number", "minimum": 0.5, "exclusiveMaximum": 1.0}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["subcommand", "seed"],
    "additionalProperties": False,
    "properties": {
        "subcommand": {"enum": ["covcheck", "fraccheck", "simulate",
                                "verify", "bound"]},
        "seed": {"type": "integer", "minimum": 0},
        "H": _HURST,
        "H_list": {"type": "array", "items": _HURST, "minItems": 1},
        "T": {"type": "number", "exclusiveMinimum": 0},
        "T_list": {"type": "array", "minItems": 1,
                   "items": {"type": "number", "exclusiveMinimum": 0}},
        "n": {"type": "integer", "minimum": 2},
        "n_pair": {"type": "integer", "minimum": 2},
        "N": {"type": "integer", "minimum": 2},
        "resolution": {"type": "integer", "minimum": 16},
        "lattice": {"type": "array", "minItems": 1,
                    "items": {"type": "number", "exclusiveMinimum": 0}},
        "theorem": {"enum": ["3.1", "3.2", "4.1"]},
        "v": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "f": {"enum": ["sin", "tanh", "const"]},
        "p": {"type": "number", "exclusiveMinimum": 1.0},
        "epsilon_tilde": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
        "model": {
            "type": "object",
            "required": ["kind", "d1", "d2", "l", "x0", "y0", "coefficients"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["grushin", "general"]},
                "d1": {"type": "integer", "minimum": 1},
                "d2": {"type": "integer", "minimum": 1},
                "l": {"type": "integer", "minimum": 1},
                "x0": {"type": "array", "items": {"type": "number"}},
                "y0": {"type": "array", "items": {"type": "number"}},
                "coefficients": {
                    "type": "object",
                    "additionalProperties": {
                        "type": "object",
                        "required": ["name"],
                        "additionalProperties": False,
                        "properties": {
                            "name": {"type": "string"},
                            "params": {"type": "array",
                                       "items": {"type": "number"}},
                        },
                    },
                },
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def _coef_shapes(kind: str, d1: int, d2: int, l: int) -> dict:
    if kind == "grushin":
        return {"sigma": (d2, l)}
    return {"b1": (d1,), "b2": (d2,), "sigma1": (d1, d1), "sigma2": (d2, l)}


def build_model(cfg: dict, H: float, grid: TimeGrid) -> ModelSpec:
    m = cfg["model"]
    kind = m["kind"]
    shapes = _coef_shapes(kind, m["d1"], m["d2"], m["l"])
    missing = set(shapes) - set(m["coefficients"])
    if missing:
        raise ConfigError(f"model kind {kind!r} needs coefficients "
                          f"{sorted(shapes)}; missing {sorted(missing)}")
    coefs = {}
    for role, shape in shapes.items():
        spec = m["coefficients"][role]
        try:
            coefs[role] = catalog_lookup(spec["name"], spec.get("params", ()),
                                         shape)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"coefficient {role}: {exc}") from exc
    return ModelSpec(kind=kind, d1=m["d1"], d2=m["d2"], l=m["l"],
                     x0=m["x0"], y0=m["y0"], coefficients=coefs, H=H,
                     grid=grid)


def _header(fh, **meta) -> None:
    fh.write(f"# {VERSION_TAG}\n")
    fh.write("# " + " ".join(f"{k}={_fmt(v)}" for k, v in meta.items()) + "\n")


def _need(cfg: dict, keys, sub: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError(f"subcommand {sub!r} requires config keys {missing}")


def run_covcheck(cfg: dict, outdir: str) -> int:
    hs = cfg.get("H_list", [0.6, 0.75, 0.9])
    lattice = cfg.get("lattice", [0.2, 0.4, 0.6, 0.8, 1.0])
    resolution = cfg.get("resolution", 4096)
    tol = 1e-3
    worst = 0.0
    path = os.path.join(outdir, "covcheck.csv")
    with open(path, "w") as fh:
        _header(fh, H=",".join(_fmt(h) for h in hs), resolution=resolution,
                seed=cfg["seed"])
        fh.write("H,t,s,quadrature,covariance,rel_err\n")
        for H in hs:
            c = compute_constants(H)
            for t, s, val, exact, rel in factorization_check(c, lattice,
                                                             resolution):
                worst = max(worst, rel)
                fh.write(",".join(_fmt(x) for x in (H, t, s, val, exact, rel))
                         + "\n")
        fh.write(f"# max_rel_err={_fmt(worst)} tolerance={_fmt(tol)}\n")
    print(f"covcheck: max rel err {worst:.3e} (tolerance {tol:g}) -> {path}")
    return 0 if worst <= tol else 1


def _fraccheck_rows(n: int, n_pair: int):
    from scipy.special import gamma as gamma_fn
    from .fraccalc import frac_deriv, frac_integral, young_integral, \
        zahle_integral
    from .grids import SampledFn

    grid = TimeGrid(1.0, n)
    t = grid.nodes
    rows = []

    def check(name, err, tol):
        rows.append((name, float(err), float(tol), bool(err <= tol)))

    one = SampledFn(grid, np.ones_like(t))
    check("power_rule_I0.5_const", np.max(np.abs(
        frac_integral(one, 0.5).values - t ** 0.5 / gamma_fn(1.5))), 1e-6)
    check("power_rule_I1_const", np.max(np.abs(
        frac_integral(one, 1.0).values - t)), 1e-12)
    check("power_rule_I0.5_t_at_1", abs(
        frac_integral(SampledFn(grid, t), 0.5).values[-1]
        - gamma_fn(2.0) / gamma_fn(2.5)), 1e-6)
    for a in (0.3, 0.5):
        for b in (0.2, 0.4):
            for gpow in (0, 1, 2):
                inner = frac_integral(SampledFn(grid, t ** gpow), b)
                lhs = frac_integral(inner, a, left_exponent=b + gpow)
                rhs = frac_integral(SampledFn(grid, t ** gpow), a + b)
                check(f"semigroup_a{a}_b{b}_g{gpow}",
                      np.max(np.abs(lhs.values - rhs.values)), 1e-5)
    for fname, fv, hint in (("const", np.ones_like(t), 0.5),
                            ("t", t.copy(), 1.5), ("sin", np.sin(t), 1.5)):
        g = frac_integral(SampledFn(grid, fv), 0.5)
        d = frac_deriv(g, 0.5, left_exponent=hint)
        check(f"inverse_{fname}", np.max(np.abs(d.values[1:] - fv[1:])), 1e-4)

    gp = TimeGrid(1.0, n_pair)
    tp = gp.nodes
    check("young_t_dt2", abs(young_integral(
        SampledFn(gp, tp), SampledFn(gp, tp ** 2)) - 2.0 / 3.0), gp.dt)
    check("zahle_t_dt", abs(zahle_integral(
        SampledFn(gp, tp), SampledFn(gp, tp), 0.4) - 0.5), 1e-3)
    for a in (0.3, 0.5, 0.7):
        zs = zahle_integral(SampledFn(gp, np.sin(tp)),
                            SampledFn(gp, np.cos(tp)), a)
        ys = young_integral(SampledFn(gp, np.sin(tp)),
                            SampledFn(gp, np.cos(tp)))
        check(f"zahle_young_sin_cos_a{a}", abs(zs - ys), 1e-3)
    return rows


def run_fraccheck(cfg: dict, outdir: str) -> int:
    n = cfg.get("n", 4096)
    n_pair = cfg.get("n_pair", 2048)
    rows = _fraccheck_rows(n, n_pair)
    path = os.path.join(outdir, "fraccheck.csv")
    ok = all(r[3] for r in rows)
    with open(path, "w") as fh:
        _header(fh, n=n, n_pair=n_pair, seed=cfg["seed"])
        fh.write("check,value,tolerance,pass\n")
        for name, err, tol, good in rows:
            fh.write(f"{name},{_fmt(err)},{_fmt(tol)},{str(good).lower()}\n")
    print(f"fraccheck: {sum(r[3] for r in rows)}/{len(rows)} pass -> {path}")
    return 0 if ok else 1


def run_simulate(cfg: dict, outdir: str) -> int:
    _need(cfg, ["H", "T", "n", "model"], "simulate")
    grid = TimeGrid(cfg["T"], cfg["n"])
    model = build_model(cfg, cfg["H"], grid)
    c = compute_constants(cfg["H"])
    wp = draw_wiener_pair(grid, model.d1, model.l, cfg["seed"], [0])
    paths = FbmPath(B=sample_volterra(c, grid, wp.dW),
                    Bt=sample_volterra(c, grid, wp.dWt))
    sol = solve(model, paths)
    path = os.path.join(outdir, "path.csv")
    with open(path, "w") as fh:
        _header(fh, H=cfg["H"], T=cfg["T"], n=cfg["n"], N=1, seed=cfg["seed"])
        cols = (["t"] + [f"X{i}" for i in range(model.d1)]
                + [f"Y{j}" for j in range(model.d2)])
        fh.write(",".join(cols) + "\n")
        X = sol.X.values[:, 0, :]
        Y = sol.Y.values[:, 0, :]
        for i, tt in enumerate(grid.nodes):
            vals = [tt] + list(X[i]) + list(Y[i])
            fh.write(",".join(_fmt(x) for x in vals) + "\n")
    print(f"simulate: wrote {path}")
    return 0


def run_verify(cfg: dict, outdir: str, workers: int) -> int:
    _need(cfg, ["H", "T", "n", "N", "theorem", "v", "f", "model"], "verify")
    grid = TimeGrid(cfg["T"], cfg["n"])
    model = build_model(cfg, cfg["H"], grid)
    rep = verify_derivative(cfg["theorem"], model, cfg["v"], cfg["f"],
                            cfg["N"], cfg["seed"], workers=workers)
    jpath = os.path.join(outdir, "verify_report.json")
    with open(jpath, "w") as fh:
        json.dump({
            "meta": rep.config,
            "estimates": {
                name: {"mean": est.mean, "stderr": est.stderr, "n": est.n,
                       "excluded": est.excluded}
                for name, est in (("weight", rep.weight_est),
                                  ("oracle", rep.oracle_est),
                                  ("fd", rep.fd_est))},
            "z_weight_oracle": rep.z_weight_oracle,
            "z_weight_fd": rep.z_weight_fd,
            "pass": rep.passed,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    cpath = os.path.join(outdir, "verify_estimates.csv")
    with open(cpath, "w") as fh:
        _header(fh, H=cfg["H"], T=cfg["T"], n=cfg["n"], N=cfg["N"],
                seed=cfg["seed"])
        fh.write("estimate,mean,stderr,n,excluded,z_vs_weight\n")
        fh.write(f"weight,{_fmt(rep.weight_est.mean)},"
                 f"{_fmt(rep.weight_est.stderr)},{rep.weight_est.n},"
                 f"{rep.weight_est.excluded},\n")
        fh.write(f"oracle,{_fmt(rep.oracle_est.mean)},"
                 f"{_fmt(rep.oracle_est.stderr)},{rep.oracle_est.n},"
                 f"{rep.oracle_est.excluded},{_fmt(rep.z_weight_oracle)}\n")
        fh.write(f"fd,{_fmt(rep.fd_est.mean)},{_fmt(rep.fd_est.stderr)},"
                 f"{rep.fd_est.n},{rep.fd_est.excluded},"
                 f"{_fmt(rep.z_weight_fd)}\n")
    status = "pass" if rep.passed else "FAIL"
    print(f"verify[{cfg['theorem']}]: z_oracle={rep.z_weight_oracle:+.3f} "
          f"z_fd={rep.z_weight_fd:+.3f} {status} -> {jpath}")
    return 0 if rep.passed else 1


def run_bound(cfg: dict, outdir: str, workers: int) -> int:
    _need(cfg, ["H", "n", "N", "v", "f", "model", "T_list"], "bound")
    grid = TimeGrid(max(cfg["T_list"]), cfg["n"])
    model = build_model(cfg, cfg["H"], grid)
    rows = bound_scan(model, cfg["v"], cfg["f"], cfg.get("p", 2.0),
                      cfg.get("epsilon_tilde"), cfg["T_list"], cfg["N"],
                      cfg["seed"], workers=workers)
    path = os.path.join(outdir, "bound_scan.csv")
    finite = all(np.isfinite(r.ratio) for r in rows)
    with open(path, "w") as fh:
        _header(fh, H=cfg["H"], n=cfg["n"], N=cfg["N"], seed=cfg["seed"],
                p=cfg.get("p", 2.0))
        fh.write("T,lhs,lhs_stderr,envelope,ratio\n")
        for r in rows:
            fh.write(",".join(_fmt(x) for x in
                              (r.T, r.lhs, r.lhs_stderr, r.envelope, r.ratio))
                     + "\n")
        fh.write(f"# max_ratio={_fmt(max(r.ratio for r in rows))}\n")
    print(f"bound: max ratio {max(r.ratio for r in rows):.4g} -> {path}")
    return 0 if finite else 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="fbmgrushin",
        description="Simulation and Monte Carlo verification of derivative "
                    "weights for Grushin-type SDEs driven by fBm")
    ap.add_argument("--config", required=True, help="path to the JSON config")
    ap.add_argument("--seed", type=int, default=None,
                    help="override the config seed")
    ap.add_argument("--workers", type=int, default=None,
                    help="worker threads (must not change outputs)")
    ap.add_argument("--out", default=None, help="output directory")
    args = ap.parse_args(argv)

    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        msg = exc.message
        if "H" in loc or "0.5" in msg:
            msg += " (the Hurst parameter must satisfy 1/2 <= H < 1)"
        print(f"error: config schema violation at {loc}: {msg}",
              file=sys.stderr)
        return 2

    if args.seed is not None:
        cfg["seed"] = args.seed
    workers = args.workers if args.workers is not None else cfg.get("workers", 1)
    outdir = args.out if args.out is not None else cfg.get("out", ".")
    os.makedirs(outdir, exist_ok=True)

    try:
        sub = cfg["subcommand"]
        if sub == "covcheck":
            return run_covcheck(cfg, outdir)
        if sub == "fraccheck":
            return run_fraccheck(cfg, outdir)
        if sub == "simulate":
            return run_simulate(cfg, outdir)
        if sub == "verify":
            return run_verify(cfg, outdir, workers)
        return run_bound(cfg, outdir, workers)
    except AssumptionError as exc:
        print(f"error: assumption check failed: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ExclusionBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
