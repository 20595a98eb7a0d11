"""Command-line entry point for reproducible batch workflows.

Subcommands: kr, fit, rate, verify, spline, sample, eval.
Global flags: --config PATH, --out DIR, --seed U64, --threads N
(CUBEFLOW_THREADS is the environment fallback for --threads).

Exit codes: 0 success, 1 runtime failure, 2 config error, 3 bound-suite
failure. Configs are strict JSON: unknown keys are rejected, and every run
echoes its fully-resolved config next to its outputs. Output files are
written atomically (temp file + rename), with sorted JSON keys so a fixed
seed gives byte-identical primary outputs regardless of thread count.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from typing import Dict, Optional

import numpy as np

from . import analysis, core, mle, splinenn, transport
from .core import make_density, uniform_density, RngStream
from .flow import FlowConfig, pullback_density
from .transport import NonProductReference


class ConfigError(Exception):
    pass


def _atomic_write(path: str, text: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _check_keys(doc: dict, allowed: Dict[str, type], where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    for key in doc:
        if key not in allowed:
            raise ConfigError(
                f"{where}: unknown key {key!r} (allowed: {sorted(allowed)})")
    return doc


def _density_from(doc: Optional[dict], where: str, default: str = "uniform",
                  default_params: Optional[dict] = None):
    if doc is None:
        return make_density(default, **(default_params or {}))
    _check_keys(doc, {"name": str, "params": dict}, where)
    try:
        return make_density(doc["name"], **doc.get("params", {}))
    except KeyError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} col {exc.colno}: {exc.msg}")
    except OSError as exc:
        raise ConfigError(str(exc))


def _echo_config(cfg: dict, outdir: str):
    _atomic_write(os.path.join(outdir, "resolved_config.json"),
                  json.dumps(cfg, sort_keys=True, indent=2) + "\n")


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------

def cmd_kr(cfg: dict, outdir: str, seed: int) -> int:
    _check_keys(cfg, {"density": dict, "reference": dict, "grid_res": int}, "kr")
    p0 = _density_from(cfg.get("density"), "kr.density")
    ref = _density_from(cfg.get("reference"), "kr.reference",
                        default_params={"dim": p0.dim})
    T = transport.build_kr_map(p0, ref, cfg.get("grid_res"))
    grid = core.default_grid(p0.dim)
    residual = transport.kr_pushforward_residual(T, p0, ref, grid)
    _echo_config(cfg, outdir)
    _atomic_write(os.path.join(outdir, "map.json"), T.to_json())
    report = {"density": p0.name, "reference": ref.name, "dim": p0.dim,
              "pushforward_residual": residual}
    if p0.name == "affine1d" and ref.name == "uniform":
        t_half = float(T.forward(np.array([[0.5]]))[0, 0])
        report["T_at_half"] = t_half
        report["T_at_half_expected"] = 0.375
    _atomic_write(os.path.join(outdir, "kr_report.json"),
                  json.dumps(report, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_fit(cfg: dict, outdir: str, seed: int) -> int:
    _check_keys(cfg, {"density": dict, "reference": dict, "field": dict,
                      "train": dict, "n_samples": int, "flow_steps": int}, "fit")
    p0 = _density_from(cfg.get("density"), "fit.density", default="affine1d")
    ref = _density_from(cfg.get("reference"), "fit.reference",
                        default_params={"dim": p0.dim})
    n = cfg.get("n_samples", 1000)
    fdoc = _check_keys(cfg.get("field", {}),
                       {"kind": str, "m": int, "n_res": int}, "fit.field")
    tdoc = _check_keys(cfg.get("train", {}),
                       {"step_size": float, "iterations": int,
                        "norm_ball_r": float}, "fit.train")

    kr = transport.build_kr_map(p0, ref)
    rng = RngStream(seed, stream_id=1)
    samples = kr.inverse(rng.uniform(n, p0.dim))
    data = mle.Dataset(samples, source=f"{p0.name}/seed={seed}")
    kind = fdoc.get("kind", "spline")
    if kind != "spline":
        raise ConfigError("fit.field.kind: only 'spline' is wired to the CLI")
    model = mle.SplineModel(p0.dim, m=fdoc.get("m", 3), n_res=fdoc.get("n_res", 6))
    flow_cfg = FlowConfig(n_steps=cfg.get("flow_steps", 32),
                          jacobian_mode="logdet_trace")
    tcfg = mle.TrainConfig(step_size=tdoc.get("step_size", 0.05),
                           iterations=tdoc.get("iterations", 150),
                           norm_ball_r=tdoc.get("norm_ball_r", 8.0),
                           seed=seed, flow=flow_cfg)
    fitted, trace = mle.fit(model, data, ref, tcfg)
    _echo_config(cfg, outdir)
    _atomic_write(os.path.join(outdir, "trace.csv"), trace.to_csv())
    _atomic_write(os.path.join(outdir, "field.json"), json.dumps({
        "kind": "spline", "dim": p0.dim, "m": fitted.m, "n_res": fitted.n_res,
        "coeffs": np.asarray(fitted.params).ravel().tolist(),
    }, sort_keys=True))
    grid = core.default_grid(p0.dim)
    est = lambda x: pullback_density(fitted.numpy_field(), ref, x, flow_cfg)
    h = analysis.hellinger(p0, est, grid, p0.dim)
    _atomic_write(os.path.join(outdir, "fit_summary.json"), json.dumps({
        "target": p0.name, "n": n, "h2_vs_target": h.value ** 2,
        "final_objective": trace.best_objective[-1] if trace.best_objective else None,
    }, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_rate(cfg: dict, outdir: str, seed: int) -> int:
    _check_keys(cfg, {"target": str, "n_grid": list, "replicates": int,
                      "spline_m": int, "resolution_scale": float,
                      "resolution_power": float, "iterations": int,
                      "step_size": float, "norm_ball_r": float,
                      "flow_steps": int, "time_constant": bool,
                      "optimizer": str}, "rate")
    exp = analysis.RateExperiment(
        target=cfg.get("target", "affine1d"),
        n_grid=cfg.get("n_grid", [250, 500, 1000, 2000]),
        replicates=cfg.get("replicates", 5),
        seed=seed,
        spline_m=cfg.get("spline_m", 3),
        resolution_scale=cfg.get("resolution_scale", 0.5),
        resolution_power=cfg.get("resolution_power", 0.5),
        iterations=cfg.get("iterations", 100),
        step_size=cfg.get("step_size", 0.05),
        norm_ball_r=cfg.get("norm_ball_r", 256.0),
        flow_steps=cfg.get("flow_steps", 16),
        time_constant=cfg.get("time_constant", True),
        optimizer=cfg.get("optimizer", "lbfgs"),
    )
    exp = analysis.rate_experiment(exp)
    _echo_config(cfg, outdir)
    _atomic_write(os.path.join(outdir, "rate.json"), exp.to_json() + "\n")
    _atomic_write(os.path.join(outdir, "rate_cells.csv"), exp.cells_csv())
    return 0


def cmd_verify(cfg: dict, outdir: str, seed: int) -> int:
    _check_keys(cfg, {"n_probe": int}, "verify")
    report = analysis.run_bound_suite(n_probe=cfg.get("n_probe", 128))
    _echo_config(cfg, outdir)
    _atomic_write(os.path.join(outdir, "bounds.json"), report.to_json() + "\n")
    _atomic_write(os.path.join(outdir, "bounds.txt"), report.table() + "\n")
    return 0 if report.passed else 3


_FUNCTION_REGISTRY = {
    "sin2pi": lambda x: np.sin(2 * np.pi * x[:, 0]),
    "cos2pi": lambda x: np.cos(2 * np.pi * x[:, 0]),
    "bump": lambda x: np.exp(-8.0 * (x[:, 0] - 0.5) ** 2),
    # truncated powers with the break off every dyadic knot lattice; their
    # limited smoothness saturates the n^{-k} quasi-interpolation rate
    "kink2": lambda x: np.maximum(0.0, x[:, 0] - 1.0 / np.pi) ** 2,
    "kink3": lambda x: np.maximum(0.0, x[:, 0] - 1.0 / np.pi) ** 3,
}


def cmd_spline(cfg: dict, outdir: str, seed: int) -> int:
    _check_keys(cfg, {"m": int, "k": int, "n_grid": list, "function": str,
                      "compile": bool}, "spline")
    m = cfg.get("m", 3)
    k = cfg.get("k", 2)
    n_grid = cfg.get("n_grid", [8, 16, 32, 64])
    fname = cfg.get("function", "sin2pi")
    if fname not in _FUNCTION_REGISTRY:
        raise ConfigError(f"spline.function: unknown {fname!r}")
    f = _FUNCTION_REGISTRY[fname]
    do_compile = cfg.get("compile", True)
    if do_compile and m < max(3, k + 1):
        raise splinenn.UnsupportedOrder("compile requests need m >= max(3, k+1)")

    probes = 0.02 + 0.96 * analysis.halton_probes(1, 400)
    rows = ["n,sup_err_r0,sup_err_r1"]
    errs0, errs1 = [], []
    for n in n_grid:
        qi = splinenn.quasi_interpolate(f, m, n, k, d=1)
        keep = np.abs(probes * n - np.round(probes * n)).min(axis=1) >= 1e-6
        e0 = splinenn.quasi_interp_error(f, qi, 0, probes[keep])
        e1 = splinenn.quasi_interp_error(f, qi, 1, probes[keep])
        errs0.append(e0)
        errs1.append(e1)
        rows.append(f"{n},{e0!r},{e1!r}")
    logn = np.log(np.asarray(n_grid, dtype=float))
    s0 = float(np.polyfit(logn, np.log(errs0), 1)[0])
    s1 = float(np.polyfit(logn, np.log(errs1), 1)[0])
    rows.append(f"slope,{s0!r},{s1!r}")
    _echo_config(cfg, outdir)
    _atomic_write(os.path.join(outdir, "spline_errors.csv"), "\n".join(rows) + "\n")

    if do_compile:
        qi = splinenn.quasi_interpolate(f, m, n_grid[-1], k, d=1)
        cn = splinenn.compile_to_network(qi)
        from .fields import network_to_json
        _atomic_write(os.path.join(outdir, "compiled_network.json"),
                      network_to_json(cn.net))
        audit = splinenn.audit_against_bounds(cn, cn.f_sup, cn.N_sub)
        _atomic_write(os.path.join(outdir, "size_audit.json"), json.dumps({
            "L": audit.L, "W": audit.W, "S": audit.S, "B": audit.B,
            "N": audit.N, "checks": audit.checks, "passed": audit.passed,
        }, sort_keys=True, indent=2) + "\n")
    return 0


def cmd_sample(cfg: dict, outdir: str, seed: int) -> int:
    _check_keys(cfg, {"density": dict, "n": int}, "sample")
    p0 = _density_from(cfg.get("density"), "sample.density", default="affine1d")
    n = cfg.get("n", 1000)
    kr = transport.build_kr_map(p0, uniform_density(p0.dim))
    rng = RngStream(seed, stream_id=1)
    pts = kr.inverse(rng.uniform(n, p0.dim))
    header = ",".join(f"x{i+1}" for i in range(p0.dim))
    lines = [header] + [",".join(repr(float(v)) for v in row) for row in pts]
    _echo_config(cfg, outdir)
    _atomic_write(os.path.join(outdir, "samples.csv"), "\n".join(lines) + "\n")
    return 0


def cmd_eval(cfg: dict, outdir: str, seed: int) -> int:
    _check_keys(cfg, {"density": dict, "points": list, "grid_points": int}, "eval")
    p0 = _density_from(cfg.get("density"), "eval.density", default="affine1d")
    if "points" in cfg:
        pts = np.asarray(cfg["points"], dtype=float)
        if pts.ndim != 2 or pts.shape[1] != p0.dim:
            raise ConfigError("eval.points: expected a list of d-vectors")
    else:
        npts = cfg.get("grid_points", 101)
        axes = [np.linspace(0, 1, npts)] * p0.dim
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
    vals = p0(pts)
    header = ",".join(f"x{i+1}" for i in range(p0.dim)) + ",density"
    lines = [header] + [",".join(repr(float(v)) for v in row)
                        + f",{float(vals[i])!r}" for i, row in enumerate(pts)]
    _echo_config(cfg, outdir)
    _atomic_write(os.path.join(outdir, "density.csv"), "\n".join(lines) + "\n")
    return 0


_COMMANDS = {
    "kr": cmd_kr,
    "fit": cmd_fit,
    "rate": cmd_rate,
    "verify": cmd_verify,
    "spline": cmd_spline,
    "sample": cmd_sample,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cubeflow",
        description="Density estimation on the unit cube via ODE flow maps")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", default=None, help="JSON config path")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker hint; results are schedule-independent")
    args = parser.parse_args(argv)

    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("CUBEFLOW_THREADS", "1"))
    del threads  # recorded for interface parity; all kernels are deterministic

    try:
        cfg = _load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        return _COMMANDS[args.command](cfg, args.out, args.seed)
    except (ConfigError, NonProductReference, splinenn.UnsupportedOrder) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
