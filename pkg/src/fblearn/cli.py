"""Config-driven front end: collect, solve, validate and simulate pipelines.

The zero-config case reproduces the data-driven benchmark experiment; every
report embeds the fully resolved configuration so a run can be repeated from
its own output.  Exit codes are stable: 0 certified/ok, 2 uncertified or
failed validation, 3 insufficient data, 4 configuration error.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from .controller import (
    GammaSingularError,
    StateGrid,
    closed_loop_simulate,
    diffeo_domain_check,
    estimate_roa,
    place_poles_brunovsky,
    write_roa_json,
    write_trajectory_csv,
)
from .dictionary import Dictionary, FamilySpec, LibrarySpec, build_standard_library
from .modelbased import IncompleteFitError, SampleGrid, parse_phi, solve_model_based
from .regressor import brunovsky, build_F, data_sufficiency, stack
from .simulator import (
    ControlAffineSystem,
    ExcitationSignal,
    TrajectoryEscapeError,
    collect_dataset,
    make_system,
    read_dataset_csv,
    write_dataset_csv,
    write_dataset_json,
)
from .solver import solution_from_vector, solution_report, solve_linearization, sparsify

__all__ = [
    "ConfigError",
    "EXIT_CERTIFIED",
    "EXIT_CONFIG_ERROR",
    "EXIT_INSUFFICIENT",
    "EXIT_UNCERTIFIED",
    "build_dictionary",
    "build_system",
    "example1_config",
    "example2_config",
    "fresh_point_residual",
    "load_config",
    "main",
]

EXIT_CERTIFIED = 0
EXIT_UNCERTIFIED = 2
EXIT_INSUFFICIENT = 3
EXIT_CONFIG_ERROR = 4


class ConfigError(ValueError):
    pass


def example2_config() -> dict:
    """Data-driven benchmark: rich trig/cubic library, 10 s experiment."""
    return {
        "system": {"name": "slow_manifold", "params": {"mu": -0.5, "lam": 0.2}},
        "dictionary": {
            "domain": {"lower": [-3.0, -3.0], "upper": [3.0, 3.0]},
            "Z": {"coordinates": True, "powers": [2, 3], "sin": True, "cos": True},
            "Y": "same_as_Z",
            "W": {"same_as_Z": True, "prepend_constant": True},
        },
        "brunovsky": {"blocks": [2]},
        "excitation": {
            "kind": "piecewise_constant_uniform",
            "low": -0.1, "high": 0.1, "hold": 1.25, "seed": 0,
        },
        "collection": {
            "duration": 10.0, "sample_period": 0.1, "substeps": 10,
            "x0": {"distribution": "uniform", "low": -0.1, "high": 0.1},
        },
        "solver": {
            "rank_tol": 1e-11, "gap_threshold": 1e6, "equilibrate": True,
            "sparsify": {"enabled": False, "threshold": 1e-6, "max_iters": 20},
        },
        "equilibrium": [0.0, 0.0],
        "phi": {"functions": [], "u_lower": -1.0, "u_upper": 1.0,
                "grid": {"kind": "halton", "count": 500}},
        "validation": {
            "n_points": 1000, "x_lower": -0.5, "x_upper": 0.5,
            "u_lower": -0.5, "u_upper": 0.5, "residual_tol": 1e-8, "seed": 1,
        },
        "controller": {
            "poles": [[-1.0, -2.0]], "Q": None,
            "grid": {"counts": [41, 41], "lower": None, "upper": None},
            "x0": [0.1, -0.1], "duration": 5.0,
            "sample_period": 0.01, "substeps": 10,
        },
        "output": "out",
    }


def example1_config() -> dict:
    """Model-based benchmark: quadratic library and its ten-function basis."""
    cfg = example2_config()
    cfg["dictionary"] = {
        "domain": {"lower": [-1.0, -1.0], "upper": [1.0, 1.0]},
        "Z": {"coordinates": True, "powers": [2]},
        "Y": "same_as_Z",
        "W": {"same_as_Z": True, "prepend_constant": True},
    }
    cfg["phi"] = {
        "functions": ["x1", "x2", "u", "x1^2", "x2^2", "x1*u", "x2*u",
                      "x1^2*x2", "x1^2*u", "x2^2*u"],
        "u_lower": -1.0, "u_upper": 1.0,
        "grid": {"kind": "regular", "shape": [20, 20, 5]},
    }
    cfg["solver"]["rank_tol"] = 1e-8
    return cfg


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: str | None, overrides: dict | None = None) -> dict:
    cfg = example2_config()
    if path is not None:
        try:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
        cfg = _deep_merge(cfg, user)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    return cfg


def build_system(cfg: dict) -> ControlAffineSystem:
    sys_cfg = cfg.get("system", {})
    name = sys_cfg.get("name")
    if not name:
        raise ConfigError("system.name is required")
    try:
        return make_system(name, **(sys_cfg.get("params") or {}))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad system block: {exc}") from exc


def _family(spec, default=None) -> FamilySpec | None:
    if spec is None:
        return default
    if spec == "same_as_Z":
        return None
    if not isinstance(spec, dict):
        raise ConfigError(f"family spec must be a mapping, got {spec!r}")
    known = {"constant", "coordinates", "powers", "cross_degree", "sin", "cos",
             "same_as_Z", "prepend_constant"}
    unknown = set(spec) - known
    if unknown:
        raise ConfigError(f"unknown family keys {sorted(unknown)}")
    if spec.get("same_as_Z"):
        return None
    try:
        return FamilySpec(
            constant=bool(spec.get("constant", False)),
            coordinates=bool(spec.get("coordinates", True)),
            powers=tuple(spec.get("powers", ())),
            cross_degree=int(spec.get("cross_degree", 0)),
            sin=bool(spec.get("sin", False)),
            cos=bool(spec.get("cos", False)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_dictionary(cfg: dict, sys: ControlAffineSystem) -> Dictionary:
    dcfg = cfg.get("dictionary", {})
    dom = dcfg.get("domain", {})
    lower = dom.get("lower")
    upper = dom.get("upper")
    if lower is None or upper is None:
        raise ConfigError("dictionary.domain needs lower and upper")
    if len(lower) != sys.n or len(upper) != sys.n:
        raise ConfigError(
            f"domain box has dimension {len(lower)}, system has n={sys.n}")
    w_cfg = dcfg.get("W") or {}
    try:
        spec = LibrarySpec(
            n=sys.n, m=sys.m, lower=lower, upper=upper,
            z=_family(dcfg.get("Z"), FamilySpec()),
            y=_family(dcfg.get("Y")),
            w=_family({k: v for k, v in w_cfg.items() if k != "prepend_constant"})
            if isinstance(w_cfg, dict) else _family(w_cfg),
            w_prepend_constant=bool(
                w_cfg.get("prepend_constant", True)) if isinstance(w_cfg, dict) else True,
        )
        return build_standard_library(spec)
    except ValueError as exc:
        raise ConfigError(f"bad dictionary block: {exc}") from exc


def _brunovsky(cfg: dict, sys: ControlAffineSystem):
    blocks = cfg.get("brunovsky", {}).get("blocks") or [sys.n]
    try:
        bs = brunovsky(blocks, n=sys.n)
    except ValueError as exc:
        raise ConfigError(f"bad brunovsky block: {exc}") from exc
    if bs.m != sys.m:
        raise ConfigError(f"{len(bs.blocks)} blocks for a system with m={sys.m} inputs")
    return bs


def _excitation(cfg: dict) -> ExcitationSignal:
    e = cfg.get("excitation", {})
    if "seed" not in e:
        raise ConfigError("excitation.seed is required for reproducibility")
    try:
        return ExcitationSignal(
            kind=e.get("kind", "piecewise_constant_uniform"),
            low=float(e.get("low", -0.1)), high=float(e.get("high", 0.1)),
            hold=e.get("hold"), seed=int(e["seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad excitation block: {exc}") from exc


def _initial_state(cfg: dict, sys: ControlAffineSystem, seed: int) -> np.ndarray:
    x0_cfg = cfg.get("collection", {}).get("x0")
    if isinstance(x0_cfg, dict) and "value" not in x0_cfg:
        if x0_cfg.get("distribution", "uniform") != "uniform":
            raise ConfigError("only the uniform x0 distribution is supported")
        rng = np.random.default_rng([int(seed), 1])
        return rng.uniform(float(x0_cfg.get("low", -0.1)),
                           float(x0_cfg.get("high", 0.1)), size=sys.n)
    value = x0_cfg.get("value") if isinstance(x0_cfg, dict) else x0_cfg
    x0 = np.asarray(value, dtype=float)
    if x0.shape != (sys.n,):
        raise ConfigError(f"x0 has shape {x0.shape}, system has n={sys.n}")
    return x0


def _write_json(doc: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def fresh_point_residual(v: np.ndarray, sys: ControlAffineSystem,
                         dic: Dictionary, bs, n_points: int,
                         x_low: float, x_high: float,
                         u_low: float, u_high: float, seed: int) -> float:
    """Max infinity-norm of F(x, u, f+gu) v over fresh random points."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_points):
        x = rng.uniform(x_low, x_high, size=sys.n)
        u = rng.uniform(u_low, u_high, size=sys.m)
        row = build_F(dic, bs, x, u, sys.field_at(x, u)).matrix @ v
        worst = max(worst, float(np.abs(row).max()))
    return worst


def cmd_collect(cfg: dict, out_dir: Path) -> int:
    sys_ = build_system(cfg)
    dic = build_dictionary(cfg, sys_)
    sig = _excitation(cfg)
    col = cfg.get("collection", {})
    x0 = _initial_state(cfg, sys_, sig.seed)
    safety = (10.0 * dic.lower, 10.0 * dic.upper)
    try:
        ds = collect_dataset(
            sys_, x0, sig,
            duration=float(col.get("duration", 10.0)),
            sample_period=float(col.get("sample_period", 0.1)),
            substeps=int(col.get("substeps", 10)),
            safety_box=safety,
        )
    except TrajectoryEscapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_dataset_csv(ds, out_dir / "dataset.csv")
    write_dataset_json(ds, out_dir / "dataset.json")
    print(f"collected {ds.L} samples -> {out_dir / 'dataset.csv'}")
    return EXIT_CERTIFIED


def cmd_solve(cfg: dict, out_dir: Path, dataset_path: Path | None = None) -> int:
    sys_ = build_system(cfg)
    dic = build_dictionary(cfg, sys_)
    bs = _brunovsky(cfg, sys_)
    path = dataset_path or out_dir / "dataset.csv"
    if not Path(path).exists():
        raise ConfigError(f"dataset not found: {path}")
    ds = read_dataset_csv(path)
    if ds.n != sys_.n or ds.m != sys_.m:
        raise ConfigError(
            f"dataset dimensions ({ds.n}, {ds.m}) do not match the system")

    scfg = cfg.get("solver", {})
    rank_tol = float(scfg.get("rank_tol", 1e-8))
    sr = stack(dic, bs, ds, equilibrate=bool(scfg.get("equilibrate", True)))
    suff = data_sufficiency(sr, rank_tol)
    if not suff.row_count_ok:
        print(f"insufficient data: {suff.rows} rows < required "
              f"{suff.required_rank} (mu = {suff.mu})", file=sys.stderr)
        _write_json({"status": "insufficient_data",
                     "rows": suff.rows, "required_rank": suff.required_rank,
                     "mu": suff.mu, "config": cfg},
                    out_dir / "solution.json")
        return EXIT_INSUFFICIENT

    x0 = np.asarray(cfg.get("equilibrium", np.zeros(sys_.n)), dtype=float)
    outcome = solve_linearization(
        sr, dic, bs, x0, rank_tol=rank_tol,
        gap_threshold=float(scfg.get("gap_threshold", 1e6)))

    sp = scfg.get("sparsify", {})
    if sp.get("enabled") and outcome.solution is not None:
        res = sparsify(sr, outcome.solution.v, float(sp.get("threshold", 1e-6)),
                       int(sp.get("max_iters", 20)), dic=dic, x0=x0,
                       rank_tol=rank_tol)
        if res.accepted and res.solution is not None:
            print(f"sparsified to {res.support.size} active entries "
                  f"in {res.iterations} iterations")

    report = solution_report(outcome, dic, method="data_driven")
    report["dataset"] = str(path)
    report["equilibrated"] = sr.equilibrated
    report["config"] = cfg
    _write_json(report, out_dir / "solution.json")
    print(f"solve status: {outcome.status} "
          f"(nullity={outcome.nullspace.nullity}, gap={outcome.nullspace.gap:.3g})")
    for msg in outcome.messages:
        print(f"  note: {msg}")
    return EXIT_CERTIFIED if outcome.certified else EXIT_UNCERTIFIED


def cmd_modelbased(cfg: dict, out_dir: Path) -> int:
    sys_ = build_system(cfg)
    dic = build_dictionary(cfg, sys_)
    bs = _brunovsky(cfg, sys_)
    pcfg = cfg.get("phi", {})
    funcs = pcfg.get("functions") or []
    if not funcs:
        raise ConfigError("phi.functions must be declared for the model-based path")
    try:
        phi = parse_phi(funcs, sys_.n, sys_.m)
    except ValueError as exc:
        raise ConfigError(f"bad phi basis: {exc}") from exc

    gcfg = pcfg.get("grid", {})
    grid = SampleGrid(
        dic.lower, dic.upper,
        float(pcfg.get("u_lower", -1.0)) * np.ones(sys_.m),
        float(pcfg.get("u_upper", 1.0)) * np.ones(sys_.m),
        kind=gcfg.get("kind", "halton"),
        count=int(gcfg.get("count", 400)),
        shape=tuple(gcfg.get("shape", ())),
    )
    scfg = cfg.get("solver", {})
    x0 = np.asarray(cfg.get("equilibrium", np.zeros(sys_.n)), dtype=float)
    try:
        outcome = solve_model_based(
            sys_, dic, bs, phi, grid, x0,
            rank_tol=float(scfg.get("rank_tol", 1e-8)),
            gap_threshold=float(scfg.get("gap_threshold", 1e6)))
    except IncompleteFitError as exc:
        print(f"phi basis incomplete: {exc}", file=sys.stderr)
        _write_json({"status": "phi_incomplete", "detail": str(exc),
                     "config": cfg}, out_dir / "solution.json")
        return EXIT_UNCERTIFIED

    report = solution_report(outcome, dic, method="model_based")
    report["phi"] = phi.labels()
    report["config"] = cfg
    _write_json(report, out_dir / "solution.json")
    print(f"model-based status: {outcome.status} "
          f"(nullity={outcome.nullspace.nullity})")
    return EXIT_CERTIFIED if outcome.certified else EXIT_UNCERTIFIED


def _load_solution(cfg: dict, out_dir: Path, solution_path: Path | None):
    path = solution_path or out_dir / "solution.json"
    if not Path(path).exists():
        raise ConfigError(f"solution report not found: {path}")
    with open(path) as fh:
        report = json.load(fh)
    if report.get("solution") is None:
        raise ConfigError(f"report {path} carries no solution (status "
                          f"{report.get('status')!r})")
    return report


def cmd_validate(cfg: dict, out_dir: Path, solution_path: Path | None = None) -> int:
    report = _load_solution(cfg, out_dir, solution_path)
    sys_ = build_system(cfg)
    dic = build_dictionary(cfg, sys_)
    bs = _brunovsky(cfg, sys_)
    x0 = np.asarray(cfg.get("equilibrium", np.zeros(sys_.n)), dtype=float)
    v = np.asarray(report["solution"]["v"], dtype=float)
    if not np.any(v):
        print("error: zero solution vector is excluded", file=sys.stderr)
        return EXIT_UNCERTIFIED
    sol = solution_from_vector(v, dic, x0,
                               certified=bool(report["solution"].get("certified")))

    vcfg = cfg.get("validation", {})
    tol = float(vcfg.get("residual_tol", 1e-8))
    worst = fresh_point_residual(
        sol.v, sys_, dic, bs, int(vcfg.get("n_points", 1000)),
        float(vcfg.get("x_lower", -0.5)), float(vcfg.get("x_upper", 0.5)),
        float(vcfg.get("u_lower", -0.5)), float(vcfg.get("u_upper", 0.5)),
        int(vcfg.get("seed", 1)))
    vmax = float(np.abs(sol.v).max())
    passed = worst <= tol * vmax

    ccfg = cfg.get("controller", {})
    gcfg = ccfg.get("grid", {})
    grid = StateGrid(
        np.asarray(gcfg.get("lower") or dic.lower, dtype=float),
        np.asarray(gcfg.get("upper") or dic.upper, dtype=float),
        tuple(gcfg.get("counts", [41] * sys_.n)),
    )
    doc = {
        "fresh_points": int(vcfg.get("n_points", 1000)),
        "max_residual": worst,
        "residual_bound": tol * vmax,
        "passed": bool(passed),
        "config": cfg,
    }
    try:
        region = diffeo_domain_check(sol, dic, grid)
        doc["diffeo_box"] = {"lower": region.box_lower.tolist(),
                             "upper": region.box_upper.tolist(),
                             "pass_fraction": region.pass_fraction}
        sf = place_poles_brunovsky(bs, ccfg.get("poles", [[-1.0, -2.0]]))
        roa = estimate_roa(sol, sf, dic, grid, region=region)
        doc["roa"] = {"c": roa.c, "P": roa.P.tolist(),
                      "n_level_samples": roa.n_level_samples}
    except ValueError as exc:
        doc["region_error"] = str(exc)
    _write_json(doc, out_dir / "validation.json")
    print(f"validation {'passed' if passed else 'FAILED'}: "
          f"max residual {worst:.3g} vs bound {tol * vmax:.3g}")
    return EXIT_CERTIFIED if passed else EXIT_UNCERTIFIED


def cmd_simulate(cfg: dict, out_dir: Path, solution_path: Path | None = None,
                 force: bool = False) -> int:
    report = _load_solution(cfg, out_dir, solution_path)
    if not report["solution"].get("certified") and not force:
        print("solution is not certified; pass --force to simulate anyway",
              file=sys.stderr)
        return EXIT_UNCERTIFIED
    sys_ = build_system(cfg)
    dic = build_dictionary(cfg, sys_)
    bs = _brunovsky(cfg, sys_)
    x0_eq = np.asarray(cfg.get("equilibrium", np.zeros(sys_.n)), dtype=float)
    sol = solution_from_vector(np.asarray(report["solution"]["v"], dtype=float),
                               dic, x0_eq, certified=True)
    ccfg = cfg.get("controller", {})
    sf = place_poles_brunovsky(bs, ccfg.get("poles", [[-1.0, -2.0]]))
    x0 = np.asarray(ccfg.get("x0", [0.0] * sys_.n), dtype=float)
    Q = None if ccfg.get("Q") is None else np.asarray(ccfg["Q"], dtype=float)
    try:
        traj = closed_loop_simulate(
            sys_, sol, sf, dic, x0,
            duration=float(ccfg.get("duration", 5.0)),
            sample_period=float(ccfg.get("sample_period", 0.01)),
            substeps=int(ccfg.get("substeps", 10)), Q=Q)
    except GammaSingularError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    write_trajectory_csv(traj, out_dir / "trajectory.csv")

    gcfg = ccfg.get("grid", {})
    grid = StateGrid(
        np.asarray(gcfg.get("lower") or dic.lower, dtype=float),
        np.asarray(gcfg.get("upper") or dic.upper, dtype=float),
        tuple(gcfg.get("counts", [41] * sys_.n)),
    )
    doc = {
        "final_state_norm": float(np.linalg.norm(traj.x[-1])),
        "max_eta_error": traj.max_eta_error,
        "lyapunov_monotone": bool(
            np.all(np.diff(traj.v_lyap) <= 1e-9 * max(1.0, traj.v_lyap[0]))),
        "config": cfg,
    }
    try:
        roa = estimate_roa(sol, sf, dic, grid, Q=Q)
        write_roa_json(roa, out_dir / "roa.json")
        doc["roa_c"] = roa.c
    except ValueError as exc:
        doc["roa_error"] = str(exc)
    _write_json(doc, out_dir / "simulation.json")
    print(f"simulated {traj.t[-1]:g} s: |x(end)| = {doc['final_state_norm']:.3g}, "
          f"max eta deviation = {traj.max_eta_error:.3g}")
    return EXIT_CERTIFIED


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fblearn",
        description="Learn feedback-linearizing coordinates from models or data")
    ap.add_argument("--config", help="YAML experiment configuration")
    ap.add_argument("--out", help="output directory (default from config)")
    ap.add_argument("--seed", type=int, help="override the excitation seed")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("collect", help="run the experiment and write the dataset")
    sp = sub.add_parser("solve", help="solve the data-driven problem")
    sp.add_argument("--dataset", help="dataset CSV (default <out>/dataset.csv)")
    sub.add_parser("modelbased", help="solve the model-based problem")
    vp = sub.add_parser("validate", help="fresh-point residuals, domain and RoA")
    vp.add_argument("--solution", help="solution report JSON")
    mp = sub.add_parser("simulate", help="closed-loop simulation")
    mp.add_argument("--solution", help="solution report JSON")
    mp.add_argument("--force", action="store_true",
                    help="simulate an uncertified solution")
    sub.add_parser("repro-example1", help="model-based benchmark end to end")
    sub.add_parser("repro-example2", help="data-driven benchmark end to end")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "repro-example1":
            cfg = example1_config()
        elif args.command == "repro-example2":
            cfg = example2_config()
        else:
            cfg = load_config(args.config)
        if args.seed is not None:
            cfg = _deep_merge(cfg, {"excitation": {"seed": args.seed}})
        out_dir = Path(args.out or cfg.get("output", "out"))
        out_dir.mkdir(parents=True, exist_ok=True)

        if args.command == "collect":
            return cmd_collect(cfg, out_dir)
        if args.command == "solve":
            return cmd_solve(cfg, out_dir,
                             Path(args.dataset) if args.dataset else None)
        if args.command == "modelbased":
            return cmd_modelbased(cfg, out_dir)
        if args.command == "validate":
            return cmd_validate(cfg, out_dir,
                                Path(args.solution) if args.solution else None)
        if args.command == "simulate":
            return cmd_simulate(cfg, out_dir,
                                Path(args.solution) if args.solution else None,
                                force=args.force)
        if args.command == "repro-example1":
            code = cmd_modelbased(cfg, out_dir)
            if code != EXIT_CERTIFIED:
                return code
            code = cmd_validate(cfg, out_dir)
            if code != EXIT_CERTIFIED:
                return code
            return cmd_simulate(cfg, out_dir)
        if args.command == "repro-example2":
            code = cmd_collect(cfg, out_dir)
            if code != EXIT_CERTIFIED:
                return code
            code = cmd_solve(cfg, out_dir)
            if code != EXIT_CERTIFIED:
                return code
            code = cmd_validate(cfg, out_dir)
            if code != EXIT_CERTIFIED:
                return code
            return cmd_simulate(cfg, out_dir)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
