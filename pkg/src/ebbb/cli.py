"""Command-line front end.

    ebbb run <config.json> [--stage N] [--seed S] [--n N] [--out DIR]
    ebbb verify <config.json> [--stage N] [--strict]

The config is a JSON object with blocks ``experiment``, ``params``,
``ensemble`` and ``output``. Exit codes: 0 success, 1 failed verification,
2 configuration error, 3 engine error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .dynamics import EngineError
from .ensemble import (
    THREADS_ENV,
    EnsembleConfig,
    EnsembleStats,
    exact_spin_correlation,
    exact_transport,
    run_ensemble,
    single_spin_mean,
    spin_correlation,
    wavefunction_history,
)
from .models import (
    EprbParams,
    ExperimentSpec,
    LarmorParams,
    SurrealParams,
    build_eprb_stage1,
    build_eprb_stage2,
    build_larmor,
    build_surreal,
    check_spec,
)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_ENGINE = 0, 1, 2, 3

PROBABILITY_COLUMNS = ("time", "label", "exact", "frequency", "se")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


# -- configuration ----------------------------------------------------------

_PARAM_TYPES = {"larmor": LarmorParams, "eprb": EprbParams, "surreal": SurrealParams}
_TOP = {"experiment", "params", "ensemble", "output", "stage"}
_ENSEMBLE = {"n": 1000, "seed": 0, "workers": None, "record_every": 1}
_OUTPUT = {"directory": "ebbb-out", "max_trajectories": 100}


def _number(path: str, v, kind=float):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {v!r}")
    if kind is int and int(v) != v:
        raise ConfigError(f"{path}: expected an integer, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(f"{path}: must be finite")
    return kind(v)


def _complex(path: str, v) -> complex:
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ConfigError(f"{path}: complex values are written [re, im]")
        return complex(_number(f"{path}[0]", v[0]), _number(f"{path}[1]", v[1]))
    return complex(_number(path, v))


def _param_value(exp: str, name: str, v):
    path = f"params.{name}"
    if exp == "eprb" and name.startswith("gamma_alpha"):
        z = _complex(path, v)
        return z.real if z.imag == 0 else z
    if exp == "larmor" and name == "coefficients":
        if not isinstance(v, (list, tuple)) or len(v) != 2:
            raise ConfigError(f"{path}: expected two coefficients")
        return tuple(_complex(f"{path}[{i}]", c) for i, c in enumerate(v))
    if name in ("guidance_mode",):
        if not isinstance(v, str):
            raise ConfigError(f"{path}: expected a string")
        return v
    if name == "single_packet":
        if not isinstance(v, bool):
            raise ConfigError(f"{path}: expected true or false")
        return v
    if name in ("lattice_size", "n_substeps", "particle"):
        return _number(path, v, int)
    if name == "t_final" and v is None:
        return None
    return _number(path, v)


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}") from None
    return validate_config(raw)


def validate_config(raw: Any) -> dict:
    """Check a raw config and fill defaults; raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = set(raw) - _TOP
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown top-level field")
    exp = raw.get("experiment")
    if exp not in _PARAM_TYPES:
        raise ConfigError(f"experiment: expected one of {sorted(_PARAM_TYPES)}, got {exp!r}")

    params = raw.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("params: expected an object")
    allowed = {f.name for f in fields(_PARAM_TYPES[exp])} | ({"particle"} if exp == "eprb" else set())
    for name in params:
        if name not in allowed:
            raise ConfigError(f"params.{name}: unknown parameter for {exp}")
    if "eps" not in params:
        raise ConfigError("params.eps: required field is missing")
    clean = {k: _param_value(exp, k, v) for k, v in params.items()}
    if clean["eps"] <= 0:
        raise ConfigError("params.eps: must be positive")
    if exp == "eprb":
        # stages have unit duration, so eps fixes the number of sub-steps
        n = clean.setdefault("n_substeps", max(1, round(1.0 / clean["eps"])))
        if abs(clean["eps"] * n - 1.0) > 1e-9:
            raise ConfigError("params.eps: must equal 1 / n_substeps (stages have unit duration)")
        for g in ("gamma_alpha_1", "gamma_alpha_2"):
            if g in clean and abs(clean[g]) > 1:
                raise ConfigError(f"params.{g}: must satisfy |gamma| <= 1, got {clean[g]!r}")
        if clean.get("particle", 1) not in (1, 2):
            raise ConfigError("params.particle: must be 1 or 2")

    stage = raw.get("stage", 2 if exp == "eprb" else None)
    if exp == "eprb" and stage not in (1, 2):
        raise ConfigError(f"stage: must be 1 or 2, got {stage!r}")
    if exp != "eprb" and raw.get("stage") is not None:
        raise ConfigError("stage: only the eprb experiment has stages")

    ens = dict(_ENSEMBLE)
    for k, v in raw.get("ensemble", {}).items():
        if k not in _ENSEMBLE:
            raise ConfigError(f"ensemble.{k}: unknown field")
        if k == "workers" and v is None:
            continue
        ens[k] = _number(f"ensemble.{k}", v, int)
        if k != "seed" and ens[k] < 1:
            raise ConfigError(f"ensemble.{k}: must be at least 1")
    out = dict(_OUTPUT)
    for k, v in raw.get("output", {}).items():
        if k not in _OUTPUT:
            raise ConfigError(f"output.{k}: unknown field")
        out[k] = str(v) if k == "directory" else _number(f"output.{k}", v, int)

    cfg = {"experiment": exp, "params": clean, "ensemble": ens, "output": out}
    if stage is not None:
        cfg["stage"] = stage
    build_spec(cfg)  # parameter invariants, before any computation
    return cfg


def build_spec(cfg: dict) -> ExperimentSpec:
    exp = cfg["experiment"]
    kw = dict(cfg["params"])
    particle = kw.pop("particle", 1)
    try:
        params = _PARAM_TYPES[exp](**kw)
    except ValueError as err:
        raise ConfigError(f"params: {err}") from None
    if exp == "larmor":
        return build_larmor(params)
    if exp == "surreal":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return build_surreal(params)
    if cfg.get("stage", 2) == 1:
        return build_eprb_stage1(params, particle=particle)
    return build_eprb_stage2(params)


def apply_overrides(cfg: dict, args) -> dict:
    cfg = json.loads(json.dumps(cfg, default=_json_default))
    if getattr(args, "stage", None) is not None:
        if cfg["experiment"] != "eprb":
            raise ConfigError("--stage: only the eprb experiment has stages")
        cfg["stage"] = args.stage
    for flag, key in (("seed", "seed"), ("n", "n")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg["ensemble"][key] = v
    if getattr(args, "out", None):
        cfg["output"]["directory"] = args.out
    return validate_config(cfg)


def _json_default(o):
    if isinstance(o, complex):
        return [o.real, o.imag]
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


# -- output -----------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def write_probabilities(stats: EnsembleStats, path: Path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PROBABILITY_COLUMNS)
        live = (stats.exact.max(axis=0) > 0) | (stats.freq.max(axis=0) > 0)
        for i, t in enumerate(stats.times):
            for k in np.flatnonzero(live):
                w.writerow([_fmt(t), stats.labels[k], _fmt(stats.exact[i, k]),
                            _fmt(stats.freq[i, k]), _fmt(stats.se[i, k])])


def trajectory_columns(spec: ExperimentSpec) -> list[str]:
    beables = {
        "larmor": ["m1", "m2"],
        "eprb-stage1": ["phi", "x", "spin"],
        "eprb-stage2": ["phi1", "x1", "sigma1", "phi2", "x2", "sigma2"],
        "surreal": ["x", "internal"],
    }[spec.name]
    angles = []
    if spec.frames != "none":
        for i in range(1, spec.space.n_particles + 1):
            angles += [f"theta{i}", f"phi_angle{i}"]
    return beables + angles


def write_trajectories(stats: EnsembleStats, path: Path, limit: int):
    spec = stats.spec
    cols = trajectory_columns(spec)
    names = [c for c in cols if c in spec.decoders]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "time"] + cols)
        times = spec.times()
        for k in range(min(limit, stats.n)):
            for t in stats.steps:
                b = stats.beables[t, k]
                row = [str(k), _fmt(times[t])]
                row += [spec.decoders[c].names[int(spec.decode(c, b))] for c in names]
                ang = stats.angles(int(t), k)
                if ang is not None:
                    row += [_fmt(v) for pair in ang for v in pair]
                w.writerow(row)


def observables(stats: EnsembleStats) -> dict:
    spec = stats.spec
    out: dict = {}
    if spec.name == "eprb-stage2":
        psi = wavefunction_history(spec)[-1]
        exact = exact_spin_correlation(spec, psi)
        out["correlations"] = [
            {"phi1": a, "phi2": b, "C": c, "se": se, "n": n, "exact": exact[(a, b)]}
            for (a, b), (c, se, n) in spin_correlation(stats).items()
        ]
        out["means"] = [
            {"particle": i, "phi": a, "mean": m, "se": se, "n": n}
            for (i, a), (m, se, n) in single_spin_mean(stats).items()
        ]
    elif spec.name == "surreal":
        x = spec.decoders["x"].value(spec.composite_of(stats.beables))
        crossed = np.any(np.sign(x) != np.sign(x[0])[None, :], axis=0)
        out["crossing_fraction"] = float(crossed.mean())
    elif spec.name == "larmor" and stats.frames[0] is not None:
        t = spec.times()
        phi = np.unwrap(np.array([f.phi[0] for f in stats.frames]), axis=0)
        theta = np.array([f.theta[0] for f in stats.frames])
        out["phi_slopes"] = [float(np.polyfit(t, phi[:, i], 1)[0]) for i in range(2)]
        out["theta_spread"] = [float(v) for v in np.ptp(theta, axis=0)]
    return out


def write_summary(stats: EnsembleStats, cfg: dict, path: Path):
    summary = {
        "version": __version__,
        "experiment": stats.spec.name,
        "seed": cfg["ensemble"]["seed"],
        "n_trajectories": stats.n,
        "config": cfg,
        "counters": stats.counters,
        "observables": observables(stats),
        "columns": {
            "probabilities.csv": list(PROBABILITY_COLUMNS),
            "trajectories.csv": ["trajectory", "time"] + trajectory_columns(stats.spec),
        },
    }
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        text = json.dumps(summary, indent=2, default=_json_default, allow_nan=True)
    path.write_text(text + "\n", encoding="utf-8")


# -- commands ---------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = apply_overrides(load_config(args.config), args)
    spec = build_spec(cfg)
    ens = cfg["ensemble"]
    ecfg = EnsembleConfig(ens["n"], ens["seed"], ens["record_every"], ens["workers"])
    try:
        stats = run_ensemble(spec, ecfg)
    except EngineError as err:
        print(f"engine error: {err}", file=sys.stderr)
        return EXIT_ENGINE
    out = Path(cfg["output"]["directory"])
    out.mkdir(parents=True, exist_ok=True)
    write_probabilities(stats, out / "probabilities.csv")
    write_trajectories(stats, out / "trajectories.csv", cfg["output"]["max_trajectories"])
    write_summary(stats, cfg, out / "summary.json")
    print(f"{spec.name}: {stats.n} trajectories, {len(stats.times)} records -> {out}")
    return EXIT_OK


def verify_spec(spec: ExperimentSpec, strict: bool = False) -> tuple[bool, list[str]]:
    """Invariant checks without sampling; returns ``(ok, report_lines)``."""
    lines, ok = [], True

    def check(name, passed, detail=""):
        nonlocal ok
        ok &= bool(passed)
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name}{': ' + detail if detail else ''}")

    problems = check_spec(spec)
    check("structure (normalisation, unitarity, sub-step powers)", not problems, "; ".join(problems))
    try:
        rep = exact_transport(spec)
    except EngineError as err:
        check("step refinement", False, str(err))
        return ok, lines
    check("frames unitary", rep.frames_unitary)
    check("master equation transport", rep.max_error < 1e-10, f"max error {rep.max_error:.2e}")
    if rep.violations:
        step, src, p, total = rep.violations[0]
        detail = (
            f"{rep.violating_steps} step(s) violate the consistency condition at the default "
            f"step size; first at time index {step} (source {src}, P={p:.3g}, jump sum {total:.4g}); "
            f"resolved by refinement down to eps={rep.min_eps:.3g}"
        )
    else:
        detail = "no violations at the default step size"
    check("consistency condition", not (strict and rep.violations), detail)
    return ok, lines


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    if args.stage is not None:
        cfg = apply_overrides(cfg, args)
    spec = build_spec(cfg)
    ok, lines = verify_spec(spec, strict=args.strict)
    print(f"verify {spec.name}")
    for line in lines:
        print("  " + line)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_VERIFY


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ebbb", description="Stochastic beable trajectory simulations.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an ensemble and write CSV/JSON results")
    run.add_argument("config")
    run.add_argument("--stage", type=int, choices=(1, 2))
    run.add_argument("--seed", type=int)
    run.add_argument("--n", type=int)
    run.add_argument("--out")
    run.set_defaults(func=cmd_run)
    ver = sub.add_parser("verify", help="check invariants along the exact evolution")
    ver.add_argument("config")
    ver.add_argument("--stage", type=int, choices=(1, 2))
    ver.add_argument("--strict", action="store_true",
                     help="treat consistency violations at the default step as failures")
    ver.set_defaults(func=cmd_verify)
    p.epilog = f"Set {THREADS_ENV} to override the worker count."
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
