"""Command-line front end.

Exit codes: 0 success, 1 validation / hypothesis / threshold failure,
2 numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import math
import os
import re
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import experiments as ex
from .kernels import kernel_mixed_bound
from .noise import CholeskyError, GridSpec, NoiseSampler, write_noise_csv
from .rates import (
    DEFAULT_SAFETY,
    HurstVector,
    HypothesisError,
    check_hypothesis,
    exponent_report,
    smoothing_parameters,
)
from .solver import DivergenceError, NonlinearitySpec, SourceSpec, mild_residual, solve_scheme, write_solution_csv
from .spectral import build_plan, mollifier_table

SEED_ENV = "FRACPOISSON_SEED"
EXIT_OK, EXIT_FAIL, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    """Invalid configuration file (message carries line context when known)."""


# -- configuration ------------------------------------------------------------------

# key -> (expected python types, description)
CONFIG_KEYS: dict[str, tuple[tuple[type, ...], str]] = {
    "study": ((str,), "isometry | holder | kernel_rate | convergence"),
    "h": ((str, float, int, list), "Hurst vector, e.g. \"0.6,0.6\" or [0.6, 0.6]"),
    "k": ((int,), "dimension (broadcasts a scalar h)"),
    "n": ((int,), "resolution for sample / solve"),
    "resolutions": ((list,), "ascending powers of two"),
    "reference_resolution": ((int,), "reference grid of convergence studies"),
    "replicates": ((int,), "Monte Carlo replicates (>= 1)"),
    "replicate": ((int,), "replicate index for sample / solve"),
    "seed": ((int,), "base seed"),
    "stream_id": ((int,), "RNG stream id"),
    "f1": ((str,), "zero | scaled_tanh | scaled_arctan"),
    "f1_bound": ((float, int), "M, sup |f1|"),
    "f1_slope": ((float, int), "inner slope s of f1"),
    "f2": ((str,), "zero | linear | affine"),
    "f2_slope": ((float, int), "slope a of f2 (Lipschitz |a| < 4k)"),
    "f2_offset": ((float, int), "offset c of affine f2"),
    "g": ((str,), "zero | constant | sin_product | linear"),
    "g_value": ((float, int), "value of the constant source"),
    "projection": ((str,), "pointwise | cell_average"),
    "scheme": ((str,), "plain | smoothed"),
    "delta": ((float, int), "rate parameter delta in (0, 2)"),
    "mu": ((float, int), "mollifier exponent (default from delta and rho)"),
    "rho": ((float, int), "safety factor in (0, 1)"),
    "tol": ((float, int), "fixed-point tolerance"),
    "max_iter": ((int,), "fixed-point iteration cap"),
    "workers": ((int,), "worker processes"),
    "slope_threshold": ((float, int), "acceptance threshold on the fitted slope"),
    "separations": ((list,), "separations of the Hölder study"),
    "holder_resolution": ((int,), "grid of the Hölder study"),
    "b_max": ((int,), "truncation of the continuum kernel series"),
    "panel_size": ((int,), "step functions in the isometry panel"),
    "noise_scale": ((float, int), "multiplier on the sampled noise (0 switches it off)"),
    "output_dir": ((str,), "parent directory of run folders"),
}


def _line_of(text: str, key: str) -> str:
    for i, line in enumerate(text.splitlines(), 1):
        if re.match(rf"\s*{re.escape(key)}\s*=", line):
            return f"line {i}: {line.strip()}"
    return "line ?"


@dataclass
class RunConfig:
    values: dict[str, Any]
    source: str
    path: str
    seed_override: int | None = None

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def where(self, key: str) -> str:
        return f"{self.path}: {_line_of(self.source, key)}"

    def error(self, key: str, msg: str) -> ConfigError:
        return ConfigError(f"{self.where(key)}: {msg}")

    @property
    def seed(self) -> int:
        if self.seed_override is not None:
            return self.seed_override
        return int(self.get("seed", 0))


def _resolve_config_path(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    stem = p.name if p.suffix == ".toml" else p.name + ".toml"
    bundled = resources.files("fracpoisson") / "configs" / stem
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"config file not found: {name}")


def load_config(name: str, env: dict | None = None) -> RunConfig:
    path = _resolve_config_path(name)
    text = path.read_text(encoding="utf-8")
    try:
        values = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = RunConfig(values, text, str(path))
    for key, val in values.items():
        if key not in CONFIG_KEYS:
            raise cfg.error(key, f"unknown key {key!r}")
        types = CONFIG_KEYS[key][0]
        if isinstance(val, bool) or not isinstance(val, types):
            raise cfg.error(key, f"{key} has type {type(val).__name__}; expected {CONFIG_KEYS[key][1]}")
    env = os.environ if env is None else env
    raw = env.get(SEED_ENV)
    if raw not in (None, ""):
        try:
            cfg.seed_override = int(raw)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from exc
    return cfg


def _hurst(cfg: RunConfig) -> HurstVector:
    if "h" not in cfg.values:
        raise ConfigError(f"{cfg.path}: missing required key 'h'")
    try:
        return HurstVector.parse(cfg.get("h"), cfg.get("k"))
    except ValueError as exc:
        raise cfg.error("h", str(exc)) from exc


def _nonlinearity(cfg: RunConfig) -> NonlinearitySpec:
    try:
        return NonlinearitySpec(
            f1_kind=cfg.get("f1", "zero"), f1_bound=float(cfg.get("f1_bound", 1.0)),
            f1_slope=float(cfg.get("f1_slope", 1.0)), f2_kind=cfg.get("f2", "zero"),
            f2_slope=float(cfg.get("f2_slope", 0.0)), f2_offset=float(cfg.get("f2_offset", 0.0)),
        )
    except ValueError as exc:
        raise cfg.error("f1" if "f1" in str(exc) else "f2", str(exc)) from exc


def _source(cfg: RunConfig) -> SourceSpec:
    try:
        return SourceSpec.of(cfg.get("g", "zero"), cfg.get("projection", "pointwise"),
                             float(cfg.get("g_value", 0.0)))
    except ValueError as exc:
        raise cfg.error("g", str(exc)) from exc


def study_config(cfg: RunConfig) -> ex.StudyConfig:
    h = _hurst(cfg)
    kind = cfg.get("study")
    if kind is None:
        raise ConfigError(f"{cfg.path}: missing required key 'study'")
    resolutions = cfg.get("resolutions", [8, 16, 32])
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in resolutions):
        raise cfg.error("resolutions", "resolutions must be integers")
    if kind == "holder" and "holder_resolution" in cfg.values:
        resolutions = [cfg.get("holder_resolution")]
    scfg = ex.StudyConfig(
        study_kind=kind, h=h, resolutions=tuple(resolutions),
        reference_resolution=int(cfg.get("reference_resolution", 128)),
        replicates=int(cfg.get("replicates", 10)), seed=cfg.seed,
        stream_id=int(cfg.get("stream_id", 0)), f=_nonlinearity(cfg), g=_source(cfg),
        scheme=cfg.get("scheme", "smoothed" if h.k >= 4 else "plain"),
        delta=_opt_float(cfg.get("delta")), mu=_opt_float(cfg.get("mu")),
        rho=float(cfg.get("rho", DEFAULT_SAFETY)), tol=float(cfg.get("tol", 1e-10)),
        max_iter=int(cfg.get("max_iter", 10_000)), workers=int(cfg.get("workers", 1)),
        slope_threshold=_opt_float(cfg.get("slope_threshold")),
        separations=tuple(float(s) for s in cfg.get("separations", [])),
        b_max=cfg.get("b_max"), panel_size=int(cfg.get("panel_size", 10)),
        noise_scale=float(cfg.get("noise_scale", 1.0)),
    )
    try:
        return scfg.validate()
    except HypothesisError:
        raise
    except ValueError as exc:
        key = next((k for k in ("replicates", "resolutions", "reference_resolution", "scheme", "study",
                                "workers", "tol", "noise_scale") if k in str(exc) or k.replace("_", " ") in str(exc)), "study")
        raise cfg.error(key, str(exc)) from exc


def _opt_float(v):
    return None if v is None else float(v)


# -- output -----------------------------------------------------------------------------

def run_directory(parent: str | Path, label: str) -> Path:
    """Fresh ``<label>_<timestamp>`` directory under ``parent`` (never reused)."""
    parent = Path(parent)
    parent.mkdir(parents=True, exist_ok=True)
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    base = parent / f"{label}_{stamp}"
    path, i = base, 1
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            path = Path(f"{base}-{i}")
            i += 1


def _header(cfg: RunConfig) -> str:
    lines = [f"# seed={cfg.seed}"]
    if cfg.seed_override is not None:
        lines.append(f"# seed_override={SEED_ENV}")
    return "\n".join(lines) + "\n"


# -- subcommands --------------------------------------------------------------------------

def cmd_rates(args) -> int:
    try:
        h = HurstVector.parse(args.h, args.k)
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    rep = exponent_report(h)
    print(f"k = {h.k}")
    print(f"h = {','.join(f'{v:g}' for v in h)}  (sum = {h.total:g})")
    print(f"hypothesis (H): {'ok' if rep.hypothesis_ok else 'FAIL'}")
    print(f"hypothesis (H*): {'ok' if rep.hypothesis_star_ok else 'fails'}")
    if not rep.hypothesis_ok:
        print(f"hypothesis (H) fails: sum(h) = {h.total:g} must exceed k - 2 = {h.k - 2}")
        return EXIT_FAIL
    print(f"lambda = {rep.lambda_sup:.6g}")
    print(f"nu = {rep.nu_sup:.6g}")
    print(f"gamma = {rep.gamma_sup:.6g}")
    if h.k >= 4:
        sp = smoothing_parameters(h, delta=args.delta, rho=args.rho)
        mu = sp.mu if args.mu is None else args.mu
        print(f"smoothing: delta = {sp.delta:.6g}, mu = {mu:.6g} (rho = {sp.rho:g}), "
              f"gamma_sup = {sp.gamma_sup:.6g}, epsilon(n) = n^-{mu:.6g}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    h = _hurst(cfg)
    n = cfg.get("n")
    if n is None:
        raise ConfigError(f"{cfg.path}: missing required key 'n'")
    grid = GridSpec(h.k, int(n))
    sampler = NoiseSampler(h, grid)
    out = run_directory(args.output_dir or cfg.get("output_dir", "runs"), "sample")
    reps = int(cfg.get("replicates", 1))
    if reps < 1:
        raise cfg.error("replicates", "replicates must be >= 1")
    first = int(cfg.get("replicate", 0))
    for r in range(first, first + reps):
        s = sampler.sample(cfg.seed, int(cfg.get("stream_id", 0)), r)
        text = write_noise_csv(s)
        if cfg.seed_override is not None:
            text = f"# seed_override={SEED_ENV}\n" + text
        (out / f"noise_r{r}.csv").write_text(text)
    print(f"sample n={grid.n} k={grid.k} replicates={reps} -> {out}")
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = load_config(args.config)
    h = _hurst(cfg)
    n = cfg.get("n")
    if n is None:
        raise ConfigError(f"{cfg.path}: missing required key 'n'")
    grid = GridSpec(h.k, int(n))
    plan = build_plan(grid)
    scheme = cfg.get("scheme", "smoothed" if h.k >= 4 else "plain")
    if h.k >= 4 and scheme != "smoothed":
        raise cfg.error("scheme", "k >= 4 requires scheme = 'smoothed'")
    if not check_hypothesis(h):
        raise HypothesisError("hypothesis (H) fails for the configured Hurst vector")
    moll = None
    if scheme == "smoothed":
        mu = cfg.get("mu")
        if mu is None:
            mu = smoothing_parameters(h, delta=_opt_float(cfg.get("delta")),
                                      rho=float(cfg.get("rho", DEFAULT_SAFETY))).mu
        moll = mollifier_table(float(n) ** -float(mu), grid)
    noise = NoiseSampler(h, grid).sample(cfg.seed, int(cfg.get("stream_id", 0)), int(cfg.get("replicate", 0)))
    f, g = _nonlinearity(cfg), _source(cfg)
    tol = float(cfg.get("tol", 1e-10))
    rep = solve_scheme(noise, g, f, plan, moll, tol=tol, max_iter=int(cfg.get("max_iter", 10_000)))
    resid = mild_residual(rep.solution, noise, g, f, plan, moll)
    out = run_directory(args.output_dir or cfg.get("output_dir", "runs"), "solve")
    write_solution_csv(out / "solution.csv", rep.solution,
                       {"seed": cfg.seed, "n": n, "k": h.k, **({"seed_override": SEED_ENV} if cfg.seed_override is not None else {})})
    (out / "report.txt").write_text(rep.as_text() + f"mild_residual = {resid:.17g}\n")
    ok = rep.converged and resid <= 10 * tol
    print(f"solve converged={str(rep.converged).lower()} iterations={rep.iterations} "
          f"mild_residual={resid:.3e} {'PASS' if ok else 'FAIL'} -> {out}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_study(args) -> int:
    cfg = load_config(args.config)
    scfg = study_config(cfg)
    if args.workers:
        scfg = ex.StudyConfig(**{**scfg.__dict__, "workers": args.workers}).validate()
    out = run_directory(args.output_dir or cfg.get("output_dir", "runs"), scfg.study_kind)
    extra = {"seed": cfg.seed, "seed_override": SEED_ENV if cfg.seed_override is not None else None,
             "config": cfg.path}
    if scfg.study_kind == "convergence":
        res = ex.run_convergence_study(scfg)
        est = res.estimate
        extra["replicates_used"] = len(res.replicates_used)
        csv_text = ex.study_csv(scfg, est, res.epsilons)
    elif scfg.study_kind == "kernel_rate":
        est = ex.run_kernel_rate_study(scfg)
        csv_text = ex.study_csv(scfg, est, [scfg.epsilon(n) for n in scfg.resolutions])
    elif scfg.study_kind == "holder":
        res = ex.run_holder_study(scfg)
        est = res.estimate
        csv_text = ex.study_csv(scfg, est, x_label="separation")
    else:
        rep = ex.run_isometry_study(scfg)
        passed = rep.passed
        (out / "isometry.csv").write_text(_header(cfg) + _isometry_csv(rep))
        print(f"isometry max_z={rep.max_standardized_deviation:.3f} target=4 {'PASS' if passed else 'FAIL'}")
        return EXIT_OK if passed else EXIT_FAIL
    (out / f"{scfg.study_kind}.csv").write_text(_header(cfg) + csv_text)
    (out / f"{scfg.study_kind}_summary.json").write_text(ex.study_summary(scfg, est, extra))
    print(est.summary_line(scfg.study_kind))
    return EXIT_FAIL if est.passed is False else EXIT_OK


def _isometry_csv(rep: ex.IsometryReport) -> str:
    lines = ["a,b,analytic,monte_carlo,standard_error"]
    m = len(rep.panel)
    for a in range(m):
        for b in range(a, m):
            lines.append(f"{a},{b},{rep.analytic[a, b]:.17g},{rep.monte_carlo[a, b]:.17g},"
                         f"{rep.standard_error[a, b]:.17g}")
    return "\n".join(lines) + "\n"


def cmd_kernel_check(args) -> int:
    h = HurstVector.parse(args.h, args.k)
    resolutions = tuple(int(v) for v in args.resolutions.split(","))
    scfg = ex.StudyConfig("kernel_rate", h, resolutions=resolutions, scheme="smoothed" if h.k >= 4 else "plain",
                          delta=args.delta, mu=args.mu, b_max=args.b_max)
    theory = scfg.theoretical_rate() if h.k >= 4 else float("nan")
    threshold = args.threshold if args.threshold is not None else -theory + 0.15
    scfg = ex.StudyConfig(**{**scfg.__dict__, "slope_threshold": threshold}).validate()
    est = ex.run_kernel_rate_study(scfg)
    for note in est.notes:
        print(note)
    if args.mixed_bound:
        for n in resolutions:
            grid = GridSpec(h.k, n)
            moll = None if scfg.epsilon(n) is None else mollifier_table(scfg.epsilon(n), grid)
            print(f"n={n}: sup_x mixed norm of G_n(x, .) = {kernel_mixed_bound(h, build_plan(grid), moll):.6g}")
    print(est.summary_line("kernel_rate"))
    return EXIT_FAIL if est.passed is False else EXIT_OK


def cmd_isometry_check(args) -> int:
    h = HurstVector.parse(args.h, args.k)
    seed = int(os.environ.get(SEED_ENV) or args.seed)
    scfg = ex.StudyConfig("isometry", h, resolutions=(args.n,), replicates=args.replicates, seed=seed,
                          panel_size=args.panel_size).validate()
    rep = ex.run_isometry_study(scfg)
    print(f"isometry max_z={rep.max_standardized_deviation:.3f} target=4 {'PASS' if rep.passed else 'FAIL'}")
    return EXIT_OK if rep.passed else EXIT_FAIL


# -- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fracpoisson", description="Lattice schemes for the fractional Poisson SPDE.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("rates", help="theoretical exponents and hypothesis checks")
    r.add_argument("--h", required=True, help="Hurst vector, e.g. 0.6,0.6,0.6")
    r.add_argument("--k", type=int, default=None)
    r.add_argument("--delta", type=float, default=None)
    r.add_argument("--mu", type=float, default=None)
    r.add_argument("--rho", type=float, default=DEFAULT_SAFETY)
    r.set_defaults(func=cmd_rates)

    for name, func, helptext in (("sample", cmd_sample, "draw noise increments"),
                                 ("solve", cmd_solve, "solve one lattice scheme"),
                                 ("study", cmd_study, "run a configured study")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("config", help="TOML config path or bundled config name")
        s.add_argument("--output-dir", default=None)
        if name == "study":
            s.add_argument("--workers", type=int, default=None)
        s.set_defaults(func=func)

    kc = sub.add_parser("kernel-check", help="kernel discrepancy rate and mixed-norm bound")
    kc.add_argument("--h", required=True)
    kc.add_argument("--k", type=int, default=None)
    kc.add_argument("--resolutions", default="4,8,16")
    kc.add_argument("--delta", type=float, default=None)
    kc.add_argument("--mu", type=float, default=None)
    kc.add_argument("--b-max", type=int, default=None)
    kc.add_argument("--threshold", type=float, default=None)
    kc.add_argument("--mixed-bound", action="store_true")
    kc.set_defaults(func=cmd_kernel_check)

    ic = sub.add_parser("isometry-check", help="Monte Carlo check of the isometry formula")
    ic.add_argument("--h", required=True)
    ic.add_argument("--k", type=int, default=None)
    ic.add_argument("--n", type=int, default=8)
    ic.add_argument("--replicates", type=int, default=20000)
    ic.add_argument("--seed", type=int, default=0)
    ic.add_argument("--panel-size", type=int, default=10)
    ic.set_defaults(func=cmd_isometry_check)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, HypothesisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (DivergenceError, CholeskyError, ArithmeticError, ZeroDivisionError, ex.StudyError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
