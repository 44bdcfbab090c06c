"""Monte Carlo and deterministic studies with log-log rate regression.

Every study is a pure function of its ``StudyConfig``: replicate ``r`` draws
its noise from the stream keyed by ``(seed, stream_id, r)``, and results are
reduced in replicate order regardless of the worker count.
"""

from __future__ import annotations

import functools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .kernels import kernel_discrepancy_l2, kernel_rows
from .noise import GridSpec, NoiseSampler, aggregate, apply_axes, axis_covariance
from .rates import (
    DEFAULT_SAFETY,
    HurstVector,
    HypothesisError,
    check_hypothesis,
    convergence_rate_sup,
    holder_exponent_sup,
    smoothing_parameters,
)
from .solver import NonlinearitySpec, SourceSpec, embed_cells, solve_scheme
from .spectral import MollifierTable, SpectralPlan, build_plan, mollifier_table

STUDY_KINDS = ("isometry", "holder", "kernel_rate", "convergence")


class StudyError(RuntimeError):
    """A replicate or study could not be completed."""


# -- configuration ------------------------------------------------------------------

@dataclass(frozen=True)
class StudyConfig:
    study_kind: str
    h: HurstVector
    resolutions: tuple[int, ...] = (8, 16, 32)
    reference_resolution: int = 128
    replicates: int = 10
    seed: int = 0
    stream_id: int = 0
    f: NonlinearitySpec = field(default_factory=NonlinearitySpec)
    g: SourceSpec = field(default_factory=SourceSpec)
    scheme: str = "plain"
    delta: float | None = None
    mu: float | None = None
    rho: float = DEFAULT_SAFETY
    tol: float = 1e-10
    max_iter: int = 10_000
    workers: int = 1
    slope_threshold: float | None = None
    separations: tuple[float, ...] = ()
    b_max: int | None = None
    panel_size: int = 10
    noise_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(n) for n in self.resolutions))
        object.__setattr__(self, "separations", tuple(float(s) for s in self.separations))

    @property
    def k(self) -> int:
        return self.h.k

    def validate(self) -> "StudyConfig":
        if self.study_kind not in STUDY_KINDS:
            raise ValueError(f"unknown study kind {self.study_kind!r}; expected one of {STUDY_KINDS}")
        if self.replicates < 1:
            raise ValueError(f"replicates must be >= 1, got {self.replicates}")
        if self.scheme not in ("plain", "smoothed"):
            raise ValueError(f"scheme must be 'plain' or 'smoothed', got {self.scheme!r}")
        if not check_hypothesis(self.h):
            raise HypothesisError("hypothesis (H) fails for the configured Hurst vector")
        if self.k >= 4 and self.scheme != "smoothed":
            raise ValueError("k >= 4 requires scheme = 'smoothed'")
        res = self.resolutions
        if not res:
            raise ValueError("resolutions must not be empty")
        for n in res:
            if n < 2 or n & (n - 1):
                raise ValueError(f"resolution {n} is not a power of two >= 2")
        if list(res) != sorted(set(res)):
            raise ValueError("resolutions must be strictly ascending")
        if self.study_kind == "convergence":
            n_ref = self.reference_resolution
            if n_ref <= res[-1]:
                raise ValueError("reference_resolution must exceed every study resolution")
            for n in res:
                if n_ref % n:
                    raise ValueError(f"resolution {n} does not divide reference_resolution {n_ref}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter >= 1")
        if not (math.isfinite(self.noise_scale) and self.noise_scale >= 0):
            raise ValueError(f"noise_scale must be finite and >= 0, got {self.noise_scale}")
        return self

    def smoothing(self):
        return smoothing_parameters(self.h, delta=self.delta, rho=self.rho)

    def mu_value(self) -> float:
        return self.mu if self.mu is not None else self.smoothing().mu

    def epsilon(self, n: int) -> float | None:
        if self.scheme != "smoothed":
            return None
        return float(n) ** (-self.mu_value())

    def theoretical_rate(self) -> float:
        if self.study_kind == "holder":
            return 2.0 * holder_exponent_sup(self.h)
        if self.study_kind == "kernel_rate":
            if self.delta is not None:
                return self.delta / 2.0
            return self.smoothing().delta / 2.0 if self.k >= 4 else float("nan")
        return convergence_rate_sup(self.h)


@functools.lru_cache(maxsize=32)
def _plan(grid: GridSpec) -> SpectralPlan:
    return build_plan(grid)


@functools.lru_cache(maxsize=32)
def _mollifier(epsilon: float, grid: GridSpec) -> MollifierTable:
    return mollifier_table(epsilon, grid)


def _mollifier_for(cfg: StudyConfig, grid: GridSpec) -> MollifierTable | None:
    eps = cfg.epsilon(grid.n)
    return None if eps is None else _mollifier(eps, grid)


# -- regression ----------------------------------------------------------------------

@dataclass
class RateEstimate:
    resolutions: list[float]
    error_mean: list[float]
    error_se: list[float]
    slope: float
    slope_se: float
    intercept: float
    theoretical_rate: float
    dropped: list[float] = field(default_factory=list)
    exact: bool = False
    threshold: float | None = None
    direction: str = "le"
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool | None:
        if self.threshold is None:
            return None
        if self.exact:
            return True
        if not math.isfinite(self.slope):
            return False
        return self.slope <= self.threshold if self.direction == "le" else self.slope >= self.threshold

    def summary_line(self, study: str) -> str:
        verdict = {True: "PASS", False: "FAIL", None: "INFO"}[self.passed]
        target = "nan" if self.threshold is None else f"{self.threshold:.4g}"
        return f"{study} slope={self.slope:.4f}±{self.slope_se:.4f} target={target} {verdict}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def fit_loglog(x: Sequence[float], y: Sequence[float], *, drop_outlier: bool = True
               ) -> tuple[float, float, float, list[float]]:
    """Least-squares slope of ``log y`` on ``log x``: ``(slope, slope_se, intercept, dropped_x)``.

    When at least four points are available the coarsest point is checked
    against the fit of the remaining points: if its prediction error exceeds
    three residual standard errors of that fit, it is dropped.  (Measured
    against a fit that includes it, a single residual can never exceed
    ``sqrt(m - 2)`` standard errors, so that version of the rule is inert.)
    """
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    if lx.size < 3:
        raise ValueError("slope regression needs at least 3 points")
    fit = stats.linregress(lx, ly)
    dropped: list[float] = []
    if drop_outlier and lx.size >= 4:
        rest = stats.linregress(lx[1:], ly[1:])
        resid = ly[1:] - (rest.intercept + rest.slope * lx[1:])
        s = math.sqrt(float(resid @ resid) / (lx.size - 3))
        miss = abs(ly[0] - (rest.intercept + rest.slope * lx[0]))
        if miss > 3.0 * max(s, 1e-9):
            dropped.append(float(x[0]))
            fit = rest
    return float(fit.slope), float(fit.stderr), float(fit.intercept), dropped


def _estimate(cfg: StudyConfig, xs, means, ses, direction: str = "le", drop: bool = True) -> RateEstimate:
    means = [float(v) for v in means]
    if all(v == 0.0 for v in means):
        return RateEstimate(list(map(float, xs)), means, list(map(float, ses)), float("nan"), 0.0,
                            float("nan"), cfg.theoretical_rate(), exact=True,
                            threshold=cfg.slope_threshold, direction=direction,
                            notes=["all errors are exactly zero; regression skipped"])
    slope, se, icept, dropped = fit_loglog(xs, means, drop_outlier=drop)
    return RateEstimate(list(map(float, xs)), means, list(map(float, ses)), slope, se, icept,
                        cfg.theoretical_rate(), dropped, threshold=cfg.slope_threshold,
                        direction=direction)


# -- parallel map ------------------------------------------------------------------------

def _map_replicates(fn, cfg: StudyConfig, indices: Sequence[int]) -> list:
    if cfg.workers <= 1 or len(indices) <= 1:
        return [fn(cfg, r) for r in indices]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(fn, [cfg] * len(indices), indices))


# -- convergence -----------------------------------------------------------------------

def cell_l2_distance(fine_nodes: np.ndarray, coarse_nodes: np.ndarray) -> float:
    """L^2(D) distance of the cell-constant extensions of two interior fields."""
    k = fine_nodes.ndim
    fine = embed_cells(fine_nodes)
    coarse = embed_cells(coarse_nodes)
    r = fine.shape[0] // coarse.shape[0]
    for d in range(k):
        coarse = np.repeat(coarse, r, axis=d)
    return float(np.sqrt(np.mean((fine - coarse) ** 2)))


def _solve(cfg: StudyConfig, noise, grid: GridSpec, replicate: int):
    rep = solve_scheme(noise, cfg.g, cfg.f, _plan(grid), _mollifier_for(cfg, grid),
                       tol=cfg.tol, max_iter=cfg.max_iter)
    if not rep.converged:
        raise StudyError(
            f"replicate {replicate}: solve at n={grid.n} did not converge "
            f"({rep.iterations} iterations, last update {rep.final_residual_sup:.3e})"
        )
    return rep.solution


def _convergence_replicate(cfg: StudyConfig, r: int):
    """Errors of every study resolution against the coupled reference, or a diagnostic."""
    ref_grid = GridSpec(cfg.k, cfg.reference_resolution)
    fine = NoiseSampler(cfg.h, ref_grid).sample(cfg.seed, cfg.stream_id, r)
    if cfg.noise_scale != 1.0:
        fine = replace(fine, increments=cfg.noise_scale * fine.increments)
    try:
        u_ref = _solve(cfg, fine, ref_grid, r)
        errs = []
        for n in cfg.resolutions:
            grid = GridSpec(cfg.k, n)
            u_n = _solve(cfg, aggregate(fine, grid), grid, r)
            errs.append(cell_l2_distance(u_ref, u_n))
    except StudyError as exc:
        return str(exc)
    except ArithmeticError as exc:
        raise type(exc)(f"replicate {r}: {exc}") from exc
    return np.asarray(errs)


@dataclass
class ConvergenceResult:
    estimate: RateEstimate
    errors: np.ndarray
    replicates_used: list[int]
    aborted: list[str]
    epsilons: list[float | None]

    def monotone_within_se(self) -> bool:
        m, s = self.estimate.error_mean, self.estimate.error_se
        return all(m[i + 1] <= m[i] + s[i] + s[i + 1] for i in range(len(m) - 1))


def convergence_errors(cfg: StudyConfig) -> tuple[np.ndarray, list[int], list[str]]:
    """Per-replicate error matrix ``(replicates, len(resolutions))``."""
    cfg.validate()
    out = _map_replicates(_convergence_replicate, cfg, list(range(cfg.replicates)))
    rows, used, aborted = [], [], []
    for r, res in enumerate(out):
        if isinstance(res, str):
            aborted.append(res)
        else:
            rows.append(res)
            used.append(r)
    if not rows:
        raise StudyError("every replicate was aborted: " + "; ".join(aborted[:3]))
    return np.vstack(rows), used, aborted


def run_convergence_study(cfg: StudyConfig) -> ConvergenceResult:
    errors, used, aborted = convergence_errors(cfg)
    means = errors.mean(axis=0)
    se = errors.std(axis=0, ddof=1) / math.sqrt(errors.shape[0]) if errors.shape[0] > 1 else np.zeros_like(means)
    est = _estimate(cfg, cfg.resolutions, means, se)
    est.notes += aborted
    if est.dropped:
        est.notes.append(f"dropped coarsest resolution {est.dropped} as a pre-asymptotic outlier")
    return ConvergenceResult(est, errors, used, aborted, [cfg.epsilon(n) for n in cfg.resolutions])


@dataclass
class ProbeReport:
    nu: float
    xi: np.ndarray
    quantiles: dict
    finite: bool
    argmax_finest_share: float


def almost_sure_rate_probe(cfg: StudyConfig, nu: float | None = None, *,
                           errors: np.ndarray | None = None) -> ProbeReport:
    """``xi_r = max_n error_{r,n} n^nu`` per replicate and its empirical quantiles."""
    nu = convergence_rate_sup(cfg.h) if nu is None else float(nu)
    if errors is None:
        errors = convergence_errors(cfg)[0]
    ns = np.asarray(cfg.resolutions, dtype=float)
    scaled = errors * ns**nu
    xi = scaled.max(axis=1)
    q = {f"q{int(p)}": float(np.percentile(xi, p)) for p in (50, 90, 99)}
    q["max"] = float(xi.max())
    finest = float(np.mean(np.argmax(scaled, axis=1) == len(ns) - 1))
    return ProbeReport(nu, xi, q, bool(np.all(np.isfinite(xi))), finest)


# -- isometry -----------------------------------------------------------------------------

@dataclass
class IsometryReport:
    panel: list[tuple[tuple[int, ...], tuple[int, ...]]]
    analytic: np.ndarray
    monte_carlo: np.ndarray
    standard_error: np.ndarray
    max_standardized_deviation: float
    replicates: int

    @property
    def passed(self) -> bool:
        return self.max_standardized_deviation <= 4.0


def _covariance_apply(h: HurstVector, n: int, arr: np.ndarray, batch: bool = False) -> np.ndarray:
    mats = [axis_covariance(hd, n) for hd in h]
    return apply_axes(mats, arr, batch=batch)


def isometry_panel(k: int, n: int, size: int, rng: np.random.Generator) -> list:
    """Cell-aligned rectangles ``[lo, hi)`` in cell units; the first is ``[0, n/2)^k``."""
    panel = [((0,) * k, (n // 2,) * k)]
    while len(panel) < size:
        lo, hi = [], []
        for _ in range(k):
            a, b = sorted(rng.choice(n + 1, size=2, replace=False))
            lo.append(int(a))
            hi.append(int(b))
        panel.append((tuple(lo), tuple(hi)))
    return panel


def _indicator(k: int, n: int, lo, hi) -> np.ndarray:
    phi = np.zeros((n,) * k)
    phi[tuple(slice(a, b) for a, b in zip(lo, hi))] = 1.0
    return phi


def isometry_analytic(h: HurstVector, phis: np.ndarray) -> np.ndarray:
    """Gram matrix ``sum_{i,j} phi_a(i) phi_b(j) Cov(B(D_i), B(D_j))`` of cell-constant functions.

    ``phis`` has shape ``(m,) + (n,)*k``.
    """
    k = h.k
    n = phis.shape[-1]
    axes = tuple(range(1, k + 1))
    return np.tensordot(phis, _covariance_apply(h, n, phis, batch=True), axes=(axes, axes))


def run_isometry_study(cfg: StudyConfig, n: int | None = None, batch: int = 5000,
                       phis: np.ndarray | None = None) -> IsometryReport:
    """Monte Carlo ``E[I(phi_a) I(phi_b)]`` against the analytic double sum.

    The default panel holds ``cfg.panel_size`` rectangle indicators; ``phis``
    (shape ``(m,) + (n,)*k``) replaces it with arbitrary cell-constant functions.
    """
    cfg.validate()
    k = cfg.k
    if phis is None:
        n = cfg.resolutions[0] if n is None else int(n)
        panel = isometry_panel(k, n, cfg.panel_size, np.random.default_rng([cfg.seed, 7919]))
        phis = np.stack([_indicator(k, n, lo, hi) for lo, hi in panel])
    else:
        phis = np.asarray(phis, dtype=float)
        n = phis.shape[-1]
        if phis.ndim != k + 1 or phis.shape[1:] != (n,) * k:
            raise ValueError(f"phis must have shape (m,) + ({n},)*{k}")
        panel = []
    analytic = isometry_analytic(cfg.h, phis)
    sampler = NoiseSampler(cfg.h, GridSpec(k, n))
    vals = []
    for s in range(0, cfg.replicates, batch):
        inc = sampler.sample_batch(cfg.seed, cfg.stream_id, range(s, min(s + batch, cfg.replicates)))
        vals.append(np.tensordot(inc, phis, axes=(tuple(range(1, k + 1)), tuple(range(1, k + 1)))))
    x = np.vstack(vals)  # (replicates, panel)
    prods = x[:, :, None] * x[:, None, :]
    mc = prods.mean(axis=0)
    se = prods.std(axis=0, ddof=1) / math.sqrt(x.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(mc - analytic) / se, np.where(mc == analytic, 0.0, np.inf))
    return IsometryReport(panel, analytic, mc, se, float(z.max()), x.shape[0])


# -- Hölder regularity -------------------------------------------------------------------

@dataclass
class HolderResult:
    estimate: RateEstimate
    separations: list[float]
    variances: list[float]
    x: tuple[float, ...]
    direction: tuple[float, ...]


def convolution_increment_variance(h: HurstVector, plan: SpectralPlan, x_node, z_node,
                                   mollifier: MollifierTable | None = None) -> float:
    """Exact ``Var(J(x) - J(z))`` as ``w^T C w`` with ``w = G(x, .) - G(z, .)``."""
    rows = kernel_rows(plan, [tuple(x_node), tuple(z_node)], mollifier)
    w = rows[0] - rows[1]
    return float(np.sum(w * _covariance_apply(h, plan.n, w)))


def run_holder_study(cfg: StudyConfig, n: int | None = None) -> HolderResult:
    """Analytic variance of convolution increments against separation."""
    cfg.validate()
    n = cfg.resolutions[-1] if n is None else int(n)
    k = cfg.k
    grid = GridSpec(k, n)
    plan = _plan(grid)
    moll = _mollifier_for(cfg, grid)
    rng = np.random.default_rng([cfg.seed, 104729])
    u = rng.standard_normal(k)
    u = np.abs(u) / np.linalg.norm(u)  # stay inside the cube from the centre
    x_node = np.full(k, n // 2)
    seps = cfg.separations or tuple(2.0**-j for j in range(2, 7))
    actual, variances = [], []
    for s in seps:
        z_node = np.floor((x_node / n + s * u) * n + 1e-9).astype(int)
        z_node = np.clip(z_node, 1, n - 1)
        d = float(np.linalg.norm((z_node - x_node) / n))
        if d == 0.0:
            raise ValueError(f"separation {s} is below the grid spacing 1/{n}")
        actual.append(d)
        variances.append(convolution_increment_variance(cfg.h, plan, x_node, z_node, moll))
    order = np.argsort(actual)
    xs = [actual[i] for i in order]
    vs = [variances[i] for i in order]
    est = _estimate(cfg, xs, vs, [0.0] * len(vs), direction="ge", drop=False)
    return HolderResult(est, xs, vs, tuple(x_node / n), tuple(u))


# -- kernel rate --------------------------------------------------------------------------

def run_kernel_rate_study(cfg: StudyConfig) -> RateEstimate:
    """Deterministic L^2(D x D) kernel discrepancy across resolutions."""
    cfg.validate()
    vals, notes = [], []
    for n in cfg.resolutions:
        grid = GridSpec(cfg.k, n)
        rep = kernel_discrepancy_l2(_plan(grid), _mollifier_for(cfg, grid), cfg.b_max)
        vals.append(rep.value)
        notes.append(f"n={n}: value={rep.value:.6e} tail<={rep.tail_bound:.2e} "
                     f"A1={rep.a1:.3e} A2={rep.a2:.3e} A3=A4={rep.a3:.3e}")
    est = _estimate(cfg, cfg.resolutions, vals, [0.0] * len(vals), drop=False)
    est.notes += notes
    return est


# -- persistence --------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    return format(float(v), ".17g")


def study_csv(cfg: StudyConfig, est: RateEstimate, epsilons: Sequence[float | None] | None = None,
              x_label: str = "n") -> str:
    """Rows ``study_kind,k,h1..hk,<x>,epsilon,replicates,error_mean,error_se``."""
    hcols = [f"h{d + 1}" for d in range(cfg.k)]
    lines = [",".join(["study_kind", "k", *hcols, x_label, "epsilon", "replicates", "error_mean", "error_se"])]
    eps = list(epsilons) if epsilons is not None else [None] * len(est.resolutions)
    for x, e, m, s in zip(est.resolutions, eps, est.error_mean, est.error_se):
        xs = str(int(x)) if x_label == "n" else _fmt(x)
        lines.append(",".join([cfg.study_kind, str(cfg.k), *[_fmt(v) for v in cfg.h], xs, _fmt(e),
                               str(cfg.replicates), _fmt(m), _fmt(s)]))
    return "\n".join(lines) + "\n"


def study_summary(cfg: StudyConfig, est: RateEstimate, extra: dict | None = None) -> str:
    d = {
        "study_kind": cfg.study_kind,
        "k": cfg.k,
        "h": list(cfg.h),
        "slope": est.slope,
        "slope_se": est.slope_se,
        "intercept": est.intercept,
        "theoretical_rate": est.theoretical_rate,
        "threshold": est.threshold,
        "passed": est.passed,
        "exact": est.exact,
        "dropped": est.dropped,
        "notes": est.notes,
    }
    d.update(extra or {})
    return json.dumps(d, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def write_study(directory: str | Path, cfg: StudyConfig, est: RateEstimate,
                epsilons=None, x_label: str = "n", extra: dict | None = None) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{cfg.study_kind}.csv"
    json_path = directory / f"{cfg.study_kind}_summary.json"
    csv_path.write_text(study_csv(cfg, est, epsilons, x_label))
    json_path.write_text(study_summary(cfg, est, extra))
    return csv_path, json_path


def with_seed(cfg: StudyConfig, seed: int) -> StudyConfig:
    return replace(cfg, seed=int(seed))
