"""Nonlinear lattice schemes, sources, and the stochastic convolution.

The scheme on the interior nodes is ``A u = f(u) + g_n + n^k B`` (plain) or
its smoothed analogue.  It is solved by damped Picard iteration in the
kernel direction ``u <- (1 - w) u + w K (f(u) + g_n + n^k B)`` where ``K``
is ``A^{-1}`` or the smoothed inverse.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .kernels import green_discrete_matrix, kernel_apply_direct
from .noise import GridSpec, NoiseSample
from .spectral import MollifierTable, SpectralPlan, inverse_multipliers, solve_linear

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000


class DivergenceError(ArithmeticError):
    """Raised when a fixed-point iterate becomes non-finite."""


# -- nonlinearities -------------------------------------------------------------------

F1_KINDS = ("zero", "scaled_tanh", "scaled_arctan")
F2_KINDS = ("zero", "linear", "affine")


@dataclass(frozen=True)
class NonlinearitySpec:
    """``f = f1 + f2`` with ``f1`` bounded non-decreasing and ``f2`` Lipschitz.

    ``f1``: ``scaled_tanh`` is ``M tanh(s u)``; ``scaled_arctan`` is
    ``(2M/pi) arctan(s u)``.  ``f2``: ``linear`` is ``a u``; ``affine`` is
    ``a u + c``.  The slope ``a`` may be negative; its Lipschitz constant is
    ``|a|``.
    """

    f1_kind: str = "zero"
    f1_bound: float = 1.0
    f1_slope: float = 1.0
    f2_kind: str = "zero"
    f2_slope: float = 0.0
    f2_offset: float = 0.0

    def __post_init__(self):
        if self.f1_kind not in F1_KINDS:
            raise ValueError(f"unknown f1 kind {self.f1_kind!r}; expected one of {F1_KINDS}")
        if self.f2_kind not in F2_KINDS:
            raise ValueError(f"unknown f2 kind {self.f2_kind!r}; expected one of {F2_KINDS}")
        if self.f1_kind != "zero" and not (self.f1_bound >= 0 and self.f1_slope >= 0):
            raise ValueError("f1 bound and slope must be non-negative (f1 non-decreasing)")
        for name in ("f1_bound", "f1_slope", "f2_slope", "f2_offset"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @classmethod
    def zero(cls) -> "NonlinearitySpec":
        return cls()

    @classmethod
    def tanh(cls, bound: float = 1.0, slope: float = 1.0) -> "NonlinearitySpec":
        return cls(f1_kind="scaled_tanh", f1_bound=bound, f1_slope=slope)

    @classmethod
    def linear(cls, slope: float) -> "NonlinearitySpec":
        return cls(f2_kind="linear", f2_slope=slope)

    # values

    def f1(self, u):
        u = np.asarray(u, dtype=float)
        if self.f1_kind == "scaled_tanh":
            return self.f1_bound * np.tanh(self.f1_slope * u)
        if self.f1_kind == "scaled_arctan":
            return (2.0 * self.f1_bound / np.pi) * np.arctan(self.f1_slope * u)
        return np.zeros_like(u)

    def f2(self, u):
        u = np.asarray(u, dtype=float)
        if self.f2_kind == "linear":
            return self.f2_slope * u
        if self.f2_kind == "affine":
            return self.f2_slope * u + self.f2_offset
        return np.zeros_like(u)

    def __call__(self, u):
        return self.f1(u) + self.f2(u)

    def derivative(self, u):
        u = np.asarray(u, dtype=float)
        s = self.f1_slope
        if self.f1_kind == "scaled_tanh":
            d1 = self.f1_bound * s / np.cosh(s * u) ** 2
        elif self.f1_kind == "scaled_arctan":
            d1 = (2.0 * self.f1_bound / np.pi) * s / (1.0 + (s * u) ** 2)
        else:
            d1 = np.zeros_like(u)
        return d1 + (self.f2_slope if self.f2_kind != "zero" else 0.0)

    # constants

    @property
    def bound(self) -> float:
        """``sup |f1|``."""
        return 0.0 if self.f1_kind == "zero" else float(self.f1_bound)

    @property
    def f1_lipschitz(self) -> float:
        if self.f1_kind == "zero":
            return 0.0
        if self.f1_kind == "scaled_tanh":
            return float(self.f1_bound * self.f1_slope)
        return float(2.0 * self.f1_bound * self.f1_slope / np.pi)

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant ``L`` of ``f2``; also the constant in (M)."""
        return 0.0 if self.f2_kind == "zero" else abs(float(self.f2_slope))

    @property
    def combined_lipschitz(self) -> float:
        return self.f1_lipschitz + self.lipschitz

    def derivative_range(self) -> tuple[float, float]:
        """Global ``[inf f', sup f']``."""
        a = float(self.f2_slope) if self.f2_kind != "zero" else 0.0
        return a, a + self.f1_lipschitz

    def describe(self) -> str:
        parts = []
        if self.f1_kind != "zero":
            parts.append(f"{self.f1_kind}(M={self.f1_bound:g}, s={self.f1_slope:g})")
        if self.f2_kind != "zero":
            parts.append(f"{self.f2_kind}(a={self.f2_slope:g}, c={self.f2_offset:g})")
        return " + ".join(parts) or "zero"


# -- sources --------------------------------------------------------------------------

def _builtin(name: str, value: float) -> Callable[[np.ndarray], np.ndarray]:
    # points have shape (..., k)
    if name == "zero":
        return lambda p: np.zeros(p.shape[:-1])
    if name == "constant":
        return lambda p: np.full(p.shape[:-1], float(value))
    if name == "sin_product":
        return lambda p: np.prod(np.sin(np.pi * p), axis=-1)
    if name == "linear":
        return lambda p: np.sum(p, axis=-1)
    raise ValueError(f"unknown builtin source {name!r}; expected zero, constant, sin_product or linear")


SOURCE_BUILTINS = ("zero", "constant", "sin_product", "linear")
PROJECTIONS = ("pointwise", "cell_average")


@dataclass(frozen=True)
class SourceSpec:
    """Deterministic source ``g`` and its lattice projection.

    ``kind`` is ``zero``, ``builtin`` (see ``SOURCE_BUILTINS``) or
    ``user_grid``, in which case ``grid_values`` holds cell values of shape
    ``(n,)*k`` used as they are.
    """

    kind: str = "zero"
    builtin: str = "zero"
    value: float = 0.0
    projection: str = "pointwise"
    grid_values: np.ndarray | None = field(default=None, repr=False, compare=False)
    quad_points: int = 4

    def __post_init__(self):
        if self.kind not in ("zero", "builtin", "user_grid"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.projection not in PROJECTIONS:
            raise ValueError(f"unknown projection {self.projection!r}; expected one of {PROJECTIONS}")
        if self.kind == "builtin" and self.builtin not in SOURCE_BUILTINS:
            raise ValueError(f"unknown builtin source {self.builtin!r}")
        if self.kind == "user_grid" and self.grid_values is None:
            raise ValueError("user_grid source needs grid_values")

    @classmethod
    def of(cls, name: str, projection: str = "pointwise", value: float = 0.0) -> "SourceSpec":
        if name == "zero":
            return cls(projection=projection)
        return cls(kind="builtin", builtin=name, value=value, projection=projection)

    def function(self) -> Callable[[np.ndarray], np.ndarray]:
        if self.kind == "user_grid":
            raise ValueError("user_grid sources have no continuum representation")
        return _builtin("zero" if self.kind == "zero" else self.builtin, self.value)


def _gauss_cell_points(grid: GridSpec, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre nodes inside every cell: points ``(n,)*k + (m,)*k + (k,)``."""
    k, n = grid.k, grid.n
    t, w = np.polynomial.legendre.leggauss(m)
    t = (t + 1.0) / 2.0
    w = w / 2.0
    axis = (np.arange(n)[:, None] + t[None, :]) / n  # (n, m)
    coords = []
    for d in range(k):
        shape = [1] * (2 * k)
        shape[d], shape[k + d] = n, m
        coords.append(np.broadcast_to(axis.reshape(shape), (n,) * k + (m,) * k))
    pts = np.stack(coords, axis=-1)
    wk = w
    for _ in range(k - 1):
        wk = np.multiply.outer(wk, w)
    return pts, np.asarray(wk)


def project_source(g: SourceSpec | None, grid: GridSpec) -> np.ndarray:
    """Cell values of ``g_n``: ``g(kappa_n(x))`` or ``n^k int_{D_j} g``."""
    if g is None or g.kind == "zero":
        return np.zeros(grid.cell_shape)
    if g.kind == "user_grid":
        vals = np.asarray(g.grid_values, dtype=float)
        if vals.shape != grid.cell_shape:
            raise ValueError(f"user_grid values {vals.shape} do not match cell shape {grid.cell_shape}")
        return vals.copy()
    fn = g.function()
    if g.projection == "pointwise":
        corners = np.stack(np.meshgrid(*([np.arange(grid.n) / grid.n] * grid.k), indexing="ij"), axis=-1)
        return np.asarray(fn(corners), dtype=float)
    pts, w = _gauss_cell_points(grid, g.quad_points)
    vals = fn(pts)
    axes = tuple(range(grid.k, 2 * grid.k))
    return np.tensordot(vals, w, axes=(axes, tuple(range(grid.k))))


def g_projection_error(g: SourceSpec, grid: GridSpec, p: float = 2.0, quad_points: int = 8) -> float:
    """``|| g - g_n ||_{L^p(D)}`` by per-cell Gauss-Legendre quadrature."""
    gn = project_source(g, grid)
    pts, w = _gauss_cell_points(grid, quad_points)
    diff = np.abs(g.function()(pts) - gn.reshape(gn.shape + (1,) * grid.k))
    cell_mass = float(grid.n) ** -grid.k
    if math.isinf(p):
        return float(diff.max())
    axes = tuple(range(grid.k, 2 * grid.k))
    per_cell = np.tensordot(diff**p, w, axes=(axes, tuple(range(grid.k))))
    return float((cell_mass * per_cell.sum()) ** (1.0 / p))


# -- linear pieces -------------------------------------------------------------------

def _check_grid(noise: NoiseSample | None, plan: SpectralPlan) -> None:
    if noise is not None and noise.grid != plan.grid:
        raise ValueError(f"noise grid {noise.grid} does not match plan grid {plan.grid}")


def noise_forcing(noise: NoiseSample | None, plan: SpectralPlan) -> np.ndarray:
    """``n^k B`` on the interior nodes (zeros without noise)."""
    _check_grid(noise, plan)
    if noise is None:
        return np.zeros(plan.grid.interior_shape)
    return float(plan.n) ** plan.k * noise.interior


def stochastic_convolution(noise: NoiseSample, plan: SpectralPlan,
                           mollifier: MollifierTable | None = None) -> np.ndarray:
    """``J(i/n) = sum_j G(i/n, j) B(D_j)`` via one (smoothed) inverse-Laplacian solve."""
    return solve_linear(noise_forcing(noise, plan), plan, mollifier)


def stochastic_convolution_direct(noise: NoiseSample, plan: SpectralPlan,
                                  mollifier: MollifierTable | None = None) -> np.ndarray:
    """Same quantity summed explicitly over cells (reference path)."""
    _check_grid(noise, plan)
    return kernel_apply_direct(noise.increments, plan, mollifier)


# -- nonlinear solve -----------------------------------------------------------------

@dataclass
class SolveReport:
    solution: np.ndarray
    iterations: int
    final_residual_sup: float
    converged: bool
    relaxation: float
    contraction: float
    tolerance: float
    history: list[float] = field(default_factory=list, repr=False)
    warnings: list[str] = field(default_factory=list)
    lk_diagnostic: float = math.nan

    def as_text(self) -> str:
        lines = [
            f"converged = {str(self.converged).lower()}",
            f"iterations = {self.iterations}",
            f"final_residual_sup = {self.final_residual_sup:.17g}",
            f"tolerance = {self.tolerance:.17g}",
            f"relaxation = {self.relaxation:.17g}",
            f"contraction_estimate = {self.contraction:.17g}",
            f"solution_sup = {float(np.abs(self.solution).max(initial=0.0)):.17g}",
            f"lipschitz_times_k_tilde = {self.lk_diagnostic:.17g}",
        ]
        lines += [f"warning = {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


def apriori_constant(plan: SpectralPlan) -> float:
    """``sup_x int |G_{D,n}(x, y)| dy`` for the plain lattice kernel.

    ``A^{-1}`` is entrywise non-positive, so the row integrals are
    ``-(A^{-1} 1)`` and a single solve suffices.
    """
    return float(np.abs(solve_linear(np.ones(plan.grid.interior_shape), plan)).max())


def relaxation_for(multipliers: np.ndarray, f: NonlinearitySpec) -> tuple[float, float]:
    """Damping ``w`` and predicted contraction factor for the Picard map.

    The Jacobian ``K diag(f')`` has its spectrum in the hull of products of
    the kernel multipliers and the range of ``f'``.  With that hull
    ``[s_lo, s_hi]`` (``s_hi < 1``) the optimal damping is
    ``2 / (2 - s_lo - s_hi)``.  When ``f'`` changes sign only the norm bound
    is available and ``w = 1``.
    """
    m_lo, m_hi = float(multipliers.min()), float(multipliers.max())
    d_lo, d_hi = f.derivative_range()
    if d_lo >= 0.0 or d_hi <= 0.0:
        prods = [m_lo * d_lo, m_lo * d_hi, m_hi * d_lo, m_hi * d_hi, 0.0]
        s_lo, s_hi = min(prods), max(prods)
        if s_hi < 1.0:
            w = 2.0 / (2.0 - s_lo - s_hi)
            return w, (s_hi - s_lo) / (2.0 - s_lo - s_hi)
    norm = max(abs(m_lo), abs(m_hi)) * max(abs(d_lo), abs(d_hi))
    return 1.0, norm


def _admission(f: NonlinearitySpec, k: int) -> list[str]:
    limit = 4.0 * k
    if f.lipschitz >= limit:
        raise ValueError(f"Lipschitz constant of f2 ({f.lipschitz:g}) must be < 4k = {limit:g}")
    notes = []
    if f.combined_lipschitz >= limit:
        msg = (f"combined Lipschitz estimate {f.combined_lipschitz:g} >= 4k = {limit:g}; "
               "only the f2 part satisfies the solvability condition")
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        notes.append(msg)
    return notes


def solve_scheme(noise: NoiseSample | None, g: SourceSpec | np.ndarray | None, f: NonlinearitySpec,
                 plan: SpectralPlan, mollifier: MollifierTable | None = None, *,
                 tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                 relaxation: float | None = None, initial: np.ndarray | None = None,
                 record_history: bool = False) -> SolveReport:
    """Damped Picard iteration for the (smoothed) lattice scheme.

    ``g`` is a ``SourceSpec`` or an array of cell values ``(n,)*k``.  The
    iteration stops when the sup-norm of the update drops below ``tol``.
    """
    notes = _admission(f, plan.k)
    mult = inverse_multipliers(plan, mollifier)
    w_auto, q = relaxation_for(mult, f)
    w = w_auto if relaxation is None else float(relaxation)
    if not (0.0 < w <= 2.0):
        raise ValueError(f"relaxation {w} outside (0, 2]")
    gn = _source_cells(g, plan.grid)
    k = plan.k
    interior = (slice(1, None),) * k
    const = solve_linear(gn[interior] + noise_forcing(noise, plan), plan, multipliers=mult)
    nonlinear = f.f1_kind != "zero" or f.f2_kind != "zero"
    u = np.zeros(plan.grid.interior_shape) if initial is None else np.array(initial, dtype=float)
    if u.shape != plan.grid.interior_shape:
        raise ValueError(f"initial guess shape {u.shape} != {plan.grid.interior_shape}")
    history: list[float] = []
    update = math.inf
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        target = const + solve_linear(f(u), plan, multipliers=mult) if nonlinear else const
        new = u + w * (target - u)
        if not np.all(np.isfinite(new)):
            raise DivergenceError(f"divergence: non-finite iterate at step {it}")
        update = float(np.abs(new - u).max(initial=0.0))
        u = new
        if record_history:
            history.append(update)
        if update < tol:
            converged = True
            break
    lk = f.lipschitz * apriori_constant(plan)
    return SolveReport(u, it, update, converged, w, q, tol, history, notes, lk)


def _source_cells(g, grid: GridSpec) -> np.ndarray:
    if g is None or isinstance(g, SourceSpec):
        return project_source(g, grid)
    vals = np.asarray(g, dtype=float)
    if vals.shape != grid.cell_shape:
        raise ValueError(f"source values {vals.shape} do not match cell shape {grid.cell_shape}")
    return vals


def embed_cells(u: np.ndarray) -> np.ndarray:
    """Interior nodal values as cell values (boundary cells zero)."""
    return np.pad(u, [(1, 0)] * u.ndim)


def mild_residual(u: np.ndarray, noise: NoiseSample | None, g, f: NonlinearitySpec,
                  plan: SpectralPlan, mollifier: MollifierTable | None = None,
                  method: str = "auto") -> float:
    """``sup_i |u_i - (kernel form)(i/n)|`` with the kernel sums done explicitly.

    ``method`` is ``dense`` (full kernel matrix), ``separable`` (explicit sine
    sums axis by axis) or ``auto`` (dense when the matrix is small).
    """
    k, n = plan.k, plan.n
    _check_grid(noise, plan)
    gn = _source_cells(g, plan.grid)
    cells = (embed_cells(np.asarray(f(u), dtype=float)) + gn) / float(n) ** k
    if noise is not None:
        cells = cells + noise.increments
    size = (n - 1) ** k
    if method == "auto":
        method = "dense" if size <= 2048 else "separable"
    if method == "dense":
        rhs = green_discrete_matrix(plan, mollifier) @ cells[(slice(1, None),) * k].ravel()
        rhs = rhs.reshape(plan.grid.interior_shape)
    elif method == "separable":
        rhs = kernel_apply_direct(cells, plan, mollifier)
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(np.abs(u - rhs).max(initial=0.0))


# -- output ---------------------------------------------------------------------------

def write_solution_csv(path, u: np.ndarray, header: dict | None = None) -> None:
    """Rows ``i_1..i_k,value`` over interior nodes (1-based node indices)."""
    k = u.ndim
    with open(Path(path), "w", encoding="utf-8") as fh:
        for key, val in (header or {}).items():
            fh.write(f"# {key}={val}\n")
        fh.write(",".join([f"i{d + 1}" for d in range(k)] + ["value"]) + "\n")
        for idx in np.ndindex(*u.shape):
            fh.write(",".join(str(i + 1) for i in idx) + f",{u[idx]:.17g}\n")
