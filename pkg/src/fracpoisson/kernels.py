"""Continuum, discrete and smoothed Green kernels of the Dirichlet Laplacian.

Sign convention: every kernel here is the inverse of the (negative definite)
Laplacian, so kernels are negative on the diagonal.  In one dimension the
closed form is ``-((x ^ y) - x y)``.

Discrete kernels are stored as *cell rows*: for a fixed ``x`` the values
``G(x, y)`` on the ``n^k`` cells ``D_j`` (shape ``(n,)*k``); cells touching
the lower boundary carry zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .noise import GridSpec
from .rates import HurstVector, check_hypothesis, HypothesisError
from .spectral import (
    PSI_HAT_T4_BOUND,
    MollifierTable,
    SpectralPlan,
    _outer_prod,
    _outer_sum,
    beta_norm2,
    default_mollifier,
    dst_forward,
    dst_inverse,
    inverse_multipliers,
    sine_matrix,
)


# -- continuum kernels --------------------------------------------------------------

def green_continuum_1d(x, y):
    """``-((x ^ y) - x y)`` on ``]0,1[``; vectorized."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return -(np.minimum(x, y) - x * y)


def green_continuum_series(x, y, b_max: int) -> float:
    """Partial sine series of the continuum kernel over ``beta in {1..b_max}^k``.

    Valid as an L^2 object for ``k <= 3`` only.  ``y`` may lie outside the
    cube, in which case the odd extension is evaluated.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    k = x.size
    if k >= 4:
        raise ValueError("continuum kernel not square-integrable; use smoothed kernel")
    beta = np.arange(1, b_max + 1, dtype=float)
    prods = [np.sin(beta * np.pi * xd) * np.sin(beta * np.pi * yd) for xd, yd in zip(x, y)]
    b2 = _outer_sum([beta**2] * k)
    return float(np.sum(-(2.0**k) / (np.pi**2 * b2) * _outer_prod(prods)))


def green_continuum_1d_l1_sup(resolution: int = 20001) -> float:
    """``sup_x int |G(x, y)| dy`` for the 1-D closed form (midpoint quadrature)."""
    xs = np.linspace(0.0, 1.0, 201)[1:-1]
    y = (np.arange(resolution) + 0.5) / resolution
    vals = [np.abs(green_continuum_1d(x, y)).mean() for x in xs]
    return float(max(vals))


# -- discrete kernels -----------------------------------------------------------------

def _node_index(grid: GridSpec, x) -> tuple[int, ...]:
    return grid.cell_index(x)


def kernel_rows(plan: SpectralPlan, nodes: Sequence[Sequence[int]],
                mollifier: MollifierTable | None = None) -> np.ndarray:
    """Cell rows ``G_{D,n}(i/n, .)`` for a batch of node multi-indices ``i``.

    Rows for nodes on the lower boundary are identically zero.  Output shape
    is ``(len(nodes),) + (n,)*k``.
    """
    grid = plan.grid
    k, n = grid.k, grid.n
    nodes = [tuple(int(v) for v in i) for i in nodes]
    out = np.zeros((len(nodes),) + grid.cell_shape)
    live = [b for b, i in enumerate(nodes) if min(i) >= 1]
    if not live:
        return out
    unit = np.zeros((len(live),) + grid.interior_shape)
    for r, b in enumerate(live):
        unit[(r,) + tuple(v - 1 for v in nodes[b])] = 1.0
    m = inverse_multipliers(plan, mollifier)
    rows = float(n) ** k * dst_inverse(dst_forward(unit, k) * m, k)
    out[(live, *([slice(1, None)] * k))] = rows
    return out


def green_discrete_row(x, plan: SpectralPlan, mollifier: MollifierTable | None = None) -> np.ndarray:
    """Cell row ``y -> G_{D,n}(x, y)`` (one inverse sine transform)."""
    return kernel_rows(plan, [_node_index(plan.grid, x)], mollifier)[0]


def green_discrete(x, y, plan: SpectralPlan, mollifier: MollifierTable | None = None) -> float:
    """Discrete (optionally smoothed) kernel evaluated at ``(kappa_n(x), kappa_n(y))``."""
    row = green_discrete_row(x, plan, mollifier)
    return float(row[_node_index(plan.grid, y)])


def green_discrete_matrix(plan: SpectralPlan, mollifier: MollifierTable | None = None) -> np.ndarray:
    """Dense interior-by-interior kernel from the explicit eigen sum (small grids)."""
    k, n = plan.k, plan.n
    s = sine_matrix(n)
    sk = np.ones((1, 1))
    for _ in range(k):
        sk = np.kron(sk, s)
    m = inverse_multipliers(plan, mollifier).ravel()
    out = 2.0**k * (sk.T * m) @ sk
    return 0.5 * (out + out.T)  # exact symmetry


def kernel_apply_direct(weights: np.ndarray, plan: SpectralPlan,
                        mollifier: MollifierTable | None = None) -> np.ndarray:
    """``sum_j G(i, j) w_j`` over cells using explicit sine matrices.

    ``weights`` has the cell shape ``(n,)*k``; the result lives on interior
    nodes.  Deliberately avoids the FFT path used by the solver.
    """
    k, n = plan.k, plan.n
    s = sine_matrix(n)
    w = weights[(slice(1, None),) * k]
    c = w
    for d in range(k):
        c = np.moveaxis(np.tensordot(s, c, axes=([1], [d])), 0, d)
    c = c * (2.0**k * inverse_multipliers(plan, mollifier))
    for d in range(k):
        c = np.moveaxis(np.tensordot(s.T, c, axes=([1], [d])), 0, d)
    return c


# -- mixed norms -----------------------------------------------------------------------

@dataclass(frozen=True)
class MixedExponents:
    """Exponents ``(p_1, ..., p_k)``; ``p_1`` belongs to the innermost axis."""

    p: tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(v) for v in np.atleast_1d(self.p))
        if any(not (v >= 1.0) for v in p):
            raise ValueError(f"mixed-norm exponents must be >= 1, got {p}")
        object.__setattr__(self, "p", p)

    @classmethod
    def from_hurst(cls, h: HurstVector) -> "MixedExponents":
        return cls(tuple(1.0 / v for v in h))

    @classmethod
    def dual_from_hurst(cls, h: HurstVector) -> "MixedExponents":
        return cls(tuple(1.0 / (1.0 - v) for v in h))


def mixed_norm(values: np.ndarray, p: MixedExponents | Sequence[float], *, batch: bool = False) -> np.ndarray | float:
    """Iterated ``L^{p_1,...,p_k}`` norm of midpoint samples on ``[0,1]^k``.

    Array axis ``d`` carries coordinate ``d+1``; the integral over axis 0 is
    taken first.  ``p = inf`` axes use the maximum.  With ``batch`` the
    leading axis indexes independent functions.
    """
    if not isinstance(p, MixedExponents):
        p = MixedExponents(tuple(p))
    arr = np.abs(np.asarray(values, dtype=float))
    off = 1 if batch else 0
    k = arr.ndim - off
    if len(p.p) != k:
        raise ValueError(f"{len(p.p)} exponents for a {k}-dimensional field")
    # norms are homogeneous; rescale against under/overflow in arr**p
    scale = arr.reshape(arr.shape[0], -1).max(axis=1) if batch else arr.max(initial=0.0)
    scale = np.where(scale > 0, scale, 1.0)
    arr = arr / (scale.reshape((-1,) + (1,) * k) if batch else scale)
    for pd in p.p:
        ax = off
        m = arr.shape[ax]
        if math.isinf(pd):
            arr = arr.max(axis=ax)
        else:
            arr = (np.sum(arr**pd, axis=ax) / m) ** (1.0 / pd)
    return arr * scale if batch else float(arr * scale)


def lp_norm(values: np.ndarray, p: float) -> float:
    arr = np.abs(np.asarray(values, dtype=float))
    top = float(arr.max(initial=0.0))
    if math.isinf(p) or top == 0.0:
        return top
    return top * float(np.mean((arr / top) ** p) ** (1.0 / p))


def _representative_nodes(grid: GridSpec) -> list[tuple[int, ...]]:
    """Interior nodes up to the reflection ``i -> n - i`` on every axis."""
    half = grid.n // 2
    return [tuple(i + 1 for i in idx) for idx in np.ndindex(*([half] * grid.k))]


def _row_norms(plan: SpectralPlan, nodes, mollifier, p: MixedExponents, chunk: int) -> np.ndarray:
    out = []
    for s in range(0, len(nodes), chunk):
        rows = kernel_rows(plan, nodes[s:s + chunk], mollifier)
        out.append(mixed_norm(rows, p, batch=True))
    return np.concatenate(out) if out else np.zeros(0)


def _chunk_for(grid: GridSpec) -> int:
    return max(1, 2**23 // int(np.prod(grid.cell_shape)))


def kernel_mixed_bound(h: HurstVector, plan: SpectralPlan, mollifier: MollifierTable | None = None,
                       nodes: Iterable[Sequence[int]] | None = None) -> float:
    """``sup_x || G_{D,n}(x, .) ||`` in the mixed norm with exponents ``1/h_d``.

    The discrete kernel is constant on cells, so the norm is exact.  With
    ``nodes`` omitted the supremum runs over all interior nodes, using the
    reflection symmetry of the cube.
    """
    if not check_hypothesis(h):
        raise HypothesisError("hypothesis (H) fails")
    if h.k != plan.k:
        raise ValueError("Hurst vector and plan dimensions differ")
    nodes = _representative_nodes(plan.grid) if nodes is None else [tuple(i) for i in nodes]
    norms = _row_norms(plan, nodes, mollifier, MixedExponents.from_hurst(h), _chunk_for(plan.grid))
    return float(norms.max())


def green_l1_sup(plan: SpectralPlan, mollifier: MollifierTable | None = None) -> float:
    """``sup_x int |G_{D,n}(x, y)| dy`` over interior nodes (the a-priori constant)."""
    nodes = _representative_nodes(plan.grid)
    p = MixedExponents((1.0,) * plan.k)
    return float(_row_norms(plan, nodes, mollifier, p, _chunk_for(plan.grid)).max())


def holder_modulus(h: HurstVector, x, z, plan: SpectralPlan | None = None,
                   mollifier: MollifierTable | None = None, resolution: int = 8192) -> float:
    """Mixed norm (exponents ``1/h_d``) of ``G(x, .) - G(z, .)``.

    Without a plan the 1-D closed form is integrated on a midpoint lattice;
    with a plan the discrete (or smoothed) kernel is used exactly.
    """
    p = MixedExponents.from_hurst(h)
    if plan is None:
        if h.k != 1:
            raise ValueError("closed-form kernel is only available for k = 1; pass a plan")
        y = (np.arange(resolution) + 0.5) / resolution
        diff = green_continuum_1d(float(np.ravel(x)[0]), y) - green_continuum_1d(float(np.ravel(z)[0]), y)
        return mixed_norm(diff, p)
    rows = kernel_rows(plan, [plan.grid.cell_index(x), plan.grid.cell_index(z)], mollifier)
    return mixed_norm(rows[0] - rows[1], p)


# -- kernel discrepancy ------------------------------------------------------------------

def eigenvalue_gap(plan: SpectralPlan) -> np.ndarray:
    """``| -1/(pi^2 |beta|^2) - 1/lambda_beta |`` on ``I_n^k``."""
    b2 = beta_norm2(plan.n, plan.k)
    return np.abs(-1.0 / (np.pi**2 * b2) - 1.0 / plan.eigenvalues)


def cell_projection_matrix(n: int, b_max: int) -> np.ndarray:
    """``P[a-1, b-1] = int_0^1 sin(a pi x) sin(b pi kappa_n(x)) dx``.

    Rows ``a = 1..b_max`` (continuum modes), columns ``b = 1..n-1``.
    """
    a = np.arange(1, b_max + 1, dtype=float)
    j = np.arange(n, dtype=float)
    cell_int = (np.cos(np.outer(a, j) * np.pi / n) - np.cos(np.outer(a, j + 1) * np.pi / n)) / (np.pi * a[:, None])
    sin_kappa = np.sin(np.pi * np.outer(j, np.arange(1, n)) / n)
    return cell_int @ sin_kappa


@dataclass(frozen=True)
class DiscrepancyReport:
    """``|| G^eps - G^eps_{D,n} ||_{L^2(D x D)}`` and its ingredients."""

    n: int
    epsilon: float | None
    b_max: int
    value: float
    tail_bound: float
    a1: float
    a2: float
    a3: float
    a4: float


def _psi_sums(eps: float, b_max: int) -> tuple[np.ndarray, float, float]:
    """``psi_hat(eps a)`` for ``a <= b_max`` plus bounds on the tail sums.

    Returns the values, ``F = sum_{a > b_max} psi_hat^2(eps a) / a^4`` and
    ``S = sum_{a >= 1} psi_hat^2(eps a)`` (both as upper bounds).
    """
    moll = default_mollifier()
    t_far = 400.0
    a_far = max(b_max + 1, int(np.ceil(t_far / eps)))
    a = np.arange(1, a_far + 1, dtype=float)
    vals = moll.psi_hat(eps * a)
    sq = vals**2
    c2 = PSI_HAT_T4_BOUND**2
    # beyond a_far: |psi_hat(t)| <= C / t^4
    far_s = c2 * eps**-8 * a_far**-7 / 7.0
    far_f = c2 * eps**-8 * a_far**-11 / 11.0
    f_tail = float(np.sum(sq[b_max:] / a[b_max:] ** 4) + far_f)
    s_total = float(np.sum(sq) + far_s)
    return vals[:b_max], f_tail, s_total


def _identity_tail(k: int, b_max: int) -> float:
    """Bound on ``sum_{alpha outside [1,B]^k} 1 / (pi^4 |alpha|^4)`` for ``k <= 3``."""
    m = k - 1
    # sum over the other m axes <= integral over the positive orthant
    if m == 0:
        c, q = 1.0, 4
    elif m == 1:
        c, q = math.pi / 4.0, 3
    elif m == 2:
        c, q = math.pi / 4.0, 2
    else:
        raise ValueError("continuum kernel not square-integrable; use smoothed kernel")
    return k * c * b_max ** (1 - q) / (q - 1) / math.pi**4


def kernel_discrepancy_l2(plan: SpectralPlan, mollifier: MollifierTable | None = None,
                          b_max: int | None = None, *, exact_eigenvalues: bool = False,
                          tail_ratio: float = 0.1) -> DiscrepancyReport:
    """L^2(D x D) distance between the continuum series and the lattice kernel.

    Both kernels carry the same multipliers ``Psi_hat(eps beta)`` (or none
    when ``mollifier`` is ``None``, which needs ``k <= 3``).  The continuum
    series is truncated to ``beta in [1, b_max]^k``; the truncated distance
    is exact, and the omitted tail is bounded through the decay of
    ``psi_hat`` and enters ``tail_bound``.  ``exact_eigenvalues`` replaces
    ``lambda_beta`` by ``-pi^2 |beta|^2`` in the lattice kernel.
    """
    k, n = plan.k, plan.n
    if k < 2:
        raise ValueError("kernel discrepancy needs k >= 2")
    b = max(4 * n, 48) if b_max is None else int(b_max)
    if b < n:
        raise ValueError(f"b_max={b} must be >= n={n}")
    if mollifier is None:
        axis_psi = np.ones(b)
        tail_sq = _identity_tail(k, b)
        eps = None
    else:
        if mollifier.grid != plan.grid:
            raise ValueError("mollifier table and plan are on different grids")
        eps = mollifier.epsilon
        axis_psi, f_tail, s_total = _psi_sums(eps, b)
        tail_sq = k * f_tail * s_total ** (k - 1) / math.pi**4

    two_k = 2.0**k
    lam = -np.pi**2 * beta_norm2(n, k) if exact_eigenvalues else plan.eigenvalues
    psi_disc = _outer_prod([axis_psi[: n - 1]] * k)
    a_coef = two_k * psi_disc / lam

    q = cell_projection_matrix(n, b) ** 2
    diag_p = np.diag(cell_projection_matrix(n, n - 1))

    # contract the lattice coefficients with P^2 along axes 2..k
    t = a_coef
    for d in range(1, k):
        t = np.moveaxis(np.tensordot(q, t, axes=([1], [d])), 0, d)

    a_idx = np.arange(1, b + 1, dtype=float)
    rest_b2 = _outer_sum([a_idx**2] * (k - 1))
    rest_psi = _outer_prod([axis_psi] * (k - 1))
    norm_cont = 0.0
    cross = 0.0
    a1_in = 0.0
    for i1 in range(b):
        b_slice = -two_k * axis_psi[i1] * rest_psi / (np.pi**2 * (a_idx[i1] ** 2 + rest_b2))
        sq = b_slice**2
        norm_cont += float(sq.sum())
        if i1 < n - 1:
            inner = sq[(slice(0, n - 1),) * (k - 1)].sum()
            a1_in += float(sq.sum() - inner)
        else:
            a1_in += float(sq.sum())
        row = np.tensordot(q[i1], t, axes=([0], [0]))
        cross += float(np.sum(b_slice * row))
    scale = 4.0**-k
    norm_cont *= scale
    norm_disc = float(np.sum(a_coef**2)) * scale
    sq_dist = norm_cont - 2.0 * cross + norm_disc
    value = math.sqrt(max(sq_dist, 0.0))
    tail = math.sqrt(tail_sq)

    b_in = -two_k * psi_disc / (np.pi**2 * beta_norm2(n, k))
    a2 = float(np.sum((b_in - a_coef) ** 2)) * scale
    snap = 2.0 ** (1 - k) - 2.0 * _outer_prod([diag_p] * k)
    a3 = float(np.sum(a_coef**2 * snap)) * 2.0**-k
    report = DiscrepancyReport(n=n, epsilon=eps, b_max=b, value=value, tail_bound=tail,
                               a1=a1_in * scale + tail_sq, a2=a2, a3=a3, a4=a3)
    if tail > tail_ratio * value:
        raise ArithmeticError(
            f"increase B_max: tail bound {tail:.3e} exceeds {tail_ratio:.0%} of discrepancy {value:.3e}"
        )
    return report


# -- kernel slices ---------------------------------------------------------------------

KERNEL_KINDS = ("continuum", "continuum_truncated", "discrete", "smoothed_discrete", "smoothed_continuum")


@dataclass(frozen=True)
class KernelSlice:
    """``y -> G(x, y)`` sampled at the midpoints of an ``m^k`` lattice."""

    x: tuple[float, ...]
    values: np.ndarray
    kind: str

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def points(self) -> np.ndarray:
        m = self.resolution
        return (np.arange(m) + 0.5) / m


def _series_on_lattice(x, coeff_axis: Sequence[np.ndarray] | None, b_max: int, m: int,
                       two_k_over_pi2: bool = True) -> np.ndarray:
    """``sum_beta c_beta v_beta(x) v_beta(y)`` for ``y`` on the midpoint lattice.

    ``c_beta = -2^k prod_d w_d(beta_d) / (pi^2 |beta|^2)`` with per-axis weights
    ``w_d`` (all ones when ``coeff_axis`` is None).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k = x.size
    beta = np.arange(1, b_max + 1, dtype=float)
    y = (np.arange(m) + 0.5) / m
    s = np.sin(np.pi * np.outer(beta, y))
    w = [np.ones(b_max)] * k if coeff_axis is None else list(coeff_axis)
    c = -(2.0**k) * _outer_prod([w[d] * np.sin(beta * np.pi * x[d]) for d in range(k)])
    c = c / (np.pi**2 * _outer_sum([beta**2] * k))
    for d in range(k):
        c = np.moveaxis(np.tensordot(s.T, c, axes=([1], [d])), 0, d)
    return c


def kernel_slice(x, kind: str, *, plan: SpectralPlan | None = None,
                 mollifier: MollifierTable | None = None, epsilon: float | None = None,
                 b_max: int = 256, resolution: int = 64) -> KernelSlice:
    """Sample one kernel row on a midpoint lattice with ``resolution`` points per axis.

    Discrete kinds need ``plan`` (and ``mollifier`` when smoothed); the
    lattice resolution must then be a multiple of ``n`` so that cell values
    are reproduced exactly.
    """
    if kind not in KERNEL_KINDS:
        raise ValueError(f"unknown kernel kind {kind!r}; expected one of {KERNEL_KINDS}")
    x = tuple(float(v) for v in np.atleast_1d(x))
    k = len(x)
    if kind == "continuum":
        if k != 1:
            raise ValueError("closed-form continuum kernel is only available for k = 1")
        y = (np.arange(resolution) + 0.5) / resolution
        return KernelSlice(x, green_continuum_1d(x[0], y), kind)
    if kind in ("continuum_truncated", "smoothed_continuum"):
        if kind == "continuum_truncated":
            if k >= 4:
                raise ValueError("continuum kernel not square-integrable; use smoothed kernel")
            weights = None
        else:
            if epsilon is None:
                raise ValueError("smoothed_continuum needs epsilon")
            weights = [default_mollifier().psi_hat(epsilon * np.arange(1, b_max + 1))] * k
        return KernelSlice(x, _series_on_lattice(x, weights, b_max, resolution), kind)
    if plan is None:
        raise ValueError(f"kind {kind!r} needs a spectral plan")
    if kind == "smoothed_discrete" and mollifier is None:
        raise ValueError("smoothed_discrete needs a mollifier table")
    n = plan.n
    if resolution % n:
        raise ValueError(f"resolution {resolution} must be a multiple of n={n}")
    row = green_discrete_row(x, plan, mollifier if kind == "smoothed_discrete" else None)
    rep = resolution // n
    for d in range(k):
        row = np.repeat(row, rep, axis=d)
    return KernelSlice(x, row, kind)


def parseval_l2_sq(x, epsilon: float | None, b_max: int) -> tuple[float, float]:
    """Truncated ``(2^k / pi^4) sum psi_hat^2 / |beta|^4 v_beta^2(x)`` and a tail bound.

    ``epsilon=None`` means no smoothing (``k <= 3`` only).  The tail bound
    uses ``v_beta^2 <= 1``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k = x.size
    beta = np.arange(1, b_max + 1, dtype=float)
    if epsilon is None:
        w = np.ones(b_max)
        tail = 2.0**k * _identity_tail(k, b_max)
    else:
        w, f_tail, s_total = _psi_sums(epsilon, b_max)
        tail = 2.0**k * k * f_tail * s_total ** (k - 1) / math.pi**4
    terms = _outer_prod([w**2 * np.sin(beta * np.pi * xd) ** 2 for xd in x]) / _outer_sum([beta**2] * k) ** 2
    return float(2.0**k / math.pi**4 * terms.sum()), float(tail)


def write_kernel_csv(path, kslice: KernelSlice) -> None:
    """CSV rows ``m_1..m_k,value`` (lattice multi-index, then kernel value)."""
    k = kslice.values.ndim
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# kind={kslice.kind}\n# x={','.join(repr(v) for v in kslice.x)}\n")
        fh.write(",".join([f"m{d + 1}" for d in range(k)] + ["value"]) + "\n")
        for idx in np.ndindex(*kslice.values.shape):
            fh.write(",".join(str(i) for i in idx) + f",{kslice.values[idx]:.17g}\n")
