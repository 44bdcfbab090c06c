"""Exact sampling of fractional Brownian field increments on lattice cells.

The covariance of the field is a product over axes, so the covariance of the
rectangle increments ``B^H(D_i)`` on the cells of a regular grid is the
Kronecker product of ``k`` one-dimensional fractional Gaussian noise
covariances.  A draw is obtained by applying one Cholesky factor per tensor
axis to a block of independent standard normals.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import lapack

from .rates import HurstVector


@dataclass(frozen=True)
class GridSpec:
    """Regular lattice on ``[0, 1]^k`` with ``n`` cells per axis."""

    k: int
    n: int

    def __post_init__(self):
        if int(self.k) < 1:
            raise ValueError(f"dimension k must be >= 1, got {self.k}")
        if int(self.n) < 2:
            raise ValueError(f"resolution n must be >= 2, got {self.n}")
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "n", int(self.n))

    @property
    def cell_shape(self) -> tuple[int, ...]:
        return (self.n,) * self.k

    @property
    def interior_shape(self) -> tuple[int, ...]:
        return (self.n - 1,) * self.k

    @property
    def h(self) -> float:
        return 1.0 / self.n

    def cell_index(self, x) -> tuple[int, ...]:
        """Multi-index ``j`` of the cell ``D_j`` containing ``x``."""
        x = np.broadcast_to(np.asarray(x, dtype=float), (self.k,))
        j = np.floor(x * self.n).astype(int)
        return tuple(int(v) for v in np.clip(j, 0, self.n - 1))

    def kappa(self, x) -> np.ndarray:
        """Lower-left corner ``j / n`` of the cell containing ``x``."""
        return np.asarray(self.cell_index(x), dtype=float) / self.n

    def cell_interval(self, j: int) -> tuple[float, float]:
        return j / self.n, (j + 1) / self.n

    def cells(self) -> Iterable[tuple[int, ...]]:
        return itertools.product(range(self.n), repeat=self.k)


def covariance_r(h: HurstVector, x, y) -> float:
    """Covariance ``E[B^H(x) B^H(y)]`` of the fractional Brownian field."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    two_h = 2.0 * h.as_array()
    ax, ay = np.abs(x), np.abs(y)
    factors = 0.5 * (ay**two_h + ax**two_h - np.abs(x - y) ** two_h)
    return float(np.prod(factors))


def increment_covariance_1d(h: float, ab, cd) -> float:
    """Covariance of the fBm increments over ``[a, b)`` and ``[c, d)``."""
    a, b = ab
    c, d = cd
    t = 2.0 * h
    return 0.5 * (abs(b - c) ** t + abs(a - d) ** t - abs(a - c) ** t - abs(b - d) ** t)


def axis_covariance(h: float, n: int) -> np.ndarray:
    """``n x n`` covariance of the increments over the cells ``[j/n, (j+1)/n)``."""
    if h == 0.5:
        return np.eye(n) / n
    lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n))).astype(float)
    t = 2.0 * h
    # stationary increments: gamma(m) = ((m+1)^t + (m-1)^t - 2 m^t) / 2 / n^t
    return 0.5 * (np.abs(lag + 1) ** t + np.abs(lag - 1) ** t - 2.0 * lag**t) / float(n) ** t


def increment_covariance(h: HurstVector, grid: GridSpec, cell_i, cell_j) -> float:
    """Covariance of ``B^H(D_i)`` and ``B^H(D_j)`` as a product over axes."""
    out = 1.0
    for hd, i, j in zip(h, cell_i, cell_j):
        out *= increment_covariance_1d(hd, grid.cell_interval(i), grid.cell_interval(j))
    return out


class CholeskyError(np.linalg.LinAlgError):
    def __init__(self, axis: int, pivot: int):
        super().__init__(f"axis {axis} covariance is not positive definite (pivot {pivot})")
        self.axis = axis
        self.pivot = pivot


@dataclass(frozen=True)
class AxisCholesky:
    """Lower Cholesky factor of one axis covariance; ``None`` means ``I/sqrt(n)``."""

    n: int
    h: float
    lower_factor: np.ndarray | None

    @property
    def diagonal(self) -> bool:
        return self.lower_factor is None

    def dense(self) -> np.ndarray:
        if self.lower_factor is None:
            return np.eye(self.n) / np.sqrt(self.n)
        return self.lower_factor


def build_axis_cholesky(h: HurstVector, grid: GridSpec, *, fast_path: bool = True) -> list[AxisCholesky]:
    """One Cholesky factor per axis.  ``h_d = 1/2`` axes use the diagonal fast path."""
    if len(h) != grid.k:
        raise ValueError(f"Hurst vector has {len(h)} components for a k={grid.k} grid")
    factors = []
    for axis, hd in enumerate(h):
        if fast_path and hd == 0.5:
            factors.append(AxisCholesky(grid.n, hd, None))
            continue
        cov = axis_covariance(hd, grid.n)
        chol, info = lapack.dpotrf(cov, lower=1, clean=1)
        if info != 0:
            raise CholeskyError(axis, int(info))
        factors.append(AxisCholesky(grid.n, hd, chol))
    return factors


def kronecker_covariance(h: HurstVector, grid: GridSpec) -> np.ndarray:
    """Full ``n^k x n^k`` increment covariance, row-major cell ordering."""
    out = np.ones((1, 1))
    for hd in h:
        out = np.kron(out, axis_covariance(hd, grid.n))
    return out


def apply_axes(mats: Sequence[np.ndarray | None], arr: np.ndarray, *, batch: bool = False,
               scale_identity: Sequence[float] | None = None) -> np.ndarray:
    """Apply ``mats[d]`` along tensor axis ``d`` of ``arr`` (axis order 1..k).

    ``None`` entries stand for a scaled identity (``scale_identity[d]``).
    With ``batch`` the leading axis of ``arr`` is a replicate axis.
    """
    off = 1 if batch else 0
    out = arr
    for d, m in enumerate(mats):
        ax = d + off
        if m is None:
            s = 1.0 if scale_identity is None else scale_identity[d]
            out = out * s
        else:
            out = np.moveaxis(np.tensordot(m, out, axes=([1], [ax])), 0, ax)
    return out


def _apply_factors(factors: Sequence[AxisCholesky], z: np.ndarray, batch: bool) -> np.ndarray:
    mats = [f.lower_factor for f in factors]
    scales = [1.0 / np.sqrt(f.n) for f in factors]
    return apply_axes(mats, z, batch=batch, scale_identity=scales)


def rng_for(seed: int, stream_id: int = 0, replicate: int = 0) -> np.random.Generator:
    """Counter-based Philox stream keyed by ``(seed, stream_id, replicate)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream_id), int(replicate)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class NoiseSample:
    """One realization of the cell increments ``{B^H(D_j)}``, shape ``(n,)*k``."""

    grid: GridSpec
    h: HurstVector
    increments: np.ndarray
    seed: int = 0
    stream_id: int = 0
    replicate: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.increments.shape != self.grid.cell_shape:
            raise ValueError(
                f"increments shape {self.increments.shape} != cell shape {self.grid.cell_shape}"
            )

    @property
    def interior(self) -> np.ndarray:
        """Increments of the cells whose lower corner is an interior node."""
        return self.increments[(slice(1, None),) * self.grid.k]


class NoiseSampler:
    """Reusable sampler holding the per-axis factors for one ``(h, grid)``."""

    def __init__(self, h: HurstVector, grid: GridSpec, *, fast_path: bool = True):
        self.h = h
        self.grid = grid
        self.factors = build_axis_cholesky(h, grid, fast_path=fast_path)

    def transform(self, z: np.ndarray) -> np.ndarray:
        """Map standard normals of shape ``(n,)*k`` (or batched) to increments."""
        batch = z.ndim == self.grid.k + 1
        return _apply_factors(self.factors, z, batch)

    def sample(self, seed: int, stream_id: int = 0, replicate: int = 0) -> NoiseSample:
        z = rng_for(seed, stream_id, replicate).standard_normal(self.grid.cell_shape)
        return NoiseSample(self.grid, self.h, self.transform(z), seed, stream_id, replicate)

    def sample_batch(self, seed: int, stream_id: int, replicates: Sequence[int]) -> np.ndarray:
        """Increments for several replicates, shape ``(len(replicates),) + (n,)*k``."""
        z = np.stack([rng_for(seed, stream_id, r).standard_normal(self.grid.cell_shape)
                      for r in replicates])
        return self.transform(z)


def sample(h: HurstVector, grid: GridSpec, seed: int, stream_id: int = 0, replicate: int = 0) -> NoiseSample:
    return NoiseSampler(h, grid).sample(seed, stream_id, replicate)


def aggregate_array(fine: np.ndarray, k: int, factor: int) -> np.ndarray:
    """Sum blocks of ``factor**k`` fine cells; works on a leading batch axis too."""
    if factor == 1:
        return fine.copy()
    lead = fine.shape[: fine.ndim - k]
    nf = fine.shape[-1]
    nc = nf // factor
    shape = lead + tuple(s for _ in range(k) for s in (nc, factor))
    sum_axes = tuple(len(lead) + 2 * d + 1 for d in range(k))
    return fine.reshape(shape).sum(axis=sum_axes)


def aggregate(fine: NoiseSample, coarse_grid: GridSpec) -> NoiseSample:
    """Exact coarse increments by additivity over the fine cells."""
    if coarse_grid.k != fine.grid.k:
        raise ValueError("aggregate: dimension mismatch")
    if fine.grid.n % coarse_grid.n != 0:
        raise ValueError(
            f"aggregate: fine resolution {fine.grid.n} is not a multiple of {coarse_grid.n}"
        )
    factor = fine.grid.n // coarse_grid.n
    inc = aggregate_array(fine.increments, fine.grid.k, factor)
    return NoiseSample(coarse_grid, fine.h, inc, fine.seed, fine.stream_id, fine.replicate,
                       dict(fine.meta, aggregated_from=fine.grid.n))


def aggregation_matrix(n_fine: int, n_coarse: int) -> np.ndarray:
    """``n_coarse x n_fine`` 0/1 matrix summing fine cells into coarse ones."""
    if n_fine % n_coarse:
        raise ValueError("non-divisible resolutions")
    r = n_fine // n_coarse
    return np.kron(np.eye(n_coarse), np.ones((1, r)))


# -- serialization -----------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_noise_csv(sample_: NoiseSample, path: str | Path | None = None) -> str:
    """CSV with ``#`` header lines (k, n, h, seed, stream_id) then one row per cell."""
    buf = io.StringIO()
    g = sample_.grid
    buf.write(f"# k={g.k}\n# n={g.n}\n# h={','.join(_fmt(v) for v in sample_.h)}\n")
    buf.write(f"# seed={sample_.seed}\n# stream_id={sample_.stream_id}\n# replicate={sample_.replicate}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"j{d + 1}" for d in range(g.k)] + ["value"])
    for idx in np.ndindex(*g.cell_shape):
        w.writerow(list(idx) + [_fmt(sample_.increments[idx])])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_noise_csv(source: str | Path) -> NoiseSample:
    text = Path(source).read_text() if not str(source).lstrip().startswith("#") else str(source)
    header: dict[str, str] = {}
    rows = []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            header[key.strip()] = val.strip()
        elif line.strip():
            rows.append(line)
    k, n = int(header["k"]), int(header["n"])
    grid = GridSpec(k, n)
    h = HurstVector.parse(header["h"])
    inc = np.zeros(grid.cell_shape)
    reader = csv.reader(rows[1:])
    for r in reader:
        inc[tuple(int(v) for v in r[:k])] = float(r[k])
    return NoiseSample(grid, h, inc, int(header.get("seed", 0)), int(header.get("stream_id", 0)),
                       int(header.get("replicate", 0)))
