"""Hurst parameter vector, integrability hypotheses and theoretical exponents.

All exponents reported here are suprema (or attained endpoints) of the
admissible intervals.  When a concrete interior value is needed to build a
scheme, the supremum is shrunk by a safety factor ``rho`` in (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_SAFETY = 0.98


class HypothesisError(ValueError):
    """Raised when the Hurst vector violates the integrability hypothesis."""


@dataclass(frozen=True)
class HurstVector:
    """Hurst exponents ``h = (h_1, ..., h_k)`` with ``1/2 <= h_i < 1``."""

    h: tuple[float, ...]

    def __post_init__(self):
        h = tuple(float(v) for v in np.atleast_1d(self.h))
        if len(h) < 1:
            raise ValueError("HurstVector needs at least one component")
        for i, v in enumerate(h):
            if not (0.5 <= v < 1.0):
                raise ValueError(f"h[{i}] = {v} outside [1/2, 1)")
        object.__setattr__(self, "h", h)

    @classmethod
    def parse(cls, text: str | Sequence[float] | float, k: int | None = None) -> "HurstVector":
        """Build from ``"0.6,0.6"``, a sequence or a scalar (broadcast to ``k``)."""
        if isinstance(text, str):
            parts = [p for p in text.replace(" ", "").split(",") if p]
            try:
                values = [float(p) for p in parts]
            except ValueError as exc:
                raise ValueError(f"malformed Hurst vector {text!r}") from exc
        else:
            values = list(np.atleast_1d(text).astype(float))
        if k is not None:
            if len(values) == 1:
                values = values * k
            elif len(values) != k:
                raise ValueError(f"Hurst vector has {len(values)} components, expected k={k}")
        return cls(tuple(values))

    @property
    def k(self) -> int:
        return len(self.h)

    @property
    def total(self) -> float:
        return float(sum(self.h))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.h, dtype=float)

    def __iter__(self):
        return iter(self.h)

    def __len__(self):
        return len(self.h)


@dataclass(frozen=True)
class ExponentReport:
    lambda_sup: float
    nu_sup: float
    gamma_sup: float
    hypothesis_ok: bool
    hypothesis_star_ok: bool


def check_hypothesis(h: HurstVector) -> bool:
    """Hypothesis (H): nothing extra for k <= 3, ``sum(h) > k - 2`` for k >= 4."""
    if h.k <= 3:
        return True
    return h.total > h.k - 2


def check_hypothesis_star(h: HurstVector) -> bool:
    """Stronger hypothesis (H*): ``sum(h) > k - 1`` for k >= 2."""
    if h.k == 1:
        return True
    return h.total > h.k - 1


def _require(h: HurstVector) -> None:
    if not check_hypothesis(h):
        raise HypothesisError(
            f"hypothesis (H) fails: sum(h) = {h.total:g} must exceed k - 2 = {h.k - 2}"
        )


def holder_exponent_uncapped(h: HurstVector) -> float:
    """``2 - k + sum(h)`` before the cap at 1 (1 for k = 1)."""
    if h.k == 1:
        return 1.0
    return 2.0 - h.k + h.total


def holder_exponent_sup(h: HurstVector) -> float:
    """Supremum of the Hölder exponent of the Green kernel in the mixed norm."""
    _require(h)
    if h.k == 1:
        return 1.0
    return min(holder_exponent_uncapped(h), 1.0)


def _capped_sum(h: HurstVector) -> float:
    return min(h.total, h.k - 1.0)


def convergence_rate_sup(h: HurstVector, k: int | None = None) -> float:
    """Guaranteed L^p(Omega; L^2(D)) rate of the lattice schemes.

    Returns 1/2 (k = 1, attained), 1/2 (k = 2, supremum), 1/4 (k = 3,
    attained) and ``(2 - k + S) / (2 - k + 2 S)`` with ``S = min(sum(h), k-1)``
    for k >= 4.
    """
    if k is not None and k != h.k:
        raise ValueError(f"dimension k={k} does not match Hurst vector of length {h.k}")
    _require(h)
    k = h.k
    if k in (1, 2):
        return 0.5
    if k == 3:
        return 0.25
    s = _capped_sum(h)
    return (2.0 - k + s) / (2.0 - k + 2.0 * s)


@dataclass(frozen=True)
class SmoothingParameters:
    delta: float
    mu: float
    gamma_sup: float
    lam: float
    rho: float

    def epsilon(self, n: int) -> float:
        """Mollifier width ``n ** -mu`` for resolution ``n``."""
        return float(n) ** (-self.mu)


def smoothing_parameters(
    h: HurstVector,
    *,
    delta: float | None = None,
    rho: float = DEFAULT_SAFETY,
) -> SmoothingParameters:
    """Rate-balancing ``delta`` and mollifier exponent ``mu`` for k >= 4.

    With ``delta`` omitted the balancing value solving ``2 mu lambda = delta``
    at the edge of ``mu < (2 - delta) / (k - 2)`` is used.  ``mu`` is then
    shrunk by ``rho`` so that it lies strictly inside the open interval.
    """
    if h.k < 4:
        raise ValueError("smoothed scheme not applicable: requires k >= 4")
    if not (0.0 < rho < 1.0):
        raise ValueError(f"safety factor rho={rho} must lie in (0, 1)")
    _require(h)
    k = h.k
    lam = holder_exponent_sup(h)
    if delta is None:
        s = _capped_sum(h)
        delta = 4.0 * (2.0 - k + s) / (2.0 - k + 2.0 * s)
    if not (0.0 < delta < 2.0):
        raise ValueError(f"delta={delta} must lie in (0, 2)")
    mu_edge = min(delta / (2.0 * lam), (2.0 - delta) / (k - 2.0))
    mu = rho * mu_edge
    gamma_sup = min(2.0 * mu_edge * lam, delta)
    return SmoothingParameters(delta=float(delta), mu=float(mu), gamma_sup=float(gamma_sup),
                               lam=float(lam), rho=float(rho))


def exponent_report(h: HurstVector) -> ExponentReport:
    ok = check_hypothesis(h)
    star = check_hypothesis_star(h)
    if not ok:
        nan = float("nan")
        return ExponentReport(nan, nan, nan, False, star)
    nu = convergence_rate_sup(h)
    return ExponentReport(
        lambda_sup=holder_exponent_sup(h),
        nu_sup=nu,
        gamma_sup=4.0 * nu,
        hypothesis_ok=True,
        hypothesis_star_ok=star,
    )
