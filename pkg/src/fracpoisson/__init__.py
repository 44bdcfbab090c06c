"""Lattice approximation of the fractional Poisson SPDE on the unit cube.

Modules: ``rates`` (exponents and hypotheses), ``noise`` (fractional field
increments), ``spectral`` (discrete Laplacian and sine transforms),
``kernels`` (Green kernels and mixed norms), ``solver`` (nonlinear
schemes), ``experiments`` (rate studies) and ``cli``.
"""

from .noise import GridSpec, NoiseSample, NoiseSampler, aggregate, sample
from .rates import HurstVector, HypothesisError, convergence_rate_sup, holder_exponent_sup, smoothing_parameters
from .solver import NonlinearitySpec, SourceSpec, solve_scheme
from .spectral import build_plan, mollifier_table

__version__ = "0.1.0"

__all__ = [
    "GridSpec",
    "HurstVector",
    "HypothesisError",
    "NoiseSample",
    "NoiseSampler",
    "NonlinearitySpec",
    "SourceSpec",
    "aggregate",
    "build_plan",
    "convergence_rate_sup",
    "holder_exponent_sup",
    "mollifier_table",
    "sample",
    "smoothing_parameters",
    "solve_scheme",
]
