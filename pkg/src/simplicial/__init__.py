"""Transformation-free regression between compositions.

Simplicial constrained least squares (SCLS) solved as a quadratic program,
the KLD-based TFLR baseline fitted by EM, and resampling inference.
"""

from .composition import (
    CompositionMatrix,
    alpha_transform,
    alr,
    alr_inverse,
    closure,
    clr,
    dirichlet_sample,
    helmert_submatrix,
    ilr,
    jsd,
    kld,
    negated_entropy,
    power_transform,
    power_transform_inverse,
)
from .errors import NumericalError, SimplicialError
from .qp import QPSolution, QPStatus, QuadraticProgram, nearest_positive_definite, solve_qp
from .scls import (
    CoefficientMatrix,
    SclsFit,
    assemble_qp,
    encode_categorical,
    fit_alpha_scls,
    fit_ar1,
    fit_multi,
    fit_scls,
    fit_weighted,
    interpret_delta,
    predict,
)
from .tflr import TflrFit, fit_tflr

__version__ = "0.1.0"
