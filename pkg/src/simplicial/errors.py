"""Exception hierarchy.

Every error carries a short ``code`` used by the command-line front end to
print ``ERROR <code>: <detail>`` lines.  Errors that signal a numerical
failure (solver breakdown, non-convergence) derive from
:class:`NumericalError`; everything else is a validation problem.
"""

from __future__ import annotations


class SimplicialError(ValueError):
    code = "Error"

    def __init__(self, detail: str = ""):
        super().__init__(detail)
        self.detail = detail


class NumericalError(SimplicialError, ArithmeticError):
    code = "NumericalError"


def _make(name: str, base: type = SimplicialError, doc: str = "") -> type:
    return type(name, (base,), {"code": name, "__doc__": doc})


AllZero = _make("AllZero", doc="Closure of a vector with no positive entry.")
NegativeEntry = _make("NegativeEntry", doc="A composition contains a negative value.")
InvalidComposition = _make("InvalidComposition", doc="Row does not sum to one within tolerance.")
ZeroComponent = _make("ZeroComponent", doc="Log-ratio transform applied to a zero part.")
DimensionTooSmall = _make("DimensionTooSmall")
ZeroWithNonpositiveAlpha = _make("ZeroWithNonpositiveAlpha")
AlphaZero = _make("AlphaZero")
SupportMismatch = _make("SupportMismatch", doc="p > 0 where q == 0 in a divergence.")
NonpositiveParameter = _make("NonpositiveParameter")
ShapeMismatch = _make("ShapeMismatch")
IndexOutOfRange = _make("IndexOutOfRange")
InsufficientTimePoints = _make("InsufficientTimePoints")
SingleLevel = _make("SingleLevel")
TooFewSamples = _make("TooFewSamples")
TooFewRows = _make("TooFewRows")
DegenerateMean = _make("DegenerateMean")
InvalidConfig = _make("InvalidConfig")
ZeroFittedCell = _make(
    "ZeroFittedCell",
    doc="A fitted TFLR cell is zero where the response is positive; the KLD is undefined.",
)

Infeasible = _make("Infeasible", NumericalError)
NotPositiveDefinite = _make("NotPositiveDefinite", NumericalError)
NoConvergence = _make("NoConvergence", NumericalError)


class DegenerateScatter(SimplicialError):
    """Bootstrap points are collinear (or identical) in the ternary plane."""

    code = "DegenerateScatter"

    def __init__(self, detail: str = "", direction=None):
        super().__init__(detail)
        self.direction = direction
