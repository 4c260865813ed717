"""Simplicial constrained least squares (SCLS).

The model is ``E(Y | X) = X B`` with ``B`` row-stochastic.  ``B`` minimises
the squared loss ``SL(B) = ||Y - XB||_F^2``, which is a quadratic program in
``b = vec(B)`` (columns stacked)::

    D  = I_{D_r} kron X'X
    d  = vec(X'Y)
    row sums of B equal 1       (D_p equality rows)
    B >= 0                      (D_r * D_p inequality rows)

The upper bound ``B <= 1`` is implied by the two blocks above and is only
added on request (``include_upper=True``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .composition import (
    CompositionMatrix,
    as_array,
    default_names,
    power_transform,
    power_transform_inverse,
    write_matrix_csv,
)
from .errors import (
    IndexOutOfRange,
    InsufficientTimePoints,
    InvalidComposition,
    Infeasible,
    NoConvergence,
    NotPositiveDefinite,
    ShapeMismatch,
    SingleLevel,
)
from .qp import (
    PD_FLOOR,
    QPFactor,
    QPSolution,
    QPStatus,
    QuadraticProgram,
    factorize,
    nearest_positive_definite,
    solve_qp,
)

COEF_TOL = 1e-8


@dataclass(frozen=True)
class CoefficientMatrix:
    """Row-stochastic ``D_p x D_r`` coefficient matrix with labels."""

    B: np.ndarray
    predictor_names: tuple[str, ...] | None = None
    response_names: tuple[str, ...] | None = None

    def __post_init__(self):
        B = np.array(self.B, dtype=float)
        if B.ndim != 2:
            raise ShapeMismatch(f"coefficient matrix must be 2-D, got {B.ndim}-D")
        if np.any(B < -COEF_TOL) or np.any(B > 1 + COEF_TOL):
            raise InvalidComposition("coefficients must lie in [0, 1]")
        if np.any(np.abs(B.sum(axis=1) - 1) > COEF_TOL):
            raise InvalidComposition("coefficient rows must sum to 1")
        B.setflags(write=False)
        object.__setattr__(self, "B", B)
        Dp, Dr = B.shape
        pn = self.predictor_names or default_names("X", Dp)
        rn = self.response_names or default_names("Y", Dr)
        if len(pn) != Dp or len(rn) != Dr:
            raise ShapeMismatch("label count does not match coefficient shape")
        object.__setattr__(self, "predictor_names", tuple(pn))
        object.__setattr__(self, "response_names", tuple(rn))

    @property
    def shape(self):
        return self.B.shape

    def __array__(self, dtype=None, copy=None):
        return self.B if dtype is None else self.B.astype(dtype)

    def to_dict(self) -> dict:
        return {
            "predictor_names": list(self.predictor_names),
            "response_names": list(self.response_names),
            "B": self.B.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CoefficientMatrix":
        return cls(np.array(doc["B"]), tuple(doc["predictor_names"]), tuple(doc["response_names"]))

    def to_csv(self, path):
        write_matrix_csv(path, self.B, self.response_names, self.predictor_names)


@dataclass(frozen=True)
class SolverSummary:
    status: str
    iterations: int
    active_set: tuple[int, ...]
    repaired: bool

    @classmethod
    def from_solution(cls, sol: QPSolution, repaired: bool) -> "SolverSummary":
        return cls(sol.status.value, sol.iterations, sol.active_set, repaired)


@dataclass(frozen=True)
class SclsFit:
    coefficients: CoefficientMatrix | list[CoefficientMatrix]
    loss: float
    fitted: np.ndarray
    alpha: float = 1.0
    solver: SolverSummary | None = None
    weights: np.ndarray | None = None
    loss_history: tuple[float, ...] = field(default=(), repr=False)

    @property
    def B(self) -> np.ndarray:
        """Coefficient matrix (stacked vertically for several predictors)."""
        if isinstance(self.coefficients, list):
            return np.vstack([c.B for c in self.coefficients])
        return self.coefficients.B

    @property
    def is_multi(self) -> bool:
        return isinstance(self.coefficients, list)

    def to_dict(self) -> dict:
        doc = {"alpha": self.alpha, "loss": self.loss}
        if self.is_multi:
            doc["coefficients"] = [c.to_dict() for c in self.coefficients]
            if self.weights is not None:
                doc["weights"] = self.weights.tolist()
        else:
            doc["coefficients"] = self.coefficients.to_dict()
        if self.solver is not None:
            doc["solver"] = {
                "status": self.solver.status,
                "iterations": self.solver.iterations,
                "repaired": self.solver.repaired,
            }
        return doc

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def load_fit_json(path) -> SclsFit:
    with open(path) as fh:
        doc = json.load(fh)
    coef = doc["coefficients"]
    if isinstance(coef, list):
        coefficients = [CoefficientMatrix.from_dict(c) for c in coef]
        weights = np.array(doc.get("weights") or [1.0 / len(coef)] * len(coef))
    else:
        coefficients, weights = CoefficientMatrix.from_dict(coef), None
    return SclsFit(coefficients, float(doc.get("loss", np.nan)), np.empty((0, 0)),
                   float(doc.get("alpha", 1.0)), weights=weights)


def squared_loss(Y, X, B) -> float:
    R = as_array(Y) - as_array(X) @ np.asarray(B)
    return float(np.sum(R * R))


def constraint_blocks(D_r: int, D_p: int, include_upper: bool = False):
    """Constraint matrix (one row per constraint), bounds, and equality count."""
    m = D_r * D_p
    eq = np.tile(np.eye(D_p), (1, D_r))
    rows = [eq, np.eye(m)]
    b0 = [np.ones(D_p), np.zeros(m)]
    if include_upper:
        rows.append(-np.eye(m))
        b0.append(-np.ones(m))
    return np.vstack(rows), np.concatenate(b0), D_p


def _check_pair(Y, X):
    Y, X = as_array(Y), as_array(X)
    if Y.ndim != 2 or X.ndim != 2:
        raise ShapeMismatch("Y and X must be 2-D")
    if Y.shape[0] != X.shape[0]:
        raise ShapeMismatch(f"Y has {Y.shape[0]} rows, X has {X.shape[0]}")
    if Y.shape[1] < 2 or X.shape[1] < 2:
        raise ShapeMismatch("both sides need at least 2 components")
    return Y, X


def assemble_qp(Y, X, include_upper: bool = False) -> QuadraticProgram:
    Y, X = _check_pair(Y, X)
    D_r, D_p = Y.shape[1], X.shape[1]
    A, b0, meq = constraint_blocks(D_r, D_p, include_upper)
    XtX = X.T @ X
    return QuadraticProgram(
        Dmat=np.kron(np.eye(D_r), XtX),
        dvec=(X.T @ Y).ravel(order="F"),
        Amat_T=A,
        b0=b0,
        n_equalities=meq,
    )


def gram_factor(XtX: np.ndarray, D_r: int) -> tuple[QPFactor, bool]:
    """Factor ``I kron X'X``, repairing ``X'X`` first if it is singular."""
    D = np.kron(np.eye(D_r), XtX)
    fac = factorize(D)
    if fac is not None:
        return fac, False
    eps = PD_FLOOR * max(1.0, float(np.abs(np.diag(XtX)).max(initial=0.0)))
    XtX_r = nearest_positive_definite(0.5 * (XtX + XtX.T), eps)
    fac = factorize(np.kron(np.eye(D_r), XtX_r))
    if fac is None:
        raise NotPositiveDefinite("quadratic term could not be repaired")
    return fac, True


def raise_for_status(sol: QPSolution):
    if sol.status is QPStatus.OPTIMAL:
        return
    if sol.status is QPStatus.INFEASIBLE:
        raise Infeasible("constraints admit no solution")
    if sol.status is QPStatus.NOT_POSITIVE_DEFINITE:
        raise NotPositiveDefinite("quadratic term is not positive definite")
    raise NoConvergence(f"QP solver stopped after {sol.iterations} iterations")


def _clean(B: np.ndarray) -> np.ndarray:
    B = np.clip(B, 0.0, 1.0)
    return B / B.sum(axis=1, keepdims=True)


def solve_scls(Y, X, factor: QPFactor | None = None, repaired: bool = False, *, include_upper=False):
    """Array-level SCLS solve; returns ``(B, SL(B), QPSolution, repaired)``.

    ``Y`` need not be compositional here (restricted fits subtract known
    terms first).  Supply ``factor`` to reuse a factorised ``I kron X'X``.
    """
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    D_r, D_p = Y.shape[1], X.shape[1]
    if factor is None:
        factor, repaired = gram_factor(X.T @ X, D_r)
    A, b0, meq = constraint_blocks(D_r, D_p, include_upper)
    qp = QuadraticProgram(factor.Dmat, (X.T @ Y).ravel(order="F"), A, b0, meq)
    sol = solve_qp(qp, factor)
    raise_for_status(sol)
    B = _clean(sol.b.reshape(D_r, D_p).T)
    return B, squared_loss(Y, X, B), sol, repaired


def _names(M, prefix, D):
    if isinstance(M, CompositionMatrix) and M.names is not None:
        return M.names
    return default_names(prefix, D)


def fit_scls(Y, X) -> SclsFit:
    """Fit SCLS of the compositional response ``Y`` on the compositional predictor ``X``."""
    Ya, Xa = _check_pair(Y, X)
    B, loss, sol, repaired = solve_scls(Ya, Xa)
    coef = CoefficientMatrix(B, _names(X, "X", Xa.shape[1]), _names(Y, "Y", Ya.shape[1]))
    return SclsFit(coef, loss, Xa @ B, 1.0, SolverSummary.from_solution(sol, repaired))


def fit_alpha_scls(Y, X, alpha: float) -> SclsFit:
    """SCLS on the power-transformed response; fitted values are back-transformed.

    ``alpha = 1`` is plain SCLS.  The reported loss is on the transformed scale.
    """
    Ya, Xa = _check_pair(Y, X)
    W = power_transform(Ya, alpha)
    B, loss, sol, repaired = solve_scls(W, Xa)
    coef = CoefficientMatrix(B, _names(X, "X", Xa.shape[1]), _names(Y, "Y", Ya.shape[1]))
    fitted = Xa @ B
    if alpha != 1:
        fitted = power_transform_inverse(fitted, alpha)
    return SclsFit(coef, loss, fitted, float(alpha), SolverSummary.from_solution(sol, repaired))


def predict(fit: SclsFit, X_new) -> np.ndarray:
    """Expected response ``x B`` for each predictor row (back-transformed if alpha != 1).

    For multi-predictor fits pass a sequence with one matrix per predictor.
    """
    if fit.is_multi:
        if not isinstance(X_new, (list, tuple)) or len(X_new) != len(fit.coefficients):
            raise ShapeMismatch(f"expected {len(fit.coefficients)} predictor matrices")
        w = fit.weights if fit.weights is not None else np.full(len(X_new), 1.0 / len(X_new))
        out = 0.0
        for a, c, Xm in zip(w, fit.coefficients, X_new):
            Xm = as_array(Xm)
            if Xm.ndim == 1:
                Xm = Xm[None, :]
            if Xm.shape[1] != c.B.shape[0]:
                raise ShapeMismatch(f"predictor has {Xm.shape[1]} parts, expected {c.B.shape[0]}")
            out = out + a * (Xm @ c.B)
    else:
        X_new = as_array(X_new)
        B = fit.coefficients.B
        if X_new.shape[-1] != B.shape[0]:
            raise ShapeMismatch(f"predictor has {X_new.shape[-1]} parts, expected {B.shape[0]}")
        out = X_new @ B
    if fit.alpha != 1:
        out = power_transform_inverse(out, fit.alpha)
    return out


def interpret_delta(B, j: int, l: int, delta: float) -> np.ndarray:
    """Expected response change when part ``j`` rises by ``delta`` and part ``l`` falls by it.

    Equals ``delta * (B[j] - B[l])``; rows are zero-based.  Accepts any 2-D
    array, not only validated coefficient matrices.
    """
    B = np.asarray(B, dtype=float)
    Dp = B.shape[0]
    for idx in (j, l):
        if not 0 <= idx < Dp:
            raise IndexOutOfRange(f"row {idx} outside 0..{Dp - 1}")
    return delta * (B[j] - B[l])


def _split(B: np.ndarray, sizes: Sequence[int]) -> list[np.ndarray]:
    return np.split(B, np.cumsum(sizes)[:-1], axis=0)


def _multi_inputs(Y, Xs):
    Ya = as_array(Y)
    if len(Xs) < 2:
        raise ShapeMismatch("need at least two predictor matrices")
    Xa = [_check_pair(Ya, X)[1] for X in Xs]
    return Ya, Xa


def _fit_stacked(Ya, Xa, weights):
    Z = np.hstack([a * X for a, X in zip(weights, Xa)])
    B, loss, sol, repaired = solve_scls(Ya, Z)
    return _split(B, [X.shape[1] for X in Xa]), loss, sol, repaired


def _coef_list(Bs, Xs, Y):
    Dr = as_array(Y).shape[1]
    out = []
    for m, (Bm, X) in enumerate(zip(Bs, Xs)):
        pn = _names(X, f"X{m + 1}_", Bm.shape[0])
        out.append(CoefficientMatrix(Bm, pn, _names(Y, "Y", Dr)))
    return out


def fit_multi(Y, Xs: Sequence) -> SclsFit:
    """SCLS with several simplicial predictors, ``E(Y) = sum_m X^m B^m / M``.

    The stacked quadratic term is singular (every predictor's columns sum to
    the ones vector), so it is repaired to the nearest positive-definite
    matrix before solving; the fit's solver summary records the repair.
    """
    Ya, Xa = _multi_inputs(Y, Xs)
    M = len(Xa)
    w = np.full(M, 1.0 / M)
    Bs, loss, sol, repaired = _fit_stacked(Ya, Xa, w)
    fitted = sum(a * X @ Bm for a, X, Bm in zip(w, Xa, Bs))
    return SclsFit(_coef_list(Bs, Xs, Y), loss, fitted, 1.0,
                   SolverSummary.from_solution(sol, repaired), weights=w)


def _simplex_lsq(F: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``argmin ||y - F a||^2`` over the probability simplex."""
    M = F.shape[1]
    G = F.T @ F
    fac = factorize(G)
    if fac is None:
        eps = PD_FLOOR * max(1.0, float(np.abs(np.diag(G)).max(initial=0.0)))
        fac = factorize(nearest_positive_definite(0.5 * (G + G.T), eps))
    A = np.vstack([np.ones(M), np.eye(M)])
    b0 = np.r_[1.0, np.zeros(M)]
    sol = solve_qp(QuadraticProgram(fac.Dmat, F.T @ y, A, b0, 1), fac)
    raise_for_status(sol)
    a = np.clip(sol.b, 0.0, None)
    return a / a.sum()


def fit_weighted(
    Y,
    Xs: Sequence,
    *,
    max_iter: int = 100,
    tol: float = 1e-8,
    fixed_weights=None,
) -> SclsFit:
    """SCLS with weighted predictors, ``E(Y) = sum_m a_m X^m B^m``.

    Block coordinate descent: starting from ``a = 1/M`` and independent
    single-predictor fits, alternate the ``{B^m}`` step (one stacked QP) and
    the ``a`` step (least squares over the ``M``-simplex).  A step is only
    accepted when it does not raise the loss, so the recorded loss sequence
    is non-increasing.  ``fixed_weights`` pins ``a`` and skips its update.
    """
    Ya, Xa = _multi_inputs(Y, Xs)
    M = len(Xa)

    def loss_of(a, Bs):
        R = Ya - sum(am * X @ Bm for am, X, Bm in zip(a, Xa, Bs))
        return float(np.sum(R * R))

    if fixed_weights is not None:
        a = np.asarray(fixed_weights, dtype=float)
        if a.shape != (M,) or np.any(a < 0) or abs(a.sum() - 1) > COEF_TOL:
            raise ShapeMismatch("fixed_weights must be a probability vector of length M")
        Bs, _, sol, repaired = _fit_stacked(Ya, Xa, a)
        cur = loss_of(a, Bs)
        history = [cur]
    else:
        a = np.full(M, 1.0 / M)
        Bs = [solve_scls(Ya, X)[0] for X in Xa]
        cur = loss_of(a, Bs)
        history = [cur]
        sol, repaired = None, False
        for it in range(max_iter):
            prev = cur
            Bs_new, _, sol_new, rep_new = _fit_stacked(Ya, Xa, a)
            val = loss_of(a, Bs_new)
            if val <= cur:
                Bs, cur, sol, repaired = Bs_new, val, sol_new, rep_new
            history.append(cur)
            F = np.column_stack([(X @ Bm).ravel() for X, Bm in zip(Xa, Bs)])
            a_new = _simplex_lsq(F, Ya.ravel())
            val = loss_of(a_new, Bs)
            if val <= cur:
                a, cur = a_new, val
            history.append(cur)
            if prev - cur <= tol * max(1.0, abs(prev)):
                break
        else:
            raise NoConvergence(f"weighted fit did not settle in {max_iter} alternations")
        if sol is None:
            _, _, sol, repaired = _fit_stacked(Ya, Xa, a)
    fitted = sum(am * X @ Bm for am, X, Bm in zip(a, Xa, Bs))
    summary = SolverSummary.from_solution(sol, repaired)
    return SclsFit(_coef_list(Bs, Xs, Y), cur, fitted, 1.0, summary,
                   weights=a, loss_history=tuple(history))


def lag_pairs(n: int, groups=None) -> tuple[np.ndarray, np.ndarray]:
    """Row indices ``(current, previous)`` of consecutive observations within groups.

    Rows are taken to be in time order within each group.
    """
    if groups is None:
        groups = [0] * n
    if len(groups) != n:
        raise ShapeMismatch(f"{len(groups)} group labels for {n} rows")
    by_group: dict = {}
    for i, g in enumerate(groups):
        by_group.setdefault(g, []).append(i)
    cur, prev = [], []
    for g, idx in by_group.items():
        if len(idx) < 2:
            raise InsufficientTimePoints(f"group {g!r} has {len(idx)} time point(s)")
        prev.extend(idx[:-1])
        cur.extend(idx[1:])
    return np.array(cur), np.array(prev)


def fit_ar1(series, groups=None, alpha: float = 1.0) -> SclsFit:
    """AR(1) SCLS, ``E(Y_t | Y_{t-1}) = Y_{t-1} B``; ``B`` is a transition matrix."""
    S = as_array(series)
    cur, prev = lag_pairs(S.shape[0], groups)
    names = _names(series, "Y", S.shape[1])
    Y = CompositionMatrix(S[cur], names)
    X = CompositionMatrix(S[prev], tuple(f"{s}_lag1" for s in names))
    return fit_alpha_scls(Y, X, alpha)


def encode_categorical(levels) -> CompositionMatrix:
    """One-hot encode labels as vertex compositions (columns in sorted label order)."""
    labels = np.asarray([str(v) for v in levels])
    uniq, inv = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        raise SingleLevel("a categorical predictor needs at least two levels")
    X = np.zeros((labels.size, uniq.size))
    X[np.arange(labels.size), inv] = 1.0
    return CompositionMatrix(X, tuple(uniq))
