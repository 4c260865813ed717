"""Transformation-free linear regression (TFLR) fitted by EM.

Same link as SCLS, ``E(Y | X) = X B`` with row-stochastic ``B``, but ``B``
minimises ``sum_ik y_ik log(y_ik / (XB)_ik)``.  Treating each response unit
as allocated to a predictor part ``j`` with probability ``x_ij B_jk / yhat_ik``
gives the multiplicative EM update::

    B_jk <- B_jk * sum_i x_ij y_ik / yhat_ik,   then rows of B rescaled to 1.

Zeros are absorbing under this update, so cells below ``FREEZE`` are set to
exactly zero.  If a fitted cell is zero where the response is positive the
objective is infinite and :class:`ZeroFittedCell` is raised.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .composition import as_array, power_transform, power_transform_inverse
from .errors import NoConvergence, ShapeMismatch, ZeroFittedCell
from .scls import CoefficientMatrix, _check_pair, _names, solve_scls

FREEZE = 1e-12


@dataclass(frozen=True)
class TflrFit:
    coefficients: CoefficientMatrix
    kld: float
    iterations: int
    converged: bool
    fitted: np.ndarray
    alpha: float = 1.0
    history: np.ndarray | None = field(default=None, repr=False)

    @property
    def B(self) -> np.ndarray:
        return self.coefficients.B

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "kld": self.kld,
            "iterations": self.iterations,
            "converged": self.converged,
            "coefficients": self.coefficients.to_dict(),
        }


@njit(cache=True, nogil=True)
def _fitted(X, B, out):
    n, Dp = X.shape
    Dr = B.shape[1]
    for i in range(n):
        for k in range(Dr):
            acc = 0.0
            for j in range(Dp):
                acc += X[i, j] * B[j, k]
            out[i, k] = acc


@njit(cache=True, nogil=True)
def _objective(Y, Yhat):
    """Return the KLD, or -1.0 if some positive response has a zero fit."""
    n, Dr = Y.shape
    acc = 0.0
    for i in range(n):
        for k in range(Dr):
            y = Y[i, k]
            if y > 0.0:
                if Yhat[i, k] <= 0.0:
                    return -1.0
                acc += y * np.log(y / Yhat[i, k])
    return acc


@njit(cache=True, nogil=True)
def _em_step(Y, X, B, Yhat, M, out):
    """One EM update of ``B`` into ``out``; ``Yhat`` must hold ``X @ B``."""
    n, Dr = Y.shape
    Dp = X.shape[1]
    M[:, :] = 0.0
    for i in range(n):
        for k in range(Dr):
            y = Y[i, k]
            if y > 0.0:
                ratio = y / Yhat[i, k]
                for j in range(Dp):
                    M[j, k] += X[i, j] * ratio
    for j in range(Dp):
        s = 0.0
        for k in range(Dr):
            s += B[j, k] * M[j, k]
        if s <= 0.0:
            # Predictor part absent from the data: the row is unidentified.
            for k in range(Dr):
                out[j, k] = B[j, k]
            continue
        s2 = 0.0
        for k in range(Dr):
            v = B[j, k] * M[j, k] / s
            if v < FREEZE:
                v = 0.0
            out[j, k] = v
            s2 += v
        for k in range(Dr):
            out[j, k] /= s2


@njit(cache=True, nogil=True)
def _em(Y, X, B, tol, max_iter, hist, accelerate):
    """Run EM in place on ``B``.

    Returns ``(kld, n_updates, code)`` with code 0 converged, 1 iteration cap,
    2 zero fitted cell.  ``hist`` receives the objective after every accepted
    step.  With ``accelerate`` each step is a SQUAREM extrapolation built from
    two EM updates, followed by a stabilising update and a monotonicity
    safeguard; every EM update counts towards ``max_iter``.
    """
    n, Dr = Y.shape
    Dp = X.shape[1]
    Yhat = np.empty((n, Dr))
    M = np.empty((Dp, Dr))
    B1 = np.empty((Dp, Dr))
    B2 = np.empty((Dp, Dr))
    Bp = np.empty((Dp, Dr))
    B3 = np.empty((Dp, Dr))
    _fitted(X, B, Yhat)
    obj = _objective(Y, Yhat)
    if obj < 0.0:
        return obj, 0, 2
    hist[0] = obj
    nh = 1
    evals = 0
    while evals < max_iter:
        _em_step(Y, X, B, Yhat, M, B1)
        evals += 1
        _fitted(X, B1, Yhat)
        obj1 = _objective(Y, Yhat)
        if obj1 < 0.0:
            return obj1, evals, 2
        if obj1 > obj:
            # EM cannot ascend in exact arithmetic; this is the rounding floor.
            return obj, evals, 0
        if not accelerate or evals + 2 > max_iter:
            B[:, :] = B1
            hist[nh] = obj1
            nh += 1
            if obj - obj1 < tol:
                return obj1, evals, 0
            obj = obj1
            continue
        _em_step(Y, X, B1, Yhat, M, B2)
        evals += 1
        _fitted(X, B2, Yhat)
        obj2 = _objective(Y, Yhat)
        if obj2 < 0.0:
            return obj2, evals, 2
        rr = 0.0
        vv = 0.0
        for j in range(Dp):
            for k in range(Dr):
                r = B1[j, k] - B[j, k]
                v = B2[j, k] - 2.0 * B1[j, k] + B[j, k]
                rr += r * r
                vv += v * v
        best = obj2
        Bbest = B2
        if vv > 0.0 and rr > 0.0:
            a = -np.sqrt(rr / vv)
            if a > -1.0:
                a = -1.0
            while a < -1.0:
                ok = True
                for j in range(Dp):
                    for k in range(Dr):
                        r = B1[j, k] - B[j, k]
                        v = B2[j, k] - 2.0 * B1[j, k] + B[j, k]
                        val = B[j, k] - 2.0 * a * r + a * a * v
                        if B2[j, k] > 0.0 and val <= 0.0:
                            ok = False
                        Bp[j, k] = max(val, 0.0)
                if ok:
                    break
                a = 0.5 * (a - 1.0)
            if a < -1.0:
                for j in range(Dp):
                    s = 0.0
                    for k in range(Dr):
                        s += Bp[j, k]
                    for k in range(Dr):
                        Bp[j, k] /= s
                _fitted(X, Bp, Yhat)
                if _objective(Y, Yhat) >= 0.0:
                    _em_step(Y, X, Bp, Yhat, M, B3)
                    evals += 1
                    _fitted(X, B3, Yhat)
                    obj3 = _objective(Y, Yhat)
                    if obj3 >= 0.0 and obj3 <= obj2:
                        best = obj3
                        Bbest = B3
        if best > obj:
            return obj, evals, 0
        B[:, :] = Bbest
        _fitted(X, B, Yhat)
        hist[nh] = best
        nh += 1
        if obj - best < tol:
            return best, evals, 0
        obj = best
    return obj, evals, 1


def fit_tflr(
    Y,
    X,
    init=None,
    tol: float = 1e-10,
    max_iter: int = 5000,
    *,
    strict: bool = True,
    alpha: float = 1.0,
    accelerate: bool = True,
) -> TflrFit:
    """Fit TFLR by EM.

    Parameters
    ----------
    init : array-like or CoefficientMatrix, optional
        Starting coefficients.  Defaults to the SCLS estimate.
    tol : float
        Stop once an iteration lowers the KLD by less than this.
    strict : bool
        Raise :class:`NoConvergence` when ``max_iter`` is reached; otherwise
        warn and return the current iterate with ``converged=False``.
    alpha : float
        Power-transform the response first (alpha-TFLR); fitted values are
        back-transformed.
    accelerate : bool
        SQUAREM extrapolation between EM updates.  Same fixed point, far
        fewer updates near the boundary; the KLD stays non-increasing.

    Raises
    ------
    ZeroFittedCell
        When a fitted cell is zero where the response is positive.
    """
    Ya, Xa = _check_pair(Y, X)
    W = power_transform(Ya, alpha)
    if init is None:
        B = solve_scls(W, Xa)[0]
    else:
        B = np.array(np.asarray(init), dtype=float)
        if B.shape != (Xa.shape[1], Ya.shape[1]):
            raise ShapeMismatch(f"init has shape {B.shape}, expected {(Xa.shape[1], Ya.shape[1])}")
    B = np.where(B < FREEZE, 0.0, B)
    B = np.ascontiguousarray(B / B.sum(axis=1, keepdims=True))
    hist = np.full(max_iter + 1, np.nan)
    obj, it, code = _em(
        np.ascontiguousarray(W), np.ascontiguousarray(Xa), B, float(tol), int(max_iter), hist,
        bool(accelerate),
    )
    if code == 2:
        raise ZeroFittedCell(
            f"fitted value is zero where the response is positive (iteration {it})"
        )
    converged = code == 0
    if not converged:
        msg = f"EM did not converge in {max_iter} iterations (KLD {obj:.6g})"
        if strict:
            raise NoConvergence(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    coef = CoefficientMatrix(B, _names(X, "X", Xa.shape[1]), _names(Y, "Y", Ya.shape[1]))
    fitted = Xa @ B
    if alpha != 1:
        fitted = power_transform_inverse(fitted, alpha)
    hist = hist[~np.isnan(hist)]
    return TflrFit(coef, float(obj), int(it), converged, fitted, float(alpha), hist)


def tflr_kld(Y, X, B) -> float:
    """TFLR objective at ``B``; raises :class:`ZeroFittedCell` if it is infinite."""
    Ya, Xa = as_array(Y), as_array(X)
    val = _objective(np.ascontiguousarray(Ya), np.ascontiguousarray(Xa @ np.asarray(B)))
    if val < 0:
        raise ZeroFittedCell("fitted value is zero where the response is positive")
    return float(val)
