"""Resampling inference for SCLS and TFLR.

Permutation p-values use ``(#{T* <= T_obs} + 1) / (R + 1)`` where smaller
statistics mean a better fit (squared loss, KLD, or a loss difference).
Replicate ``r`` always draws from the stream derived from ``(seed, r)``, so
results do not depend on the thread count.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .composition import as_array
from .errors import (
    DegenerateScatter,
    IndexOutOfRange,
    InvalidComposition,
    InvalidConfig,
    NoConvergence,
    ShapeMismatch,
    TooFewSamples,
    ZeroFittedCell,
)
from .parallel import map_chunks, replicate_rng, resolve_seed
from .qp import QPStatus, solve_qp_batch
from .scls import (
    COEF_TOL,
    CoefficientMatrix,
    _check_pair,
    constraint_blocks,
    gram_factor,
    solve_scls,
    squared_loss,
)
from .tflr import fit_tflr

log = logging.getLogger(__name__)

MAX_RESAMPLE = 10
MIN_BOOT = 10
MVEE_TOL = 1e-7

# Stream ids keep different procedures on one seed from sharing draws.
_STREAM_PERM, _STREAM_COEF, _STREAM_AMALG, _STREAM_BOOT = 1, 2, 3, 4


@dataclass(frozen=True)
class TestResult:
    """Outcome of a permutation or resampling test."""

    __test__ = False  # not a pytest class

    statistic_observed: float
    replicates: np.ndarray = field(repr=False)
    p_value: float
    R: int
    seed: int
    statistic_kind: str
    test: str = "independence"
    n_failed: int = 0

    @property
    def count_le(self) -> int:
        return int(np.sum(self.replicates <= self.statistic_observed))

    def to_dict(self, include_replicates: bool = False) -> dict:
        doc = {
            "test": self.test,
            "statistic_kind": self.statistic_kind,
            "statistic": float(self.statistic_observed),
            "p_value": float(self.p_value),
            "R": int(self.R),
            "seed": int(self.seed),
            "n_failed": int(self.n_failed),
        }
        if include_replicates:
            doc["replicates"] = [float(v) for v in self.replicates]
        return doc

    def to_json(self, include_replicates: bool = False) -> str:
        return json.dumps(self.to_dict(include_replicates), indent=2, sort_keys=True)


def permutation_p_value(observed: float, replicates) -> float:
    reps = np.asarray(replicates, dtype=float)
    return (int(np.sum(reps <= observed)) + 1) / (reps.size + 1)


def _check_R(R: int):
    if int(R) < 1:
        raise InvalidConfig(f"number of replicates must be >= 1, got {R}")


def _result(obs, reps, seed, kind, test, n_failed=0) -> TestResult:
    reps = np.asarray(reps, dtype=float)
    reps = reps[~np.isnan(reps)]
    if reps.size == 0:
        raise NoConvergence("every replicate failed")
    return TestResult(
        float(obs), reps, permutation_p_value(obs, reps), int(reps.size), seed, kind, test, n_failed
    )


# ---------------------------------------------------------------- fast path


def _perm_dvecs(Y: np.ndarray, X: np.ndarray, perms) -> np.ndarray:
    out = np.empty((len(perms), X.shape[1] * Y.shape[1]))
    for i, p in enumerate(perms):
        out[i] = (X[np.asarray(p)].T @ Y).ravel(order="F")
    return out


def fast_sl_replicates(Y, X, permutations, *, threads: int | None = None) -> np.ndarray:
    """``SL - tr(Y'Y)`` of the SCLS fit to ``(Y, X[perm])`` for each permutation.

    ``X'X`` is invariant to row order, so it is factorised once and only the
    linear term ``vec(X'PY)`` is rebuilt per replicate.
    """
    Y, X = _check_pair(Y, X)
    n = Y.shape[0]
    perms = [np.asarray(p) for p in permutations]
    for p in perms:
        if p.shape != (n,) or not np.array_equal(np.sort(p), np.arange(n)):
            raise ShapeMismatch("each permutation must be a row order of X")
    D_r, D_p = Y.shape[1], X.shape[1]
    factor, _ = gram_factor(X.T @ X, D_r)
    A, b0, meq = constraint_blocks(D_r, D_p)

    def work(idx: range):
        dv = _perm_dvecs(Y, X, [perms[i] for i in idx])
        obj, status = solve_qp_batch(factor, dv, A, b0, meq)
        bad = [s for s in status if s is not QPStatus.OPTIMAL]
        if bad:
            raise NoConvergence(f"replicate solve ended with status {bad[0].value}")
        return 2.0 * obj

    return np.asarray(map_chunks(work, len(perms), threads), dtype=float)


def naive_sl_replicates(Y, X, permutations) -> np.ndarray:
    """Reference path: full SCLS refit per permutation (returns raw SL)."""
    Y, X = _check_pair(Y, X)
    return np.array([solve_scls(Y, X[np.asarray(p)])[1] for p in permutations])


# ------------------------------------------------------------ independence


def _tflr_stat(Y, X, factor=None):
    init = solve_scls(Y, X, factor)[0] if factor is not None else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fit_tflr(Y, X, init=init, strict=False).kld


def test_independence(
    Y, X, R: int = 999, seed: int | None = None, model: str = "scls", *, threads: int | None = None
) -> TestResult:
    """Permutation test of ``H0``: ``Y`` is independent of ``X``.

    Rows of ``X`` are permuted; the statistic is the SCLS squared loss or,
    with ``model="tflr"``, the minimised KLD.  TFLR replicates that break down
    (zero fitted cell) are redrawn up to ``MAX_RESAMPLE`` times and then
    dropped, reducing ``R``.
    """
    _check_R(R)
    Y, X = _check_pair(Y, X)
    seed = resolve_seed(seed)
    model = model.lower()
    n = Y.shape[0]
    if model == "scls":
        obs = solve_scls(Y, X)[1]
        perms = [replicate_rng(seed, r, _STREAM_PERM).permutation(n) for r in range(R)]
        reps = fast_sl_replicates(Y, X, perms, threads=threads) + float(np.sum(Y * Y))
        return _result(obs, reps, seed, "SL", "independence")
    if model != "tflr":
        raise InvalidConfig(f"unknown model {model!r}")
    obs = _tflr_stat(Y, X)
    factor, _ = gram_factor(X.T @ X, Y.shape[1])

    def work(idx: range):
        out = []
        for r in idx:
            rng = replicate_rng(seed, r, _STREAM_PERM)
            val = np.nan
            for attempt in range(MAX_RESAMPLE + 1):
                try:
                    val = _tflr_stat(Y, X[rng.permutation(n)], factor)
                    break
                except ZeroFittedCell:
                    log.info("replicate %d attempt %d: zero fitted cell, redrawing", r, attempt)
            out.append(val)
        return out

    reps = np.asarray(map_chunks(work, R, threads), dtype=float)
    failed = int(np.isnan(reps).sum())
    if failed:
        log.warning("%d of %d TFLR replicates dropped after repeated breakdown", failed, R)
    return _result(obs, reps, seed, "KLD", "independence", failed)


# ----------------------------------------------------------- coefficients


def _as_b0(B0, D_p: int, D_r: int, rows) -> np.ndarray:
    B0 = np.asarray(as_array(B0) if not isinstance(B0, CoefficientMatrix) else B0.B, dtype=float)
    if rows is None:
        if B0.shape != (D_p, D_r):
            raise ShapeMismatch(f"B0 has shape {B0.shape}, expected {(D_p, D_r)}")
    elif B0.shape != (len(rows), D_r):
        raise ShapeMismatch(f"B0 has shape {B0.shape}, expected {(len(rows), D_r)}")
    if np.any(B0 < -COEF_TOL) or np.any(np.abs(B0.sum(axis=1) - 1) > COEF_TOL):
        raise InvalidComposition("B0 rows must be non-negative and sum to 1")
    return B0


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = int(np.nonzero(u - css / k > 0)[0][-1])
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def _restricted_fit(Y, X, fixed, B0f, factor_free=None):
    """SCLS with rows ``fixed`` of B held at ``B0f``; returns ``(B, SL)``."""
    D_p = X.shape[1]
    free = np.setdiff1d(np.arange(D_p), fixed)
    B = np.empty((D_p, Y.shape[1]))
    B[fixed] = B0f
    if free.size == 0:
        return B, squared_loss(Y, X, B)
    target = Y - X[:, fixed] @ B0f
    Xf = X[:, free]
    if free.size == 1:
        # One free row b: minimise ||x||^2 ||b||^2 - 2 b'T'x, a simplex projection.
        x = Xf[:, 0]
        B[free[0]] = project_simplex(target.T @ x / (x @ x))
    else:
        B[free] = solve_scls(target, Xf, factor_free)[0]
    return B, squared_loss(Y, X, B)


def test_coefficients(
    Y,
    X,
    B0,
    R: int = 999,
    seed: int | None = None,
    *,
    rows=None,
    threads: int | None = None,
) -> TestResult:
    """Test ``H0: B = B0`` (or only the listed ``rows`` of ``B``).

    The statistic is ``SL(B_hat) - SL(B_H0)`` where ``B_H0`` is ``B0`` (or the
    restricted fit with ``rows`` fixed at ``B0``).  Null replicates regenerate
    the response as ``X B_H0`` plus the null residuals reassigned to random
    rows, clipped at zero and closed, then recompute the statistic.

    A row of ``B0`` equal to ``(1/D_r, ..., 1/D_r)`` encodes "this predictor
    part carries no information".
    """
    _check_R(R)
    Y, X = _check_pair(Y, X)
    seed = resolve_seed(seed)
    D_p, D_r = X.shape[1], Y.shape[1]
    fixed = np.arange(D_p) if rows is None else np.asarray(rows, dtype=int)
    if np.any(fixed < 0) or np.any(fixed >= D_p) or len(np.unique(fixed)) != len(fixed):
        raise IndexOutOfRange(f"rows must be distinct indices in 0..{D_p - 1}")
    B0 = _as_b0(B0, D_p, D_r, rows)
    factor, _ = gram_factor(X.T @ X, D_r)
    free = np.setdiff1d(np.arange(D_p), fixed)
    ffree = gram_factor(X[:, free].T @ X[:, free], D_r)[0] if free.size > 1 else None

    def statistic(Yv):
        sl = solve_scls(Yv, X, factor)[1]
        return sl - _restricted_fit(Yv, X, fixed, B0, ffree)[1]

    obs = statistic(Y)
    B_null = _restricted_fit(Y, X, fixed, B0, ffree)[0]
    mean0 = X @ B_null
    resid = Y - mean0
    n = Y.shape[0]

    def work(idx: range):
        out = []
        for r in idx:
            rng = replicate_rng(seed, r, _STREAM_COEF)
            Ys = np.clip(mean0 + resid[rng.permutation(n)], 0.0, None)
            s = Ys.sum(axis=1, keepdims=True)
            Ys = np.where(s > 0, Ys / np.where(s > 0, s, 1.0), mean0)
            out.append(statistic(Ys))
        return out

    reps = map_chunks(work, R, threads)
    return _result(obs, reps, seed, "SL_diff", "coefficients")


# ----------------------------------------------------------- amalgamation


def test_amalgamation(
    Y, X, l1: int, l2: int, R: int = 999, seed: int | None = None, *, threads: int | None = None
) -> TestResult:
    """Test whether predictor parts ``l1`` and ``l2`` share a coefficient row.

    Under ``H0: B_l1 = B_l2`` the two columns of ``X`` are exchangeable, so
    each replicate swaps them in a random subset of rows (other entries are
    untouched) and refits.  The statistic is the SCLS squared loss.
    """
    _check_R(R)
    Y, X = _check_pair(Y, X)
    seed = resolve_seed(seed)
    D_p = X.shape[1]
    for v in (l1, l2):
        if not 0 <= int(v) < D_p:
            raise IndexOutOfRange(f"column {v} outside 0..{D_p - 1}")
    if l1 == l2:
        raise InvalidConfig("l1 and l2 must differ")
    a, b = sorted((int(l1), int(l2)))
    obs = solve_scls(Y, X)[1]
    n = X.shape[0]

    def work(idx: range):
        out = []
        for r in idx:
            swap = replicate_rng(seed, r, _STREAM_AMALG).random(n) < 0.5
            Xs = X.copy()
            Xs[swap, a], Xs[swap, b] = X[swap, b], X[swap, a]
            out.append(solve_scls(Y, Xs)[1])
        return out

    reps = map_chunks(work, R, threads)
    return _result(obs, reps, seed, "SL", "amalgamation")


for _f in (test_independence, test_coefficients, test_amalgamation):
    _f.__test__ = False


# --------------------------------------------------------------- bootstrap


def bootstrap_coefficients(
    Y, X, n_boot: int, seed: int | None = None, *, indices=None, threads: int | None = None
) -> list[CoefficientMatrix]:
    """Non-parametric bootstrap of the SCLS coefficients.

    Row pairs are resampled with replacement; ``indices`` (one index array
    per replicate) overrides the random draws.
    """
    Y, X = _check_pair(Y, X)
    if int(n_boot) < 1:
        raise InvalidConfig(f"n_boot must be >= 1, got {n_boot}")
    seed = resolve_seed(seed)
    n = Y.shape[0]
    if indices is not None:
        indices = [np.asarray(ix, dtype=int) for ix in indices]
        if len(indices) != n_boot:
            raise ShapeMismatch(f"{len(indices)} index sets for n_boot={n_boot}")

    def work(idx: range):
        out = []
        for r in idx:
            ix = indices[r] if indices is not None else replicate_rng(seed, r, _STREAM_BOOT).integers(0, n, n)
            out.append(solve_scls(Y[ix], X[ix])[0])
        return out

    return [CoefficientMatrix(B) for B in map_chunks(work, int(n_boot), threads)]


# ---------------------------------------------------------------- ellipses


def ternary_coords(y) -> np.ndarray:
    """Planar coordinates ``(y2 + y3/2, sqrt(3)/2 * y3)`` of 3-part compositions."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != 3:
        raise ShapeMismatch(f"ternary coordinates need 3 parts, got {y.shape[-1]}")
    return np.stack([y[..., 1] + 0.5 * y[..., 2], (math.sqrt(3) / 2) * y[..., 2]], axis=-1)


@dataclass(frozen=True)
class ConfidenceEllipse:
    """Region ``(p - center)' shape^{-1} (p - center) <= 1`` in the ternary plane."""

    center: np.ndarray
    shape: np.ndarray
    level: float
    row_index: int

    def mahalanobis2(self, points) -> np.ndarray:
        d = np.atleast_2d(points) - self.center
        return np.einsum("ij,jk,ik->i", d, np.linalg.inv(self.shape), d)

    def contains(self, points, tol: float = 1e-8) -> np.ndarray:
        return self.mahalanobis2(points) <= 1.0 + tol

    def boundary(self, n_points: int = 120) -> np.ndarray:
        t = np.linspace(0.0, 2 * np.pi, n_points, endpoint=False)
        L = np.linalg.cholesky(self.shape)
        return self.center + np.column_stack([np.cos(t), np.sin(t)]) @ L.T

    def to_dict(self) -> dict:
        return {
            "row_index": int(self.row_index),
            "level": float(self.level),
            "center": self.center.tolist(),
            "shape": self.shape.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ConfidenceEllipse":
        return cls(np.asarray(doc["center"]), np.asarray(doc["shape"]), doc["level"], doc["row_index"])


def min_volume_ellipse(P: np.ndarray, tol: float = MVEE_TOL, max_iter: int = 100_000):
    """Khachiyan's algorithm with away steps; returns ``(center, A)``.

    Every point satisfies ``(p - c)' A (p - c) <= 1 + O(tol)``.  The away
    steps (Todd and Yildirim) give linear convergence, which plain Khachiyan
    lacks at tight tolerances.
    """
    N, d = P.shape
    Q = np.vstack([P.T, np.ones(N)])
    u = np.full(N, 1.0 / N)
    k = d + 1.0
    for _ in range(max_iter):
        V = (Q * u) @ Q.T
        M = np.einsum("ij,ji->i", Q.T, np.linalg.solve(V, Q))
        jp = int(np.argmax(M))
        support = np.flatnonzero(u > 0)
        jm = int(support[np.argmin(M[support])])
        eps_plus = M[jp] / k - 1.0
        eps_minus = 1.0 - M[jm] / k
        if eps_plus <= tol and eps_minus <= tol:
            break
        if eps_plus >= eps_minus:
            beta = (M[jp] - k) / (k * (M[jp] - 1.0))
            u *= 1.0 - beta
            u[jp] += beta
        else:
            beta = (k - M[jm]) / (k * (M[jm] - 1.0))
            if u[jm] < 1.0:
                beta = min(beta, u[jm] / (1.0 - u[jm]))
            u *= 1.0 + beta
            u[jm] -= beta
            u[jm] = max(u[jm], 0.0)
    else:
        raise NoConvergence("minimum-volume ellipse iteration did not settle")
    c = P.T @ u
    A = np.linalg.inv((P.T * u) @ P - np.outer(c, c)) / d
    return c, A


def _degenerate_direction(P: np.ndarray, what: str):
    cov = np.cov(P.T)
    w, V = np.linalg.eigh(cov)
    scale = max(float(w[-1]), 0.0)
    if w[0] <= 1e-12 * max(scale, 1e-300) or scale == 0.0:
        raise DegenerateScatter(
            f"{what} points are collinear or identical in the ternary plane",
            direction=V[:, 0].copy(),
        )
    return cov


def confidence_ellipse(boot, row_index: int, level: float = 0.95) -> ConfidenceEllipse:
    """Minimum-volume ellipse around the central ``level`` share of bootstrap rows.

    Row ``row_index`` of each bootstrap matrix is mapped to ternary
    coordinates; the ``ceil(level * n)`` points with the smallest Mahalanobis
    distance are kept and enclosed.
    """
    mats = [np.asarray(b.B if isinstance(b, CoefficientMatrix) else b, dtype=float) for b in boot]
    if len(mats) < MIN_BOOT:
        raise TooFewSamples(f"need at least {MIN_BOOT} bootstrap matrices, got {len(mats)}")
    if not 0.0 < level <= 1.0:
        raise InvalidConfig(f"level must be in (0, 1], got {level}")
    if mats[0].shape[1] != 3:
        raise ShapeMismatch("ternary ellipses need 3 response components")
    if not 0 <= row_index < mats[0].shape[0]:
        raise IndexOutOfRange(f"row {row_index} outside 0..{mats[0].shape[0] - 1}")
    P = ternary_coords(np.array([m[row_index] for m in mats]))
    cov = _degenerate_direction(P, "bootstrap")
    d = P - P.mean(axis=0)
    dist = np.einsum("ij,jk,ik->i", d, np.linalg.inv(cov), d)
    keep = np.sort(np.argsort(dist, kind="stable")[: math.ceil(level * len(P) - 1e-9)])
    Pk = P[keep]
    _degenerate_direction(Pk, "retained")
    c, A = min_volume_ellipse(Pk)
    worst = float(np.max(np.einsum("ij,jk,ik->i", Pk - c, A, Pk - c)))
    if worst > 1.0:
        A = A / worst
    S = np.linalg.inv(A)
    return ConfidenceEllipse(c, 0.5 * (S + S.T), float(level), int(row_index))
