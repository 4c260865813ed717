"""Dense convex quadratic programming.

Solves::

    minimise    -d'b + 1/2 b'Db
    subject to  A'b >= b0        (the first ``n_equalities`` rows hold with equality)

with the dual active-set method of Goldfarb and Idnani (1983).  The working
factorisation keeps ``J = L^{-T} Q`` and an upper-triangular ``R`` such that
``J' N = [R; 0]`` for the matrix ``N`` of active constraint normals; adding
and dropping constraints are Givens updates of ``J`` and ``R``.

Also provides :func:`nearest_positive_definite` for repairing singular
quadratic terms (multiple simplicial predictors make ``D`` rank-deficient).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from numba import njit
from scipy.linalg import solve_triangular

from .errors import NoConvergence, ShapeMismatch

FEAS_TOL = 1e-8
PIVOT_FLOOR = 1e-6
PD_FLOOR = 1e-9


class QPStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    NOT_POSITIVE_DEFINITE = "NotPositiveDefinite"
    MAX_ITER = "MaxIterations"


@dataclass(frozen=True)
class QuadraticProgram:
    Dmat: np.ndarray
    dvec: np.ndarray
    Amat_T: np.ndarray
    b0: np.ndarray
    n_equalities: int = 0

    def __post_init__(self):
        D = np.asarray(self.Dmat, dtype=float)
        d = np.asarray(self.dvec, dtype=float).ravel()
        m = d.size
        A = np.asarray(self.Amat_T, dtype=float).reshape(-1, m)
        b0 = np.asarray(self.b0, dtype=float).ravel()
        if D.shape != (m, m):
            raise ShapeMismatch(f"Dmat {D.shape} does not match dvec of length {m}")
        if A.shape[0] != b0.size:
            raise ShapeMismatch(f"{A.shape[0]} constraints but {b0.size} bounds")
        if not 0 <= self.n_equalities <= b0.size:
            raise ShapeMismatch("n_equalities exceeds the number of constraints")
        if not np.allclose(D, D.T, rtol=0, atol=1e-10 * max(1.0, np.abs(D).max(initial=0))):
            raise ShapeMismatch("Dmat is not symmetric")
        for name, val in (("Dmat", D), ("dvec", d), ("Amat_T", A), ("b0", b0)):
            object.__setattr__(self, name, val)

    @property
    def n_vars(self) -> int:
        return self.dvec.size

    def objective(self, b) -> float:
        b = np.asarray(b, dtype=float)
        return float(-self.dvec @ b + 0.5 * b @ self.Dmat @ b)


@dataclass(frozen=True)
class QPSolution:
    b: np.ndarray
    objective: float
    active_set: tuple[int, ...]
    iterations: int
    status: QPStatus
    multipliers: np.ndarray = field(repr=False, default=None)

    @property
    def ok(self) -> bool:
        return self.status is QPStatus.OPTIMAL


@dataclass(frozen=True)
class QPFactor:
    """Cholesky-derived data for a fixed ``Dmat``, reusable across right-hand sides."""

    J0: np.ndarray
    Dmat: np.ndarray


def factorize(Dmat) -> QPFactor | None:
    """Return ``J0 = L^{-T}`` for ``Dmat = LL'``, or ``None`` if not positive definite."""
    Dmat = np.asarray(Dmat, dtype=float)
    try:
        L = np.linalg.cholesky(Dmat)
    except np.linalg.LinAlgError:
        return None
    diag = np.diag(L)
    if diag.size and diag.min() <= PIVOT_FLOOR * diag.max():
        return None
    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
    return QPFactor(J0=np.ascontiguousarray(Linv.T), Dmat=Dmat)


@njit(cache=True, nogil=True)
def _givens(a, b):
    h = np.hypot(a, b)
    if h == 0.0:
        return 1.0, 0.0, 0.0
    return a / h, b / h, h


@njit(cache=True, nogil=True)
def _gi_core(J, x, C, b0, meq, max_iter):
    m = x.size
    nc = b0.size
    R = np.zeros((m, m))
    act = -np.ones(m, dtype=np.int64)
    sgn = np.ones(m)
    u = np.zeros(m)
    is_active = np.zeros(nc, dtype=np.bool_)
    done_eq = np.zeros(nc, dtype=np.bool_)
    cnorm = np.empty(nc)
    for i in range(nc):
        cnorm[i] = np.sqrt(np.sum(C[i] * C[i]))
    d = np.empty(m)
    z = np.empty(m)
    r = np.empty(m)
    q = 0
    it = 0
    status = 0  # 0 optimal, 1 infeasible, 3 iteration cap

    while True:
        xscale = 0.0
        for k in range(m):
            xscale = max(xscale, abs(x[k]))
        # Pick the constraint to add: pending equalities in index order, then
        # the most violated inequality (lowest index on ties).
        p = -1
        for i in range(meq):
            if not is_active[i] and not done_eq[i]:
                p = i
                break
        if p < 0:
            worst = 0.0
            for i in range(meq, nc):
                if is_active[i]:
                    continue
                s = np.dot(C[i], x) - b0[i]
                tol = 1e-12 * (1.0 + abs(b0[i]) + cnorm[i] * xscale)
                if s < -tol and s < worst:
                    worst = s
                    p = i
        if p < 0:
            break

        sp = 1.0
        s = np.dot(C[p], x) - b0[p]
        if p < meq and s > 0:
            sp = -1.0
        npv = sp * C[p]
        bp = sp * b0[p]
        uplus = 0.0

        while True:
            it += 1
            if it > max_iter:
                status = 3
                break
            s = np.dot(npv, x) - bp
            for k in range(m):
                acc = 0.0
                for i in range(m):
                    acc += J[i, k] * npv[i]
                d[k] = acc
            dnorm2 = 0.0
            d2 = 0.0
            for k in range(m):
                dnorm2 += d[k] * d[k]
                if k >= q:
                    d2 += d[k] * d[k]
            for k in range(m):
                acc = 0.0
                for j in range(q, m):
                    acc += J[k, j] * d[j]
                z[k] = acc
            for k in range(q - 1, -1, -1):
                acc = d[k]
                for j in range(k + 1, q):
                    acc -= R[k, j] * r[j]
                r[k] = acc / R[k, k]

            t1 = np.inf
            l = -1
            for j in range(q):
                if act[j] >= meq and r[j] > 0.0:
                    v = u[j] / r[j]
                    if v < t1:
                        t1 = v
                        l = j
            zero_step = d2 <= 1e-24 * max(dnorm2, 1e-300)
            t2 = np.inf if zero_step else -s / d2

            if zero_step and t1 == np.inf:
                if p < meq and abs(s) <= 1e-10 * (1.0 + abs(bp) + cnorm[p] * xscale):
                    # Linearly dependent equality already satisfied.
                    done_eq[p] = True
                    break
                status = 1
                break

            t = min(t1, t2)
            if not zero_step:
                for k in range(m):
                    x[k] += t * z[k]
            for j in range(q):
                u[j] -= t * r[j]
            uplus += t

            if not zero_step and t2 <= t1:
                # Full step: p joins the active set.
                for j in range(m - 1, q, -1):
                    c, sn, h = _givens(d[j - 1], d[j])
                    if sn == 0.0:
                        continue
                    d[j - 1] = h
                    d[j] = 0.0
                    for i in range(m):
                        a1 = J[i, j - 1]
                        a2 = J[i, j]
                        J[i, j - 1] = c * a1 + sn * a2
                        J[i, j] = -sn * a1 + c * a2
                for k in range(q + 1):
                    R[k, q] = d[k]
                act[q] = p
                sgn[q] = sp
                u[q] = uplus
                is_active[p] = True
                q += 1
                break

            # Partial step: drop active constraint l, restore triangular R.
            is_active[act[l]] = False
            for k in range(l, q - 1):
                act[k] = act[k + 1]
                sgn[k] = sgn[k + 1]
                u[k] = u[k + 1]
                for i in range(m):
                    R[i, k] = R[i, k + 1]
            for i in range(m):
                R[i, q - 1] = 0.0
            for k in range(l, q - 1):
                c, sn, h = _givens(R[k, k], R[k + 1, k])
                if sn == 0.0:
                    continue
                for col in range(k, q - 1):
                    a1 = R[k, col]
                    a2 = R[k + 1, col]
                    R[k, col] = c * a1 + sn * a2
                    R[k + 1, col] = -sn * a1 + c * a2
                R[k + 1, k] = 0.0
                for i in range(m):
                    a1 = J[i, k]
                    a2 = J[i, k + 1]
                    J[i, k] = c * a1 + sn * a2
                    J[i, k + 1] = -sn * a1 + c * a2
            act[q - 1] = -1
            u[q - 1] = 0.0
            q -= 1
        if status != 0:
            break

    lam = np.zeros(nc)
    for j in range(q):
        lam[act[j]] = sgn[j] * u[j]
    return x, act[:q].copy(), lam, it, status


@njit(cache=True, nogil=True)
def _gi_batch(J0, Dmat, dvecs, C, b0, meq, max_iter):
    """Solve one QP per row of ``dvecs`` sharing ``Dmat`` (factor ``J0``).

    Returns the objectives and per-problem status codes.
    """
    R, m = dvecs.shape
    obj = np.empty(R)
    codes = np.empty(R, dtype=np.int64)
    for r in range(R):
        d = dvecs[r]
        J = J0.copy()
        x0 = J @ (J.T @ d)
        x, act, lam, it, code = _gi_core(J, x0, C, b0, meq, max_iter)
        q = 0.0
        for i in range(m):
            acc = 0.0
            for k in range(m):
                acc += Dmat[i, k] * x[k]
            q += x[i] * (0.5 * acc - d[i])
        obj[r] = q
        codes[r] = code
    return obj, codes


def solve_qp_batch(factor: QPFactor, dvecs, Amat_T, b0, n_equalities: int, max_iter: int | None = None):
    """Objectives of many QPs that differ only in the linear term.

    Returns ``(objectives, statuses)`` where statuses are :class:`QPStatus`
    values.  Used by permutation tests, where ``Dmat`` is invariant.
    """
    dvecs = np.ascontiguousarray(np.atleast_2d(np.asarray(dvecs, dtype=float)))
    C = np.ascontiguousarray(Amat_T, dtype=float)
    b0 = np.asarray(b0, dtype=float)
    m = dvecs.shape[1]
    if max_iter is None:
        max_iter = 50 * (m + b0.size) + 100
    obj, codes = _gi_batch(
        np.ascontiguousarray(factor.J0), np.ascontiguousarray(factor.Dmat), dvecs, C, b0,
        int(n_equalities), int(max_iter),
    )
    names = {0: QPStatus.OPTIMAL, 1: QPStatus.INFEASIBLE, 3: QPStatus.MAX_ITER}
    return obj, [names[int(c)] for c in codes]


def solve_qp(qp: QuadraticProgram, factor: QPFactor | None = None, max_iter: int | None = None) -> QPSolution:
    """Solve ``qp`` exactly (up to rounding) by the Goldfarb-Idnani method.

    Pass a precomputed :class:`QPFactor` to skip the Cholesky step when many
    problems share the same ``Dmat``.  The returned solution carries a status
    instead of raising; callers decide how to treat infeasible or
    non-positive-definite problems.
    """
    m = qp.n_vars
    if factor is None:
        factor = factorize(qp.Dmat)
    if factor is None:
        return QPSolution(
            b=np.full(m, np.nan),
            objective=np.nan,
            active_set=(),
            iterations=0,
            status=QPStatus.NOT_POSITIVE_DEFINITE,
            multipliers=np.zeros(qp.b0.size),
        )
    J = factor.J0.copy()
    x0 = J @ (J.T @ qp.dvec)
    if max_iter is None:
        max_iter = 50 * (m + qp.b0.size) + 100
    x, act, lam, it, code = _gi_core(
        J, x0, np.ascontiguousarray(qp.Amat_T), qp.b0, int(qp.n_equalities), int(max_iter)
    )
    status = {0: QPStatus.OPTIMAL, 1: QPStatus.INFEASIBLE, 3: QPStatus.MAX_ITER}[int(code)]
    return QPSolution(
        b=x,
        objective=qp.objective(x),
        active_set=tuple(int(a) for a in act),
        iterations=int(it),
        status=status,
        multipliers=lam,
    )


def kkt_residual(qp: QuadraticProgram, sol: QPSolution) -> float:
    """Largest violation among stationarity, feasibility, sign and slackness conditions."""
    b, lam = sol.b, sol.multipliers
    stat = qp.Dmat @ b - qp.dvec - qp.Amat_T.T @ lam
    slack = qp.Amat_T @ b - qp.b0
    meq = qp.n_equalities
    viol = [
        np.abs(stat).max(initial=0.0),
        np.abs(slack[:meq]).max(initial=0.0),
        (-slack[meq:]).max(initial=0.0),
        (-lam[meq:]).max(initial=0.0),
        np.abs(lam[meq:] * slack[meq:]).max(initial=0.0),
    ]
    return float(max(viol))


def nearest_positive_definite(
    M,
    epsilon: float = PD_FLOOR,
    *,
    keep_diagonal: bool = False,
    max_iter: int = 200,
    tol: float = 1e-12,
) -> np.ndarray:
    """Nearest symmetric matrix (Frobenius norm) whose eigenvalues are >= ``epsilon``.

    Alternating projections with Dykstra's correction (Higham 2002) between
    the eigenvalue-floored cone and, when ``keep_diagonal`` is set, the
    affine set of matrices sharing ``M``'s diagonal.  Without the diagonal
    constraint the iteration settles after one projection.  Matrices that
    already satisfy the floor are returned unchanged.

    Raises
    ------
    NoConvergence
        If the projections have not settled after ``max_iter`` sweeps.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got shape {M.shape}")
    if not np.allclose(M, M.T, rtol=0, atol=1e-10 * max(1.0, np.abs(M).max(initial=0))):
        raise ShapeMismatch("matrix is not symmetric")
    if M.size == 0 or np.linalg.eigvalsh(M).min() >= epsilon:
        return M

    def project_psd(A, floor=epsilon):
        w, V = np.linalg.eigh(A)
        X = (V * np.maximum(w, floor)) @ V.T
        return 0.5 * (X + X.T)

    diag = np.diag(M).copy()
    Y = M.copy()
    dS = np.zeros_like(M)
    scale = max(np.linalg.norm(M), 1.0)
    for _ in range(max_iter):
        R = Y - dS
        X = project_psd(R)
        dS = X - R
        Y_new = X.copy()
        if keep_diagonal:
            np.fill_diagonal(Y_new, diag)
        change = np.linalg.norm(Y_new - Y) / scale
        Y = Y_new
        if change < tol:
            break
    else:
        raise NoConvergence(f"PD repair did not settle in {max_iter} iterations")
    # Rebuilding from eigenpairs can land a rounding error below the floor.
    bump = 64 * np.finfo(float).eps * np.abs(M).max()
    while np.linalg.eigvalsh(Y).min() < epsilon:
        Y = project_psd(Y, epsilon + bump)
        bump *= 2
    return Y
