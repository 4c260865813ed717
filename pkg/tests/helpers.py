import numpy as np
from numba import njit
from simplicial.composition import dirichlet_sample


def linked_data(n, B, seed=0, concentration=50.0):
    """Predictor ~ Dir(1), response ~ Dir(concentration * x B)."""
    rng = np.random.default_rng(seed)
    B = np.asarray(B, dtype=float)
    X = dirichlet_sample(np.ones(B.shape[0]), n, rng)
    mu = X @ B
    Y = dirichlet_sample(concentration * mu, n, rng, allow_zero=True)
    return Y, X


def random_stochastic(shape, rng):
    M = rng.exponential(size=shape)
    return M / M.sum(axis=1, keepdims=True)


# Coefficient matrix used for the interpretation example (fourth row is kept as printed).
EQ14_B = np.array(
    [
        [0.20, 0.40, 0.40],
        [0.10, 0.30, 0.60],
        [0.30, 0.35, 0.35],
        [0.50, 0.40, 0.30],
    ]
)


@njit(cache=True)
def _project_simplex(v):
    u = np.sort(v)[::-1]
    css = 0.0
    theta = 0.0
    for i in range(u.size):
        css += u[i]
        t = (css - 1.0) / (i + 1)
        if u[i] - t > 0:
            theta = t
    return np.maximum(v - theta, 0.0)


@njit(cache=True)
def projected_gradient(Dmat, dvec, D_p, D_r, iters):
    """Minimise ``0.5 b'Db - d'b`` with ``b = vec(B)`` and every row of ``B`` on the simplex.

    Plain projected gradient with step ``1 / lambda_max(D)``, started at the
    barycentre.  Variable ``r * D_p + p`` is cell ``B[p, r]``.
    """
    L = np.linalg.eigvalsh(Dmat)[-1]
    step = 1.0 / L
    b = np.full(D_p * D_r, 1.0 / D_r)
    g = np.empty_like(b)
    row = np.empty(D_r)
    for _ in range(iters):
        g[:] = Dmat @ b - dvec
        z = b - step * g
        for p in range(D_p):
            for r in range(D_r):
                row[r] = z[r * D_p + p]
            row[:] = _project_simplex(row)
            for r in range(D_r):
                b[r * D_p + p] = row[r]
    return b
