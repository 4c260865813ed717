"""Compositional data: closure, log-ratio and power transforms, divergences.

All transforms operate row-wise, so they accept either a single composition
(1-D array of ``D`` parts) or an ``n x D`` matrix of compositions.  Component
indices are zero-based.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    AlphaZero,
    AllZero,
    DimensionTooSmall,
    InvalidComposition,
    NegativeEntry,
    NonpositiveParameter,
    ShapeMismatch,
    SupportMismatch,
    ZeroComponent,
    ZeroWithNonpositiveAlpha,
)

SUM_TOL = 1e-8


@dataclass(frozen=True)
class CompositionMatrix:
    """An ``n x D`` sample of compositions with optional component names.

    Rows whose sum is within ``SUM_TOL`` of one are renormalised exactly on
    construction; anything further off is rejected unless ``force_closure``.
    The stored array is read-only.
    """

    values: np.ndarray
    names: tuple[str, ...] | None = None
    force_closure: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        arr = np.array(self.values, dtype=float, copy=True)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise ShapeMismatch(f"expected a 2-D array, got {arr.ndim}-D")
        n, D = arr.shape
        if n < 1:
            raise ShapeMismatch("composition matrix has no rows")
        if D < 2:
            raise DimensionTooSmall(f"need at least 2 components, got {D}")
        if not np.all(np.isfinite(arr)):
            raise InvalidComposition("non-finite value in composition")
        if np.any(arr < 0):
            i, j = np.argwhere(arr < 0)[0]
            raise NegativeEntry(f"row {i}, column {j} is {arr[i, j]!r}")
        sums = arr.sum(axis=1)
        if not self.force_closure:
            bad = np.flatnonzero(np.abs(sums - 1.0) > SUM_TOL)
            if bad.size:
                raise InvalidComposition(
                    f"row {bad[0]} sums to {sums[bad[0]]!r} (tolerance {SUM_TOL})"
                )
        if np.any(sums <= 0):
            raise AllZero(f"row {int(np.flatnonzero(sums <= 0)[0])} is all zero")
        arr = arr / sums[:, None]
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        if self.names is not None:
            names = tuple(str(s) for s in self.names)
            if len(names) != D:
                raise ShapeMismatch(f"{len(names)} names for {D} components")
            object.__setattr__(self, "names", names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self) -> int:
        return self.n

    def take(self, rows) -> "CompositionMatrix":
        return CompositionMatrix(self.values[rows], self.names)


def as_array(x) -> np.ndarray:
    if isinstance(x, CompositionMatrix):
        return x.values
    return np.asarray(x, dtype=float)


def closure(raw) -> np.ndarray:
    """Scale non-negative vectors (or rows of a matrix) to unit sum."""
    arr = np.asarray(raw, dtype=float)
    if np.any(arr < 0):
        raise NegativeEntry("closure requires non-negative entries")
    s = arr.sum(axis=-1, keepdims=True)
    if np.any(s <= 0):
        raise AllZero("cannot close a vector whose entries are all zero")
    return arr / s


def _positive(y) -> np.ndarray:
    y = as_array(y)
    if np.any(y <= 0):
        raise ZeroComponent("log-ratio transforms need strictly positive parts")
    return y


def alr(y, divisor: int = 0) -> np.ndarray:
    """Additive log-ratio: ``log(y_j / y_divisor)`` for every ``j != divisor``."""
    y = _positive(y)
    D = y.shape[-1]
    if not -D <= divisor < D:
        raise ShapeMismatch(f"divisor {divisor} outside 0..{D - 1}")
    ly = np.log(y)
    divisor %= D
    v = ly - ly[..., [divisor]]
    return np.delete(v, divisor, axis=-1)


def alr_inverse(v, divisor: int = 0) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    full = np.insert(v, divisor % (v.shape[-1] + 1), 0.0, axis=-1)
    full = full - full.max(axis=-1, keepdims=True)
    e = np.exp(full)
    return e / e.sum(axis=-1, keepdims=True)


def clr(y) -> np.ndarray:
    ly = np.log(_positive(y))
    return ly - ly.mean(axis=-1, keepdims=True)


@lru_cache(maxsize=64)
def _helmert(D: int) -> np.ndarray:
    H = np.zeros((D - 1, D))
    for i in range(1, D):
        c = 1.0 / np.sqrt(i * (i + 1))
        H[i - 1, :i] = c
        H[i - 1, i] = -i * c
    H.setflags(write=False)
    return H


def helmert_submatrix(D: int) -> np.ndarray:
    """Helmert matrix with its first row dropped, shape ``(D-1, D)``.

    Row ``i`` (1-based) holds ``i`` copies of ``1/sqrt(i(i+1))`` followed by
    ``-i/sqrt(i(i+1))`` and zeros, so the rows are orthonormal and sum to zero.
    """
    if D < 2:
        raise DimensionTooSmall(f"Helmert sub-matrix needs D >= 2, got {D}")
    return _helmert(int(D))


def ilr(y) -> np.ndarray:
    u = clr(y)
    return u @ helmert_submatrix(u.shape[-1]).T


def power_transform(y, alpha: float) -> np.ndarray:
    """Power transform ``y_j**alpha / sum_l y_l**alpha`` (stays on the simplex)."""
    y = as_array(y)
    if alpha == 1:
        return y.copy()
    if alpha <= 0 and np.any(y == 0):
        raise ZeroWithNonpositiveAlpha(f"alpha={alpha} with zero components")
    w = y**alpha
    return w / w.sum(axis=-1, keepdims=True)


def power_transform_inverse(w, alpha: float) -> np.ndarray:
    if alpha == 0:
        raise AlphaZero("the power transform is not invertible at alpha = 0")
    return power_transform(w, 1.0 / alpha)


def alpha_transform(y, alpha: float) -> np.ndarray:
    """The alpha-transformation ``(1/alpha) H (D w_alpha - 1)``.

    Use :func:`ilr` for the ``alpha -> 0`` limit.
    """
    if alpha == 0:
        raise AlphaZero("alpha = 0 is the ilr limit; call ilr() instead")
    w = power_transform(y, alpha)
    D = w.shape[-1]
    return (D * w - 1.0) @ helmert_submatrix(D).T / alpha


def _xlogy_ratio(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pos = p > 0
    if np.any(pos & (q <= 0)):
        raise SupportMismatch("p > 0 where q == 0; the divergence is infinite")
    out = np.zeros(np.broadcast(p, q).shape)
    pb, qb = np.broadcast_arrays(p, q)
    out[pos] = pb[pos] * np.log(pb[pos] / qb[pos])
    return out


def kld_rows(p, q) -> np.ndarray:
    """Row-wise KLD ``sum_k p_k log(p_k / q_k)`` with ``0 log 0 = 0``."""
    p, q = as_array(p), as_array(q)
    if p.shape != q.shape:
        raise ShapeMismatch(f"{p.shape} vs {q.shape}")
    return _xlogy_ratio(p, q).sum(axis=-1)


def kld(p, q) -> float:
    """Total Kullback-Leibler divergence of ``p`` from ``q`` summed over rows."""
    return float(np.sum(kld_rows(p, q)))


def jsd_rows(p, q) -> np.ndarray:
    p, q = as_array(p), as_array(q)
    if p.shape != q.shape:
        raise ShapeMismatch(f"{p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    return 0.5 * _xlogy_ratio(p, m).sum(axis=-1) + 0.5 * _xlogy_ratio(q, m).sum(axis=-1)


def jsd(p, q) -> float:
    """Jensen-Shannon divergence (natural log, equal-weight mixture), summed over rows."""
    return float(np.sum(jsd_rows(p, q)))


def negated_entropy(y) -> np.ndarray | float:
    """``sum_j y_j log y_j``; ``-log D`` at the barycentre and 0 at the vertices."""
    y = as_array(y)
    out = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0)), 0.0).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def dirichlet_sample(params, n: int, rng=None, *, allow_zero: bool = False) -> np.ndarray:
    """Draw ``n`` Dirichlet vectors by closing independent Gamma(a_j, 1) draws.

    ``rng`` is a seed or a :class:`numpy.random.Generator`.  With
    ``allow_zero`` a zero parameter yields a structurally zero part (the
    Gamma(0) limit); otherwise every parameter must be positive.  ``params``
    may also be an ``n x D`` matrix giving one parameter vector per row.
    """
    a = np.asarray(params, dtype=float)
    if n < 1:
        raise NonpositiveParameter(f"n must be >= 1, got {n}")
    if np.any(a < 0) or (not allow_zero and np.any(a == 0)) or not np.all(np.isfinite(a)):
        raise NonpositiveParameter("Dirichlet parameters must be positive")
    gen = np.random.default_rng(rng)
    shape = (n, a.shape[-1]) if a.ndim == 1 else a.shape
    g = gen.standard_gamma(np.broadcast_to(a, shape), size=shape)
    s = g.sum(axis=1, keepdims=True)
    # All-underflow rows only arise for extremely small parameters; resample them.
    while np.any(s <= 0):
        bad = np.flatnonzero(s[:, 0] <= 0)
        g[bad] = gen.standard_gamma(np.broadcast_to(a, shape)[bad])
        s = g.sum(axis=1, keepdims=True)
    return g / s


def read_composition_csv(
    path, *, force_closure: bool = False, group_column: str | None = None
) -> tuple[CompositionMatrix, list[str] | None]:
    """Read a header + numeric rows CSV into a :class:`CompositionMatrix`.

    When ``group_column`` is given that column is split off and returned as
    a list of labels alongside the compositions.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise InvalidComposition(f"{path}: need a header and at least one data row")
    header = [h.strip() for h in rows[0]]
    groups = None
    body = rows[1:]
    if group_column is not None:
        if group_column not in header:
            raise ShapeMismatch(f"{path}: no column named {group_column!r}")
        gi = header.index(group_column)
        groups = [r[gi].strip() for r in body]
        header = header[:gi] + header[gi + 1:]
        body = [r[:gi] + r[gi + 1:] for r in body]
    try:
        values = np.array([[float(c) for c in r] for r in body])
    except ValueError as exc:
        raise InvalidComposition(f"{path}: {exc}") from None
    if values.ndim != 2 or values.shape[1] != len(header):
        raise ShapeMismatch(f"{path}: ragged rows or header/row width mismatch")
    return CompositionMatrix(values, tuple(header), force_closure=force_closure), groups


def write_matrix_csv(path, values, columns: Sequence[str], row_labels=None, fmt: str = "%.6g"):
    values = np.asarray(values)
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(([""] if row_labels is not None else []) + list(columns))
        for i, row in enumerate(values):
            cells = [fmt % v for v in row]
            w.writerow(([row_labels[i]] if row_labels is not None else []) + cells)


def default_names(prefix: str, D: int) -> tuple[str, ...]:
    return tuple(f"{prefix}{j + 1}" for j in range(D))
