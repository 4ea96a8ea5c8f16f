"""Dense float64 linear algebra used by the attention bounds.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. The helpers
here validate shapes, keep results finite, and provide the two non-trivial
primitives the bounds need: the largest singular value (power iteration) and
a row-wise parallel/orthogonal split against a target matrix.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import NumericError, ShapeError

POWER_MAX_ITER = 10_000
POWER_RTOL = 1e-13
POWER_SEED = 0x5EED


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array (1-D input becomes one row)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name}: expected 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name}: contains non-finite entries")
    return m


def _check_finite(m: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{what}: result is not finite")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return _check_finite(a @ b, "matmul")


def row_norms(m) -> np.ndarray:
    return np.linalg.norm(as_matrix(m), axis=1)


def max_singular_value(m, max_iter: int = POWER_MAX_ITER, rtol: float = POWER_RTOL) -> float:
    """Largest singular value of ``m`` by power iteration on ``m.T @ m``.

    The start vector is drawn from a fixed seed so the result is reproducible.
    Iteration stops once successive Rayleigh quotients agree to ``rtol``
    (relative); the returned value is ``||m v||`` for the final unit iterate,
    which is more accurate than the square root of the quotient.

    Raises:
        ShapeError: ``m`` is empty.
        NumericError: no convergence within ``max_iter``; ``last_iterate``
            holds the final unit vector.
    """
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError("max_singular_value: empty matrix")
    gram = m.T @ m
    if not np.any(gram):
        return 0.0
    v = np.random.default_rng(POWER_SEED).standard_normal(gram.shape[0])
    v /= np.linalg.norm(v)
    prev = None
    for _ in range(max_iter):
        w = gram @ v
        rq = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # start vector landed in the null space
            return 0.0
        v = w / nw
        if prev is not None and abs(rq - prev) <= rtol * abs(rq):
            return float(np.linalg.norm(m @ v))
        prev = rq
    raise NumericError("max_singular_value: power iteration did not converge", last_iterate=v)


class RowDecomposition(NamedTuple):
    parallel: np.ndarray
    orthogonal: np.ndarray


def row_decompose(y, target) -> RowDecomposition:
    """Split each row of ``y`` into its projection onto the matching row of
    ``target`` and the remainder.

    A zero target row has an empty span: its parallel part is zero and the
    orthogonal part is the full row of ``y``.
    """
    y = as_matrix(y, "y")
    target = as_matrix(target, "target")
    if y.shape != target.shape:
        raise ShapeError(f"row_decompose: {y.shape} vs {target.shape}")
    tt = np.einsum("ij,ij->i", target, target)
    yt = np.einsum("ij,ij->i", y, target)
    nonzero = tt > 0.0
    coef = np.zeros_like(tt)
    coef[nonzero] = yt[nonzero] / tt[nonzero]
    parallel = coef[:, None] * target
    orthogonal = y - parallel
    return RowDecomposition(parallel, orthogonal)


def matrix_to_json(m) -> dict:
    m = as_matrix(m)
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "data": m.ravel().tolist()}


def matrix_from_json(obj) -> np.ndarray:
    try:
        rows, cols, data = int(obj["rows"]), int(obj["cols"]), obj["data"]
    except (KeyError, TypeError) as exc:
        raise ShapeError(f"matrix JSON must have rows/cols/data: {exc}") from exc
    if len(data) != rows * cols:
        raise ShapeError(f"matrix JSON: {len(data)} entries for {rows}x{cols}")
    return as_matrix(np.asarray(data, dtype=np.float64).reshape(rows, cols))
