"""Single-head self-attention and the analytic quantities behind its
reachability bound.

The forward map is ``softmax_rows(Q K^T / sqrt(d_key)) V`` with
``Q = X W_q``, ``K = X W_key``, ``V = X W_v``. When the input is split into a
control block ``U`` (first ``k`` rows) and an imposed block ``X0`` (last ``m``
rows), the imposed-block output separates additively into a part carried by
the control values and a part carried by the imposed values. Everything the
certificate needs (``g``, ``alpha``, ``beta``, ``gamma``) is computed here,
in log space wherever ``exp(alpha)`` can overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import ArgumentError, ShapeError
from .numcore import as_matrix, matrix_from_json, matrix_to_json, max_singular_value, row_norms

LINEAR_LOG_LIMIT = 700.0  # exp() of anything above this is treated as overflow


@dataclass(frozen=True)
class AttentionParams:
    w_q: np.ndarray
    w_key: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        w_q = as_matrix(self.w_q, "w_q")
        w_key = as_matrix(self.w_key, "w_key")
        w_v = as_matrix(self.w_v, "w_v")
        if not (w_q.shape[0] == w_key.shape[0] == w_v.shape[0]):
            raise ShapeError(
                f"weights must share d_in rows: {w_q.shape}, {w_key.shape}, {w_v.shape}"
            )
        if w_q.shape[1] != w_key.shape[1]:
            raise ShapeError(f"w_q and w_key need equal d_key: {w_q.shape} vs {w_key.shape}")
        object.__setattr__(self, "w_q", w_q)
        object.__setattr__(self, "w_key", w_key)
        object.__setattr__(self, "w_v", w_v)

    @property
    def d_in(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_key(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_out(self) -> int:
        return self.w_v.shape[1]

    def to_json(self) -> dict:
        return {
            "d_in": self.d_in,
            "d_key": self.d_key,
            "d_out": self.d_out,
            "w_q": matrix_to_json(self.w_q),
            "w_key": matrix_to_json(self.w_key),
            "w_v": matrix_to_json(self.w_v),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "AttentionParams":
        params = cls(
            matrix_from_json(obj["w_q"]),
            matrix_from_json(obj["w_key"]),
            matrix_from_json(obj["w_v"]),
        )
        for key in ("d_in", "d_key", "d_out"):
            if key in obj and int(obj[key]) != getattr(params, key):
                raise ShapeError(f"{key}={obj[key]} disagrees with matrix shapes")
        return params

    @classmethod
    def random(cls, d_in: int, d_key: int, d_out: int, rng: np.random.Generator, scale: float = 1.0):
        s = scale / math.sqrt(d_in)
        return cls(
            rng.standard_normal((d_in, d_key)) * s,
            rng.standard_normal((d_in, d_key)) * s,
            rng.standard_normal((d_in, d_out)) * s,
        )


def _check_input(x: np.ndarray, params: AttentionParams, name: str, allow_empty=False):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ShapeError(f"{name}: expected (*, {params.d_in}), got {x.shape}")
    if x.shape[0] == 0 and not allow_empty:
        raise ShapeError(f"{name}: needs at least one row")
    return as_matrix(x, name) if x.shape[0] else x


def _scores(q: np.ndarray, k: np.ndarray, d_key: int) -> np.ndarray:
    return (q @ k.T) / math.sqrt(d_key)


def self_attention(x, params: AttentionParams, stabilize: bool = True) -> np.ndarray:
    """Apply the attention map to the rows of ``x``.

    ``stabilize`` subtracts each row's max score before exponentiating; the
    factor cancels in the normalisation, so it only matters numerically.
    """
    x = _check_input(x, params, "x")
    s = _scores(x @ params.w_q, x @ params.w_key, params.d_key)
    if stabilize:
        s = s - s.max(axis=1, keepdims=True)
    a = np.exp(s)
    return (a / a.sum(axis=1, keepdims=True)) @ (x @ params.w_v)


class AttentionBlocks(NamedTuple):
    """Raw (unshifted) imposed-row blocks of the exponentiated score matrix.

    Overflow-prone by construction; meant for checking the bound chain at
    moderate scales.
    """

    a_xu: np.ndarray  # m x k
    a_xx: np.ndarray  # m x m
    v_u: np.ndarray  # k x d_out
    v_x: np.ndarray  # m x d_out

    @property
    def d_xu(self) -> np.ndarray:
        return self.a_xu.sum(axis=1)

    @property
    def d_xx(self) -> np.ndarray:
        return self.a_xx.sum(axis=1)


def attention_blocks(u, x0, params: AttentionParams) -> AttentionBlocks:
    u = _check_input(u, params, "u", allow_empty=True)
    x0 = _check_input(x0, params, "x0")
    q_x = x0 @ params.w_q
    return AttentionBlocks(
        a_xu=np.exp(_scores(q_x, u @ params.w_key, params.d_key)),
        a_xx=np.exp(_scores(q_x, x0 @ params.w_key, params.d_key)),
        v_u=u @ params.w_v,
        v_x=x0 @ params.w_v,
    )


def decompose_output(u, x0, params: AttentionParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(y_u, y_x)``: the imposed-block output split by value source.

    ``y_u + y_x`` equals the last ``m`` rows of
    ``self_attention(vstack(u, x0))``. Rows are max-shifted jointly over both
    blocks so the shared normaliser stays consistent.
    """
    u = _check_input(u, params, "u", allow_empty=True)
    x0 = _check_input(x0, params, "x0")
    q_x = x0 @ params.w_q
    s_xu = _scores(q_x, u @ params.w_key, params.d_key)
    s_xx = _scores(q_x, x0 @ params.w_key, params.d_key)
    shift = s_xx.max(axis=1, keepdims=True)
    if u.shape[0]:
        shift = np.maximum(shift, s_xu.max(axis=1, keepdims=True))
    a_xu = np.exp(s_xu - shift)
    a_xx = np.exp(s_xx - shift)
    denom = a_xu.sum(axis=1, keepdims=True) + a_xx.sum(axis=1, keepdims=True)
    y_u = (a_xu @ (u @ params.w_v)) / denom
    y_x = (a_xx @ (x0 @ params.w_v)) / denom
    return y_u, y_x


def _finite_or_none(x: float) -> Optional[float]:
    return x if math.isfinite(x) else None


@dataclass(frozen=True)
class BoundQuantities:
    """Per-row quantities of the self-attention reachability bound.

    Linear fields are ``inf`` where the log-domain value exceeds the linear
    range; ``gamma_overflow`` flags that case.
    """

    log_g: np.ndarray
    alpha: float
    sigma_q: float
    sigma_key: float
    sigma_v: float
    m_u: float
    m_x: float
    k: int
    log_beta: np.ndarray
    log_gamma: np.ndarray

    @property
    def g(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_g)

    @property
    def beta(self) -> np.ndarray:
        return np.exp(self.log_beta)

    @property
    def gamma(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.where(self.log_gamma > LINEAR_LOG_LIMIT, np.inf, np.exp(self.log_gamma))

    @property
    def gamma_overflow(self) -> bool:
        return bool(np.any(self.log_gamma > LINEAR_LOG_LIMIT))

    @property
    def log_k_exp_alpha(self) -> float:
        return math.log(self.k) + self.alpha if self.k > 0 else -math.inf

    @property
    def shrink(self) -> np.ndarray:
        """Per-row factor ``g_i / (g_i + k e^alpha)`` mapping ``Y_x^max`` to ``Y_x^min``."""
        return np.exp(self.log_g - np.logaddexp(self.log_g, self.log_k_exp_alpha))

    def to_json(self) -> dict:
        def lin(arr):
            return [_finite_or_none(float(v)) for v in arr]

        return {
            "k": self.k,
            "m_u": self.m_u,
            "m_x": self.m_x,
            "sigma_q": self.sigma_q,
            "sigma_key": self.sigma_key,
            "sigma_v": self.sigma_v,
            "alpha": self.alpha,
            "g": lin(self.g),
            "log_g": self.log_g.tolist(),
            "beta": lin(self.beta),
            "log_beta": [_finite_or_none(float(v)) for v in self.log_beta],
            "gamma": lin(self.gamma),
            "log_gamma": [_finite_or_none(float(v)) for v in self.log_gamma],
            "gamma_overflow": self.gamma_overflow,
        }


def compute_bound_quantities(
    x0, params: AttentionParams, k: int, m_u: float, m_x_override: Optional[float] = None
) -> BoundQuantities:
    x0 = _check_input(x0, params, "x0")
    if k < 0:
        raise ShapeError(f"k must be >= 0, got {k}")
    if m_u < 0:
        raise ArgumentError(f"m_u must be >= 0, got {m_u}")
    m_x = float(row_norms(x0).max()) if m_x_override is None else float(m_x_override)
    sigma_q = max_singular_value(params.w_q)
    sigma_key = max_singular_value(params.w_key)
    sigma_v = max_singular_value(params.w_v)
    alpha = sigma_q * sigma_key * m_u * m_x / math.sqrt(params.d_key)

    s_xx = _scores(x0 @ params.w_q, x0 @ params.w_key, params.d_key)
    log_g = logsumexp(s_xx, axis=1)

    log_cap = math.log(sigma_v * m_u) if sigma_v * m_u > 0 else -math.inf
    log_kea = math.log(k) + alpha if k > 0 else -math.inf
    with np.errstate(invalid="ignore"):
        log_beta = log_kea + log_cap - np.logaddexp(log_g, log_kea)
        log_gamma = alpha + log_cap - log_g
    log_beta = np.where(np.isnan(log_beta), -math.inf, log_beta)
    log_gamma = np.where(np.isnan(log_gamma), -math.inf, log_gamma)
    return BoundQuantities(
        log_g=log_g,
        alpha=alpha,
        sigma_q=sigma_q,
        sigma_key=sigma_key,
        sigma_v=sigma_v,
        m_u=float(m_u),
        m_x=m_x,
        k=int(k),
        log_beta=log_beta,
        log_gamma=log_gamma,
    )


def y_x_extremes(
    x0, params: AttentionParams, k: int, m_u: float, bounds: Optional[BoundQuantities] = None
) -> tuple[np.ndarray, np.ndarray]:
    """``(Y_x^max, Y_x^min)``: the imposed-only output and its per-row
    shrinkage by ``g_i / (g_i + k e^alpha)``."""
    if bounds is None:
        bounds = compute_bound_quantities(x0, params, k, m_u)
    y_max = self_attention(x0, params)
    return y_max, bounds.shrink[:, None] * y_max
