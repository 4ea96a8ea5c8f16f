"""Unreachability certificates for self-attention outputs and a sampling
oracle that probes the reachable set from below.

A certificate compares, row by row, the part of ``Y_x^max`` orthogonal to the
target against ``k * gamma_i`` (the largest orthogonal correction ``k``
norm-bounded control rows can contribute). Any row exceeding its threshold
proves the target unreachable. The same verdict is recomputed from the shrunk
output ``Y_x^min`` against ``beta_i`` as a consistency check.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import AttentionParams, BoundQuantities, compute_bound_quantities, y_x_extremes
from .errors import ArgumentError, ShapeError
from .numcore import as_matrix, matrix_from_json, matrix_to_json, row_decompose, row_norms

CERT_MARGIN = 1e-12
REACH_TOL = 1e-6
ORACLE_CHUNK = 4096


class Verdict(str, enum.Enum):
    UNREACHABLE = "Unreachable"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class ControlInstance:
    x0: np.ndarray
    y_star: np.ndarray
    k: int
    m_u: float

    def __post_init__(self):
        x0 = as_matrix(self.x0, "x0")
        y_star = as_matrix(self.y_star, "y_star")
        if x0.shape[0] < 1:
            raise ShapeError("x0 needs at least one row")
        if y_star.shape[0] != x0.shape[0]:
            raise ShapeError(f"y_star has {y_star.shape[0]} rows, x0 has {x0.shape[0]}")
        if int(self.k) < 0:
            raise ArgumentError(f"k must be >= 0, got {self.k}")
        if not (self.m_u >= 0):
            raise ArgumentError(f"m_u must be >= 0, got {self.m_u}")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "y_star", y_star)
        object.__setattr__(self, "k", int(self.k))
        object.__setattr__(self, "m_u", float(self.m_u))

    @property
    def m(self) -> int:
        return self.x0.shape[0]

    def check_params(self, params: AttentionParams) -> None:
        if self.x0.shape[1] != params.d_in:
            raise ShapeError(f"x0 has {self.x0.shape[1]} columns, params expect d_in={params.d_in}")
        if self.y_star.shape[1] != params.d_out:
            raise ShapeError(
                f"y_star has {self.y_star.shape[1]} columns, params give d_out={params.d_out}"
            )

    def to_json(self) -> dict:
        return {
            "x0": matrix_to_json(self.x0),
            "y_star": matrix_to_json(self.y_star),
            "k": self.k,
            "m_u": self.m_u,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ControlInstance":
        try:
            return cls(matrix_from_json(obj["x0"]), matrix_from_json(obj["y_star"]), int(obj["k"]), float(obj["m_u"]))
        except KeyError as exc:
            raise ArgumentError(f"instance JSON is missing {exc}") from exc


@dataclass(frozen=True)
class RowCheck:
    row: int
    lhs: float  # ||Y_x,perp^{max,i}||
    rhs: float  # k * gamma_i (inf when out of linear range)
    log_lhs: float
    log_rhs: float
    triggered: bool
    restated_triggered: bool
    residual_floor: float

    def to_json(self) -> dict:
        def fin(v):
            return v if math.isfinite(v) else None

        return {
            "row": self.row,
            "lhs": fin(self.lhs),
            "rhs": fin(self.rhs),
            "log_lhs": fin(self.log_lhs),
            "log_rhs": fin(self.log_rhs),
            "triggered": self.triggered,
            "restated_triggered": self.restated_triggered,
            "residual_floor": self.residual_floor,
        }


@dataclass(frozen=True)
class Certificate:
    per_row: list[RowCheck]
    verdict: Verdict
    restated_agrees: bool
    bounds: BoundQuantities = field(repr=False)

    @property
    def residual_floor(self) -> float:
        """Lower bound on the max-row distance ``max_i ||Y^i - Y*^i||`` over
        every admissible control; positive only for Unreachable verdicts."""
        return max((r.residual_floor for r in self.per_row), default=0.0)

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict.value,
            "restated_agrees": self.restated_agrees,
            "residual_floor": self.residual_floor,
            "per_row": [r.to_json() for r in self.per_row],
            "bounds": self.bounds.to_json(),
        }


def _safe_log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def _exceeds(log_lhs: float, log_rhs: float, log_scale: float) -> tuple[bool, float]:
    """Strict ``lhs > rhs + margin * scale`` in log space; also returns the
    log-gap used to detect near ties."""
    log_thr = float(np.logaddexp(log_rhs, math.log(CERT_MARGIN) + log_scale))
    if log_lhs == -math.inf:
        return False, -math.inf
    return log_lhs > log_thr, log_lhs - log_thr


def certify_unreachable(instance: ControlInstance, params: AttentionParams) -> Certificate:
    """Per-row unreachability test for ``instance`` under attention ``params``.

    Row ``i`` triggers when ``||Y_x,perp^{max,i}|| > k gamma_i`` by more than a
    1e-12 margin (scaled by the magnitudes involved, so floating-point noise in
    an exact match never certifies). The restated form
    ``||Y_x,perp^{min,i}|| > beta_i`` is evaluated independently from the
    shrunk matrix, and ``restated_agrees`` records whether both forms reach the
    same per-row decisions (differences inside the margin count as ties).
    """
    instance.check_params(params)
    bq = compute_bound_quantities(instance.x0, params, instance.k, instance.m_u)
    y_max, y_min = y_x_extremes(instance.x0, params, instance.k, instance.m_u, bounds=bq)
    perp_max = row_norms(row_decompose(y_max, instance.y_star).orthogonal)
    perp_min = row_norms(row_decompose(y_min, instance.y_star).orthogonal)
    ymax_norms = row_norms(y_max)
    log_shrink = bq.log_g - np.logaddexp(bq.log_g, bq.log_k_exp_alpha)
    log_k = _safe_log(instance.k)

    rows = []
    agrees = True
    for i in range(instance.m):
        log_lhs = _safe_log(float(perp_max[i]))
        log_rhs = log_k + float(bq.log_gamma[i])
        log_scale = max(0.0, _safe_log(float(ymax_norms[i])), log_rhs)
        hit, gap = _exceeds(log_lhs, log_rhs, log_scale)

        hit27, gap27 = _exceeds(
            _safe_log(float(perp_min[i])),
            float(bq.log_beta[i]),
            log_scale + float(log_shrink[i]),
        )
        if hit != hit27 and min(abs(gap), abs(gap27)) > CERT_MARGIN:
            agrees = False

        floor = 0.0
        if hit:
            # shrink * (L - k gamma): smallest orthogonal residual any control leaves
            floor = math.exp(float(log_shrink[i]) + log_lhs)
            if log_rhs > -math.inf:
                floor *= -math.expm1(log_rhs - log_lhs)
        rhs = math.exp(log_rhs) if log_rhs < 700 else math.inf
        rows.append(
            RowCheck(
                row=i,
                lhs=float(perp_max[i]),
                rhs=rhs,
                log_lhs=log_lhs,
                log_rhs=log_rhs,
                triggered=hit,
                restated_triggered=hit27,
                residual_floor=floor,
            )
        )
    verdict = Verdict.UNREACHABLE if any(r.triggered for r in rows) else Verdict.INCONCLUSIVE
    return Certificate(per_row=rows, verdict=verdict, restated_agrees=agrees, bounds=bq)


@dataclass(frozen=True)
class GeneralDiagnosis:
    norm_candidate: float
    norm_target: float
    y_perp: np.ndarray
    max_abs_perp: float
    case: Optional[str]  # "A", "B", "C" or None

    def to_json(self) -> dict:
        return {
            "norm_candidate": self.norm_candidate,
            "norm_target": self.norm_target,
            "y_perp": matrix_to_json(self.y_perp),
            "max_abs_perp": self.max_abs_perp,
            "case": self.case,
        }


def diagnose_general(y_candidate, y_star, tol: float = 1e-12) -> GeneralDiagnosis:
    """Classify why ``y_candidate`` differs from ``y_star``.

    ``"B"``: Frobenius norms differ. ``"A"``: equal norms, some entry of the
    row-wise orthogonal component is nonzero. ``"C"``: equal norms and no
    orthogonal component, yet the rows still differ along the target (for
    example ``y_candidate = -y_star``); neither A nor B covers this. ``None``:
    the matrices agree.
    """
    y = as_matrix(y_candidate, "y_candidate")
    t = as_matrix(y_star, "y_star")
    if y.shape != t.shape:
        raise ShapeError(f"diagnose_general: {y.shape} vs {t.shape}")
    ny, nt = float(np.linalg.norm(y)), float(np.linalg.norm(t))
    y_perp = row_decompose(y, t).orthogonal
    max_perp = float(np.abs(y_perp).max()) if y_perp.size else 0.0
    scale = max(1.0, ny, nt)
    if abs(ny - nt) > tol * scale:
        case = "B"
    elif max_perp > tol * scale:
        case = "A"
    elif y.size and float(np.abs(y - t).max()) > tol * scale:
        case = "C"
    else:
        case = None
    return GeneralDiagnosis(ny, nt, y_perp, max_perp, case)


@dataclass(frozen=True)
class OracleResult:
    best_residual: float
    best_u: np.ndarray
    searched: int
    reached: bool
    exhaustive: bool

    def to_json(self) -> dict:
        return {
            "best_residual": self.best_residual,
            "best_u": {"rows": int(self.best_u.shape[0]), "cols": int(self.best_u.shape[1]),
                       "data": self.best_u.ravel().tolist()},
            "searched": self.searched,
            "reached": self.reached,
            "exhaustive": self.exhaustive,
        }


def imposed_outputs(u_batch: np.ndarray, x0: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Imposed-block outputs for a stack of control matrices ``(S, k, d_in)``.

    Returns ``(S, m, d_out)``.
    """
    q_x = x0 @ params.w_q
    s_xx = (q_x @ (x0 @ params.w_key).T) / math.sqrt(params.d_key)
    v_x = x0 @ params.w_v
    k_u = u_batch @ params.w_key
    v_u = u_batch @ params.w_v
    s_xu = np.einsum("md,skd->smk", q_x, k_u) / math.sqrt(params.d_key)
    shift = np.maximum(s_xu.max(axis=2, keepdims=True, initial=-np.inf), s_xx.max(axis=1)[None, :, None])
    a_xu = np.exp(s_xu - shift)
    a_xx = np.exp(s_xx[None] - shift)
    denom = a_xu.sum(axis=2, keepdims=True) + a_xx.sum(axis=2, keepdims=True)
    return (a_xu @ v_u + a_xx @ v_x) / denom


def max_row_distance(y: np.ndarray, y_star: np.ndarray) -> np.ndarray:
    """``max_i ||y^i - y_star^i||`` over the last two axes (batched)."""
    return np.linalg.norm(y - y_star, axis=-1).max(axis=-1)


def build_candidates(embeddings, m_u: float, n_random: int = 0, seed: int = 0) -> np.ndarray:
    """Rows of ``embeddings`` shrunk to norm ``<= m_u`` plus ``n_random``
    uniformly random directions at norm exactly ``m_u``."""
    emb = as_matrix(embeddings, "embeddings")
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    scale = np.where(norms > m_u, m_u / np.where(norms > 0, norms, 1.0), 1.0)
    rows = [emb * scale]
    if n_random > 0:
        rng = np.random.default_rng(seed)
        d = rng.standard_normal((n_random, emb.shape[1]))
        rows.append(d / np.linalg.norm(d, axis=1, keepdims=True) * m_u)
    return np.vstack(rows)


def brute_force_reach(
    instance: ControlInstance,
    params: AttentionParams,
    candidates,
    budget: int,
    seed: int = 0,
    reach_tol: float = REACH_TOL,
) -> OracleResult:
    """Search control matrices for the one whose output lands closest to the target.

    If ``len(candidates) ** k <= budget`` every ``k``-tuple of candidate rows
    is tried in lexicographic index order. Otherwise ``budget`` seeded probes
    are drawn: the first half are random candidate tuples, the rest random
    directions at norm ``m_u``. Ties keep the earliest probe, which in the
    exhaustive case is the lexicographically smallest tuple.
    """
    instance.check_params(params)
    if budget < 1:
        raise ArgumentError(f"budget must be >= 1, got {budget}")
    k, x0, y_star, d_in = instance.k, instance.x0, instance.y_star, params.d_in
    cands = np.asarray(candidates, dtype=np.float64).reshape(-1, d_in)
    if cands.shape[0] and np.linalg.norm(cands, axis=1).max() > instance.m_u + 1e-12:
        raise ArgumentError("candidate row norm exceeds m_u")

    if k == 0:
        u = np.zeros((0, d_in))
        res = float(max_row_distance(imposed_outputs(u[None], x0, params)[0], y_star))
        return OracleResult(res, u, 1, res < reach_tol, True)
    if cands.shape[0] == 0:
        raise ArgumentError("empty candidate set with k > 0")

    n_c = cands.shape[0]
    exhaustive = n_c**k <= budget
    best_res, best_u, searched = math.inf, None, 0

    def consider(u_batch):
        nonlocal best_res, best_u, searched
        res = max_row_distance(imposed_outputs(u_batch, x0, params), y_star[None])
        j = int(np.argmin(res))
        if res[j] < best_res:
            best_res, best_u = float(res[j]), u_batch[j].copy()
        searched += u_batch.shape[0]

    if exhaustive:
        total = n_c**k
        for start in range(0, total, ORACLE_CHUNK):
            flat = np.arange(start, min(total, start + ORACLE_CHUNK))
            idx = np.stack(np.unravel_index(flat, (n_c,) * k), axis=1)
            consider(cands[idx])
    else:
        rng = np.random.default_rng(seed)
        n_tuple = budget // 2
        done = 0
        while done < budget:
            size = min(ORACLE_CHUNK, budget - done)
            n_t = max(0, min(size, n_tuple - done))
            parts = []
            if n_t:
                parts.append(cands[rng.integers(0, n_c, size=(n_t, k))])
            if size - n_t:
                d = rng.standard_normal((size - n_t, k, d_in))
                parts.append(d / np.linalg.norm(d, axis=2, keepdims=True) * instance.m_u)
            consider(np.concatenate(parts, axis=0))
            done += size

    return OracleResult(best_res, best_u, searched, best_res < reach_tol, exhaustive)
