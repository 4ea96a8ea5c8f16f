"""k-epsilon controllability measurement.

For every (x0, y) pair the empty prompt is tried first, then the back-off
schedule. ``epsilon(k)`` is the fraction of pairs not steered to ``y`` by any
prompt of length at most ``k``; only the schedule's lengths are probed, so
required lengths are schedule-quantised.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import ArgumentError, PromptCtlError
from ..lmsystem import is_output_reached
from ..promptopt import GCG_KS, GREEDY_KS, FULL_SCALE_GCG_ITERS, back_off_prompt

REFERENCE_RESULTS = {
    "note": "large-model reference values, not reproduced at desk scale",
    "falcon_7b_ground_truth_reachable_k10": 0.9716,
    "falcon_7b_top75_reachable_k10": 0.8939,
    "falcon_7b_uniform_rank_reachable_k10": 0.4643,
}
SCHEDULE_NOTE = "required_k is quantised to the probed schedule; lengths between probes are never tried"


@dataclass(frozen=True)
class MeasureSettings:
    greedy_ks: tuple = GREEDY_KS
    gcg_ks: tuple = GCG_KS
    gcg_batch: Optional[int] = None
    gcg_topk: Optional[int] = None
    gcg_iters: int = FULL_SCALE_GCG_ITERS
    seed: int = 0
    replay_fraction: float = 0.1

    @property
    def schedule(self) -> tuple:
        return tuple(self.greedy_ks) + tuple(self.gcg_ks)

    def to_json(self) -> dict:
        return {
            "greedy_ks": list(self.greedy_ks),
            "gcg_ks": list(self.gcg_ks),
            "gcg_batch": self.gcg_batch,
            "gcg_topk": self.gcg_topk,
            "gcg_iters": self.gcg_iters,
            "seed": self.seed,
            "replay_fraction": self.replay_fraction,
        }


@dataclass
class KEpsReport:
    per_k: list
    per_pair: list
    token_frequency: list
    log_linear_fit: Optional[dict]
    metadata: dict = field(default_factory=dict)

    def epsilon(self, k: int) -> float:
        for row in self.per_k:
            if row["k"] == k:
                return row["epsilon"]
        raise KeyError(k)

    def to_json(self) -> dict:
        return {
            "per_k": self.per_k,
            "per_pair": self.per_pair,
            "token_frequency": self.token_frequency,
            "log_linear_fit": self.log_linear_fit,
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KEpsReport":
        return cls(obj["per_k"], obj["per_pair"], obj["token_frequency"], obj["log_linear_fit"],
                   obj.get("metadata", {}))


def log_linear_fit(ks: Sequence[float], eps: Sequence[float]) -> Optional[dict]:
    """Least-squares line through ``(k, ln epsilon)`` over points with epsilon > 0.

    Returns None with fewer than two usable points.
    """
    pts = [(float(k), math.log(e)) for k, e in zip(ks, eps) if e > 0]
    if len(pts) < 2:
        return None
    x = np.array([p[0] for p in pts])
    z = np.array([p[1] for p in pts])
    xm, zm = x.mean(), z.mean()
    sxx = float(((x - xm) ** 2).sum())
    if sxx == 0.0:
        return None
    slope = float(((x - xm) * (z - zm)).sum() / sxx)
    intercept = float(zm - slope * xm)
    ss_res = float(((z - (intercept + slope * x)) ** 2).sum())
    ss_tot = float(((z - zm) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"slope": slope, "intercept": intercept, "r2": r2, "points": len(pts)}


def epsilon_curve(required: Sequence[Optional[int]], ks: Sequence[int]) -> list:
    n = len(required)
    rows = []
    for k in ks:
        missed = sum(1 for r in required if r is None or r > k)
        rows.append({"k": int(k), "epsilon": missed / n if n else 0.0})
    return rows


def solve_pair(lm, pair, settings: MeasureSettings, index: int) -> dict:
    """Shortest schedule prompt for one pair; optimiser errors become failures."""
    x0, y = tuple(pair.x0), int(pair.y)
    record = {
        "index": index,
        "x0": list(x0),
        "y": y,
        "provenance": pair.provenance,
        "base_logprob": pair.base_logprob,
        "base_rank": pair.base_rank,
        "required_k": None,
        "method": None,
        "prompt": None,
        "achieved_logprob": None,
        "reason": None,
    }
    try:
        if is_output_reached(x0, (), (y,), lm):
            record.update(required_k=0, method="none", prompt=[], achieved_logprob=pair.base_logprob)
            return record
        result = back_off_prompt(
            x0, y, lm,
            greedy_ks=settings.greedy_ks, gcg_ks=settings.gcg_ks,
            gcg_batch=settings.gcg_batch, gcg_topk=settings.gcg_topk, gcg_iters=settings.gcg_iters,
            seed=int(np.random.SeedSequence([settings.seed, index]).generate_state(1)[0]),
        )
    except PromptCtlError as exc:
        record["reason"] = f"{type(exc).__name__}: {exc}"
        return record
    if result.failed:
        record["reason"] = "no prompt in schedule steered the system"
    else:
        out = result.outcome
        record.update(required_k=result.required_k, method=out.method, prompt=list(out.prompt),
                      achieved_logprob=out.achieved_logprob)
    return record


_WORKER_LM = None


def _init_worker(lm):
    global _WORKER_LM
    _WORKER_LM = lm


def _solve_in_worker(job):
    pair, settings, index = job
    return solve_pair(_WORKER_LM, pair, settings, index)


def _replay(lm, records, fraction: float, seed: int) -> dict:
    solved = [r for r in records if r["required_k"] is not None]
    n_check = min(len(solved), math.ceil(fraction * len(solved)))
    rng = np.random.default_rng([seed, 7])
    picks = sorted(rng.choice(len(solved), size=n_check, replace=False).tolist()) if n_check else []
    failures = [solved[i]["index"] for i in picks
                if not is_output_reached(solved[i]["x0"], solved[i]["prompt"], (solved[i]["y"],), lm)]
    return {
        "checked": n_check,
        "passed": n_check - len(failures),
        "indices": [solved[i]["index"] for i in picks],
        "failed_indices": failures,
    }


def measure_k_epsilon(
    dataset, lm, settings: Optional[MeasureSettings] = None, workers: int = 1,
    config: Optional[dict] = None,
) -> KEpsReport:
    """Run the back-off search on every pair and summarise reachability by prompt length.

    Pairs are independent; with ``workers > 1`` they run in a process pool but
    results are aggregated in dataset order, so the report does not depend on
    the worker count. ``config`` is echoed into the report metadata.
    """
    settings = settings or MeasureSettings()
    pairs = list(dataset.pairs)
    if not pairs:
        raise ArgumentError("dataset is empty")
    jobs = [(p, settings, i) for i, p in enumerate(pairs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(lm,)) as ex:
            records = list(ex.map(_solve_in_worker, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    else:
        records = [solve_pair(lm, p, settings, i) for p, settings, i in jobs]
    return summarise(records, lm, settings, dataset=dataset, config=config)


def summarise(records, lm, settings: MeasureSettings, dataset=None, config=None) -> KEpsReport:
    required = [r["required_k"] for r in records]
    ks = (0,) + settings.schedule
    per_k = epsilon_curve(required, ks)
    freq: dict[int, int] = {}
    for r in records:
        for t in r["prompt"] or ():
            freq[t] = freq.get(t, 0) + 1
    vocab = getattr(lm, "vocab", None)
    token_frequency = [
        {"token": t, "symbol": vocab.tokens[t] if vocab is not None else None, "count": c}
        for t, c in sorted(freq.items())
    ]
    sched_rows = [row for row in per_k if row["k"] >= 1]
    fit = log_linear_fit([r["k"] for r in sched_rows], [r["epsilon"] for r in sched_rows])
    metadata = {
        "settings": settings.to_json(),
        "schedule_note": SCHEDULE_NOTE,
        "reference": REFERENCE_RESULTS,
        "replay": _replay(lm, records, settings.replay_fraction, settings.seed),
        "n_pairs": len(records),
    }
    if dataset is not None:
        metadata["dataset"] = dataset.header()
    if config is not None:
        metadata["config"] = config
    return KEpsReport(per_k, records, token_frequency, fit, metadata)
