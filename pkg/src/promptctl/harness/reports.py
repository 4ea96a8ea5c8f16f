"""CSV / JSON / SVG emission for k-epsilon reports."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .._io import atomic_write_bytes, atomic_write_json, atomic_write_text, dumps_json  # noqa: E402
from .kepsilon import KEpsReport  # noqa: E402

REPORT_FILES = (
    "kepsilon.csv",
    "pairs.csv",
    "tokens.csv",
    "report.json",
    "eps_vs_k.svg",
    "log_eps_vs_k.svg",
    "base_loss_vs_k.svg",
    "rank_vs_k.svg",
)

plt.rcParams["svg.hashsalt"] = "promptctl"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _save_svg(fig, path: Path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return atomic_write_bytes(path, buf.getvalue())


def _failed_k(report: KEpsReport) -> float:
    """Plot position for failures: one step past the longest probed length."""
    ks = [row["k"] for row in report.per_k]
    return (max(ks) + 2) if ks else 1


def plot_eps(report: KEpsReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ks = [r["k"] for r in report.per_k]
    ax.step(ks, [r["epsilon"] for r in report.per_k], where="post", marker="o")
    ax.set_xlabel("prompt length k")
    ax.set_ylabel("epsilon (fraction unreached)")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title("k-epsilon controllability")
    return _save_svg(fig, path)


def plot_log_eps(report: KEpsReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    pts = [(r["k"], math.log(r["epsilon"])) for r in report.per_k if r["epsilon"] > 0]
    if pts:
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o", label="ln epsilon")
    fit = report.log_linear_fit
    if fit:
        xs = [r["k"] for r in report.per_k if r["k"] >= 1]
        ax.plot(xs, [fit["intercept"] + fit["slope"] * x for x in xs], "-",
                label=f"fit slope={fit['slope']:.3f} r2={fit['r2']:.3f}")
        ax.legend()
    ax.set_xlabel("prompt length k")
    ax.set_ylabel("ln epsilon")
    return _save_svg(fig, path)


def _scatter(report: KEpsReport, path: Path, field: str, ylabel: str, transform=lambda v: v) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    fail_x = _failed_k(report)
    xs, ys, fx, fy = [], [], [], []
    for r in report.per_pair:
        y = transform(r[field])
        if r["required_k"] is None:
            fx.append(fail_x)
            fy.append(y)
        else:
            xs.append(r["required_k"])
            ys.append(y)
    if xs:
        ax.scatter(xs, ys, s=10, label="reached")
    if fy:
        ax.scatter(fx, fy, s=10, marker="x", label="not reached")
    if xs or fy:
        ax.legend()
    ax.set_xlabel("required prompt length k")
    ax.set_ylabel(ylabel)
    return _save_svg(fig, path)


def emit_reports(report: KEpsReport, out_dir, config: Optional[dict] = None) -> dict:
    """Write the eight report files into ``out_dir`` plus ``manifest.json``.

    Returns the manifest, which lists the files and echoes ``config``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "kepsilon.csv",
                      _csv(["k", "epsilon"], [[r["k"], repr(r["epsilon"])] for r in report.per_k]))
    atomic_write_text(out / "pairs.csv", _csv(
        ["index", "required_k", "base_logprob", "base_rank", "method", "prompt", "y", "reason"],
        [[r["index"], "" if r["required_k"] is None else r["required_k"], repr(r["base_logprob"]),
          r["base_rank"], r["method"] or "", " ".join(map(str, r["prompt"] or [])), r["y"], r["reason"] or ""]
         for r in report.per_pair]))
    atomic_write_text(out / "tokens.csv", _csv(
        ["token", "symbol", "count"],
        [[t["token"], t["symbol"] or "", t["count"]] for t in report.token_frequency]))
    atomic_write_text(out / "report.json", dumps_json(report.to_json()))
    plot_eps(report, out / "eps_vs_k.svg")
    plot_log_eps(report, out / "log_eps_vs_k.svg")
    _scatter(report, out / "base_loss_vs_k.svg", "base_logprob", "base loss (nats)", lambda v: -v)
    _scatter(report, out / "rank_vs_k.svg", "base_rank", "prior rank of target")
    manifest = {"files": list(REPORT_FILES), "out_dir": str(out)}
    if config is not None:
        manifest["config"] = config
    atomic_write_json(out / "manifest.json", manifest)
    return manifest
