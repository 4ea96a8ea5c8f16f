"""Command-line entry point: ``promptctl <subcommand> [options]``.

Parameter precedence is defaults < ``--config`` JSON file < flags. The seed
additionally honours the ``SEED`` environment variable, which beats the
config file but not ``--seed``. Exit status: 0 ok, 1 domain error, 2 usage.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__
from ._io import atomic_write_json, dumps_json
from .errors import PromptCtlError

DEFAULTS = {
    "corpus": {"vocab_size": 64, "templates": 4, "template_len": 32, "lines": 200, "noise": 0.1,
               "seed": 0, "out": None},
    "train": {"corpus": None, "vocab": None, "steps": 1500, "lr": 1.0, "batch": 16, "window": 24,
              "d_model": 32, "d_key": 16, "layers": 2, "max_len": 64, "seed": 0, "out": None},
    "bound": {"instance": None, "out": None, "seed": 0},
    "reach": {"instance": None, "budget": None, "seed": None, "out": None},
    "optimize": {"instance": None, "model": None, "method": "backoff", "k": 1, "seed": 0,
                 "gcg_batch": None, "gcg_topk": None, "gcg_iters": 34, "out": None},
    "dataset": {"kind": "ground-truth", "corpus": None, "model": None, "n": 500, "num_states": 25,
                "n_top": None, "min_len": 8, "max_len": 16, "seed": 0, "out": None},
    "kepsilon": {"dataset": None, "model": None, "schedule": "1,2,3,4,6,8,10", "greedy_max": 3,
                 "gcg_batch": None, "gcg_topk": None, "gcg_iters": 34, "seed": 0, "out": None,
                 "workers": 1, "replay_fraction": 0.1},
    "report": {"report": None, "out": None, "seed": 0},
}
REQUIRED = {
    "corpus": ["out"],
    "train": ["corpus", "out"],
    "bound": ["instance"],
    "reach": ["instance"],
    "optimize": ["instance", "model"],
    "dataset": ["corpus", "model", "out"],
    "kepsilon": ["dataset", "model", "out"],
    "report": ["report", "out"],
}
# execution-only knobs that must not change outputs
NON_PROVENANCE = {"workers", "out", "config"}


def build_id() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(path.relative_to(Path(__file__).parent).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file of option values (flags override it)")
    p.add_argument("--seed", type=int, help="RNG seed (overrides SEED env and config)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptctl",
        description="Reachability bounds, prompt optimisation and k-epsilon measurement.",
        epilog="Precedence: defaults < --config < SEED env (seed only) < flags.",
    )
    parser.add_argument("--version", action="version", version=f"promptctl {__version__} (build {build_id()})")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("corpus", help="write a synthetic template-with-noise corpus")
    _add_common(p)
    p.add_argument("--vocab-size", type=int)
    p.add_argument("--templates", type=int)
    p.add_argument("--template-len", type=int)
    p.add_argument("--lines", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--out", help="corpus text file; vocab goes to <out>.vocab.json")

    p = sub.add_parser("train", help="train the toy transformer and write a checkpoint")
    _add_common(p)
    p.add_argument("--corpus")
    p.add_argument("--vocab", help="vocab JSON (default: sorted corpus symbols)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--d-key", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out")

    p = sub.add_parser("bound", help="certify unreachability for an attention instance")
    _add_common(p)
    p.add_argument("--instance", help="JSON {x0, y_star, k, m_u, params}")
    p.add_argument("--out", help="write JSON here instead of stdout")

    p = sub.add_parser("reach", help="search control inputs for an attention instance")
    _add_common(p)
    p.add_argument("--instance", help="JSON {x0, y_star, k, m_u, params, candidates, budget, seed}")
    p.add_argument("--budget", type=int)
    p.add_argument("--out")

    p = sub.add_parser("optimize", help="find a prompt steering x0 to y")
    _add_common(p)
    p.add_argument("--instance", help="JSON {x0: [...], y: ...} with ids or symbols")
    p.add_argument("--model", help="toy LM checkpoint")
    p.add_argument("--method", choices=["greedy", "gcg", "backoff"])
    p.add_argument("--k", type=int)
    p.add_argument("--gcg-batch", type=int)
    p.add_argument("--gcg-topk", type=int)
    p.add_argument("--gcg-iters", type=int)
    p.add_argument("--out")

    p = sub.add_parser("dataset", help="build a control dataset (JSON lines)")
    _add_common(p)
    p.add_argument("--kind", choices=["ground-truth", "top-n", "uniform-rank"])
    p.add_argument("--corpus")
    p.add_argument("--model")
    p.add_argument("--n", type=int)
    p.add_argument("--num-states", type=int)
    p.add_argument("--n-top", type=int)
    p.add_argument("--min-len", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out")

    p = sub.add_parser("kepsilon", help="measure k-epsilon controllability and emit reports")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--model")
    p.add_argument("--schedule", help="comma-separated prompt lengths, e.g. 1,2,3,4,6,8,10")
    p.add_argument("--greedy-max", type=int, help="lengths up to this use greedy, longer use GCG")
    p.add_argument("--gcg-batch", type=int)
    p.add_argument("--gcg-topk", type=int)
    p.add_argument("--gcg-iters", type=int)
    p.add_argument("--replay-fraction", type=float)
    p.add_argument("--workers", type=int, help="process pool size (does not change results)")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("report", help="re-emit CSV/SVG reports from a report.json")
    _add_common(p)
    p.add_argument("--report")
    p.add_argument("--out")
    return parser


def resolve_config(command: str, args: argparse.Namespace, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    cfg = dict(DEFAULTS[command])
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(cfg)
        if unknown:
            raise PromptCtlError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(file_cfg)
    if environ.get("SEED") not in (None, ""):
        cfg["seed"] = int(environ["SEED"])
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def provenance(cfg: dict) -> dict:
    return {k: v for k, v in sorted(cfg.items()) if k not in NON_PROVENANCE}


def _emit(obj: dict, out) -> None:
    if out:
        atomic_write_json(out, obj)
    else:
        sys.stdout.write(dumps_json(obj))


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise PromptCtlError(f"{path}: malformed JSON ({exc})") from exc


def cmd_corpus(cfg):
    from .harness.corpus import synthetic_corpus
    from .lmsystem import Vocab, write_corpus

    corpus = synthetic_corpus(cfg["vocab_size"], cfg["templates"], cfg["template_len"], cfg["lines"],
                              cfg["noise"], cfg["seed"])
    vocab = Vocab.numbered(cfg["vocab_size"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(out, corpus, vocab)
    vocab.save(out.with_name(out.name + ".vocab.json"))
    atomic_write_json(out.with_name(out.name + ".manifest.json"), {"config": provenance(cfg)})


def _load_vocab_for_corpus(corpus_path, vocab_path):
    from .lmsystem import Vocab

    if vocab_path:
        return Vocab.load(vocab_path)
    sidecar = Path(str(corpus_path) + ".vocab.json")
    return Vocab.load(sidecar) if sidecar.exists() else None


def cmd_train(cfg):
    from .lmsystem import read_corpus
    from .toylm import ToyConfig, ToyTransformerLM, train

    vocab = _load_vocab_for_corpus(cfg["corpus"], cfg["vocab"])
    corpus, vocab = read_corpus(cfg["corpus"], vocab)
    config = ToyConfig(vocab_size=vocab.size, d_model=cfg["d_model"], d_key=cfg["d_key"],
                       n_layers=cfg["layers"], max_len=cfg["max_len"])
    params = train(corpus, cfg["steps"], cfg["lr"], cfg["batch"], cfg["seed"], config, window=cfg["window"])
    lm = ToyTransformerLM(params, vocab)
    lm.save(cfg["out"], provenance(cfg))
    return lm


def _attention_instance(obj):
    from .attention import AttentionParams
    from .reachability import ControlInstance

    try:
        return ControlInstance.from_json(obj), AttentionParams.from_json(obj["params"])
    except KeyError as exc:
        raise PromptCtlError(f"instance JSON is missing {exc}") from exc


def cmd_bound(cfg):
    from .reachability import certify_unreachable

    instance, params = _attention_instance(_read_json(cfg["instance"]))
    cert = certify_unreachable(instance, params)
    _emit({**cert.to_json(), "config": provenance(cfg)}, cfg["out"])


def cmd_reach(cfg):
    from .numcore import matrix_from_json
    from .reachability import brute_force_reach

    obj = _read_json(cfg["instance"])
    instance, params = _attention_instance(obj)
    if "candidates" not in obj:
        raise PromptCtlError("reach instance needs a 'candidates' matrix")
    budget = cfg["budget"] if cfg["budget"] is not None else int(obj.get("budget", 10_000))
    seed = cfg["seed"] if cfg["seed"] is not None else int(obj.get("seed", 0))
    cfg = {**cfg, "budget": budget, "seed": seed}
    result = brute_force_reach(instance, params, matrix_from_json(obj["candidates"]), budget, seed)
    _emit({**result.to_json(), "config": provenance(cfg)}, cfg["out"])


def _load_model(path):
    from .toylm import ToyTransformerLM

    return ToyTransformerLM.load(path)


def _tokens(values, vocab):
    if vocab is not None and any(isinstance(v, str) for v in values):
        return tuple(vocab.id(v) if isinstance(v, str) else int(v) for v in values)
    return tuple(int(v) for v in values)


def cmd_optimize(cfg):
    from .promptopt import back_off_prompt, gcg, greedy_back_generate

    lm = _load_model(cfg["model"])
    obj = _read_json(cfg["instance"])
    try:
        x0 = _tokens(obj["x0"], lm.vocab)
        y = _tokens([obj["y"]], lm.vocab)[0]
    except KeyError as exc:
        raise PromptCtlError(f"instance JSON is missing {exc}") from exc
    if cfg["method"] == "greedy":
        out = greedy_back_generate(x0, y, cfg["k"], lm).to_json(lm.vocab)
    elif cfg["method"] == "gcg":
        out = gcg(x0, y, cfg["k"], lm, batch=cfg["gcg_batch"], topk=cfg["gcg_topk"],
                  iters=cfg["gcg_iters"], seed=cfg["seed"]).to_json(lm.vocab)
    else:
        out = back_off_prompt(x0, y, lm, gcg_batch=cfg["gcg_batch"], gcg_topk=cfg["gcg_topk"],
                              gcg_iters=cfg["gcg_iters"], seed=cfg["seed"]).to_json(lm.vocab)
    _emit({**out, "config": provenance(cfg)}, cfg["out"])


def cmd_dataset(cfg):
    from .harness import datasets
    from .lmsystem import read_corpus

    lm = _load_model(cfg["model"])
    corpus, _ = read_corpus(cfg["corpus"], lm.vocab)
    rng_range = (cfg["min_len"], cfg["max_len"])
    ids = {"corpus_id": Path(cfg["corpus"]).name, "lm_id": Path(cfg["model"]).name}
    if cfg["kind"] == "ground-truth":
        ds = datasets.build_ground_truth_dataset(corpus, lm, cfg["n"], rng_range, cfg["seed"], **ids)
    elif cfg["kind"] == "top-n":
        ds = datasets.build_top_n_dataset(corpus, lm, cfg["num_states"], cfg["n_top"], cfg["seed"],
                                          rng_range, **ids)
    else:
        ds = datasets.build_uniform_rank_dataset(corpus, lm, cfg["n"], cfg["seed"], rng_range, **ids)
    ds.meta["config"] = provenance(cfg)
    ds.save(cfg["out"])


def parse_schedule(text: str, greedy_max: int) -> tuple[tuple, tuple]:
    try:
        ks = [int(t) for t in str(text).replace(" ", "").split(",") if t]
    except ValueError as exc:
        raise PromptCtlError(f"bad schedule {text!r}") from exc
    return tuple(k for k in ks if k <= greedy_max), tuple(k for k in ks if k > greedy_max)


def cmd_kepsilon(cfg):
    from .harness.datasets import ControlDataset
    from .harness.kepsilon import MeasureSettings, measure_k_epsilon
    from .harness.reports import emit_reports

    lm = _load_model(cfg["model"])
    dataset = ControlDataset.load(cfg["dataset"])
    greedy_ks, gcg_ks = parse_schedule(cfg["schedule"], cfg["greedy_max"])
    settings = MeasureSettings(greedy_ks, gcg_ks, cfg["gcg_batch"], cfg["gcg_topk"], cfg["gcg_iters"],
                               cfg["seed"], cfg["replay_fraction"])
    report = measure_k_epsilon(dataset, lm, settings, workers=max(1, cfg["workers"]),
                               config=provenance(cfg))
    return emit_reports(report, cfg["out"], config={**provenance(cfg), "workers": cfg["workers"]})


def cmd_report(cfg):
    from .harness.kepsilon import KEpsReport
    from .harness.reports import emit_reports

    report = KEpsReport.from_json(_read_json(cfg["report"]))
    return emit_reports(report, cfg["out"], config=provenance(cfg))


COMMANDS = {
    "corpus": cmd_corpus,
    "train": cmd_train,
    "bound": cmd_bound,
    "reach": cmd_reach,
    "optimize": cmd_optimize,
    "dataset": cmd_dataset,
    "kepsilon": cmd_kepsilon,
    "report": cmd_report,
}


def dispatch(argv=None, environ=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args.command, args, environ)
    except (OSError, ValueError, PromptCtlError) as exc:
        print(f"promptctl {args.command}: {exc}", file=sys.stderr)
        return 1
    missing = [k for k in REQUIRED[args.command] if cfg.get(k) in (None, "")]
    if missing:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        print(f"promptctl {args.command}: error: missing required {flags}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command](cfg)
    except (PromptCtlError, OSError, ValueError, KeyError) as exc:
        print(f"promptctl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
