"""Command-line entry point: ``rainmix <command> [options]``.

Commands: synth, distill, train, replay, eval, report. Each reads an optional
YAML config (``--config``), validates it completely before touching the disk
and writes its outputs under ``--out``. Exit codes: 0 success, 1 invalid
input or config, 2 runtime failure (partial outputs are kept).

Seeds: ``--seed`` overrides the config's ``seed``. synth uses it as the corpus
base seed, train as the run seed, distill as the synthetic-corpus seed.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import yaml

log = logging.getLogger("rainmix")


class ConfigError(ValueError):
    """Invalid command line or config; reported with exit status 1."""


# allowed config keys per command; nested mappings list their own keys
SCHEMA = {
    "synth": {"seed": None, "counts": None, "size": None, "intensity_range": None},
    "distill": {
        "seed": None, "references": None, "queries": None, "k1": None, "k2": None, "k3": None,
        "prompt": None, "prompt_file": None, "max_in_flight": None, "mock_vlm": None,
        "endpoints": {"url", "timeout_ms", "max_retries", "backoff_ms", "bearer_token"},
        "synthetic": {"n_references", "n_queries", "size", "caption_dim"},
    },
    "train": {
        "seed": None, "mode": None, "iterations": None, "learning_rate": None, "batch_per_type": None,
        "window_size": None, "tau": None, "eval_interval": None, "holdout_per_type": None, "float32": None,
        "corpus": {"counts", "size", "base_seed", "intensity_range", "manifest"},
        "model": {"channels", "expert_widths", "encoder_stages", "decoder_stages", "top_k", "noise_std",
                  "encoder_routing", "decoder_routing", "expert_out_scale", "router_init_scale"},
    },
    "replay": {"seed": None, "trace": None, "num_types": None, "window_size": None, "tau": None, "mode": None,
               "warmup_min_points": None},
    "eval": {"seed": None, "pred_dir": None, "gt_dir": None},
    "report": {"seed": None, "logs": None},
}


def _check_keys(cfg: dict, command: str) -> None:
    schema = SCHEMA[command]
    unknown = sorted(set(cfg) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for '{command}': {', '.join(unknown)}")
    for key, sub in schema.items():
        if sub is None or key not in cfg:
            continue
        items = cfg[key] if isinstance(cfg[key], list) else [cfg[key]]
        for item in items:
            if not isinstance(item, dict):
                raise ConfigError(f"'{key}' must be a mapping (or list of mappings)")
            bad = sorted(set(item) - sub)
            if bad:
                raise ConfigError(f"unknown keys under '{key}': {', '.join(bad)}")


def load_config(path: str | None, command: str) -> tuple[dict, str]:
    if path is None:
        return {}, ""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    _check_keys(cfg, command)
    return cfg, text


def _build(factory, name, **kwargs):
    """Construct a validated object, turning ValueError/TypeError into ConfigError."""
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name}: {exc}") from exc


def _counts(value, default):
    from rainmix.imaging import RAIN_TYPES

    if value is None:
        return {t: default for t in RAIN_TYPES}
    if isinstance(value, int):
        return {t: value for t in RAIN_TYPES}
    if isinstance(value, dict):
        return {str(k): int(v) for k, v in value.items()}
    raise ConfigError("counts must be an integer or a mapping of rain type to count")


def _write_echo(out: Path, text: str, effective: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    echo = text if text else yaml.safe_dump(effective, sort_keys=True)
    (out / "config.echo").write_text(echo)


# ---------------------------------------------------------------------------
# commands: each returns a callable doing the work after validation
# ---------------------------------------------------------------------------


def plan_synth(cfg, args):
    from rainmix.imaging import CorpusConfig, gen_corpus

    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    corpus = _build(CorpusConfig, "corpus settings", counts=_counts(cfg.get("counts"), 8),
                    size=int(cfg.get("size", 32)), base_seed=int(seed),
                    intensity_range=tuple(cfg.get("intensity_range", (0.5, 1.0))))

    def run(out: Path):
        entries = gen_corpus(corpus, out)
        print(f"wrote {len(entries)} image pairs to {out}")
        return 0

    return run


def plan_distill(cfg, args):
    from rainmix.distill import (
        DistillConfig,
        build_database,
        distill_corpus,
        make_distill_corpus,
        read_manifest,
    )
    from rainmix.vlm import DEFAULT_PROMPT, EndpointConfig, HttpEndpoint, mock_ensemble

    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    prompt = cfg.get("prompt", DEFAULT_PROMPT)
    if "prompt_file" in cfg:
        try:
            prompt = Path(cfg["prompt_file"]).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read prompt_file: {exc}") from exc
    dcfg = _build(DistillConfig, "distill settings", k1=int(cfg.get("k1", 50)), k2=int(cfg.get("k2", 20)),
                  k3=int(cfg.get("k3", 5)), prompt=prompt, max_in_flight=int(cfg.get("max_in_flight", 8)))
    rule = args.mock_vlm or cfg.get("mock_vlm")
    if rule:
        endpoints = _build(mock_ensemble, "mock rule", rules=str(rule))
    elif "endpoints" in cfg:
        eps = cfg["endpoints"]
        if not isinstance(eps, list) or len(eps) != 3:
            raise ConfigError("'endpoints' must list exactly 3 endpoint configs")
        endpoints = [HttpEndpoint(_build(EndpointConfig, "endpoint", **e)) for e in eps]
    else:
        raise ConfigError("distill needs --mock-vlm or three 'endpoints' in the config")
    refs, queries = cfg.get("references"), cfg.get("queries")
    if (refs is None) != (queries is None):
        raise ConfigError("give both 'references' and 'queries' manifests, or neither for a synthetic corpus")
    for p in (refs, queries):
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"manifest not found: {p}")
    synthetic = cfg.get("synthetic", {})

    def run(out: Path):
        if refs is None:
            ref_path, query_path = make_distill_corpus(
                out / "corpus", n_references=int(synthetic.get("n_references", 24)),
                n_queries=int(synthetic.get("n_queries", 12)), seed=seed,
                size=int(synthetic.get("size", 32)), caption_dim=int(synthetic.get("caption_dim", 16)))
        else:
            ref_path, query_path = refs, queries
        db = build_database(ref_path)
        pyramid = distill_corpus(read_manifest(query_path), db, endpoints, dcfg)
        (out / "manifest.jsonl").write_text(pyramid.to_jsonl())
        (out / "audit.jsonl").write_text(pyramid.audit_jsonl())
        c = pyramid.counts
        print(f"tiers: top={c['top']} middle={c['middle']} bottom={c['bottom']} "
              f"retention={100 * pyramid.retention:.1f}% unprocessable={len(pyramid.failed)}")
        return 2 if pyramid.failed else 0

    return run


def plan_train(cfg, args):
    from rainmix.imaging import CorpusConfig, load_corpus
    from rainmix.moe import ToyModelConfig, save_checkpoint
    from rainmix.training import TrainConfig, train_toy

    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    ccfg = dict(cfg.get("corpus", {}))
    manifest = ccfg.pop("manifest", None)
    corpus = _build(CorpusConfig, "corpus settings", counts=_counts(ccfg.get("counts"), 1000),
                    size=int(ccfg.get("size", 32)), base_seed=int(ccfg.get("base_seed", 0)),
                    intensity_range=tuple(ccfg.get("intensity_range", (0.5, 1.0))))
    mcfg = dict(cfg.get("model", {}))
    if "expert_widths" in mcfg:
        mcfg["expert_widths"] = tuple(mcfg["expert_widths"])
    model = _build(ToyModelConfig, "model settings", **mcfg)
    keys = ("mode", "iterations", "learning_rate", "batch_per_type", "window_size", "tau", "eval_interval",
            "holdout_per_type", "float32")
    tcfg = _build(TrainConfig, "training settings", corpus=corpus, model=model, seed=seed,
                  **{k: cfg[k] for k in keys if k in cfg})
    if manifest is not None and not Path(manifest).is_file():
        raise ConfigError(f"corpus manifest not found: {manifest}")

    def run(out: Path):
        data = load_corpus(manifest) if manifest else None
        trained = train_toy(tcfg, corpus=data)
        (out / "log.csv").write_text(trained.to_csv())
        with open(out / "weights.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            k = len(trained.weights[0][0]) if trained.weights else 0
            w.writerow(["iter"] + [f"omega_{i}" for i in range(k)] + ["af"])
            for it, (omega, af) in enumerate(trained.weights, 1):
                w.writerow([it] + [repr(x) for x in omega] + [repr(af)])
        save_checkpoint(trained.model, out / "checkpoint.bin")
        params = " ".join(f"{k}={v}" for k, v in trained.params.items())
        print(f"trained: {params}; worst-type held-out L1 {trained.worst_type_loss():.5f}")
        return 0

    return run


def read_trace(path) -> list[tuple[int, int, float]]:
    """Rows of ``step,type_id,raw_loss`` (header optional)."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or (lineno == 1 and row[0].strip() == "step"):
                continue
            if len(row) != 3:
                raise ConfigError(f"{path}:{lineno}: expected step,type_id,raw_loss")
            try:
                step, t, loss = int(row[0]), int(row[1]), float(row[2])
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
            if t < 0 or not (math.isfinite(loss) and loss > 0):
                raise ConfigError(f"{path}:{lineno}: type ids must be >= 0 and losses finite and positive")
            rows.append((step, t, loss))
    if not rows:
        raise ConfigError(f"{path}: empty trace")
    return rows


def replay_trace(rows, num_types=None, **scheduler_kwargs) -> list[tuple[int, tuple[float, ...], float]]:
    """Feed a trace through a scheduler; returns ``(step, omega, af)`` per distinct step."""
    from rainmix.reweight import ReweightScheduler

    k = num_types or max(t for _, t, _ in rows) + 1
    by_step: dict[int, dict[int, float]] = defaultdict(dict)
    for step, t, loss in rows:
        if t in by_step[step]:
            raise ValueError(f"duplicate loss for type {t} at step {step}")
        by_step[step][t] = loss
    sched = ReweightScheduler(k, **scheduler_kwargs)
    out = []
    for step in sorted(by_step):
        wv = sched.step(by_step[step])
        out.append((step, wv.weights, 1.0 if wv.af is None else wv.af))
    return out


def plan_replay(cfg, args):
    from rainmix.reweight import MODES

    trace = args.trace or cfg.get("trace")
    if trace is None:
        raise ConfigError("replay needs a trace file")
    if not Path(trace).is_file():
        raise ConfigError(f"trace not found: {trace}")
    rows = read_trace(trace)
    kwargs = {k: cfg[k] for k in ("window_size", "tau", "warmup_min_points") if k in cfg}
    mode = str(cfg.get("mode", "reweighted")).lower()
    if mode not in MODES:
        raise ConfigError(f"unknown weighting mode {mode!r}")
    num_types = cfg.get("num_types")
    if num_types is not None and max(t for _, t, _ in rows) >= num_types:
        raise ConfigError("trace contains type ids >= num_types")

    def run(out: Path):
        result = replay_trace(rows, num_types, mode=mode, **kwargs)
        k = len(result[0][1])
        with open(out / "log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step"] + [f"omega_{i}" for i in range(k)] + ["af"])
            for step, omega, af in result:
                w.writerow([step] + [repr(x) for x in omega] + [repr(af)])
        print(f"replayed {len(result)} steps over {k} types")
        return 0

    return run


def plan_eval(cfg, args):
    pred = Path(args.pred_dir or cfg.get("pred_dir", ""))
    gt = Path(args.gt_dir or cfg.get("gt_dir", ""))
    for d in (pred, gt):
        if not d.is_dir():
            raise ConfigError(f"not a directory: {d}")
    names = sorted(p.name for p in gt.glob("*.png"))
    missing = [n for n in names if not (pred / n).is_file()]
    if not names:
        raise ConfigError(f"no PNG files in {gt}")
    if missing:
        raise ConfigError(f"{len(missing)} predictions missing, e.g. {missing[0]}")

    def run(out: Path):
        from rainmix.imaging import ImageBuffer, psnr, ssim

        rows = []
        for n in names:
            a, b = ImageBuffer.load(pred / n), ImageBuffer.load(gt / n)
            rows.append((n, psnr(a, b), ssim(a, b)))
        finite = [r[1] for r in rows if math.isfinite(r[1])]
        mean_psnr = float(np.mean(finite)) if len(finite) == len(rows) else math.inf
        mean_ssim = float(np.mean([r[2] for r in rows]))
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image", "psnr", "ssim"])
            for r in rows:
                w.writerow([r[0], repr(r[1]), repr(r[2])])
            w.writerow(["mean", repr(mean_psnr), repr(mean_ssim)])
        print(f"{len(rows)} images: mean PSNR {mean_psnr:.3f} dB, mean SSIM {mean_ssim:.4f}")
        return 0

    return run


def plan_report(cfg, args):
    logs = list(args.logs or cfg.get("logs", []))
    if not logs:
        raise ConfigError("report needs at least one log file")
    for p in logs:
        if not Path(p).is_file():
            raise ConfigError(f"log not found: {p}")

    def run(out: Path):
        summary, curves = [], []
        for p in logs:
            with open(p, newline="") as fh:
                rows = list(csv.DictReader(fh))
            if not rows:
                continue
            if "type_id" in rows[0]:
                by_type = defaultdict(list)
                for r in rows:
                    by_type[int(r["type_id"])].append(r)
                    curves.append([p, r["iter"], r["type_id"], r["loss"], r["psnr"], r["omega"], r["af"]])
                for t, rs in sorted(by_type.items()):
                    losses = [float(r["loss"]) for r in rs]
                    summary.append([p, t, repr(losses[-1]), rs[-1]["psnr"], repr(min(losses)),
                                    repr(float(np.mean([float(r["omega"]) for r in rs])))])
            else:
                omegas = [k for k in rows[0] if k.startswith("omega_")]
                for k in omegas:
                    vals = [float(r[k]) for r in rows]
                    summary.append([p, int(k.split("_")[1]), "", "", "", repr(float(np.mean(vals)))])
                for r in rows:
                    for k in omegas:
                        curves.append([p, r["step"], k.split("_")[1], "", "", r[k], r["af"]])
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "type_id", "final_loss", "final_psnr", "best_loss", "mean_omega"])
            w.writerows(summary)
        with open(out / "curves.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "iter", "type_id", "loss", "psnr", "omega", "af"])
            w.writerows(curves)
        worst = defaultdict(float)
        for row in summary:
            if row[2]:
                worst[row[0]] = max(worst[row[0]], float(row[2]))
        for src, v in worst.items():
            print(f"{src}: worst-type final loss {v:.5f}")
        print(f"wrote summary.csv ({len(summary)} rows) and curves.csv ({len(curves)} rows)")
        return 0

    return run


PLANNERS = {
    "synth": plan_synth, "distill": plan_distill, "train": plan_train,
    "replay": plan_replay, "eval": plan_eval, "report": plan_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="YAML config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="top-level seed (u64)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--mock-vlm", dest="mock_vlm", default=argparse.SUPPRESS,
                        help="use offline judges: accept, reject, digest, ssim:<theta> (or 3 comma-separated)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="rainmix", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a paired synthetic rain corpus")
    sub.add_parser("distill", parents=[common], help="retrieve references and judge candidates into a pyramid")
    sub.add_parser("train", parents=[common], help="train the toy mixture-of-experts network")
    p = sub.add_parser("replay", parents=[common], help="run the loss reweighting scheduler over a loss trace")
    p.add_argument("trace", nargs="?", help="CSV with step,type_id,raw_loss")
    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of predicted PNGs against ground truth")
    p.add_argument("pred_dir", nargs="?")
    p.add_argument("gt_dir", nargs="?")
    p = sub.add_parser("report", parents=[common], help="summarize training or replay logs")
    p.add_argument("logs", nargs="*")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    for name, default in (("config", None), ("seed", None), ("out", "."), ("mock_vlm", None), ("verbose", False),
                          ("trace", None), ("pred_dir", None), ("gt_dir", None), ("logs", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 1
    try:
        cfg, text = load_config(args.config, args.command)
        run = PLANNERS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    effective = dict(cfg, command=args.command)
    if args.seed is not None:
        effective["seed"] = args.seed
    try:
        _write_echo(out, text, effective)
        return run(out)
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"error: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
