"""``convcrf`` command-line entry point.

    convcrf synthesize|infer|train|bench|eval --config PATH [--jobs N] [--seed S] [--out DIR]

Every command writes the fully resolved configuration to ``config.json`` in
its output directory. ``CONVCRF_THREADS`` overrides ``--jobs``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import bench, metrics
from .config import RunConfig, dump_config, load_config
from .errors import ConfigurationError, ConvCrfError, TrainingDivergedError
from .meanfield import argmax_labels, inference
from .params import load_checkpoint, save_checkpoint
from .synthetic import load_dataset, read_label_png, synthesize_dataset, write_label_png
from .training import fit

log = logging.getLogger("convcrf")


def _out_dir(cfg, args, fallback=None):
    out = args.out or cfg.paths.output or fallback
    if out is None:
        raise ConfigurationError("no output directory: pass --out or set paths.output")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg, out):
    (out / "config.json").write_text(json.dumps(dump_config(cfg), indent=2, sort_keys=True))


def _require_dataset(cfg):
    if not cfg.paths.dataset:
        raise ConfigurationError("paths.dataset is required for this command")
    return load_dataset(cfg.paths.dataset)


def cmd_synthesize(cfg, args):
    out = _out_dir(cfg, args, cfg.paths.dataset)
    s = cfg.synthesize
    manifest = synthesize_dataset(out, s.count, s.height, s.width, cfg.noise.build(), s.confidence)
    _echo_config(cfg, out)
    log.info("wrote %d samples to %s (flip rate %.4f)", s.count, out, manifest["measured_flip_rate"])
    return 0


def _params_for(cfg, manifest, checkpoint=None):
    if checkpoint:
        return load_checkpoint(checkpoint)[0]
    return cfg.params.build(
        manifest["num_classes"], manifest.get("height"), manifest.get("width"), cfg.crf.compatibility
    )


def cmd_infer(cfg, args):
    manifest, items = _require_dataset(cfg)
    out = _out_dir(cfg, args)
    (out / "predictions").mkdir(exist_ok=True)
    _echo_config(cfg, out)
    crf_config = cfg.crf.build()
    params = _params_for(cfg, manifest, args.checkpoint)
    c = manifest["num_classes"]

    def work(item):
        stem, image, labels, unary = item
        start = time.perf_counter()
        Q = inference(unary, image, params, crf_config)
        elapsed = (time.perf_counter() - start) * 1e3
        pred = argmax_labels(Q)
        write_label_png(out / "predictions" / f"{stem}.png", pred)
        return stem, pred, argmax_labels(unary), labels, elapsed

    results, failures = _run_jobs(work, items, args.jobs)
    cm_crf, cm_unary = metrics.confusion_matrix(c), metrics.confusion_matrix(c)
    with open(out / "timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "ms"])
        for stem, pred, unary_pred, labels, elapsed in results:
            writer.writerow([stem, f"{elapsed:.4f}"])
            if labels is not None:
                cm_crf = metrics.accumulate(cm_crf, pred, labels)
                cm_unary = metrics.accumulate(cm_unary, unary_pred, labels)
    if cm_crf.sum():
        (out / "metrics.json").write_text(json.dumps(metrics.report(cm_crf), indent=2))
        (out / "unary_metrics.json").write_text(json.dumps(metrics.report(cm_unary), indent=2))
    return _report_failures(failures)


def _run_jobs(work, items, jobs):
    """Apply ``work`` to every item; results keep input order, failures are collected."""

    def guarded(item):
        try:
            return work(item), None
        except (ConvCrfError, ValueError, OSError) as exc:
            return None, (item[0], str(exc))

    with ThreadPoolExecutor(max_workers=max(jobs, 1)) as pool:
        outcomes = list(pool.map(guarded, items))
    results = [r for r, err in outcomes if err is None]
    failures = [err for _, err in outcomes if err is not None]
    return results, failures


def _report_failures(failures):
    for stem, message in failures:
        print(f"convcrf: {stem}: {message}", file=sys.stderr)
    return 1 if failures else 0


def cmd_train(cfg, args):
    manifest, items = _require_dataset(cfg)
    dataset = [(image, unary, labels) for _, image, labels, unary in items if labels is not None]
    if not dataset:
        raise ConfigurationError("training needs a dataset with labels/")
    out = _out_dir(cfg, args)
    _echo_config(cfg, out)
    crf_config = cfg.crf.build()
    tc = cfg.train.build()
    optimizer = tc.make_optimizer()
    start_step = 0
    if cfg.train.resume_from:
        params, extra, ckpt = load_checkpoint(cfg.train.resume_from)
        optimizer.load_state_dict(extra)
        start_step = int(ckpt["metadata"].get("steps_done", 0))
    else:
        params = _params_for(cfg, manifest)

    try:
        params, losses = fit(params, dataset, tc, crf_config, optimizer=optimizer, start_step=start_step)
    except TrainingDivergedError as exc:
        (out / "diverged.json").write_text(json.dumps(exc.state, indent=2, default=float))
        raise
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([start_step + i, repr(loss)])
    metadata = {"steps_done": start_step + len(losses), "last_loss": losses[-1] if losses else None}
    save_checkpoint(out / "checkpoint", params, dump_config(cfg), optimizer.state_dict(), metadata)
    log.info("trained %d steps; checkpoint in %s", len(losses), out / "checkpoint")
    return 0


def cmd_bench(cfg, args):
    out = _out_dir(cfg, args)
    _echo_config(cfg, out)
    b = cfg.bench
    rows = bench.run_benchmark(b.sizes, b.filter_sizes, b.num_classes, b.repetitions, b.warmup, b.iterations)
    bench.write_csv(out / "bench.csv", rows)
    return 0


def cmd_eval(cfg, args):
    manifest, items = _require_dataset(cfg)
    if not cfg.paths.predictions:
        raise ConfigurationError("paths.predictions is required for eval")
    out = _out_dir(cfg, args)
    _echo_config(cfg, out)
    cm = metrics.confusion_matrix(manifest["num_classes"])
    failures = []
    for stem, _, labels, _ in items:
        pred_path = Path(cfg.paths.predictions) / f"{stem}.png"
        if labels is None or not pred_path.exists():
            failures.append((stem, "missing labels or prediction"))
            continue
        cm = metrics.accumulate(cm, read_label_png(pred_path), labels)
    (out / "metrics.json").write_text(json.dumps(metrics.report(cm), indent=2))
    return _report_failures(failures)


COMMANDS = {
    "synthesize": cmd_synthesize,
    "infer": cmd_infer,
    "train": cmd_train,
    "bench": cmd_bench,
    "eval": cmd_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="convcrf", description="Convolutional CRF toolkit")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--jobs", type=int, default=1, help="parallel images (infer)")
    parser.add_argument("--seed", type=int, help="override noise and training seeds")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--checkpoint", help="checkpoint directory to load parameters from (infer)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _resolve_jobs(jobs, env_value):
    if env_value:
        try:
            jobs = int(env_value)
        except ValueError:
            raise ConfigurationError(f"CONVCRF_THREADS must be an integer, got {env_value!r}") from None
    if jobs < 1:
        raise ConfigurationError(f"job count must be >= 1, got {jobs}")
    return jobs


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        args.jobs = _resolve_jobs(args.jobs, os.environ.get("CONVCRF_THREADS"))
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.noise.seed = args.seed
            cfg.train.seed = args.seed
        return COMMANDS[args.command](cfg, args)
    except (ConvCrfError, OSError) as exc:
        print(f"convcrf {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
