"""Wall-clock benchmark of full-resolution ConvCRF inference."""

from __future__ import annotations

import csv
import statistics
import time

import numpy as np

from .meanfield import ConvCrfConfig, run_crf
from .params import CrfParams
from .tensor import make_rng

COLUMNS = ("h", "w", "c", "k", "mean_ms", "std_ms", "iters", "median_ms")


def time_inference(h, w, c, k, repetitions=10, warmup=2, iterations=5, seed=0, params=None):
    """Return per-repetition wall times (ms) of one inference call at blur factor 1."""
    rng = make_rng(seed)
    unary = rng.normal(0.0, 1.0, size=(1, c, h, w)).astype(np.float32)
    image = rng.uniform(0.0, 255.0, size=(1, 3, h, w)).astype(np.float32)
    params = CrfParams() if params is None else params
    config = ConvCrfConfig(filter_size=k, iterations=iterations, blur_factor=1)
    for _ in range(warmup):
        run_crf(unary, image, params, config)
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        run_crf(unary, image, params, config)
        times.append((time.perf_counter() - start) * 1e3)
    return times


def run_benchmark(sizes, filter_sizes, num_classes=21, repetitions=10, warmup=2, iterations=5, seed=0):
    rows = []
    for h, w in sizes:
        for k in filter_sizes:
            times = time_inference(h, w, num_classes, k, repetitions, warmup, iterations, seed)
            rows.append(
                {
                    "h": h,
                    "w": w,
                    "c": num_classes,
                    "k": k,
                    "mean_ms": statistics.fmean(times),
                    "std_ms": statistics.stdev(times) if len(times) > 1 else 0.0,
                    "iters": len(times),
                    "median_ms": statistics.median(times),
                }
            )
    return rows


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ints = {"h", "w", "c", "k", "iters"}
    return [{key: int(v) if key in ints else float(v) for key, v in row.items()} for row in rows]
