"""Wall-clock inference timing, used only for relative ordering claims."""
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .backbone import REGISTRY, build_model
from .nn import make_rng
from .tensor import no_grad


@dataclass
class BenchStats:
    name: str
    width: int
    batch: int
    iters: int
    mean_ms: float
    median_ms: float
    std_ms: float

    def lines(self):
        p = f"{self.name}."
        return [f"{p}mean_ms_per_image={self.mean_ms:.4f}",
                f"{p}median_ms_per_image={self.median_ms:.4f}",
                f"{p}std_ms_per_image={self.std_ms:.4f}",
                f"{p}iters={self.iters}"]


def _check_counts(iters, warmup):
    if iters < 1:
        raise ValueError("iters must be at least 1")
    if warmup < 5:
        raise ValueError("at least 5 warm-up iterations are required")


def _time_once(model, x):
    t0 = time.perf_counter()
    model.logits(x, check=False)
    return time.perf_counter() - t0


def _stats(name, width, batch, times):
    per_image = [t * 1000.0 / batch for t in times]
    std = statistics.pstdev(per_image) if len(per_image) > 1 else 0.0
    return BenchStats(name, width, batch, len(per_image), statistics.fmean(per_image),
                      statistics.median(per_image), std)


def bench_model(model, width, iters=10, warmup=5, batch=4, height=32, seed=0, name=None):
    """Time ``iters`` batched forward passes after ``warmup`` untimed ones.

    Statistics are per image (batch time divided by ``batch``).
    """
    _check_counts(iters, warmup)
    model.eval()
    x = make_rng(seed).uniform(-1, 1, (batch, 3, height, width)).astype(np.float32)
    with no_grad():
        for _ in range(warmup):
            model.logits(x, check=False)
        times = [_time_once(model, x) for _ in range(iters)]
    return _stats(name or getattr(model.cfg, "name", "model"), width, batch, times)


def bench_variants(names=None, width=96, iters=10, warmup=5, batch=4, seed=0):
    """Benchmark several registry variants; returns stats sorted fastest first.

    Every model is warmed up first. The timed passes then run in rounds, one
    pass per model per round, with the starting model rotated each round, so
    slow drift in machine load is shared evenly between variants.
    """
    _check_counts(iters, warmup)
    names = list(names or REGISTRY)
    x = make_rng(seed).uniform(-1, 1, (batch, 3, 32, width)).astype(np.float32)
    models = []
    for n in names:
        m = build_model(n, seed=seed)
        m.eval()
        models.append(m)
    times = [[] for _ in names]
    with no_grad():
        for m in models:
            for _ in range(warmup):
                m.logits(x, check=False)
        for r in range(iters):
            for j in range(len(models)):
                k = (r + j) % len(models)
                times[k].append(_time_once(models[k], x))
    stats = [_stats(n, width, batch, t) for n, t in zip(names, times)]
    return sorted(stats, key=lambda s: s.median_ms)


def ordering(stats):
    return "<".join(s.name for s in sorted(stats, key=lambda s: s.median_ms))
