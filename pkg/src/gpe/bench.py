"""Wall-clock latency harness with a pinned BLAS/OpenMP thread count."""

from __future__ import annotations

import os
import platform
import time

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError

THREADS_ENV = "GPE_THREADS"


def resolve_threads(threads=None):
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            threads = int(env)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    threads = 1 if threads is None else int(threads)
    if threads < 1:
        raise ConfigError("thread count must be >= 1")
    return threads


def _cpu_model():
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def environment_fingerprint(threads):
    return {
        "cpu": _cpu_model(),
        "cpu_count": os.cpu_count(),
        "threads": threads,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
    }


def summarize(times_ms):
    t = np.asarray(times_ms, dtype=float)
    return {
        "mean": float(t.mean()),
        "p50": float(np.percentile(t, 50)),
        "p95": float(np.percentile(t, 95)),
        "min": float(t.min()),
        "iters": int(len(t)),
    }


def latency_bench(runner, warmup=3, iters=20, threads=None):
    """Per-call latency of ``runner()`` in milliseconds after ``warmup`` calls.

    ``GPE_THREADS`` overrides ``threads``. The result includes an
    ``environment`` entry describing the host.
    """
    if iters < 10:
        raise ConfigError("iters must be >= 10")
    n_threads = resolve_threads(threads)
    clock = time.perf_counter_ns
    times = np.empty(iters)
    with threadpool_limits(limits=n_threads):
        for _ in range(warmup):
            runner()
        for i in range(iters):
            t0 = clock()
            runner()
            times[i] = clock() - t0
    stats = summarize(times / 1e6)
    stats["environment"] = environment_fingerprint(n_threads)
    return stats


def throughput_ratio(fast, slow, warmup=2, iters=10, threads=None, rounds=3):
    """``median latency(slow) / median latency(fast)`` with interleaved rounds."""
    a, b = [], []
    for _ in range(rounds):
        a.append(latency_bench(fast, warmup, iters, threads)["p50"])
        b.append(latency_bench(slow, warmup, iters, threads)["p50"])
    return float(np.median(b) / np.median(a)), {"fast_ms": float(np.median(a)), "slow_ms": float(np.median(b))}
