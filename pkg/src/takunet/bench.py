"""Batch-1 latency benchmarking and the activation microbenchmark."""

from __future__ import annotations

import platform
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_limits

from . import ops

MIN_TIMED_ITERS = 30


def device_label() -> str:
    return f"cpu:{platform.machine() or 'unknown'}:1-thread"


@dataclass
class LatencyReport:
    device: str
    warmup_iters: int
    timed_iters: int
    samples_ms: List[float]
    batch: int
    input: Tuple[int, int]

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.samples_ms))

    @property
    def median_ms(self) -> float:
        return float(np.median(self.samples_ms))

    @property
    def p95_ms(self) -> float:
        return float(np.percentile(self.samples_ms, 95))

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms

    def as_dict(self) -> dict:
        return {
            "device": self.device,
            "batch": self.batch,
            "input": list(self.input),
            "mean_ms": self.mean_ms,
            "median_ms": self.median_ms,
            "p95_ms": self.p95_ms,
            "fps": self.fps,
        }


def time_callable(fn: Callable[[], object], warmup: int, iters: int) -> List[float]:
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        fn()
        out.append((time.perf_counter_ns() - t0) / 1e6)
    return out


def bench_model(model, input_size: Optional[Tuple[int, int]] = None, warmup: int = 10, iters: int = 100,
                seed: int = 0) -> LatencyReport:
    """Single-threaded eval-mode forward at batch 1; warmup runs are discarded."""
    if iters < MIN_TIMED_ITERS:
        raise ValueError(f"iters must be >= {MIN_TIMED_ITERS}, got {iters}")
    hw = tuple(input_size) if input_size is not None else model.cfg.input_size
    x = np.random.default_rng(seed).random((1, 3) + hw).astype(model.precision.dtype)
    with threadpool_limits(limits=1):
        samples = time_callable(lambda: model.forward(x, train=False), warmup, iters)
    return LatencyReport(device_label(), warmup, iters, samples, 1, hw)


# -- activation microbenchmark ----------------------------------------------------

ACTIVATIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "ReLU": ops.relu,
    "ReLU6": ops.relu6,
    "LeakyReLU": ops.leaky_relu,
    "ELU": ops.elu,
    "CELU": ops.celu,
    "GELU": ops.gelu,
}


@dataclass
class ActivationTiming:
    name: str
    total_s: float
    iters: int


def check_activations_at_zero(shape=(4, 4)) -> None:
    z = np.zeros(shape, dtype=np.float32)
    for name, fn in ACTIVATIONS.items():
        y = fn(z)
        if y.shape != z.shape or np.any(y != 0):
            raise AssertionError(f"{name}(0) != 0")


def bench_activations(shape: Sequence[int] = (10000, 100), iters: int = 100, seed: int = 0,
                      gelu_approximate: str = "tanh") -> List[ActivationTiming]:
    """Total wall time of ``iters`` calls per activation, sorted fastest first.

    Activations run interleaved (one call of each per round) so slow drift in
    machine load affects every entry alike.
    """
    check_activations_at_zero()
    x = np.random.default_rng(seed).standard_normal(tuple(shape)).astype(np.float32)
    fns = dict(ACTIVATIONS)
    fns["GELU"] = lambda v: ops.gelu(v, approximate=gelu_approximate)
    totals = {name: 0 for name in fns}
    with threadpool_limits(limits=1):
        for fn in fns.values():
            fn(x)
        for _ in range(iters):
            for name, fn in fns.items():
                t0 = time.perf_counter_ns()
                fn(x)
                totals[name] += time.perf_counter_ns() - t0
    rows = [ActivationTiming(name, totals[name] / 1e9, iters) for name in fns]
    return sorted(rows, key=lambda r: r.total_s)


def format_activation_table(rows: Sequence[ActivationTiming]) -> str:
    lines = [f"{'activation':<10} {'total_s':>10} {'per_call_ms':>12}"]
    for r in rows:
        lines.append(f"{r.name:<10} {r.total_s:>10.4f} {1000 * r.total_s / r.iters:>12.3f}")
    return "\n".join(lines)
