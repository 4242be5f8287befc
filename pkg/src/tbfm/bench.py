"""Single-prediction latency benchmark harness.

Measures the per-call wall time of the allocation-free inference path
(z-scoring included), feeding each call a distinct pre-generated runway so
data already resides in main memory and no file or RNG work lands inside
the timed region.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_N_RUNS = 10000
DEFAULT_WARMUP = 1000


@dataclass
class LatencyReport:
    mean_ms: float
    std_ms: float
    median_ms: float
    n_runs: int
    warmup: int
    horizon: int
    n_channels: int
    model_kind: str
    hardware: str
    noisy: bool  # std/mean > 0.5: timings look contaminated, flag but don't fail

    def to_json_dict(self) -> dict:
        return {
            "mean_ms": self.mean_ms,
            "std_ms": self.std_ms,
            "median_ms": self.median_ms,
            "n_runs": self.n_runs,
            "warmup": self.warmup,
            "horizon": self.horizon,
            "n_channels": self.n_channels,
            "model_kind": self.model_kind,
            "hardware": self.hardware,
            "noisy": self.noisy,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")


def hardware_descriptor() -> str:
    """CPU model, core count, and numpy build, for embedding in reports."""
    cpu = "unknown cpu"
    try:
        for line in Path("/proc/cpuinfo").read_text().splitlines():
            if line.lower().startswith("model name"):
                cpu = line.split(":", 1)[1].strip()
                break
    except OSError:
        pass
    import os

    cores = os.cpu_count() or 1
    blas = "unknown blas"
    try:
        cfg = np.show_config(mode="dicts")
        blas = cfg["Build Dependencies"]["blas"]["name"]
    except Exception:
        pass
    return f"{cpu} | {cores} logical cores | numpy {np.__version__} ({blas})"


def latency_bench(
    model,
    descriptor_id: int,
    n: int = DEFAULT_N_RUNS,
    warmup: int = DEFAULT_WARMUP,
    seed: int = 0,
) -> LatencyReport:
    """Mean/std/median single-prediction latency over n timed calls.

    The model must expose make_workspace() and
    single_forward(runway, descriptor_id, workspace); all three model kinds
    (uncompiled, compiled, state-space baseline) do.
    """
    rng = np.random.default_rng(seed)
    runways = rng.standard_normal((n, model.n_channels, model.runway_len)).astype(np.float32)
    ws = model.make_workspace()
    for i in range(warmup):
        model.single_forward(runways[i % n], descriptor_id, ws)
    samples_ns = np.empty(n, dtype=np.int64)
    for i in range(n):
        t0 = time.perf_counter_ns()
        model.single_forward(runways[i], descriptor_id, ws)
        samples_ns[i] = time.perf_counter_ns() - t0
    ms = samples_ns.astype(np.float64) * 1e-6
    mean = float(ms.mean())
    std = float(ms.std())
    return LatencyReport(
        mean_ms=mean,
        std_ms=std,
        median_ms=float(np.median(ms)),
        n_runs=n,
        warmup=warmup,
        horizon=model.horizon,
        n_channels=model.n_channels,
        model_kind=type(model).__name__,
        hardware=hardware_descriptor(),
        noisy=bool(std > 0.5 * mean),
    )
