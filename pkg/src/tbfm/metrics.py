"""Forecast accuracy metrics and the sample-efficiency sweep.

All R-squared values are pooled jointly over trials, channels, and time
(one number per evaluation set), with per-channel values available for
diagnostics.  The state-dependent variant averages within equal-count bins
of the initial state before comparing, so it rewards models that track
state-conditional structure rather than just the grand mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sessiondata import TrialSet


def r2(pred: np.ndarray, actual: np.ndarray) -> float:
    """Coefficient of determination pooled over all axes."""
    pred = np.asarray(pred, np.float64)
    actual = np.asarray(actual, np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("actual has zero variance; R^2 undefined")
    ss_res = float(np.sum((pred - actual) ** 2))
    return 1.0 - ss_res / ss_tot


def per_channel_r2(pred: np.ndarray, actual: np.ndarray) -> np.ndarray:
    """R^2 per channel for (trials, channels, time) arrays."""
    pred = np.asarray(pred, np.float64)
    actual = np.asarray(actual, np.float64)
    mean = actual.mean(axis=(0, 2), keepdims=True)
    ss_tot = np.sum((actual - mean) ** 2, axis=(0, 2))
    ss_res = np.sum((pred - actual) ** 2, axis=(0, 2))
    if np.any(ss_tot == 0):
        raise ValueError("a channel has zero variance; R^2 undefined")
    return 1.0 - ss_res / ss_tot


def prefix_r2_curve(pred: np.ndarray, actual: np.ndarray) -> np.ndarray:
    """R^2 of prediction prefixes of length h, for h = 1..horizon.

    Uses cumulative sums over the time axis so the whole curve costs one
    pass: SS_tot for each prefix is computed against that prefix's own
    pooled mean.
    """
    pred = np.asarray(pred, np.float64)
    actual = np.asarray(actual, np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {actual.shape}")
    n, c, horizon = actual.shape
    res2 = np.cumsum(((pred - actual) ** 2).sum(axis=(0, 1)))
    s1 = np.cumsum(actual.sum(axis=(0, 1)))
    s2 = np.cumsum((actual**2).sum(axis=(0, 1)))
    count = n * c * np.arange(1, horizon + 1, dtype=np.float64)
    ss_tot = s2 - s1 * s1 / count
    if np.any(ss_tot == 0):
        raise ValueError("zero-variance prefix; R^2 undefined")
    return 1.0 - res2 / ss_tot


def horizon_r2_curve(model, test: TrialSet) -> np.ndarray:
    return prefix_r2_curve(model.predict(test), test.horizons())


def mean_vs_mean_r2(pred: np.ndarray, actual: np.ndarray) -> float:
    """R^2 between trial-averaged predictions and trial-averaged actuals."""
    pred = np.asarray(pred, np.float64)
    actual = np.asarray(actual, np.float64)
    if pred.shape[0] < 2:
        raise ValueError("need at least two trials to average")
    return r2(pred.mean(axis=0), actual.mean(axis=0))


def state_dependent_r2(
    pred: np.ndarray,
    actual: np.ndarray,
    n_bins: int = 9,
    min_per_bin: int = 50,
) -> float:
    """R^2 between bin-averaged predictions and bin-averaged responses.

    Per channel, trials are sorted by the actual value at the first horizon
    sample (the initial state) and split into n_bins equal-count bins
    (populations differ by at most one); predictions and actuals are
    averaged within each bin and R^2 is pooled over channels, bins, time.
    """
    pred = np.asarray(pred, np.float64)
    actual = np.asarray(actual, np.float64)
    n, c, horizon = actual.shape
    if n // n_bins < min_per_bin:
        raise ValueError(
            f"{n} trials give fewer than {min_per_bin} per bin across {n_bins} bins"
        )
    binned_pred = np.empty((c, n_bins, horizon))
    binned_act = np.empty((c, n_bins, horizon))
    for ch in range(c):
        order = np.argsort(actual[:, ch, 0], kind="stable")
        for b, idx in enumerate(np.array_split(order, n_bins)):
            binned_pred[ch, b] = pred[idx, ch].mean(axis=0)
            binned_act[ch, b] = actual[idx, ch].mean(axis=0)
    return r2(binned_pred, binned_act)


@dataclass
class R2Report:
    r2_full: float
    r2_40: float
    per_horizon: np.ndarray
    mean_vs_mean: float
    state_dependent: float | None
    per_channel: np.ndarray
    n_trials: int
    horizon: int

    def to_json_dict(self) -> dict:
        return {
            "r2_full": self.r2_full,
            "r2_40": self.r2_40,
            "per_horizon": [round(float(v), 9) for v in self.per_horizon],
            "mean_vs_mean": self.mean_vs_mean,
            "state_dependent": self.state_dependent,
            "per_channel": [round(float(v), 9) for v in self.per_channel],
            "n_trials": self.n_trials,
            "horizon": self.horizon,
        }


def evaluate_model(model, test: TrialSet, n_bins: int = 9, min_per_bin: int = 50) -> R2Report:
    pred = model.predict(test)
    actual = test.horizons()
    curve = prefix_r2_curve(pred, actual)
    horizon = actual.shape[2]
    enough = test.n_trials // n_bins >= min_per_bin
    return R2Report(
        r2_full=float(curve[-1]),
        r2_40=float(curve[min(40, horizon) - 1]),
        per_horizon=curve,
        mean_vs_mean=mean_vs_mean_r2(pred, actual),
        state_dependent=(
            state_dependent_r2(pred, actual, n_bins, min_per_bin) if enough else None
        ),
        per_channel=per_channel_r2(pred, actual),
        n_trials=test.n_trials,
        horizon=horizon,
    )


@dataclass
class SweepResult:
    sizes: list[int]
    r2s: list[float]
    recommended_size: int
    logs: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "r2s": [round(float(v), 9) for v in self.r2s],
            "recommended_size": self.recommended_size,
        }


def sample_efficiency_sweep(cfg, trainset: TrialSet, testset: TrialSet, sizes) -> SweepResult:
    """Train one model per training-set size; recommend the smallest size
    whose test R^2 lands within 1% of the sweep's maximum."""
    from .train import train  # local import: train depends on metrics for FSAM

    sizes = sorted(int(s) for s in sizes)
    if sizes[-1] > trainset.n_trials:
        raise ValueError(f"size {sizes[-1]} exceeds {trainset.n_trials} available trials")
    r2s = []
    logs = []
    for size in sizes:
        model, log = train(cfg, trainset.subset(np.arange(size)))
        r2s.append(r2(model.predict(testset), testset.horizons()))
        logs.append(log)
    best = max(r2s)
    cutoff = best - 0.01 * abs(best)
    recommended = next(s for s, v in zip(sizes, r2s) if v >= cutoff)
    return SweepResult(sizes=sizes, r2s=r2s, recommended_size=recommended, logs=logs)
