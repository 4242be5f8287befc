"""Replay-based closed-loop controller simulations with ROC evaluation.

Two demos, both replayed against recorded (or synthetic) stimulated trials:

* Demo 1 — target-state triggering.  Resting values at the stimulation
  sample are binned into quartiles on each of two site channels (4 x 4 = 16
  joint targets).  The controller forecasts from the runway and stimulates
  when the forecast at the stimulation sample falls inside the trial's
  target inflated by a margin delta; sweeping delta traces an ROC curve
  against whether the actual trajectory entered the uninflated target.

* Demo 2 — trajectory shaping.  Each trial gets a reference trajectory (a
  random convex combination of test-set post-onset trajectories); the
  controller stimulates when the forecast's distance to the reference is
  under a threshold eps_p, and ground truth is whether the actual trajectory
  came within eps_s of the reference.

Decisions are monotone in their threshold by construction: each trial
reduces to a scalar score compared against the swept threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sessiondata import FIRST_PULSE_MS, TrialSet

_trapz = getattr(np, "trapezoid", None) or np.trapz

DEMO1_DELTAS = np.linspace(-200.0, 200.0, 401)  # includes 0
DEMO2_EPS = np.linspace(0.0, 30.0, 301)
DEFAULT_SITE_CHANNELS = (0, 1)
N_REFERENCE_SOURCES = 8


@dataclass
class RocCurve:
    points: np.ndarray  # (k, 3) rows of (threshold, fpr, tpr), threshold-sorted
    auc: float
    n_trials: int

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "fpr", "tpr"])
            for thr, fpr, tpr in self.points:
                writer.writerow([f"{thr:.9g}", f"{fpr:.9g}", f"{tpr:.9g}"])

    def summary_dict(self) -> dict:
        return {"auc": self.auc, "n_trials": self.n_trials, "n_thresholds": len(self.points)}


@dataclass
class DemoResult:
    roc: RocCurve
    thresholds: np.ndarray
    scores: np.ndarray  # (n,) per-trial decision score
    labels: np.ndarray  # (n,) bool ground truth
    decisions: np.ndarray  # (k, n) bool, stimulate decision per threshold/trial
    extra: dict = field(default_factory=dict)

    @property
    def stim_rate(self) -> np.ndarray:
        return self.decisions.mean(axis=1)


def roc_auc(points) -> float:
    """Trapezoidal AUC over FPR-sorted points with (0,0) and (1,1) appended."""
    pts = np.asarray([(p[-2], p[-1]) for p in points], dtype=np.float64)
    if pts.shape[0] < 2:
        raise ValueError("need at least two ROC points")
    pts = np.vstack([[0.0, 0.0], pts, [1.0, 1.0]])
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    # drop repeated points: the polyline is unchanged and the sum stays short
    # enough that degenerate (perfect/empty) curves come out exact
    keep = np.concatenate([[True], np.any(np.diff(pts, axis=0) != 0, axis=1)])
    pts = pts[keep]
    return float(_trapz(pts[:, 1], pts[:, 0]))


def _roc_from_scores(
    scores: np.ndarray, labels: np.ndarray, thresholds: np.ndarray, strict: bool
) -> tuple[RocCurve, np.ndarray]:
    """ROC for the decision rule score < threshold (strict) or score <= threshold."""
    labels = np.asarray(labels, bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("labels are single-class; ROC is undefined")
    thr = np.asarray(thresholds, np.float64)
    if strict:
        decisions = scores[None, :] < thr[:, None]
    else:
        decisions = scores[None, :] <= thr[:, None]
    tpr = (decisions & labels[None, :]).sum(axis=1) / n_pos
    fpr = (decisions & ~labels[None, :]).sum(axis=1) / n_neg
    points = np.column_stack([thr, fpr, tpr])
    return RocCurve(points=points, auc=roc_auc(points), n_trials=labels.size), decisions


# -- Demo 1: target-state triggered stimulation -------------------------------


@dataclass
class Demo1Task:
    channels: tuple[int, int]
    lower: np.ndarray  # (n_trials, 2) target lower bounds (may be -inf)
    upper: np.ndarray  # (n_trials, 2) target upper bounds (may be +inf)
    should_stimulate: np.ndarray  # (n_trials,) bool assignment labels
    quartile_edges: np.ndarray  # (2, 3) interior quartile boundaries per channel


def _bin_edges(values: np.ndarray) -> np.ndarray:
    return np.quantile(values.astype(np.float64), [0.25, 0.5, 0.75])


def _bin_of(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.searchsorted(edges, values, side="left")


def _bin_bounds(edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lower = np.concatenate([[-np.inf], edges])
    upper = np.concatenate([edges, [np.inf]])
    return lower, upper


def make_targets(
    rest: TrialSet,
    test: TrialSet,
    channels: tuple[int, int] = DEFAULT_SITE_CHANNELS,
    seed: int = 0,
    stim_sample: int = FIRST_PULSE_MS,
) -> Demo1Task:
    """Assign each test trial one of the 16 joint quartile targets.

    Half the trials (random, seeded) are "should stimulate" and get the
    joint quartile their own trajectory occupies at the stimulation sample;
    the rest get a different joint target drawn uniformly from the other 15.
    """
    if rest.n_trials < 8:
        raise ValueError("too few resting trials to estimate quartiles")
    rng = np.random.default_rng(seed)
    edges = np.stack([_bin_edges(rest.values[:, ch, stim_sample]) for ch in channels])
    actual_bin = np.stack(
        [_bin_of(test.values[:, ch, stim_sample].astype(np.float64), edges[i]) for i, ch in enumerate(channels)],
        axis=1,
    )  # (n, 2) in 0..3
    n = test.n_trials
    should = rng.random(n) < 0.5
    target_bin = actual_bin.copy()
    n_other = int((~should).sum())
    actual_joint = actual_bin[~should, 0] * 4 + actual_bin[~should, 1]
    draw = rng.integers(0, 15, size=n_other)
    other_joint = draw + (draw >= actual_joint)  # uniform over the 15 others
    target_bin[~should, 0] = other_joint // 4
    target_bin[~should, 1] = other_joint % 4
    lower = np.empty((n, 2))
    upper = np.empty((n, 2))
    for i in range(2):
        lo, hi = _bin_bounds(edges[i])
        lower[:, i] = lo[target_bin[:, i]]
        upper[:, i] = hi[target_bin[:, i]]
    return Demo1Task(
        channels=tuple(channels),
        lower=lower,
        upper=upper,
        should_stimulate=should,
        quartile_edges=edges,
    )


def demo1_scores(values_at_stim: np.ndarray, task: Demo1Task) -> np.ndarray:
    """Margin score per trial: stimulate at margin delta iff score <= delta.

    score = max over the two channels of max(lower - v, v - upper); it is
    <= 0 exactly when the value sits inside the closed uninflated target on
    both channels.
    """
    v = np.asarray(values_at_stim, np.float64)
    margin = np.maximum(task.lower - v, v - task.upper)
    return margin.max(axis=1)


def demo1_decide(values_at_stim: np.ndarray, task: Demo1Task, delta: float) -> np.ndarray:
    return demo1_scores(values_at_stim, task) <= delta


def demo1_simulate(
    model,
    test: TrialSet,
    task: Demo1Task,
    deltas: np.ndarray | None = None,
    mode: str = "model",
    seed: int = 0,
) -> DemoResult:
    """Sweep the margin delta and score decisions against replayed truth.

    Ground truth: the actual trajectory's value at the stimulation sample
    lies inside the closed, uninflated target on both channels.
    """
    if deltas is None:
        deltas = DEMO1_DELTAS
    h_idx = FIRST_PULSE_MS - test.runway_len
    actual = test.values[:, list(task.channels), FIRST_PULSE_MS].astype(np.float64)
    labels = demo1_scores(actual, task) <= 0.0
    if mode == "model":
        pred = model.predict(test)[:, list(task.channels), h_idx].astype(np.float64)
        scores = demo1_scores(pred, task)
    elif mode == "oracle":
        scores = demo1_scores(actual, task)
    elif mode == "coinflip":
        # separate stream: task construction may share the caller's seed, and
        # reusing it verbatim would replay the should-stimulate draws as scores
        rng = np.random.default_rng([seed, 1])
        scores = rng.uniform(deltas.min(), deltas.max(), test.n_trials)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    roc, decisions = _roc_from_scores(scores, labels, deltas, strict=False)
    return DemoResult(
        roc=roc,
        thresholds=np.asarray(deltas, np.float64),
        scores=scores,
        labels=labels,
        decisions=decisions,
        extra={"mode": mode, "channels": list(task.channels)},
    )


# -- Demo 2: trajectory shaping ------------------------------------------------


@dataclass
class ReferenceSet:
    channels: tuple[int, int]
    refs: np.ndarray  # (n_trials, 2, post_len) reference trajectories
    source_idx: np.ndarray  # (n_trials, n_sources) trial indices averaged
    weights: np.ndarray  # (n_trials, n_sources) convex weights
    start_sample: int


def reference_from_weights(
    test: TrialSet,
    weights: np.ndarray,
    channels: tuple[int, int] = DEFAULT_SITE_CHANNELS,
    start_sample: int = FIRST_PULSE_MS,
) -> np.ndarray:
    """Convex combination of all test trajectories (weights over trials)."""
    w = np.asarray(weights, np.float64)
    traj = test.values[:, list(channels), start_sample:].astype(np.float64)
    return np.einsum("n,nct->ct", w, traj)


def make_references(
    test: TrialSet,
    channels: tuple[int, int] = DEFAULT_SITE_CHANNELS,
    seed: int = 0,
    n_sources: int = N_REFERENCE_SOURCES,
    start_sample: int = FIRST_PULSE_MS,
) -> ReferenceSet:
    """Per-trial random convex combinations of post-onset test trajectories."""
    rng = np.random.default_rng(seed)
    n = test.n_trials
    traj = test.values[:, list(channels), start_sample:].astype(np.float64)
    source_idx = np.empty((n, n_sources), np.int64)
    weights = np.empty((n, n_sources), np.float64)
    refs = np.empty((n,) + traj.shape[1:], np.float64)
    for i in range(n):
        source_idx[i] = rng.choice(n, size=n_sources, replace=False)
        weights[i] = rng.dirichlet(np.ones(n_sources))
        refs[i] = np.einsum("s,sct->ct", weights[i], traj[source_idx[i]])
    return ReferenceSet(
        channels=tuple(channels),
        refs=refs,
        source_idx=source_idx,
        weights=weights,
        start_sample=start_sample,
    )


def _ref_distances(trajs: np.ndarray, refs: ReferenceSet) -> np.ndarray:
    """Sum over the two site channels of Euclidean distance to the reference."""
    diff = np.asarray(trajs, np.float64) - refs.refs
    return np.sqrt(np.einsum("nct,nct->nc", diff, diff)).sum(axis=1)


def demo2_decide(forecast_traj: np.ndarray, ref: np.ndarray, eps_p: float) -> bool:
    diff = np.asarray(forecast_traj, np.float64) - np.asarray(ref, np.float64)
    score = float(np.sqrt(np.einsum("ct,ct->c", diff, diff)).sum())
    return score < eps_p


def demo2_simulate(
    model,
    test: TrialSet,
    refs: ReferenceSet,
    eps_grid: np.ndarray | None = None,
    eps_s: float | None = None,
    mode: str = "model",
    seed: int = 0,
) -> DemoResult:
    """Sweep eps_p; ground truth is actual-trajectory distance under eps_s.

    eps_s defaults to the median actual-to-reference distance, making
    positives about half the trials.  The sweep grid always includes eps_s.
    """
    start_h = refs.start_sample - test.runway_len
    actual = test.values[:, list(refs.channels), refs.start_sample :].astype(np.float64)
    actual_scores = _ref_distances(actual, refs)
    if eps_s is None:
        eps_s = float(np.median(actual_scores))
    labels = actual_scores < eps_s
    if mode == "model":
        pred = model.predict(test)[:, list(refs.channels), start_h:].astype(np.float64)
        scores = _ref_distances(pred, refs)
    elif mode == "oracle":
        scores = actual_scores
    elif mode == "coinflip":
        # same stream separation as demo 1: never alias the reference draws
        lo, hi = float(actual_scores.min()), float(actual_scores.max())
        scores = np.random.default_rng([seed, 2]).uniform(lo, hi, test.n_trials)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if eps_grid is None:
        eps_grid = DEMO2_EPS
    grid = np.unique(np.append(np.asarray(eps_grid, np.float64), eps_s))
    roc, decisions = _roc_from_scores(scores, labels, grid, strict=True)
    return DemoResult(
        roc=roc,
        thresholds=grid,
        scores=scores,
        labels=labels,
        decisions=decisions,
        extra={"mode": mode, "eps_s": eps_s, "channels": list(refs.channels)},
    )
