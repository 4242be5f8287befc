"""State-dependence analysis of stimulation responses.

Pipeline per channel:
  1. pair every stimulated trial with the resting trial whose pre-stimulation
     value (at the first-pulse sample) is nearest — ``match_baselines``;
  2. subtract the matched baseline over the 45..70 ms analysis window to get
     the response, and remove the trial-mean response to isolate the
     state-varying part ``f``;
  3. test independence between the initial state x40 and ``f`` with a KSG
     mutual-information permutation test and an HSIC permutation test.

Both tests are deterministic given (data, seed).  The KSG estimator runs on
per-dimension ordinal ranks, so its p-values are exactly invariant to any
strictly monotone rescaling of the inputs; ties are broken deterministically
by sample index (stable sort).  Permutation loops are JIT-compiled with
numba over precomputed distance/kernel matrices.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import digamma

from .sessiondata import FIRST_PULSE_MS, TrialSet

ANALYSIS_WINDOW = (45, 71)  # half-open sample range, i.e. indices 45..70
OUTLIER_SIGMA = 5.0
DEFAULT_K = 4
DEFAULT_N_PERM = 1000
# Permutation statistics that agree with the observed one up to accumulated
# roundoff (different summation order) must count as ties, not near-misses.
_TIE_TOL = 1e-10


@dataclass
class MatchedResponses:
    """Per-trial matched-baseline responses for one channel."""

    channel: int
    x40: np.ndarray  # (n,) initial state of each kept stimulated trial
    r: np.ndarray  # (n, window) response: stim minus matched resting trial
    f: np.ndarray  # (n, window) r minus its across-trial mean
    matched_idx: np.ndarray  # (n,) resting-trial index paired with each trial
    n_outliers_rejected: int


def match_baselines(
    stim: TrialSet,
    rest: TrialSet,
    channel: int,
    state_sample: int = FIRST_PULSE_MS,
    window: tuple[int, int] = ANALYSIS_WINDOW,
) -> MatchedResponses:
    """Pair each stimulated trial with its nearest-initial-state resting trial.

    Trials whose initial state lies more than OUTLIER_SIGMA standard
    deviations from the mean are rejected first.  Nearest matching breaks
    ties toward the lowest resting-trial index.
    """
    if rest.n_trials == 0:
        raise ValueError("resting trial set is empty")
    lo, hi = window
    xs = stim.values[:, channel, state_sample].astype(np.float64)
    mu, sd = float(xs.mean()), float(xs.std())
    keep = np.abs(xs - mu) <= OUTLIER_SIGMA * sd if sd > 0 else np.ones_like(xs, bool)
    x40 = xs[keep]
    b40 = rest.values[:, channel, state_sample].astype(np.float64)

    matched = np.empty(x40.size, dtype=np.int64)
    for start in range(0, x40.size, 512):
        chunk = x40[start : start + 512]
        matched[start : start + chunk.size] = np.argmin(
            np.abs(chunk[:, None] - b40[None, :]), axis=1
        )
    r = (
        stim.values[keep, channel, lo:hi].astype(np.float64)
        - rest.values[matched, channel, lo:hi].astype(np.float64)
    )
    f = r - r.mean(axis=0)
    return MatchedResponses(
        channel=channel,
        x40=x40,
        r=r,
        f=f,
        matched_idx=matched,
        n_outliers_rejected=int(xs.size - x40.size),
    )


# -- KSG mutual information -------------------------------------------------


def _rank_transform(v: np.ndarray) -> np.ndarray:
    """Map one dimension to ordinal ranks in [0, 1).

    A stable sort breaks ties by sample index, giving a deterministic
    infinitesimal separation of tied values.  Constant dimensions are left
    exactly constant — fabricating an ordering there would invent structure.
    """
    v = np.asarray(v, dtype=np.float64)
    if v[0] == v[-1] and np.all(v == v[0]):
        return np.zeros_like(v)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    ranks[order] = np.arange(v.size, dtype=np.float64)
    return ranks / v.size


def _rank_columns(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    return np.column_stack([_rank_transform(y[:, j]) for j in range(y.shape[1])])


def _pairwise_chebyshev(z: np.ndarray) -> np.ndarray:
    """(n, d) points -> (n, n) max-norm distance matrix, float32."""
    n = z.shape[0]
    out = np.zeros((n, n), dtype=np.float32)
    for j in range(z.shape[1]):
        np.maximum(out, np.abs(z[:, j : j + 1] - z[None, :, j]).astype(np.float32), out=out)
    return out


def ksg_mi(x: np.ndarray, y: np.ndarray, k: int = DEFAULT_K) -> float:
    """Kraskov-variant-1 mutual-information estimate (nats) between x and y.

    Works on ordinal ranks per dimension with Chebyshev neighborhoods; the
    k-th nearest joint neighbor sets each sample's radius, and neighbor
    counts strictly inside that radius enter the digamma formula.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = x.size
    if n <= k + 1:
        raise ValueError(f"need more than k+1={k + 1} samples, got {n}")
    zx = _rank_transform(x)[:, None]
    zy = _rank_columns(y)
    if zy.shape[0] != n:
        raise ValueError("x and y sample counts differ")
    dx = _pairwise_chebyshev(zx)
    dy = _pairwise_chebyshev(zy)
    if not dx.any() and not dy.any():
        raise ValueError("all samples identical in both variables")
    dz = np.maximum(dx, dy)
    np.fill_diagonal(dz, np.inf)
    eps = np.partition(dz, k - 1, axis=1)[:, k - 1]
    # strict < eps; the diagonal zero self-distance is inside, subtract it
    nx = np.count_nonzero(dx < eps[:, None], axis=1) - 1
    ny = np.count_nonzero(dy < eps[:, None], axis=1) - 1
    return float(
        digamma(k) + digamma(n) - np.mean(digamma(nx + 1) + digamma(ny + 1))
    )


@numba.njit(cache=True)
def _ksg_perm_mis(dx, dy, perms, k, psi, psi_k, psi_n):  # pragma: no cover — JIT
    n_perm, n = perms.shape
    out = np.empty(n_perm, dtype=np.float64)
    kd = np.empty(k, dtype=np.float32)
    for t in range(n_perm):
        p = perms[t]
        acc = 0.0
        for i in range(n):
            pi = p[i]
            for m in range(k):
                kd[m] = np.inf
            for j in range(n):
                if j == i:
                    continue
                d = dx[pi, p[j]]
                dyv = dy[i, j]
                if dyv > d:
                    d = dyv
                if d < kd[k - 1]:
                    m = k - 1
                    while m > 0 and kd[m - 1] > d:
                        kd[m] = kd[m - 1]
                        m -= 1
                    kd[m] = d
            eps = kd[k - 1]
            nx = 0
            ny = 0
            for j in range(n):
                if j == i:
                    continue
                if dx[pi, p[j]] < eps:
                    nx += 1
                if dy[i, j] < eps:
                    ny += 1
            acc += psi[nx + 1] + psi[ny + 1]
        out[t] = psi_k + psi_n - acc / n
    return out


def _identity_perm(n: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64)[None, :]


def _draw_perms(rng: np.random.Generator, n: int, n_perm: int) -> np.ndarray:
    perms = np.tile(np.arange(n, dtype=np.int64), (n_perm, 1))
    return rng.permuted(perms, axis=1)


def permutation_test(
    x: np.ndarray,
    f: np.ndarray,
    n_perm: int = DEFAULT_N_PERM,
    seed: int | np.random.SeedSequence = 0,
    k: int = DEFAULT_K,
) -> float:
    """Permutation p-value for dependence between x and f under the KSG MI.

    p = (1 + #{permuted MI >= observed MI}) / (1 + n_perm); the add-one
    smoothing keeps p strictly positive.  Permuting x only relabels rows and
    columns of its precomputed distance matrix, so each permutation reuses
    the same matrices.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = x.size
    if n <= k + 1:
        raise ValueError(f"need more than k+1={k + 1} samples, got {n}")
    dx = _pairwise_chebyshev(_rank_transform(x)[:, None])
    dy = _pairwise_chebyshev(_rank_columns(f))
    if not dx.any() and not dy.any():
        raise ValueError("all samples identical in both variables")
    psi = digamma(np.arange(1, n + 2, dtype=np.float64))
    psi = np.concatenate([[np.nan], psi])  # psi[m] = digamma(m), 1-indexed
    args = (np.float64(digamma(k)), np.float64(digamma(n)))
    obs = _ksg_perm_mis(dx, dy, _identity_perm(n), k, psi, *args)[0]
    rng = np.random.default_rng(seed)
    mis = _ksg_perm_mis(dx, dy, _draw_perms(rng, n, n_perm), k, psi, *args)
    return float((1 + np.count_nonzero(mis >= obs - _TIE_TOL)) / (1 + n_perm))


# -- HSIC -------------------------------------------------------------------


def _gaussian_gram(points: np.ndarray) -> np.ndarray:
    """Gram matrix with Gaussian kernel, bandwidth = median pairwise distance."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    dists = pdist(points)
    sigma = float(np.median(dists))
    if sigma == 0.0:
        raise ValueError("zero kernel bandwidth: all samples identical")
    sq = np.zeros((points.shape[0], points.shape[0]), dtype=np.float64)
    for j in range(points.shape[1]):
        diff = points[:, j : j + 1] - points[None, :, j]
        sq += diff * diff
    return np.exp(sq * (-0.5 / (sigma * sigma)))


@numba.njit(cache=True)
def _hsic_perm_stats(k_mat, l_cent, perms):  # pragma: no cover — JIT
    n_perm, n = perms.shape
    out = np.empty(n_perm, dtype=np.float64)
    for t in range(n_perm):
        p = perms[t]
        acc = 0.0
        for i in range(n):
            row = k_mat[p[i]]
            for j in range(n):
                acc += row[p[j]] * l_cent[i, j]
        out[t] = acc / (n * n)
    return out


def hsic_test(
    x: np.ndarray,
    f: np.ndarray,
    n_perm: int = DEFAULT_N_PERM,
    seed: int | np.random.SeedSequence = 0,
) -> tuple[float, float]:
    """Biased HSIC statistic and its permutation p-value.

    HSIC = tr(K H L H) / n^2 with Gaussian kernels and median-distance
    bandwidths.  Only one side needs centering: the statistic is the inner
    product of the x Gram matrix with the doubly-centered f Gram matrix.
    Raises ValueError when either variable has zero median pairwise distance
    (zero bandwidth).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = x.size
    f = np.asarray(f, dtype=np.float64)
    if (f.shape[0] if f.ndim else 0) != n:
        raise ValueError("x and f sample counts differ")
    k_mat = _gaussian_gram(x)
    l_mat = _gaussian_gram(f)
    l_cent = l_mat - l_mat.mean(axis=0, keepdims=True)
    l_cent -= l_cent.mean(axis=1, keepdims=True)
    obs = _hsic_perm_stats(k_mat, l_cent, _identity_perm(n))[0]
    rng = np.random.default_rng(seed)
    stats = _hsic_perm_stats(k_mat, l_cent, _draw_perms(rng, n, n_perm))
    p = float((1 + np.count_nonzero(stats >= obs - _TIE_TOL)) / (1 + n_perm))
    return max(float(obs), 0.0), p


# -- per-channel session scan ------------------------------------------------


@dataclass
class ChannelTestResult:
    channel: int
    ksg_mi: float
    ksg_p: float
    hsic_stat: float
    hsic_p: float
    n_trials_used: int
    n_outliers_rejected: int


def state_dependence_scan(
    stim: TrialSet,
    rest: TrialSet,
    n_perm: int = DEFAULT_N_PERM,
    seed: int = 0,
    channels=None,
    k: int = DEFAULT_K,
) -> list[ChannelTestResult]:
    """Run matched-baseline extraction plus both independence tests per channel.

    Each channel draws its permutations from an independently spawned RNG
    stream, so results do not depend on scan order or parallel scheduling.
    """
    if channels is None:
        channels = range(stim.n_channels)
    channels = list(channels)
    streams = np.random.SeedSequence(seed).spawn(2 * len(channels))
    rows = []
    for pos, ch in enumerate(channels):
        matched = match_baselines(stim, rest, ch)
        mi = ksg_mi(matched.x40, matched.f, k=k)
        ksg_p = permutation_test(
            matched.x40, matched.f, n_perm=n_perm, seed=streams[2 * pos], k=k
        )
        hsic_stat, hsic_p = hsic_test(
            matched.x40, matched.f, n_perm=n_perm, seed=streams[2 * pos + 1]
        )
        rows.append(
            ChannelTestResult(
                channel=ch,
                ksg_mi=mi,
                ksg_p=ksg_p,
                hsic_stat=hsic_stat,
                hsic_p=hsic_p,
                n_trials_used=matched.x40.size,
                n_outliers_rejected=matched.n_outliers_rejected,
            )
        )
    return rows


def write_scan_csv(path, rows: list[ChannelTestResult]) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["channel", "ksg_mi", "ksg_p", "hsic_stat", "hsic_p", "n_trials_used", "n_outliers_rejected"]
        )
        for row in rows:
            writer.writerow(
                [
                    row.channel,
                    f"{row.ksg_mi:.9g}",
                    f"{row.ksg_p:.9g}",
                    f"{row.hsic_stat:.9g}",
                    f"{row.hsic_p:.9g}",
                    row.n_trials_used,
                    row.n_outliers_rejected,
                ]
            )
