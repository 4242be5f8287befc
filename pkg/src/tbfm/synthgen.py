"""Synthetic sessions with planted, state-dependent stimulation responses.

Each stim trial is

    x[ch, t] = background[ch, t] + alpha(s) * sum_k kernel(t - onset_k) + noise

where ``background`` is a stationary AR(2) process, ``s`` is the background
value at the first pulse onset (t = 40 ms), and ``alpha(s) = a + b*s + c*s**2``.
The quadratic term keeps the state gain outside what an affine-in-state model
can represent exactly.  Resting trials are background + noise only.

Ground truth (per-trial alpha, the kernels, noiseless responses) is kept next
to, never inside, the session data so models under test cannot see it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sessiondata import (
    FIRST_PULSE_MS,
    RUNWAY_LEN,
    TRIAL_LEN,
    Session,
    TrialSet,
    write_session_bundle,
)


def default_kernel(trial_len: int = TRIAL_LEN, peak_ms: float = 16.0, amp: float = 4.0) -> np.ndarray:
    """Single-trough response kernel (alpha-function), zero at the onset sample.

    Two pulses 30 ms apart therefore produce the characteristic double-trough
    shape.  Length matches the trial so shifted copies can extend to trial end.
    """
    t = np.arange(trial_len, dtype=np.float64)
    g = -(amp) * (t / peak_ms) * np.exp(1.0 - t / peak_ms)
    g[0] = 0.0
    return g


@dataclass
class SynthConfig:
    """Generator settings.  Defaults give the standard 90-channel session."""

    n_channels: int = 90
    n_trials: int = 7500
    n_resting: int = 2000
    trial_len: int = TRIAL_LEN
    runway_len: int = RUNWAY_LEN
    first_pulse_ms: int = FIRST_PULSE_MS
    pulse_interval_ms: int = 30
    sample_rate_hz: float = 1000.0
    # AR(2) background: complex poles r*exp(+-i*2*pi*f/fs), slight per-channel
    # spread keeps channels distinguishable while staying stationary.
    ar_pole_radius: float = 0.985
    ar_pole_freq_hz: float = 8.0
    ar_radius_jitter: float = 0.004
    ar_freq_jitter_hz: float = 1.5
    background_std: float = 1.0
    # state gain alpha(s) = a + b*s + c*s^2 evaluated at the background value
    # at the first pulse onset; per-channel multiplier scales the response.
    state_gain: tuple[float, float, float] = (0.6, 1.2, 0.4)
    channel_gain: np.ndarray | None = None
    noise_std: float = 0.6
    kernel: np.ndarray | None = None
    # optional second kernel with its own state gain (multi-kernel sessions)
    kernel2: np.ndarray | None = None
    state_gain2: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_channels < 1 or self.n_trials < 0 or self.n_resting < 0:
            raise ValueError("counts must be positive")
        if not 0 < self.ar_pole_radius < 1:
            raise ValueError("AR pole radius must lie in (0, 1) for stationarity")
        if self.first_pulse_ms + self.pulse_interval_ms >= self.trial_len:
            raise ValueError("second pulse must land inside the trial")
        if self.first_pulse_ms < self.runway_len:
            raise ValueError("first pulse must come after the runway")


@dataclass
class GroundTruth:
    """Planted quantities for oracle checks; never readable by models under test."""

    alphas: np.ndarray        # (n_trials, n_channels, n_kernels) effective gains
    kernels: np.ndarray       # (n_kernels, trial_len)
    state_gain: np.ndarray    # (n_kernels, 3) polynomial coefficients
    channel_gain: np.ndarray  # (n_channels,)
    onset_state: np.ndarray   # (n_trials, n_channels) background value at first onset
    noiseless: np.ndarray     # (n_trials, n_channels, trial_len) response component
    onsets_ms: np.ndarray     # (2,) pulse onsets within the trial

    def to_json_dict(self) -> dict:
        return {
            "alphas": self.alphas.astype(np.float64).round(9).tolist(),
            "kernels": self.kernels.tolist(),
            "state_gain": self.state_gain.tolist(),
            "channel_gain": self.channel_gain.tolist(),
            "onsets_ms": self.onsets_ms.tolist(),
        }


def _ar2_coeffs(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel AR(2) coefficients from jittered complex pole pairs."""
    c = cfg.n_channels
    radius = cfg.ar_pole_radius + cfg.ar_radius_jitter * rng.uniform(-1, 1, size=c)
    radius = np.clip(radius, 0.01, 0.9995)
    freq = np.clip(
        cfg.ar_pole_freq_hz + cfg.ar_freq_jitter_hz * rng.uniform(-1, 1, size=c),
        0.1,
        cfg.sample_rate_hz / 2 - 1,
    )
    theta = 2 * np.pi * freq / cfg.sample_rate_hz
    a1 = 2 * radius * np.cos(theta)
    a2 = -(radius**2)
    return a1, a2


def ar2_stationary_autocov(a1: float, a2: float, innov_var: float, max_lag: int) -> np.ndarray:
    """Analytic autocovariance of a stationary AR(2) process, lags 0..max_lag."""
    denom = (1 + a2) * ((1 - a2) ** 2 - a1**2)
    if denom <= 0:
        raise ValueError("AR(2) coefficients are not stationary")
    g0 = (1 - a2) * innov_var / denom
    g1 = a1 * g0 / (1 - a2)
    out = np.empty(max_lag + 1)
    out[0] = g0
    if max_lag >= 1:
        out[1] = g1
    for k in range(2, max_lag + 1):
        out[k] = a1 * out[k - 1] + a2 * out[k - 2]
    return out


def _ar2_innovation_std(a1: np.ndarray, a2: np.ndarray, target_std: float) -> np.ndarray:
    """Innovation std per channel so the stationary process std hits target_std."""
    denom = (1 + a2) * ((1 - a2) ** 2 - a1**2)
    g0_unit = (1 - a2) / denom  # variance for unit innovation variance
    return target_std / np.sqrt(g0_unit)


def _simulate_ar2(
    a1: np.ndarray,
    a2: np.ndarray,
    innov_std: np.ndarray,
    n_trials: int,
    trial_len: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Stationary-start AR(2) segments, vectorized over (trial, channel)."""
    c = len(a1)
    x = np.empty((n_trials, c, trial_len), dtype=np.float64)
    # joint stationary draw for (x0, x1): var g0, cov g1 per channel
    g0 = np.empty(c)
    g1 = np.empty(c)
    for ch in range(c):
        cov = ar2_stationary_autocov(float(a1[ch]), float(a2[ch]), float(innov_std[ch] ** 2), 1)
        g0[ch], g1[ch] = cov[0], cov[1]
    z = rng.standard_normal((n_trials, c, 2))
    x[:, :, 0] = np.sqrt(g0) * z[:, :, 0]
    cond_var = np.maximum(g0 - g1**2 / g0, 1e-12)
    x[:, :, 1] = (g1 / g0) * x[:, :, 0] + np.sqrt(cond_var) * z[:, :, 1]
    innov = rng.standard_normal((n_trials, c, trial_len)) * innov_std[None, :, None]
    for t in range(2, trial_len):
        x[:, :, t] = a1 * x[:, :, t - 1] + a2 * x[:, :, t - 2] + innov[:, :, t]
    return x


def generate_session(cfg: SynthConfig) -> tuple[Session, GroundTruth]:
    """Generate stim + resting trials with the planted response and its truth."""
    rng = np.random.default_rng(cfg.seed)
    a1, a2 = _ar2_coeffs(cfg, rng)
    innov_std = _ar2_innovation_std(a1, a2, cfg.background_std)

    kernels = [cfg.kernel if cfg.kernel is not None else default_kernel(cfg.trial_len)]
    gains = [np.asarray(cfg.state_gain, dtype=np.float64)]
    if cfg.kernel2 is not None:
        kernels.append(np.asarray(cfg.kernel2, dtype=np.float64))
        gains.append(np.asarray(cfg.state_gain2, dtype=np.float64))
    kernels = np.stack([np.asarray(k, dtype=np.float64) for k in kernels])
    gains = np.stack(gains)
    if kernels.shape[1] != cfg.trial_len:
        raise ValueError("kernels must have trial_len samples")
    channel_gain = (
        np.ones(cfg.n_channels)
        if cfg.channel_gain is None
        else np.asarray(cfg.channel_gain, dtype=np.float64)
    )
    if channel_gain.shape != (cfg.n_channels,):
        raise ValueError("channel_gain must have one entry per channel")

    onsets = np.array([cfg.first_pulse_ms, cfg.first_pulse_ms + cfg.pulse_interval_ms])
    # summed shifted copies of each kernel, truncated at trial end
    shape = np.zeros((len(kernels), cfg.trial_len), dtype=np.float64)
    for k, g in enumerate(kernels):
        for onset in onsets:
            n = cfg.trial_len - onset
            shape[k, onset:] += g[:n]

    background = _simulate_ar2(a1, a2, innov_std, cfg.n_trials, cfg.trial_len, rng)
    s = background[:, :, cfg.first_pulse_ms]  # (n_trials, c) state at first onset
    alphas = np.empty((cfg.n_trials, cfg.n_channels, len(kernels)), dtype=np.float64)
    for k in range(len(kernels)):
        a, b, c2 = gains[k]
        alphas[:, :, k] = (a + b * s + c2 * s**2) * channel_gain[None, :]
    noiseless = np.einsum("nck,kt->nct", alphas, shape)
    noise = rng.standard_normal(background.shape) * cfg.noise_std
    stim_values = (background + noiseless + noise).astype(np.float32)

    stim = TrialSet(
        values=stim_values,
        sample_rate_hz=cfg.sample_rate_hz,
        runway_len=cfg.runway_len,
        stim_onsets_ms=np.tile(onsets, (cfg.n_trials, 1)),
    )

    rest_bg = _simulate_ar2(a1, a2, innov_std, cfg.n_resting, cfg.trial_len, rng)
    rest_noise = rng.standard_normal(rest_bg.shape) * cfg.noise_std
    resting = TrialSet(
        values=(rest_bg + rest_noise).astype(np.float32),
        sample_rate_hz=cfg.sample_rate_hz,
        runway_len=cfg.runway_len,
        stim_onsets_ms=np.empty((cfg.n_resting, 0), dtype=np.int64),
    )

    truth = GroundTruth(
        alphas=alphas.astype(np.float32),
        kernels=kernels,
        state_gain=gains,
        channel_gain=channel_gain,
        onset_state=s.astype(np.float32),
        noiseless=noiseless.astype(np.float32),
        onsets_ms=onsets,
    )
    return Session(stim=stim, resting=resting, descriptor_id=1), truth


def write_session_with_truth(path, session: Session, truth: GroundTruth) -> None:
    """Bundle layout: stim/, resting/, and ground_truth.json beside (not inside) them."""
    path = Path(path)
    write_session_bundle(path, session)
    (path / "ground_truth.json").write_text(
        json.dumps(truth.to_json_dict(), sort_keys=True) + "\n"
    )
