"""Session data handling: recordings, trial windows, filtering, band power, z-scoring.

Conventions used throughout the package:

* sample values are stored as little-endian float32, accumulations run in float64
* a trial is ``trial_len`` samples long; the first ``runway_len`` samples are the
  runway (model input), the remaining ``trial_len - runway_len`` the horizon
* at 1 kHz one sample is one millisecond, so onset times in ms index samples
  directly; other rates are supported as long as ms offsets land on samples
* all filters are causal (forward-only), suitable for closed-loop use
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import signal

SCHEMA_VERSION = 1

# Default trial geometry: 184 ms trials at 1 kHz, 20 ms runway, 164-step horizon,
# first pulse 40 ms into the trial (20 ms loop latency after the runway).
TRIAL_LEN = 184
RUNWAY_LEN = 20
FIRST_PULSE_MS = 40


class SessionFormatError(ValueError):
    """Raised for malformed session directories or inconsistent metadata."""


def _as_f32(values: np.ndarray) -> np.ndarray:
    out = np.asarray(values, dtype=np.float32)
    if not np.isfinite(out).all():
        raise ValueError("sample values must be finite")
    return out


@dataclass
class ContinuousRecording:
    """A continuous multichannel recording with pulse-onset annotations.

    ``pulse_onsets`` is an (n_pulses, 2) int array of [onset_ms, pulse_index]
    rows with pulse_index 1 or 2 (first/second pulse of a pair), sorted by time.
    """

    values: np.ndarray
    sample_rate_hz: float
    pulse_onsets: np.ndarray
    channel_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = _as_f32(np.atleast_2d(self.values))
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        self.pulse_onsets = np.asarray(self.pulse_onsets, dtype=np.int64).reshape(-1, 2)
        if self.channel_mask is None:
            self.channel_mask = np.ones(self.values.shape[0], dtype=bool)
        self.channel_mask = np.asarray(self.channel_mask, dtype=bool)
        if self.channel_mask.shape != (self.values.shape[0],):
            raise ValueError("channel_mask length must match channel count")
        t = self.pulse_onsets[:, 0]
        if np.any(np.diff(t) < 0):
            raise ValueError("pulse onsets must be sorted by time")
        if len(t) and (t.min() < 0 or self._ms_to_sample(int(t.max())) >= self.n_samples):
            raise ValueError("pulse onsets must fall inside the recording")
        if len(t) and not np.isin(self.pulse_onsets[:, 1], (1, 2)).all():
            raise ValueError("pulse_index must be 1 or 2")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    def _ms_to_sample(self, ms: float) -> int:
        s = ms * self.sample_rate_hz / 1000.0
        r = int(round(s))
        if abs(s - r) > 1e-9:
            raise ValueError(f"{ms} ms does not land on a sample at {self.sample_rate_hz} Hz")
        return r


@dataclass
class TrialSet:
    """Stacked fixed-length trials: values are (n_trials, n_channels, trial_len).

    ``stim_onsets_ms`` holds per-trial pulse onsets relative to trial start,
    shape (n_trials, n_pulses); resting sets use n_pulses = 0.
    """

    values: np.ndarray
    sample_rate_hz: float
    runway_len: int
    stim_onsets_ms: np.ndarray
    channel_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.values = _as_f32(self.values)
        if self.values.ndim != 3:
            raise ValueError("trial values must be (n_trials, n_channels, trial_len)")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        self.stim_onsets_ms = np.asarray(self.stim_onsets_ms, dtype=np.int64)
        if self.stim_onsets_ms.ndim != 2 or self.stim_onsets_ms.shape[0] != self.n_trials:
            raise ValueError("stim_onsets_ms must be (n_trials, n_pulses)")
        if not 0 <= self.runway_len < self.trial_len:
            raise ValueError("runway_len must lie inside the trial")
        if self.channel_mask is None:
            self.channel_mask = np.ones(self.n_channels, dtype=bool)
        self.channel_mask = np.asarray(self.channel_mask, dtype=bool)
        if self.channel_mask.shape != (self.n_channels,):
            raise ValueError("channel_mask length must match channel count")

    @property
    def n_trials(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def trial_len(self) -> int:
        return self.values.shape[2]

    @property
    def horizon(self) -> int:
        return self.trial_len - self.runway_len

    def runways(self) -> np.ndarray:
        """(n_trials, n_channels, runway_len) view of the runway samples."""
        return self.values[:, :, : self.runway_len]

    def horizons(self) -> np.ndarray:
        """(n_trials, n_channels, horizon) view of the post-runway samples."""
        return self.values[:, :, self.runway_len :]

    def subset(self, idx) -> "TrialSet":
        return replace(
            self,
            values=self.values[idx],
            stim_onsets_ms=self.stim_onsets_ms[idx],
            channel_mask=self.channel_mask.copy(),
        )


@dataclass
class Session:
    """A stim trial set plus matched resting trials from the same recording."""

    stim: TrialSet
    resting: TrialSet
    descriptor_id: int = 1

    def __post_init__(self) -> None:
        if self.stim.n_channels != self.resting.n_channels:
            raise ValueError("stim and resting channel counts differ")
        if self.stim.trial_len != self.resting.trial_len:
            raise ValueError("stim and resting trial lengths differ")


# ---------------------------------------------------------------------------
# windowing


def window_session(
    rec: ContinuousRecording,
    trial_len: int = TRIAL_LEN,
    runway_len: int = RUNWAY_LEN,
    first_pulse_ms: int = FIRST_PULSE_MS,
) -> tuple[TrialSet, int]:
    """Cut one trial per complete pulse pair from a continuous recording.

    A pair is a pulse-1 onset followed by a pulse-2 onset with no pulse-1 in
    between.  The trial covers [t1 - first_pulse_ms, t1 - first_pulse_ms +
    trial_len) so the first pulse lands ``first_pulse_ms`` into the trial.
    Pairs whose window would leave the recording are dropped; the count of
    dropped pairs is returned alongside the trials.
    """
    if not 0 <= runway_len < trial_len:
        raise ValueError("runway_len must lie inside the trial")
    onsets = rec.pulse_onsets
    trials: list[np.ndarray] = []
    local_onsets: list[tuple[int, int]] = []
    n_dropped = 0
    i = 0
    while i < len(onsets):
        if onsets[i, 1] != 1:
            i += 1
            continue
        j = i + 1
        if j >= len(onsets) or onsets[j, 1] != 2:
            i += 1
            continue
        t1, t2 = int(onsets[i, 0]), int(onsets[j, 0])
        start = rec._ms_to_sample(t1 - first_pulse_ms)
        stop = start + trial_len
        interval = t2 - t1
        if start < 0 or stop > rec.n_samples or first_pulse_ms + interval >= trial_len:
            n_dropped += 1
        else:
            trials.append(rec.values[:, start:stop])
            local_onsets.append((first_pulse_ms, first_pulse_ms + interval))
        i = j + 1
    if trials:
        values = np.stack(trials)
        onset_arr = np.asarray(local_onsets, dtype=np.int64)
    else:
        values = np.empty((0, rec.n_channels, trial_len), dtype=np.float32)
        onset_arr = np.empty((0, 2), dtype=np.int64)
    ts = TrialSet(
        values=values,
        sample_rate_hz=rec.sample_rate_hz,
        runway_len=runway_len,
        stim_onsets_ms=onset_arr,
        channel_mask=rec.channel_mask.copy(),
    )
    return ts, n_dropped


def crop_resting(
    rec: ContinuousRecording,
    n_trials: int,
    trial_len: int = TRIAL_LEN,
    runway_len: int = RUNWAY_LEN,
    guard_ms: int = 500,
    seed: int = 0,
) -> TrialSet:
    """Crop random stimulation-free windows of ``trial_len`` from a recording.

    Windows are drawn uniformly (with replacement) over all starts that keep at
    least ``guard_ms`` away from every pulse onset.  Deterministic under seed.
    """
    rng = np.random.default_rng(seed)
    guard = rec._ms_to_sample(guard_ms)
    tl = trial_len
    ok = np.ones(rec.n_samples - tl + 1, dtype=bool)
    for t_ms, _ in rec.pulse_onsets:
        t = rec._ms_to_sample(int(t_ms))
        lo = max(0, t - guard - tl + 1)
        hi = min(len(ok), t + guard + 1)
        ok[lo:hi] = False
    starts_pool = np.flatnonzero(ok)
    if len(starts_pool) == 0:
        raise ValueError("no stimulation-free window of the requested length exists")
    starts = rng.choice(starts_pool, size=n_trials, replace=True)
    values = np.stack([rec.values[:, s : s + tl] for s in starts])
    return TrialSet(
        values=values,
        sample_rate_hz=rec.sample_rate_hz,
        runway_len=runway_len,
        stim_onsets_ms=np.empty((n_trials, 0), dtype=np.int64),
        channel_mask=rec.channel_mask.copy(),
    )


def split_train_test(ts: TrialSet, n_train: int, n_test: int) -> tuple[TrialSet, TrialSet]:
    """Session-order split: first ``n_train`` trials train, last ``n_test`` test."""
    if n_train + n_test > ts.n_trials:
        raise ValueError(
            f"split needs {n_train + n_test} trials, set has {ts.n_trials}"
        )
    return ts.subset(slice(0, n_train)), ts.subset(slice(ts.n_trials - n_test, ts.n_trials))


# ---------------------------------------------------------------------------
# filtering

NOTCH_FREQS_HZ = (60.0, 180.0, 300.0)
NOTCH_QS = (20.0, 60.0, 100.0)
BETA_BAND_HZ = (13.0, 30.0)


def notch_filter(
    values: np.ndarray,
    sample_rate_hz: float,
    freqs_hz=NOTCH_FREQS_HZ,
    qs=NOTCH_QS,
) -> np.ndarray:
    """Causal cascaded-biquad notch filter along the last axis."""
    if len(freqs_hz) != len(qs):
        raise ValueError("freqs_hz and qs must have equal length")
    sos = []
    for f0, q in zip(freqs_hz, qs):
        if not 0 < f0 < sample_rate_hz / 2:
            raise ValueError(f"notch frequency {f0} outside (0, nyquist)")
        b, a = signal.iirnotch(f0, q, fs=sample_rate_hz)
        sos.append(signal.tf2sos(b, a))
    sos = np.vstack(sos)
    out = signal.sosfilt(sos, np.asarray(values, dtype=np.float64), axis=-1)
    return out.astype(np.float32)


def butterworth_bandpass(
    values: np.ndarray,
    sample_rate_hz: float,
    low_hz: float = BETA_BAND_HZ[0],
    high_hz: float = BETA_BAND_HZ[1],
    order: int = 1,
) -> np.ndarray:
    """Causal first-order Butterworth bandpass along the last axis."""
    if not 0 < low_hz < high_hz < sample_rate_hz / 2:
        raise ValueError("band edges must satisfy 0 < low < high < nyquist")
    sos = signal.butter(order, (low_hz, high_hz), btype="bandpass", fs=sample_rate_hz, output="sos")
    out = signal.sosfilt(sos, np.asarray(values, dtype=np.float64), axis=-1)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# band power

BETA_STFFT = dict(window_ms=100.0, std_ms=10.0, stride_ms=5.0, band_hz=(10.0, 20.0, 30.0))
HIGH_GAMMA_STFFT = dict(window_ms=20.0, std_ms=5.0, stride_ms=5.0, band_hz=(100.0, 150.0, 200.0))


def stfft_band_power(
    values: np.ndarray,
    sample_rate_hz: float,
    window_ms: float = 100.0,
    std_ms: float = 10.0,
    stride_ms: float = 5.0,
    band_hz=(10.0, 20.0, 30.0),
) -> np.ndarray:
    """Short-time band power via Gaussian-windowed DFT at fixed band frequencies.

    Frames start at multiples of the stride; a frame may overhang the end of
    the signal (zero padding), so an L-sample input yields ``L // stride``
    frames: a 184 ms trial at 1 kHz with a 5 ms stride gives 36 steps.
    Returns power with band and frame axes appended: (..., n_bands, n_frames).
    """
    x = np.asarray(values, dtype=np.float64)
    win = int(round(window_ms * sample_rate_hz / 1000.0))
    std = std_ms * sample_rate_hz / 1000.0
    stride = int(round(stride_ms * sample_rate_hz / 1000.0))
    if win < 1 or stride < 1:
        raise ValueError("window and stride must be at least one sample")
    n = x.shape[-1]
    n_frames = n // stride
    if n_frames < 1:
        raise ValueError("input shorter than one stride")
    w = signal.windows.gaussian(win, std)
    t = np.arange(win) / sample_rate_hz
    bands = np.asarray(band_hz, dtype=np.float64)
    # (n_bands, win) windowed complex exponentials; power = |x_frame . basis|^2
    basis = w * np.exp(-2j * np.pi * bands[:, None] * t[None, :])
    pad = np.concatenate([x, np.zeros(x.shape[:-1] + (win,), dtype=x.dtype)], axis=-1)
    frames = np.stack([pad[..., k * stride : k * stride + win] for k in range(n_frames)], axis=-2)
    spec = frames @ basis.T  # (..., n_frames, n_bands) complex
    power = np.abs(spec) ** 2
    return np.moveaxis(power, -1, -2).astype(np.float32)


# ---------------------------------------------------------------------------
# z-scoring


@dataclass(frozen=True)
class ZScoreStats:
    """Per-channel mean/std computed from a training set, float64."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be equal-length vectors")
        if np.any(self.std <= 0) or not np.isfinite(self.std).all():
            raise ValueError("z-score std must be positive and finite for every channel")

    @property
    def n_channels(self) -> int:
        return len(self.mean)

    def apply(self, values: np.ndarray, channel_axis: int = -2) -> np.ndarray:
        """(x - mean) / std along the channel axis; dtype preserved, f64 math."""
        x = np.asarray(values)
        shape = [1] * x.ndim
        shape[channel_axis] = self.n_channels
        out = (x.astype(np.float64) - self.mean.reshape(shape)) / self.std.reshape(shape)
        return out.astype(x.dtype)

    def invert(self, values: np.ndarray, channel_axis: int = -2) -> np.ndarray:
        x = np.asarray(values)
        shape = [1] * x.ndim
        shape[channel_axis] = self.n_channels
        out = x.astype(np.float64) * self.std.reshape(shape) + self.mean.reshape(shape)
        return out.astype(x.dtype)


def compute_zscore(ts: TrialSet) -> ZScoreStats:
    """Per-channel stats over every sample of every trial, float64 accumulation."""
    x = ts.values
    mean = x.mean(axis=(0, 2), dtype=np.float64)
    std = x.std(axis=(0, 2), dtype=np.float64)
    if np.any(std == 0):
        bad = np.flatnonzero(std == 0)
        raise ValueError(f"zero-variance channels cannot be z-scored: {bad.tolist()}")
    return ZScoreStats(mean=mean, std=std)


# ---------------------------------------------------------------------------
# spectra


def psd_loglog_slope(
    ts: TrialSet,
    f_lo_hz: float = 2.0,
    f_hi_hz: float = 100.0,
) -> float:
    """Log-log slope of the trial-averaged periodogram, least squares fit.

    Physiological-style background activity shows a clearly negative slope
    (power falling with frequency); used as a sanity check on generated data.
    """
    x = ts.values.astype(np.float64)
    n = x.shape[-1]
    freqs = np.fft.rfftfreq(n, d=1.0 / ts.sample_rate_hz)
    spec = np.abs(np.fft.rfft(x, axis=-1)) ** 2
    psd = spec.mean(axis=(0, 1))
    keep = (freqs >= f_lo_hz) & (freqs <= f_hi_hz) & (psd > 0)
    if keep.sum() < 2:
        raise ValueError("not enough frequency bins in the fit range")
    slope, _ = np.polyfit(np.log10(freqs[keep]), np.log10(psd[keep]), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# session directory format
#
# A session directory holds one array:
#   manifest.json  - metadata (schema_version, sample_rate_hz, kind, shapes, ...)
#   data.f32le     - raw little-endian float32, C order
# Continuous data is [channel][time]; trial data is [trial][channel][time].


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_session_dir(path, data: ContinuousRecording | TrialSet, descriptor_id: int | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if isinstance(data, ContinuousRecording):
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "kind": "continuous",
            "sample_rate_hz": data.sample_rate_hz,
            "n_channels": data.n_channels,
            "n_samples": data.n_samples,
            "channel_mask": data.channel_mask.astype(int).tolist(),
            "pulse_onsets_ms": data.pulse_onsets.tolist(),
        }
        payload = data.values
    elif isinstance(data, TrialSet):
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "kind": "trials",
            "sample_rate_hz": data.sample_rate_hz,
            "n_channels": data.n_channels,
            "n_trials": data.n_trials,
            "trial_len": data.trial_len,
            "runway_len": data.runway_len,
            "channel_mask": data.channel_mask.astype(int).tolist(),
            "stim_onsets_ms": data.stim_onsets_ms.tolist(),
        }
        payload = data.values
    else:
        raise TypeError(f"cannot write {type(data).__name__} as a session")
    if descriptor_id is not None:
        manifest["descriptor_id"] = int(descriptor_id)
    arr = np.ascontiguousarray(payload, dtype="<f4")
    (path / "data.f32le").write_bytes(arr.tobytes())
    _write_json(path / "manifest.json", manifest)


def read_session_dir(path) -> ContinuousRecording | TrialSet:
    path = Path(path)
    mf_path = path / "manifest.json"
    if not mf_path.exists():
        raise SessionFormatError(f"{path} has no manifest.json")
    manifest = json.loads(mf_path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SessionFormatError(
            f"unsupported schema_version {manifest.get('schema_version')!r}"
        )
    raw = np.frombuffer((path / "data.f32le").read_bytes(), dtype="<f4")
    kind = manifest.get("kind")
    if kind == "continuous":
        shape = (manifest["n_channels"], manifest["n_samples"])
        if raw.size != np.prod(shape):
            raise SessionFormatError("data.f32le size does not match manifest shape")
        return ContinuousRecording(
            values=raw.reshape(shape).copy(),
            sample_rate_hz=manifest["sample_rate_hz"],
            pulse_onsets=np.asarray(manifest["pulse_onsets_ms"], dtype=np.int64).reshape(-1, 2),
            channel_mask=np.asarray(manifest["channel_mask"], dtype=bool),
        )
    if kind == "trials":
        shape = (manifest["n_trials"], manifest["n_channels"], manifest["trial_len"])
        if raw.size != np.prod(shape):
            raise SessionFormatError("data.f32le size does not match manifest shape")
        return TrialSet(
            values=raw.reshape(shape).copy(),
            sample_rate_hz=manifest["sample_rate_hz"],
            runway_len=manifest["runway_len"],
            stim_onsets_ms=np.asarray(manifest["stim_onsets_ms"], dtype=np.int64).reshape(
                manifest["n_trials"], -1
            ),
            channel_mask=np.asarray(manifest["channel_mask"], dtype=bool),
        )
    raise SessionFormatError(f"unknown session kind {kind!r}")


def session_descriptor_id(path) -> int | None:
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    did = manifest.get("descriptor_id")
    return None if did is None else int(did)


def write_session_bundle(path, session: Session) -> None:
    """Write stim/ and resting/ session dirs under one bundle directory."""
    path = Path(path)
    write_session_dir(path / "stim", session.stim, descriptor_id=session.descriptor_id)
    write_session_dir(path / "resting", session.resting, descriptor_id=0)


def read_session_bundle(path) -> Session:
    path = Path(path)
    stim = read_session_dir(path / "stim")
    resting = read_session_dir(path / "resting")
    if not isinstance(stim, TrialSet) or not isinstance(resting, TrialSet):
        raise SessionFormatError("session bundle must contain trial-layout stim/ and resting/")
    did = session_descriptor_id(path / "stim")
    return Session(stim=stim, resting=resting, descriptor_id=1 if did is None else did)
