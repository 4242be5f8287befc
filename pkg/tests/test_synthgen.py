"""Generator checks against analytic oracles and planted-structure identities."""

import json

import numpy as np
import pytest

from tbfm.sessiondata import psd_loglog_slope, read_session_bundle
from tbfm.synthgen import (
    SynthConfig,
    ar2_stationary_autocov,
    default_kernel,
    generate_session,
    write_session_with_truth,
)


def _no_jitter_cfg(**kw) -> SynthConfig:
    """All channels share one AR(2) pole pair so analytic formulas apply exactly."""
    base = dict(
        n_channels=2,
        n_trials=1,
        n_resting=3000,
        ar_radius_jitter=0.0,
        ar_freq_jitter_hz=0.0,
        noise_std=0.0,
    )
    base.update(kw)
    return SynthConfig(**base)


def _shared_pole_coeffs(cfg: SynthConfig) -> tuple[float, float]:
    theta = 2 * np.pi * cfg.ar_pole_freq_hz / cfg.sample_rate_hz
    a1 = 2 * cfg.ar_pole_radius * np.cos(theta)
    a2 = -(cfg.ar_pole_radius**2)
    return float(a1), float(a2)


class TestBackgroundProcess:
    def test_autocovariance_matches_analytic_oracle(self):
        # Moderate pole radius keeps the within-trial correlation length short,
        # so 3000 independent trials estimate lags 0..2 to well under 5%.
        cfg = _no_jitter_cfg(ar_pole_radius=0.9, seed=11)
        session, _ = generate_session(cfg)
        x = session.resting.values.astype(np.float64)

        a1, a2 = _shared_pole_coeffs(cfg)
        unit_g0 = ar2_stationary_autocov(a1, a2, 1.0, 0)[0]
        innov_var = cfg.background_std**2 / unit_g0
        expected = ar2_stationary_autocov(a1, a2, innov_var, 2)
        assert expected[0] == pytest.approx(cfg.background_std**2)

        got = np.array(
            [
                (x * x).mean(),
                (x[:, :, :-1] * x[:, :, 1:]).mean(),
                (x[:, :, :-2] * x[:, :, 2:]).mean(),
            ]
        )
        assert np.allclose(got, expected, rtol=0.05)

    def test_autocov_recursion_and_stationarity_guard(self):
        cov = ar2_stationary_autocov(1.5, -0.56, 2.0, 5)
        for k in range(2, 6):
            assert cov[k] == pytest.approx(1.5 * cov[k - 1] - 0.56 * cov[k - 2])
        with pytest.raises(ValueError):
            ar2_stationary_autocov(2.0, -1.0, 1.0, 2)  # poles on the unit circle

    def test_resting_psd_decays_with_frequency(self):
        cfg = SynthConfig(n_channels=4, n_trials=1, n_resting=400, seed=3)
        session, _ = generate_session(cfg)
        assert psd_loglog_slope(session.resting) < -0.3

    def test_mean_level_near_zero(self):
        cfg = _no_jitter_cfg(ar_pole_radius=0.9, seed=5)
        session, _ = generate_session(cfg)
        x = session.resting.values
        assert abs(x.mean()) < 0.05 * cfg.background_std


class TestDeterminism:
    def test_same_seed_identical(self):
        cfg = SynthConfig(n_channels=3, n_trials=50, n_resting=20, seed=42)
        s1, t1 = generate_session(cfg)
        s2, t2 = generate_session(cfg)
        assert np.array_equal(s1.stim.values, s2.stim.values)
        assert np.array_equal(s1.resting.values, s2.resting.values)
        assert np.array_equal(t1.alphas, t2.alphas)

    def test_different_seed_differs(self):
        base = dict(n_channels=3, n_trials=50, n_resting=20)
        s1, _ = generate_session(SynthConfig(**base, seed=1))
        s2, _ = generate_session(SynthConfig(**base, seed=2))
        assert not np.array_equal(s1.stim.values, s2.stim.values)


class TestPlantedResponse:
    def test_alphas_are_state_polynomial_times_channel_gain(self):
        gain = np.linspace(0.5, 1.5, 4)
        cfg = SynthConfig(
            n_channels=4,
            n_trials=200,
            n_resting=10,
            state_gain=(0.3, 1.1, 0.25),
            channel_gain=gain,
            seed=9,
        )
        _, truth = generate_session(cfg)
        s = truth.onset_state.astype(np.float64)
        a, b, c = cfg.state_gain
        expected = (a + b * s + c * s**2) * gain[None, :]
        assert np.allclose(truth.alphas[:, :, 0], expected, rtol=1e-5, atol=1e-5)

    def test_constant_gain_zero_noise_gives_identical_responses(self):
        # With alpha(s) constant the planted response is the same every trial.
        cfg = SynthConfig(
            n_channels=3,
            n_trials=40,
            n_resting=5,
            state_gain=(1.0, 0.0, 0.0),
            noise_std=0.0,
            seed=21,
        )
        _, truth = generate_session(cfg)
        assert np.array_equal(truth.alphas, np.ones_like(truth.alphas))
        assert np.array_equal(
            truth.noiseless, np.broadcast_to(truth.noiseless[0], truth.noiseless.shape)
        )

    def test_response_is_zero_before_first_pulse(self):
        cfg = SynthConfig(n_channels=3, n_trials=30, n_resting=5, seed=2)
        session, truth = generate_session(cfg)
        # kernel starts at zero, so the response begins strictly after onset
        assert np.array_equal(
            truth.noiseless[:, :, : cfg.first_pulse_ms + 1],
            np.zeros_like(truth.noiseless[:, :, : cfg.first_pulse_ms + 1]),
        )
        assert np.abs(truth.noiseless[:, :, cfg.first_pulse_ms + 1 :]).max() > 0
        assert np.array_equal(truth.onsets_ms, np.array([40, 70]))
        assert np.array_equal(
            session.stim.stim_onsets_ms, np.tile([40, 70], (cfg.n_trials, 1))
        )

    def test_noiseless_plus_background_reconstructs_stim(self):
        # With noise_std = 0, stim minus the planted response is a pure AR(2)
        # background: it must be flat (zero planted part) before the onset and
        # match the resting process statistics.
        cfg = _no_jitter_cfg(
            ar_pole_radius=0.9, n_channels=2, n_trials=500, n_resting=500, seed=13
        )
        session, truth = generate_session(cfg)
        background = session.stim.values.astype(np.float64) - truth.noiseless
        var_bg = (background * background).mean()
        assert var_bg == pytest.approx(cfg.background_std**2, rel=0.1)

    def test_two_kernel_session(self):
        k2 = default_kernel(184, peak_ms=10.0, amp=1.0)
        cfg = SynthConfig(
            n_channels=2,
            n_trials=25,
            n_resting=5,
            kernel2=k2,
            state_gain2=(0.5, 0.0, 0.0),
            seed=4,
        )
        _, truth = generate_session(cfg)
        assert truth.kernels.shape == (2, 184)
        assert truth.alphas.shape == (25, 2, 2)
        assert np.array_equal(truth.alphas[:, :, 1], np.full((25, 2), 0.5))
        assert np.array_equal(truth.kernels[1], k2)


class TestKernel:
    def test_zero_at_onset_and_trough_at_peak(self):
        g = default_kernel(184, peak_ms=16.0, amp=4.0)
        assert g[0] == 0.0
        assert g.shape == (184,)
        assert np.argmin(g) == 16
        assert g[16] == pytest.approx(-4.0)
        assert np.all(g <= 0.0)

    def test_recovery_toward_zero(self):
        g = default_kernel(184)
        trough = np.argmin(g)
        assert np.all(np.diff(g[trough:]) >= 0)  # monotone recovery
        assert abs(g[-1]) < 0.05 * abs(g[trough])


class TestValidation:
    def test_nonstationary_pole_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(ar_pole_radius=1.0)

    def test_first_pulse_inside_runway_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(first_pulse_ms=10)

    def test_second_pulse_outside_trial_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(pulse_interval_ms=150)

    def test_bad_channel_gain_shape_rejected(self):
        cfg = SynthConfig(n_channels=3, n_trials=5, n_resting=2, channel_gain=np.ones(4))
        with pytest.raises(ValueError):
            generate_session(cfg)

    def test_bad_kernel_length_rejected(self):
        cfg = SynthConfig(n_channels=2, n_trials=5, n_resting=2, kernel=np.zeros(10))
        with pytest.raises(ValueError):
            generate_session(cfg)


class TestBundle:
    def test_write_includes_ground_truth(self, tmp_path):
        cfg = SynthConfig(n_channels=3, n_trials=20, n_resting=10, seed=6)
        session, truth = generate_session(cfg)
        out = tmp_path / "session"
        write_session_with_truth(out, session, truth)

        payload = json.loads((out / "ground_truth.json").read_text())
        assert set(payload) >= {"alphas", "kernels", "state_gain", "channel_gain", "onsets_ms"}
        assert np.asarray(payload["alphas"]).shape == (20, 3, 1)
        assert payload["onsets_ms"] == [40, 70]

        loaded = read_session_bundle(out)
        assert np.array_equal(loaded.stim.values, session.stim.values)
        assert np.array_equal(loaded.resting.values, session.resting.values)
        assert loaded.descriptor_id == session.descriptor_id
