"""State-space baseline checks: pseudoinverse VJP, unrolled gradients, recovery."""

import json

import numpy as np
import pytest

from tbfm.lssm import (
    LssmConfig,
    LssmModel,
    lssm_loss_and_grads,
    load_lssm,
    pinv_vjp,
    save_lssm,
    spectral_radius,
    train_lssm,
)
from tbfm.sessiondata import TrialSet

N_CH, LATENT, RUNWAY, HORIZON = 3, 3, 4, 10
DESCRIPTORS = {1: (5, 8), 2: (6, 9)}


def make_model(seed=0, latent_dim=LATENT, dtype=np.float64):
    return LssmModel.create(
        np.random.default_rng(seed),
        n_channels=N_CH,
        runway_len=RUNWAY,
        horizon=HORIZON,
        descriptors=DESCRIPTORS,
        latent_dim=latent_dim,
        dtype=dtype,
    )


def make_trialset(n_trials=12, seed=1, teacher=None):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(n_trials, N_CH, RUNWAY + HORIZON)).astype(np.float32)
    onsets = np.asarray(
        [DESCRIPTORS[1] if i % 2 == 0 else DESCRIPTORS[2] for i in range(n_trials)]
    )
    if teacher is not None:
        runways = values[:, :, :RUNWAY]
        for i, did in enumerate(1 + np.arange(n_trials) % 2):
            values[i, :, RUNWAY:] = teacher.predict_runways(
                runways[i : i + 1], int(did)
            )[0].astype(np.float32)
    return TrialSet(
        values=values, sample_rate_hz=1000.0, runway_len=RUNWAY, stim_onsets_ms=onsets
    )


class TestPinvVjp:
    @pytest.mark.parametrize("shape", [(3, 5), (5, 3), (4, 4)])
    def test_matches_central_differences(self, shape):
        rng = np.random.default_rng(0)
        c = rng.normal(size=shape)
        g = rng.normal(size=shape[::-1])
        analytic = pinv_vjp(c, np.linalg.pinv(c), g)

        eps = 1e-6
        for _ in range(10):
            i, j = rng.integers(shape[0]), rng.integers(shape[1])
            keep = c[i, j]
            c[i, j] = keep + eps
            lp = float((np.linalg.pinv(c) * g).sum())
            c[i, j] = keep - eps
            lm = float((np.linalg.pinv(c) * g).sum())
            c[i, j] = keep
            num = (lp - lm) / (2 * eps)
            assert num == pytest.approx(analytic[i, j], rel=1e-5, abs=1e-7)


class TestGradients:
    def test_unrolled_gradients_match_central_differences(self):
        model = make_model(seed=3)
        ts = make_trialset(n_trials=8, seed=4)
        runways = ts.runways()
        targets = ts.horizons().astype(np.float64)
        desc_mats = {did: model.descriptor_matrix(did) for did in model.descriptors}
        ids = 1 + np.arange(8) % 2

        loss, d_a, d_b, d_c = lssm_loss_and_grads(model, runways, targets, desc_mats, ids)
        assert np.isfinite(loss)

        rng = np.random.default_rng(5)
        eps = 1e-6
        for arr, grad in ((model.a, d_a), (model.b, d_b), (model.c, d_c)):
            flat, gf = arr.reshape(-1), grad.reshape(-1)
            for i in rng.choice(flat.size, size=min(8, flat.size), replace=False):
                keep = flat[i]
                flat[i] = keep + eps
                lp = lssm_loss_and_grads(model, runways, targets, desc_mats, ids)[0]
                flat[i] = keep - eps
                lm = lssm_loss_and_grads(model, runways, targets, desc_mats, ids)[0]
                flat[i] = keep
                num = (lp - lm) / (2 * eps)
                assert abs(num - gf[i]) <= 1e-6 + 1e-4 * abs(gf[i])


class TestForward:
    def test_identity_dynamics_hold_the_last_sample(self):
        # A = I, B = 0 with an invertible square readout: the forecast is the
        # last runway sample repeated across the whole horizon.
        model = make_model(seed=6, latent_dim=N_CH)
        model.a = np.eye(N_CH)
        model.b = np.zeros_like(model.b)
        ts = make_trialset(n_trials=5, seed=7)
        pred = model.predict(ts)
        y_last = ts.runways()[:, :, -1].astype(np.float64)
        for k in range(HORIZON):
            assert np.allclose(pred[:, :, k], y_last, rtol=1e-9, atol=1e-9)

    def test_single_forward_matches_batch(self):
        model = make_model(seed=8, dtype=np.float32)
        ts = make_trialset(n_trials=6, seed=9)
        pred = model.predict(ts)
        ws = model.make_workspace()
        runways = ts.runways()
        for i in range(6):
            did = 1 + i % 2
            out = model.single_forward(runways[i], did, ws)
            assert out is ws.out
            assert np.allclose(out, pred[i], rtol=1e-5, atol=1e-6)

    def test_unknown_descriptor_rejected(self):
        model = make_model()
        with pytest.raises(KeyError):
            model.descriptor_matrix(42)

    def test_init_state_is_pinv_readout(self):
        model = make_model(seed=10)
        y = np.random.default_rng(11).normal(size=N_CH)
        x = model.init_state(y)
        assert np.allclose(model.c @ x, y, rtol=1e-8, atol=1e-8)  # square full-rank C


class TestTraining:
    def test_recovers_a_realizable_linear_system(self):
        teacher = make_model(seed=42)
        train_ts = make_trialset(n_trials=300, seed=1, teacher=teacher)
        test_ts = make_trialset(n_trials=150, seed=2, teacher=teacher)
        cfg = LssmConfig(lr=1e-2, max_epochs=2000, batch_size=0, seed=0)
        model, log = train_lssm(cfg, train_ts)
        pred = model.predict(test_ts).astype(np.float64)
        actual = test_ts.horizons().astype(np.float64)
        r2 = 1 - ((pred - actual) ** 2).sum() / ((actual - actual.mean()) ** 2).sum()
        assert r2 > 0.95
        assert log.losses[-1] < log.losses[0]

    def test_spectral_radius_is_clamped(self):
        ts = make_trialset(n_trials=32, seed=3)
        cfg = LssmConfig(
            lr=0.5, max_epochs=50, batch_size=0, clamp_every=1,
            spectral_radius_max=1.1, seed=0,
        )
        model, _ = train_lssm(cfg, ts)
        assert spectral_radius(model) <= 1.1 + 1e-4

    def test_deterministic_given_seed(self):
        ts = make_trialset(n_trials=24, seed=4)
        cfg = LssmConfig(lr=1e-3, max_epochs=30, batch_size=8, seed=5)
        m1, log1 = train_lssm(cfg, ts)
        m2, log2 = train_lssm(cfg, ts)
        assert np.array_equal(m1.a, m2.a)
        assert np.array_equal(log1.losses, log2.losses)

    def test_spectral_radius_of_diagonal(self):
        model = make_model()
        model.a = np.diag([0.5, -1.5, 0.25])
        assert spectral_radius(model) == pytest.approx(1.5)


class TestSerialization:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        model = make_model(seed=12, dtype=np.float32)
        save_lssm(tmp_path / "m", model)
        loaded = load_lssm(tmp_path / "m")
        ts = make_trialset(n_trials=5, seed=13)
        assert np.array_equal(model.predict(ts), loaded.predict(ts))
        assert loaded.descriptors == model.descriptors
        assert loaded.latent_dim == model.latent_dim

    def test_truncated_params_rejected(self, tmp_path):
        model = make_model(dtype=np.float32)
        save_lssm(tmp_path / "m", model)
        payload = (tmp_path / "m" / "params.f32le").read_bytes()
        (tmp_path / "m" / "params.f32le").write_bytes(payload[:-4])
        with pytest.raises(ValueError):
            load_lssm(tmp_path / "m")

    def test_wrong_kind_rejected(self, tmp_path):
        model = make_model(dtype=np.float32)
        save_lssm(tmp_path / "m", model)
        meta_path = tmp_path / "m" / "model.json"
        meta = json.loads(meta_path.read_text())
        meta["kind"] = "tbfm"
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(ValueError):
            load_lssm(tmp_path / "m")
