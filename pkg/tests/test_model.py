"""Model-layer checks: descriptors, forward paths, compilation, serialization."""

import numpy as np
import pytest

from tbfm.model import (
    DESCRIPTOR_DIM,
    CompiledModel,
    TbfmModel,
    Workspace,
    build_stim_descriptor,
    compile_model,
    descriptor_registry,
    load_compiled,
    load_model,
    save_compiled,
    save_model,
)
from tbfm.sessiondata import TrialSet, ZScoreStats


def tiny_model(
    n_channels=3,
    runway_len=5,
    horizon=30,
    descriptors=None,
    dtype=np.float32,
    seed=0,
    n_basis=4,
    fixed_runway=None,
):
    rng = np.random.default_rng(seed)
    if descriptors is None:
        descriptors = {0: (), 1: (6, 12), 2: (8, 14)}
    zstats = ZScoreStats(
        mean=rng.normal(size=n_channels), std=rng.uniform(0.5, 2.0, size=n_channels)
    )
    model = TbfmModel.create(
        rng,
        n_channels=n_channels,
        runway_len=runway_len,
        horizon=horizon,
        zstats=zstats,
        descriptors=descriptors,
        n_basis=n_basis,
        dtype=dtype,
        seed=seed,
    )
    # create() zero-initializes theta_b; perturb so the affine offset is exercised
    model.theta_b = rng.normal(size=model.theta_b.shape).astype(dtype) * 0.1
    if fixed_runway is not None:
        model.fixed_runway = np.asarray(fixed_runway, dtype=dtype)
    return model


def tiny_trialset(model: TbfmModel, n_trials=8, seed=1, onset_rows=None):
    rng = np.random.default_rng(seed)
    trial_len = model.runway_len + model.horizon
    values = rng.normal(size=(n_trials, model.n_channels, trial_len)).astype(np.float32)
    if onset_rows is None:
        onset_rows = [model.descriptors[1], model.descriptors[2]]
    onsets = np.asarray([onset_rows[i % len(onset_rows)] for i in range(n_trials)])
    return TrialSet(
        values=values,
        sample_rate_hz=1000.0,
        runway_len=model.runway_len,
        stim_onsets_ms=onsets,
    )


class TestDescriptor:
    def test_standard_geometry_clock_and_pulse_rows(self):
        desc = build_stim_descriptor((40, 70), horizon=164, runway_len=20)
        assert desc.shape == (164, DESCRIPTOR_DIM)
        # clock: linear in trial time, 1 at the final sample
        assert desc[0, 0] == pytest.approx(20 / 183)
        assert desc[-1, 0] == pytest.approx(1.0)
        assert np.allclose(np.diff(desc[:, 0]), 1 / 183)
        # one-hot pulse markers land at horizon steps onset - runway
        assert desc[20, 1] == 1.0 and desc[:, 1].sum() == 1.0
        assert desc[50, 2] == 1.0 and desc[:, 2].sum() == 1.0

    def test_no_stim_descriptor_has_zero_pulse_columns(self):
        desc = build_stim_descriptor((), horizon=164, runway_len=20)
        assert np.array_equal(desc[:, 1:], np.zeros((164, 2)))
        assert desc[:, 0].max() == 1.0

    def test_out_of_horizon_onset_rejected(self):
        with pytest.raises(ValueError):
            build_stim_descriptor((10,), horizon=164, runway_len=20)  # inside runway
        with pytest.raises(ValueError):
            build_stim_descriptor((40, 200), horizon=164, runway_len=20)  # past end

    def test_more_than_two_pulses_rejected(self):
        with pytest.raises(ValueError):
            build_stim_descriptor((40, 50, 60), horizon=164, runway_len=20)

    def test_registry_assigns_sorted_ids_with_zero_reserved(self):
        values = np.zeros((3, 2, 35), dtype=np.float32)
        ts = TrialSet(
            values=values,
            sample_rate_hz=1000.0,
            runway_len=5,
            stim_onsets_ms=np.asarray([[8, 14], [6, 12], [8, 14]]),
        )
        table, ids = descriptor_registry(ts)
        assert table == {1: (6, 12), 2: (8, 14)}
        assert ids.tolist() == [2, 1, 2]

    def test_registry_no_stim_gets_id_zero(self):
        ts = TrialSet(
            values=np.zeros((2, 2, 35), dtype=np.float32),
            sample_rate_hz=1000.0,
            runway_len=5,
            stim_onsets_ms=np.empty((2, 0), dtype=np.int64),
        )
        table, ids = descriptor_registry(ts)
        assert table == {0: ()}
        assert ids.tolist() == [0, 0]


class TestForward:
    def test_prediction_is_affine_in_the_runway(self):
        # With the descriptor fixed, prediction = intercept + linear(runway):
        # affine combinations of inputs map to the same combination of outputs.
        model = tiny_model(dtype=np.float64)
        rng = np.random.default_rng(3)
        r0 = rng.normal(size=(1, 3, 5))
        r1 = rng.normal(size=(1, 3, 5))
        alpha = 0.3
        mixed = model.predict_runways(alpha * r1 + (1 - alpha) * r0, 1)
        combo = alpha * model.predict_runways(r1, 1) + (1 - alpha) * model.predict_runways(r0, 1)
        assert np.allclose(mixed, combo, rtol=1e-10, atol=1e-12)

    def test_shapes_and_dtype(self):
        model = tiny_model()
        ts = tiny_trialset(model, n_trials=6)
        pred = model.predict(ts)
        assert pred.shape == (6, 3, 30)
        assert pred.dtype == np.float32

    def test_batch_matches_grouped_predict_runways(self):
        model = tiny_model()
        ts = tiny_trialset(model, n_trials=7)
        pred = model.predict(ts)
        runways = ts.runways()
        for i in range(7):
            did = 1 if tuple(ts.stim_onsets_ms[i]) == (6, 12) else 2
            single = model.predict_runways(runways[i : i + 1], did)[0]
            assert np.allclose(pred[i], single, rtol=1e-5, atol=1e-6)

    def test_single_forward_matches_batch(self):
        model = tiny_model()
        ts = tiny_trialset(model, n_trials=5)
        pred = model.predict(ts)
        ws = model.make_workspace()
        runways = ts.runways()
        for i in range(5):
            did = 1 if tuple(ts.stim_onsets_ms[i]) == (6, 12) else 2
            out = model.single_forward(runways[i], did, ws)
            assert np.allclose(out, pred[i], rtol=1e-5, atol=1e-6)

    def test_single_forward_reuses_workspace_buffers(self):
        model = tiny_model()
        ws = model.make_workspace()
        rng = np.random.default_rng(5)
        r1 = rng.normal(size=(3, 5)).astype(np.float32)
        r2 = rng.normal(size=(3, 5)).astype(np.float32)
        out1 = model.single_forward(r1, 1, ws)
        assert out1 is ws.out
        first = out1.copy()
        out2 = model.single_forward(r2, 1, ws)
        assert out2 is ws.out
        assert not np.array_equal(out2, first)
        # same input again reproduces the first result exactly
        assert np.array_equal(model.single_forward(r1, 1, ws), first)

    def test_fixed_runway_makes_predictions_trial_independent(self):
        fixed = np.random.default_rng(7).normal(size=(3, 5))
        model = tiny_model(fixed_runway=fixed)
        ts = tiny_trialset(model, n_trials=6, onset_rows=[(6, 12)])
        pred = model.predict(ts)
        assert np.array_equal(pred, np.broadcast_to(pred[0], pred.shape))

    def test_unknown_descriptor_rejected(self):
        model = tiny_model()
        with pytest.raises(KeyError):
            model.descriptor_matrix(99)
        ts = tiny_trialset(model, n_trials=2, onset_rows=[(7, 13)])
        with pytest.raises(KeyError):
            model.predict(ts)

    def test_geometry_mismatch_rejected(self):
        model = tiny_model()
        bad = TrialSet(
            values=np.zeros((2, 3, 40), dtype=np.float32),
            sample_rate_hz=1000.0,
            runway_len=10,
            stim_onsets_ms=np.asarray([[11, 17], [11, 17]]),
        )
        with pytest.raises(ValueError):
            model.predict(bad)

    def test_estimator_size_accounting(self):
        model = tiny_model(n_channels=3, runway_len=5, n_basis=4)
        assert model.theta_a.shape == (3 * 4, 3 * 5)
        assert model.theta_b.shape == (3 * 4,)
        assert model.n_basis == 4


class TestCompile:
    def test_compiled_predictions_bit_identical(self):
        model = tiny_model()
        compiled = compile_model(model)
        ts = tiny_trialset(model, n_trials=9)
        a = model.predict(ts)
        b = compiled.predict(ts)
        assert np.array_equal(a, b)
        assert float(np.abs(a.astype(np.float64) - b.astype(np.float64)).max()) < 1e-5

    def test_compiled_single_forward_bit_identical(self):
        model = tiny_model()
        compiled = compile_model(model)
        rng = np.random.default_rng(11)
        runway = rng.normal(size=(3, 5)).astype(np.float32)
        ws_m, ws_c = model.make_workspace(), compiled.make_workspace()
        for did in (0, 1, 2):
            assert np.array_equal(
                model.single_forward(runway, did, ws_m),
                compiled.single_forward(runway, did, ws_c),
            )

    def test_compile_subset_of_descriptors(self):
        model = tiny_model()
        compiled = compile_model(model, descriptor_ids=[1])
        assert sorted(compiled.bases) == [1]
        ws = compiled.make_workspace()
        runway = np.zeros((3, 5), dtype=np.float32)
        with pytest.raises(KeyError):
            compiled.single_forward(runway, 2, ws)

    def test_with_horizon_is_a_prefix_of_the_full_forecast(self):
        model = tiny_model()
        compiled = compile_model(model)
        short = compiled.with_horizon(12)
        ts = tiny_trialset(model, n_trials=4)
        full = compiled.predict(ts)
        pred = short.predict_runways(ts.runways()[:4], 1)
        sel = [i for i in range(4) if tuple(ts.stim_onsets_ms[i]) == (6, 12)]
        assert short.horizon == 12
        assert np.allclose(pred[sel], full[sel][:, :, :12], rtol=1e-6, atol=1e-7)
        with pytest.raises(ValueError):
            compiled.with_horizon(0)
        with pytest.raises(ValueError):
            compiled.with_horizon(31)

    def test_fixed_runway_survives_compilation(self):
        fixed = np.random.default_rng(13).normal(size=(3, 5))
        model = tiny_model(fixed_runway=fixed)
        compiled = compile_model(model)
        ts = tiny_trialset(model, n_trials=3, onset_rows=[(6, 12)])
        assert np.array_equal(model.predict(ts), compiled.predict(ts))

    def test_workspace_shapes(self):
        model = tiny_model()
        ws = model.make_workspace()
        assert isinstance(ws, Workspace)
        assert ws.xz.shape == (3, 5)
        assert ws.wflat.shape == (12,)
        assert ws.out.shape == (3, 30)


class TestSerialization:
    def test_model_roundtrip_preserves_predictions(self, tmp_path):
        model = tiny_model()
        save_model(tmp_path / "m", model)
        loaded = load_model(tmp_path / "m")
        ts = tiny_trialset(model, n_trials=6)
        assert np.array_equal(model.predict(ts), loaded.predict(ts))
        assert loaded.descriptors == model.descriptors
        assert loaded.n_basis == model.n_basis
        assert loaded.seed == model.seed

    def test_compiled_roundtrip_preserves_predictions(self, tmp_path):
        model = tiny_model()
        compiled = compile_model(model)
        save_compiled(tmp_path / "c", compiled)
        loaded = load_compiled(tmp_path / "c")
        assert isinstance(loaded, CompiledModel)
        ts = tiny_trialset(model, n_trials=6)
        assert np.array_equal(compiled.predict(ts), loaded.predict(ts))
        assert sorted(loaded.bases) == sorted(compiled.bases)
        for k in compiled.bases:
            assert np.array_equal(loaded.bases[k], compiled.bases[k])

    def test_fixed_runway_roundtrip(self, tmp_path):
        fixed = np.random.default_rng(17).normal(size=(3, 5)).astype(np.float32)
        model = tiny_model(fixed_runway=fixed)
        save_model(tmp_path / "m", model)
        loaded = load_model(tmp_path / "m")
        assert np.array_equal(loaded.fixed_runway, model.fixed_runway)

    def test_truncated_params_rejected(self, tmp_path):
        model = tiny_model()
        save_model(tmp_path / "m", model)
        payload = (tmp_path / "m" / "params.f32le").read_bytes()
        (tmp_path / "m" / "params.f32le").write_bytes(payload[:-8])
        with pytest.raises(ValueError):
            load_model(tmp_path / "m")

    def test_wrong_kind_rejected(self, tmp_path):
        import json

        model = tiny_model()
        save_model(tmp_path / "m", model)
        save_compiled(tmp_path / "c", compile_model(model))
        for name, sub in (("model.json", "m"), ("compiled.json", "c")):
            meta_path = tmp_path / sub / name
            meta = json.loads(meta_path.read_text())
            meta["kind"] = "something-else"
            meta_path.write_text(json.dumps(meta))
        with pytest.raises(ValueError):
            load_model(tmp_path / "m")
        with pytest.raises(ValueError):
            load_compiled(tmp_path / "c")
