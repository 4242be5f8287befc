"""TBFM model: stim descriptors, basis generator, weight estimator, compilation.

The forecast for one trial is built from two pieces:

* a basis matrix ``B`` (n_basis x horizon) produced from the stim descriptor by
  a small MLP applied independently at every horizon step, and
* per-channel basis weights ``W`` (n_channels x n_basis) produced from the
  z-scored, channel-major-flattened runway by one affine map.

The prediction is ``y_hat[ch] = x[ch, -1] + W[ch] @ B`` with the intercept
taken from the raw (not z-scored) last runway sample.  Because ``B`` depends
only on the descriptor, inference with a known descriptor reduces to one
affine map plus one small matrix product; ``compile_model`` freezes exactly
that form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sessiondata import TrialSet, ZScoreStats

DESCRIPTOR_DIM = 3  # clock ramp + one-hot per pulse
DEFAULT_HIDDEN = (4, 4, 4, 4)
DEFAULT_N_BASIS = 12
MODEL_SCHEMA = 1


# ---------------------------------------------------------------------------
# stim descriptors


def build_stim_descriptor(
    onsets_ms,
    horizon: int,
    runway_len: int,
    dtype=np.float32,
) -> np.ndarray:
    """(horizon, 3) descriptor: linear clock plus one-hot pulse indicators.

    The clock is linear in trial time, 0 at trial start and 1 at the last
    trial sample, evaluated on the horizon slice.  Onsets are trial-relative
    ms (sample indices at 1 kHz); an empty onset list gives a no-stim
    descriptor whose one-hot columns are all zero.
    """
    onsets = [int(o) for o in onsets_ms]
    if len(onsets) > 2:
        raise ValueError("descriptors support at most two pulses")
    trial_len = runway_len + horizon
    desc = np.zeros((horizon, DESCRIPTOR_DIM), dtype=dtype)
    desc[:, 0] = (runway_len + np.arange(horizon)) / (trial_len - 1)
    for col, onset in enumerate(onsets, start=1):
        h = onset - runway_len
        if not 0 <= h < horizon:
            raise ValueError(f"pulse onset {onset} ms falls outside the horizon")
        desc[h, col] = 1
    return desc


def descriptor_registry(ts: TrialSet) -> tuple[dict[int, tuple[int, ...]], np.ndarray]:
    """Map distinct per-trial onset patterns to small integer ids.

    Id 0 is reserved for the no-stim pattern; stim patterns get 1.. in sorted
    onset order.  Returns (id -> onsets) and the per-trial id array.
    """
    patterns = [tuple(int(o) for o in row) for row in ts.stim_onsets_ms]
    unique = sorted(set(patterns))
    table: dict[int, tuple[int, ...]] = {}
    next_id = 1
    for pat in unique:
        if pat == ():
            table[0] = pat
        else:
            table[next_id] = pat
            next_id += 1
    ids = {pat: i for i, pat in table.items()}
    return table, np.asarray([ids[p] for p in patterns], dtype=np.int64)


# ---------------------------------------------------------------------------
# basis generators


def _init_mlp(rng: np.random.Generator, dims: list[int], dtype) -> tuple[list, list]:
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))
    return weights, biases


def _mlp_forward(weights, biases, desc: np.ndarray, want_cache: bool):
    """Per-step MLP, tanh on hidden layers, linear output. desc is (T, in_dim)."""
    h = desc
    cache = [h] if want_cache else None
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w.T + b
        if i != last:
            h = np.tanh(h)
        if want_cache:
            cache.append(h)
    return h, cache


def _mlp_backward(weights, cache, d_out):
    """Gradients for _mlp_forward.  d_out is (T, out_dim); returns (dWs, dbs)."""
    d_ws = [None] * len(weights)
    d_bs = [None] * len(weights)
    dh = d_out
    for i in range(len(weights) - 1, -1, -1):
        if i != len(weights) - 1:
            dh = dh * (1.0 - cache[i + 1] ** 2)  # tanh'
        d_ws[i] = dh.T @ cache[i]
        d_bs[i] = dh.sum(axis=0)
        if i > 0:
            dh = dh @ weights[i]
    return d_ws, d_bs


@dataclass
class MlpBasisGenerator:
    """One MLP emitting all n_basis outputs per horizon step."""

    weights: list
    biases: list
    n_basis: int

    kind = "mlp"

    @classmethod
    def create(cls, rng, n_basis: int, hidden=DEFAULT_HIDDEN, dtype=np.float32):
        dims = [DESCRIPTOR_DIM, *hidden, n_basis]
        w, b = _init_mlp(rng, dims, dtype)
        return cls(weights=w, biases=b, n_basis=n_basis)

    def forward(self, desc: np.ndarray) -> np.ndarray:
        out, _ = _mlp_forward(self.weights, self.biases, desc, want_cache=False)
        return np.ascontiguousarray(out.T)  # (n_basis, horizon)

    def forward_cached(self, desc: np.ndarray):
        out, cache = _mlp_forward(self.weights, self.biases, desc, want_cache=True)
        return np.ascontiguousarray(out.T), cache

    def backward(self, cache, d_basis: np.ndarray):
        d_ws, d_bs = _mlp_backward(self.weights, cache, d_basis.T)
        return d_ws + d_bs

    def params(self) -> list:
        return self.weights + self.biases

    def hidden_dims(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]


@dataclass
class AdditiveBasisGenerator:
    """One single-output sub-MLP per basis; rows of B come from separate nets.

    Used by stagewise-additive training, where only the sub-MLP of the basis
    currently being learned receives gradient updates.
    """

    sub_weights: list  # sub_weights[i] is the layer list of sub-MLP i
    sub_biases: list

    kind = "additive"

    @classmethod
    def create(cls, rng, n_basis: int, hidden=DEFAULT_HIDDEN, dtype=np.float32):
        dims = [DESCRIPTOR_DIM, *hidden, 1]
        sw, sb = [], []
        for _ in range(n_basis):
            w, b = _init_mlp(rng, dims, dtype)
            sw.append(w)
            sb.append(b)
        return cls(sub_weights=sw, sub_biases=sb)

    @property
    def n_basis(self) -> int:
        return len(self.sub_weights)

    def forward(self, desc: np.ndarray, n_active: int | None = None) -> np.ndarray:
        n = self.n_basis if n_active is None else n_active
        rows = []
        for i in range(n):
            out, _ = _mlp_forward(self.sub_weights[i], self.sub_biases[i], desc, want_cache=False)
            rows.append(out[:, 0])
        return np.ascontiguousarray(np.stack(rows))

    def forward_cached(self, desc: np.ndarray, n_active: int):
        rows, caches = [], []
        for i in range(n_active):
            out, cache = _mlp_forward(self.sub_weights[i], self.sub_biases[i], desc, want_cache=True)
            rows.append(out[:, 0])
            caches.append(cache)
        return np.ascontiguousarray(np.stack(rows)), caches

    def backward_stage(self, stage: int, cache, d_basis_row: np.ndarray):
        """Gradients for sub-MLP ``stage`` only; d_basis_row is (horizon,)."""
        d_ws, d_bs = _mlp_backward(self.sub_weights[stage], cache, d_basis_row[:, None])
        return d_ws + d_bs

    def stage_params(self, stage: int) -> list:
        return self.sub_weights[stage] + self.sub_biases[stage]

    def params(self) -> list:
        out = []
        for i in range(self.n_basis):
            out.extend(self.stage_params(i))
        return out

    def hidden_dims(self) -> list[int]:
        return [w.shape[0] for w in self.sub_weights[0][:-1]]


# ---------------------------------------------------------------------------
# the model


@dataclass
class TbfmModel:
    """Trained TBFM: basis generator + affine weight estimator + z-score stats.

    ``fixed_runway`` (n_channels, runway_len), when set, replaces every input
    runway including the raw intercept sample — the state-agnostic variant
    whose predictions are identical for all trials.
    """

    generator: MlpBasisGenerator | AdditiveBasisGenerator
    theta_a: np.ndarray  # (n_channels * n_basis, n_channels * runway_len)
    theta_b: np.ndarray  # (n_channels * n_basis,)
    mean: np.ndarray     # (n_channels,) z-score mean, model dtype
    inv_std: np.ndarray  # (n_channels,) reciprocal z-score std, model dtype
    n_channels: int
    runway_len: int
    horizon: int
    descriptors: dict[int, tuple[int, ...]]
    fixed_runway: np.ndarray | None = None
    seed: int | None = None

    @property
    def n_basis(self) -> int:
        return self.generator.n_basis

    @property
    def dtype(self):
        return self.theta_a.dtype

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        n_channels: int,
        runway_len: int,
        horizon: int,
        zstats: ZScoreStats,
        descriptors: dict[int, tuple[int, ...]],
        n_basis: int = DEFAULT_N_BASIS,
        hidden=DEFAULT_HIDDEN,
        additive: bool = False,
        dtype=np.float32,
        seed: int | None = None,
    ) -> "TbfmModel":
        gen_cls = AdditiveBasisGenerator if additive else MlpBasisGenerator
        generator = gen_cls.create(rng, n_basis, hidden=hidden, dtype=dtype)
        cr, cb = n_channels * runway_len, n_channels * n_basis
        bound = 1.0 / np.sqrt(cr)
        theta_a = rng.uniform(-bound, bound, size=(cb, cr)).astype(dtype)
        theta_b = np.zeros(cb, dtype=dtype)
        return cls(
            generator=generator,
            theta_a=theta_a,
            theta_b=theta_b,
            mean=zstats.mean.astype(dtype),
            inv_std=(1.0 / zstats.std).astype(dtype),
            n_channels=n_channels,
            runway_len=runway_len,
            horizon=horizon,
            descriptors=dict(descriptors),
            seed=seed,
        )

    # -- descriptor helpers

    def descriptor_matrix(self, descriptor_id: int) -> np.ndarray:
        if descriptor_id not in self.descriptors:
            raise KeyError(f"unknown descriptor id {descriptor_id}")
        return build_stim_descriptor(
            self.descriptors[descriptor_id], self.horizon, self.runway_len, dtype=self.dtype
        )

    def bases(self, descriptor_id: int) -> np.ndarray:
        return self.generator.forward(self.descriptor_matrix(descriptor_id))

    def _trial_descriptor_ids(self, ts: TrialSet) -> np.ndarray:
        by_onsets = {v: k for k, v in self.descriptors.items()}
        ids = np.empty(ts.n_trials, dtype=np.int64)
        for i, row in enumerate(ts.stim_onsets_ms):
            pat = tuple(int(o) for o in row)
            if pat not in by_onsets:
                raise KeyError(f"unknown descriptor onsets {pat}")
            ids[i] = by_onsets[pat]
        return ids

    # -- forward paths

    def prep_runways(self, runways: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Returns (flattened z-scored runways (n, c*r), raw last samples (n, c)).

        All model dtypes; the z-score here is computed in the model dtype so
        batch, single-call, and compiled paths see bit-identical inputs.
        """
        x = np.asarray(runways, dtype=self.dtype)
        if self.fixed_runway is not None:
            x = np.broadcast_to(self.fixed_runway.astype(self.dtype), x.shape)
        xz = (x - self.mean[None, :, None]) * self.inv_std[None, :, None]
        n = x.shape[0]
        return xz.reshape(n, -1), np.ascontiguousarray(x[:, :, -1])

    def weights_from(self, xz_flat: np.ndarray) -> np.ndarray:
        """(n, c*r) z-scored runways -> (n, n_channels, n_basis) basis weights."""
        w = xz_flat @ self.theta_a.T + self.theta_b
        return w.reshape(len(xz_flat), self.n_channels, self.n_basis)

    def predict_runways(self, runways: np.ndarray, descriptor_id: int) -> np.ndarray:
        xz, last = self.prep_runways(runways)
        w = self.weights_from(xz)
        basis = self.bases(descriptor_id)
        n = len(xz)
        pred = (w.reshape(n * self.n_channels, -1) @ basis).reshape(
            n, self.n_channels, self.horizon
        )
        pred += last[:, :, None]
        return pred

    def predict(self, ts: TrialSet) -> np.ndarray:
        """(n_trials, n_channels, horizon) forecasts for a trial set."""
        if ts.runway_len != self.runway_len or ts.horizon != self.horizon:
            raise ValueError("trial geometry does not match the model")
        ids = self._trial_descriptor_ids(ts)
        out = np.empty((ts.n_trials, self.n_channels, self.horizon), dtype=self.dtype)
        for did in np.unique(ids):
            sel = ids == did
            out[sel] = self.predict_runways(ts.runways()[sel], int(did))
        return out

    def make_workspace(self) -> "Workspace":
        return Workspace.for_shape(self.n_channels, self.runway_len, self.n_basis, self.horizon, self.dtype)

    def single_forward(self, runway: np.ndarray, descriptor_id: int, ws: "Workspace") -> np.ndarray:
        """One-trial forecast, recomputing the basis matrix on every call."""
        basis = self.bases(descriptor_id)
        return _estimator_single(self, runway, basis, ws)


@dataclass
class Workspace:
    """Preallocated buffers for single-trial inference (one per thread)."""

    xz: np.ndarray
    wflat: np.ndarray
    out: np.ndarray

    @classmethod
    def for_shape(cls, n_channels, runway_len, n_basis, horizon, dtype):
        return cls(
            xz=np.empty((n_channels, runway_len), dtype=dtype),
            wflat=np.empty(n_channels * n_basis, dtype=dtype),
            out=np.empty((n_channels, horizon), dtype=dtype),
        )


def _estimator_single(model, runway: np.ndarray, basis: np.ndarray, ws: Workspace) -> np.ndarray:
    """Shared allocation-free estimator path: z-score, affine map, basis product."""
    x = runway
    if model.fixed_runway is not None:
        x = model.fixed_runway
    np.subtract(x, model.mean[:, None], out=ws.xz)
    np.multiply(ws.xz, model.inv_std[:, None], out=ws.xz)
    np.dot(model.theta_a, ws.xz.reshape(-1), out=ws.wflat)
    ws.wflat += model.theta_b
    w = ws.wflat.reshape(model.n_channels, model.n_basis)
    np.dot(w, basis, out=ws.out)
    ws.out += x[:, -1:]
    return ws.out


# ---------------------------------------------------------------------------
# compiled form


@dataclass
class CompiledModel:
    """Descriptor-frozen TBFM: estimator parameters plus per-descriptor bases.

    Generator parameters are deliberately absent.  ``single_forward`` is
    allocation-free given a caller-owned :class:`Workspace`; parameters are
    read-only at inference so concurrent calls need only distinct workspaces.
    """

    theta_a: np.ndarray
    theta_b: np.ndarray
    mean: np.ndarray
    inv_std: np.ndarray
    bases: dict[int, np.ndarray]  # descriptor id -> (n_basis, horizon)
    n_channels: int
    runway_len: int
    horizon: int
    descriptors: dict[int, tuple[int, ...]]
    fixed_runway: np.ndarray | None = None

    @property
    def n_basis(self) -> int:
        return self.theta_b.shape[0] // self.n_channels

    @property
    def dtype(self):
        return self.theta_a.dtype

    def make_workspace(self) -> Workspace:
        return Workspace.for_shape(self.n_channels, self.runway_len, self.n_basis, self.horizon, self.dtype)

    def single_forward(self, runway: np.ndarray, descriptor_id: int, ws: Workspace) -> np.ndarray:
        basis = self.bases.get(descriptor_id)
        if basis is None:
            raise KeyError(f"descriptor id {descriptor_id} was not compiled")
        return _estimator_single(self, runway, basis, ws)

    def predict_runways(self, runways: np.ndarray, descriptor_id: int) -> np.ndarray:
        basis = self.bases.get(descriptor_id)
        if basis is None:
            raise KeyError(f"descriptor id {descriptor_id} was not compiled")
        x = np.asarray(runways, dtype=self.dtype)
        if self.fixed_runway is not None:
            x = np.broadcast_to(self.fixed_runway.astype(self.dtype), x.shape)
        xz = ((x - self.mean[None, :, None]) * self.inv_std[None, :, None]).reshape(len(x), -1)
        w = xz @ self.theta_a.T + self.theta_b
        n = len(x)
        pred = (w.reshape(n * self.n_channels, -1) @ basis).reshape(n, self.n_channels, self.horizon)
        pred += np.ascontiguousarray(x[:, :, -1])[:, :, None]
        return pred

    def predict(self, ts: TrialSet) -> np.ndarray:
        by_onsets = {v: k for k, v in self.descriptors.items()}
        out = np.empty((ts.n_trials, self.n_channels, self.horizon), dtype=self.dtype)
        ids = np.asarray(
            [by_onsets[tuple(int(o) for o in row)] for row in ts.stim_onsets_ms], dtype=np.int64
        )
        for did in np.unique(ids):
            sel = ids == did
            out[sel] = self.predict_runways(ts.runways()[sel], int(did))
        return out

    def with_horizon(self, horizon: int) -> "CompiledModel":
        """Shorter-horizon variant sharing parameters; bases are sliced views."""
        if not 0 < horizon <= self.horizon:
            raise ValueError("horizon must shrink")
        return CompiledModel(
            theta_a=self.theta_a,
            theta_b=self.theta_b,
            mean=self.mean,
            inv_std=self.inv_std,
            bases={k: np.ascontiguousarray(v[:, :horizon]) for k, v in self.bases.items()},
            n_channels=self.n_channels,
            runway_len=self.runway_len,
            horizon=horizon,
            descriptors=dict(self.descriptors),
            fixed_runway=self.fixed_runway,
        )


def compile_model(model: TbfmModel, descriptor_ids=None) -> CompiledModel:
    """Freeze per-descriptor bases and drop the generator."""
    ids = sorted(model.descriptors) if descriptor_ids is None else sorted(descriptor_ids)
    bases = {int(i): np.ascontiguousarray(model.bases(int(i))) for i in ids}
    return CompiledModel(
        theta_a=np.ascontiguousarray(model.theta_a),
        theta_b=np.ascontiguousarray(model.theta_b),
        mean=model.mean.copy(),
        inv_std=model.inv_std.copy(),
        bases=bases,
        n_channels=model.n_channels,
        runway_len=model.runway_len,
        horizon=model.horizon,
        descriptors={int(i): model.descriptors[int(i)] for i in ids},
        fixed_runway=None if model.fixed_runway is None else model.fixed_runway.copy(),
    )


# ---------------------------------------------------------------------------
# serialization
#
# model dir:    model.json + params.f32le   (generator layers, theta_a, theta_b)
# compiled dir: compiled.json + bases.f32le (stacked by ascending descriptor id)
#               + params.f32le              (estimator only)


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _flat_concat(arrays) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype="<f4").reshape(-1) for a in arrays])


def save_model(path, model: TbfmModel) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": MODEL_SCHEMA,
        "kind": "tbfm",
        "n_channels": model.n_channels,
        "runway_len": model.runway_len,
        "horizon": model.horizon,
        "n_basis": model.n_basis,
        "generator": {"kind": model.generator.kind, "hidden": model.generator.hidden_dims()},
        "descriptors": {str(k): list(v) for k, v in model.descriptors.items()},
        "zscore_mean": model.mean.astype(np.float64).tolist(),
        "zscore_inv_std": model.inv_std.astype(np.float64).tolist(),
        "fixed_runway": None
        if model.fixed_runway is None
        else model.fixed_runway.astype(np.float64).tolist(),
        "seed": model.seed,
    }
    params = _flat_concat(model.generator.params() + [model.theta_a, model.theta_b])
    (path / "params.f32le").write_bytes(params.tobytes())
    _dump_json(path / "model.json", meta)


def load_model(path) -> TbfmModel:
    path = Path(path)
    meta = json.loads((path / "model.json").read_text())
    if meta.get("schema_version") != MODEL_SCHEMA or meta.get("kind") != "tbfm":
        raise ValueError(f"{path} does not hold a supported model")
    c, r, horizon = meta["n_channels"], meta["runway_len"], meta["horizon"]
    n_basis = meta["n_basis"]
    hidden = meta["generator"]["hidden"]
    raw = np.frombuffer((path / "params.f32le").read_bytes(), dtype="<f4")
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = raw[pos : pos + n].reshape(shape).copy()
        pos += n
        return out

    if meta["generator"]["kind"] == "mlp":
        dims = [DESCRIPTOR_DIM, *hidden, n_basis]
        weights = [take((o, i)) for i, o in zip(dims[:-1], dims[1:])]
        biases = [take((o,)) for o in dims[1:]]
        # params are stored in params() order: all weights then all biases
        generator = MlpBasisGenerator(weights=weights, biases=biases, n_basis=n_basis)
    elif meta["generator"]["kind"] == "additive":
        dims = [DESCRIPTOR_DIM, *hidden, 1]
        sw, sb = [], []
        for _ in range(n_basis):
            sw.append([take((o, i)) for i, o in zip(dims[:-1], dims[1:])])
            sb.append([take((o,)) for o in dims[1:]])
        generator = AdditiveBasisGenerator(sub_weights=sw, sub_biases=sb)
    else:
        raise ValueError(f"unknown generator kind {meta['generator']['kind']!r}")
    theta_a = take((c * n_basis, c * r))
    theta_b = take((c * n_basis,))
    if pos != raw.size:
        raise ValueError("params.f32le does not match the declared shapes")
    return TbfmModel(
        generator=generator,
        theta_a=theta_a,
        theta_b=theta_b,
        mean=np.asarray(meta["zscore_mean"], dtype=np.float32),
        inv_std=np.asarray(meta["zscore_inv_std"], dtype=np.float32),
        n_channels=c,
        runway_len=r,
        horizon=horizon,
        descriptors={int(k): tuple(v) for k, v in meta["descriptors"].items()},
        fixed_runway=None
        if meta["fixed_runway"] is None
        else np.asarray(meta["fixed_runway"], dtype=np.float32),
        seed=meta.get("seed"),
    )


def save_compiled(path, compiled: CompiledModel) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ids = sorted(compiled.bases)
    meta = {
        "schema_version": MODEL_SCHEMA,
        "kind": "tbfm-compiled",
        "n_channels": compiled.n_channels,
        "runway_len": compiled.runway_len,
        "horizon": compiled.horizon,
        "n_basis": compiled.n_basis,
        "descriptor_ids": ids,
        "descriptors": {str(k): list(compiled.descriptors[k]) for k in ids},
        "zscore_mean": compiled.mean.astype(np.float64).tolist(),
        "zscore_inv_std": compiled.inv_std.astype(np.float64).tolist(),
        "fixed_runway": None
        if compiled.fixed_runway is None
        else compiled.fixed_runway.astype(np.float64).tolist(),
    }
    (path / "bases.f32le").write_bytes(_flat_concat([compiled.bases[i] for i in ids]).tobytes())
    (path / "params.f32le").write_bytes(_flat_concat([compiled.theta_a, compiled.theta_b]).tobytes())
    _dump_json(path / "compiled.json", meta)


def load_compiled(path) -> CompiledModel:
    path = Path(path)
    meta = json.loads((path / "compiled.json").read_text())
    if meta.get("schema_version") != MODEL_SCHEMA or meta.get("kind") != "tbfm-compiled":
        raise ValueError(f"{path} does not hold a supported compiled model")
    c, r, horizon, n_basis = (
        meta["n_channels"],
        meta["runway_len"],
        meta["horizon"],
        meta["n_basis"],
    )
    raw_b = np.frombuffer((path / "bases.f32le").read_bytes(), dtype="<f4")
    ids = meta["descriptor_ids"]
    if raw_b.size != len(ids) * n_basis * horizon:
        raise ValueError("bases.f32le does not match the declared shapes")
    bases = {
        int(did): raw_b[i * n_basis * horizon : (i + 1) * n_basis * horizon]
        .reshape(n_basis, horizon)
        .copy()
        for i, did in enumerate(ids)
    }
    raw_p = np.frombuffer((path / "params.f32le").read_bytes(), dtype="<f4")
    if raw_p.size != c * n_basis * c * r + c * n_basis:
        raise ValueError("params.f32le does not match the declared shapes")
    theta_a = raw_p[: c * n_basis * c * r].reshape(c * n_basis, c * r).copy()
    theta_b = raw_p[c * n_basis * c * r :].copy()
    return CompiledModel(
        theta_a=theta_a,
        theta_b=theta_b,
        mean=np.asarray(meta["zscore_mean"], dtype=np.float32),
        inv_std=np.asarray(meta["zscore_inv_std"], dtype=np.float32),
        bases=bases,
        n_channels=c,
        runway_len=r,
        horizon=horizon,
        descriptors={int(k): tuple(v) for k, v in meta["descriptors"].items()},
        fixed_runway=None
        if meta["fixed_runway"] is None
        else np.asarray(meta["fixed_runway"], dtype=np.float32),
    )
