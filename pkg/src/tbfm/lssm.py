"""Linear state-space baseline: x_{k+1} = A x_k + B u_k, y_k = C x_k.

The initial latent state comes from the last runway sample through the
Moore-Penrose pseudoinverse of the readout, x_0 = pinv(C) y_last, and the
model is trained by gradient descent through the unrolled multi-step L2 loss.
Gradients flow through the pseudoinverse as well (hand-written VJP, verified
against finite differences in the tests).

Inference cost is inherently recurrent: one step per horizon sample, so
latency grows linearly with the horizon, in contrast to the one-shot TBFM.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import DESCRIPTOR_DIM, MODEL_SCHEMA, build_stim_descriptor, descriptor_registry
from .sessiondata import TrialSet
from .train import AdamW, TrainingDivergedError, TrainLog, _plateaued


@dataclass
class LssmConfig:
    latent_dim: int | None = None  # default: one latent per channel
    lr: float = 1e-3
    max_epochs: int = 4000
    batch_size: int = 256  # 0 = full batch
    spectral_radius_max: float = 1.2
    clamp_every: int = 25
    plateau_window: int = 250
    plateau_tol: float = 1e-4
    seed: int = 0


@dataclass
class LssmModel:
    a: np.ndarray  # (n_latent, n_latent)
    b: np.ndarray  # (n_latent, DESCRIPTOR_DIM)
    c: np.ndarray  # (n_channels, n_latent)
    runway_len: int
    horizon: int
    descriptors: dict[int, tuple[int, ...]]

    @property
    def n_channels(self) -> int:
        return self.c.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.a.shape[0]

    @property
    def dtype(self):
        return self.a.dtype

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        n_channels: int,
        runway_len: int,
        horizon: int,
        descriptors: dict[int, tuple[int, ...]],
        latent_dim: int | None = None,
        dtype=np.float32,
    ) -> "LssmModel":
        n = n_channels if latent_dim is None else latent_dim
        a = rng.standard_normal((n, n))
        rho = float(np.max(np.abs(np.linalg.eigvals(a))))
        a *= 0.9 / rho
        bound_b = 1.0 / np.sqrt(DESCRIPTOR_DIM)
        bound_c = 1.0 / np.sqrt(n)
        return cls(
            a=a.astype(dtype),
            b=rng.uniform(-bound_b, bound_b, size=(n, DESCRIPTOR_DIM)).astype(dtype),
            c=rng.uniform(-bound_c, bound_c, size=(n_channels, n)).astype(dtype),
            runway_len=runway_len,
            horizon=horizon,
            descriptors=dict(descriptors),
        )

    def descriptor_matrix(self, descriptor_id: int) -> np.ndarray:
        if descriptor_id not in self.descriptors:
            raise KeyError(f"unknown descriptor id {descriptor_id}")
        return build_stim_descriptor(
            self.descriptors[descriptor_id], self.horizon, self.runway_len, dtype=self.dtype
        )

    def init_state(self, y_last: np.ndarray) -> np.ndarray:
        """x_0 = pinv(C) y_last; y_last is (n_channels,) or (n_channels, batch)."""
        return np.linalg.pinv(self.c.astype(np.float64)).astype(self.dtype) @ y_last

    def predict_runways(self, runways: np.ndarray, descriptor_id: int) -> np.ndarray:
        desc = self.descriptor_matrix(descriptor_id)
        y_last = np.ascontiguousarray(np.asarray(runways, dtype=self.dtype)[:, :, -1]).T
        x = self.init_state(y_last)  # (n_latent, batch)
        n_tr = y_last.shape[1]
        out = np.empty((n_tr, self.n_channels, self.horizon), dtype=self.dtype)
        bu = self.b @ desc.T  # (n_latent, horizon)
        for k in range(self.horizon):
            out[:, :, k] = (self.c @ x).T
            x = self.a @ x + bu[:, k : k + 1]
        return out

    def predict(self, ts: TrialSet) -> np.ndarray:
        by_onsets = {v: k for k, v in self.descriptors.items()}
        ids = np.asarray(
            [by_onsets[tuple(int(o) for o in row)] for row in ts.stim_onsets_ms], dtype=np.int64
        )
        out = np.empty((ts.n_trials, self.n_channels, self.horizon), dtype=self.dtype)
        for did in np.unique(ids):
            sel = ids == did
            out[sel] = self.predict_runways(ts.runways()[sel], int(did))
        return out

    # -- single-trial path for latency benchmarks

    def make_workspace(self) -> "LssmWorkspace":
        n = self.latent_dim
        return LssmWorkspace(
            pinv_c=np.ascontiguousarray(np.linalg.pinv(self.c.astype(np.float64)).astype(self.dtype)),
            x=np.empty(n, dtype=self.dtype),
            x_next=np.empty(n, dtype=self.dtype),
            y_step=np.empty(self.n_channels, dtype=self.dtype),
            out=np.empty((self.n_channels, self.horizon), dtype=self.dtype),
            bu={did: np.ascontiguousarray(self.b @ self.descriptor_matrix(did).T) for did in self.descriptors},
        )

    def single_forward(self, runway: np.ndarray, descriptor_id: int, ws: "LssmWorkspace") -> np.ndarray:
        bu = ws.bu[descriptor_id]
        np.dot(ws.pinv_c, runway[:, -1], out=ws.x)
        for k in range(self.horizon):
            np.dot(self.c, ws.x, out=ws.y_step)
            ws.out[:, k] = ws.y_step
            np.dot(self.a, ws.x, out=ws.x_next)
            ws.x_next += bu[:, k]
            ws.x, ws.x_next = ws.x_next, ws.x
        return ws.out


@dataclass
class LssmWorkspace:
    pinv_c: np.ndarray
    x: np.ndarray
    x_next: np.ndarray
    y_step: np.ndarray
    out: np.ndarray
    bu: dict[int, np.ndarray]


def pinv_vjp(c: np.ndarray, p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d(loss)/dC given P = pinv(C) and G = d(loss)/dP.

    Differential of the pseudoinverse (full-rank C):
      dP = -P dC P + P P^T dC^T (I - C P) + (I - P C) dC^T P^T P
    transposed into the adjoint form.
    """
    i_c = np.eye(c.shape[0], dtype=c.dtype)
    i_n = np.eye(c.shape[1], dtype=c.dtype)
    t1 = -(p.T @ g @ p.T)
    t2 = (i_c - c @ p) @ g.T @ (p @ p.T)
    t3 = (p.T @ p) @ g.T @ (i_n - p @ c)
    return t1 + t2 + t3


def lssm_loss_and_grads(
    model: LssmModel,
    runways: np.ndarray,
    targets: np.ndarray,
    desc_mats: dict[int, np.ndarray],
    trial_ids: np.ndarray,
):
    """Multi-step L2 loss and gradients through the unrolled recursion."""
    a, b, c = model.a, model.b, model.c
    n_lat, horizon = model.latent_dim, model.horizon
    n, n_ch = targets.shape[0], model.n_channels
    norm = n * n_ch * horizon
    p = np.linalg.pinv(c.astype(np.float64)).astype(model.dtype)

    d_a = np.zeros_like(a)
    d_b = np.zeros_like(b)
    d_c = np.zeros_like(c)
    loss_sum = 0.0
    for did in np.unique(trial_ids):
        sel = trial_ids == did
        desc = desc_mats[int(did)]
        y = targets[sel]  # (m, c, T)
        m = y.shape[0]
        v = np.ascontiguousarray(np.asarray(runways[sel], dtype=model.dtype)[:, :, -1]).T
        bu = b @ desc.T  # (n_lat, T)
        states = np.empty((horizon, n_lat, m), dtype=model.dtype)
        x = p @ v
        for k in range(horizon):
            states[k] = x
            if k + 1 < horizon:
                x = a @ x + bu[:, k : k + 1]
        pred = np.einsum("cn,knm->mck", c, states, optimize=True)
        resid = pred - y
        loss_sum += float(np.einsum("mck,mck->", resid, resid, dtype=np.float64))
        d_y = resid * (2.0 / norm)  # (m, c, T)

        dx_next = np.zeros((n_lat, m), dtype=model.dtype)
        du_rows = np.zeros((horizon, n_lat), dtype=model.dtype)
        for k in range(horizon - 1, -1, -1):
            if k + 1 < horizon:
                d_a += dx_next @ states[k].T
                du_rows[k] = dx_next.sum(axis=1)
            dy_k = d_y[:, :, k].T  # (c, m)
            d_c += dy_k @ states[k].T
            dx = c.T @ dy_k
            if k + 1 < horizon:
                dx += a.T @ dx_next
            dx_next = dx
        d_b += du_rows.T @ desc
        # gradient through x0 = P v
        g_p = dx_next @ v.T  # (n_lat, c)
        d_c += pinv_vjp(c, p, g_p)
    return loss_sum / norm, d_a, d_b, d_c


def train_lssm(
    cfg: LssmConfig,
    trainset: TrialSet,
    registry: dict[int, tuple[int, ...]] | None = None,
    dtype=np.float32,
) -> tuple[LssmModel, TrainLog]:
    t0 = time.perf_counter()
    if registry is None:
        registry, _ = descriptor_registry(trainset)
    rng = np.random.default_rng(cfg.seed)
    model = LssmModel.create(
        rng,
        n_channels=trainset.n_channels,
        runway_len=trainset.runway_len,
        horizon=trainset.horizon,
        descriptors=registry,
        latent_dim=cfg.latent_dim,
        dtype=dtype,
    )
    desc_mats = {did: model.descriptor_matrix(did) for did in model.descriptors}
    by_onsets = {v: k for k, v in model.descriptors.items()}
    ids = np.asarray(
        [by_onsets[tuple(int(o) for o in row)] for row in trainset.stim_onsets_ms],
        dtype=np.int64,
    )
    runways = trainset.runways()
    targets = trainset.horizons().astype(dtype)
    n = trainset.n_trials
    bs = n if cfg.batch_size == 0 else min(cfg.batch_size, n)
    opt = AdamW([model.a, model.b, model.c], lr=cfg.lr)
    losses: list = []
    order = np.arange(n)
    pos = n
    plateau = False
    for epoch in range(cfg.max_epochs):
        if bs == n:
            bidx = order
        else:
            if pos + bs > n:
                order = rng.permutation(n)
                pos = 0
            bidx = order[pos : pos + bs]
            pos += bs
        loss, d_a, d_b, d_c = lssm_loss_and_grads(
            model, runways[bidx], targets[bidx], desc_mats, ids[bidx]
        )
        if not np.isfinite(loss):
            raise TrainingDivergedError(epoch, loss)
        losses.append(loss)
        opt.step([model.a, model.b, model.c], [d_a, d_b, d_c])
        if (epoch + 1) % cfg.clamp_every == 0:
            rho = float(np.max(np.abs(np.linalg.eigvals(model.a.astype(np.float64)))))
            if rho > cfg.spectral_radius_max:
                model.a *= cfg.spectral_radius_max / rho
        if len(losses) % cfg.plateau_window == 0 and _plateaued(
            losses, cfg.plateau_window, cfg.plateau_tol
        ):
            plateau = True
            break
    log = TrainLog(
        losses=np.asarray(losses, dtype=np.float64),
        wall_time_s=time.perf_counter() - t0,
        stopped_epoch=len(losses),
        seed=cfg.seed,
        batch_size=cfg.batch_size,
        plateau_stopped=plateau,
    )
    return model, log


def spectral_radius(model: LssmModel) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(model.a.astype(np.float64)))))


def save_lssm(path, model: LssmModel) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": MODEL_SCHEMA,
        "kind": "lssm",
        "n_channels": model.n_channels,
        "latent_dim": model.latent_dim,
        "runway_len": model.runway_len,
        "horizon": model.horizon,
        "descriptors": {str(k): list(v) for k, v in model.descriptors.items()},
    }
    flat = np.concatenate(
        [np.asarray(m, dtype="<f4").reshape(-1) for m in (model.a, model.b, model.c)]
    )
    (path / "params.f32le").write_bytes(flat.tobytes())
    (path / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_lssm(path) -> LssmModel:
    path = Path(path)
    meta = json.loads((path / "model.json").read_text())
    if meta.get("schema_version") != MODEL_SCHEMA or meta.get("kind") != "lssm":
        raise ValueError(f"{path} does not hold a supported LSSM model")
    n, c = meta["latent_dim"], meta["n_channels"]
    raw = np.frombuffer((path / "params.f32le").read_bytes(), dtype="<f4")
    sizes = [n * n, n * DESCRIPTOR_DIM, c * n]
    if raw.size != sum(sizes):
        raise ValueError("params.f32le does not match the declared shapes")
    a = raw[: sizes[0]].reshape(n, n).copy()
    b = raw[sizes[0] : sizes[0] + sizes[1]].reshape(n, DESCRIPTOR_DIM).copy()
    cm = raw[sizes[0] + sizes[1] :].reshape(c, n).copy()
    return LssmModel(
        a=a,
        b=b,
        c=cm,
        runway_len=meta["runway_len"],
        horizon=meta["horizon"],
        descriptors={int(k): tuple(v) for k, v in meta["descriptors"].items()},
    )
