"""Gradient training for TBFMs: joint, state-agnostic, and stagewise-additive.

The loss is

    L = mean((y_hat - y)^2) + lambda * ||theta_A||_F

with the Frobenius norm (not its square) applied to the weight-estimator
design matrix only.  Optimization is AdamW (decoupled weight decay, zero by
default so regularization stays explicit).  One "epoch" is one optimizer step
on one batch; ``batch_size=0`` selects full-batch steps.  Training stops on a
windowed training-loss plateau or at ``max_epochs``, whichever comes first.

All gradients are hand-written and verified against central finite
differences in the test suite (models can be built in float64 for that).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .model import (
    DEFAULT_HIDDEN,
    DEFAULT_N_BASIS,
    AdditiveBasisGenerator,
    MlpBasisGenerator,
    TbfmModel,
    build_stim_descriptor,
    descriptor_registry,
)
from .sessiondata import TrialSet, compute_zscore


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss turns non-finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became non-finite at epoch {epoch}: {loss}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class TrainConfig:
    n_basis: int = DEFAULT_N_BASIS
    lam: float = 0.05
    lr: float = 2e-4
    max_epochs: int = 15000
    batch_size: int = 256  # 0 = full batch
    weight_decay: float = 0.0
    plateau_window: int = 500
    plateau_tol: float = 1e-4
    hidden: tuple = DEFAULT_HIDDEN
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lam < 0 or self.lr <= 0 or self.max_epochs < 1:
            raise ValueError("lam must be >= 0, lr > 0, max_epochs >= 1")
        if self.batch_size < 0 or self.plateau_window < 1:
            raise ValueError("batch_size must be >= 0, plateau_window >= 1")


@dataclass
class TrainLog:
    losses: np.ndarray  # per-epoch training loss, float64
    wall_time_s: float
    stopped_epoch: int  # number of epochs actually run
    seed: int
    batch_size: int
    plateau_stopped: bool

    def to_json_dict(self) -> dict:
        return {
            "losses": [float(x) for x in self.losses],
            "wall_time_s": self.wall_time_s,
            "stopped_epoch": self.stopped_epoch,
            "seed": self.seed,
            "batch_size": self.batch_size,
            "plateau_stopped": self.plateau_stopped,
        }


@njit(cache=True)
def _adamw_kernel(p, g, m, v, decay, b1, one_m_b1, b2, one_m_b2, inv_sqrt_bc2, eps, step_scale):
    # One fused pass over the four arrays instead of ~13 vectorized sweeps:
    # on large parameter blocks the update is memory-bound, so the single
    # read/write per array is what makes it fast.  All scalars arrive already
    # cast to the parameter dtype so the arithmetic stays in that precision.
    for i in range(p.size):
        pi = p[i] * decay
        gi = g[i]
        mi = m[i] * b1 + gi * one_m_b1
        m[i] = mi
        vi = v[i] * b2 + (gi * gi) * one_m_b2
        v[i] = vi
        denom = np.sqrt(vi) * inv_sqrt_bc2 + eps
        p[i] = pi - (mi / denom) * step_scale


class AdamW:
    """Adam with decoupled weight decay; in-place updates, no per-step allocs."""

    def __init__(self, params, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads) -> None:
        """Update params in place.  A grad of None skips that parameter."""
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        inv_sqrt_bc2 = 1.0 / np.sqrt(bc2)
        step_scale = self.lr / bc1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if g is None:
                continue
            if not p.flags.c_contiguous:
                raise ValueError("AdamW requires C-contiguous parameter arrays")
            g = np.ascontiguousarray(g, dtype=p.dtype)
            cast = p.dtype.type
            decay = cast(1.0 - self.lr * self.weight_decay) if self.weight_decay else cast(1.0)
            _adamw_kernel(
                p.reshape(-1),
                g.reshape(-1),
                m.reshape(-1),
                v.reshape(-1),
                decay,
                cast(self.b1),
                cast(1.0 - self.b1),
                cast(self.b2),
                cast(1.0 - self.b2),
                cast(inv_sqrt_bc2),
                cast(self.eps),
                cast(step_scale),
            )


# ---------------------------------------------------------------------------
# loss and gradients


def _prepare_arrays(model: TbfmModel, ts: TrialSet):
    """Z-scored flat runways and intercept-removed targets, in model dtype."""
    xz, last = model.prep_runways(ts.runways())
    resid = ts.horizons().astype(model.dtype) - last[:, :, None]
    return xz, np.ascontiguousarray(resid)


def loss_and_grads(
    model: TbfmModel,
    xz_flat: np.ndarray,
    y_resid: np.ndarray,
    desc_mats: dict[int, np.ndarray],
    trial_ids: np.ndarray,
    lam: float,
    active_basis: int | None = None,
    active_stage: int | None = None,
):
    """Full loss and gradients for a batch.

    Returns (loss, generator_grads, d_theta_a, d_theta_b).  For additive
    generators, ``active_basis`` restricts the model to its first k bases and
    ``active_stage`` selects the single sub-MLP that receives gradients (its
    grads are returned; all other generator grads are None).
    """
    n, c = y_resid.shape[0], model.n_channels
    b_all = model.n_basis
    b = b_all if active_basis is None else active_basis
    horizon = model.horizon
    w_flat = xz_flat @ model.theta_a.T
    w_flat += model.theta_b
    w_full = w_flat.reshape(n, c, b_all)
    w = w_full[:, :, :b]

    uniq = np.unique(trial_ids)
    # With one descriptor group and no basis restriction, every boolean-mask
    # copy below would be a full-array copy of itself; use views instead and
    # write the weight gradient straight into its final layout.
    single = len(uniq) == 1 and b == b_all
    dw = None if single else np.zeros((n, c, b_all), dtype=model.dtype)
    d_wflat = None
    gen_grads = None
    loss_sum = 0.0
    norm = n * c * horizon
    additive = isinstance(model.generator, AdditiveBasisGenerator)
    for did in uniq:
        desc = desc_mats[int(did)]
        if additive:
            basis, cache = model.generator.forward_cached(desc, n_active=b)
        else:
            basis, cache = model.generator.forward_cached(desc)
        if single:
            mg = n
            wg = w_flat.reshape(n * c, b_all)
            yg = y_resid.reshape(n * c, horizon)
        else:
            sel = trial_ids == did
            mg = int(sel.sum())
            wg = np.ascontiguousarray(w[sel]).reshape(mg * c, b)
            yg = y_resid[sel].reshape(mg * c, horizon)
        pred = wg @ basis
        np.subtract(pred, yg, out=pred)  # pred now holds the residual
        rflat = pred.reshape(-1)
        loss_sum += float(rflat @ rflat)
        pred *= 2.0 / norm  # and now the loss gradient w.r.t. the prediction
        gw = pred @ basis.T
        if single:
            d_wflat = gw.reshape(n, c * b_all)
        else:
            dw[sel, :, :b] = gw.reshape(mg, c, b)
        d_basis = wg.T @ pred
        if additive:
            if active_stage is not None:
                stage_grads = model.generator.backward_stage(
                    active_stage, cache[active_stage], d_basis[active_stage]
                )
                if gen_grads is None:
                    gen_grads = [None] * len(model.generator.params())
                    per = len(stage_grads)
                    for j, sg in enumerate(stage_grads):
                        gen_grads[active_stage * per + j] = sg
                else:
                    per = len(stage_grads)
                    for j, sg in enumerate(stage_grads):
                        gen_grads[active_stage * per + j] += sg
        else:
            g = model.generator.backward(cache, d_basis)
            if gen_grads is None:
                gen_grads = g
            else:
                gen_grads = [a + bgr for a, bgr in zip(gen_grads, g)]
    if gen_grads is None:
        gen_grads = [None] * len(model.generator.params())

    loss = loss_sum / norm
    if not single:
        d_wflat = dw.reshape(n, c * b_all)
    d_theta_a = d_wflat.T @ xz_flat
    d_theta_b = d_wflat.sum(axis=0)

    if lam > 0:
        ta_flat = model.theta_a.reshape(-1)
        fro = float(np.sqrt(ta_flat @ ta_flat))
        loss += lam * fro
        if fro > 0:
            d_theta_a += (lam / fro) * model.theta_a
    return loss, gen_grads, d_theta_a, d_theta_b


def _descriptor_matrices(model: TbfmModel) -> dict[int, np.ndarray]:
    return {did: model.descriptor_matrix(did) for did in model.descriptors}


def _plateaued(losses: list, window: int, tol: float) -> bool:
    if len(losses) < 2 * window:
        return False
    cur = float(np.mean(losses[-window:]))
    prev = float(np.mean(losses[-2 * window : -window]))
    if prev == 0:
        return True
    return (prev - cur) / abs(prev) < tol


def _run_epochs(
    model: TbfmModel,
    opt: AdamW,
    xz: np.ndarray,
    y_resid: np.ndarray,
    desc_mats,
    ids: np.ndarray,
    cfg_epochs: int,
    batch_size: int,
    lam: float,
    rng: np.random.Generator,
    plateau_window: int,
    plateau_tol: float,
    active_basis: int | None = None,
    active_stage: int | None = None,
    theta_slice: slice | None = None,
) -> tuple[list, bool]:
    n = len(xz)
    bs = n if batch_size == 0 else min(batch_size, n)
    losses: list = []
    order = np.arange(n)
    pos = n  # trigger reshuffle on first step
    gen_params = model.generator.params()
    params = gen_params + [model.theta_a, model.theta_b]
    plateau = False
    for _ in range(cfg_epochs):
        if bs == n:
            xb, yb, idb = xz, y_resid, ids  # full batch: no copy, no shuffle
        else:
            if pos + bs > n:
                order = rng.permutation(n)
                pos = 0
            bidx = order[pos : pos + bs]
            pos += bs
            xb, yb, idb = xz[bidx], y_resid[bidx], ids[bidx]
        loss, gen_grads, d_ta, d_tb = loss_and_grads(
            model,
            xb,
            yb,
            desc_mats,
            idb,
            lam,
            active_basis=active_basis,
            active_stage=active_stage,
        )
        if not np.isfinite(loss):
            raise TrainingDivergedError(len(losses), loss)
        losses.append(loss)
        opt.step(params, gen_grads + [d_ta, d_tb])
        if len(losses) % plateau_window == 0 and _plateaued(losses, plateau_window, plateau_tol):
            plateau = True
            break
    return losses, plateau


def train(
    cfg: TrainConfig,
    trainset: TrialSet,
    registry: dict[int, tuple[int, ...]] | None = None,
    fixed_runway: np.ndarray | None = None,
    dtype=np.float32,
) -> tuple[TbfmModel, TrainLog]:
    """Joint gradient training of generator and estimator on a stim trial set."""
    t0 = time.perf_counter()
    if registry is None:
        registry, _ = descriptor_registry(trainset)
    zstats = compute_zscore(trainset)
    rng = np.random.default_rng(cfg.seed)
    model = TbfmModel.create(
        rng,
        n_channels=trainset.n_channels,
        runway_len=trainset.runway_len,
        horizon=trainset.horizon,
        zstats=zstats,
        descriptors=registry,
        n_basis=cfg.n_basis,
        hidden=cfg.hidden,
        dtype=dtype,
        seed=cfg.seed,
    )
    if fixed_runway is not None:
        model.fixed_runway = np.asarray(fixed_runway, dtype=dtype)
        if model.fixed_runway.shape != (trainset.n_channels, trainset.runway_len):
            raise ValueError("fixed_runway must be (n_channels, runway_len)")
    xz, y_resid = _prepare_arrays(model, trainset)
    ids = model._trial_descriptor_ids(trainset)
    desc_mats = _descriptor_matrices(model)
    opt = AdamW(
        model.generator.params() + [model.theta_a, model.theta_b],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    losses, plateau = _run_epochs(
        model,
        opt,
        xz,
        y_resid,
        desc_mats,
        ids,
        cfg.max_epochs,
        cfg.batch_size,
        cfg.lam,
        rng,
        cfg.plateau_window,
        cfg.plateau_tol,
    )
    log = TrainLog(
        losses=np.asarray(losses, dtype=np.float64),
        wall_time_s=time.perf_counter() - t0,
        stopped_epoch=len(losses),
        seed=cfg.seed,
        batch_size=cfg.batch_size,
        plateau_stopped=plateau,
    )
    return model, log


def train_state_agnostic(
    cfg: TrainConfig,
    trainset: TrialSet,
    registry: dict[int, tuple[int, ...]] | None = None,
    dtype=np.float32,
) -> tuple[TbfmModel, TrainLog]:
    """Control variant: every runway (intercept included) is the train-set mean.

    The model keeps the substituted runway, so its predictions are identical
    for every trial at inference time as well.
    """
    mean = compute_zscore(trainset).mean.astype(dtype)
    fixed = np.tile(mean[:, None], (1, trainset.runway_len))
    return train(cfg, trainset, registry=registry, fixed_runway=fixed, dtype=dtype)


# ---------------------------------------------------------------------------
# stagewise-additive training


@dataclass
class FsamConfig:
    b_max: int = DEFAULT_N_BASIS
    epochs_per_stage: int = 3000
    lam: float = 0.05
    lr: float = 1e-3
    batch_size: int = 256
    weight_decay: float = 0.0
    plateau_window: int = 250
    plateau_tol: float = 1e-4
    val_r2_tol: float = 0.005
    hidden: tuple = DEFAULT_HIDDEN
    seed: int = 0


@dataclass
class FsamResult:
    model: TbfmModel
    val_r2: np.ndarray            # validation R^2 after each stage
    chosen_basis: int
    stage_final_losses: np.ndarray
    log: TrainLog


def _trim_additive(model: TbfmModel, k: int) -> TbfmModel:
    """Keep the first k bases of an additive model (generator and estimator)."""
    gen = model.generator
    c, b_all = model.n_channels, model.n_basis
    cr = model.theta_a.shape[1]
    ta = model.theta_a.reshape(c, b_all, cr)[:, :k].reshape(c * k, cr).copy()
    tb = model.theta_b.reshape(c, b_all)[:, :k].reshape(-1).copy()
    return replace(
        model,
        generator=AdditiveBasisGenerator(
            sub_weights=gen.sub_weights[:k], sub_biases=gen.sub_biases[:k]
        ),
        theta_a=ta,
        theta_b=tb,
    )


def train_fsam(
    cfg: FsamConfig,
    trainset: TrialSet,
    valset: TrialSet,
    registry: dict[int, tuple[int, ...]] | None = None,
    dtype=np.float32,
) -> FsamResult:
    """Learn bases one at a time; the weight estimator updates at every step.

    After each stage the validation R^2 of the model restricted to the bases
    learned so far is recorded; the additive process stops once the
    improvement falls below ``val_r2_tol`` (or at ``b_max``), and the returned
    model is trimmed to the chosen basis count.
    """
    from .metrics import r2  # local import to avoid a cycle

    t0 = time.perf_counter()
    if registry is None:
        registry, _ = descriptor_registry(trainset)
    zstats = compute_zscore(trainset)
    rng = np.random.default_rng(cfg.seed)
    model = TbfmModel.create(
        rng,
        n_channels=trainset.n_channels,
        runway_len=trainset.runway_len,
        horizon=trainset.horizon,
        zstats=zstats,
        descriptors=registry,
        n_basis=cfg.b_max,
        hidden=cfg.hidden,
        additive=True,
        dtype=dtype,
        seed=cfg.seed,
    )
    xz, y_resid = _prepare_arrays(model, trainset)
    ids = model._trial_descriptor_ids(trainset)
    desc_mats = _descriptor_matrices(model)
    opt = AdamW(
        model.generator.params() + [model.theta_a, model.theta_b],
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
    )
    val_actual = valset.horizons().astype(np.float64)

    all_losses: list = []
    stage_losses: list = []
    val_scores: list = []
    stopped_at: int | None = None
    for stage in range(cfg.b_max):
        losses, _ = _run_epochs(
            model,
            opt,
            xz,
            y_resid,
            desc_mats,
            ids,
            cfg.epochs_per_stage,
            cfg.batch_size,
            cfg.lam,
            rng,
            cfg.plateau_window,
            cfg.plateau_tol,
            active_basis=stage + 1,
            active_stage=stage,
        )
        all_losses.extend(losses)
        stage_losses.append(float(np.mean(losses[-min(50, len(losses)) :])))
        pred = _predict_active(model, valset, stage + 1)
        val_scores.append(r2(pred, val_actual))
        if stage > 0 and val_scores[-1] - val_scores[-2] < cfg.val_r2_tol:
            stopped_at = stage  # basis count before this stage plateaued
            break
    chosen = stopped_at if stopped_at is not None else cfg.b_max
    log = TrainLog(
        losses=np.asarray(all_losses, dtype=np.float64),
        wall_time_s=time.perf_counter() - t0,
        stopped_epoch=len(all_losses),
        seed=cfg.seed,
        batch_size=cfg.batch_size,
        plateau_stopped=stopped_at is not None,
    )
    return FsamResult(
        model=_trim_additive(model, chosen),
        val_r2=np.asarray(val_scores, dtype=np.float64),
        chosen_basis=chosen,
        stage_final_losses=np.asarray(stage_losses, dtype=np.float64),
        log=log,
    )


def _predict_active(model: TbfmModel, ts: TrialSet, k: int) -> np.ndarray:
    """Predictions using only the first k bases of an additive model."""
    xz, last = model.prep_runways(ts.runways())
    n, c, b_all = len(xz), model.n_channels, model.n_basis
    w = (xz @ model.theta_a.T + model.theta_b).reshape(n, c, b_all)[:, :, :k]
    ids = model._trial_descriptor_ids(ts)
    out = np.empty((n, c, model.horizon), dtype=model.dtype)
    for did in np.unique(ids):
        sel = ids == did
        basis = model.generator.forward(model.descriptor_matrix(int(did)), n_active=k)
        mg = int(sel.sum())
        out[sel] = (np.ascontiguousarray(w[sel]).reshape(mg * c, k) @ basis).reshape(
            mg, c, model.horizon
        )
    out += last[:, :, None]
    return out
