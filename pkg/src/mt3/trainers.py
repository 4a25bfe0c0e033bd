"""Training regimes: MT3 meta-training, joint training with an EMA target,
and the plain cross-entropy baseline.

Parameters live as numpy arrays between steps; each step rebuilds a fresh
graph from leaves, so nothing here mutates a tensor in place.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from . import autodiff as ad
from . import augment as aug
from .autodiff import NumericError, Tensor
from .data import Dataset
from .losses import LossWeights, byol_loss, cross_entropy, total_loss
from .nn import ModelConfig, ParameterSet, classify, forward, init_params, to_nchw


@dataclass(frozen=True)
class MetaTrainConfig:
    inner_steps: int = 1
    inner_lr: float = 0.1
    meta_lr: float = 0.01
    momentum: float = 0.9
    meta_batch: int = 4
    task_size: int = 8
    gamma: float = 0.1
    weight_decay: float = 1.5e-6
    clip_norm: float = 10.0
    epochs: int = 200
    max_steps: int | None = None
    second_order: bool = True
    stop_gradient_target: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.inner_lr < 0 or self.meta_lr <= 0 or self.clip_norm <= 0:
            raise ValueError("learning rates and clip norm must be positive")
        if self.meta_batch < 1 or self.task_size < 1:
            raise ValueError("meta_batch and task_size must be >= 1")


@dataclass(frozen=True)
class JointTrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1.5e-6
    batch_size: int = 128
    task_size: int = 8  # images sharing one batch-augmentation draw
    gamma: float = 0.1
    ema: float = 0.996
    clip_norm: float | None = None
    epochs: int = 200
    max_steps: int | None = None
    seed: int = 0


@dataclass(frozen=True)
class BaselineConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    pad: int = 4
    epochs: int = 200
    max_steps: int | None = None
    seed: int = 0


# ---------------------------------------------------------------------------
# optimizer


def sgd_momentum_update(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                        state: dict[str, np.ndarray], lr: float, momentum: float,
                        weight_decay: float) -> dict[str, np.ndarray]:
    """SGD with heavy-ball momentum and decoupled weight decay.

    ``v <- momentum * v + g``; ``w <- w - lr * v - lr * weight_decay * w``.
    ``state`` (the velocity buffers) is updated in place.
    """
    out = {}
    for n, w in params.items():
        g = grads[n]
        v = state.get(n)
        v = g.copy() if v is None else momentum * v + g
        state[n] = v.astype(w.dtype, copy=False)
        out[n] = (w - lr * state[n] - (lr * weight_decay) * w).astype(w.dtype, copy=False)
    return out


# ---------------------------------------------------------------------------
# tasks


@dataclass
class Task:
    """K images with one frozen batch-augmentation draw.

    ``x``, ``a`` and ``a_tilde`` are already batch-augmented (N, H, W, 3).
    """

    x: np.ndarray
    a: np.ndarray
    a_tilde: np.ndarray
    labels: np.ndarray
    batch_aug: aug.BatchAugParams
    sample_aug: list = field(default_factory=list)
    indices: np.ndarray | None = None


def make_task(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
              sample_cfg: aug.SampleAugConfig = aug.SampleAugConfig(),
              batch_cfg: aug.BatchAugConfig = aug.BatchAugConfig(), indices=None) -> Task:
    a, at, trace = aug.sample_augment_batch(images, rng, sample_cfg)
    bp = aug.draw_batch_params(rng, batch_cfg)
    return Task(x=aug.apply_batch_aug(images, bp, batch_cfg.blur_sigma, stream=0),
                a=aug.apply_batch_aug(a, bp, batch_cfg.blur_sigma, stream=1),
                a_tilde=aug.apply_batch_aug(at, bp, batch_cfg.blur_sigma, stream=2),
                labels=np.asarray(labels), batch_aug=bp, sample_aug=trace, indices=indices)


def steps_per_epoch(n: int, batch: int) -> int:
    return max(1, math.ceil(n / batch))


def batch_indices(n: int, batch: int, step: int, seed: int) -> tuple[int, np.ndarray]:
    """Indices for ``step``: a fresh permutation per epoch, consumed without
    replacement; the last batch of an epoch wraps to the permutation's head."""
    spe = steps_per_epoch(n, batch)
    epoch, j = divmod(step, spe)
    perm = np.random.default_rng([seed, 0, epoch]).permutation(n)
    pos = np.arange(j * batch, (j + 1) * batch)
    return epoch, np.take(perm, pos, mode="wrap")


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step])


def sample_meta_batch(ds: Dataset, cfg: MetaTrainConfig, step: int,
                      sample_cfg=aug.SampleAugConfig(), batch_cfg=aug.BatchAugConfig()
                      ) -> tuple[int, list[Task]]:
    epoch, idx = batch_indices(len(ds), cfg.meta_batch * cfg.task_size, step, cfg.seed)
    rng = step_rng(cfg.seed, step)
    tasks = []
    for t in range(cfg.meta_batch):
        sel = idx[t * cfg.task_size:(t + 1) * cfg.task_size]
        tasks.append(make_task(ds.images[sel], ds.labels[sel], rng, sample_cfg, batch_cfg, sel))
    return epoch, tasks


# ---------------------------------------------------------------------------
# MT3


def _accuracy(logits: Tensor, labels) -> float:
    return float(np.mean(np.argmax(logits.data, axis=1) == np.asarray(labels)))


def projections(theta: Mapping[str, Tensor], task: Task, model_cfg: ModelConfig,
                stop_gradient: bool = False) -> tuple[Tensor, Tensor]:
    """Meta-model projections ``(z, z_tilde)`` of the task's two views."""
    k = len(task.labels)
    z = forward(theta, to_nchw(np.concatenate([task.a, task.a_tilde])), model_cfg).z
    if stop_gradient:
        z = z.detach()
    return z[:k], z[k:]


def inner_adapt(task: Task, theta: ParameterSet, cfg: MetaTrainConfig, model_cfg: ModelConfig,
                proj: tuple[Tensor, Tensor] | None = None, create_graph: bool | None = None
                ) -> tuple[ParameterSet, dict]:
    """``inner_steps`` SGD steps on the mean BYOL loss of the task's views.

    Only groups f, p, q move; the classifier head is passed through. With
    ``create_graph`` (default: ``cfg.second_order``) the adapted parameters
    remain differentiable functions of ``theta`` through the steps.
    """
    if create_graph is None:
        create_graph = cfg.second_order
    if proj is None:
        proj = projections(theta, task, model_cfg, cfg.stop_gradient_target)
    z, z_t = proj
    k = len(task.labels)
    names = theta.adaptable()
    phi = theta.replace({n: ad.identity(theta[n]) for n in names})
    views = to_nchw(np.concatenate([task.a, task.a_tilde]))
    log = {"byol": [], "grad_norm": []}
    for _ in range(cfg.inner_steps):
        r = forward(phi, views, model_cfg).r
        loss = ad.reduce_mean(byol_loss(r[:k], r[k:], z, z_t))
        try:
            grads = ad.grad_map(loss, phi, names, create_graph=create_graph)
        except NumericError as exc:
            raise NumericError(f"inner step: {exc}", {**exc.details, "byol": float(loss.data)}) from None
        grads, norm, _ = ad.clip_by_global_norm(grads, cfg.clip_norm)
        phi = phi.replace(ad.sgd_step(phi, grads, cfg.inner_lr, names))
        log["byol"].append(float(loss.data))
        log["grad_norm"].append(norm)
    return phi, log


def meta_gradient(tasks: list[Task], theta: ParameterSet, cfg: MetaTrainConfig,
                  model_cfg: ModelConfig) -> tuple[dict[str, Tensor], dict]:
    """Gradient of the mean outer loss w.r.t. ``theta`` through the inner steps."""
    weights = LossWeights(cfg.gamma)
    total = None
    parts = []
    for task in tasks:
        k = len(task.labels)
        z, z_t = projections(theta, task, model_cfg, cfg.stop_gradient_target)
        phi, ilog = inner_adapt(task, theta, cfg, model_cfg, (z, z_t))
        out = forward(phi, to_nchw(np.concatenate([task.x, task.a, task.a_tilde])), model_cfg)
        ce = cross_entropy(out.logits[:k], task.labels)
        byol = byol_loss(out.r[k:2 * k], out.r[2 * k:], z, z_t)
        task_loss = ad.reduce_mean(total_loss(ce, byol, weights))
        total = task_loss if total is None else total + task_loss
        parts.append({"ce": float(np.mean(ce.data)), "byol": float(np.mean(byol.data)),
                      "total": float(task_loss.data), "acc_after": _accuracy(out.logits[:k], task.labels),
                      "inner_byol": ilog["byol"][0], "inner_grad_norm": ilog["grad_norm"][0]})
    total = ad.affine(total, 1.0 / len(tasks))
    try:
        grads = ad.grad_map(total, theta)
    except NumericError as exc:
        raise NumericError(f"meta-gradient: {exc}", {**exc.details, "tasks": parts}) from None
    return grads, {"loss": float(total.data), "tasks": parts}


def meta_train_step(tasks: list[Task], theta: ParameterSet, opt_state: dict, cfg: MetaTrainConfig,
                    model_cfg: ModelConfig, step: int = 0, epoch: int = 0
                    ) -> tuple[ParameterSet, dict]:
    """One outer update. Returns new meta-parameters (fresh leaves) and a log record."""
    theta = theta.leaves(requires_grad=True)
    with ad.no_grad():
        x_all = to_nchw(np.concatenate([t.x for t in tasks]))
        logits_before = classify(theta, x_all, model_cfg)
    grads, info = meta_gradient(tasks, theta, cfg, model_cfg)
    grads, meta_norm, _ = ad.clip_by_global_norm(grads, cfg.clip_norm)
    new = sgd_momentum_update(theta.arrays(), {n: g.data for n, g in grads.items()}, opt_state,
                              cfg.meta_lr, cfg.momentum, cfg.weight_decay)
    labels = np.concatenate([t.labels for t in tasks])
    tp = info["tasks"]
    record = {
        "regime": "mt3", "epoch": epoch, "step": step,
        "loss_total": info["loss"],
        "loss_ce": float(np.mean([p["ce"] for p in tp])),
        "loss_byol": float(np.mean([p["byol"] for p in tp])),
        "acc_before": _accuracy(logits_before, labels),
        "acc_after": float(np.mean([p["acc_after"] for p in tp])),
        "inner_byol": float(np.mean([p["inner_byol"] for p in tp])),
        "inner_grad_norm": float(np.mean([p["inner_grad_norm"] for p in tp])),
        "meta_grad_norm": meta_norm,
    }
    return ParameterSet.from_arrays(new, theta.groups), record


# ---------------------------------------------------------------------------
# joint training


def ema_update(target: Mapping[str, np.ndarray], online: Mapping[str, np.ndarray],
               momentum: float) -> dict[str, np.ndarray]:
    m = momentum
    return {n: (m * target[n] + (1 - m) * online[n]).astype(target[n].dtype, copy=False)
            for n in target}


def joint_batch(ds: Dataset, cfg: JointTrainConfig, step: int,
                sample_cfg=aug.SampleAugConfig(), batch_cfg=aug.BatchAugConfig()):
    epoch, idx = batch_indices(len(ds), cfg.batch_size, step, cfg.seed)
    rng = step_rng(cfg.seed, step)
    chunks = [make_task(ds.images[idx[i:i + cfg.task_size]], ds.labels[idx[i:i + cfg.task_size]],
                        rng, sample_cfg, batch_cfg) for i in range(0, len(idx), cfg.task_size)]
    return epoch, chunks


def joint_train_step(chunks: list[Task], online: ParameterSet, target: ParameterSet,
                     opt_state: dict, cfg: JointTrainConfig, model_cfg: ModelConfig,
                     step: int = 0, epoch: int = 0) -> tuple[ParameterSet, ParameterSet, dict]:
    """CE + gamma * BYOL with predictions from ``online`` and projections from
    the EMA ``target`` (no gradient), then the EMA update."""
    online = online.leaves(requires_grad=True)
    x = np.concatenate([c.x for c in chunks])
    a = np.concatenate([c.a for c in chunks])
    at = np.concatenate([c.a_tilde for c in chunks])
    labels = np.concatenate([c.labels for c in chunks])
    n = len(labels)
    with ad.no_grad():
        z = forward(target, to_nchw(np.concatenate([a, at])), model_cfg).z
    out = forward(online, to_nchw(np.concatenate([x, a, at])), model_cfg)
    ce = cross_entropy(out.logits[:n], labels)
    byol = byol_loss(out.r[n:2 * n], out.r[2 * n:], z[:n], z[n:])
    loss = ad.reduce_mean(total_loss(ce, byol, LossWeights(cfg.gamma)))
    grads = ad.grad_map(loss, online)
    norm = float(ad.global_norm(grads).data)
    if cfg.clip_norm is not None:
        grads, norm, _ = ad.clip_by_global_norm(grads, cfg.clip_norm)
    new = sgd_momentum_update(online.arrays(), {k: g.data for k, g in grads.items()}, opt_state,
                              cfg.lr, cfg.momentum, cfg.weight_decay)
    new_target = ema_update(target.arrays(), new, cfg.ema)
    record = {"regime": "jt", "epoch": epoch, "step": step, "loss_total": float(loss.data),
              "loss_ce": float(np.mean(ce.data)), "loss_byol": float(np.mean(byol.data)),
              "acc": _accuracy(out.logits[:n], labels), "grad_norm": norm}
    return (ParameterSet.from_arrays(new, online.groups),
            ParameterSet.from_arrays(new_target, online.groups), record)


# ---------------------------------------------------------------------------
# baseline


def baseline_train_step(images: np.ndarray, labels: np.ndarray, params: ParameterSet,
                        opt_state: dict, cfg: BaselineConfig, model_cfg: ModelConfig,
                        step: int = 0, epoch: int = 0) -> tuple[ParameterSet, dict]:
    """One SGD step on mean cross-entropy; ``images`` are already augmented."""
    params = params.leaves(requires_grad=True)
    logits = classify(params, to_nchw(images), model_cfg)
    loss = ad.reduce_mean(cross_entropy(logits, labels))
    grads = ad.grad_map(loss, params)
    new = sgd_momentum_update(params.arrays(), {k: g.data for k, g in grads.items()}, opt_state,
                              cfg.lr, cfg.momentum, cfg.weight_decay)
    record = {"regime": "baseline", "epoch": epoch, "step": step, "loss_ce": float(loss.data),
              "acc": _accuracy(logits, labels)}
    return ParameterSet.from_arrays(new, params.groups), record


def baseline_batch(ds: Dataset, cfg: BaselineConfig, step: int):
    epoch, idx = batch_indices(len(ds), cfg.batch_size, step, cfg.seed)
    rng = step_rng(cfg.seed, step)
    return epoch, aug.pad_crop_flip(ds.images[idx], rng, cfg.pad), ds.labels[idx]


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainState:
    """Everything needed to resume: parameters, optimizer buffers, EMA target, step."""

    regime: str
    params: ParameterSet
    opt_state: dict = field(default_factory=dict)
    target: ParameterSet | None = None
    step: int = 0


def total_steps(n: int, batch: int, epochs: int, max_steps: int | None) -> int:
    return max_steps if max_steps is not None else epochs * steps_per_epoch(n, batch)


def init_state(regime: str, model_cfg: ModelConfig, seed: int) -> TrainState:
    params = init_params(model_cfg, np.random.default_rng([seed, 2]))
    target = ParameterSet.from_arrays({k: v.copy() for k, v in params.arrays().items()},
                                      params.groups) if regime == "jt" else None
    return TrainState(regime, params, {}, target, 0)


def train(regime: str, ds: Dataset, model_cfg: ModelConfig, cfg, state: TrainState | None = None,
          on_record: Callable[[dict], None] | None = None,
          on_step: Callable[[TrainState], None] | None = None,
          sample_cfg: aug.SampleAugConfig = aug.SampleAugConfig(),
          batch_cfg: aug.BatchAugConfig = aug.BatchAugConfig(),
          until: int | None = None) -> TrainState:
    """Run ``regime`` (``mt3`` | ``jt`` | ``baseline``) from ``state`` to the end.

    ``until`` stops early at that step count (used for interrupt/resume).
    """
    if regime not in ("mt3", "jt", "baseline"):
        raise ValueError(f"unknown regime {regime!r}")
    if regime in ("mt3", "jt") and not model_cfg.ssl_heads:
        raise ValueError(f"regime {regime!r} needs a model with projector and predictor")
    state = state or init_state(regime, model_cfg, cfg.seed)
    batch = cfg.meta_batch * cfg.task_size if regime == "mt3" else cfg.batch_size
    end = total_steps(len(ds), batch, cfg.epochs, cfg.max_steps)
    if until is not None:
        end = min(end, until)
    while state.step < end:
        s = state.step
        if regime == "mt3":
            epoch, tasks = sample_meta_batch(ds, cfg, s, sample_cfg, batch_cfg)
            state.params, rec = meta_train_step(tasks, state.params, state.opt_state, cfg,
                                                model_cfg, s, epoch)
        elif regime == "jt":
            epoch, chunks = joint_batch(ds, cfg, s, sample_cfg, batch_cfg)
            state.params, state.target, rec = joint_train_step(
                chunks, state.params, state.target, state.opt_state, cfg, model_cfg, s, epoch)
        else:
            epoch, x, y = baseline_batch(ds, cfg, s)
            state.params, rec = baseline_train_step(x, y, state.params, state.opt_state, cfg,
                                                    model_cfg, s, epoch)
        state.step = s + 1
        if on_record is not None:
            on_record(rec)
        if on_step is not None:
            on_step(state)
    return state
