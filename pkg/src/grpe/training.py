"""Optimizer, schedule, training/eval loops, and checkpointing.

Graphs are processed one at a time (no padding); a batch is a gradient
accumulation window. Everything is deterministic given the seeds: data
order comes from a dedicated generator whose state is checkpointed, so a
resumed run continues the exact same stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import CheckpointError, ConfigError, NumericError
from .model import Model, ModelConfig, build_model, loss_and_grad
from .encodings import sign_flip_augment
from .tensor import Tensor

CHECKPOINT_FORMAT = "grpe-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int
    lr_start: float = 2e-4
    lr_end: float = 1e-9
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None      # off by default
    weight_decay: float = 0.0           # decoupled, applied after the Adam step
    warmup_steps: int = 0
    lap_sign_flip: bool = False         # random eigenvector sign flips per epoch
    stop_at_train_loss: float | None = None
    seed: int | None = None             # trainer stream; derived from model seed if None

    def __post_init__(self):
        if not (self.lr_start > self.lr_end > 0):
            raise ConfigError("need lr_start > lr_end > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


class EpochRecord(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


class TrainerState:
    """Optimizer moments plus the RNG/progress needed to resume exactly."""

    def __init__(self, model: Model, seed):
        self.m = {name: np.zeros_like(p.value.data) for name, p in model.parameters()}
        self.v = {name: np.zeros_like(p.value.data) for name, p in model.parameters()}
        self.t = 0
        self.rng = np.random.default_rng(seed)
        self.epochs_done = 0
        self.global_step = 0


def lr_at(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Linear interpolation from lr_start (step 0) to lr_end (last step).

    Written so both endpoints are exact."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_start
    frac = step / total_steps
    return lr_start * (1.0 - frac) + lr_end * frac


def _scheduled_lr(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_start * (step + 1) / cfg.warmup_steps
    decay_total = max(total_steps - cfg.warmup_steps, 1)
    decay_step = min(step - cfg.warmup_steps, decay_total) if cfg.warmup_steps else step
    return lr_at(decay_step, decay_total if cfg.warmup_steps else total_steps,
                 cfg.lr_start, cfg.lr_end)


def adam_step(named_params, state: TrainerState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0,
              grad_clip: float | None = None):
    """Bias-corrected Adam update over the accumulated gradients.

    Parameters update in registry order with plain numpy elementwise math,
    so repeated runs are bit-identical.
    """
    if grad_clip is not None:
        sq = math.fsum(float((p.grad.data ** 2).sum()) for _, p in named_params)
        norm = math.sqrt(sq)
        if norm > grad_clip:
            factor = grad_clip / norm
            for _, p in named_params:
                p.grad.data *= factor
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in named_params:
        g = p.grad.data
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.value.data -= lr * update
        if weight_decay:
            p.value.data -= lr * weight_decay * p.value.data


def _sample_loss(model: Model, prep, class_weights=None):
    target = prep.target if model.config.task == "graph_regression" else prep.node_labels
    pred, cache = model.forward_with_cache(
        prep, dropout=model.config.dropout,
        rng=model.trainer.rng if (model.trainer and model.config.dropout > 0) else None)
    value, d_pred = loss_and_grad(pred, target, model.config.task, class_weights)
    return value, d_pred, cache


def train(model: Model, train_set, cfg: TrainConfig, val_set=None,
          class_weights=None, stop_epoch: int | None = None) -> list:
    """Train in place; returns one EpochRecord per completed epoch.

    The schedule horizon is ``cfg.epochs``; ``stop_epoch`` interrupts the
    run early without shortening the horizon. Calling again on a model
    with an existing trainer state resumes from ``epochs_done`` using the
    stored RNG and optimizer moments, which makes an interrupted run
    indistinguishable from an uninterrupted one.
    """
    if not train_set:
        raise ConfigError("training set is empty")
    prepared = [model.prepare(s) for s in train_set]
    val_prepared = [model.prepare(s) for s in val_set] if val_set else None
    if model.trainer is None:
        seed = cfg.seed if cfg.seed is not None else np.random.SeedSequence(
            model.config.seed).spawn(3)[2]
        model.trainer = TrainerState(model, seed)
    st = model.trainer
    params = model.parameters()
    n_batches = math.ceil(len(prepared) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches

    last_epoch = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    history = []
    for epoch in range(st.epochs_done, last_epoch):
        order = st.rng.permutation(len(prepared))
        sample_losses = []
        lr = cfg.lr_start
        for b in range(n_batches):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            model.zero_grad()
            for idx in batch:
                prep = prepared[int(idx)]
                if cfg.lap_sign_flip and prep.input_pe is not None:
                    flipped = sign_flip_augment(prep.input_pe,
                                                int(st.rng.integers(0, 2 ** 31)))
                    prep = _with_pe(prep, flipped.data)
                value, d_pred, cache = _sample_loss(model, prep, class_weights)
                if not math.isfinite(value):
                    raise NumericError(
                        f"loss diverged (non-finite) at epoch {epoch + 1}, sample {int(idx)}")
                model.backward(_scale_grad(d_pred, 1.0 / len(batch)), cache)
                sample_losses.append(value)
            lr = _scheduled_lr(cfg, st.global_step, total_steps)
            adam_step(params, st, lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                      cfg.weight_decay, cfg.grad_clip)
            st.global_step += 1
        train_loss = math.fsum(sample_losses) / len(sample_losses)
        val_loss = float("nan")
        if val_prepared is not None:
            val_loss = mean_loss(model, val_prepared, class_weights)
        st.epochs_done = epoch + 1
        history.append(EpochRecord(epoch + 1, train_loss, val_loss, lr))
        if cfg.stop_at_train_loss is not None and train_loss < cfg.stop_at_train_loss:
            break
    return history


def _with_pe(prep, pe):
    from dataclasses import replace
    return replace(prep, input_pe=pe)


def _scale_grad(d_pred, factor: float):
    if isinstance(d_pred, float):
        return d_pred * factor
    return d_pred * factor


def mean_loss(model: Model, prepared, class_weights=None) -> float:
    values = []
    for prep in prepared:
        target = prep.target if model.config.task == "graph_regression" else prep.node_labels
        pred = model.forward(prep)
        value, _ = loss_and_grad(pred, target, model.config.task, class_weights)
        values.append(value)
    return math.fsum(values) / len(values)


def evaluate(model: Model, dataset) -> dict:
    """Task metrics over a dataset.

    Regression reports MAE. Node classification reports plain accuracy and
    class-weighted accuracy (mean per-class recall over observed classes).
    Reductions are exact sums, so dataset order cannot change the result.
    """
    prepared = [model.prepare(s) for s in dataset]
    if model.config.task == "graph_regression":
        errs = [abs(model.forward(p) - p.target) for p in prepared]
        return {"mae": math.fsum(errs) / len(errs), "count": len(errs)}
    c = model.config.num_classes
    correct = np.zeros(c, dtype=np.int64)
    totals = np.zeros(c, dtype=np.int64)
    ce = []
    for prep in prepared:
        logits = model.forward(prep)
        value, _ = loss_and_grad(logits, prep.node_labels, model.config.task)
        ce.append(value)
        pred_cls = logits.argmax(axis=1)
        for cls in range(c):
            mask = prep.node_labels == cls
            totals[cls] += int(mask.sum())
            correct[cls] += int((pred_cls[mask] == cls).sum())
    seen = totals > 0
    recalls = correct[seen] / totals[seen]
    return {"accuracy": float(correct.sum() / totals.sum()),
            "weighted_accuracy": float(recalls.mean()),
            "loss": math.fsum(ce) / len(ce),
            "count": len(prepared)}


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path):
    """Write a versioned JSON checkpoint with named tensors.

    Floats round-trip exactly through JSON (shortest-repr encoding), so a
    reloaded model reproduces forward outputs bit for bit.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "params": {name: p.value.data.reshape(-1).tolist()
                   for name, p in model.parameters()},
        "shapes": {name: list(p.value.shape) for name, p in model.parameters()},
        "trainer": None,
    }
    st = model.trainer
    if st is not None:
        payload["trainer"] = {
            "t": st.t,
            "m": {k: v.reshape(-1).tolist() for k, v in st.m.items()},
            "v": {k: v.reshape(-1).tolist() for k, v in st.v.items()},
            "rng_state": st.rng.bit_generator.state,
            "epochs_done": st.epochs_done,
            "global_step": st.global_step,
        }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> Model:
    """Rebuild a model (and trainer state, if saved) from a checkpoint."""
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc.msg}") from None
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    try:
        config = ModelConfig(**payload["config"])
    except (TypeError, KeyError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from None
    model = build_model(config)
    for name, p in model.parameters():
        if name not in payload["params"]:
            raise CheckpointError(f"missing tensor {name!r}")
        shape = tuple(payload["shapes"][name])
        if shape != p.value.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {shape}, expected {tuple(p.value.shape)}")
        p.value = Tensor(np.array(payload["params"][name], dtype=np.float64).reshape(shape))
        p.zero_grad()
    tr = payload.get("trainer")
    if tr is not None:
        st = TrainerState(model, 0)
        st.t = int(tr["t"])
        for key in st.m:
            if key not in tr["m"]:
                raise CheckpointError(f"missing optimizer moment for {key!r}")
            st.m[key] = np.array(tr["m"][key], dtype=np.float64).reshape(st.m[key].shape)
            st.v[key] = np.array(tr["v"][key], dtype=np.float64).reshape(st.v[key].shape)
        st.rng.bit_generator.state = tr["rng_state"]
        st.epochs_done = int(tr["epochs_done"])
        st.global_step = int(tr["global_step"])
        model.trainer = st
    return model
