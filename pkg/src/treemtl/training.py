"""Optimizer, schedule, and the two single-task-dataset training regimes.

Alternating updation runs two optimizer updates per step: fatigue loss
into {root, fatigue} with the face branch frozen bit-exactly, then face
loss into {root, face} with the fatigue branch frozen. Gradient
accumulation backpropagates w * fatigue and (1 - w) * face separately
into shared gradient buffers and applies one joint update, which equals
the gradient of the combined objective at fixed parameters.
"""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .data import batches, cycling_batches
from .errors import ConfigError, TrainingDivergedError
from .losses import arcface_subcenter_loss, bce_loss

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
REGIMES = ("alternating", "grad_accum")


@dataclass
class TrainingConfig:
    """Regime selector, loss weight, and optimizer/schedule hyperparameters."""

    regime: str = "alternating"
    loss_weight: float = 0.5  # fatigue weight w; face gets 1 - w (grad_accum only)
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    dtype: str = "float32"
    face_first: bool = False  # alternating sub-step order flag

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ConfigError(f"loss_weight must lie in [0, 1], got {self.loss_weight}")
        for name in ("learning_rate", "beta1", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(_DTYPES)}, got {self.dtype!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]


class Adam:
    """Adaptive-moment optimizer over named parameters.

    Update law, applied in exactly this order (the test suite replays it
    step by step):

        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p = p - lr * m_hat / (sqrt(v_hat) + eps)

    ``t`` counts updates per parameter, so selectively stepping a subset
    (alternating regime) keeps everyone's bias correction consistent.
    """

    def __init__(self, named_params, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {
            name: {"m": torch.zeros_like(p), "v": torch.zeros_like(p), "t": 0}
            for name, p in self.params.items()
        }

    def zero_grad(self):
        """Zero gradient buffers in place (allocated buffers stay exact zeros)."""
        for p in self.params.values():
            if p.grad is not None:
                p.grad.zero_()

    def step(self, lr=None, active=None):
        """Apply one update to ``active`` parameter names (None = all)."""
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if active is not None and name not in active:
                continue
            g = p.grad
            if g is None:
                continue
            st = self.state[name]
            st["t"] += 1
            st["m"].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            st["v"].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            m_hat = st["m"] / (1.0 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1.0 - self.beta2 ** st["t"])
            with torch.no_grad():
                p.sub_(lr * m_hat / (v_hat.sqrt() + self.eps))

    def state_dict(self):
        return {
            "hyper": {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps},
            "steps": {name: st["t"] for name, st in self.state.items()},
            "moments": {name: {"m": st["m"], "v": st["v"]} for name, st in self.state.items()},
        }

    def load_state_dict(self, state):
        self.beta1 = state["hyper"]["beta1"]
        self.beta2 = state["hyper"]["beta2"]
        self.eps = state["hyper"]["eps"]
        for name, st in self.state.items():
            st["t"] = state["steps"][name]
            st["m"] = state["moments"][name]["m"].to(st["m"].dtype)
            st["v"] = state["moments"][name]["v"].to(st["v"].dtype)


@dataclass
class TrainState:
    """Mutable loop state: optimizer moments, counters, current LR, RNG."""

    optimizer: Adam
    lr: float
    epoch: int = 0
    step: int = 0
    generator: torch.Generator = None


def build_optimizer(model, classifier=None, cfg=None):
    cfg = cfg or TrainingConfig()
    named = dict(model.named_parameters())
    if classifier is not None:
        named["classifier.W"] = classifier.W
    return Adam(named, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def make_train_state(model, classifier=None, cfg=None):
    cfg = cfg or TrainingConfig()
    gen = torch.Generator().manual_seed(cfg.seed)
    return TrainState(
        optimizer=build_optimizer(model, classifier, cfg),
        lr=cfg.learning_rate,
        generator=gen,
    )


def lr_at(epoch, cfg):
    """Cosine-annealed rate: one cycle spanning the whole run, floor 0."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.epochs == 0:
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def _to_tensors(batch, dtype):
    images = torch.from_numpy(np.ascontiguousarray(batch.images)).to(dtype)
    labels = torch.from_numpy(np.ascontiguousarray(batch.labels))
    return images, labels


def _group_names(model, group):
    return {name for name, _ in model.parameter_groups()[group]}


def task_sub_step(model, classifier, batch, task, state):
    """One half of an alternating step: update {root, ``task`` branch} only.

    The other branch's parameters and optimizer moments are untouched
    bit-exactly (they are outside both the loss graph and the active set).

    Returns:
        the task loss as a float.
    """
    if batch is None:
        raise ValueError(f"missing batch for task {task!r}")
    dtype = next(model.parameters()).dtype
    images, labels = _to_tensors(batch, dtype)
    opt = state.optimizer
    opt.zero_grad()
    if task == "fatigue":
        loss = bce_loss(model.forward_task(images, "fatigue"), labels)
        active = _group_names(model, "root") | _group_names(model, "fatigue")
    elif task == "face":
        loss = arcface_subcenter_loss(model.forward_task(images, "face"), labels, classifier)
        active = _group_names(model, "root") | _group_names(model, "face") | {"classifier.W"}
    else:
        raise ValueError(f"unknown task {task!r}")
    loss.value.backward()
    opt.step(lr=state.lr, active=active)
    return loss.item()


def alternating_step(model, classifier, fatigue_batch, face_batch, state, face_first=False):
    """Two sub-steps: each task updates {root, own branch}, other branch frozen.

    Returns:
        (fatigue loss, face loss) as floats.
    """
    if fatigue_batch is None or face_batch is None:
        raise ValueError("alternating_step needs one batch per task")
    order = ("face", "fatigue") if face_first else ("fatigue", "face")
    losses = {}
    for task in order:
        batch = fatigue_batch if task == "fatigue" else face_batch
        losses[task] = task_sub_step(model, classifier, batch, task, state)
    state.step += 1
    return losses["fatigue"], losses["face"]


def accumulate_gradients(model, classifier, fatigue_batch, face_batch, w, state):
    """Backpropagate w * fatigue then (1 - w) * face into shared buffers.

    No parameters move; after this call every ``p.grad`` holds the summed
    contribution, i.e. the gradient of the combined objective.

    Returns:
        (fatigue loss, face loss) as floats, unweighted.
    """
    if fatigue_batch is None or face_batch is None:
        raise ValueError("gradient accumulation needs one batch per task")
    if not 0.0 <= w <= 1.0:
        raise ConfigError(f"loss weight must lie in [0, 1], got {w}")
    dtype = next(model.parameters()).dtype
    state.optimizer.zero_grad()

    images, labels = _to_tensors(fatigue_batch, dtype)
    loss_fatigue = bce_loss(model.forward_task(images, "fatigue"), labels)
    (w * loss_fatigue.value).backward()

    images, labels = _to_tensors(face_batch, dtype)
    loss_face = arcface_subcenter_loss(model.forward_task(images, "face"), labels, classifier)
    ((1.0 - w) * loss_face.value).backward()
    return loss_fatigue.item(), loss_face.item()


def grad_accum_step(model, classifier, fatigue_batch, face_batch, w, state):
    """Accumulate w * fatigue and (1 - w) * face gradients, then update once.

    The summed buffers equal the gradient of the combined objective
    w * L_fatigue + (1 - w) * L_face at fixed parameters; buffers are
    zeroed after the update.

    Returns:
        (fatigue loss, face loss) as floats, unweighted.
    """
    loss_fatigue, loss_face = accumulate_gradients(
        model, classifier, fatigue_batch, face_batch, w, state
    )
    state.optimizer.step(lr=state.lr)
    state.optimizer.zero_grad()
    state.step += 1
    return loss_fatigue, loss_face


@dataclass
class TrainingLog:
    """Per-step rows plus per-epoch mean-loss summaries."""

    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "step", "loss_fatigue", "loss_face", "lr"])
            for row in self.steps:
                writer.writerow(
                    [
                        row["epoch"],
                        row["step"],
                        f"{row['loss_fatigue']:.10g}",
                        f"{row['loss_face']:.10g}",
                        f"{row['lr']:.10g}",
                    ]
                )
        return path


def run_training(model, classifier, fatigue_dataset, face_dataset, cfg, out_dir=None):
    """Train for ``cfg.epochs`` epochs of interleaved single-task batches.

    Per step, one batch is drawn from each dataset (the shorter dataset
    cycles with reshuffling; an epoch ends when the longer one is
    exhausted) and the configured regime is applied at the cosine-annealed
    rate for the epoch. When ``out_dir`` is given, a checkpoint lands
    there per epoch plus a final ``model.ckpt`` and a step-log CSV.

    Raises:
        ConfigError: invalid config or an empty dataset.
        TrainingDivergedError: a loss went non-finite (diagnostic state attached).
    """
    cfg.validate()
    if len(fatigue_dataset) == 0 or len(face_dataset) == 0:
        raise ConfigError("both datasets must be non-empty")
    state = make_train_state(model, classifier, cfg)
    log = TrainingLog()
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    def save(path):
        save_checkpoint(
            path,
            model,
            classifier=classifier,
            optimizer=state.optimizer.state_dict(),
            epoch=state.epoch,
            step=state.step,
            rng_state=bytes(state.generator.get_state().numpy().tobytes()),
        )

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        state.lr = lr_at(epoch, cfg)
        fatigue_longer = len(fatigue_dataset) >= len(face_dataset)
        longer, shorter = (
            (fatigue_dataset, face_dataset) if fatigue_longer else (face_dataset, fatigue_dataset)
        )
        primary = batches(longer, cfg.batch_size, cfg.seed, epoch)
        secondary = cycling_batches(shorter, cfg.batch_size, cfg.seed, epoch)
        epoch_losses = []
        for primary_batch in primary:
            secondary_batch = next(secondary)
            fatigue_batch = primary_batch if fatigue_longer else secondary_batch
            face_batch = secondary_batch if fatigue_longer else primary_batch
            if cfg.regime == "alternating":
                loss_d, loss_f = alternating_step(
                    model, classifier, fatigue_batch, face_batch, state, cfg.face_first
                )
            else:
                loss_d, loss_f = grad_accum_step(
                    model, classifier, fatigue_batch, face_batch, cfg.loss_weight, state
                )
            if not (math.isfinite(loss_d) and math.isfinite(loss_f)):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {state.step}",
                    diagnostics={
                        "epoch": epoch,
                        "step": state.step,
                        "loss_fatigue": loss_d,
                        "loss_face": loss_f,
                        "lr": state.lr,
                    },
                )
            log.steps.append(
                {
                    "epoch": epoch,
                    "step": state.step,
                    "loss_fatigue": loss_d,
                    "loss_face": loss_f,
                    "lr": state.lr,
                }
            )
            epoch_losses.append((loss_d, loss_f))
        log.epochs.append(
            {
                "epoch": epoch,
                "loss_fatigue": float(np.mean([l[0] for l in epoch_losses])),
                "loss_face": float(np.mean([l[1] for l in epoch_losses])),
                "lr": state.lr,
            }
        )
        if out_dir is not None:
            save(out_dir / "checkpoints" / f"epoch_{epoch + 1:03d}.ckpt")

    if out_dir is not None:
        save(out_dir / "model.ckpt")
        log.write_csv(out_dir / "train_log.csv")
    return model, log
