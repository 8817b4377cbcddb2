"""Training engine: decoupled-weight-decay optimizer, milestone schedule, phase loops.

Per-phase defaults (epochs, learning rate, weight decay, gamma, milestones):

    pretrain      100   1e-4   0.05    0.1   {50, 85}
    intermediate  200   8e-4   0       0.1   {180, 190}
    finetune      100   2e-3   1e-4    0.5   {70, 90, 95}

Milestones use 0-indexed epochs with "milestone <= epoch" semantics, so the
epoch listed as a milestone is the first to run at the reduced rate.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import gradients, patchify
from .errors import NonFiniteError
from .objectives import (
    DEFAULT_MASK_RATIO,
    classify_loss,
    mim_loss,
    sample_mask,
    segment_logits,
    segment_loss,
    stack_masks,
)

PHASES = ("pretrain", "intermediate", "finetune")


@dataclass(frozen=True)
class OptimConfig:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class MilestoneSchedule:
    milestones: tuple = ()
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ValueError(f"milestones must be strictly ascending, got {self.milestones}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")


@dataclass(frozen=True)
class PhaseConfig:
    """Optimizer, schedule, and loop settings for one training phase.

    ``decay_all_params`` keeps weight decay on every parameter (the
    default); switching it off exempts normalization scales/shifts, biases,
    and the cls/pos/mask tokens. ``mask_ratio`` only matters for the
    pretrain phase.
    """

    phase: str
    epochs: int
    optim: OptimConfig
    schedule: MilestoneSchedule
    batch_size: int = 64
    mask_ratio: float = DEFAULT_MASK_RATIO
    decay_all_params: bool = True

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}, expected one of {PHASES}")
        if self.epochs <= 0:
            raise ValueError(f"epochs must be positive, got {self.epochs}")
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")


def default_phase_config(phase: str) -> PhaseConfig:
    if phase == "pretrain":
        return PhaseConfig("pretrain", 100, OptimConfig(1e-4, 0.05), MilestoneSchedule((50, 85), 0.1))
    if phase == "intermediate":
        return PhaseConfig("intermediate", 200, OptimConfig(8e-4, 0.0), MilestoneSchedule((180, 190), 0.1))
    if phase == "finetune":
        return PhaseConfig("finetune", 100, OptimConfig(2e-3, 1e-4), MilestoneSchedule((70, 90, 95), 0.5))
    raise ValueError(f"unknown phase {phase!r}")


def lr_at_epoch(base_lr: float, schedule: MilestoneSchedule, epoch: int) -> float:
    """base_lr * gamma**k where k counts milestones at or before ``epoch``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    k = bisect_right(schedule.milestones, epoch)
    return base_lr * schedule.gamma**k


@dataclass
class OptimState:
    """First/second moment accumulators keyed by parameter path."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def _decay_exempt(name: str, param) -> bool:
    # norm scales/shifts, biases, and cls/mask tokens are all 1-D; pos_embed is 2-D
    return param.dim() <= 1 or name.rsplit(".", 1)[-1] == "pos_embed"


def adamw_step(params, grads, state: OptimState, cfg: OptimConfig, lr: float, decay_all: bool = True):
    """One decoupled-weight-decay adaptive update, in place.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)

    with bias-corrected moments m_hat = m / (1 - beta1**t) and
    v_hat = v / (1 - beta2**t). The whole step is refused (no state or
    parameter touched) if any gradient is non-finite.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    for name in params:
        if not torch.isfinite(grads[name]).all():
            raise NonFiniteError(f"gradient of {name}", "step refused")
    state.t += 1
    bc1 = 1 - cfg.beta1**state.t
    bc2 = 1 - cfg.beta2**state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            wd = cfg.weight_decay
            if wd and not decay_all and _decay_exempt(name, p):
                wd = 0.0
            if wd:
                p.mul_(1 - lr * wd)
            denom = (v / bc2).sqrt_().add_(cfg.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


@dataclass
class EpochLog:
    epoch: int
    phase: str
    lr: float
    mean_loss: float


def named_training_params(model, head):
    """Canonical parameter paths shared by the optimizer and checkpoints."""
    params = {f"model.{n}": p for n, p in model.named_parameters()}
    if head is not None:
        params.update({f"head.{n}": p for n, p in head.named_parameters()})
    return params


def _check_labels(samples, phase: str):
    if phase == "intermediate":
        bad = [i for i, s in enumerate(samples) if not isinstance(s.label, (int, np.integer))]
        kind = "an integer class label"
    elif phase == "finetune":
        bad = [i for i, s in enumerate(samples) if not isinstance(s.label, np.ndarray)]
        kind = "a trimap label"
    else:
        return
    if bad:
        raise ValueError(f"{len(bad)} samples lack {kind} required by the {phase} phase (first: {bad[0]})")


def _batch_images(samples, idx, dtype):
    return torch.from_numpy(np.stack([samples[i].image for i in idx])).to(dtype)


def train_phase(model, head, samples, phase: PhaseConfig, seed: int, on_epoch=None):
    """Train model and head jointly for one phase; returns per-epoch logs.

    Every epoch reshuffles the sample order and, for the pretrain phase,
    draws a fresh mask per image from the same seeded stream, so the whole
    run is a deterministic function of (inputs, seed). ``on_epoch`` is
    called with each EpochLog as it completes.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty dataset")
    _check_labels(samples, phase.phase)
    rng = np.random.default_rng(seed)
    params = named_training_params(model, head)
    state = OptimState()
    dtype = next(iter(params.values())).dtype
    num_patches = model.config.num_patches
    history = []
    for epoch in range(phase.epochs):
        lr = lr_at_epoch(phase.optim.lr, phase.schedule, epoch)
        order = rng.permutation(len(samples))
        loss_sum = 0.0
        for start in range(0, len(order), phase.batch_size):
            idx = order[start : start + phase.batch_size]
            images = _batch_images(samples, idx, dtype)
            if phase.phase == "pretrain":
                masks = stack_masks([sample_mask(rng, num_patches, phase.mask_ratio) for _ in idx])
                features = model.encode_masked(images, masks, head.mask_token)
                target = patchify(images, model.config.patch_size)
                loss = mim_loss(head(features), target, masks)
            elif phase.phase == "intermediate":
                labels = np.array([samples[i].label for i in idx])
                loss = classify_loss(model(images), head, labels)
            else:
                truth = np.stack([samples[i].label for i in idx])
                logits = segment_logits(model(images), head)
                loss = segment_loss(logits, truth)
            grads = gradients(loss, params.items())
            adamw_step(params, grads, state, phase.optim, lr, decay_all=phase.decay_all_params)
            loss_sum += float(loss.detach()) * len(idx)
        for name, p in params.items():
            if not torch.isfinite(p).all():
                raise NonFiniteError(f"parameter {name}", f"after epoch {epoch}")
        log = EpochLog(epoch=epoch, phase=phase.phase, lr=lr, mean_loss=loss_sum / len(order))
        history.append(log)
        if on_epoch is not None:
            on_epoch(log)
    return history
