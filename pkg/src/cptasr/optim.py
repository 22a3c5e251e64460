"""AdamW with decoupled weight decay, warmup/decay schedule, clipping, label smoothing."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import ctc
from .corpus import Vocabulary
from .net import Parameters

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class StageConfig:
    """Full hyperparameter record for one training stage."""

    learning_rate: float
    epochs: int
    batch_size: int
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    label_smoothing: float = 0.0
    grad_clip_norm: float | None = 1.0
    patience: int | None = 3
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs and batch_size must be positive")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive or None")
        if self.patience is not None and self.patience < 0:
            raise ValueError("patience must be >= 0 or None")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


# Stage presets. Stage 3 epochs follow the small-data end of the stated
# 10-15 range; patience None means early stopping is disabled.
PRESETS: dict[str, StageConfig] = {
    "stage1": StageConfig(learning_rate=1e-4, epochs=15, batch_size=8, warmup_ratio=0.1,
                          weight_decay=0.01, label_smoothing=0.0, grad_clip_norm=1.0,
                          patience=3, dropout_rate=0.0),
    "stage2-cpt": StageConfig(learning_rate=5e-5, epochs=3, batch_size=8, warmup_ratio=0.1,
                              weight_decay=0.01, label_smoothing=0.0, grad_clip_norm=1.0,
                              patience=None, dropout_rate=0.0),
    "stage3-finetune": StageConfig(learning_rate=1e-4, epochs=15, batch_size=8, warmup_ratio=0.1,
                                   weight_decay=0.01, label_smoothing=0.1, grad_clip_norm=1.0,
                                   patience=3, dropout_rate=0.1),
    "baseline": StageConfig(learning_rate=1e-4, epochs=15, batch_size=8, warmup_ratio=0.1,
                            weight_decay=0.01, label_smoothing=0.0, grad_clip_norm=1.0,
                            patience=3, dropout_rate=0.0),
}


def preset(name: str, **overrides) -> StageConfig:
    """A named preset, optionally with individual fields overridden."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]
    return replace(cfg, **overrides) if overrides else cfg


def lr_at(step: int, total_steps: int, cfg: StageConfig) -> float:
    """Piecewise-linear schedule: ramp 0 -> lr over the warmup steps, then decay to 0."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = math.ceil(cfg.warmup_ratio * total_steps)
    if step <= warmup_steps:
        if warmup_steps == 0:
            return cfg.learning_rate
        return cfg.learning_rate * step / warmup_steps
    return cfg.learning_rate * (total_steps - step) / (total_steps - warmup_steps)


def global_grad_norm(grads: Parameters) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: Parameters, max_norm: float) -> tuple[Parameters, float]:
    """Scale all gradients so the global L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the applied scale.
    Non-finite gradients raise, since they signal divergence.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name!r}")
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return grads, 1.0
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, scale


@dataclass
class OptState:
    """First/second moment accumulators mirroring the parameter shapes."""

    m: Parameters
    v: Parameters
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Parameters) -> "OptState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_step(
    params: Parameters,
    grads: Parameters,
    state: OptState,
    lr: float,
    cfg: StageConfig,
) -> tuple[Parameters, OptState]:
    """One bias-corrected Adam step with decoupled weight decay.

    p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * p.
    Inputs are not mutated; fresh parameter and state dicts are returned.
    """
    if set(params) != set(grads):
        raise ValueError("parameter and gradient names do not match")
    t = state.step + 1
    new_params: Parameters = {}
    new_m: Parameters = {}
    new_v: Parameters = {}
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS) - lr * cfg.weight_decay * p
        new_m[name] = m
        new_v[name] = v
    return new_params, OptState(m=new_m, v=new_v, step=t)


def smoothed_ctc_objective(
    logits: np.ndarray,
    target: str,
    vocab: Vocabulary,
    smoothing: float,
) -> tuple[float, np.ndarray]:
    """CTC loss blended with a per-frame uniform-KL regularizer.

    loss = (1-s) * ctc_loss + s * mean_u KL(uniform || softmax(logits_u)).
    The KL term's logit gradient is softmax minus uniform, so the combined
    gradient stays exact. With smoothing 0 this is plain CTC.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    base_loss, base_grad = ctc.ctc_loss_and_grad(logits, target, vocab)
    if smoothing == 0.0:
        return base_loss, base_grad
    log_probs = ctc.log_softmax(np.asarray(logits, dtype=np.float64), axis=1)
    n_frames, n_classes = log_probs.shape
    # KL(u || p) per frame = -log C - mean_k log p_k
    kl = -math.log(n_classes) - float(np.mean(log_probs))
    loss = (1.0 - smoothing) * base_loss + smoothing * kl
    grad = (1.0 - smoothing) * base_grad + (smoothing / n_frames) * (np.exp(log_probs) - 1.0 / n_classes)
    return loss, grad
