"""Learning-rate schedule and from-scratch SGD / Adam / AdamW steps.

For the sparse head the parameter array is the layer's (rows, fan_in)
value array, so elementwise updates touch exactly the active coordinates
and the moment arrays share the layer's index layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

OPTIM_KINDS = ("sgd", "adam", "adamw")

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to the peak, then cosine decay to zero."""
    if warmup_steps >= total_steps:
        raise ConfigError(f"warmup {warmup_steps} must be < total steps "
                          f"{total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * (step + 1) / warmup_steps
    phase = math.pi * (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(phase))


@dataclass
class OptimState:
    """Per-parameter optimizer state; moment arrays congruent to the param."""

    kind: str
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    @classmethod
    def for_param(cls, kind: str, param: np.ndarray) -> "OptimState":
        if kind not in OPTIM_KINDS:
            raise ConfigError(f"optimizer must be one of {OPTIM_KINDS}, "
                              f"got {kind!r}")
        if kind == "sgd":
            return cls(kind)
        return cls(kind, m=np.zeros_like(param), v=np.zeros_like(param))

    def moment_arrays(self) -> list[np.ndarray]:
        return [a for a in (self.m, self.v) if a is not None]


def optimizer_step(param: np.ndarray, grad: np.ndarray, state: OptimState,
                   lr: float, weight_decay: float = 0.0) -> None:
    """One in-place update; standard definitions, decoupled decay for adamw."""
    if param.shape != grad.shape:
        raise ConfigError(f"grad shape {grad.shape} does not match param "
                          f"{param.shape}")
    if not np.isfinite(grad).all():
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise FloatingPointError(
            f"non-finite gradient ({bad} entries) at optimizer step "
            f"{state.step + 1}")
    state.step += 1
    if state.kind == "sgd":
        if weight_decay:
            param -= lr * (grad + weight_decay * param)
        else:
            param -= lr * grad
        return
    if state.kind == "adam" and weight_decay:
        grad = grad + weight_decay * param
    state.m *= BETA1
    state.m += (1 - BETA1) * grad
    state.v *= BETA2
    state.v += (1 - BETA2) * np.square(grad)
    mhat = state.m / (1 - BETA1 ** state.step)
    vhat = state.v / (1 - BETA2 ** state.step)
    param -= lr * mhat / (np.sqrt(vhat) + EPS)
    if state.kind == "adamw" and weight_decay:
        param -= lr * weight_decay * param
