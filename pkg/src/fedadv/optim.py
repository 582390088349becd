"""Adam / SGD-momentum with per-group learning rates, clipping and plateau decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergedError
from .nn import DISCRIMINATOR, FEATURE_EXTRACTOR, GROUPS, REGRESSOR, ParamSet


def clip_global_norm(grads: list[np.ndarray], max_norm: float = 10.0) -> tuple[list[np.ndarray], float]:
    """Rescale ``grads`` jointly so their global L2 norm is at most ``max_norm``."""
    if not max_norm > 0:
        raise ConfigError(f"max_norm must be positive, got {max_norm}")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        factor = max_norm / norm
        return [g * factor for g in grads], norm
    return list(grads), norm


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


@dataclass
class SGDState:
    velocity: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "SGDState":
        return cls([np.zeros_like(p) for p in params])


def _check_shapes(params, grads, buffers) -> None:
    if not (len(params) == len(grads) == len(buffers)):
        raise ConfigError("params, grads and optimizer buffers differ in length")
    for p, g, b in zip(params, grads, buffers):
        if p.shape != g.shape or p.shape != b.shape:
            raise ConfigError(f"shape mismatch in optimizer step: {p.shape}, {g.shape}, {b.shape}")


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam update, applied in place."""
    _check_shapes(params, grads, state.m)
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sgd_momentum_step(params, grads, state: SGDState, lr: float, momentum=0.9) -> None:
    _check_shapes(params, grads, state.velocity)
    state.step += 1
    for p, g, vel in zip(params, grads, state.velocity):
        vel *= momentum
        vel += g
        p -= lr * vel


class GroupOptimizer:
    """One optimizer over a ParamSet with a learning rate per parameter group.

    Groups named in ``clip_groups`` have their gradients clipped jointly (per
    group) to ``max_norm`` before the update.
    """

    def __init__(
        self,
        params: ParamSet,
        kind: str = "adam",
        lrs: dict[str, float] | None = None,
        clip_groups: tuple[str, ...] = (DISCRIMINATOR,),
        max_norm: float = 10.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        momentum: float = 0.9,
    ):
        if kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lrs = {g: 1e-3 for g in GROUPS}
        self.lrs.update(lrs or {})
        self.clip_groups = tuple(clip_groups)
        self.max_norm = max_norm
        self.betas = betas
        self.eps = eps
        self.momentum = momentum
        self.names = params.names()
        self.groups = {g: [n for n in self.names if params.group_of(n) == g] for g in GROUPS}
        self.last_norms: dict[str, float] = {}
        self.reset(params)

    def reset(self, params: ParamSet) -> None:
        self.state = {}
        for g, names in self.groups.items():
            if not names:
                continue
            arrays = [params[n].data for n in names]
            self.state[g] = AdamState.zeros_like(arrays) if self.kind == "adam" else SGDState.zeros_like(arrays)

    def set_lr(self, groups, lr: float) -> None:
        for g in groups:
            self.lrs[g] = lr

    def step(self, params: ParamSet) -> None:
        if params.names() != self.names:
            raise ConfigError("optimizer was built for a different parameter set")
        for g, names in self.groups.items():
            if not names:
                continue
            arrays = [params[n].data for n in names]
            grads = [params[n].grad for n in names]
            if g in self.clip_groups:
                grads, self.last_norms[g] = clip_global_norm(grads, self.max_norm)
            if self.kind == "adam":
                adam_step(arrays, grads, self.state[g], self.lrs[g], *self.betas, self.eps)
            else:
                sgd_momentum_step(arrays, grads, self.state[g], self.lrs[g], self.momentum)


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 3
    threshold: float = 1e-4
    min_lr: float = 1e-6
    best: float = math.inf
    num_bad: int = 0
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ConfigError("plateau factor must lie in (0, 1)")
        if self.patience < 1:
            raise ConfigError("plateau patience must be >= 1")


def plateau_update(state: PlateauState, metric: float) -> float:
    """Record a validation metric (lower is better) and return the learning rate to use next."""
    if not math.isfinite(metric):
        raise DivergedError(f"validation metric is not finite: {metric}")
    state.history.append(metric)
    if metric < state.best - state.threshold:
        state.best = metric
        state.num_bad = 0
    else:
        state.num_bad += 1
        if state.num_bad >= state.patience:
            state.lr = max(state.lr * state.factor, state.min_lr)
            state.num_bad = 0
    return state.lr


FE_REG = (FEATURE_EXTRACTOR, REGRESSOR)
