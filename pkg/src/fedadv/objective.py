"""Client loss terms, the gradient-reversal schedule and algorithm configuration."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, UsageError
from .nn import DISCRIMINATOR, GROUPS, ParamSet

ALGORITHMS = ("erm", "dann", "fedavg", "fedprox", "naive_feddann", "feddapl")
PROX_SCOPES = ("discriminator_only", "all_parameters", "none")
OPTIMIZERS = ("adam", "sgd")

_DEFAULT_SCOPE = {
    "erm": "none",
    "dann": "none",
    "fedavg": "none",
    "naive_feddann": "none",
    "fedprox": "all_parameters",
    "feddapl": "discriminator_only",
}


@dataclass(frozen=True)
class LossBreakdown:
    l_y: float
    l_d: float
    l_prox: float
    l_total: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GrlSchedule:
    scale: float = 8.5
    steepness: float = 7.0
    horizon_epochs: int = 75
    warmup_epochs: int = 10

    def __post_init__(self):
        if self.scale < 0 or self.steepness < 0:
            raise ConfigError("schedule scale and steepness must be non-negative")
        if self.horizon_epochs < 1 or self.warmup_epochs < 0:
            raise ConfigError("schedule horizon must be >= 1 and warm-up >= 0")


@dataclass(frozen=True)
class AlgoConfig:
    algorithm: str = "feddapl"
    mu: float = 40.0
    prox_scope: str | None = None
    optimizer: str = "adam"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not (self.mu >= 0 and math.isfinite(self.mu)):
            raise ConfigError(f"mu must be a finite non-negative number, got {self.mu}")
        scope = self.prox_scope or _DEFAULT_SCOPE[self.algorithm]
        object.__setattr__(self, "prox_scope", scope)
        if scope not in PROX_SCOPES:
            raise ConfigError(f"unknown prox_scope {scope!r}")
        if self.algorithm == "feddapl" and scope != "discriminator_only":
            raise ConfigError("feddapl applies the proximal term to the discriminator only")
        if self.algorithm == "fedprox" and scope != "all_parameters":
            raise ConfigError("fedprox applies the proximal term to all parameters")
        if _DEFAULT_SCOPE[self.algorithm] == "none" and scope != "none" and self.mu != 0:
            raise ConfigError(f"{self.algorithm} has no proximal term; use mu=0 or prox_scope='none'")

    @property
    def adversarial(self) -> bool:
        return self.algorithm in ("dann", "naive_feddann", "fedprox", "feddapl")

    @property
    def federated(self) -> bool:
        return self.algorithm not in ("erm", "dann")

    @property
    def effective_mu(self) -> float:
        return 0.0 if self.prox_scope == "none" else self.mu

    def to_dict(self) -> dict:
        return asdict(self)


def grl_lambda(sched: GrlSchedule, epoch: int) -> float:
    """Gradient-reversal strength at a (cumulative) training epoch."""
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    if epoch < sched.warmup_epochs:
        return 0.0
    # progress saturates at 1 so runs longer than the horizon stay strictly below scale
    p = min(epoch / sched.horizon_epochs, 1.0)
    return sched.scale * (2.0 / (1.0 + math.exp(-sched.steepness * p)) - 1.0)


def loss_y(y_pred: Tensor, y_true) -> Tensor:
    """Mean squared error over the batch."""
    y_true = np.asarray(y_true.data if isinstance(y_true, Tensor) else y_true, dtype=np.float64)
    if y_true.ndim == 1:
        y_true = y_true[:, None]
    if y_pred.data.size == 0 or y_true.size == 0:
        raise UsageError("loss_y on an empty batch")
    if y_pred.shape != y_true.shape:
        raise UsageError(f"prediction shape {y_pred.shape} differs from target shape {y_true.shape}")
    diff = ad.sub(y_pred, ad.constant(y_true))
    return ad.mean(ad.mul(diff, diff))


def smoothed_targets(labels: np.ndarray, n_classes: int, smoothing: float) -> np.ndarray:
    q = np.full((labels.shape[0], n_classes), smoothing / n_classes)
    q[np.arange(labels.shape[0]), labels] += 1.0 - smoothing
    return q


def loss_d(d_pred: Tensor, d_true, smoothing: float = 0.06) -> Tensor:
    """Label-smoothed cross-entropy, averaged over the batch."""
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"label smoothing must lie in [0, 1), got {smoothing}")
    labels = np.asarray(d_true)
    if labels.size == 0:
        raise UsageError("loss_d on an empty batch")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise DataError("site labels must be integers")
        labels = labels.astype(np.int64)
    n, c = d_pred.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} site labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"site label outside [0, {c}): {int(labels.min())}..{int(labels.max())}")
    q = smoothed_targets(labels, c, smoothing)
    return ad.scale(ad.total(ad.mul(ad.log_softmax(d_pred), ad.constant(q))), -1.0 / n)


def loss_prox(local: ParamSet, global_ref: ParamSet, mu: float, scope: str) -> Tensor:
    """``mu/2 * ||theta_local - theta_global||^2`` over the parameters in ``scope``."""
    local.check_compatible(global_ref)
    if mu < 0:
        raise ConfigError(f"mu must be >= 0, got {mu}")
    if scope not in PROX_SCOPES:
        raise ConfigError(f"unknown prox_scope {scope!r}")
    groups = {"discriminator_only": (DISCRIMINATOR,), "all_parameters": GROUPS, "none": ()}[scope]
    scoped = local.in_group(*groups)
    if mu == 0 or not scoped:
        return ad.constant(0.0)
    terms = [ad.sum_sq(ad.sub(t, ad.constant(global_ref[name].data))) for name, t in scoped]
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, mu / 2.0)


def total_local_loss(l_y: Tensor, l_d: Tensor | None = None, l_prox: Tensor | None = None) -> tuple[Tensor, LossBreakdown]:
    """Sum the present components into the node to backpropagate."""
    total = l_y
    if l_d is not None:
        total = ad.add(total, l_d)
    if l_prox is not None and (l_prox.requires_grad or l_prox.item() != 0.0):
        total = ad.add(total, l_prox)
    breakdown = LossBreakdown(
        l_y=l_y.item(),
        l_d=l_d.item() if l_d is not None else 0.0,
        l_prox=l_prox.item() if l_prox is not None else 0.0,
        l_total=total.item(),
    )
    return total, breakdown
