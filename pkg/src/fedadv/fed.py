"""Local training, server aggregation and the centralized/federated drivers.

Centralized and federated runs share one mini-batch step and one batching
scheme, keyed by ``(seed, client_id, cumulative_epoch)``, so that a single
client holding all sites retraces the centralized trajectory exactly.

Clients talk to the server only through :class:`ClientUpdate` byte strings
holding a serialized ParamSet and scalar statistics.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Batch, DatasetSplit, mae
from .errors import ConfigError, DivergedError
from .nn import (
    DISCRIMINATOR,
    FEATURE_EXTRACTOR,
    REGRESSOR,
    ModelSpec,
    ParamSet,
    forward_age,
    forward_features,
    forward_site,
    init_params,
    predict,
)
from .objective import AlgoConfig, GrlSchedule, LossBreakdown, grl_lambda, loss_d, loss_prox, loss_y, total_local_loss
from .optim import GroupOptimizer, PlateauState, plateau_update

log = logging.getLogger(__name__)

FE_REG = (FEATURE_EXTRACTOR, REGRESSOR)
UPDATE_FORMAT = "fedadv.client_update/1"


@dataclass(frozen=True)
class FedConfig:
    clients: int = 5
    rounds: int = 15
    local_epochs: int = 5
    weighting: str = "by_sample_count"
    reset_optimizer: bool = True

    def __post_init__(self):
        if min(self.clients, self.rounds) < 1 or self.local_epochs < 0:
            raise ConfigError("clients and rounds must be >= 1, local_epochs >= 0")
        if self.weighting not in ("uniform", "by_sample_count"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    fe_lr_erm: float = 8e-4
    fe_lr_dann: float = 8.5e-4
    disc_lr: float = 2e-3
    sgd_lr_scale: float = 1.0
    label_smoothing: float = 0.06
    clip_norm: float = 10.0
    clip_all_groups: bool = False
    plateau: bool = True
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    plateau_threshold: float = 1e-4
    min_lr: float = 1e-6
    centralized_epochs: int = 75
    validate_every: int = 5
    schedule: GrlSchedule = field(default_factory=GrlSchedule)

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", GrlSchedule(**self.schedule))
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.validate_every < 1 or self.centralized_epochs < 0:
            raise ConfigError("validate_every must be >= 1 and centralized_epochs >= 0")

    def fe_lr(self, algo: AlgoConfig) -> float:
        lr = self.fe_lr_dann if algo.adversarial else self.fe_lr_erm
        return lr * (self.sgd_lr_scale if algo.optimizer == "sgd" else 1.0)

    def d_lr(self, algo: AlgoConfig) -> float:
        return self.disc_lr * (self.sgd_lr_scale if algo.optimizer == "sgd" else 1.0)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ partitioning


def partition_sites(sites, K: int, seed: int = 0, sizes: dict | None = None) -> dict[int, list]:
    """Split ``sites`` into ``K`` disjoint equal-size groups.

    With ``sizes`` given, the largest site is grouped with the smallest ones so
    that exactly one client holds the dominant share; the remaining sites are
    shuffled into the other clients by ``seed``.
    """
    sites = list(sites)
    if K < 1:
        raise ConfigError("K must be >= 1")
    if len(sites) % K:
        raise ConfigError(f"{len(sites)} sites cannot be split evenly over {K} clients")
    if len(set(sites)) != len(sites):
        raise ConfigError("duplicate site ids")
    per = len(sites) // K
    if K == 1:
        return {0: sorted(sites)}
    rng = np.random.default_rng([int(seed), 0xC11E])
    if sizes is not None:
        ordered = sorted(sites, key=lambda s: (sizes[s], s))
        dominant = ordered[-1]
        block = [dominant] + ordered[: per - 1]
        rest = [s for s in sites if s not in block]
    else:
        block, rest = [], list(sites)
    rest = [rest[i] for i in rng.permutation(len(rest))]
    groups = ([block] if block else []) + [rest[i : i + per] for i in range(0, len(rest), per)]
    return {k: sorted(g) for k, g in enumerate(groups)}


# ------------------------------------------------------------------ state types


@dataclass
class ClientState:
    client_id: int
    sites: list
    shard: Batch
    params: ParamSet | None = None
    opt: GroupOptimizer | None = None

    def __post_init__(self):
        if len(self.shard) == 0:
            raise ConfigError(f"client {self.client_id} has no samples")
        if self.shard.site is None or not set(np.unique(self.shard.site).tolist()) <= set(self.sites):
            raise ConfigError(f"client {self.client_id} shard holds sites outside its assignment")

    @property
    def n_samples(self) -> int:
        return len(self.shard)


@dataclass(frozen=True)
class GlobalModel:
    params: ParamSet
    round: int
    fe_lr: float
    d_lr: float


@dataclass
class RoundReport:
    round: int
    ood_mae: float
    fe_lr: float
    grl_lambda_end: float
    client_losses: dict[int, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "ood_mae": self.ood_mae,
            "fe_lr": self.fe_lr,
            "grl_lambda_end": self.grl_lambda_end,
            "client_losses": {str(k): v for k, v in sorted(self.client_losses.items())},
        }


@dataclass
class ClientUpdate:
    """The only message a client sends to the server."""

    client_id: int
    round: int
    n_samples: int
    params: ParamSet
    loss_means: dict

    def to_bytes(self) -> bytes:
        payload = {
            "format": UPDATE_FORMAT,
            "client_id": self.client_id,
            "round": self.round,
            "n_samples": self.n_samples,
            "loss_means": self.loss_means,
            "params": self.params.to_dict(),
        }
        return json.dumps(payload, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ClientUpdate":
        payload = json.loads(blob.decode())
        if payload.get("format") != UPDATE_FORMAT:
            raise ConfigError("unrecognised client message")
        return cls(
            client_id=int(payload["client_id"]),
            round=int(payload["round"]),
            n_samples=int(payload["n_samples"]),
            params=ParamSet.from_dict(payload["params"], requires_grad=False),
            loss_means=payload["loss_means"],
        )


# ------------------------------------------------------------------ shared training step


def epoch_batches(n: int, batch_size: int, seed: int, client_id: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([int(seed), 0xBA7C, int(client_id), int(epoch)]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_step(
    params: ParamSet,
    opt: GroupOptimizer,
    batch: Batch,
    algo: AlgoConfig,
    lam: float,
    spec: ModelSpec,
    smoothing: float,
    global_ref: ParamSet | None = None,
) -> LossBreakdown:
    """One forward/backward/update on a mini-batch, minimizing the client loss."""
    params.zero_grad()
    feats = forward_features(params, batch.features)
    l_y = loss_y(forward_age(params, feats, spec), batch.y)
    l_d = loss_d(forward_site(params, feats, lam), batch.site, smoothing) if algo.adversarial else None
    l_prox = None
    if global_ref is not None and algo.effective_mu > 0:
        l_prox = loss_prox(params, global_ref, algo.effective_mu, algo.prox_scope)
    total, breakdown = total_local_loss(l_y, l_d, l_prox)
    if not math.isfinite(breakdown.l_total):
        raise DivergedError(f"non-finite loss {breakdown.l_total}")
    ad.backward(total)
    opt.step(params)
    return breakdown


def make_optimizer(params: ParamSet, algo: AlgoConfig, train: TrainConfig, fe_lr: float | None = None) -> GroupOptimizer:
    fe = train.fe_lr(algo) if fe_lr is None else fe_lr
    return GroupOptimizer(
        params,
        kind=algo.optimizer,
        lrs={FEATURE_EXTRACTOR: fe, REGRESSOR: fe, DISCRIMINATOR: train.d_lr(algo)},
        clip_groups=(FEATURE_EXTRACTOR, REGRESSOR, DISCRIMINATOR) if train.clip_all_groups else (DISCRIMINATOR,),
        max_norm=train.clip_norm,
    )


def _means(log_: list[LossBreakdown]) -> dict:
    if not log_:
        return {"l_y": 0.0, "l_d": 0.0, "l_prox": 0.0, "l_total": 0.0, "steps": 0}
    arr = np.array([[b.l_y, b.l_d, b.l_prox, b.l_total] for b in log_])
    m = arr.mean(axis=0)
    return {"l_y": float(m[0]), "l_d": float(m[1]), "l_prox": float(m[2]), "l_total": float(m[3]), "steps": len(log_)}


def spec_for(algo: AlgoConfig, spec: ModelSpec) -> ModelSpec:
    """The model spec with the discriminator switched on only for adversarial algorithms."""
    if spec.discriminator == algo.adversarial:
        return spec
    return ModelSpec(**{**spec.to_dict(), "discriminator": algo.adversarial})


# ------------------------------------------------------------------ federated pieces


def local_train(
    client: ClientState,
    global_model: GlobalModel,
    algo: AlgoConfig,
    local_epochs: int,
    schedule: GrlSchedule,
    train: TrainConfig,
    spec: ModelSpec,
    seed: int,
    reset_optimizer: bool = True,
    step_hook: Callable | None = None,
) -> tuple[ParamSet, list[LossBreakdown]]:
    """Train a fresh copy of the broadcast model on the client's shard for ``local_epochs`` epochs.

    The broadcast parameters double as the proximal reference and are never
    modified.
    """
    r = global_model.round
    params = global_model.params.copy(requires_grad=True)
    if client.opt is None or reset_optimizer:
        client.opt = make_optimizer(params, algo, train, fe_lr=global_model.fe_lr)
    client.opt.set_lr(FE_REG, global_model.fe_lr)
    reference = global_model.params
    history: list[LossBreakdown] = []
    for e in range(local_epochs):
        cum_epoch = r * local_epochs + e
        lam = grl_lambda(schedule, cum_epoch) if algo.adversarial else 0.0
        for idx in epoch_batches(client.n_samples, train.batch_size, seed, client.client_id, cum_epoch):
            try:
                b = train_step(params, client.opt, client.shard.take(idx), algo, lam, spec, train.label_smoothing, reference)
            except DivergedError as exc:
                raise DivergedError(
                    f"client {client.client_id} diverged in round {r}: {exc}", round_index=r, client_id=client.client_id, seed=seed
                ) from None
            history.append(b)
            if step_hook is not None:
                step_hook(client.client_id, r, params, reference, b)
    client.params = params
    return params, history


def fedavg_aggregate(params: list[ParamSet], weights: list[float], client_ids: list[int] | None = None) -> ParamSet:
    """Weighted elementwise mean, reduced in ascending client-id order.

    Uses the running-mean update ``acc += (w_k / W_k) * (x_k - acc)`` so that
    identical inputs come back bit-for-bit unchanged.
    """
    if not params or len(params) != len(weights):
        raise ConfigError("need one weight per parameter set")
    if any(w < 0 or not math.isfinite(w) for w in weights):
        raise ConfigError("weights must be finite and non-negative")
    if sum(weights) <= 0:
        raise ConfigError("weights must not all be zero")
    for p in params[1:]:
        params[0].check_compatible(p)
    order = sorted(range(len(params)), key=lambda i: client_ids[i]) if client_ids is not None else range(len(params))
    pairs = [(params[i], float(weights[i])) for i in order if weights[i] > 0]
    acc = {n: t.data.copy() for n, t in pairs[0][0].items()}
    cum = pairs[0][1]
    for p, w in pairs[1:]:
        cum += w
        frac = w / cum
        for n, t in p.items():
            acc[n] += frac * (t.data - acc[n])
    return pairs[0][0].with_arrays(acc, requires_grad=False)


def evaluate(params: ParamSet, batch: Batch, spec: ModelSpec) -> float:
    return mae(predict(params, batch.features, spec), batch.y)


@dataclass
class FederatedResult:
    model: GlobalModel
    rounds: list[RoundReport]
    partition: dict[int, list]
    config: dict

    @property
    def final_mae(self) -> float:
        return self.rounds[-1].ood_mae


def build_clients(data: DatasetSplit, K: int, seed: int) -> tuple[list[ClientState], dict[int, list]]:
    assignment = partition_sites(sorted(data.train), K, seed, sizes=data.site_sizes())
    clients = [ClientState(k, sites, data.pooled_train(sites)) for k, sites in sorted(assignment.items())]
    return clients, assignment


def run_federated(
    cfg: FedConfig,
    algo: AlgoConfig,
    data: DatasetSplit,
    seed: int,
    spec: ModelSpec,
    train: TrainConfig | None = None,
    transport: Callable[[bytes], None] | None = None,
    checkpoint_dir=None,
    step_hook: Callable | None = None,
) -> FederatedResult:
    """Broadcast, train every client locally, aggregate everything, evaluate; ``cfg.rounds`` times."""
    if not algo.federated:
        raise ConfigError(f"{algo.algorithm} is a centralized algorithm")
    train = train or TrainConfig()
    spec = spec_for(algo, spec)
    if spec.discriminator and spec.n_sites < data.n_sites:
        raise ConfigError(f"discriminator has {spec.n_sites} outputs but the data has {data.n_sites} sites")
    clients, assignment = build_clients(data, cfg.clients, seed)
    plateau = PlateauState(
        train.fe_lr(algo), train.plateau_factor, train.plateau_patience, train.plateau_threshold, train.min_lr
    )
    model = GlobalModel(init_params(spec, seed).copy(requires_grad=False), 0, plateau.lr, train.d_lr(algo))
    reports: list[RoundReport] = []
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    for r in range(cfg.rounds):
        model = GlobalModel(model.params, r, plateau.lr, model.d_lr)
        updates = []
        for client in clients:
            params, history = local_train(
                client, model, algo, cfg.local_epochs, train.schedule, train, spec, seed, cfg.reset_optimizer, step_hook
            )
            blob = ClientUpdate(client.client_id, r, client.n_samples, params, _means(history)).to_bytes()
            if transport is not None:
                transport(blob)
            updates.append(ClientUpdate.from_bytes(blob))

        weights = [u.n_samples if cfg.weighting == "by_sample_count" else 1.0 for u in updates]
        new_params = fedavg_aggregate([u.params for u in updates], weights, [u.client_id for u in updates])
        score = evaluate(new_params, data.ood, spec)
        if not math.isfinite(score):
            raise DivergedError(f"OOD MAE is not finite after round {r}", round_index=r, seed=seed)
        last_epoch = r * cfg.local_epochs + max(cfg.local_epochs - 1, 0)
        reports.append(
            RoundReport(
                round=r,
                ood_mae=score,
                fe_lr=plateau.lr,
                grl_lambda_end=grl_lambda(train.schedule, last_epoch) if algo.adversarial else 0.0,
                client_losses={u.client_id: u.loss_means for u in updates},
            )
        )
        if train.plateau:
            plateau_update(plateau, score)
        model = GlobalModel(new_params, r + 1, plateau.lr, model.d_lr)
        log.debug("seed %s %s round %d: OOD MAE %.4f", seed, algo.algorithm, r, score)
        if ckpt is not None:
            (ckpt / f"round_{r:03d}.json").write_text(new_params.to_json())
            (ckpt / "rounds.json").write_text(json.dumps([rep.to_dict() for rep in reports], indent=1))

    return FederatedResult(model, reports, assignment, {"fed": asdict(cfg), "algo": algo.to_dict()})


# ------------------------------------------------------------------ centralized


@dataclass
class ValidationReport:
    epoch: int
    ood_mae: float
    fe_lr: float
    grl_lambda: float
    loss_means: dict

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CentralizedResult:
    params: ParamSet
    validations: list[ValidationReport]

    @property
    def final_mae(self) -> float:
        return self.validations[-1].ood_mae


def run_centralized(
    algo: AlgoConfig,
    data: DatasetSplit,
    seed: int,
    spec: ModelSpec,
    train: TrainConfig | None = None,
    epochs: int | None = None,
    validate_every: int | None = None,
    step_hook: Callable | None = None,
) -> CentralizedResult:
    """Train one model on the pooled training sites, validating on the OOD pool."""
    if algo.federated:
        raise ConfigError(f"{algo.algorithm} is a federated algorithm")
    train = train or TrainConfig()
    epochs = train.centralized_epochs if epochs is None else epochs
    validate_every = train.validate_every if validate_every is None else validate_every
    spec = spec_for(algo, spec)
    pooled = data.pooled_train()
    params = init_params(spec, seed)
    opt = make_optimizer(params, algo, train)
    plateau = PlateauState(
        train.fe_lr(algo), train.plateau_factor, train.plateau_patience, train.plateau_threshold, train.min_lr
    )
    validations: list[ValidationReport] = []
    history: list[LossBreakdown] = []
    for epoch in range(epochs):
        lam = grl_lambda(train.schedule, epoch) if algo.adversarial else 0.0
        for idx in epoch_batches(len(pooled), train.batch_size, seed, 0, epoch):
            try:
                b = train_step(params, opt, pooled.take(idx), algo, lam, spec, train.label_smoothing)
            except DivergedError as exc:
                raise DivergedError(f"{algo.algorithm} diverged at epoch {epoch}: {exc}", seed=seed) from None
            history.append(b)
            if step_hook is not None:
                step_hook(0, epoch, params, None, b)
        if (epoch + 1) % validate_every == 0 or epoch + 1 == epochs:
            frozen = params.copy(requires_grad=False)
            score = evaluate(frozen, data.ood, spec)
            if not math.isfinite(score):
                raise DivergedError(f"OOD MAE is not finite at epoch {epoch + 1}", seed=seed)
            validations.append(ValidationReport(epoch + 1, score, plateau.lr, lam, _means(history)))
            history = []
            if train.plateau:
                opt.set_lr(FE_REG, plateau_update(plateau, score))
    if not validations:
        frozen = params.copy(requires_grad=False)
        validations.append(ValidationReport(0, evaluate(frozen, data.ood, spec), plateau.lr, 0.0, _means([])))
    return CentralizedResult(params, validations)
