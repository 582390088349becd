"""Multi-seed experiment runner, mu sweeps and the baseline matrix."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import DatasetSplit, GenConfig, generate, load_csv
from .errors import ConfigError, DivergedError
from .fed import FedConfig, TrainConfig, run_centralized, run_federated
from .nn import ModelSpec
from .objective import AlgoConfig, GrlSchedule

log = logging.getLogger(__name__)

REPORT_FORMAT = "fedadv.report/1"
DEFAULT_MUS = (0.0, 10.0, 20.0, 40.0, 100.0)

# fixed choices that are not config fields but shape every number in a report
CONVENTIONS = {
    "grl_epoch_index": "cumulative local epoch: round * local_epochs + local_epoch",
    "grl_progress": "min(epoch / horizon_epochs, 1)",
    "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "sgd_momentum": 0.9,
    "plateau_metric": "OOD MAE of the current model, checked every validate_every epochs or once per round",
    "plateau_rule": "decay once the count of non-improving checks reaches patience",
    "aggregation_order": "ascending client id",
    "headline_metric": "OOD MAE of the final model",
}


@dataclass(frozen=True)
class ModelConfig:
    fe_hidden: tuple[int, ...] = (32,)
    feature_dim: int = 16
    reg_hidden: tuple[int, ...] = ()
    disc_hidden: tuple[int, ...] = (512,)
    target_offset: float | None = None
    target_scale: float | None = None

    def __post_init__(self):
        for k in ("fe_hidden", "reg_hidden", "disc_hidden"):
            object.__setattr__(self, k, tuple(int(w) for w in getattr(self, k)))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("fe_hidden", "reg_hidden", "disc_hidden"):
            d[k] = list(d[k])
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run, given a seed."""

    data: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    # None: the training seed also draws the synthetic dataset
    data_seed: int | None = None
    csv_path: str | None = None
    ood_csv_path: str | None = None

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "fed": asdict(self.fed),
            "train": asdict(self.train),
            "algo": self.algo.to_dict(),
            "data_seed": self.data_seed,
            "csv_path": self.csv_path,
            "ood_csv_path": self.ood_csv_path,
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def with_algo(self, algorithm: str, mu: float = 0.0, optimizer: str = "adam") -> "ExperimentConfig":
        return replace(self, algo=AlgoConfig(algorithm, mu=mu, optimizer=optimizer))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        train = dict(d.get("train", {}))
        if "schedule" in train:
            train["schedule"] = GrlSchedule(**_known(GrlSchedule, train["schedule"], "train.schedule"))
        algo = dict(d.get("algo", {}))
        return cls(
            data=GenConfig.from_dict(d.get("data", {})),
            model=ModelConfig(**_known(ModelConfig, d.get("model", {}), "model")),
            fed=FedConfig(**_known(FedConfig, d.get("fed", {}), "fed")),
            train=TrainConfig(**_known(TrainConfig, train, "train")),
            algo=AlgoConfig(**_known(AlgoConfig, algo, "algo")),
            data_seed=d.get("data_seed"),
            csv_path=d.get("csv_path"),
            ood_csv_path=d.get("ood_csv_path"),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _known(klass, d: dict, section: str) -> dict:
    names = {f.name for f in fields(klass)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    return d


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


# ------------------------------------------------------------------ single runs


def load_data(cfg: ExperimentConfig, seed: int) -> DatasetSplit:
    if cfg.csv_path:
        return load_csv(cfg.csv_path, cfg.ood_csv_path)
    return generate(cfg.data, seed if cfg.data_seed is None else cfg.data_seed)


def model_spec(cfg: ExperimentConfig, data: DatasetSplit) -> ModelSpec:
    m = cfg.model
    offset, scale = m.target_offset, m.target_scale
    if offset is None or scale is None:
        if data.config is not None:
            d_off, d_scale = data.config.age_center, data.config.age_scale
        else:
            # pre-agreed normalisation constants for external data
            y = data.pooled_train().y
            d_off, d_scale = float(np.mean(y)), float(np.std(y)) or 1.0
        offset = d_off if offset is None else offset
        scale = d_scale if scale is None else scale
    return ModelSpec(
        input_dim=data.input_dim,
        fe_hidden=m.fe_hidden,
        feature_dim=m.feature_dim,
        reg_hidden=m.reg_hidden,
        disc_hidden=m.disc_hidden,
        n_sites=max(data.n_sites, 2),
        discriminator=cfg.algo.adversarial,
        target_offset=offset,
        target_scale=scale,
    )


def run_one(cfg: ExperimentConfig, seed: int, checkpoint_dir=None, data: DatasetSplit | None = None) -> dict:
    """Train one seed; returns a JSON-ready record (never raises on divergence)."""
    record = {"seed": int(seed), "config_hash": cfg.hash(), "status": "ok", "final_mae": None, "curve": []}
    try:
        data = data if data is not None else load_data(cfg, seed)
        spec = model_spec(cfg, data)
        if cfg.algo.federated:
            res = run_federated(cfg.fed, cfg.algo, data, seed, spec, cfg.train, checkpoint_dir=checkpoint_dir)
            record["curve"] = [{"round": r.round, "ood_mae": r.ood_mae, "fe_lr": r.fe_lr} for r in res.rounds]
            record["rounds"] = [r.to_dict() for r in res.rounds]
            record["partition"] = {str(k): v for k, v in res.partition.items()}
            final = res.model.params
        else:
            res = run_centralized(cfg.algo, data, seed, spec, cfg.train)
            record["curve"] = [{"epoch": v.epoch, "ood_mae": v.ood_mae, "fe_lr": v.fe_lr} for v in res.validations]
            record["validations"] = [v.to_dict() for v in res.validations]
            final = res.params
            if checkpoint_dir is not None:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                (Path(checkpoint_dir) / "final.json").write_text(final.to_json())
        record["final_mae"] = res.final_mae
    except DivergedError as exc:
        record["status"] = "diverged"
        record["error"] = str(exc)
        log.warning("seed %d diverged: %s", seed, exc)
    return record


# ------------------------------------------------------------------ reports


@dataclass
class ExperimentReport:
    label: str
    config: dict
    config_hash: str
    per_seed: list[dict]
    mae_mean: float
    mae_std: float
    single_seed: bool
    diverged: list[int]

    @classmethod
    def from_records(cls, label: str, cfg: ExperimentConfig, records: list[dict]) -> "ExperimentReport":
        ok = [r["final_mae"] for r in records if r["status"] == "ok"]
        mean = statistics.fmean(ok) if ok else math.nan
        std = statistics.stdev(ok) if len(ok) > 1 else 0.0
        return cls(
            label=label,
            config=cfg.to_dict(),
            config_hash=cfg.hash(),
            per_seed=records,
            mae_mean=mean,
            mae_std=std,
            single_seed=len(ok) == 1,
            diverged=[r["seed"] for r in records if r["status"] != "ok"],
        )

    @property
    def seed_maes(self) -> list[float]:
        return [r["final_mae"] for r in self.per_seed if r["status"] == "ok"]

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "label": self.label,
            "config_hash": self.config_hash,
            "config": self.config,
            "conventions": CONVENTIONS,
            "mae_mean": self.mae_mean,
            "mae_std": self.mae_std,
            "single_seed": self.single_seed,
            "diverged": self.diverged,
            "per_seed": self.per_seed,
        }


def run_suite(
    cfg: ExperimentConfig, seeds, label: str | None = None, out_dir=None, workers: int = 1, write_report: bool = True
) -> ExperimentReport:
    """Run ``cfg`` once per seed and summarise the final OOD MAE.

    With ``out_dir`` set, per-seed checkpoints land under ``out_dir/checkpoints``
    and, unless ``write_report`` is off, the report goes to ``out_dir/report.json``.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("run_suite needs at least one seed")
    label = label or method_label(cfg.algo)
    ckpt_root = Path(out_dir) / "checkpoints" if out_dir is not None else None
    jobs = [(cfg, s, None if ckpt_root is None else ckpt_root / f"{_slug(label)}_seed{s}") for s in seeds]
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_job, jobs))
    else:
        records = [_run_job(j) for j in jobs]
    report = ExperimentReport.from_records(label, cfg, records)
    if out_dir is not None and write_report:
        write_json(Path(out_dir) / "report.json", report.to_dict())
    return report


def _run_job(job) -> dict:
    cfg, seed, ckpt = job
    return run_one(cfg, seed, checkpoint_dir=ckpt)


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label).strip("_").lower()


_NAMES = {
    "erm": "ERM",
    "dann": "DANN",
    "fedavg": "FedAvg",
    "naive_feddann": "Naive FedDANN",
    "fedprox": "FedProx",
    "feddapl": "FedDAPL",
}


def method_label(algo: AlgoConfig) -> str:
    name = _NAMES[algo.algorithm]
    if not algo.federated:
        return name
    opt = "Adam" if algo.optimizer == "adam" else "SGD"
    if algo.prox_scope != "none":
        return f"{name} ({opt}, mu={_fmt_mu(algo.mu)})"
    return f"{name} ({opt})"


def _fmt_mu(mu: float) -> str:
    return str(int(mu)) if float(mu).is_integer() else repr(float(mu))


def write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _num(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else f"{x:.6f}"


# ------------------------------------------------------------------ tables

# (algorithm, optimizer, mu) rows of the federated comparison table
MATRIX_METHODS = (
    ("erm", "adam", 0.0),
    ("dann", "adam", 0.0),
    ("fedavg", "adam", 0.0),
    ("naive_feddann", "adam", 0.0),
    ("fedprox", "adam", 20.0),
    ("fedprox", "sgd", 20.0),
    ("feddapl", "adam", 40.0),
    ("feddapl", "sgd", 40.0),
)

TABLE2_COLUMNS = ("method", "mae_mean", "mae_std", "delta_erm", "delta_fedavg")


def baseline_matrix(cfg: ExperimentConfig, seeds, methods=MATRIX_METHODS, out_dir=None, workers: int = 1):
    """Run every method over ``seeds``; returns (rows, reports) with deltas against ERM and FedAvg."""
    reports = []
    for algorithm, optimizer, mu in methods:
        sub = cfg.with_algo(algorithm, mu=mu, optimizer=optimizer)
        reports.append(run_suite(sub, seeds, out_dir=out_dir, workers=workers, write_report=False))
    erm = next((r for r in reports if r.config["algo"]["algorithm"] == "erm"), None)
    fedavg = next((r for r in reports if r.config["algo"]["algorithm"] == "fedavg"), None)
    rows = [
        {
            "method": rep.label,
            "mae_mean": rep.mae_mean,
            "mae_std": rep.mae_std,
            "delta_erm": rep.mae_mean - erm.mae_mean if erm else math.nan,
            "delta_fedavg": rep.mae_mean - fedavg.mae_mean if fedavg else math.nan,
        }
        for rep in reports
    ]
    if out_dir is not None:
        out = Path(out_dir)
        write_text(out / "table2.csv", table2_csv(rows))
        write_json(out / "report.json", {"format": REPORT_FORMAT, "kind": "matrix", "reports": [r.to_dict() for r in reports]})
    return rows, reports


def table2_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE2_COLUMNS)
    for r in rows:
        w.writerow([r["method"]] + [_num(r[c]) for c in TABLE2_COLUMNS[1:]])
    return buf.getvalue()


def mu_sweep(cfg: ExperimentConfig, mus=DEFAULT_MUS, seeds=(0,), rows=(("feddapl", "adam"),), out_dir=None, workers: int = 1):
    """One report per (row, mu); the table has one line per row and one column per mu."""
    mus = [float(m) for m in mus]
    table, reports = [], []
    for algorithm, optimizer in rows:
        if algorithm not in ("feddapl", "fedprox"):
            raise ConfigError(f"mu sweep rows must be proximal algorithms, got {algorithm}")
        line = {"method": f"{_NAMES[algorithm]} ({'Adam' if optimizer == 'adam' else 'SGD'})"}
        for mu in mus:
            sub = cfg.with_algo(algorithm, mu=mu, optimizer=optimizer)
            rep = run_suite(sub, seeds, out_dir=out_dir, workers=workers, write_report=False)
            reports.append(rep)
            line[mu] = rep.mae_mean
        table.append(line)
    if out_dir is not None:
        out = Path(out_dir)
        write_text(out / "table3.csv", table3_csv(table, mus))
        write_json(out / "report.json", {"format": REPORT_FORMAT, "kind": "mu_sweep", "reports": [r.to_dict() for r in reports]})
    return table, reports


def table3_csv(table: list[dict], mus) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + [f"mu={_fmt_mu(m)}" for m in mus])
    for line in table:
        w.writerow([line["method"]] + [_num(line[float(m)]) for m in mus])
    return buf.getvalue()


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
