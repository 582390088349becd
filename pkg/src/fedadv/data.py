"""Synthetic multi-site age-regression data and a CSV ingestion path.

Each training site applies its own "scanner" to the observations: a gain and
offset on the signal dimensions, a large offset on the nuisance dimensions,
and a leak that writes the standardised age into the nuisance dimensions
along a direction drawn per site.  The leak is absent on held-out sites, so a
regressor that relies on it degrades out of distribution while a
site-invariant one does not.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, UsageError


@dataclass(frozen=True)
class GenConfig:
    n_train_sites: int = 15
    n_ood_sites: int = 19
    n_train: int = 1587
    n_ood: int = 594
    d_signal: int = 8
    d_nuis: int = 8
    dominant_fraction: float = 0.6
    sites_per_client: int = 3
    min_site_count: int = 10
    train_age_range: tuple[float, float] = (6.0, 64.0)
    ood_age_range: tuple[float, float] = (6.0, 79.0)
    age_center: float = 24.0
    age_scale: float = 9.0
    label_noise: float = 2.5
    signal_noise: float = 0.3
    signal_bias_scale: float = 0.3
    gain_spread: float = 0.15
    site_shift: float = 0.5
    ood_site_shift: float = 0.8
    nuis_bias_scale: float = 2.0
    nuis_noise: float = 0.5
    leak_mean: float = 1.5
    leak_spread: float = 0.2
    # mostly site-specific leak direction: the leak then identifies the site,
    # which is what a site adversary can strip out
    leak_dir_jitter: float = 3.0
    leak_dims: int = 8

    def __post_init__(self):
        object.__setattr__(self, "train_age_range", tuple(float(v) for v in self.train_age_range))
        object.__setattr__(self, "ood_age_range", tuple(float(v) for v in self.ood_age_range))
        if self.d_signal < 1 or self.d_nuis < 1:
            raise ConfigError("d_signal and d_nuis must be >= 1")
        if self.n_train_sites < 1 or self.n_ood_sites < 1:
            raise ConfigError("site counts must be >= 1")
        if self.n_train < self.n_train_sites * self.min_site_count:
            raise ConfigError("too few training samples for the requested sites")
        if self.n_ood < self.n_ood_sites:
            raise ConfigError("too few OOD samples for the requested sites")
        if not 1 <= self.leak_dims <= self.d_nuis:
            raise ConfigError("leak_dims must lie in [1, d_nuis]")
        if not 0.0 < self.dominant_fraction < 1.0:
            raise ConfigError("dominant_fraction must lie in (0, 1)")
        for lo, hi in (self.train_age_range, self.ood_age_range):
            if not lo < hi:
                raise ConfigError("age ranges must be increasing")

    @property
    def input_dim(self) -> int:
        return self.d_signal + self.d_nuis

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_age_range"] = list(self.train_age_range)
        d["ood_age_range"] = list(self.ood_age_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown data config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    features: np.ndarray
    y: np.ndarray
    site: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.features.ndim != 2 or self.y.shape != (self.features.shape[0],):
            raise DataError(f"inconsistent batch shapes {self.features.shape} / {self.y.shape}")
        if self.site is not None:
            self.site = np.asarray(self.site, dtype=np.int64)
            if self.site.shape != self.y.shape:
                raise DataError("site labels must align with targets")

    def __len__(self) -> int:
        return self.y.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.features[idx], self.y[idx], None if self.site is None else self.site[idx])

    @staticmethod
    def concat(batches: list["Batch"]) -> "Batch":
        if not batches:
            raise UsageError("cannot concatenate zero batches")
        sites = [b.site for b in batches]
        return Batch(
            np.concatenate([b.features for b in batches]),
            np.concatenate([b.y for b in batches]),
            None if any(s is None for s in sites) else np.concatenate(sites),
        )


@dataclass
class DatasetSplit:
    """Training shards keyed by site label plus a pooled out-of-distribution set."""

    train: dict[int, Batch]
    ood: Batch
    ood_site: np.ndarray
    site_names: list[str] = field(default_factory=list)
    ood_site_names: list[str] = field(default_factory=list)
    config: GenConfig | None = None

    def __post_init__(self):
        if not self.train:
            raise DataError("no training sites")
        for s, b in self.train.items():
            if len(b) == 0:
                raise DataError(f"training site {s} is empty")
            if b.site is None or np.any(b.site != s):
                raise DataError(f"shard for site {s} carries foreign site labels")
        if len(self.ood) == 0:
            raise DataError("OOD pool is empty")
        if self.ood.site is not None:
            raise DataError("OOD samples must not carry discriminator labels")
        self.ood_site = np.asarray(self.ood_site, dtype=np.int64)
        if not self.site_names:
            self.site_names = [str(s) for s in sorted(self.train)]
        if not self.ood_site_names:
            self.ood_site_names = [f"ood{s}" for s in sorted(set(self.ood_site.tolist()))]
        overlap = set(self.site_names) & set(self.ood_site_names)
        if overlap:
            raise DataError(f"site ids shared by train and OOD splits: {sorted(overlap)}")

    @property
    def n_sites(self) -> int:
        return len(self.train)

    @property
    def input_dim(self) -> int:
        return next(iter(self.train.values())).features.shape[1]

    def site_sizes(self) -> dict[int, int]:
        return {s: len(b) for s, b in sorted(self.train.items())}

    def pooled_train(self, sites=None) -> Batch:
        keys = sorted(self.train) if sites is None else sorted(sites)
        return Batch.concat([self.train[s] for s in keys])

    def n_train(self) -> int:
        return sum(len(b) for b in self.train.values())


# ------------------------------------------------------------------ sizing


def _allocate(total: int, weights: np.ndarray, minimum: int) -> np.ndarray:
    """Integer counts summing to ``total``, each >= ``minimum``, proportional to ``weights``."""
    k = len(weights)
    spare = total - minimum * k
    if spare < 0:
        raise ConfigError(f"cannot give {k} sites at least {minimum} samples out of {total}")
    raw = spare * weights / weights.sum()
    counts = np.floor(raw).astype(np.int64)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: spare - counts.sum()]] += 1
    return counts + minimum


def train_site_sizes(cfg: GenConfig, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Per-site counts where the dominant site plus the smallest companions hold ``dominant_fraction``.

    Returns the counts and the index of the dominant site.
    """
    n_sites = cfg.n_train_sites
    if n_sites == 1:
        return np.array([cfg.n_train]), 0
    companions = min(cfg.sites_per_client - 1, n_sites - 1)
    weights = rng.dirichlet(np.full(n_sites - 1, 2.0))
    target_block = int(round(cfg.dominant_fraction * cfg.n_train))
    # solve for the mass of the non-dominant sites so that dominant + smallest
    # companions lands on the target block
    props = np.sort(weights)
    small_share = props[:companions].sum()
    others_total = int(round(cfg.n_train * (1.0 - cfg.dominant_fraction) / (1.0 - small_share)))
    others = _allocate(others_total, weights, cfg.min_site_count)
    smallest = np.sort(others)[:companions].sum()
    dominant = target_block - smallest
    others_total = cfg.n_train - dominant
    others = _allocate(others_total, weights, cfg.min_site_count)
    dominant = cfg.n_train - others.sum()
    if dominant <= others.max():
        raise ConfigError("dominant_fraction too small to single out one site")
    dom_idx = int(rng.integers(n_sites))
    counts = np.insert(others, dom_idx, dominant)
    return counts, dom_idx


# ------------------------------------------------------------------ generator


@dataclass
class _Mechanism:
    mix: np.ndarray  # d_signal x d_signal
    readout: np.ndarray  # d_signal
    raw_mean: float
    raw_std: float
    leak_dir: np.ndarray  # d_nuis

    def age(self, z: np.ndarray, cfg: GenConfig, noise: np.ndarray) -> np.ndarray:
        raw = np.tanh(z @ self.mix) @ self.readout
        return cfg.age_center + cfg.age_scale * ((raw - self.raw_mean) / self.raw_std) + cfg.label_noise * noise


def _mechanism(cfg: GenConfig, rng: np.random.Generator) -> _Mechanism:
    d = cfg.d_signal
    mix = rng.normal(size=(d, d)) / math.sqrt(d) * 1.5
    readout = rng.normal(size=d)
    probe = np.tanh(rng.normal(size=(20000, d)) @ mix) @ readout
    leak_dir = np.zeros(cfg.d_nuis)
    leak_dir[: cfg.leak_dims] = np.sign(rng.normal(size=cfg.leak_dims)) / math.sqrt(cfg.leak_dims)
    return _Mechanism(mix, readout, float(probe.mean()), float(probe.std()), leak_dir)


def _sample_site(cfg, mech, rng, n, age_range, shift_scale, leak_gamma):
    d = cfg.d_signal
    center = rng.normal(size=d) * shift_scale
    gain = np.exp(cfg.gain_spread * rng.normal(size=d))
    sig_bias = cfg.signal_bias_scale * rng.normal(size=d)
    nuis_bias = cfg.nuis_bias_scale * rng.normal(size=cfg.d_nuis)
    direction = mech.leak_dir + cfg.leak_dir_jitter * rng.normal(size=cfg.d_nuis) / math.sqrt(cfg.d_nuis)
    direction /= np.linalg.norm(direction)

    lo, hi = age_range
    zs, ys = [], []
    have = 0
    for _ in range(1000):
        z = center + rng.normal(size=(2 * n, d))
        y = mech.age(z, cfg, rng.normal(size=2 * n))
        keep = (y >= lo) & (y <= hi)
        zs.append(z[keep])
        ys.append(y[keep])
        have += int(keep.sum())
        if have >= n:
            break
    else:
        raise ConfigError(f"could not draw {n} ages inside {age_range}")
    z = np.concatenate(zs)[:n]
    y = np.concatenate(ys)[:n]

    signal = gain * (z + cfg.signal_noise * rng.normal(size=z.shape)) + sig_bias
    leak = leak_gamma * ((y - cfg.age_center) / cfg.age_scale)[:, None] * direction
    nuis = nuis_bias + leak + cfg.nuis_noise * rng.normal(size=(n, cfg.d_nuis))
    return np.hstack([signal, nuis]), y


def generate(cfg: GenConfig, seed: int) -> DatasetSplit:
    """Draw a training/OOD split; identical ``(cfg, seed)`` give identical arrays."""
    rng = np.random.default_rng([int(seed), 0x5EED])
    mech = _mechanism(cfg, rng)
    counts, _ = train_site_sizes(cfg, rng)
    ood_counts = _allocate(cfg.n_ood, rng.dirichlet(np.full(cfg.n_ood_sites, 2.0)), max(1, min(5, cfg.n_ood // cfg.n_ood_sites)))

    train = {}
    for s, n in enumerate(counts):
        gamma = cfg.leak_mean + cfg.leak_spread * rng.normal()
        x, y = _sample_site(cfg, mech, rng, int(n), cfg.train_age_range, cfg.site_shift, gamma)
        train[s] = Batch(x, y, np.full(int(n), s))

    xs, ys, ids = [], [], []
    for j, n in enumerate(ood_counts):
        x, y = _sample_site(cfg, mech, rng, int(n), cfg.ood_age_range, cfg.ood_site_shift, 0.0)
        xs.append(x)
        ys.append(y)
        ids.append(np.full(int(n), j))
    ood = Batch(np.vstack(xs), np.concatenate(ys))
    return DatasetSplit(
        train=train,
        ood=ood,
        ood_site=np.concatenate(ids),
        site_names=[f"train{s:02d}" for s in range(cfg.n_train_sites)],
        ood_site_names=[f"ood{j:02d}" for j in range(cfg.n_ood_sites)],
        config=cfg,
    )


# ------------------------------------------------------------------ metrics


def mae(y_pred, y_true) -> float:
    """Mean absolute error."""
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
    if y_pred.size == 0:
        raise UsageError("mae of an empty set")
    if y_pred.shape != y_true.shape:
        raise UsageError(f"mae needs equal lengths, got {y_pred.size} and {y_true.size}")
    return float(np.mean(np.abs(y_pred - y_true)))


def shortcut_correlation(features: np.ndarray, y: np.ndarray, sites: np.ndarray, d_signal: int) -> np.ndarray:
    """Per nuisance dimension, the Pearson correlation with age after centring within each site."""
    nuis = features[:, d_signal:].copy()
    yc = y.astype(np.float64).copy()
    for s in np.unique(sites):
        m = sites == s
        nuis[m] -= nuis[m].mean(axis=0)
        yc[m] -= yc[m].mean()
    num = nuis.T @ yc
    den = np.sqrt((nuis * nuis).sum(axis=0) * (yc @ yc))
    return num / np.where(den > 0, den, 1.0)


# ------------------------------------------------------------------ CSV


def _feature_columns(header: list[str]) -> list[str]:
    cols = [h for h in header if h.startswith("f") and h[1:].isdigit()]
    cols.sort(key=lambda h: int(h[1:]))
    if not cols or [int(c[1:]) for c in cols] != list(range(1, len(cols) + 1)):
        raise DataError(f"expected feature columns f1..fd, got {cols}")
    return cols


def _read_rows(path: Path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = {"id", "site", "y"} - set(header)
        if missing:
            raise DataError(f"{path}: missing column(s) {sorted(missing)}")
        return header, list(reader)


def _parse_float(value: str, path, lineno: int, column: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise DataError(f"{path}: row {lineno}: non-numeric value {value!r} in column {column}") from None
    if not math.isfinite(out):
        raise DataError(f"{path}: row {lineno}: non-finite value in column {column}")
    return out


def load_csv(path, ood_path=None) -> DatasetSplit:
    """Load ``id, site, y, f1..fd`` rows; OOD rows come from ``ood_path`` or a ``split`` column."""
    path = Path(path)
    header, rows = _read_rows(path)
    fcols = _feature_columns(header)
    tagged = []
    for i, row in enumerate(rows, start=2):
        split = (row.get("split") or "train").strip().lower()
        if split not in ("train", "ood"):
            raise DataError(f"{path}: row {i}: unknown split {split!r}")
        tagged.append((path, i, split, row))
    if ood_path is not None:
        ood_path = Path(ood_path)
        ood_header, ood_rows = _read_rows(ood_path)
        if _feature_columns(ood_header) != fcols:
            raise DataError(f"{ood_path}: feature columns differ from {path}")
        tagged += [(ood_path, i, "ood", row) for i, row in enumerate(ood_rows, start=2)]

    parsed = {"train": [], "ood": []}
    for src, lineno, split, row in tagged:
        site = (row["site"] or "").strip()
        if not site:
            raise DataError(f"{src}: row {lineno}: empty site id")
        y = _parse_float(row["y"], src, lineno, "y")
        feats = [_parse_float(row[c], src, lineno, c) for c in fcols]
        parsed[split].append((site, y, feats, src, lineno))

    if not parsed["train"]:
        raise DataError(f"{path}: no training rows")
    if not parsed["ood"]:
        raise DataError("no OOD rows (add a split column or pass an OOD file)")
    train_names = sorted({r[0] for r in parsed["train"]}, key=_natural_key)
    ood_names = sorted({r[0] for r in parsed["ood"]}, key=_natural_key)
    for site, _, _, src, lineno in parsed["ood"]:
        if site in train_names:
            raise DataError(f"{src}: row {lineno}: OOD site {site!r} also appears in training data")

    label = {name: k for k, name in enumerate(train_names)}
    train = {}
    for name in train_names:
        rows_s = [r for r in parsed["train"] if r[0] == name]
        train[label[name]] = Batch(
            np.array([r[2] for r in rows_s]), np.array([r[1] for r in rows_s]), np.full(len(rows_s), label[name])
        )
    ood_label = {name: k for k, name in enumerate(ood_names)}
    ood_rows = parsed["ood"]
    ood = Batch(np.array([r[2] for r in ood_rows]), np.array([r[1] for r in ood_rows]))
    return DatasetSplit(
        train=train,
        ood=ood,
        ood_site=np.array([ood_label[r[0]] for r in ood_rows]),
        site_names=train_names,
        ood_site_names=ood_names,
    )


def _natural_key(name: str):
    return (0, int(name), "") if name.lstrip("-").isdigit() else (1, 0, name)


def write_csv(split: DatasetSplit, path, ood_path=None) -> None:
    """Write ``split`` in the :func:`load_csv` schema (one file with a split column, or two files)."""
    d = split.input_dim
    fcols = [f"f{i}" for i in range(1, d + 1)]

    def rows_for(which):
        if which == "train":
            k = 0
            for s in sorted(split.train):
                b = split.train[s]
                for i in range(len(b)):
                    yield [f"r{k}", split.site_names[s], repr(float(b.y[i]))] + [repr(float(v)) for v in b.features[i]]
                    k += 1
        else:
            b = split.ood
            for i in range(len(b)):
                yield [f"o{i}", split.ood_site_names[split.ood_site[i]], repr(float(b.y[i]))] + [
                    repr(float(v)) for v in b.features[i]
                ]

    def dump(target, which_list, with_split):
        with open(target, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "site", "y", *fcols] + (["split"] if with_split else []))
            for which in which_list:
                for row in rows_for(which):
                    w.writerow(row + ([which] if with_split else []))

    if ood_path is None:
        dump(path, ["train", "ood"], True)
    else:
        dump(path, ["train"], False)
        dump(ood_path, ["ood"], False)
