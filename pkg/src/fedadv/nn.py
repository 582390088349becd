"""Three-part model: feature extractor, age regressor and site discriminator.

All three parts are small MLPs whose weights live in a single :class:`ParamSet`
tagged by group, so that optimizers, the proximal term and the server-side
averaging can address "the discriminator" or "everything" uniformly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

FEATURE_EXTRACTOR = "feature_extractor"
REGRESSOR = "regressor"
DISCRIMINATOR = "discriminator"
GROUPS = (FEATURE_EXTRACTOR, REGRESSOR, DISCRIMINATOR)

PARAMSET_FORMAT = "fedadv.paramset/1"


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int = 16
    fe_hidden: tuple[int, ...] = (32,)
    feature_dim: int = 16
    reg_hidden: tuple[int, ...] = ()
    disc_hidden: tuple[int, ...] = (512,)
    n_sites: int = 15
    discriminator: bool = True
    # fixed affine output map, so the head works in standardized units while
    # predictions (and the squared-error loss) stay in years
    target_offset: float = 0.0
    target_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "fe_hidden", tuple(int(w) for w in self.fe_hidden))
        object.__setattr__(self, "reg_hidden", tuple(int(w) for w in self.reg_hidden))
        object.__setattr__(self, "disc_hidden", tuple(int(w) for w in self.disc_hidden))
        widths = (self.input_dim, self.feature_dim, *self.fe_hidden, *self.reg_hidden, *self.disc_hidden)
        if any(w < 1 for w in widths):
            raise ConfigError(f"all layer widths must be >= 1: {self}")
        if self.n_sites < 2:
            raise ConfigError(f"n_sites must be >= 2, got {self.n_sites}")
        if not self.target_scale > 0:
            raise ConfigError("target_scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("fe_hidden", "reg_hidden", "disc_hidden"):
            d[k] = list(d[k])
        return d

    def layer_plan(self) -> list[tuple[str, str, int, int]]:
        """(name prefix, group, fan_in, fan_out) for every dense layer, in order."""
        plan = []
        widths = [self.input_dim, *self.fe_hidden, self.feature_dim]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            plan.append((f"fe.{i}", FEATURE_EXTRACTOR, a, b))
        widths = [self.feature_dim, *self.reg_hidden, 1]
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            plan.append((f"reg.{i}", REGRESSOR, a, b))
        if self.discriminator:
            widths = [self.feature_dim, *self.disc_hidden, self.n_sites]
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                plan.append((f"disc.{i}", DISCRIMINATOR, a, b))
        return plan


class ParamSet:
    """Ordered ``name -> Tensor`` map with a group tag per entry."""

    def __init__(self, tensors: dict[str, Tensor], groups: dict[str, str]):
        if list(tensors) != list(groups):
            raise ConfigError("every parameter needs exactly one group tag")
        bad = {g for g in groups.values() if g not in GROUPS}
        if bad:
            raise ConfigError(f"unknown parameter groups {sorted(bad)}")
        self._tensors = dict(tensors)
        self._groups = dict(groups)

    # -- mapping-ish access
    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def group_of(self, name: str) -> str:
        return self._groups[name]

    def in_group(self, *groups: str) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if self._groups[n] in groups]

    def has_group(self, group: str) -> bool:
        return group in self._groups.values()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def signature(self) -> list[tuple[str, str, tuple[int, ...]]]:
        return [(n, self._groups[n], t.shape) for n, t in self._tensors.items()]

    def check_compatible(self, other: "ParamSet") -> None:
        if self.signature() != other.signature():
            raise ConfigError("parameter sets have different architectures")

    # -- copies and snapshots
    def copy(self, requires_grad: bool = True) -> "ParamSet":
        return ParamSet(
            {n: Tensor(t.data.copy(), requires_grad=requires_grad) for n, t in self._tensors.items()},
            self._groups,
        )

    def constants(self) -> "ParamSet":
        """Gradient-free view sharing data; used as a fixed reference."""
        return ParamSet({n: ad.constant(t.data) for n, t in self._tensors.items()}, self._groups)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._tensors.items()}

    def with_arrays(self, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> "ParamSet":
        out = {}
        for n, t in self._tensors.items():
            arr = np.asarray(arrays[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise ConfigError(f"shape mismatch for {n}: {arr.shape} vs {t.shape}")
            out[n] = Tensor(arr.copy(), requires_grad=requires_grad)
        return ParamSet(out, self._groups)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._tensors.values()])

    def unflatten(self, vector: np.ndarray, requires_grad: bool = True) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        total = sum(t.data.size for t in self._tensors.values())
        if vector.shape != (total,):
            raise ConfigError(f"flat vector has {vector.size} entries, expected {total}")
        out, pos = {}, 0
        for n, t in self._tensors.items():
            k = t.data.size
            out[n] = Tensor(vector[pos : pos + k].reshape(t.shape).copy(), requires_grad=requires_grad)
            pos += k
        return ParamSet(out, self._groups)

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of names, groups, shapes and values."""
        if self.signature() != other.signature():
            return False
        return all(
            np.array_equal(a.data.view(np.uint64), other[n].data.view(np.uint64))
            for n, a in self._tensors.items()
        )

    # -- serialization
    def to_dict(self) -> dict:
        return {
            "format": PARAMSET_FORMAT,
            "entries": [
                {
                    "name": n,
                    "group": self._groups[n],
                    "shape": list(t.shape),
                    "values": t.data.reshape(-1).tolist(),
                }
                for n, t in self._tensors.items()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, payload: dict, requires_grad: bool = True) -> "ParamSet":
        if payload.get("format") != PARAMSET_FORMAT:
            raise ConfigError(f"unsupported parameter container {payload.get('format')!r}")
        tensors, groups = {}, {}
        for entry in payload["entries"]:
            shape = tuple(entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
            if values.size != int(np.prod(shape, dtype=np.int64)):
                raise ConfigError(f"entry {entry['name']} has {values.size} values for shape {shape}")
            tensors[entry["name"]] = Tensor(values.reshape(shape), requires_grad=requires_grad)
            groups[entry["name"]] = entry["group"]
        return cls(tensors, groups)

    @classmethod
    def from_json(cls, text: str, requires_grad: bool = True) -> "ParamSet":
        return cls.from_dict(json.loads(text), requires_grad=requires_grad)


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors, groups = {}, {}
    for prefix, group, fan_in, fan_out in spec.layer_plan():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"{prefix}.w"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
        tensors[f"{prefix}.b"] = Tensor(np.zeros(fan_out), requires_grad=True)
        groups[f"{prefix}.w"] = group
        groups[f"{prefix}.b"] = group
    return ParamSet(tensors, groups)


def _layers(p: ParamSet, prefix: str) -> list[tuple[Tensor, Tensor]]:
    out, i = [], 0
    while f"{prefix}.{i}.w" in p:
        out.append((p[f"{prefix}.{i}.w"], p[f"{prefix}.{i}.b"]))
        i += 1
    return out


def _dense(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(h, w), b)


def forward_features(p: ParamSet, x) -> Tensor:
    h = x if isinstance(x, Tensor) else ad.constant(x)
    layers = _layers(p, "fe")
    if h.data.ndim != 2 or h.shape[1] != layers[0][0].shape[0]:
        raise DimensionError(f"expected features of width {layers[0][0].shape[0]}, got shape {h.shape}")
    for w, b in layers:
        h = ad.tanh(_dense(h, w, b))
    return h


def forward_age(p: ParamSet, features: Tensor, spec: ModelSpec | None = None) -> Tensor:
    """Predicted age in years, shape ``batch x 1``."""
    layers = _layers(p, "reg")
    h = features
    for w, b in layers[:-1]:
        h = ad.tanh(_dense(h, w, b))
    out = _dense(h, *layers[-1])
    if spec is not None and (spec.target_scale != 1.0 or spec.target_offset != 0.0):
        out = ad.add_bias(ad.scale(out, spec.target_scale), ad.constant([spec.target_offset]))
    return out


def forward_site(p: ParamSet, features: Tensor, lam: float) -> Tensor:
    """Site logits after a gradient-reversal layer of strength ``lam``."""
    layers = _layers(p, "disc")
    if not layers:
        raise ConfigError("parameter set has no discriminator")
    h = ad.grad_reverse(features, lam)
    for w, b in layers[:-1]:
        h = ad.relu(_dense(h, w, b))
    return _dense(h, *layers[-1])


def predict(p: ParamSet, x: np.ndarray, spec: ModelSpec | None = None) -> np.ndarray:
    """Gradient-free age prediction as a flat array."""
    consts = p.constants()
    return forward_age(consts, forward_features(consts, x), spec).data[:, 0].copy()
