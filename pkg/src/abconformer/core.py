"""Shared domain types: configuration, chain roles, token masks, batch padding."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch


class DataError(ValueError):
    """Malformed or inconsistent input data (config files, manifests, structures)."""

    module = "core"

    def __init__(self, message: str, module: str | None = None):
        super().__init__(message)
        if module is not None:
            self.module = module


class ConfigError(DataError):
    """Invalid configuration value or file."""


class NumericsError(RuntimeError):
    """Non-finite values or a failed numerical check."""

    module = "core"

    def __init__(self, message: str, module: str | None = None):
        super().__init__(message)
        if module is not None:
            self.module = module


class ChainRole(Enum):
    """The three chains of a decomposed antibody-antigen complex."""

    ABH = "abh"
    ABL = "abl"
    AG = "ag"


ANTIBODY_ROLES = (ChainRole.ABH, ChainRole.ABL)

# Config fields that must be integers.
_INT_FIELDS = frozenset(
    {
        "d_model",
        "dim_ff",
        "n_heads",
        "conv_kernel",
        "n_blocks",
        "sliding_step",
        "batch_size",
        "epochs",
        "max_steps",
    }
)


@dataclass(frozen=True)
class Config:
    """Model and optimizer hyperparameters.

    Defaults are the standard full-scale configuration; tests override them
    with much smaller values.
    """

    d_model: int = 640
    dim_ff: int = 1280
    n_heads: int = 10
    conv_kernel: int = 5
    n_blocks: int = 6
    min_bw: float = 48.0
    max_bw: float = 144.0
    scale: float = 3.0
    sliding_step: int = 3
    alpha: float = 0.5
    epsilon: float = 1e-9
    threshold_abh: float = 0.2
    threshold_abl: float = 0.13
    threshold_ag: float = 0.3
    threshold_pan: float = 0.11
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    ema_decay: float = 0.999
    batch_size: int = 6
    epochs: int = 50
    max_steps: int = 0  # 0 = no cap on optimizer steps

    def validate(self) -> None:
        if self.d_model <= 0 or self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be positive and divisible by n_heads")
        if self.dim_ff <= 0:
            raise ConfigError("dim_ff must be positive")
        if self.conv_kernel <= 0 or self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if not (0 < self.min_bw <= self.max_bw):
            raise ConfigError("bandwidth bounds require 0 < min_bw <= max_bw")
        if self.scale <= 0:
            raise ConfigError("scale must be > 0")
        if self.sliding_step < 1:
            raise ConfigError("sliding_step must be >= 1")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError("alpha out of [0,1]")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        for key in ("threshold_abh", "threshold_abl", "threshold_ag", "threshold_pan"):
            value = getattr(self, key)
            if not (0.0 <= value <= 1.0):
                raise ConfigError(f"{key} out of [0,1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        for key in ("beta1", "beta2", "ema_decay"):
            value = getattr(self, key)
            if not (0.0 <= value < 1.0):
                raise ConfigError(f"{key} out of [0,1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def threshold(self, role: ChainRole) -> float:
        return {
            ChainRole.ABH: self.threshold_abh,
            ChainRole.ABL: self.threshold_abl,
            ChainRole.AG: self.threshold_ag,
        }[role]

    def replace(self, **kwargs) -> "Config":
        cfg = dataclasses.replace(self, **kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def config_from_dict(values: dict) -> Config:
    """Build a validated Config from a flat key->number mapping."""
    known = {f.name for f in dataclasses.fields(Config)}
    coerced: dict = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"config key '{key}' must be a number")
        if key in _INT_FIELDS:
            if float(value) != int(value):
                raise ConfigError(f"config key '{key}' must be an integer")
            coerced[key] = int(value)
        else:
            coerced[key] = float(value)
    cfg = Config(**coerced)
    cfg.validate()
    return cfg


def parse_config(path: str | Path) -> Config:
    """Parse a flat JSON config file; file values override the defaults."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if values is None or values == {}:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError("config file must contain a JSON object")
    return config_from_dict(values)


@dataclass(frozen=True)
class TokenMask:
    """Per-position validity flags; valid positions form a prefix."""

    flags: np.ndarray  # bool, shape (padded_len,)

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool)
        object.__setattr__(self, "flags", flags)
        n_valid = int(flags.sum())
        if not np.array_equal(flags, prefix_flags(n_valid, flags.shape[0])):
            raise DataError("token mask must be a prefix of valid positions")

    @property
    def valid_len(self) -> int:
        return int(self.flags.sum())

    @classmethod
    def from_lengths(cls, valid_len: int, padded_len: int) -> "TokenMask":
        return cls(prefix_flags(valid_len, padded_len))


def prefix_flags(valid_len: int, padded_len: int) -> np.ndarray:
    if not (0 <= valid_len <= padded_len):
        raise DataError(f"invalid mask lengths: valid={valid_len} padded={padded_len}")
    flags = np.zeros(padded_len, dtype=bool)
    flags[:valid_len] = True
    return flags


@dataclass
class ChainArrays:
    """One chain's encoded features and labels; length 0 marks an absent chain."""

    emb: np.ndarray  # (L, d_in) float
    labels: np.ndarray | None = None  # (L,) 0/1 ints, optional

    def __post_init__(self):
        self.emb = np.asarray(self.emb, dtype=np.float64)
        if self.emb.ndim != 2:
            raise DataError("chain embeddings must be a 2-D matrix")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.emb.shape[0],):
                raise DataError("label array length must equal chain length")
            if self.labels.size and not np.isin(self.labels, (0, 1)).all():
                raise DataError("labels must be 0 or 1")

    @property
    def length(self) -> int:
        return self.emb.shape[0]

    @classmethod
    def absent(cls, width: int = 0) -> "ChainArrays":
        return cls(np.zeros((0, width)), np.zeros(0, dtype=np.int64))


@dataclass
class Batch:
    """Padded per-role tensors for a list of samples.

    Within a role all samples share one padded length; padding is trailing,
    carries zero embeddings, mask 0, and label 0 (ignored by the loss).
    """

    ids: list[str]
    emb: dict[ChainRole, torch.Tensor]  # (B, L_role, d_in) float
    mask: dict[ChainRole, torch.Tensor]  # (B, L_role) bool
    labels: dict[ChainRole, torch.Tensor]  # (B, L_role) int64

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def in_width(self) -> int:
        return next(iter(self.emb.values())).shape[-1]

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(
            ids=self.ids,
            emb={r: t.to(dtype) for r, t in self.emb.items()},
            mask=self.mask,
            labels=self.labels,
        )


def pad_batch(
    samples: list[dict[ChainRole, ChainArrays]],
    ids: list[str] | None = None,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    """Pad per-chain matrices to a common per-role length and stack them."""
    if not samples:
        raise DataError("cannot pad an empty record list")
    if ids is None:
        ids = [str(i) for i in range(len(samples))]

    widths = {
        arrays.emb.shape[1]
        for sample in samples
        for arrays in sample.values()
        if arrays.length > 0
    }
    if len(widths) > 1:
        raise DataError(f"embedding width mismatch across chains: {sorted(widths)}")
    width = widths.pop() if widths else 0

    emb: dict[ChainRole, torch.Tensor] = {}
    mask: dict[ChainRole, torch.Tensor] = {}
    labels: dict[ChainRole, torch.Tensor] = {}
    for role in ChainRole:
        chains = [sample.get(role, ChainArrays.absent(width)) for sample in samples]
        padded_len = max(c.length for c in chains)
        e = np.zeros((len(chains), padded_len, width), dtype=np.float64)
        m = np.zeros((len(chains), padded_len), dtype=bool)
        y = np.zeros((len(chains), padded_len), dtype=np.int64)
        for i, chain in enumerate(chains):
            n = chain.length
            if n == 0:
                continue
            e[i, :n, :] = chain.emb
            m[i, :n] = True
            if chain.labels is not None:
                y[i, :n] = chain.labels
        emb[role] = torch.from_numpy(e).to(dtype)
        mask[role] = torch.from_numpy(m)
        labels[role] = torch.from_numpy(y)
    return Batch(ids=list(ids), emb=emb, mask=mask, labels=labels)


def strip_padding(batch: Batch, index: int) -> dict[ChainRole, ChainArrays]:
    """Inverse of pad_batch for one sample: drop padded positions."""
    out: dict[ChainRole, ChainArrays] = {}
    for role in ChainRole:
        m = batch.mask[role][index].numpy()
        n = int(m.sum())
        out[role] = ChainArrays(
            batch.emb[role][index, :n].to(torch.float64).numpy(),
            batch.labels[role][index, :n].numpy(),
        )
    return out
