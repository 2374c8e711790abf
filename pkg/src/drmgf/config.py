"""Run configuration and its flat ``section.key = value`` file format."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .numcore import ContractError

METHODS = ("dr-mgf", "meta-gf-only", "dr-avgf", "sgd-joint", "pcgrad")


@dataclass
class DatasetSpec:
    kind: str = "synthetic-clusters"       # toy2d | synthetic-clusters | csv
    size: int = 1024
    dim: int = 16
    classes: int = 8
    tasks: int = 4
    mode: str = "multi-exit"               # multi-exit | multi-task
    noise: float = 3.0
    separation: float = 1.0
    path: str = ""
    label_columns: int = 1
    splits: tuple[float, ...] = (0.8, 0.2)

    def validate(self):
        if self.kind not in ("toy2d", "synthetic-clusters", "csv"):
            raise ContractError(f"unknown dataset kind {self.kind!r}")
        if abs(sum(self.splits) - 1.0) > 1e-9 or any(f <= 0 for f in self.splits):
            raise ContractError(f"splits must be positive and sum to 1, got {self.splits}")
        if self.kind != "toy2d" and (self.size < 1 or self.dim < 1 or self.classes < 2 or self.tasks < 1):
            raise ContractError("invalid dataset dimensions")
        if self.kind == "csv" and not self.path:
            raise ContractError("csv dataset needs a path")


@dataclass
class ModelSpec:
    width: int = 64
    depth: int = 4
    filter_size: int = 1


@dataclass
class RunConfig:
    method: str = "dr-mgf"
    seed: int = 0
    max_iter: int = 20
    batch_size: int = 64
    lr: float = 0.03                       # no normalization layers: 0.1 diverges under joint SGD
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_nu: float = 0.1
    momentum_nu: float = 0.9
    weight_decay_nu: float = 1e-5
    lam: float = 1e-4
    alpha: float = 1.0
    beta: float = 0.4
    eps: float = 1e-4
    n_meta: int = 1
    meta_lr: float = 0.0                   # 0 -> current importance learning rate
    meta_halvings: int = 5
    carry_momentum: bool = True            # task momentum survives across epochs
    milestones: tuple[float, ...] = (0.5, 0.75)
    lr_factor: float = 10.0
    nu_init: str = "kaiming-abs"
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    out_dir: str = ""
    checkpoint_every: int = 0
    probe_conflict: bool = False
    probe_batch: int = 0                   # 0 -> the whole training split

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("lr", "lr_nu", "eps", "lr_factor"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive")
        for name in ("momentum", "momentum_nu", "weight_decay", "weight_decay_nu", "lam", "meta_lr"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")
        if self.alpha != 1.0:
            raise ContractError("alpha is fixed at 1")
        if not 0.0 <= self.beta <= 0.5:
            raise ContractError("beta must lie in [0, 0.5]")
        ms = list(self.milestones)
        if any(not 0 < m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ContractError(f"milestones must be strictly increasing in (0, 1): {ms}")
        if self.max_iter < 0 or self.batch_size < 1 or self.n_meta < 0:
            raise ContractError("max_iter, batch_size and n_meta must be nonnegative (batch >= 1)")
        self.data.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Content hash of everything except the output location."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model = ModelSpec(**d.pop("model", {}))
        data = d.pop("data", {})
        if "splits" in data:
            data["splits"] = tuple(data["splits"])
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        return cls(model=model, data=DatasetSpec(**data), **d)


def lr_at(base: float, epoch: int, max_iter: int, milestones=(0.5, 0.75), factor: float = 10.0) -> float:
    """Multi-step schedule: divide by ``factor`` after each milestone fraction."""
    drops = sum(1 for m in milestones if epoch >= m * max_iter)
    return base / factor**drops


# ---------------------------------------------------------------------------
# flat key/value files
# ---------------------------------------------------------------------------

def _coerce(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ContractError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        return tuple(float(x) for x in raw.replace(",", " ").split())
    return raw


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Set dotted keys (``lr``, ``model.width``, ``data.kind`` ...) from strings."""
    for key, raw in pairs.items():
        target, attr = cfg, key
        if "." in key:
            section, attr = key.split(".", 1)
            if section not in ("model", "data"):
                raise ContractError(f"unknown config section {section!r}")
            target = getattr(cfg, section)
        if not hasattr(target, attr) or attr.startswith("_"):
            raise ContractError(f"unknown config key {key!r}")
        try:
            setattr(target, attr, _coerce(raw, getattr(target, attr)))
        except ValueError as exc:
            raise ContractError(f"bad value for {key}: {raw!r}") from exc
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    pairs = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ContractError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        k = k.strip()
        pairs[f"{section}.{k}" if section else k] = v.strip()
    return pairs


def format_config(cfg: RunConfig) -> str:
    lines = []
    top = cfg.to_dict()
    nested = {s: top.pop(s) for s in ("model", "data")}
    for k, v in top.items():
        lines.append(f"{k} = {_fmt(v)}")
    for s, d in nested.items():
        lines.append(f"[{s}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in d.items())
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return " ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Defaults, then the file, then explicit overrides."""
    cfg = RunConfig()
    if path:
        apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()
