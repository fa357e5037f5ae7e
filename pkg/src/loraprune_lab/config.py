"""Experiment configuration: flat ``key = value`` lines grouped by ``[section]``.

Recognised sections and keys (all optional, defaults shown by :func:`defaults`)::

    [lab]         seed
    [data]        kind n d classes seed task_seed shift noise spread hidden
    [downstream]  any [data] key; unspecified keys inherit from [data]
    [model]       arch hidden activation tokens d_model d_ff targets
    [lora]        rank mode
    [train]       epochs batch_size lr
    [prune]       criterion sparsity lambda epochs batch_size lr start_frac end_frac
                  interval ema_mode scope seq_variant finetune schedule base track_oracle
    [compare]     criteria sparsities seeds
    [oracle]      seeds models corrupt_gradient

Lists are comma separated. ``prune.interval = 0`` means one epoch.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .models import ModelSpec

_SCHEMA: dict[str, dict[str, type]] = {
    "lab": {"seed": int},
    "data": {"kind": str, "n": int, "d": int, "classes": int, "seed": int, "task_seed": int,
             "shift": float, "noise": float, "spread": float, "hidden": int},
    "model": {"arch": str, "hidden": list, "activation": str, "tokens": int, "d_model": int,
              "d_ff": int, "targets": str},
    "lora": {"rank": int, "mode": str},
    "train": {"epochs": int, "batch_size": int, "lr": float},
    "prune": {"criterion": str, "sparsity": float, "lambda": float, "epochs": int, "batch_size": int,
              "lr": float, "start_frac": float, "end_frac": float, "interval": int, "ema_mode": str,
              "scope": str, "seq_variant": str, "finetune": str, "schedule": str, "base": str,
              "track_oracle": bool},
    "compare": {"criteria": list, "sparsities": list, "seeds": list},
    "oracle": {"seeds": int, "models": list, "corrupt_gradient": bool},
}
_SCHEMA["downstream"] = _SCHEMA["data"]


@dataclass
class DataConfig:
    kind: str = "blobs"
    n: int = 600
    d: int = 16
    classes: int = 4
    seed: int = 0
    task_seed: int = 0
    shift: float = 0.0
    noise: float = 1.0
    spread: float = 1.5
    hidden: int = 16


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05


@dataclass
class PruneSection:
    criterion: str = "lora-grad"
    sparsity: float = 0.5
    lam: float = 0.9
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.05
    start_frac: float = 0.10
    end_frac: float = 0.70
    interval: int = 0
    ema_mode: str = "recursive"
    scope: str = "per-layer"
    seq_variant: str = "chain"
    finetune: str = "lora"
    schedule: str = "progressive"
    base: str = ""
    track_oracle: bool = False


@dataclass
class CompareSection:
    criteria: list = field(default_factory=lambda: ["lora-grad", "random"])
    sparsities: list = field(default_factory=lambda: [0.5])
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class OracleSection:
    seeds: int = 10
    models: list = field(default_factory=lambda: ["mlp", "transformer"])
    corrupt_gradient: bool = False


@dataclass
class LabConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    downstream: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneSection = field(default_factory=PruneSection)
    compare: CompareSection = field(default_factory=CompareSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    source: str = "<defaults>"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source")
        d["model"] = self.model.to_dict()
        return d

    def hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def with_seed(self, seed: int) -> "LabConfig":
        return replace(self, seed=seed, model=replace(self.model, seed=seed))


def defaults() -> LabConfig:
    return LabConfig()


def _line_index(text: str) -> dict[tuple[str, str], int]:
    where, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            section = m.group(1).strip()
        elif section and "=" in stripped and not stripped.startswith(("#", ";")):
            where[(section, stripped.split("=", 1)[0].strip())] = lineno
    return where


def _convert(raw: str, kind: type, item: str):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{raw!r} is not a boolean")
    if kind is list:
        return [p.strip() for p in raw.split(",") if p.strip()]
    return kind(raw)


def parse(text: str, source: str = "<string>") -> LabConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    lines = _line_index(text)
    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{source}: unknown section [{section}]")
        values[section] = {}
        for key, raw in cp.items(section):
            loc = f"{source}:{lines.get((section, key), '?')} [{section}] {key}"
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{loc}: unknown key")
            try:
                values[section][key] = _convert(raw, _SCHEMA[section][key], key)
            except ValueError as exc:
                raise ConfigError(f"{loc}: {exc}") from None
    try:
        return _build(values, source)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def _build(values: dict[str, dict], source: str) -> LabConfig:
    cfg = LabConfig(source=source)
    cfg.seed = values.get("lab", {}).get("seed", 0)
    cfg.data = DataConfig(**values.get("data", {}))
    cfg.downstream = replace(cfg.data, **values.get("downstream", {}))
    model = dict(values.get("model", {}))
    if "hidden" in model:
        model["hidden"] = tuple(int(h) for h in model["hidden"])
    model.update(values.get("lora", {}))
    cfg.model = ModelSpec(in_dim=cfg.data.d, classes=cfg.data.classes, seed=cfg.seed, **model)
    cfg.train = TrainConfig(**values.get("train", {}))
    prune = dict(values.get("prune", {}))
    if "lambda" in prune:
        prune["lam"] = prune.pop("lambda")
    cfg.prune = PruneSection(**prune)
    comp = dict(values.get("compare", {}))
    if "sparsities" in comp:
        comp["sparsities"] = [float(s) for s in comp["sparsities"]]
    if "seeds" in comp:
        comp["seeds"] = [int(s) for s in comp["seeds"]]
    cfg.compare = CompareSection(**comp)
    cfg.oracle = OracleSection(**values.get("oracle", {}))
    if cfg.data.classes != cfg.downstream.classes or cfg.data.d != cfg.downstream.d:
        raise ConfigError("[downstream] must keep the source task's d and classes")
    return cfg


def load(path) -> LabConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse(p.read_text(), source=str(p))
