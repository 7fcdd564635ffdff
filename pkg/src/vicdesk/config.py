"""Run configuration, presets and the config hash embedded in every output."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .control import ControlConfig, VieConfig
from .errors import UsageError


@dataclass
class WorldConfig:
    T0: int = 20
    rate_coeff: float = 0.08
    expressive_sd: float = 0.5


@dataclass
class CorpusConfig:
    n_speakers: int = 50
    n_utts: int = 20
    holdout_frac: float = 0.1


@dataclass
class ProbeConfig:
    steps: int = 1500
    batch: int = 64
    lr: float = 3e-3


@dataclass
class EvalConfig:
    n_sentences: int = 5
    grl_probe_steps: int = 400


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    vie: VieConfig = field(default_factory=VieConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    variants: list[str] = field(default_factory=lambda: ["base", "sep", "rfg"])

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """sha256 over the canonical JSON form (first 16 hex digits)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else replace(self, seed=int(seed))


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise UsageError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for k, v in data.items():
        if k not in known:
            raise UsageError(f"{where}: unknown key {k!r}")
        default = getattr(cls(), k)
        if is_dataclass(default):
            kwargs[k] = _build(type(default), v, f"{where}.{k}")
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise UsageError(f"{where}: {e}") from None


def from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    preset = data.pop("preset", "desk")
    base = PRESETS.get(preset)
    if base is None:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = _merge(base().to_dict(), data)
    cfg = _build(RunConfig, merged, "config")
    bad = set(cfg.variants) - {"base", "sep", "rfg"}
    if bad:
        raise UsageError(f"unknown variants {sorted(bad)}")
    return cfg


def _merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as e:
        raise UsageError(f"{p}: cannot parse config: {e}") from None
    return from_dict(data)


def dump(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def desk() -> RunConfig:
    return RunConfig()


def full() -> RunConfig:
    """Full-scale dimensions (256/32) and optimiser settings; hours on a CPU."""
    return RunConfig(
        backbone=BackboneConfig(x_dim=256, enc_hidden=256, dec_hidden=256, steps=600_000,
                                batch=20, lr=2e-4),
        vie=VieConfig(batch=20, lr=2e-4),
        control=ControlConfig(proj_dim=32, noise_dim=32, dropout=0.9, steps=60_000,
                              batch=20, lr=2e-4),
    )


PRESETS = {"desk": desk, "full": full}
