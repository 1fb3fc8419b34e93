"""Presets and TOML run configuration.

A config file may set ``preset`` and override any field::

    preset = "desk"
    [map]      # MapGenConfig fields, e.g. corridor_width = [24, 30]
    [sensor]   # range, ray_count, update_stride
    [env]      # node_count, k, max_steps
    [reward]   # a, b, finish, complete_at, frontier_term
    [net]      # d, heads, ffn, layers
    [sac]      # every SacConfig field
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace

import tomli

from .env import EnvConfig, preset as env_preset
from .neural import NetConfig
from .sac import SacConfig

PRESETS = ("desk", "full")
SECTIONS = ("map", "sensor", "env", "reward", "net", "sac")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    env: EnvConfig
    net: NetConfig = field(default_factory=NetConfig)
    sac: SacConfig = field(default_factory=SacConfig)
    preset: str = "desk"


def preset(name: str) -> RunConfig:
    if name == "full":
        return RunConfig(env_preset("full"), NetConfig(), SacConfig(), "full")
    if name == "desk":
        # reduced width and a faster optimiser so training fits a CPU budget
        net = NetConfig(d=64, heads=4, ffn=128, layers=6)
        sac = SacConfig(batch=32, lr=1e-4, alpha_lr=1e-4, updates_per_episode=2, instances=8, episodes=3000)
        return RunConfig(env_preset("desk"), net, sac, "desk")
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def _apply(obj, values: dict, where: str):
    names = {f.name for f in fields(obj)}
    bad = sorted(set(values) - names)
    if bad:
        raise ConfigError(f"[{where}] unknown key(s): {', '.join(bad)}")
    clean = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return replace(obj, **clean)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def build(data: dict, default_preset: str = "desk") -> RunConfig:
    data = dict(data)
    name = data.pop("preset", default_preset)
    run = preset(name)
    extra = sorted(set(data) - set(SECTIONS))
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(extra)}")
    env = run.env
    mcfg = _apply(env.map, data.get("map", {}), "map")
    scfg = _apply(env.sensor, data.get("sensor", {}), "sensor")
    rcfg = _apply(env.reward, data.get("reward", {}), "reward")
    env = _apply(EnvConfig(mcfg, scfg, env.node_count, env.k, env.max_steps, rcfg), data.get("env", {}), "env")
    net = _apply(run.net, data.get("net", {}), "net")
    sac = _apply(run.sac, data.get("sac", {}), "sac")
    return RunConfig(env, net, sac, name)


def load(path: str | None, default_preset: str = "desk") -> RunConfig:
    if path is None:
        return build({}, default_preset)
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except (OSError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return build(data, default_preset)


def to_dict(run: RunConfig) -> dict:
    return {"preset": run.preset, "env": run.env.to_dict(), "net": dataclasses.asdict(run.net),
            "sac": dataclasses.asdict(run.sac)}
