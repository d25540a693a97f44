"""Run configuration.

INI text with ``[encoder]``, ``[schedule]``, ``[scene]``, ``[train]`` and
``[bench]`` sections plus ``[run]`` for the seed and output directory.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .encoder import EncoderConfig
from .mqts import CompressionSchedule

SEED_ENV = "TOC3D_SEED"


@dataclass
class SceneConfig:
    views: int = 6
    height: int = 64
    width: int = 160
    patch: int = 16
    objects: int = 12
    frames: int = 200
    queries: int = 256
    noise: float = 0.5
    dt: float = 0.5
    v_max: float = 10.0


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    momentum: float = 0.9
    loss_weight: float = 5.0
    clip_norm: float = 35.0
    n_q: int = 64
    query_dim: int = 256
    pe_bands: int = 10


@dataclass
class BenchConfig:
    iterations: int = 30
    warmup: int = 10
    precision: str = "float32"
    height: int = 160
    width: int = 400


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig.desk)
    schedule: CompressionSchedule = field(default_factory=lambda: CompressionSchedule.preset("faster", 12))
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    output: str = "out"

    def validate(self) -> "RunConfig":
        from .mqts import plan_updates

        plan_updates(self.schedule, self.encoder.layers)
        s = self.scene
        if s.height % s.patch or s.width % s.patch:
            raise ValueError(f"patch {s.patch} must divide the scene image {s.height}x{s.width}")
        b = self.bench
        if b.height % s.patch or b.width % s.patch:
            raise ValueError(f"patch {s.patch} must divide the bench image {b.height}x{b.width}")
        if b.iterations < 10:
            raise ValueError("bench.iterations must be >= 10")
        if b.precision not in ("float32", "float64"):
            raise ValueError(f"bench.precision must be float32 or float64, got {b.precision!r}")
        if self.train.n_q > s.queries:
            raise ValueError("train.n_q cannot exceed scene.queries")
        if self.encoder.patch != s.patch:
            raise ValueError("encoder.patch and scene.patch disagree")
        return self


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return _ints(value)
    return value


def _update(obj, items: dict):
    known = {f.name for f in fields(obj)}
    changes = {}
    for k, v in items.items():
        if k not in known:
            raise ValueError(f"unknown key {k!r} for {type(obj).__name__}")
        changes[k] = _coerce(v, getattr(obj, k)) if isinstance(v, str) else v
    return replace(obj, **changes)


def apply_overrides(cfg: RunConfig, overrides: dict[str, dict]) -> RunConfig:
    """``{"encoder": {"layers": "24"}, "schedule": {"ratios": "0.5 0.4 0.3"}}`` style updates."""
    cfg = replace(cfg)
    for section, items in overrides.items():
        if not items:
            continue
        if section == "schedule":
            layers = items.get("update_layers", cfg.schedule.update_layers)
            ratios = items.get("ratios", cfg.schedule.ratios)
            if "preset" in items:
                preset = CompressionSchedule.preset(items["preset"], cfg.encoder.layers)
                layers, ratios = preset.update_layers, preset.ratios
            layers = _ints(layers) if isinstance(layers, str) else tuple(layers)
            ratios = _floats(ratios) if isinstance(ratios, str) else tuple(ratios)
            cfg.schedule = CompressionSchedule(layers, ratios)
        elif section == "run":
            cfg = _update(cfg, {k: v for k, v in items.items()})
        elif section in ("encoder", "scene", "train", "bench"):
            setattr(cfg, section, _update(getattr(cfg, section), items))
        else:
            raise ValueError(f"unknown config section [{section}]")
    return cfg


def load_config(path=None, overrides: dict[str, dict] | None = None, seed: int | None = None) -> RunConfig:
    """File, then ``TOC3D_SEED``, then explicit overrides and ``seed`` (highest precedence)."""
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(Path(path)):
            raise FileNotFoundError(f"config file {path} not found")
        file_over = {s: dict(parser[s]) for s in parser.sections()}
        cfg = apply_overrides(cfg, file_over)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        cfg.seed = int(env)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg.seed = int(seed)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` back to INI text accepted by ``load_config``."""
    def fmt(v):
        return " ".join(str(x) for x in v) if isinstance(v, tuple) else str(v)

    lines = ["[run]", f"seed = {cfg.seed}", f"output = {cfg.output}", ""]
    for name in ("encoder", "scene", "train", "bench"):
        lines.append(f"[{name}]")
        obj = getattr(cfg, name)
        lines += [f"{f.name} = {fmt(getattr(obj, f.name))}" for f in fields(obj)]
        lines.append("")
    lines += ["[schedule]", f"update_layers = {fmt(cfg.schedule.update_layers)}",
              f"ratios = {fmt(cfg.schedule.ratios)}", ""]
    return "\n".join(lines)
