"""Layered run configuration: defaults < config file < environment < flags.

One JSON file drives every command; unknown keys are rejected so typos
fail loudly. The resolved configuration is echoed into every output
directory for provenance. `SCENEMOE_OUT` sets the default output root.
`--literal-paper` switches off the desk-scale deviations: attention
scaling off, learning rate 2e-5.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

from .errors import ConfigError
from .synthgen import GeneratorConfig
from .trainer import TrainConfig

OUT_ROOT_ENV = "SCENEMOE_OUT"

LITERAL_PAPER_LR = 2e-5


@dataclass
class ModelSettings:
    internal_widths: tuple[int, int, int, int] = (32, 48, 24, 64)
    layers: int = 8
    heads: int = 2
    d_model: int = 64
    dict_size: int = 32
    scaled_attention: bool = True
    positional_encoding: bool = False
    iec_activation: str = "gelu"
    affine_combine: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    out_root: str = "runs"
    ablate_seeds: int = 5
    literal_paper: bool = False
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.ablate_seeds < 1:
            raise ConfigError(f"ablate_seeds must be >= 1, got {self.ablate_seeds}")
        self.generator.validate()
        self.train.validate()

    def to_jsonable(self) -> dict:
        raw = {
            "seed": self.seed,
            "out_root": self.out_root,
            "ablate_seeds": self.ablate_seeds,
            "literal_paper": self.literal_paper,
            "generator": asdict(self.generator),
            "model": asdict(self.model),
            "train": asdict(self.train),
        }
        raw["generator"]["channel_widths"] = list(self.generator.channel_widths)
        raw["model"]["internal_widths"] = list(self.model.internal_widths)
        return raw


def _apply_section(instance, raw: dict, where: str):
    known = {f.name: f for f in fields(instance)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r} (known: {sorted(known)})")
        current = getattr(instance, key)
        if isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        setattr(instance, key, value)
    return instance


def load_run_config(
    config_path: Path | None = None,
    env: Mapping[str, str] | None = None,
    overrides: dict | None = None,
) -> RunConfig:
    """Resolve a RunConfig. `overrides` holds already-parsed CLI values."""
    cfg = RunConfig()
    if config_path is not None:
        try:
            raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {config_path}: top level must be an object")
        sections = {"generator": cfg.generator, "model": cfg.model, "train": cfg.train}
        for key, value in raw.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ConfigError(f"{config_path}: section {key!r} must be an object")
                _apply_section(sections[key], value, f"{config_path}:{key}")
            elif key in ("seed", "out_root", "ablate_seeds", "literal_paper"):
                setattr(cfg, key, value)
            else:
                raise ConfigError(f"{config_path}: unknown key {key!r}")
        if "seed" in raw:
            cfg.generator.seed = raw["seed"] if "seed" not in raw.get("generator", {}) else cfg.generator.seed
            cfg.train.seed = raw["seed"] if "seed" not in raw.get("train", {}) else cfg.train.seed
    if env is None:
        env = {}
    if OUT_ROOT_ENV in env:
        cfg.out_root = env[OUT_ROOT_ENV]
    overrides = overrides or {}
    if overrides.get("seed") is not None:
        cfg.seed = overrides["seed"]
        cfg.generator.seed = overrides["seed"]
        cfg.train.seed = overrides["seed"]
    if overrides.get("mode") is not None:
        cfg.generator.mode = overrides["mode"]
    if overrides.get("ablation") is not None:
        cfg.train.ablation = overrides["ablation"]
    if overrides.get("out_root") is not None:
        cfg.out_root = overrides["out_root"]
    if overrides.get("literal_paper"):
        cfg.literal_paper = True
    if cfg.literal_paper:
        cfg.model.scaled_attention = False
        cfg.train.lr = LITERAL_PAPER_LR
    cfg.validate()
    return cfg
