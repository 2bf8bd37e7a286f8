"""Run configuration: defaults, config-file parsing, override precedence.

The config file is a flat sectioned key = value format (a TOML subset):

    [model]
    layers = 4
    hidden_dim = 128

Precedence, lowest to highest: built-in defaults < config file < UMAMI_SEED
environment variable (seed fields only) < explicit CLI overrides. The
effective merged config is echoed verbatim into every run directory.
"""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossConfig
from .model import ModelConfig
from .sampler import SamplerConfig
from .trainer import TrainConfig

SEED_ENV_VAR = "UMAMI_SEED"


class ConfigFileError(ValueError):
    pass


@dataclass
class DataConfig:
    scenes: int = 200
    views_per_scene: int = 12
    width: int = 64
    height: int = 64


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def sections(self) -> dict[str, object]:
        return {"model": self.model, "train": self.train, "loss": self.loss,
                "sampler": self.sampler, "data": self.data}

    def to_dict(self) -> dict:
        return {name: dict(vars(cfg)) for name, cfg in self.sections().items()}

    def set_seed(self, seed: int) -> None:
        self.train.seed = int(seed)
        self.sampler.seed = int(seed)


def desk_defaults() -> RunConfig:
    """64x64 / patch-8 configuration sized for single-machine runs."""
    cfg = RunConfig()
    cfg.model = ModelConfig(layers=4, hidden_dim=128, head_dim=32, head_width=256,
                            max_patches=64)
    cfg.train = TrainConfig()
    return cfg


def _parse_value(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if re.fullmatch(r"[+-]?\d+", text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        return text.strip('"')


def parse_config_text(text: str) -> dict[str, dict]:
    out: dict[str, dict] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"\[([A-Za-z_][\w-]*)\]", line)
        if m:
            section = m.group(1)
            out.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected key = value, got {raw!r}")
        if section is None:
            raise ConfigFileError(f"line {lineno}: key outside any [section]")
        key, value = line.split("=", 1)
        out[section][key.strip()] = _parse_value(value)
    return out


def _coerce(cfg_obj, key: str, value):
    types = {f.name: f.type for f in dataclasses.fields(cfg_obj)}
    if key not in types:
        raise ConfigFileError(
            f"unknown key {key!r} for section [{type(cfg_obj).__name__}]"
        )
    current = getattr(cfg_obj, key)
    if isinstance(current, bool):
        if isinstance(value, str):
            value = value.lower() == "true"
        return bool(value)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def apply_overrides(cfg: RunConfig, overrides: dict[str, dict]) -> RunConfig:
    sections = cfg.sections()
    for section, kv in overrides.items():
        if section not in sections:
            raise ConfigFileError(f"unknown config section [{section}]")
        target = sections[section]
        updates = {k: _coerce(target, k, v) for k, v in kv.items()}
        new = dataclasses.replace(target, **updates)
        setattr(cfg, section, new)
    return cfg


def parse_dotted_overrides(pairs: list[str]) -> dict[str, dict]:
    """--set model.layers=4 style overrides -> nested dict."""
    out: dict[str, dict] = {}
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigFileError(f"override must look like section.key=value, got {pair!r}")
        dotted, value = pair.split("=", 1)
        section, key = dotted.split(".", 1)
        out.setdefault(section.strip(), {})[key.strip()] = _parse_value(value)
    return out


def load_run_config(
    config_path: Path | None,
    cli_overrides: dict[str, dict] | None = None,
    base: RunConfig | None = None,
    env: dict | None = None,
) -> RunConfig:
    cfg = base if base is not None else desk_defaults()
    if config_path is not None:
        cfg = apply_overrides(cfg, parse_config_text(Path(config_path).read_text()))
    env = os.environ if env is None else env
    if SEED_ENV_VAR in env:
        cfg.set_seed(int(env[SEED_ENV_VAR]))
    if cli_overrides:
        cfg = apply_overrides(cfg, cli_overrides)
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = []
    for name, obj in cfg.sections().items():
        lines.append(f"[{name}]")
        for key, value in vars(obj).items():
            if isinstance(value, bool):
                lines.append(f"{key} = {'true' if value else 'false'}")
            elif isinstance(value, float):
                lines.append(f"{key} = {value!r}")
            else:
                lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def write_effective_config(out_dir: Path, cfg: RunConfig) -> Path:
    path = Path(out_dir) / "effective_config.toml"
    path.write_text(format_config(cfg))
    return path
