"""Run configuration: TOML file < CLI flags, with unknown keys rejected."""
from __future__ import annotations

import json
import os
import subprocess
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import tomli

from . import __version__
from .backbone import ModelConfig
from .flow import TrainConfig
from .toybench import GridConfig


class ConfigError(ValueError):
    pass


@dataclass
class SamplerSettings:
    num_steps: int = 64
    mu: float = 0.0
    sigma: float = 1.0
    alpha: Optional[float] = None
    guidance_scale: float = 2.0
    seed: int = 0


@dataclass
class DataSettings:
    path: Optional[str] = None
    n: int = 4096
    seed: int = 0
    patch: int = 4
    image_format: str = "raw"
    tasks: dict = field(default_factory=lambda: {"recolor": 1.0})
    grid: dict = field(default_factory=lambda: asdict(GridConfig()))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    data: DataSettings = field(default_factory=DataSettings)
    out_dir: Optional[str] = None
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "sampler": asdict(self.sampler),
            "data": asdict(self.data),
            "out_dir": self.out_dir,
            "seed": self.seed,
        }


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "sampler": SamplerSettings, "data": DataSettings}


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{where}] settings: {exc}") from exc


def load_run_config(path: Optional[str] = None, overrides: Optional[dict[str, dict[str, Any]]] = None) -> RunConfig:
    """Defaults, then the TOML file at ``path``, then ``overrides`` (flags), per section."""
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            raw = tomli.loads(Path(path).read_text())
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    top_known = set(_SECTIONS) | {"out_dir", "seed"}
    unknown = sorted(set(raw) - top_known)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {', '.join(unknown)}")
    overrides = overrides or {}
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        values = dict(raw.get(name, {}))
        values.update({k: v for k, v in overrides.get(name, {}).items() if v is not None})
        kwargs[name] = _build(cls, values, name)
    top = overrides.get("", {})
    seed = top.get("seed") if top.get("seed") is not None else raw.get("seed", 0)
    out_dir = top.get("out_dir") if top.get("out_dir") is not None else raw.get("out_dir")
    return RunConfig(out_dir=out_dir, seed=int(seed), **kwargs)


def build_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_run_metadata(out_dir, resolved: dict, seed: int, extra: Optional[dict] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"version": build_version(), "seed": seed, "config": resolved, **(extra or {})}
    path = out / "run.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


THREADS_ENV = "ICFLOW_NUM_THREADS"


def configure_torch(deterministic: bool = False):
    import torch

    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    elif os.environ.get(THREADS_ENV):
        torch.set_num_threads(int(os.environ[THREADS_ENV]))
