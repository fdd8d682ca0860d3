"""Strict JSON run configuration: ``{"arch": {...}, "train": {...}, "data": {...}}``.

Every level rejects unknown keys so a misspelt hyperparameter fails loudly
instead of silently falling back to a default.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Mapping

from .arch import ArchitectureSpec
from .data import SplitSpec
from .errors import ConfigError
from .train import DataSpec, TrainConfig

SECTIONS = ("arch", "train", "data")


def _strict(cls, d, where: str):
    if not isinstance(d, Mapping):
        raise ConfigError(f"'{where}' must be a JSON object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{where}': {unknown}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"'{where}': {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    arch: ArchitectureSpec
    train: TrainConfig
    data: DataSpec

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(d, Mapping):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(d) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown top-level keys: {unknown}")
        missing = [s for s in SECTIONS if s not in d]
        if missing:
            raise ConfigError(f"missing sections: {missing}")
        arch = ArchitectureSpec.from_dict(d["arch"])
        train = _strict(TrainConfig, d["train"], "train")
        raw = dict(d["data"]) if isinstance(d["data"], Mapping) else d["data"]
        if isinstance(raw, dict):
            if "split" in raw:
                raw["split"] = _strict(SplitSpec, raw["split"], "data.split")
            raw.setdefault("task", None if raw.get("manifest") else "stripe")
            if raw.get("manifest") and base_dir is not None and not Path(raw["manifest"]).is_absolute():
                raw["manifest"] = str(base_dir / raw["manifest"])
        data = _strict(DataSpec, raw, "data")
        if data.task is not None and arch.in_channels != 1:
            raise ConfigError(f"synthetic tasks are single-channel; arch.in_channels is {arch.in_channels}")
        return cls(arch, train, data)

    def to_dict(self) -> dict:
        return {"arch": self.arch.to_dict(), "train": self.train.to_dict(), "data": self.data.to_dict()}

    def input_shape(self) -> tuple[int, int, int]:
        """``(C, H, W)`` of one network input."""
        if self.arch.input_size is not None:
            h, w = self.arch.input_size
        else:
            h, w = self.data.height, self.data.width
        return self.arch.in_channels, h, w


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return RunConfig.from_dict(raw, base_dir=path.parent)


def shipped_configs() -> list[str]:
    """Names of the default configs bundled with the package."""
    root = resources.files("sdnet") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def shipped_config_path(name: str) -> Path:
    p = Path(str(resources.files("sdnet") / "configs" / f"{name}.json"))
    if not p.exists():
        raise ConfigError(f"no shipped config {name!r}; available: {shipped_configs()}")
    return p
