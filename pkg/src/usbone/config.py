"""Single JSON run configuration covering every module's settings."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .bonemap import BoneMapConfig
from .phantom import Fracture, PhantomConfig
from .tga import TgaConfig
from .transporter.networks import NetworkSpec
from .transporter.training import TrainConfig

SECTIONS = {
    "tga": TgaConfig,
    "bonemap": BoneMapConfig,
    "network": NetworkSpec,
    "train": TrainConfig,
    "phantom": PhantomConfig,
}


class ConfigError(ValueError):
    pass


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {', '.join(unknown)}")
    values = dict(values)
    if cls is PhantomConfig and isinstance(values.get("fracture"), dict):
        fields = {f.name for f in dataclasses.fields(Fracture)}
        extra = sorted(set(values["fracture"]) - fields)
        if extra:
            raise ConfigError(f"unknown keys in 'phantom.fracture': {', '.join(extra)}")
        values["fracture"] = Fracture(**values["fracture"])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    tga: TgaConfig = field(default_factory=TgaConfig)
    bonemap: BoneMapConfig = field(default_factory=BoneMapConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown sections: {', '.join(unknown)}")
        return cls(**{name: _build(kind, doc.get(name, {}), name) for name, kind in SECTIONS.items()})

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_json(self) -> str:
        """Canonical form: sorted keys, two-space indent, trailing newline."""
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def override(self, section: str, **values) -> "RunConfig":
        current = dataclasses.asdict(getattr(self, section))
        current.update(values)
        return dataclasses.replace(self, **{section: _build(SECTIONS[section], current, section)})

    def resize_phantom(self, size: int) -> "RunConfig":
        """Change the phantom side; geometry left at its defaults is rescaled with it."""
        default = PhantomConfig()
        scaled = dataclasses.asdict(PhantomConfig.scaled(size)) if size >= 8 else {"size": size}
        current = dataclasses.asdict(self.phantom)
        values = {k: scaled[k] if k in scaled and current[k] == getattr(default, k) else current[k]
                  for k in current}
        values["size"] = size
        return dataclasses.replace(self, phantom=_build(PhantomConfig, values, "phantom"))

    def network_for_input(self) -> NetworkSpec:
        """Network spec whose input width matches the bone-map scale count."""
        return dataclasses.replace(self.network, in_channels=len(self.bonemap.scales) + 1)
