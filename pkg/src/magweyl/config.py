"""Run configuration files (TOML).

A file holds top-level ``subcommand``, ``family``, ``seed`` and ``verbosity``
keys plus the tables ``[family_params]``, ``[params]`` (mu, h, tau),
``[options]`` (subcommand settings; for ``sweep`` the sweep specification)
and ``[output]``. TOML has no null, so ``None`` values are dropped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import tomli
import tomli_w

SUBCOMMANDS = ("classify", "weyl", "spectrum", "dynamics", "sweep")


class ConfigError(ValueError):
    pass


def _strip_none(obj):
    if isinstance(obj, dict):
        return {k: _strip_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_strip_none(v) for v in obj]
    return obj


@dataclass
class RunConfig:
    subcommand: str
    family: str = "constant"
    family_params: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)
    verbosity: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}; choose from {SUBCOMMANDS}")
        for name in ("family_params", "params", "options", "output"):
            setattr(self, name, _strip_none(dict(getattr(self, name))))

    def to_dict(self) -> dict:
        return _strip_none(asdict(self))

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data) -> "RunConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        if "subcommand" not in data:
            raise ConfigError("configuration needs a 'subcommand' key")
        return cls(**data)

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_toml(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.to_toml())
