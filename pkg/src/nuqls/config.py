"""Flat key-value experiment configuration with dotted section keys.

One file per experiment::

    kind = toy
    seed = 0
    net.hidden_widths = 50
    nuqls.members = 100

Values are strings until a typed accessor parses them; unknown keys are
rejected against the experiment's documented defaults so typos fail fast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["ConfigError", "ExperimentConfig", "parse_config_text"]

EXPERIMENT_KINDS = ("convergence", "toy", "regression_csv",
                    "classification_blobs", "intervals")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val
    return values


@dataclass
class ExperimentConfig:
    """Raw config values plus typed, default-aware accessors."""

    kind: str
    values: dict[str, str] = field(default_factory=dict)
    out_dir: str = "runs"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; "
                              f"expected one of {EXPERIMENT_KINDS}")

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values = parse_config_text(text)
        kind = values.pop("kind", None)
        if kind is None:
            raise ConfigError(f"{path}: missing 'kind' key")
        cfg = cls(kind=kind, values=values)
        cfg.seed = cfg.get_int("seed", cfg.seed)
        cfg.out_dir = cfg.get_str("out", cfg.out_dir)
        for key, val in (overrides or {}).items():
            if val is not None:
                setattr(cfg, key, val)
        return cfg

    def _raw(self, key: str, default):
        return self.values.get(key, default)

    def get_str(self, key: str, default: str) -> str:
        return str(self._raw(key, default))

    def get_int(self, key: str, default: int) -> int:
        raw = self._raw(key, default)
        try:
            return int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"key {key!r}: expected integer, got {raw!r}") from None

    def get_float(self, key: str, default: float) -> float:
        raw = self._raw(key, default)
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"key {key!r}: expected number, got {raw!r}") from None

    def get_bool(self, key: str, default: bool) -> bool:
        raw = self._raw(key, default)
        if isinstance(raw, bool):
            return raw
        if str(raw).lower() in ("true", "1", "yes"):
            return True
        if str(raw).lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected boolean, got {raw!r}")

    def get_int_list(self, key: str, default: tuple[int, ...]) -> tuple[int, ...]:
        raw = self._raw(key, default)
        if not isinstance(raw, str):
            return tuple(raw)
        try:
            return tuple(int(v.strip()) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"key {key!r}: expected comma-separated integers, "
                              f"got {raw!r}") from None

    def echo(self) -> dict[str, str]:
        """Experiment-defining configuration (output location excluded)."""
        out = {"kind": self.kind, "seed": str(self.seed)}
        out.update({k: str(v) for k, v in sorted(self.values.items())})
        return out
