"""Plain-text key=value experiment configuration.

One ``key = value`` pair per line; ``#`` starts a comment. ``gen.attribute``
and ``gen.ratio`` may repeat. The documented key list lives in the README;
unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field


class ConfigError(Exception):
    """Invalid configuration or command-line usage (exit code 1)."""


MULTI_KEYS = {"gen.attribute", "gen.ratio"}

KNOWN_KEYS = {
    "seed",
    "out.dir",
    "gen.n_nodes",
    "gen.avg_degree",
    "gen.degree_exponent",
    "gen.weight_file",
    "gen.seed",
    "data.edges",
    "data.attrs",
    "data.sensitive",
    "split.train_frac",
    "split.neg_ratio",
    "ratio.alpha",
    "ratio.enable",
    "train.regimes",
    "train.epochs",
    "train.lr",
    "train.weight_decay",
    "train.lambda",
    "train.reg_fraction",
    "train.pairs_per_group",
    "train.weight_negatives",
    "train.factorized",
    "train.d",
    "train.model",
    "train.reg_squared",
    "eval.k",
    "eval.list_size",
    "eval.probe_split",
    "eval.min_group_pairs",
    "sweep.lambdas",
    "sweep.workers",
} | MULTI_KEYS

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class ExperimentConfig:
    values: dict[str, str] = field(default_factory=dict)
    multi: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = line.split("=", 1)
            key, value = key.strip(), value.strip()
            if key not in KNOWN_KEYS:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            if key in MULTI_KEYS:
                cfg.multi.setdefault(key, []).append(value)
            elif key in cfg.values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            else:
                cfg.values[key] = value
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return cls.from_text(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None

    def get(self, key: str, default=None) -> str | None:
        return self.values.get(key, default)

    def get_int(self, key: str, default: int | None = None) -> int | None:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {raw!r}") from None

    def get_float(self, key: str, default: float | None = None) -> float | None:
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {raw!r}") from None

    def get_bool(self, key: str, default: bool) -> bool:
        raw = self.values.get(key)
        if raw is None:
            return default
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ConfigError(f"{key} must be a boolean, got {raw!r}")

    def get_list(self, key: str, default: str = "") -> list[str]:
        raw = self.values.get(key, default)
        return [item.strip() for item in raw.split(",") if item.strip()]

    def require(self, key: str) -> str:
        if key not in self.values:
            raise ConfigError(f"missing required config key {key!r}")
        return self.values[key]

    def canonical_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in sorted(self.values.items())]
        for key in sorted(self.multi):
            lines.extend(f"{key} = {v}" for v in self.multi[key])
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:16]

    @property
    def master_seed(self) -> int:
        return self.get_int("seed", 0)
