"""Flat INI run configuration: one section per stage, strict key checking.

Precedence when assembling a run: command-line flag > BADDIV_DATA_ROOT
environment variable (data dir only) > config file > built-in default.  Every
command writes the fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import configparser
import io
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "ALLOWED_KEYS", "DEFAULTS"]


class ConfigError(ValueError):
    pass


ALLOWED_KEYS = {
    "data": {"mnist_dir"},
    "vae": {"lr", "batch_size", "max_epochs", "warmup_steps", "seed",
            "patience", "min_rel_improvement"},
    "classifier": {"lr", "batch_size", "max_epochs", "augment", "seed",
                   "patience", "min_rel_improvement"},
    "bad": {"couple", "alpha", "beta", "classifier_kind", "lr", "batch_size",
            "epochs", "batches_per_epoch", "checkpoint_every",
            "vae_checkpoint", "classifier_checkpoint", "seed",
            "kernel_bandwidth"},
    "eval": {"temperatures", "n_samples", "seed", "prd_clusters",
             "vae_checkpoint", "bad_checkpoint", "classifier_checkpoint"},
}

DEFAULTS = {
    "data": {"mnist_dir": "data/mnist"},
    "vae": {"lr": "1e-4", "batch_size": "256", "max_epochs": "200",
            "warmup_steps": "10000", "seed": "0", "patience": "5",
            "min_rel_improvement": "0.001"},
    "classifier": {"lr": "1e-3", "batch_size": "128", "max_epochs": "100",
                   "augment": "true", "seed": "0", "patience": "5",
                   "min_rel_improvement": "0.001"},
    "bad": {"couple": "mmd", "alpha": "", "beta": "",
            "classifier_kind": "custom", "lr": "5e-6", "batch_size": "2048",
            "epochs": "180", "batches_per_epoch": "40",
            "checkpoint_every": "10", "vae_checkpoint": "",
            "classifier_checkpoint": "", "seed": "0",
            "kernel_bandwidth": "median"},
    "eval": {"temperatures": "0.1,0.5,0.7,1.0,1.2,1.5,1.8,2.0,3.0",
             "n_samples": "2048", "seed": "0", "prd_clusters": "20",
             "vae_checkpoint": "", "bad_checkpoint": "",
             "classifier_checkpoint": ""},
}


class RunConfig:
    """Section -> key -> string value, validated against ALLOWED_KEYS."""

    def __init__(self, values: dict[str, dict[str, str]] | None = None):
        self.values = {s: dict(kv) for s, kv in DEFAULTS.items()}
        for section, kv in (values or {}).items():
            for key, val in kv.items():
                self.set(section, key, val)

    @classmethod
    def load(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        cfg = cls()
        for section in parser.sections():
            if section not in ALLOWED_KEYS:
                raise ConfigError(f"unknown config section [{section}] "
                                  f"(allowed: {sorted(ALLOWED_KEYS)})")
            for key, val in parser.items(section):
                cfg.set(section, key, val)
        return cfg

    def set(self, section: str, key: str, value) -> None:
        if section not in ALLOWED_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in ALLOWED_KEYS[section]:
            raise ConfigError(
                f"unknown config key '{key}' in section [{section}] "
                f"(allowed: {sorted(ALLOWED_KEYS[section])})")
        self.values[section][key] = str(value)

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def get_float(self, section: str, key: str) -> float:
        return float(self.get(section, key))

    def get_int(self, section: str, key: str) -> int:
        return int(self.get(section, key))

    def get_bool(self, section: str, key: str) -> bool:
        val = self.get(section, key).strip().lower()
        if val in ("true", "1", "yes", "on"):
            return True
        if val in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"bad boolean for [{section}] {key}: {val!r}")

    def get_floats(self, section: str, key: str) -> list[float]:
        raw = self.get(section, key)
        return [float(tok) for tok in raw.split(",") if tok.strip()]

    def resolved_ini(self) -> str:
        out = io.StringIO()
        for section in sorted(self.values):
            out.write(f"[{section}]\n")
            for key in sorted(self.values[section]):
                out.write(f"{key} = {self.values[section][key]}\n")
            out.write("\n")
        return out.getvalue()

    def write_resolved(self, out_dir) -> Path:
        path = Path(out_dir) / "resolved.ini"
        path.write_text(self.resolved_ini())
        return path
