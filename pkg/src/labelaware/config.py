"""Experiment configuration files: INI-style sections with a strict schema.

Every run is fully determined by its config file. Unknown sections or
keys are rejected by name, missing required keys are reported by name,
and the resolved config (all defaults materialized) is copied next to
every output so results can be reproduced from the output directory
alone.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .encoder import EncoderConfig
from .langsim import CorpusConfig
from .trainer import FinetuneConfig, TrainConfig


class ConfigError(ValueError):
    pass


_REQUIRED = object()


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_list(item_type):
    def parse(s: str):
        s = s.strip()
        if not s:
            return []
        return [item_type(part.strip()) for part in s.split(",")]
    return parse


# section -> key -> (parser, default or _REQUIRED)
SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "corpus": {
        "master_seed": (int, _REQUIRED),
        "num_languages": (int, 12),
        "num_pretrain_languages": (int, 8),
        "num_features": (int, 20),
        "num_states": (int, 5),
        "emission_std": (float, 1.0),
        "mean_scale": (float, 0.2),
        "min_frames": (int, 80),
        "max_frames": (int, 120),
        "pretrain_per_language": (int, 200),
        "finetune_per_language": (int, 50),
        "dev_per_language": (int, 15),
        "test_per_language": (int, 35),
        "labeled_fraction": (float, 1.0),
    },
    "encoder": {
        "context": (int, 2),
        "hidden_dim": (int, 64),
        "embed_dim": (int, 32),
        "codebook_size": (int, 64),
        "code_dim": (int, 16),
        "activation": (str, "tanh"),
    },
    "pretrain": {
        "seed": (int, 0),
        "total_steps": (int, 3000),
        "ssl_only_steps": (int, 2000),
        "warmup_steps": (int, 300),
        "peak_lr": (float, 3e-3),
        "lambda": (float, 16.0),
        "supervised_loss": (str, "hard"),
        "ssl_loss": (str, "mlm"),
        "checkpoint_every": (int, 0),
        "margin": (float, 0.2),
        "distractors": (int, 5),
        "temperature": (float, 0.1),
        "mask_rate": (float, 0.15),
        "span_length": (int, 3),
        "batch_languages": (int, 8),
        "batch_per_language": (int, 4),
        "ge2e_variant": (str, "literal"),
        "clip_norm": (float, 5.0),
        "quantizer_seed": (int, 777),
        "supervised_pass": (str, "clean"),
    },
    "finetune": {
        "steps": (int, 1000),
        "mode": (str, "full"),
        "batch_size": (int, 64),
        "peak_lr": (float, 3e-4),
        "warmup_steps": (int, 100),
        "seed": (int, 0),
        "clip_norm": (float, 5.0),
    },
    "corruption": {
        "mode": (str, "none"),       # none | missing | noisy
        "fraction": (float, 0.0),
        "seed": (int, 0),
    },
    "sweep": {
        "seeds": (_parse_list(int), [0, 1, 2]),
        "lambda_values": (_parse_list(float), [0.0, 2.0, 4.0, 8.0, 16.0, 32.0]),
        "noise_modes": (_parse_list(str), ["missing", "noisy"]),
        "noise_fractions": (_parse_list(float), [0.0, 0.25, 0.5, 0.75]),
        "loss_variants": (
            _parse_list(str),
            ["ssl_only", "hard_only", "ssl+semi_hard", "ssl+ge2e", "ssl+hard"],
        ),
    },
}


@dataclass
class ExperimentConfig:
    """Parsed, fully-resolved experiment configuration."""

    values: dict[str, dict[str, Any]]
    source: str = ""

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def corpus_config(self) -> CorpusConfig:
        c = self.values["corpus"]
        return CorpusConfig(**{k: v for k, v in c.items() if k != "master_seed"})

    def master_seed(self) -> int:
        return self.values["corpus"]["master_seed"]

    def encoder_config(self) -> EncoderConfig:
        e = self.values["encoder"]
        c = self.values["corpus"]
        return EncoderConfig(
            num_features=c["num_features"],
            num_classes=c["num_languages"],
            context=e["context"],
            hidden_dim=e["hidden_dim"],
            embed_dim=e["embed_dim"],
            codebook_size=e["codebook_size"],
            code_dim=e["code_dim"],
            activation=e["activation"],
        )

    def train_config(self, **overrides) -> TrainConfig:
        p = dict(self.values["pretrain"])
        p["label_weight"] = p.pop("lambda")
        p.update(overrides)
        return TrainConfig(**p)

    def finetune_config(self, **overrides) -> FinetuneConfig:
        f = dict(self.values["finetune"])
        f.update(overrides)
        return FinetuneConfig(**f)


def parse_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate; unknown or missing keys are named in the error."""
    parser = configparser.ConfigParser(interpolation=None)
    text = Path(path).read_text()
    parser.read_string(text, source=str(path))
    values: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(
                f"unknown section [{section}] (known: {sorted(SCHEMA)})"
            )
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}] "
                    f"(known: {sorted(SCHEMA[section])})"
                )
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (kind, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    values[section][key] = kind(raw)
                except ValueError as e:
                    raise ConfigError(f"bad value for {key!r} in [{section}]: {e}")
            elif default is _REQUIRED:
                raise ConfigError(f"missing required field {key!r} in [{section}]")
            else:
                values[section][key] = default
    mode = values["corruption"]["mode"]
    if mode not in ("none", "missing", "noisy"):
        raise ConfigError(f"corruption mode must be none/missing/noisy, got {mode!r}")
    return ExperimentConfig(values=values, source=str(path))


def format_config(cfg: ExperimentConfig) -> str:
    """Resolved config as INI text (deterministic ordering)."""
    lines = []
    for section in SCHEMA:
        lines.append(f"[{section}]")
        for key in SCHEMA[section]:
            v = cfg.values[section][key]
            if isinstance(v, list):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)


def write_resolved(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved_config.ini"
    path.write_text(format_config(cfg))
    return path
