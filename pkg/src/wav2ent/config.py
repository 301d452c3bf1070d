"""Pipeline configuration: one JSON document for every stage.

Sections mirror the stage that consumes them. Loading merges a user
document over the defaults and rejects any key the defaults do not have.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .acoustic import EncoderConfig
from .errors import ConfigError
from .ner.model import NerConfig

# 160x downsampling: 10 ms latent frames, short enough for CPU fine-tuning
PIPELINE_CONV_SPEC = [[64, 10, 5], [64, 8, 4], [64, 4, 2], [64, 4, 2], [64, 4, 2]]

DEFAULTS = {
    "seed": 0,
    "corpus": {"n": 200, "sigma": 0.01, "sample_rate": 16000},
    "encoder": {**EncoderConfig().to_dict(), "conv_spec": PIPELINE_CONV_SPEC, "diversity_weight": 1.0},
    "pretrain": {"steps": 200, "batch_size": 32, "lr": 2e-3, "max_samples": 16000, "log_every": 20},
    "finetune": {"steps": 1500, "batch_size": 4, "lr": 1e-3, "log_every": 50},
    "ner": NerConfig().to_dict(),
    "ner_pretrain": {"steps": 200, "batch_size": 16, "lr": 1e-3, "log_every": 20},
    "ner_train": {"steps": 200, "batch_size": 16, "lr": 1e-3, "unk_rate": 0.0, "log_every": 20},
    "decode": {"beam": 1},
    "paths": {"corpus_dir": "corpus", "acoustic_checkpoint": "acoustic.w2ec",
              "asr_checkpoint": "asr.w2ec", "ner_checkpoint": "ner.w2ec"},
}


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key!r} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


class PipelineConfig:
    def __init__(self, overrides: dict | None = None):
        self.data = _merge(DEFAULTS, overrides or {}, "")
        try:
            self.encoder = EncoderConfig(**self.data["encoder"])
            self.ner = NerConfig(**self.data["ner"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model geometry: {exc}") from exc

    def __getitem__(self, section: str):
        return self.data[section]

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        return cls(doc)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)


def dump_defaults() -> str:
    return PipelineConfig().to_json()
