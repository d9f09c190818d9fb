"""Experiment configuration: a flat dataclass parsed from INI-style files.

The file format is line-oriented ``key = value`` under ``[section]``
headers (experiment / data / attack / defense / metrics); every key is
documented in the README.  The same dataclass is also built from the
service's request models.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, fields

from .errors import ConfigParseError

ATTACK_KINDS = ("none", "psmu", "psmuv", "psmu_pp", "popularity")
MODEL_KINDS = ("ncf", "vncf", "lightgcn", "lightvgcn")


@dataclass
class ExperimentConfig:
    # [experiment]
    model: str = "vncf"
    seed: int = 7
    global_epochs: int = 20
    learning_rate: float = 0.001
    local_epochs: int = 1
    client_fraction: float = 1.0
    server_optimizer: str = "hybrid"
    feature_dim: int = 64
    extractor_seed: int = 42

    # [data]
    source: str = "synth"            # synth | files
    num_users: int = 200
    num_items: int = 120
    density: float = 0.05
    popularity_exponent: float = 1.2
    image_size: int = 16
    negative_ratio: int = 4
    interactions_path: str = ""
    images_dir: str = ""

    # [attack]
    attack: str = "none"
    xi: float = 0.001
    epsilon: float = 4.0
    start_epoch: int = 8
    num_targets: int = 1
    pgd_steps: int = 10
    fit_steps: int = 20
    attack_opt_steps: int = 20
    top_p: int = 10

    # [defense]
    defense: bool = False
    diffusion_steps: int = 100
    guidance: float = 1000.0
    rho: float | None = None         # None -> calibrate from clean corpus
    calibration_images: int = 200
    denoiser_train_steps: int = 400
    denoiser_checkpoint: str = ""

    # [metrics]
    exposure_k: int = 5
    ndcg_k: int = 20

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ConfigParseError(f"unknown model {self.model!r}")
        if self.attack not in ATTACK_KINDS:
            raise ConfigParseError(f"unknown attack kind {self.attack!r}")
        if self.server_optimizer not in ("sgd", "adam", "hybrid"):
            raise ConfigParseError(f"unknown server optimizer {self.server_optimizer!r}")
        if self.source not in ("synth", "files"):
            raise ConfigParseError(f"unknown data source {self.source!r}")
        if self.start_epoch < 1:
            raise ConfigParseError("attack start_epoch must be >= 1")
        if self.epsilon < 0:
            raise ConfigParseError("epsilon must be >= 0")
        if not 0.0 <= self.xi <= 1.0:
            raise ConfigParseError("xi must lie in [0, 1]")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigParseError("client_fraction must lie in (0, 1]")
        if self.attack in ("psmuv", "psmu_pp", "popularity") and \
                self.model in ("ncf", "lightgcn"):
            raise ConfigParseError(
                f"image poisoning needs a visually-aware model, not {self.model!r}")
        if self.source == "files" and not self.interactions_path:
            raise ConfigParseError("source = files requires interactions_path")
        return self

    @property
    def visual(self):
        return self.model in ("vncf", "lightvgcn")


_SECTION_KEYS = {
    "experiment": ("model", "seed", "global_epochs", "learning_rate",
                   "local_epochs", "client_fraction", "feature_dim",
                   "extractor_seed", "server_optimizer"),
    "data": ("source", "num_users", "num_items", "density",
             "popularity_exponent", "image_size", "negative_ratio",
             "interactions_path", "images_dir"),
    "attack": ("kind", "xi", "epsilon", "start_epoch", "num_targets",
               "pgd_steps", "fit_steps", "attack_opt_steps", "top_p"),
    "defense": ("enabled", "diffusion_steps", "guidance", "rho",
                "calibration_images", "denoiser_train_steps",
                "denoiser_checkpoint"),
    "metrics": ("exposure_k", "ndcg_k"),
}

# config keys that map onto differently-named dataclass fields
_RENAMES = {("attack", "kind"): "attack", ("defense", "enabled"): "defense"}

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(field_name, raw):
    raw = raw.strip()
    kind = _FIELD_TYPES[field_name]
    if field_name == "rho":
        return None if raw.lower() in ("auto", "none", "") else float(raw)
    if kind == "bool":
        if raw.lower() in ("1", "true", "on", "yes"):
            return True
        if raw.lower() in ("0", "false", "off", "no"):
            return False
        raise ConfigParseError(f"{field_name}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text):
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        raise ConfigParseError(str(exc.message if hasattr(exc, "message") else exc),
                               line=line)
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTION_KEYS:
            raise ConfigParseError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SECTION_KEYS[section]:
                raise ConfigParseError(f"unknown key {key!r} in [{section}]")
            field_name = _RENAMES.get((section, key), key)
            try:
                setattr(cfg, field_name, _convert(field_name, raw))
            except ValueError:
                raise ConfigParseError(f"bad value for {section}.{key}: {raw!r}")
    return cfg.validate()


def load_config(path):
    if not os.path.exists(path):
        raise ConfigParseError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_from_mapping(mapping):
    """Build a config from a flat dict (the service request path)."""
    cfg = ExperimentConfig()
    for key, value in mapping.items():
        if key not in _FIELD_TYPES:
            raise ConfigParseError(f"unknown config field {key!r}")
        if value is not None or key == "rho":
            setattr(cfg, key, value)
    return cfg.validate()
