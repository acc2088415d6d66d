"""Flat key-value run configuration with strict validation.

Config files are a single flat JSON object carrying a schema_version key.
Unknown keys are errors, enumerations are validated at load, and the
serialized effective config equals the parsed input plus explicit defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, asdict

__all__ = ["RunConfig", "ConfigError", "load_config", "save_config", "config_hash",
           "LOSS_MODES", "CONFIG_SCHEMA"]

CONFIG_SCHEMA = "tierspace-config-v1"

LOSS_MODES = ("base", "CL", "RE", "H", "H+only", "H-only", "reverse-H")
PLACEMENTS = ("token", "pooled", "none")
ATTENTION_VARIANTS = ("learnable_kv", "learnable_query", "self")
INIT_MODES = ("identity", "uniform")
COSINE_MODES = ("distance", "similarity")


class ConfigError(ValueError):
    """Invalid configuration file or field."""


@dataclass
class RunConfig:
    schema_version: str = CONFIG_SCHEMA
    seed: int = 0
    out_dir: str = "runs/default"
    corpus_path: str = "data/corpus.jsonl"
    scenes_path: str = "data/scenes.jsonl"
    eval_corpus_path: str = "data/eval_corpus.jsonl"
    eval_scenes_path: str = "data/eval_scenes.jsonl"
    # model dims
    d_model: int = 32
    embed_dim: int = 16
    t_max: int = 12
    heads: int = 2
    n_slots: int = 8
    encoder_self_attention: bool = False
    # adapters (rank/scaling per the reference setting)
    adapter_rank: int = 16
    adapter_scale: float = 16.0
    # learning rates
    lr_module: float = 1e-4
    lr_adapter: float = 5e-6
    weight_decay: float = 0.0
    # batch composition
    images_per_batch: int = 16
    sentences_per_image: int = 6
    # loss weights and knobs
    w_class: float = 4.0
    w_bbox: float = 5.0
    w_giou: float = 2.0
    w_structure: float = 5.0
    margin: float = 0.2
    lam: float = 0.1
    epsilon: float = 1e-8
    temperature: float = 0.07
    cl_temperature: float = 0.07
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    # ablation axes
    loss_mode: str = "H"
    component_count: int = 3
    placement: str = "token"
    attention_variant: str = "learnable_kv"
    init_mode: str = "identity"
    cosine_mode: str = "distance"
    h_pos_neg_ratio: str = "2:1"
    re_pos_neg_ratio: str = "10:4"
    # schedule
    iterations: int = 200
    eval_cadence: int = 50
    # benchmark
    iou_threshold: float = 0.5
    noise_std: float = 0.05
    box_jitter: float = 0.03
    n_scenes: int = 500
    eval_n_scenes: int = 200
    n_objects_min: int = 3
    n_objects_max: int = 6
    min_words: int = 5

    def __post_init__(self):
        if self.schema_version != CONFIG_SCHEMA:
            raise ConfigError(f"schema_version must be {CONFIG_SCHEMA!r}")
        _require(self.loss_mode in LOSS_MODES, "loss_mode", self.loss_mode, LOSS_MODES)
        _require(self.placement in PLACEMENTS, "placement", self.placement, PLACEMENTS)
        _require(self.attention_variant in ATTENTION_VARIANTS, "attention_variant",
                 self.attention_variant, ATTENTION_VARIANTS)
        _require(self.init_mode in INIT_MODES, "init_mode", self.init_mode, INIT_MODES)
        _require(self.cosine_mode in COSINE_MODES, "cosine_mode",
                 self.cosine_mode, COSINE_MODES)
        if self.component_count not in (1, 2, 3):
            raise ConfigError(f"component_count must be 1, 2, or 3, got {self.component_count}")
        if self.sentences_per_image != 6:
            raise ConfigError("sentences_per_image: only 6 (three tiers x pos/neg) is supported")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        for ratio_key in ("h_pos_neg_ratio", "re_pos_neg_ratio"):
            parse_ratio(getattr(self, ratio_key))
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    @property
    def h_neg_weight(self):
        pos, neg = parse_ratio(self.h_pos_neg_ratio)
        return neg / pos

    @property
    def re_neg_weight(self):
        pos, neg = parse_ratio(self.re_pos_neg_ratio)
        return neg / pos

    @property
    def adapter_multiplier(self):
        return self.adapter_scale / self.adapter_rank

    def effective_dict(self):
        return asdict(self)


def _require(ok, key, value, allowed):
    if not ok:
        raise ConfigError(f"{key}: {value!r} not in {allowed}")


def parse_ratio(text):
    try:
        pos, neg = text.split(":")
        pos, neg = float(pos), float(neg)
    except (ValueError, AttributeError) as exc:
        raise ConfigError(f"ratio {text!r} must look like '2:1'") from exc
    if pos <= 0 or neg < 0:
        raise ConfigError(f"ratio {text!r} must have positive numerator")
    return pos, neg


def load_config(path=None, overrides=None):
    """Load a flat JSON config; unknown keys are errors, not warnings."""
    raw = {}
    if path is not None:
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
    raw.update(overrides or {})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def save_config(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg.effective_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg):
    payload = json.dumps(cfg.effective_dict(), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]
