"""Experiment config files: UTF-8 ``key = value`` lines.

Model keys: num_experts, num_prompts, prompted_layers (comma list) or
num_prompt_layers (first m blocks), dispatcher (plain|moe), moe_experts,
mode (pmoe|vpt_deep|vpt_shallow|epts_no_dispatch), num_classes.

Backbone keys: image_h, image_w, patch_size, channels, embed_dim, num_layers,
num_heads, mlp_ratio, eps (layernorm).

Training keys: learning_rate, weight_decay, batch_size, epochs, max_steps,
seed, beta1, beta2, adam_eps.

Experiment keys: expert_seeds (comma list, one per expert), data (task
archive path), train_images / train_labels / test_images / test_labels (IDX
paths), data_kind (plain|complementary), data_seed, samples_per_class,
test_per_class, data_signal, data_noise.

The environment variable ``PMOE_SEED`` overrides ``seed``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

from ..archive import parse_kv
from ..backbone import BackboneConfig
from ..model import ModelConfig
from .train import TrainConfig

MODEL_KEYS = {"num_experts", "num_prompts", "prompted_layers", "num_prompt_layers", "dispatcher", "moe_experts", "mode", "num_classes"}
BACKBONE_KEYS = set(BackboneConfig().to_dict())
TRAIN_KEYS = {"learning_rate", "weight_decay", "batch_size", "epochs", "max_steps", "seed", "beta1", "beta2", "adam_eps"}
EXPERIMENT_KEYS = {
    "expert_seeds",
    "data",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "data_kind",
    "data_seed",
    "samples_per_class",
    "test_per_class",
    "data_signal",
    "data_noise",
}
ALL_KEYS = MODEL_KEYS | BACKBONE_KEYS | TRAIN_KEYS | EXPERIMENT_KEYS


class ConfigError(ValueError):
    pass


@dataclass
class Experiment:
    model: ModelConfig
    train: TrainConfig
    expert_seeds: list[int]
    extra: dict[str, str] = field(default_factory=dict)


def parse_experiment(text: str, environ=None) -> Experiment:
    environ = os.environ if environ is None else environ
    try:
        values = parse_kv(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for key in values:
        if key not in ALL_KEYS:
            raise ConfigError(f"unknown config key: {key}")
    if "PMOE_SEED" in environ:
        values["seed"] = environ["PMOE_SEED"]
    try:
        model = ModelConfig.from_dict({k: v for k, v in values.items() if k in MODEL_KEYS | BACKBONE_KEYS})
        tkw = {}
        for k in TRAIN_KEYS & set(values):
            v = values[k]
            name = "eps" if k == "adam_eps" else k
            tkw[name] = int(v) if name in ("batch_size", "epochs", "max_steps", "seed") else float(v)
        train = TrainConfig(**tkw)
        if "expert_seeds" in values:
            seeds = [int(s) for s in values["expert_seeds"].split(",") if s.strip()]
        else:
            seeds = [train.seed * 1000 + k + 1 for k in range(model.num_experts)]
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    if len(seeds) != model.num_experts:
        raise ConfigError(f"expert_seeds lists {len(seeds)} seeds for {model.num_experts} experts")
    extra = {k: v for k, v in values.items() if k in EXPERIMENT_KEYS - {"expert_seeds"}}
    return Experiment(model, train, seeds, extra)


def load_experiment(path: str | os.PathLike, environ=None) -> Experiment:
    with open(path, encoding="utf-8") as fh:
        return parse_experiment(fh.read(), environ)
