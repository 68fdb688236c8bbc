"""Finite-difference check of the full model's loss gradient."""
from __future__ import annotations

import numpy as np

from ..model import ModelConfig, PMoEModel, build_model, forward, trainable_parameters
from ..numerics import GradCheckReport, Rng, cross_entropy, grad_check
from .data import expert_from_seed

TOY = ModelConfig()  # K=2, N_p=4, 4 prompted layers, D=32, 16 patches, 4 classes


def randomize_trainables(model, rng: Rng, std: float = 0.3) -> None:
    """Replace zero-initialized dispatcher outputs and the head with random
    values so every gradient path is exercised away from the symmetric start."""
    if isinstance(model, PMoEModel):
        for l, disp in model.dispatchers.items():
            for name, t in disp.named_parameters():
                if "fc2" in name or "router" in name:
                    t.data = rng.child(l, len(name), sum(map(ord, name))).normal(t.shape, std)
    for i, (_, t) in enumerate(model.head.named_parameters()):
        t.data = rng.child(999, i).normal(t.shape, std)


def full_model_grad_check(
    config: ModelConfig = TOY, seed: int = 0, h: float = 1e-5, tol: float = 1e-4, batch: int = 2
) -> GradCheckReport:
    rng = Rng(seed)
    experts = [expert_from_seed(config.backbone, seed * 1000 + k + 1) for k in range(config.num_experts)]
    model = build_model(config, experts, rng.child(0))
    randomize_trainables(model, rng.child(1))
    bb = config.backbone
    images = rng.child(2).normal((batch, bb.image_h, bb.image_w, bb.channels))
    labels = np.arange(batch) % config.num_classes
    return grad_check(lambda: cross_entropy(forward(model, images), labels), trainable_parameters(model), h=h, tol=tol)
