"""
A dispatcher made of competing experts
======================================

Swap the single dispatching MLP for several MLPs and a top-1 router.  Each
token goes through exactly one of them; its logits are scaled by the
router's probability for that choice.
"""

import numpy as np

from pmoe.dispatch import MoeDispatcher
from pmoe.harness.data import expert_from_seed
from pmoe.model import ModelConfig, build_model, forward, trainable_count
from pmoe.numerics import Rng

for E in (3, 6, 9):
    cfg = ModelConfig(dispatcher="moe", moe_experts=E)
    model = build_model(cfg, [expert_from_seed(cfg.backbone, s) for s in (1, 2)], Rng(0))
    print(f"E={E}: {trainable_count(model)} trainable parameters")

# route a handful of tokens and see where they go
moe = MoeDispatcher.init(dim=32, num_experts=2, num_dispatch=6, rng=Rng(1))
moe.router_w.data *= 100  # sharpen the router so choices differ
tokens = Rng(2).normal((10, 32))
moe.token_logits(tokens)
print("chosen dispatching expert per token:", moe.last_routing.expert)
print("gate values:", np.round(moe.last_routing.gate, 3))

logits = forward(model, Rng(3).normal((2, 32, 32, 1)))
print("logits from the E=9 model:\n", np.round(logits.data, 4))
