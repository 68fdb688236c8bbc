"""
Degenerate cases
================

With a single expert the softmax over experts is identically 1, so the
mixture reduces to deep visual prompt tuning.  With two identical experts
and identical prompt banks it reduces to the single-expert model again.
"""

import numpy as np

from pmoe.harness.data import expert_from_seed
from pmoe.harness.gradcheck import randomize_trainables
from pmoe.model import ModelConfig, build_model, pmoe_forward
from pmoe.numerics import Rng, Tensor
from pmoe.prompting import VptModel, vpt_forward

cfg = ModelConfig(num_experts=1)
expert = expert_from_seed(cfg.backbone, 1)
images = Rng(1).normal((4, 32, 32, 1))

model = build_model(cfg, [expert], Rng(2))
randomize_trainables(model, Rng(3))  # a trained-looking dispatcher, not the uniform start
vpt = VptModel(expert, model.prompts, model.head, deep=True)

diff = np.abs(pmoe_forward(model, images)[0].data - vpt_forward(vpt, images).data).max()
print(f"K=1 vs VPT-deep, max logit difference: {diff:.2e}")

# duplicate the expert and its prompt bank
twin = build_model(ModelConfig(num_experts=2), [expert, expert], Rng(2))
randomize_trainables(twin, Rng(3))
twin.head = model.head
for l in model.prompts.prompted_layers:
    twin.prompts.tokens[l] = Tensor(np.concatenate([model.prompts[l].data] * 2), requires_grad=True)
diff = np.abs(pmoe_forward(model, images)[0].data - pmoe_forward(twin, images)[0].data).max()
print(f"two identical experts vs one, max logit difference: {diff:.2e}")
