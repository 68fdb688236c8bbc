"""Mixture-of-experts prompt tuning on frozen transformer experts (numpy)."""
from .backbone import BackboneConfig, ExpertBackbone, make_synthetic_expert, patchify, trans_layer
from .dispatch import DispatcherLayer, DispatchTrace, MoeDispatcher, dispatch_weights, fuse_tokens, moe_dispatch
from .model import ModelConfig, PMoEModel, build_model, combine_experts, pmoe_forward, trainable_parameters
from .numerics import Rng, Tensor, grad_check
from .prompting import PromptBank, VptModel, init_prompts, vpt_forward

__version__ = "0.1.0"
