"""Expert prompt-token banks and the single-expert VPT baselines."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import ExpertBackbone, patchify, prepend, trans_layer
from .numerics import Rng, ShapeError, Tensor, broadcast_to, linear, mean


class PromptBank:
    """Learnable tokens ``P^l`` of shape (K, N_p, D) for each prompted layer."""

    def __init__(self, tokens: dict[int, Tensor], num_layers: int | None = None):
        if not tokens:
            raise ValueError("a prompt bank needs at least one prompted layer")
        layers = sorted(tokens)
        shapes = {tokens[l].shape for l in layers}
        if len(shapes) != 1 or len(next(iter(shapes))) != 3:
            raise ShapeError(f"prompt tensors must share one (K, N_p, D) shape, got {shapes}")
        if layers[0] < 0 or (num_layers is not None and layers[-1] >= num_layers):
            raise ValueError(f"prompted layers {layers} outside [0, {num_layers})")
        self.tokens = {l: tokens[l] for l in layers}
        self.num_experts, self.num_prompts, self.dim = next(iter(shapes))

    @property
    def prompted_layers(self) -> list[int]:
        return list(self.tokens)

    def __getitem__(self, layer: int) -> Tensor:
        return self.tokens[layer]

    def parameters(self) -> list[Tensor]:
        return list(self.tokens.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"prompt.layer{l}", t) for l, t in self.tokens.items()]

    def entries(self) -> dict[str, np.ndarray]:
        """Archive entries ``prompt.layer{l}.expert{k}`` of shape (N_p, D)."""
        return {
            f"prompt.layer{l}.expert{k}": t.data[k] for l, t in self.tokens.items() for k in range(self.num_experts)
        }

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray], num_layers: int | None = None) -> "PromptBank":
        found: dict[int, dict[int, np.ndarray]] = {}
        for name, arr in entries.items():
            if not name.startswith("prompt.layer"):
                continue
            layer_part, expert_part = name[len("prompt.layer") :].split(".expert")
            found.setdefault(int(layer_part), {})[int(expert_part)] = arr
        tokens = {}
        for l, per_expert in found.items():
            k = len(per_expert)
            tokens[l] = Tensor(np.stack([per_expert[i] for i in range(k)]).astype(np.float64), requires_grad=True)
        return cls(tokens, num_layers)


def init_prompts(
    num_experts: int, num_prompts: int, dim: int, prompted_layers, rng: Rng, num_layers: int | None = None
) -> PromptBank:
    """Uniform(-v, v) with v = sqrt(6 / (D + N_p)) for every prompted layer."""
    layers = sorted(set(int(l) for l in prompted_layers))
    if num_experts < 1 or num_prompts < 0 or dim < 1:
        raise ValueError("invalid prompt bank dimensions")
    bound = np.sqrt(6.0 / (dim + num_prompts))
    tokens = {
        l: Tensor(rng.child(l).uniform((num_experts, num_prompts, dim), -bound, bound), requires_grad=True)
        for l in layers
    }
    return PromptBank(tokens, num_layers)


class Head:
    """Linear classifier D -> num_classes on mean-pooled patch tokens."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        self.weight = Tensor(np.asarray(weight, dtype=np.float64), requires_grad=True)
        self.bias = Tensor(np.asarray(bias, dtype=np.float64), requires_grad=True)

    @classmethod
    def init(cls, dim: int, num_classes: int, rng: Rng) -> "Head":
        return cls(rng.trunc_normal((dim, num_classes), std=0.02), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def __call__(self, patch_tokens: Tensor) -> Tensor:
        return linear(mean(patch_tokens, axis=-2), self.weight, self.bias)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("head.weight", self.weight), ("head.bias", self.bias)]


@dataclass
class VptModel:
    expert: ExpertBackbone
    prompts: PromptBank
    head: Head
    deep: bool = True

    def __post_init__(self):
        if self.prompts.num_experts != 1:
            raise ValueError("a VPT model has exactly one expert")
        if self.prompts.dim != self.expert.config.embed_dim:
            raise ShapeError("prompt dim does not match the backbone")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.prompts.named_parameters() + self.head.named_parameters()

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def _batched(x: Tensor, batch: tuple[int, ...]) -> Tensor:
    return broadcast_to(x, (*batch, *x.shape))


def vpt_tokens(model: VptModel, image, deep: bool | None = None, hook=None) -> Tensor:
    """Final-layer patch tokens of a VPT forward.

    Deep mode writes fresh ``P^l`` into the prompt rows at every prompted
    layer; the previous block's prompt outputs are dropped there.  Unprompted
    layers carry the prompt rows through unchanged.  Shallow mode injects only
    the first prompted layer's tokens and carries them from then on.
    ``hook(l, prompt_out)`` sees each block's prompt-row output.
    """
    deep = model.deep if deep is None else deep
    z = patchify(model.expert, image)
    batch = z.shape[:-2]
    layers = model.prompts.prompted_layers
    inject = set(layers) if deep else {layers[0]}
    n_p = model.prompts.num_prompts
    z_p = None
    for l in range(model.expert.config.num_layers):
        if l in inject:
            z_p = _batched(model.prompts[l][0], batch)
        if z_p is None:
            z = trans_layer(model.expert, l, z)
            continue
        out = trans_layer(model.expert, l, prepend(z_p, z))
        z_p, z = out[..., :n_p, :], out[..., n_p:, :]
        if hook is not None:
            z_p = hook(l, z_p)
    return z


def vpt_forward(model: VptModel, image, deep: bool | None = None) -> Tensor:
    """Logits from the head on mean-pooled final patch tokens."""
    return model.head(vpt_tokens(model, image, deep))


def make_vpt(expert: ExpertBackbone, num_prompts: int, prompted_layers, num_classes: int, rng: Rng, deep: bool = True) -> VptModel:
    cfg = expert.config
    bank = init_prompts(1, num_prompts, cfg.embed_dim, prompted_layers, rng.child(0), cfg.num_layers)
    return VptModel(expert, bank, Head.init(cfg.embed_dim, num_classes, rng.child(1)), deep)
