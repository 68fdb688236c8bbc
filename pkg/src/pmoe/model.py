"""The full mixture-of-experts prompt-tuning model.

Per image: every expert patchifies the input; at each prompted layer the
shared dispatcher mixes all experts' prompt tokens into per-expert integrated
prompts that are prepended to that expert's patch tokens; after the last
block the experts' patch tokens are averaged and classified.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .archive import array_to_text, format_kv, load_archive, parse_kv, save_archive, text_to_array
from .backbone import BackboneConfig, ExpertBackbone, patchify, prepend, trans_layer
from .dispatch import DispatcherLayer, DispatchTrace, MoeDispatcher, TokenMLP, dispatch_weights, fuse_tokens, record_trace
from .numerics import Rng, ShapeError, Tensor, broadcast_to, concat
from .prompting import Head, PromptBank, VptModel, init_prompts, vpt_forward

MODES = ("pmoe", "vpt_deep", "vpt_shallow", "epts_no_dispatch")
DISPATCHERS = ("plain", "moe")


def _parse_layers(value) -> tuple[int, ...]:
    if isinstance(value, str):
        value = [v for v in value.replace(" ", "").split(",") if v]
    return tuple(sorted(set(int(v) for v in value)))


@dataclass(frozen=True)
class ModelConfig:
    num_experts: int = 2
    num_prompts: int = 4
    prompted_layers: tuple[int, ...] | None = None
    dispatcher: str = "plain"
    moe_experts: int = 3
    mode: str = "pmoe"
    num_classes: int = 4
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.prompted_layers is None:
            object.__setattr__(self, "prompted_layers", tuple(range(self.backbone.num_layers)))
        else:
            object.__setattr__(self, "prompted_layers", _parse_layers(self.prompted_layers))
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.dispatcher not in DISPATCHERS:
            raise ValueError(f"unknown dispatcher {self.dispatcher!r}")
        if self.mode.startswith("vpt") and self.num_experts != 1:
            raise ValueError(f"mode {self.mode} requires num_experts = 1")
        if self.num_experts < 1 or self.num_prompts < 0 or self.num_classes < 1 or self.moe_experts < 1:
            raise ValueError("counts must be positive")
        if not self.prompted_layers or not all(0 <= l < self.backbone.num_layers for l in self.prompted_layers):
            raise ValueError(f"prompted_layers {self.prompted_layers} must be a non-empty subset of [0, L)")
        if self.mode == "vpt_shallow" and len(self.prompted_layers) != 1:
            raise ValueError("vpt_shallow uses a single prompted layer")

    @staticmethod
    def first_layers(m: int) -> tuple[int, ...]:
        """The m-prompt-layer ablation setting: the first m blocks."""
        return tuple(range(m))

    def to_dict(self) -> dict:
        out = {
            "num_experts": self.num_experts,
            "num_prompts": self.num_prompts,
            "prompted_layers": ",".join(str(l) for l in self.prompted_layers),
            "dispatcher": self.dispatcher,
            "moe_experts": self.moe_experts,
            "mode": self.mode,
            "num_classes": self.num_classes,
        }
        out.update(self.backbone.to_dict())
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        values = dict(values)
        bb_keys = set(BackboneConfig().to_dict())
        bb = BackboneConfig.from_dict({k: values.pop(k) for k in list(values) if k in bb_keys})
        conv = {"num_experts": int, "num_prompts": int, "moe_experts": int, "num_classes": int, "dispatcher": str, "mode": str}
        kw = {}
        for k, v in values.items():
            if k == "prompted_layers":
                kw[k] = _parse_layers(v)
            elif k == "num_prompt_layers":
                kw["prompted_layers"] = ModelConfig.first_layers(int(v))
            elif k in conv:
                kw[k] = conv[k](v)
            else:
                raise KeyError(k)
        return cls(backbone=bb, **kw)

    def to_text(self) -> str:
        return format_kv(self.to_dict())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_dict(parse_kv(text))


class PMoEModel:
    """K frozen experts + prompt bank + per-layer dispatchers + head."""

    def __init__(
        self,
        config: ModelConfig,
        experts: list[ExpertBackbone],
        prompts: PromptBank,
        dispatchers: dict[int, DispatcherLayer | MoeDispatcher],
        head: Head,
        trace_enabled: bool = False,
    ):
        if len(experts) != config.num_experts:
            raise ValueError(f"config says {config.num_experts} experts, got {len(experts)}")
        ref = experts[0].config
        for e in experts:
            c = e.config
            if (c.embed_dim, c.num_layers, c.num_patches) != (ref.embed_dim, ref.num_layers, ref.num_patches):
                raise ShapeError("experts must share embed_dim, num_layers and patch grid")
        if (prompts.num_experts, prompts.num_prompts) != (config.num_experts, config.num_prompts):
            raise ShapeError("prompt bank does not match the config")
        if tuple(prompts.prompted_layers) != config.prompted_layers:
            raise ValueError("prompt bank layers differ from config.prompted_layers")
        if config.mode == "pmoe" and set(dispatchers) != set(config.prompted_layers):
            raise ValueError("pmoe needs one dispatcher per prompted layer")
        self.config = config
        self.experts = experts
        self.prompts = prompts
        self.dispatchers = dict(sorted(dispatchers.items())) if config.mode == "pmoe" else {}
        self.head = head
        self.trace_enabled = trace_enabled

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = list(self.prompts.named_parameters())
        for l, disp in self.dispatchers.items():
            params += disp.named_parameters(f"dispatch.layer{l}.")
        return params + self.head.named_parameters()

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def frozen_tensors(self) -> list[Tensor]:
        return [t for e in self.experts for t in e.weights.values()]


def build_model(config: ModelConfig, experts: list[ExpertBackbone], rng: Rng, trace_enabled: bool = False):
    """Fresh trainable parts around ``experts``; VPT modes return a VptModel."""
    d = config.backbone.embed_dim
    prompts = init_prompts(
        config.num_experts, config.num_prompts, d, config.prompted_layers, rng.child(0), config.backbone.num_layers
    )
    head = Head.init(d, config.num_classes, rng.child(1))
    if config.mode in ("vpt_deep", "vpt_shallow"):
        return VptModel(experts[0], prompts, head, deep=config.mode == "vpt_deep")
    dispatchers = {}
    if config.mode == "pmoe":
        for l in config.prompted_layers:
            r = rng.child(2, l)
            if config.dispatcher == "moe":
                dispatchers[l] = MoeDispatcher.init(d, config.num_experts, config.moe_experts, r)
            else:
                dispatchers[l] = DispatcherLayer.init(d, config.num_experts, r)
    return PMoEModel(config, experts, prompts, dispatchers, head, trace_enabled)


def combine_experts(outputs) -> Tensor:
    """Element-wise mean of the experts' final patch tokens."""
    outputs = list(outputs)
    if not outputs:
        raise ValueError("nothing to combine")
    shape = outputs[0].shape
    if any(o.shape != shape for o in outputs):
        raise ShapeError(f"expert outputs differ in shape: {[o.shape for o in outputs]}")
    stacked = concat([o.reshape(1, *o.shape) for o in outputs], axis=0)
    return stacked.mean(axis=0)


def pmoe_tokens(model: PMoEModel, image, trace: DispatchTrace | None = None) -> list[Tensor]:
    """Final-layer patch tokens of every expert."""
    cfg = model.config
    n_p = cfg.num_prompts
    zs = [patchify(e, image) for e in model.experts]
    batch = zs[0].shape[:-2]
    z_ps: list[Tensor | None] = [None] * cfg.num_experts
    first = cfg.prompted_layers[0]
    for l in range(cfg.backbone.num_layers):
        if l in model.prompts.tokens:
            bank = model.prompts[l]
            for k in range(cfg.num_experts):
                if cfg.mode == "pmoe":
                    accum = None if l == first else z_ps[k]
                    w = dispatch_weights(model.dispatchers[l], bank[k], accum, zs[k])
                    if trace is not None:
                        record_trace(trace, w, l, k)
                    ipt = fuse_tokens(w, bank)
                    z_ps[k] = ipt if ipt.ndim == len(batch) + 2 else broadcast_to(ipt, (*batch, *ipt.shape))
                else:
                    z_ps[k] = broadcast_to(bank[k], (*batch, *bank[k].shape))
        for k, expert in enumerate(model.experts):
            if z_ps[k] is None:
                zs[k] = trans_layer(expert, l, zs[k])
                continue
            out = trans_layer(expert, l, prepend(z_ps[k], zs[k]))
            z_ps[k], zs[k] = out[..., :n_p, :], out[..., n_p:, :]
    return zs


def pmoe_forward(model: PMoEModel, image, trace: DispatchTrace | None = None) -> tuple[Tensor, DispatchTrace | None]:
    """Logits (and the dispatch trace when tracing) for an image or batch."""
    if trace is None and model.trace_enabled:
        trace = DispatchTrace()
    zs = pmoe_tokens(model, image, trace)
    return model.head(combine_experts(zs)), trace


def forward(model, image) -> Tensor:
    """Logits for either model family."""
    if isinstance(model, VptModel):
        return vpt_forward(model, image)
    return pmoe_forward(model, image)[0]


def trainable_parameters(model) -> list[Tensor]:
    return model.parameters()


def named_trainable_parameters(model) -> list[tuple[str, Tensor]]:
    return model.named_parameters()


def experts_of(model) -> list[ExpertBackbone]:
    return [model.expert] if isinstance(model, VptModel) else model.experts


def frozen_count(model) -> int:
    return sum(e.num_params() for e in experts_of(model))


def trainable_count(model) -> int:
    return sum(t.size for t in trainable_parameters(model))


def parameter_overhead_ratio(model) -> float:
    """(frozen + trainable) / frozen."""
    frozen = frozen_count(model)
    return (frozen + trainable_count(model)) / frozen


def model_config_of(model) -> ModelConfig:
    if isinstance(model, PMoEModel):
        return model.config
    mode = "vpt_deep" if model.deep else "vpt_shallow"
    layers = model.prompts.prompted_layers if model.deep else model.prompts.prompted_layers[:1]
    return ModelConfig(
        num_experts=1,
        num_prompts=model.prompts.num_prompts,
        prompted_layers=tuple(layers),
        mode=mode,
        num_classes=model.head.num_classes,
        backbone=model.expert.config,
    )


def checkpoint_entries(model) -> dict[str, np.ndarray]:
    cfg = model_config_of(model)
    entries = {"config": text_to_array(cfg.to_text())}
    for k, e in enumerate(experts_of(model)):
        entries.update({f"expert{k}.{n}": v for n, v in e.state().items()})
    entries.update(model.prompts.entries())
    if isinstance(model, PMoEModel):
        for l, disp in model.dispatchers.items():
            entries.update({n: t.data for n, t in disp.named_parameters(f"dispatch.layer{l}.")})
    entries.update({n: t.data for n, t in model.head.named_parameters()})
    return entries


def save_checkpoint(model, path: str | os.PathLike) -> None:
    save_archive(path, checkpoint_entries(model))


def _mlp_from(entries: dict[str, np.ndarray], prefix: str) -> TokenMLP:
    return TokenMLP(*(entries[f"{prefix}{n}"] for n in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias")))


def model_from_entries(entries: dict[str, np.ndarray]):
    entries = dict(entries)
    cfg = ModelConfig.from_text(array_to_text(entries.pop("config")))
    experts = []
    for k in range(cfg.num_experts):
        prefix = f"expert{k}."
        experts.append(ExpertBackbone(cfg.backbone, {n[len(prefix) :]: v for n, v in entries.items() if n.startswith(prefix)}))
    prompts = PromptBank.from_entries(entries, cfg.backbone.num_layers)
    head = Head(entries["head.weight"], entries["head.bias"])
    if cfg.mode in ("vpt_deep", "vpt_shallow"):
        return VptModel(experts[0], prompts, head, deep=cfg.mode == "vpt_deep")
    dispatchers = {}
    if cfg.mode == "pmoe":
        for l in cfg.prompted_layers:
            prefix = f"dispatch.layer{l}."
            if cfg.dispatcher == "moe":
                mlps = [_mlp_from(entries, f"{prefix}expert{e}.") for e in range(cfg.moe_experts)]
                dispatchers[l] = MoeDispatcher(mlps, entries[f"{prefix}router.weight"], entries[f"{prefix}router.bias"])
            else:
                dispatchers[l] = DispatcherLayer(_mlp_from(entries, prefix))
    return PMoEModel(cfg, experts, prompts, dispatchers, head)


def load_checkpoint(path: str | os.PathLike):
    return model_from_entries(load_archive(path))


def with_mode(config: ModelConfig, mode: str, **changes) -> ModelConfig:
    return replace(config, mode=mode, **changes)
