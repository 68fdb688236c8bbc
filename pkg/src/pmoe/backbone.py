"""Frozen ViT-style experts: patch embedding plus a stack of pre-norm blocks."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .archive import array_to_text, format_kv, load_archive, parse_kv, save_archive, text_to_array
from .numerics import Rng, ShapeError, Tensor, as_tensor, concat, gelu, layernorm, linear, mean
from .numerics import attention as fused_attention


@dataclass(frozen=True)
class BackboneConfig:
    image_h: int = 32
    image_w: int = 32
    patch_size: int = 8
    channels: int = 1
    embed_dim: int = 32
    num_layers: int = 4
    num_heads: int = 1
    mlp_ratio: float = 4.0
    eps: float = 1e-6

    def __post_init__(self):
        for f in ("image_h", "image_w", "patch_size", "channels", "embed_dim", "num_layers", "num_heads"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError("image dims must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.eps <= 0 or self.mlp_ratio <= 0:
            raise ValueError("eps and mlp_ratio must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "BackboneConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in values.items():
            if k not in kinds:
                raise KeyError(k)
            out[k] = float(v) if kinds[k] in ("float", float) else int(v)
        return cls(**out)


def _layer_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    d, hid = cfg.embed_dim, cfg.mlp_hidden
    return {
        "ln1.gamma": (d,),
        "ln1.beta": (d,),
        "attn.qkv.weight": (d, 3 * d),
        "attn.qkv.bias": (3 * d,),
        "attn.out.weight": (d, d),
        "attn.out.bias": (d,),
        "ln2.gamma": (d,),
        "ln2.beta": (d,),
        "mlp.fc1.weight": (d, hid),
        "mlp.fc1.bias": (hid,),
        "mlp.fc2.weight": (hid, d),
        "mlp.fc2.bias": (d,),
    }


def weight_shapes(cfg: BackboneConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "patch.weight": (cfg.patch_dim, cfg.embed_dim),
        "patch.bias": (cfg.embed_dim,),
        "pos": (cfg.num_patches, cfg.embed_dim),
    }
    for l in range(cfg.num_layers):
        for name, shape in _layer_shapes(cfg).items():
            shapes[f"layer{l}.{name}"] = shape
    return shapes


class ExpertBackbone:
    """One frozen expert.  Weights are read-only :class:`Tensor` leaves."""

    def __init__(self, config: BackboneConfig, weights: dict[str, np.ndarray]):
        expected = weight_shapes(config)
        missing = set(expected) - set(weights)
        if missing:
            raise ShapeError(f"missing backbone weights: {sorted(missing)[:3]}")
        self.config = config
        self.weights: dict[str, Tensor] = {}
        for name, shape in expected.items():
            arr = np.array(weights[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {arr.shape}")
            arr.setflags(write=False)
            self.weights[name] = Tensor(arr, requires_grad=False, name=name)

    @property
    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.weights.values())

    def w(self, name: str) -> Tensor:
        return self.weights[name]

    def num_params(self) -> int:
        return sum(t.size for t in self.weights.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.weights.items()}


def make_synthetic_expert(config: BackboneConfig, rng: Rng) -> ExpertBackbone:
    """Random frozen expert: matrices and positions ~ truncated N(0, 0.02²),
    biases zero, layernorm affine = identity."""
    weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith(".gamma"):
            weights[name] = np.ones(shape)
        elif name.endswith(".beta") or name.endswith(".bias"):
            weights[name] = np.zeros(shape)
        else:
            weights[name] = rng.trunc_normal(shape, std=0.02)
    return ExpertBackbone(config, weights)


def _image_batch(expert: ExpertBackbone, image) -> Tensor:
    cfg = expert.config
    x = as_tensor(image)
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1:] != (cfg.image_h, cfg.image_w, cfg.channels):
        raise ShapeError(
            f"image shape {tuple(as_tensor(image).shape)} does not match "
            f"({cfg.image_h}, {cfg.image_w}, {cfg.channels})"
        )
    return x


def extract_patches(image, patch_size: int) -> Tensor:
    """(B, H, W, C) -> (B, N_z, P*P*C); patches in row-major grid order."""
    x = as_tensor(image)
    b, h, w, c = x.shape
    p = patch_size
    x = x.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def patchify(expert: ExpertBackbone, image) -> Tensor:
    """Embed an image (H, W, C) or batch (B, H, W, C) into patch tokens.

    Returns (N_z, D) for a single image and (B, N_z, D) for a batch.
    """
    single = as_tensor(image).ndim == 3
    x = _image_batch(expert, image)
    patches = extract_patches(x, expert.config.patch_size)
    tokens = linear(patches, expert.w("patch.weight"), expert.w("patch.bias")) + expert.w("pos")
    return tokens.reshape(tokens.shape[1:]) if single else tokens


def attention(x: Tensor, qkv_w: Tensor, qkv_b: Tensor, out_w: Tensor, out_b: Tensor, num_heads: int) -> Tensor:
    """Full (non-causal) multi-head self-attention over the second-to-last axis."""
    return fused_attention(x, qkv_w, qkv_b, out_w, out_b, num_heads)


def trans_layer(expert: ExpertBackbone, layer_index: int, tokens) -> Tensor:
    """Pre-norm block: ``x + MHSA(LN(x))`` then ``h + MLP(LN(h))``.

    Token count and width are preserved.  Callers that prepend prompt rows
    split the output as ``out[..., :N_p, :]`` (accumulated prompts) and
    ``out[..., N_p:, :]`` (patch tokens).
    """
    cfg = expert.config
    if not 0 <= layer_index < cfg.num_layers:
        raise IndexError(f"layer index {layer_index} outside [0, {cfg.num_layers})")
    x = as_tensor(tokens)
    if x.shape[-1] != cfg.embed_dim:
        raise ShapeError(f"token dim {x.shape[-1]} != embed_dim {cfg.embed_dim}")
    w = lambda n: expert.w(f"layer{layer_index}.{n}")  # noqa: E731
    h = layernorm(x, w("ln1.gamma"), w("ln1.beta"), cfg.eps)
    x = x + attention(h, w("attn.qkv.weight"), w("attn.qkv.bias"), w("attn.out.weight"), w("attn.out.bias"), cfg.num_heads)
    h = layernorm(x, w("ln2.gamma"), w("ln2.beta"), cfg.eps)
    h = linear(gelu(linear(h, w("mlp.fc1.weight"), w("mlp.fc1.bias"))), w("mlp.fc2.weight"), w("mlp.fc2.bias"))
    return x + h


def backbone_forward(expert: ExpertBackbone, image) -> Tensor:
    """Plain (unprompted) forward; returns final-layer patch tokens."""
    z = patchify(expert, image)
    for l in range(expert.config.num_layers):
        z = trans_layer(expert, l, z)
    return z


def expert_features(expert: ExpertBackbone, images, batch_size: int = 256) -> np.ndarray:
    """Mean-pooled final-layer patch tokens of the frozen expert, (N, D)."""
    images = np.asarray(images)
    out = []
    for i in range(0, len(images), batch_size):
        z = backbone_forward(expert, images[i : i + batch_size])
        out.append(mean(z, axis=-2).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, expert.config.embed_dim))


def prepend(prompts: Tensor, tokens: Tensor) -> Tensor:
    """Concatenate prompt rows in front of patch rows along the token axis."""
    return concat([prompts, tokens], axis=-2)


def expert_entries(expert: ExpertBackbone, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in expert.state().items()}


def save_expert(expert: ExpertBackbone, path: str | os.PathLike) -> None:
    entries = {"config": text_to_array(format_kv(expert.config.to_dict()))}
    entries.update(expert_entries(expert))
    save_archive(path, entries)


def load_expert(path: str | os.PathLike) -> ExpertBackbone:
    entries = load_archive(path)
    cfg = BackboneConfig.from_dict(parse_kv(array_to_text(entries.pop("config"))))
    return ExpertBackbone(cfg, entries)
