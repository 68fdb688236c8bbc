"""Dynamic dispatching of expert prompt tokens.

At each prompted layer a shared dispatcher maps every token of the current
expert's state (its own prompt tokens, its accumulated prompts, its patch
tokens) to K logits.  Patch logits are averaged over patches and broadcast to
the prompt rows, the groups are summed, and a softmax over experts yields a
row-stochastic (N_p, K) weight matrix.  Each integrated prompt token is then
the weighted sum of the matching prompt token of every expert.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, ShapeError, Tensor, as_tensor, broadcast_to, concat, gelu, linear, mean, softmax


class TokenMLP:
    """``gelu(x @ W1 + b1) @ W2 + b2``, applied independently to every token."""

    def __init__(self, fc1_w, fc1_b, fc2_w, fc2_b):
        self.fc1_w = Tensor(np.asarray(fc1_w, dtype=np.float64), requires_grad=True)
        self.fc1_b = Tensor(np.asarray(fc1_b, dtype=np.float64), requires_grad=True)
        self.fc2_w = Tensor(np.asarray(fc2_w, dtype=np.float64), requires_grad=True)
        self.fc2_b = Tensor(np.asarray(fc2_b, dtype=np.float64), requires_grad=True)

    @classmethod
    def init(cls, dim: int, out_dim: int, rng: Rng, zero_last: bool = True) -> "TokenMLP":
        fc2 = np.zeros((dim, out_dim)) if zero_last else rng.child(1).trunc_normal((dim, out_dim))
        return cls(rng.child(0).trunc_normal((dim, dim)), np.zeros(dim), fc2, np.zeros(out_dim))

    @property
    def in_dim(self) -> int:
        return self.fc1_w.shape[0]

    @property
    def out_dim(self) -> int:
        return self.fc2_w.shape[1]

    def __call__(self, x) -> Tensor:
        return linear(gelu(linear(x, self.fc1_w, self.fc1_b)), self.fc2_w, self.fc2_b)

    def named_parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}fc1.weight", self.fc1_w),
            (f"{prefix}fc1.bias", self.fc1_b),
            (f"{prefix}fc2.weight", self.fc2_w),
            (f"{prefix}fc2.bias", self.fc2_b),
        ]


class DispatcherLayer:
    """Shared per-layer dispatcher: one token-wise MLP D -> K for all experts."""

    kind = "plain"

    def __init__(self, mlp: TokenMLP):
        self.mlp = mlp

    @classmethod
    def init(cls, dim: int, num_experts: int, rng: Rng) -> "DispatcherLayer":
        return cls(TokenMLP.init(dim, num_experts, rng))

    @property
    def dim(self) -> int:
        return self.mlp.in_dim

    @property
    def num_experts(self) -> int:
        return self.mlp.out_dim

    def token_logits(self, x: Tensor) -> Tensor:
        return self.mlp(x)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.mlp.named_parameters(prefix)


@dataclass
class Routing:
    """Top-1 routing decision for a flat list of tokens."""

    expert: np.ndarray  # (M,) selected dispatching expert per token
    gate: np.ndarray  # (M,) router probability of the selected expert


class MoeDispatcher:
    """E competing dispatching MLPs with a top-1 router (D -> E).

    Each token is sent to the single expert with the highest router
    probability (ties toward the lowest index); its logits are that expert's
    MLP output times the router probability.  Only the selected MLP is
    evaluated on a token.
    """

    kind = "moe"

    def __init__(self, mlps: list[TokenMLP], router_w, router_b):
        if not mlps:
            raise ValueError("need at least one dispatching expert")
        self.mlps = mlps
        self.router_w = Tensor(np.asarray(router_w, dtype=np.float64), requires_grad=True)
        self.router_b = Tensor(np.asarray(router_b, dtype=np.float64), requires_grad=True)
        self.last_routing: Routing | None = None

    @classmethod
    def init(cls, dim: int, num_experts: int, num_dispatch: int, rng: Rng) -> "MoeDispatcher":
        mlps = [TokenMLP.init(dim, num_experts, rng.child(e)) for e in range(num_dispatch)]
        return cls(mlps, rng.child(num_dispatch).trunc_normal((dim, num_dispatch)), np.zeros(num_dispatch))

    @property
    def dim(self) -> int:
        return self.mlps[0].in_dim

    @property
    def num_experts(self) -> int:
        return self.mlps[0].out_dim

    @property
    def num_dispatch(self) -> int:
        return len(self.mlps)

    def route(self, flat: Tensor) -> tuple[Routing, Tensor]:
        probs = softmax(linear(flat, self.router_w, self.router_b), axis=-1)
        choice = np.argmax(probs.data, axis=-1)  # first maximum wins ties
        rows = np.arange(flat.shape[0])
        return Routing(choice, probs.data[rows, choice]), probs[rows, choice]

    def token_logits(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        lead = x.shape[:-1]
        flat = x.reshape(-1, x.shape[-1])
        routing, gate = self.route(flat)
        self.last_routing = routing
        order = np.argsort(routing.expert, kind="stable")
        pieces = []
        for e, mlp in enumerate(self.mlps):
            idx = order[routing.expert[order] == e]
            if idx.size:
                pieces.append(mlp(flat[idx]))
        stacked = concat(pieces, axis=0)[np.argsort(order, kind="stable")]
        out = stacked * gate.reshape(-1, 1)
        return out.reshape(*lead, self.num_experts)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        params = []
        for e, mlp in enumerate(self.mlps):
            params += mlp.named_parameters(f"{prefix}expert{e}.")
        return params + [(f"{prefix}router.weight", self.router_w), (f"{prefix}router.bias", self.router_b)]


def dispatch_weights(layer, epts_k, accum_k, patches_k) -> Tensor:
    """Dispatching weights (…, N_p, K) for one expert at one layer.

    ``epts_k`` is the expert's own prompt tokens (N_p, D); ``accum_k`` its
    accumulated prompt tokens (…, N_p, D) from the previous block, or ``None``
    at the first prompted layer, where that term is left out; ``patches_k``
    its patch tokens (…, N_z, D).  ``layer`` is a :class:`DispatcherLayer` or
    :class:`MoeDispatcher`; its token map runs once over the concatenated
    groups and the output rows are split back per group.
    """
    epts_k, patches_k = as_tensor(epts_k), as_tensor(patches_k)
    d = layer.dim
    if epts_k.ndim != 2 or epts_k.shape[-1] != d or patches_k.ndim < 2 or patches_k.shape[-1] != d:
        raise ShapeError(f"dispatcher expects (N_p, {d}) and (..., N_z, {d}): got {epts_k.shape}, {patches_k.shape}")
    batch = patches_k.shape[:-2]
    n_p = epts_k.shape[0]
    groups = [broadcast_to(epts_k, (*batch, *epts_k.shape)) if batch else epts_k]
    if accum_k is not None:
        accum_k = as_tensor(accum_k)
        if accum_k.shape != (*batch, n_p, d):
            raise ShapeError(f"accumulated prompts {accum_k.shape}, expected {(*batch, n_p, d)}")
        groups.append(accum_k)
    groups.append(patches_k)
    out = layer.token_logits(concat(groups, axis=-2))
    logits = out[..., :n_p, :]
    if accum_k is not None:
        logits = logits + out[..., n_p : 2 * n_p, :]
    start = n_p * (len(groups) - 1)
    logits = logits + mean(out[..., start:, :], axis=-2, keepdims=True)
    return softmax(logits, axis=-1)


def moe_dispatch(moe: MoeDispatcher, epts_k, accum_k, patches_k) -> Tensor:
    if not isinstance(moe, MoeDispatcher):
        raise TypeError("moe_dispatch needs a MoeDispatcher")
    return dispatch_weights(moe, epts_k, accum_k, patches_k)


def fuse_tokens(weights, all_epts) -> Tensor:
    """Integrated prompt tokens: ``out[…, n] = sum_k weights[…, n, k] * all_epts[k, n]``."""
    weights, all_epts = as_tensor(weights), as_tensor(all_epts)
    if all_epts.ndim != 3 or weights.ndim < 2 or weights.shape[-2:] != all_epts.shape[:2][::-1]:
        raise ShapeError(f"weights {weights.shape} incompatible with prompts {all_epts.shape}")
    w, p = weights.data, all_epts.data
    out = np.einsum("...nk,knd->...nd", w, p)

    def backward(g):
        gw = np.einsum("...nd,knd->...nk", g, p) if weights.requires_grad else None
        gp = None
        if all_epts.requires_grad:
            n, k, d = w.shape[-2], w.shape[-1], p.shape[-1]
            gp = np.einsum("bnk,bnd->knd", w.reshape(-1, n, k), g.reshape(-1, n, d))
        return gw, gp

    return Tensor._make(out, (weights, all_epts), backward)


@dataclass
class TraceRecord:
    layer: int
    expert: int
    token: int
    weights: np.ndarray
    argmax: int


@dataclass
class DispatchTrace:
    """Caller-owned buffer of dispatching decisions from traced forwards."""

    records: list[TraceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_experts(self) -> int:
        return len(self.records[0].weights) if self.records else 0

    def histogram(self) -> dict[int, np.ndarray]:
        """Per layer, how often each expert had the largest weight."""
        k = self.num_experts
        out: dict[int, np.ndarray] = {}
        for r in self.records:
            out.setdefault(r.layer, np.zeros(k, dtype=np.int64))[r.argmax] += 1
        return dict(sorted(out.items()))

    def to_csv(self, path_or_buf=None) -> str | None:
        k = self.num_experts
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "expert", "token", "argmax"] + [f"w{i}" for i in range(k)])
        for r in self.records:
            writer.writerow([r.layer, r.expert, r.token, r.argmax] + [f"{w:.6f}" for w in r.weights])
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        if isinstance(path_or_buf, (str, os.PathLike)):
            with open(path_or_buf, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        else:
            path_or_buf.write(text)
        return None


def record_trace(trace: DispatchTrace, weights, layer: int, expert: int) -> None:
    """Append one record per prompt token (per image, for batched weights)."""
    w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
    w = w.reshape(-1, w.shape[-2], w.shape[-1])
    for sample in w:
        for n, row in enumerate(sample):
            trace.records.append(TraceRecord(layer, expert, n, row.copy(), int(np.argmax(row))))
