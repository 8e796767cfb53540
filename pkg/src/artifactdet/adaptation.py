"""Per-layer vision adapters and multi-granularity feature aggregation."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

ADAPTER_INIT_STD = 0.02


class Adapter(nn.Module):
    """Token-wise ``LayerNorm(GELU(W x))`` with a square, bias-free W."""

    def __init__(self, dim: int, generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(dim, dim, dtype=dtype))
        self.norm = nn.LayerNorm(dim, dtype=dtype)
        with torch.no_grad():
            self.weight.normal_(0.0, ADAPTER_INIT_STD, generator=generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(F.gelu(x @ self.weight.T))


def adapt_layer(features: torch.Tensor, adapter: Adapter, beta: float) -> torch.Tensor:
    """beta * adapter(F) + (1 - beta) * F, exact at the endpoints."""
    if features.shape[-1] != adapter.weight.shape[1]:
        raise ValueError(f"feature dim {features.shape[-1]} != adapter dim {adapter.weight.shape[1]}")
    if beta == 0.0:
        return features
    if beta == 1.0:
        return adapter(features)
    return beta * adapter(features) + (1.0 - beta) * features


class AdapterStack(nn.Module):
    def __init__(self, dim: int, num_layers: int, beta: float = 0.1, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if not 0.0 <= beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {beta}")
        g = torch.Generator().manual_seed(seed)
        self.beta = float(beta)
        self.adapters = nn.ModuleList(Adapter(dim, g, dtype) for _ in range(num_layers))

    @property
    def num_layers(self) -> int:
        return len(self.adapters)


def attach_hooks(stack: AdapterStack, layer_count: int) -> dict[int, Callable[[torch.Tensor], torch.Tensor]]:
    """Hook map for ``encode_image_layers``: adapters on layers 1..L_a only.

    Layers without an entry run untouched, which is the identity hook.
    """
    if stack.num_layers > layer_count:
        raise ValueError(f"{stack.num_layers} adapters for a {layer_count}-layer backbone")

    def make(adapter):
        return lambda x: adapt_layer(x, adapter, stack.beta)

    return {i: make(a) for i, a in enumerate(stack.adapters, start=1)}


class ProjectorBank(nn.Module):
    """One bias-free linear map width -> embed_dim per tapped layer."""

    def __init__(self, taps: Sequence[int], dim: int, embed_dim: int, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if len(set(taps)) != len(taps) or not taps:
            raise ValueError(f"taps must be a nonempty set of distinct layers, got {list(taps)}")
        g = torch.Generator().manual_seed(seed)
        self.taps = list(taps)
        self.projectors = nn.ModuleDict()
        for t in self.taps:
            lin = nn.Linear(dim, embed_dim, bias=False, dtype=dtype)
            with torch.no_grad():
                lin.weight.normal_(0.0, dim ** -0.5, generator=g)
            self.projectors[str(t)] = lin

    def as_list(self) -> list[nn.Module]:
        return [self.projectors[str(t)] for t in self.taps]


def aggregate_multigranularity(tapped: Sequence[torch.Tensor] | Mapping[int, torch.Tensor],
                               projectors: Sequence[Callable[[torch.Tensor], torch.Tensor]],
                               normalize: bool = True) -> torch.Tensor:
    """Sum of projected tapped features, unit-normalised per token."""
    feats = list(tapped.values()) if isinstance(tapped, Mapping) else list(tapped)
    if len(feats) != len(projectors) or not feats:
        raise ValueError(f"{len(feats)} tapped features for {len(projectors)} projectors")
    if len({f.shape[:-1] for f in feats}) != 1:
        raise ValueError("tapped features disagree on token count")
    out = projectors[0](feats[0])
    for f, proj in zip(feats[1:], projectors[1:]):
        out = out + proj(f)
    if normalize:
        out = out / out.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    return out
