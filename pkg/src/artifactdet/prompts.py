"""Learnable clean/artifact prompts, deep prefix tokens and the anchor set.

Token layout of one prompt (before padding to the context length V)::

    [J prefix slots][SOT][P_1 .. P_L][cls words][artifact words][EOT]

The J prefix slots are what the per-layer injection tokens overwrite; with
J = 0 the sequence is exactly the vanilla one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbone import DualEncoder

PROMPT_INIT_STD = 0.02


class PromptError(ValueError):
    pass


class PromptBank(nn.Module):
    """Clean and per-artifact learnable word embeddings plus fixed text parts."""

    def __init__(self, backbone: DualEncoder, artifact_names: Sequence[str], length: int,
                 seed: int = 0, cls_template: str = "a photo of an object", use_cls: bool = True):
        super().__init__()
        width = backbone.text_spec.width
        self.length = int(length)
        self.artifact_names = list(artifact_names)
        self.cls_template = cls_template
        self.use_cls = use_cls
        self.tokenizer = backbone.tokenizer
        self.context_length = backbone.text_spec.context_length
        K = len(self.artifact_names)
        g = torch.Generator().manual_seed(seed)
        dtype = backbone.text.positional_embedding.dtype
        if self.length > 0:
            self.learnable_clean = nn.Parameter(
                torch.randn(self.length, width, generator=g, dtype=torch.float64).to(dtype) * PROMPT_INIT_STD)
            self.learnable_artifact = nn.Parameter(
                torch.randn(K, self.length, width, generator=g, dtype=torch.float64).to(dtype) * PROMPT_INIT_STD)
        else:
            self.learnable_clean = None
            self.learnable_artifact = None
        self.artifact_tokens = [self.tokenizer.encode(n) for n in self.artifact_names]

    @property
    def num_artifacts(self) -> int:
        return len(self.artifact_names)

    def cls_tokens(self, cls_text: str | None = None) -> list[int]:
        if not self.use_cls:
            return []
        return self.tokenizer.encode(cls_text or self.cls_template)

    def sequence_lengths(self, cls_text: str | None = None) -> list[int]:
        """Unpadded length (without prefix slots) of the clean and each artifact prompt."""
        base = 2 + self.length + len(self.cls_tokens(cls_text))
        return [base] + [base + len(a) for a in self.artifact_tokens]

    def check_fits(self, prefix: int = 0, cls_text: str | None = None) -> None:
        longest = prefix + max(self.sequence_lengths(cls_text))
        if longest > self.context_length:
            raise PromptError(
                f"prompt of {longest} tokens (prefix {prefix}, L={self.length}) exceeds context length "
                f"{self.context_length}")

    def assemble(self, backbone: DualEncoder, prefix: int = 0, cls_text: str | None = None
                 ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ((K+1) x V x width embeddings, end-of-text indices)."""
        self.check_fits(prefix, cls_text)
        tok = self.tokenizer
        emb = backbone.text.token_embedding.weight
        V, width = self.context_length, emb.shape[1]

        def lookup(ids):
            return emb[torch.as_tensor(ids, dtype=torch.long)] if ids else emb.new_zeros(0, width)

        sot, eot, pad = lookup([tok.sot_id]), lookup([tok.eot_id]), lookup([tok.pad_id])
        cls = lookup(self.cls_tokens(cls_text))
        slots = emb.new_zeros(prefix, width)
        rows, eots = [], []
        for k in range(self.num_artifacts + 1):
            parts = [slots, sot]
            if self.length > 0:
                parts.append(self.learnable_clean if k == 0 else self.learnable_artifact[k - 1])
            parts.append(cls)
            if k > 0:
                parts.append(lookup(self.artifact_tokens[k - 1]))
            parts.append(eot)
            seq = torch.cat(parts, dim=0)
            eots.append(seq.shape[0] - 1)
            rows.append(torch.cat([seq, pad.expand(V - seq.shape[0], -1)], dim=0))
        return torch.stack(rows), torch.tensor(eots)


def build_prompts(backbone: DualEncoder, artifact_names: Sequence[str], L: int = 12, seed: int = 0,
                  cls_template: str = "a photo of an object", use_cls: bool = True) -> PromptBank:
    if L < 0:
        raise PromptError("prompt length must be >= 0")
    bank = PromptBank(backbone, artifact_names, L, seed, cls_template, use_cls)
    bank.check_fits()
    return bank


class DeepPromptSchedule(nn.Module):
    """Independent J x width prefix tokens for each designated text layer."""

    def __init__(self, J: int, designated_layers: Sequence[int], width: int, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.J = int(J)
        self.designated_layers = list(designated_layers) if self.J > 0 else []
        g = torch.Generator().manual_seed(seed)
        self.tokens = nn.ParameterDict({
            str(h): nn.Parameter(
                (torch.randn(self.J, width, generator=g, dtype=torch.float64) * PROMPT_INIT_STD).to(dtype))
            for h in self.designated_layers
        })

    def injections(self) -> dict[int, torch.Tensor]:
        return {h: self.tokens[str(h)] for h in self.designated_layers}


def injection_schedule(backbone: DualEncoder, J: int = 4, depth: int = 9, seed: int = 0
                       ) -> DeepPromptSchedule:
    spec = backbone.text_spec
    if J < 0:
        raise PromptError("J must be >= 0")
    if J >= spec.context_length:
        raise PromptError(f"J={J} must be smaller than the context length {spec.context_length}")
    if J > 0 and not 0 <= depth <= spec.layer_count:
        raise PromptError(f"depth {depth} exceeds the text encoder's {spec.layer_count} layers")
    dtype = backbone.text.positional_embedding.dtype
    return DeepPromptSchedule(J, range(1, depth + 1), spec.width, seed, dtype)


@dataclass
class AnchorSet:
    """(K+1) x embed_dim unit-norm text anchors; row 0 is the clean prompt."""

    anchors: torch.Tensor

    @property
    def num_artifacts(self) -> int:
        return self.anchors.shape[0] - 1

    def detach(self) -> "AnchorSet":
        return AnchorSet(self.anchors.detach().clone())


def encode_anchor_set(bank: PromptBank, schedule: DeepPromptSchedule, backbone: DualEncoder,
                      cls_text: str | None = None) -> AnchorSet:
    prefix = schedule.J if schedule.designated_layers else 0
    seqs, eot = bank.assemble(backbone, prefix=prefix, cls_text=cls_text)
    emb = backbone.encode_text_with_injections(seqs, eot, schedule.injections())
    return AnchorSet(emb / emb.norm(dim=-1, keepdim=True))


def anchor_separation_report(before: AnchorSet, after: AnchorSet) -> dict:
    """Cosine statistics between the clean anchor and the artifact anchors, before vs after."""
    if before.anchors.shape != after.anchors.shape:
        raise PromptError(
            f"anchor sets differ in shape: {tuple(before.anchors.shape)} vs {tuple(after.anchors.shape)}")

    def stats(a: AnchorSet) -> dict:
        x = a.anchors.detach().double().cpu().numpy()
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
        cos = x @ x.T
        K = x.shape[0] - 1
        pairs = {f"{i}-{j}": float(cos[i, j]) for i in range(1, K + 1) for j in range(i + 1, K + 1)}
        return {
            "clean_vs_artifact": [float(c) for c in cos[0, 1:]],
            "clean_vs_artifact_mean": float(cos[0, 1:].mean()),
            "artifact_pairwise": pairs,
            "artifact_pairwise_mean": float(np.mean(list(pairs.values()))) if pairs else float("nan"),
        }

    return {"before": stats(before), "after": stats(after)}
