"""Detector assembly: frozen backbone plus every trainable group."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .adaptation import AdapterStack, ProjectorBank, aggregate_multigranularity, attach_hooks
from .backbone import DualEncoder, load_pretrained, make_toy_backbone, state_checksum
from .config import RunConfig
from .prompts import build_prompts, encode_anchor_set, injection_schedule
from .scoring import (
    Predictions,
    LossBreakdown,
    classification_loss,
    head_predictions,
    make_heads,
    score_against_anchors,
    segmentation_loss,
    total_loss,
)

# parameter group name -> attribute holding it
PARAMETER_GROUPS = {
    "backbone": "backbone",
    "adapters": "adapters",
    "projectors": "projectors",
    "cls_head": "cls_head",
    "seg_head": "seg_head",
    "prompt_embeddings": "prompts",
    "injection_tokens": "deep_prompts",
}


class MissingAnchorsError(RuntimeError):
    pass


def build_backbone(cfg: RunConfig) -> DualEncoder:
    spec = dict(cfg.backbone or {})
    kind = spec.pop("kind", "pretrained")
    if kind == "toy":
        dtype = getattr(torch, spec.pop("dtype", "float32"))
        return make_toy_backbone(
            layers=spec.get("layers", 4), d=spec.get("width", 16), embed=spec.get("embed_dim", 8),
            seed=spec.get("seed", 0), input_size=cfg.input_size, patch_size=spec.get("patch_size", 16),
            heads=spec.get("heads", 2), text_layers=spec.get("text_layers"),
            text_width=spec.get("text_width"), context_length=spec.get("context_length", 32),
            vocab_size=spec.get("vocab_size", 512), dtype=dtype)
    if kind == "pretrained":
        if not spec.get("path"):
            raise ValueError("backbone.path is required for a pretrained backbone")
        return load_pretrained(spec["path"], input_size=cfg.input_size,
                               resize_positional=bool(spec.get("resize_positional", False)))
    raise ValueError(f"unknown backbone kind {kind!r}")


class ArtifactDetector(nn.Module):
    def __init__(self, backbone: DualEncoder, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone.freeze()
        vspec = backbone.vision_spec
        dtype = backbone.vision.proj.dtype
        n_layers, width, embed = vspec.layer_count, vspec.width, backbone.embed_dim

        self.taps = [n_layers if t == -1 else int(t) for t in cfg.taps]
        if any(t > n_layers for t in self.taps):
            raise ValueError(f"taps {self.taps} exceed the {n_layers}-layer vision encoder")
        if cfg.adapter_layers > n_layers:
            raise ValueError(f"adapter_layers {cfg.adapter_layers} exceeds {n_layers} layers")

        self.adapters = AdapterStack(width, cfg.adapter_layers, cfg.beta,
                                     cfg.subsystem_seed("adapters"), dtype)
        self.projectors = (ProjectorBank(self.taps, width, embed, cfg.subsystem_seed("projectors"), dtype)
                           if cfg.use_projectors else None)
        self.cls_head, self.seg_head = make_heads(embed, cfg.num_classes, cfg.subsystem_seed("heads"), dtype)
        self.prompts = build_prompts(backbone, cfg.artifact_names, cfg.prompt_length,
                                     cfg.subsystem_seed("prompts"), cfg.cls_template, cfg.use_cls)
        self.deep_prompts = injection_schedule(backbone, cfg.deep_prompt_J, cfg.deep_prompt_depth,
                                               cfg.subsystem_seed("deep_prompts"))
        self.prompts.check_fits(prefix=self.deep_prompts.J)

        self.register_buffer("pixel_mean", torch.tensor(cfg.pixel_mean, dtype=dtype).view(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.tensor(cfg.pixel_std, dtype=dtype).view(1, 3, 1, 1))
        self.anchor_cache: dict[str, torch.Tensor] = {}
        self.initial_anchors: torch.Tensor | None = None
        self.completed_stages: list[str] = []
        self.mask_threshold: float = 0.5

    # ---- bookkeeping ---------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return self.pixel_mean.dtype

    @property
    def grid(self) -> tuple[int, int]:
        return self.backbone.vision_spec.patch_grid

    @property
    def input_size(self) -> int:
        return self.backbone.vision_spec.input_size

    def group(self, name: str) -> nn.Module | None:
        return getattr(self, PARAMETER_GROUPS[name])

    def group_parameters(self, name: str) -> list[nn.Parameter]:
        mod = self.group(name)
        return [] if mod is None else list(mod.parameters())

    def group_checksums(self) -> dict[str, str]:
        out = {}
        for name in PARAMETER_GROUPS:
            mod = self.group(name)
            out[name] = state_checksum({} if mod is None else mod.state_dict())
        return out

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.train(False)
        return self

    # ---- forward pieces --------------------------------------------------

    def hooks(self):
        return attach_hooks(self.adapters, self.backbone.vision_spec.layer_count)

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return (images.to(self.dtype) - self.pixel_mean) / self.pixel_std

    def visual_features(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(global feature B x E, per-token multi-granularity feature B x N x E)."""
        feats, image_feat = self.backbone.encode_image_layers(self.normalize(images), self.hooks())
        start = 1 if self.backbone.vision_spec.class_token else 0
        tapped = [feats[t - 1][:, start:] for t in self.taps]
        if self.projectors is not None:
            projectors = self.projectors.as_list()
        else:
            projectors = [self.backbone.vision.project_tokens] * len(tapped)
        return image_feat, aggregate_multigranularity(tapped, projectors)

    def encode_anchors(self, cls_text: str | None = None) -> torch.Tensor:
        """Live (differentiable) anchor encoding from the current prompt parameters."""
        return encode_anchor_set(self.prompts, self.deep_prompts, self.backbone, cls_text).anchors

    def _cls_key(self, name: str | None) -> str:
        return (name or "") if self.cfg.per_sample_cls else ""

    def cached_anchors(self, cls_text: str | None = None) -> torch.Tensor:
        key = self._cls_key(cls_text)
        if key not in self.anchor_cache:
            if "II" not in self.completed_stages:
                raise MissingAnchorsError("no frozen anchors: Stage II has not been run")
            with torch.no_grad():
                self.anchor_cache[key] = self.encode_anchors(key or None).detach().clone()
        return self.anchor_cache[key]

    def cache_anchors(self) -> None:
        self.anchor_cache = {}
        with torch.no_grad():
            self.anchor_cache[""] = self.encode_anchors().detach().clone()

    def batch_anchors(self, object_names: Sequence[str | None] | None, live: bool) -> torch.Tensor:
        fetch = self.encode_anchors if live else self.cached_anchors
        if not self.cfg.per_sample_cls or object_names is None:
            return fetch()
        keys = [self._cls_key(n) for n in object_names]
        table = {k: fetch(k or None) for k in dict.fromkeys(keys)}
        return torch.stack([table[k] for k in keys])

    def default_mode(self) -> str:
        return "anchors" if "II" in self.cfg.stages else "heads"

    def predict(self, images: torch.Tensor, object_names=None, mode: str | None = None) -> Predictions:
        """Predictions at input resolution. ``mode`` is heads, anchors or anchors_live."""
        mode = mode or self.default_mode()
        image_feat, patch_feat = self.visual_features(images)
        if mode == "heads":
            preds = head_predictions(self.cls_head, self.seg_head, image_feat, patch_feat, self.grid)
        elif mode in ("anchors", "anchors_live"):
            anchors = self.batch_anchors(object_names, live=mode == "anchors_live")
            preds = score_against_anchors(image_feat, patch_feat, anchors, self.grid, self.cfg.temperature)
        else:
            raise ValueError(f"unknown prediction mode {mode!r}")
        return preds.upsample((images.shape[-2], images.shape[-1]))

    def loss(self, images, masks, classes, object_names=None, mode: str | None = None
             ) -> tuple[LossBreakdown, Predictions]:
        preds = self.predict(images, object_names, mode)
        classes = torch.as_tensor(classes)
        cls = classification_loss(preds.class_probs, classes)
        dice, focal = segmentation_loss(preds.pixel_probs, masks, classes, gamma=self.cfg.focal_gamma,
                                        alpha=self.cfg.focal_alpha, eps=self.cfg.dice_epsilon)
        return total_loss(cls, dice, focal, self.cfg.lambda_cls), preds
