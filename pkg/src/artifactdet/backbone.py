"""Frozen dual encoder (vision + text) behind a small contract.

The vision side exposes every layer's token features and accepts per-layer
hooks; the text side accepts per-layer prefix injections. Module and
parameter names follow the OpenCLIP layout so released weights load after a
prefix rename (see ``OPEN_CLIP_PREFIXES``).
"""

from __future__ import annotations

import hashlib
import json
import re
import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

Hook = Callable[[torch.Tensor], torch.Tensor]

CHECKPOINT_FORMAT = "artifactdet-backbone/1"
OPEN_CLIP_PREFIXES = (
    ("visual.", "vision."),
    ("token_embedding.", "text.token_embedding."),
    ("positional_embedding", "text.positional_embedding"),
    ("transformer.", "text.transformer."),
    ("ln_final.", "text.ln_final."),
    ("text_projection", "text.text_projection"),
)
_DROPPED_OPEN_CLIP_KEYS = ("logit_scale", "attn_mask", "logit_bias")


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class VisionBackboneSpec:
    layer_count: int
    width: int
    heads: int
    patch_size: int
    input_size: int
    embed_dim: int
    class_token: bool = True
    act: str = "gelu"

    @property
    def token_dim(self) -> int:
        return self.width

    @property
    def patch_grid(self) -> tuple[int, int]:
        g = self.input_size // self.patch_size
        return g, g

    def __post_init__(self):
        if self.input_size % self.patch_size:
            raise BackboneError(
                f"input size {self.input_size} is not a multiple of patch size {self.patch_size}")


@dataclass(frozen=True)
class TextBackboneSpec:
    layer_count: int
    width: int
    heads: int
    context_length: int  # V
    vocab_size: int
    embed_dim: int
    act: str = "gelu"

    @property
    def token_dim(self) -> int:
        return self.width


class QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


def _act(name: str) -> nn.Module:
    if name == "gelu":
        return nn.GELU()
    if name == "quick_gelu":
        return QuickGELU()
    raise BackboneError(f"unknown activation {name!r}")


class ResidualAttentionBlock(nn.Module):
    def __init__(self, width: int, heads: int, act: str = "gelu"):
        super().__init__()
        self.ln_1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ln_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(OrderedDict([
            ("c_fc", nn.Linear(width, width * 4)),
            ("gelu", _act(act)),
            ("c_proj", nn.Linear(width * 4, width)),
        ]))

    def forward(self, x, attn_mask=None):
        y = self.ln_1(x)
        x = x + self.attn(y, y, y, need_weights=False, attn_mask=attn_mask)[0]
        return x + self.mlp(self.ln_2(x))


class Transformer(nn.Module):
    def __init__(self, width: int, layers: int, heads: int, act: str = "gelu"):
        super().__init__()
        self.resblocks = nn.ModuleList(ResidualAttentionBlock(width, heads, act) for _ in range(layers))


class VisionTransformer(nn.Module):
    def __init__(self, spec: VisionBackboneSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        gh, gw = spec.patch_grid
        self.conv1 = nn.Conv2d(3, w, kernel_size=spec.patch_size, stride=spec.patch_size, bias=False)
        self.class_embedding = nn.Parameter(torch.zeros(w))
        self.positional_embedding = nn.Parameter(torch.zeros(1 + gh * gw, w))
        self.ln_pre = nn.LayerNorm(w)
        self.transformer = Transformer(w, spec.layer_count, spec.heads, spec.act)
        self.ln_post = nn.LayerNorm(w)
        self.proj = nn.Parameter(torch.zeros(w, spec.embed_dim))

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        x = self.conv1(images).flatten(2).transpose(1, 2)
        cls = self.class_embedding.to(x.dtype).expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.positional_embedding
        return self.ln_pre(x)

    def project_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """Frozen output head applied token-wise (ln_post then proj)."""
        return self.ln_post(tokens) @ self.proj


class TextTransformer(nn.Module):
    def __init__(self, spec: TextBackboneSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        self.token_embedding = nn.Embedding(spec.vocab_size, w)
        self.positional_embedding = nn.Parameter(torch.zeros(spec.context_length, w))
        self.transformer = Transformer(w, spec.layer_count, spec.heads, spec.act)
        self.ln_final = nn.LayerNorm(w)
        self.text_projection = nn.Parameter(torch.zeros(w, spec.embed_dim))
        mask = torch.full((spec.context_length, spec.context_length), float("-inf")).triu_(1)
        self.register_buffer("attn_mask", mask, persistent=False)


class SimpleTokenizer:
    """Word-level tokenizer with reserved pad/start/end ids.

    Words found in ``vocab`` use their listed id; anything else is hashed into
    the remaining id range, which keeps the toy backbone self-contained.
    """

    pad_id, sot_id, eot_id = 0, 1, 2

    def __init__(self, vocab_size: int, vocab: Mapping[str, int] | None = None,
                 sot_id: int | None = None, eot_id: int | None = None):
        self.vocab_size = vocab_size
        self.vocab = dict(vocab or {})
        if sot_id is not None:
            self.sot_id = sot_id
        if eot_id is not None:
            self.eot_id = eot_id

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in re.findall(r"[a-z0-9]+|[^\sa-z0-9]", text.lower()):
            if word in self.vocab:
                ids.append(self.vocab[word])
            else:
                ids.append(3 + zlib.crc32(word.encode()) % (self.vocab_size - 3))
        return ids


class DualEncoder(nn.Module):
    def __init__(self, vision_spec: VisionBackboneSpec, text_spec: TextBackboneSpec,
                 tokenizer: SimpleTokenizer | None = None):
        super().__init__()
        if vision_spec.embed_dim != text_spec.embed_dim:
            raise BackboneError(
                f"vision embed dim {vision_spec.embed_dim} != text embed dim {text_spec.embed_dim}")
        self.vision_spec = vision_spec
        self.text_spec = text_spec
        self.vision = VisionTransformer(vision_spec)
        self.text = TextTransformer(text_spec)
        self.tokenizer = tokenizer or SimpleTokenizer(text_spec.vocab_size)

    @property
    def embed_dim(self) -> int:
        return self.vision_spec.embed_dim

    def freeze(self) -> "DualEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def train(self, mode: bool = True):
        # frozen backbone: never switch into training behaviour
        return super().train(False)

    def checksum(self) -> str:
        return state_checksum(self.state_dict())

    # ---- vision ---------------------------------------------------------

    def encode_image_layers(self, images: torch.Tensor, hooks: Mapping[int, Hook] | None = None
                            ) -> tuple[list[torch.Tensor], torch.Tensor]:
        """Run the vision tower and return (per-layer tokens, global embedding).

        ``hooks`` maps 1-based layer index to a transform of that layer's
        output; layer i+1 consumes the transformed tokens, and the returned
        per-layer features are the transformed ones. Tokens are B x N x d with
        the class token at position 0.
        """
        spec = self.vision_spec
        if images.ndim != 4 or images.shape[1] != 3 or tuple(images.shape[2:]) != (spec.input_size,) * 2:
            raise BackboneError(
                f"expected B x 3 x {spec.input_size} x {spec.input_size} images, got {tuple(images.shape)}")
        hooks = dict(hooks or {})
        bad = [i for i in hooks if not 1 <= i <= spec.layer_count]
        if bad:
            raise BackboneError(f"hook layer index out of range 1..{spec.layer_count}: {bad}")

        x = self.vision.embed(images)
        feats = []
        for i, block in enumerate(self.vision.transformer.resblocks, start=1):
            x = block(x)
            if i in hooks:
                x = hooks[i](x)
            feats.append(x)
        global_feat = self.vision.project_tokens(x[:, 0])
        return feats, global_feat

    # ---- text -----------------------------------------------------------

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.text.token_embedding(ids)

    def encode_text_with_injections(self, token_embeddings: torch.Tensor, eot_index: torch.Tensor,
                                    injections: Mapping[int, torch.Tensor | None] | None = None,
                                    return_layer_inputs: bool = False):
        """Encode embedded token sequences, optionally replacing prefixes per layer.

        ``token_embeddings`` is B x V x width (or V x width). For each
        designated layer h in ``injections`` the first J positions of that
        layer's input are overwritten by ``injections[h]`` (J x width); the
        outputs at those positions are discarded at the next designated
        layer. The embedding is the end-of-text position after ``ln_final``,
        projected to the shared embedding space.
        """
        spec = self.text_spec
        single = token_embeddings.ndim == 2
        if single:
            token_embeddings = token_embeddings.unsqueeze(0)
        B, V, width = token_embeddings.shape
        if V != spec.context_length or width != spec.width:
            raise BackboneError(
                f"expected sequences of shape {spec.context_length} x {spec.width}, got {V} x {width}")
        injections = dict(injections or {})
        bad = [h for h in injections if not 1 <= h <= spec.layer_count]
        if bad:
            raise BackboneError(f"injection layer index out of range 1..{spec.layer_count}: {bad}")
        missing = [h for h, g in injections.items() if g is None]
        if missing:
            raise BackboneError(f"missing injection tokens for designated layers {missing}")
        lengths = {g.shape[0] for g in injections.values()}
        if len(lengths) > 1:
            raise BackboneError(f"injections disagree on J: {sorted(lengths)}")
        J = lengths.pop() if lengths else 0
        if J >= V:
            raise BackboneError(f"J={J} must be smaller than the sequence length {V}")

        x = token_embeddings + self.text.positional_embedding
        layer_inputs = []
        for h, block in enumerate(self.text.transformer.resblocks, start=1):
            if h in injections and J > 0:
                g = injections[h].to(x.dtype).unsqueeze(0).expand(B, -1, -1)
                x = torch.cat([g, x[:, J:]], dim=1)
            layer_inputs.append(x)
            x = block(x, attn_mask=self.text.attn_mask.to(x.dtype))
        x = self.text.ln_final(x)
        eot_index = torch.as_tensor(eot_index, device=x.device).reshape(-1).expand(B)
        pooled = x[torch.arange(B, device=x.device), eot_index] @ self.text.text_projection
        if single:
            pooled = pooled[0]
        if return_layer_inputs:
            return pooled, layer_inputs
        return pooled

    def encode_text(self, texts: Sequence[str]) -> torch.Tensor:
        """Vanilla encoding of plain strings (no learnable parts)."""
        V = self.text_spec.context_length
        ids = torch.zeros(len(texts), V, dtype=torch.long)
        eot = torch.zeros(len(texts), dtype=torch.long)
        for i, t in enumerate(texts):
            seq = [self.tokenizer.sot_id, *self.tokenizer.encode(t), self.tokenizer.eot_id]
            if len(seq) > V:
                raise BackboneError(f"text too long for context length {V}: {t!r}")
            ids[i, : len(seq)] = torch.tensor(seq)
            eot[i] = len(seq) - 1
        return self.encode_text_with_injections(self.embed_tokens(ids), eot)


def state_checksum(state: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


def _init_weights(model: DualEncoder, seed: int) -> None:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if re.search(r"(ln_\w+|ln_pre|ln_post|ln_final)\.weight$", name):
                p.fill_(1.0)
            elif name.endswith("bias"):
                p.zero_()
            elif name.endswith("conv1.weight"):
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                p.normal_(0.0, fan_in ** -0.5, generator=g)
            elif name.endswith(("token_embedding.weight", "positional_embedding", "class_embedding")):
                p.normal_(0.0, 0.02 if "token" in name else 0.1, generator=g)
            else:
                p.normal_(0.0, p.shape[0] ** -0.5, generator=g)


def make_toy_backbone(layers: int = 4, d: int = 16, embed: int = 8, seed: int = 0, *,
                      input_size: int = 32, patch_size: int = 16, heads: int = 2,
                      text_layers: int | None = None, text_width: int | None = None,
                      context_length: int = 32, vocab_size: int = 512,
                      dtype: torch.dtype = torch.float32) -> DualEncoder:
    """Tiny real transformer pair with fixed-seed random weights, frozen."""
    vspec = VisionBackboneSpec(layers, d, heads, patch_size, input_size, embed)
    tspec = TextBackboneSpec(text_layers or layers, text_width or d, heads, context_length,
                             vocab_size, embed)
    model = DualEncoder(vspec, tspec)
    _init_weights(model, seed)
    return model.to(dtype).freeze().eval()


def save_pretrained(backbone: DualEncoder, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "naming": "native",
        "vision": asdict(backbone.vision_spec),
        "text": asdict(backbone.text_spec),
        "tokenizer": {
            "vocab": backbone.tokenizer.vocab,
            "sot_id": backbone.tokenizer.sot_id,
            "eot_id": backbone.tokenizer.eot_id,
        },
        "weights": "weights.pt",
    }
    (path / "metadata.json").write_text(json.dumps(meta, indent=2))
    torch.save(backbone.state_dict(), path / "weights.pt")
    return path


def rename_open_clip_state(state: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    out = {}
    for key, value in state.items():
        if key in _DROPPED_OPEN_CLIP_KEYS:
            continue
        for src, dst in OPEN_CLIP_PREFIXES:
            if key.startswith(src):
                out[dst + key[len(src):]] = value
                break
        else:
            raise BackboneError(f"unrecognised OpenCLIP tensor name: {key}")
    return out


def _resize_positional(pos: torch.Tensor, grid: int) -> torch.Tensor:
    cls, patches = pos[:1], pos[1:]
    old = int(round(patches.shape[0] ** 0.5))
    patches = patches.reshape(1, old, old, -1).permute(0, 3, 1, 2)
    patches = F.interpolate(patches.float(), size=(grid, grid), mode="bicubic", align_corners=False)
    patches = patches.permute(0, 2, 3, 1).reshape(grid * grid, -1).to(pos.dtype)
    return torch.cat([cls, patches], dim=0)


def load_pretrained(path: str | Path, input_size: int | None = None,
                    resize_positional: bool = False,
                    tokenizer: SimpleTokenizer | None = None) -> DualEncoder:
    """Load a backbone directory (``metadata.json`` + weight blob), frozen.

    ``input_size`` is the configured resolution; if it differs from the
    checkpoint's native one the load fails unless ``resize_positional`` is
    set, in which case the patch position table is resampled bicubically.
    """
    path = Path(path)
    meta_path = path / "metadata.json"
    if not meta_path.exists():
        raise BackboneError(f"no metadata.json in {path}")
    try:
        meta = json.loads(meta_path.read_text())
        vmeta = dict(meta["vision"])
        tmeta = dict(meta["text"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise BackboneError(f"corrupt checkpoint metadata: {exc}") from None

    native = int(vmeta["input_size"])
    if input_size is not None and input_size != native:
        if not resize_positional:
            raise BackboneError(
                f"checkpoint input size {native} does not match configured input size {input_size}")
        vmeta["input_size"] = input_size
    vspec = VisionBackboneSpec(**vmeta)
    tspec = TextBackboneSpec(**tmeta)
    tok_meta = meta.get("tokenizer") or {}
    tokenizer = tokenizer or SimpleTokenizer(
        tspec.vocab_size, tok_meta.get("vocab"), tok_meta.get("sot_id"), tok_meta.get("eot_id"))
    model = DualEncoder(vspec, tspec, tokenizer)

    weights = path / meta.get("weights", "weights.pt")
    try:
        state = torch.load(weights, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise BackboneError(f"corrupt checkpoint weights {weights}: {exc}") from None
    if meta.get("naming") == "open_clip":
        state = rename_open_clip_state(state)
    pos_key = "vision.positional_embedding"
    if vmeta["input_size"] != native and pos_key in state:
        state[pos_key] = _resize_positional(state[pos_key], vspec.patch_grid[0])
    expected = model.state_dict()
    for key, value in state.items():
        if key in expected and tuple(expected[key].shape) != tuple(value.shape):
            raise BackboneError(
                f"tensor {key} has shape {tuple(value.shape)}, metadata implies {tuple(expected[key].shape)}")
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise BackboneError(f"checkpoint does not match metadata: {exc}") from None
    return model.freeze().eval()
