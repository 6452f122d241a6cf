"""A small ViT encoder, attention rollout, and checkpoint import/export."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, FormatError, InvalidInputError, LoadError

CHECKPOINT_FORMAT = "dualcue-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    drop_rate: float = 0.0
    in_chans: int = 3

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} must be a positive multiple of patch_size {self.patch_size}"
            )
        if self.heads <= 0 or self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigurationError("drop_rate must lie in [0, 1)")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid * self.grid + 1


class Attention(nn.Module):
    def __init__(self, dim, heads, drop):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(drop)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (self.drop(attn) @ v).transpose(1, 2).reshape(b, n, c)
        return self.drop(self.proj(out)), attn


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, drop):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, drop)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Dropout(drop), nn.Linear(hidden, dim), nn.Dropout(drop)
        )

    def forward(self, x):
        y, attn = self.attn(self.norm1(x))
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class VisionTransformer(nn.Module):
    """Patch embedding, learned position embedding, pre-norm blocks, final norm.

    ``forward`` returns the normalized class-token feature ``(B, C)``; with
    ``return_attention=True`` it also returns one ``(B, heads, T, T)`` tensor per
    block.
    """

    def __init__(self, config: ViTConfig | None = None):
        super().__init__()
        self.config = config = config or ViTConfig()
        c = config.embed_dim
        self.patch_embed = nn.Conv2d(config.in_chans, c, config.patch_size, stride=config.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_tokens, c))
        self.pos_drop = nn.Dropout(config.drop_rate)
        self.blocks = nn.ModuleList(
            Block(c, config.heads, config.mlp_ratio, config.drop_rate) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(c)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    @property
    def embed_dim(self):
        return self.config.embed_dim

    def forward(self, images, return_attention=False):
        cfg = self.config
        if images.dim() != 4 or tuple(images.shape[1:]) != (cfg.in_chans, cfg.image_size, cfg.image_size):
            raise InvalidInputError(
                f"expected images of shape (B, {cfg.in_chans}, {cfg.image_size}, {cfg.image_size}), "
                f"got {tuple(images.shape)}"
            )
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        x = self.pos_drop(x + self.pos_embed)
        attentions = []
        for block in self.blocks:
            x, attn = block(x)
            attentions.append(attn)
        feature = self.norm(x)[:, 0]
        if return_attention:
            return feature, attentions
        return feature


# ---------------------------------------------------------------------------
# attention rollout


def _check_attention(layer, idx):
    if not torch.isfinite(layer).all() or (layer < 0).any():
        raise InvalidInputError(f"attention layer {idx} has negative or non-finite entries")
    if layer.shape[-1] != layer.shape[-2]:
        raise InvalidInputError(f"attention layer {idx} is not square: {tuple(layer.shape)}")
    rows = layer.sum(dim=-1)
    if not torch.allclose(rows, torch.ones_like(rows), atol=1e-5, rtol=0):
        raise InvalidInputError(f"attention rows of layer {idx} do not sum to 1")


def attention_rollout(attentions, residual=0.5):
    """Propagate attention through the layers.

    ``attentions`` is a sequence of per-layer tensors shaped ``(heads, T, T)``
    or ``(B, heads, T, T)``. Each layer is head-averaged, mixed with the identity
    as ``(1 - residual) * A + residual * I`` and row-normalized; the result is
    ``A_L @ ... @ A_1`` with shape ``(T, T)`` or ``(B, T, T)``.
    """
    if attentions is None or len(attentions) == 0:
        raise InvalidInputError("attention stack is empty")
    rollout = None
    for idx, layer in enumerate(attentions):
        layer = torch.as_tensor(layer).detach().to(torch.float64)
        if layer.dim() not in (3, 4):
            raise InvalidInputError(f"attention layer {idx} must be (heads, T, T) or (B, heads, T, T)")
        _check_attention(layer, idx)
        a = layer.mean(dim=-3)
        eye = torch.eye(a.shape[-1], dtype=a.dtype)
        a = (1.0 - residual) * a + residual * eye
        a = a / a.sum(dim=-1, keepdim=True)
        if rollout is None:
            rollout = a
        else:
            if a.shape != rollout.shape:
                raise InvalidInputError(f"attention layer {idx} shape {tuple(a.shape)} differs from earlier layers")
            rollout = a @ rollout
    return rollout


def cls_heatmap(rollout, grid):
    """Class-token row of a rollout, without the class token, as a ``grid x grid`` map."""
    row = rollout[..., 0, 1:]
    if row.shape[-1] != grid * grid:
        raise InvalidInputError(f"rollout has {row.shape[-1]} patch tokens, expected {grid * grid}")
    return row.reshape(*row.shape[:-1], grid, grid)


def save_heatmap(heatmap, path, size=None):
    """Write a min-max scaled grayscale PNG, nearest-upsampled to ``size`` pixels."""
    from PIL import Image

    h = np.asarray(heatmap, dtype=np.float64)
    lo, hi = h.min(), h.max()
    scaled = np.zeros_like(h) if hi <= lo else (h - lo) / (hi - lo)
    img = Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L")
    if size:
        img = img.resize((size, size), Image.NEAREST)
    img.save(path)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors, meta=None):
    """Save named tensors plus a plain-data metadata record as one archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tensors": {k: v.detach().cpu().clone() for k, v in tensors.items()},
        "meta": meta or {},
    }
    torch.save(payload, path)


def read_checkpoint(path):
    """Return ``(tensors, meta)``; raises :class:`FormatError` on anything unreadable."""
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # the unpickler surfaces corrupt bytes as many exception types
        raise FormatError(f"cannot parse checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    tensors = payload.get("tensors")
    if not isinstance(tensors, dict) or not all(isinstance(v, torch.Tensor) for v in tensors.values()):
        raise FormatError(f"{path} has a malformed tensor table")
    return tensors, payload.get("meta", {})


@dataclass
class LoadReport:
    matched: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    unexpected: list = field(default_factory=list)
    shape_mismatch: list = field(default_factory=list)

    @property
    def clean(self):
        return not (self.missing or self.unexpected or self.shape_mismatch)

    def summary(self):
        return (
            f"matched={len(self.matched)} missing={len(self.missing)} "
            f"unexpected={len(self.unexpected)} shape_mismatch={len(self.shape_mismatch)}"
        )


def load_weights(module: nn.Module, source, strictness="strict", prefix=""):
    """Copy tensors from a checkpoint into ``module`` by name and shape.

    ``prefix`` selects a sub-tree of the checkpoint (e.g. ``"backbone_main."``);
    keys outside it are ignored rather than reported as unexpected. In
    ``"strict"`` mode any mismatch raises :class:`LoadError` and nothing is
    loaded; ``"non_strict"`` loads what matches and reports the rest.
    """
    if strictness not in ("strict", "non_strict"):
        raise ConfigurationError(f"unknown strictness {strictness!r}")
    tensors, _ = read_checkpoint(source)
    if prefix:
        tensors = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    own = module.state_dict()
    report = LoadReport()
    for name, value in tensors.items():
        if name not in own:
            report.unexpected.append(name)
        elif tuple(own[name].shape) != tuple(value.shape):
            report.shape_mismatch.append(name)
        else:
            report.matched.append(name)
    report.missing = [name for name in own if name not in tensors]
    if strictness == "strict" and not report.clean:
        raise LoadError(
            f"strict load from {source} failed: {report.summary()}; "
            f"missing={report.missing} unexpected={report.unexpected} shape_mismatch={report.shape_mismatch}"
        )
    with torch.no_grad():
        for name in report.matched:
            own[name].copy_(tensors[name].to(own[name].dtype))
    return report


def backbone_meta(config: ViTConfig, **extra):
    return {"vit": asdict(config), **extra}


def patch_grid_mass(heatmap, box, patch_size):
    """Fraction of a heatmap's mass on patches overlapping pixel box ``(x, y, size)``
    together with the fraction of patches involved (the uniform baseline)."""
    h = np.asarray(heatmap, dtype=np.float64)
    grid = h.shape[-1]
    x, y, s = box
    c0, c1 = x // patch_size, min(grid - 1, (x + s - 1) // patch_size)
    r0, r1 = y // patch_size, min(grid - 1, (y + s - 1) // patch_size)
    region = h[r0 : r1 + 1, c0 : c1 + 1].sum()
    n_patches = (r1 - r0 + 1) * (c1 - c0 + 1)
    total = h.sum()
    return float(region / total), n_patches / (grid * grid)

