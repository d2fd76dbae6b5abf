"""Small 3D vision transformer over cubic voxel patches."""

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class Vit3dConfig:
    patch_size: int = 4
    embed_dim: int = 96
    depth: int = 8
    heads: int = 6
    crop_size: int = 64
    mlp_ratio: float = 4.0

    def validate(self):
        if self.patch_size not in (4, 8, 12):
            raise ValueError(f"patch_size must be 4, 8, or 12, got {self.patch_size}")
        if self.crop_size % self.patch_size != 0:
            raise ValueError(
                f"crop_size {self.crop_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"heads {self.heads} must divide embed_dim {self.embed_dim}"
            )
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def tokens_per_axis(self) -> int:
        return self.crop_size // self.patch_size

    @property
    def token_count(self) -> int:
        return self.tokens_per_axis ** 3


class Block(nn.Module):
    """Pre-norm transformer block: attention + MLP, both residual."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class Vit3d(nn.Module):
    """Patchify a (B, 1, S, S, S) crop into tokens and encode them.

    forward returns (class_embedding, patch_tokens) from the final,
    layer-normalized block. An optional boolean mask (B, T) replaces the
    marked patch embeddings with a learned mask token before the position
    encoding is added, for masked-prediction training.
    """

    def __init__(self, cfg: Vit3dConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv3d(1, d, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.token_count + 1, d))
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(d)
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)
        nn.init.normal_(self.pos_embed, std=0.02)

    def forward(self, x, mask=None):
        expected = (self.cfg.crop_size,) * 3
        if x.dim() != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != expected:
            raise ValueError(
                f"expected input of shape (B, 1, {', '.join(map(str, expected))}), "
                f"got {tuple(x.shape)}"
            )
        b = x.shape[0]
        tok = self.patch_embed(x).flatten(2).transpose(1, 2)  # (B, T, D)
        if mask is not None:
            if mask.shape != tok.shape[:2]:
                raise ValueError(
                    f"mask shape {tuple(mask.shape)} does not match tokens "
                    f"{tuple(tok.shape[:2])}"
                )
            tok = torch.where(mask[..., None], self.mask_token.to(tok.dtype), tok)
        cls = self.cls_token.expand(b, -1, -1)
        tok = torch.cat([cls, tok], dim=1) + self.pos_embed
        for blk in self.blocks:
            tok = blk(tok)
        tok = self.norm(tok)
        return tok[:, 0], tok[:, 1:]


class ProjectionHead(nn.Module):
    """MLP to a large output vocabulary, through a normalized bottleneck."""

    def __init__(self, embed_dim, out_dim=8192, hidden=192, bottleneck=48):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(embed_dim, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, bottleneck),
        )
        self.out = nn.Linear(bottleneck, out_dim, bias=False)

    def embed(self, x):
        """Unit-norm bottleneck vectors — the sphere the prototypes score."""
        return nn.functional.normalize(self.mlp(x), dim=-1)

    def forward(self, x):
        return self.out(self.embed(x))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
