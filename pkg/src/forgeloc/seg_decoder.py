"""Segmentation branch: frozen image encoder and query-conditioned mask decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .reasoner import forensic_channels, sincos_2d


@dataclass
class SegConfig:
    patch: int = 4
    d_feat: int = 64
    n_heads: int = 4
    mlp_mult: int = 2
    logit_bias: float = -2.0
    forensic: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


class MaskEncoder(nn.Module):
    """Strided patch conv followed by a 3x3 conv, GELU after each.

    Input is RGB, optionally with the fixed noise-residual channels appended.

    No positional code here; the decoder adds one, so features are
    translation-equivariant in steps of ``patch``.
    """

    def __init__(self, patch: int, d_feat: int, forensic: bool = True):
        super().__init__()
        self.patch = patch
        self.d_feat = d_feat
        self.forensic = forensic
        self.stem = nn.Conv2d(6 if forensic else 3, d_feat, kernel_size=patch, stride=patch)
        self.mix = nn.Conv2d(d_feat, d_feat, kernel_size=3, padding=1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, H, W, 3)`` -> feature grid ``(B, H/patch, W/patch, d_feat)``."""
        _, h, w, c = images.shape
        if c != 3 or h % self.patch or w % self.patch:
            raise ValueError(f"image {h}x{w}x{c} not divisible by patch {self.patch}")
        x = forensic_channels(images) if self.forensic else images
        x = x.permute(0, 3, 1, 2)
        x = F.gelu(self.stem(x))
        x = F.gelu(self.mix(x))
        return x.permute(0, 2, 3, 1)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)

    def forward(self, q_in, k_in, v_in):
        b, nq, d = q_in.shape
        nk = k_in.shape[1]
        hd = d // self.n_heads
        q = self.wq(q_in).view(b, nq, self.n_heads, hd).transpose(1, 2)
        k = self.wk(k_in).view(b, nk, self.n_heads, hd).transpose(1, 2)
        v = self.wv(v_in).view(b, nk, self.n_heads, hd).transpose(1, 2)
        att = ((q @ k.transpose(-1, -2)) / math.sqrt(hd)).softmax(-1)
        return self.wo((att @ v).transpose(1, 2).reshape(b, nq, d))


class MaskDecoder(nn.Module):
    """Two-way decoder for a single reasoning query.

    Tokens are the lifted query plus one learned output token. The tokens
    first read the grid, then every grid cell reads the tokens. Coarse
    logits are the scaled dot product of the refined query with each cell
    embedding, upsampled bilinearly to image resolution.
    """

    def __init__(self, query_dim: int, cfg: SegConfig):
        super().__init__()
        d = cfg.d_feat
        self.query_dim = query_dim
        self.d_feat = d
        self.lift = nn.Linear(query_dim, d)
        self.out_token = nn.Parameter(torch.randn(d) * 0.02)
        self.t2i = CrossAttention(d, cfg.n_heads)
        self.norm1 = nn.LayerNorm(d)
        self.mlp1 = nn.Linear(d, cfg.mlp_mult * d)
        self.mlp2 = nn.Linear(cfg.mlp_mult * d, d)
        self.norm2 = nn.LayerNorm(d)
        self.i2t = CrossAttention(d, cfg.n_heads)
        self.norm3 = nn.LayerNorm(d)
        self.cell_proj = nn.Linear(d, d)
        self.query_head = nn.Linear(d, d)
        self.bias = nn.Parameter(torch.tensor(float(cfg.logit_bias)))

    def forward(self, grid: torch.Tensor, query: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
        """``grid (B, h, w, d_feat)``, ``query (B, query_dim)`` -> logits ``(B, H, W)``."""
        if query.shape[-1] != self.query_dim:
            raise ValueError(f"query dim {query.shape[-1]} != decoder query dim {self.query_dim}")
        if grid.shape[-1] != self.d_feat:
            raise ValueError(f"grid feature dim {grid.shape[-1]} != {self.d_feat}")
        b, h, w, d = grid.shape
        feats = grid.reshape(b, h * w, d)
        pe = sincos_2d(h, w, d, feats.dtype)[None]
        tokens = torch.stack([self.lift(query), self.out_token.expand(b, d)], dim=1)
        tokens = self.norm1(tokens + self.t2i(tokens, feats + pe, feats))
        tokens = self.norm2(tokens + self.mlp2(F.gelu(self.mlp1(tokens))))
        feats = self.norm3(feats + self.i2t(feats + pe, tokens, tokens))
        q = self.query_head(tokens[:, 0])
        coarse = (self.cell_proj(feats) @ q[:, :, None]).squeeze(-1) / math.sqrt(d) + self.bias
        coarse = coarse.view(b, 1, h, w)
        return F.interpolate(coarse, size=tuple(out_hw), mode="bilinear", align_corners=False)[:, 0]


def binarize(logits, threshold: float = 0.5) -> np.ndarray:
    """1 where ``sigmoid(logit) >= threshold``.

    Compared in logit space so saturated logits cannot round across the boundary.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    z = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    cut = math.log(threshold / (1.0 - threshold))
    return (z >= cut).astype(np.uint8)
