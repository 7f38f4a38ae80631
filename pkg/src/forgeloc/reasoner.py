"""Tiny multimodal decoder-only transformer and the [SEG] query projector.

Sequence layout is ``[visual block | BOS | prompt | response]``. Visual
tokens attend to each other bidirectionally; text positions attend to the
whole visual block and causally to earlier text. Visual tokens carry only
their 2-D position code, so the block is a set as far as text is concerned.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .text_codec import BOS, EOS, IMG

log = logging.getLogger(__name__)


@dataclass
class ReasonerConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    max_seq: int = 128
    patch: int = 8
    query_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


class CapacityError(ValueError):
    """Sequence longer than the model's ``max_seq``."""


def sincos_2d(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Fixed 2-D sinusoidal code, ``(h*w, dim)``; half the channels per axis."""
    quarter = dim // 4
    freq = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1)))
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        ang = coord[:, None] * freq[None, :]
        parts += [ang.sin(), ang.cos()]
    pe = torch.cat(parts, dim=1)
    if pe.shape[1] < dim:
        pe = F.pad(pe, (0, dim - pe.shape[1]))
    return pe.to(dtype)


RESIDUAL_GAIN = 25.0


def forensic_channels(images: torch.Tensor, gain: float = RESIDUAL_GAIN) -> torch.Tensor:
    """Append rectified high-pass residual channels: ``(B, H, W, 3) -> (B, H, W, 6)``.

    The residual is the image minus its 3x3 box mean (edge-replicated), so
    it carries local noise energy that a linear patch projection cannot see.
    """
    x = images.permute(0, 3, 1, 2)
    padded = F.pad(x, (1, 1, 1, 1), mode="replicate")
    local_mean = F.avg_pool2d(padded, kernel_size=3, stride=1)
    residual = (gain * (x - local_mean)).abs()
    return torch.cat([x, residual], dim=1).permute(0, 2, 3, 1)


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """``(B, H, W, 3)`` -> ``(B, n_patches, patch*patch*3)`` in row-major patch order."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


class PatchEmbed(nn.Module):
    def __init__(self, patch: int, dim: int):
        super().__init__()
        self.patch = patch
        self.dim = dim
        self.proj = nn.Linear(6 * patch * patch, dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        b, h, w, _ = images.shape
        x = self.proj(patchify(forensic_channels(images), self.patch))
        return x + sincos_2d(h // self.patch, w // self.patch, self.dim, x.dtype)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        hd = d // self.n_heads

        def split(t):
            return t.view(b, n, self.n_heads, hd).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        scores = scores.masked_fill(~allowed, float("-inf"))
        out = scores.softmax(-1) @ v
        return self.o(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, ffn_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, ffn_mult * dim)
        self.fc2 = nn.Linear(ffn_mult * dim, dim)

    def forward(self, x, allowed):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


def attention_layout(n_visual: int, n_text: int) -> torch.Tensor:
    """Boolean ``(L, L)`` matrix, ``True`` where query row may attend to key column."""
    n = n_visual + n_text
    allowed = torch.zeros(n, n, dtype=torch.bool)
    allowed[:, :n_visual] = True
    allowed[n_visual:, n_visual:] = torch.tril(torch.ones(n_text, n_text, dtype=torch.bool))
    return allowed


@dataclass
class HiddenStates:
    hidden: torch.Tensor  # (B, n_visual + T, d) after the final norm
    logits: torch.Tensor  # (B, T, vocab); row t predicts text token t+1
    n_visual: int

    def text_hidden(self) -> torch.Tensor:
        return self.hidden[:, self.n_visual :]


class Reasoner(nn.Module):
    def __init__(self, cfg: ReasonerConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        d = cfg.d_model
        self.vision = PatchEmbed(cfg.patch, d)
        self.tok_emb = nn.Embedding(vocab_size, d)
        self.pos_emb = nn.Embedding(cfg.max_seq, d)
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.ffn_mult) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.lm_head = nn.Linear(d, vocab_size, bias=False)
        for emb in (self.tok_emb, self.pos_emb):
            nn.init.normal_(emb.weight, std=0.02)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, H, W, 3)`` -> visual tokens ``(B, n_patches, d_model)``."""
        return self.vision(images)

    def forward(self, visual: torch.Tensor, text: torch.Tensor) -> HiddenStates:
        b, n_vis, _ = visual.shape
        t = text.shape[1]
        if n_vis + t > self.cfg.max_seq:
            raise CapacityError(f"sequence of {n_vis}+{t} tokens exceeds max_seq={self.cfg.max_seq}")
        vis = visual + self.tok_emb.weight[IMG]
        pos = torch.arange(t, device=text.device)
        txt = self.tok_emb(text) + self.pos_emb(pos)[None]
        x = torch.cat([vis, txt], dim=1)
        allowed = attention_layout(n_vis, t)
        for block in self.blocks:
            x = block(x, allowed)
        x = self.ln_f(x)
        return HiddenStates(x, self.lm_head(x[:, n_vis:]), n_vis)

    @torch.no_grad()
    def generate(self, visual: torch.Tensor, prompt: list[int], max_new: int = 24) -> tuple[list[int], HiddenStates]:
        """Greedy decoding for a single image.

        Returns the generated response ids (EOS included if produced) and the
        hidden states of ``[BOS, prompt, response]``.
        """
        if max_new < 1:
            raise ValueError("max_new must be positive")
        text = [BOS, *prompt]
        out: list[int] = []
        room = self.cfg.max_seq - visual.shape[1] - len(text)
        for _ in range(min(max_new, room)):
            ids = torch.tensor([text + out], dtype=torch.long)
            nxt = int(self(visual, ids).logits[0, -1].argmax())
            out.append(nxt)
            if nxt == EOS:
                break
        states = self(visual, torch.tensor([text + out], dtype=torch.long))
        return out, states


def extract_seg_embedding(states: HiddenStates, seg_position: int | None, *, batch_index: int = 0):
    """Last-layer hidden state at the [SEG] text position.

    ``seg_position`` indexes the text sequence ``[BOS, prompt, response]``.
    ``None`` selects the fallback (final position) and returns ``flag=True``.
    """
    text = states.text_hidden()[batch_index]
    if seg_position is None:
        log.info("[SEG] missing from generated response; using final position")
        return text[-1], True
    if not 0 <= seg_position < text.shape[0]:
        raise IndexError(f"seg position {seg_position} outside text range [0, {text.shape[0]})")
    return text[seg_position], False


class QueryProjector(nn.Module):
    """Two-layer MLP mapping the [SEG] hidden state to the reasoning query."""

    def __init__(self, d_model: int, query_dim: int):
        super().__init__()
        self.d_model = d_model
        self.fc1 = nn.Linear(d_model, d_model)
        self.fc2 = nn.Linear(d_model, query_dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.d_model:
            raise ValueError(f"expected last dim {self.d_model}, got {h.shape[-1]}")
        return self.fc2(F.gelu(self.fc1(h)))
