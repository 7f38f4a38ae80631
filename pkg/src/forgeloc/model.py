"""End-to-end localizer: reasoner -> [SEG] query -> mask decoder.

Ablation settings decide where the mask query comes from:

====  =====================================================
A     one learned query vector, no language model
B     mean-pooled LLM-side visual tokens through the MLP
C     full reasoner with prompt, response is just ``[SEG]``
D     full reasoner, templated response with the instruction
====  =====================================================
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import text_codec as tc
from .lora import FreezePolicy, LoraConfig, inject_lora, policy_from_rules
from .reasoner import QueryProjector, Reasoner, ReasonerConfig
from .seg_decoder import MaskDecoder, MaskEncoder, SegConfig

SETTINGS = ("A", "B", "C", "D")


@dataclass(frozen=True)
class AblationSetting:
    id: str
    uses_llm_image_embedding: bool
    uses_prompt: bool
    predicts_instruction: bool


ABLATIONS = {
    "A": AblationSetting("A", False, False, False),
    "B": AblationSetting("B", True, False, False),
    "C": AblationSetting("C", True, True, False),
    "D": AblationSetting("D", True, True, True),
}


class ForgeryLocalizer(nn.Module):
    def __init__(
        self,
        vocab_size: int,
        rcfg: ReasonerConfig | None = None,
        scfg: SegConfig | None = None,
        lora: LoraConfig | None = None,
        setting: str = "D",
        base_seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if setting not in ABLATIONS:
            raise ValueError(f"unknown setting {setting!r}")
        self.rcfg = rcfg or ReasonerConfig()
        self.scfg = scfg or SegConfig()
        self.setting = ABLATIONS[setting]
        self.lora_cfg = lora
        # pretrained-role weights come from base_seed so every run shares them
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(base_seed)
            self.reasoner = Reasoner(self.rcfg, vocab_size)
            self.mask_encoder = MaskEncoder(self.scfg.patch, self.scfg.d_feat, self.scfg.forensic)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.rcfg.seed + 1_000)
            self.projector = QueryProjector(self.rcfg.d_model, self.rcfg.query_dim)
            self.mask_decoder = MaskDecoder(self.rcfg.query_dim, self.scfg)
            if setting == "A":
                self.seg_query = nn.Parameter(torch.randn(self.rcfg.query_dim))
        if lora is not None:
            self.add_lora(lora)
        self.to(dtype)

    def add_lora(self, cfg: LoraConfig) -> list[str]:
        self.lora_cfg = cfg
        return inject_lora(self.reasoner.blocks, cfg, seed=self.rcfg.seed + 2_000)

    @property
    def dtype(self) -> torch.dtype:
        return self.mask_decoder.bias.dtype

    # ------------------------------------------------------------------
    def default_policy(self) -> FreezePolicy:
        """Freeze policy for this model's setting.

        Vision encoders and base transformer weights are frozen, adapters are
        LoRA-trained, the mask decoder (plus token embeddings and LM head when
        the language loss is on) is fully trained, and the MLP converter or
        learned query starts from scratch. Anything a setting does not use is
        frozen so that the trainable view is exactly what receives gradients.
        """
        s = self.setting
        rules: list[tuple[str, str]] = [("mask_decoder", "full")]
        if s.id == "A":
            rules.append(("seg_query", "scratch"))
        else:
            rules.append(("projector", "scratch"))
        if s.uses_prompt:
            rules += [("*.lora_A", "lora"), ("*.lora_B", "lora"), ("reasoner.tok_emb", "full")]
        if s.predicts_instruction:
            rules.append(("reasoner.lm_head", "full"))
        return policy_from_rules(self, rules, default="frozen")

    # ------------------------------------------------------------------
    def encode_images(self, images: torch.Tensor):
        return self.reasoner.encode_image(images), self.mask_encoder(images)

    def query_from(self, visual: torch.Tensor, states, seg_positions: torch.Tensor) -> torch.Tensor:
        s = self.setting
        if s.id == "A":
            return self.seg_query.expand(visual.shape[0], -1)
        if s.id == "B":
            return self.projector(visual.mean(1))
        text_h = states.text_hidden()
        h_seg = text_h[torch.arange(text_h.shape[0]), seg_positions]
        return self.projector(h_seg)

    def forward(self, images: torch.Tensor, text: torch.Tensor | None, seg_positions: torch.Tensor | None):
        """Teacher-forced pass.

        Returns ``(text logits or None, mask logits (B, H, W))``.
        """
        visual, grid = self.encode_images(images)
        states = None
        if self.setting.uses_prompt:
            states = self.reasoner(visual, text)
        query = self.query_from(visual, states, seg_positions)
        masks = self.mask_decoder(grid, query, images.shape[1:3])
        return (states.logits if states is not None else None), masks


# ----------------------------------------------------------------------
# batch assembly


@dataclass
class TextBatch:
    ids: torch.Tensor  # (B, T) [BOS, prompt, response, EOS, PAD...]
    targets: torch.Tensor  # (B, T) next-token targets
    loss_mask: torch.Tensor  # (B, T) True where the target is a response token
    seg_positions: torch.Tensor  # (B,) index of SEG in ``ids``


def build_text_batch(
    vocab: tc.Vocabulary, instructions: list[str | None], prompt_ids: list[int]
) -> TextBatch:
    rows, resp_starts = [], []
    for instr, pid in zip(instructions, prompt_ids):
        prompt = tc.encode_prompt(vocab, pid)
        resp = tc.encode_response(vocab, instr)
        rows.append([tc.BOS, *prompt, *resp])
        resp_starts.append(1 + len(prompt))
    t = max(len(r) for r in rows)
    ids = np.full((len(rows), t), tc.PAD, dtype=np.int64)
    targets = np.full_like(ids, tc.PAD)
    mask = np.zeros(ids.shape, dtype=bool)
    seg = np.zeros(len(rows), dtype=np.int64)
    for b, (row, start) in enumerate(zip(rows, resp_starts)):
        ids[b, : len(row)] = row
        targets[b, : len(row) - 1] = row[1:]
        # logits at position k predict token k+1; supervise response tokens only
        mask[b, start - 1 : len(row) - 1] = True
        seg[b] = row.index(tc.SEG)
    return TextBatch(torch.from_numpy(ids), torch.from_numpy(targets), torch.from_numpy(mask), torch.from_numpy(seg))
