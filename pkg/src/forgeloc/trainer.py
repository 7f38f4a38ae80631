"""Training loop, checkpoints and evaluation.

Batch order and per-sample prompt choice are pure functions of
``(seed, step)``, so a run resumed from any checkpoint replays the same
trace as an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import text_codec as tc
from .dataset_synth import CorpusManifest, EditedSample
from .lora import LoraConfig, apply_freeze_policy
from .losses import LossBreakdown, LossWeights, bce_mask, dice_mask, instruction_ce, total_loss
from .metrics import MetricsReport, evaluate_split
from .model import ForgeryLocalizer, build_text_batch
from .reasoner import ReasonerConfig, extract_seg_embedding
from .seg_decoder import SegConfig, binarize

log = logging.getLogger(__name__)

CKPT_FORMAT = "forgeloc-checkpoint"
CKPT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 3e-5
    weight_decay: float = 0.0
    batch_size: int = 4
    max_steps: int = 1000
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lora: LoraConfig = field(default_factory=LoraConfig)
    eval_every: int = 0
    precision: str = "single"
    setting: str = "D"
    prompt: int | str = 1  # prompt id 1-4 or "random"
    base_seed: int = 0
    checkpoint_every: int = 0
    reasoner: ReasonerConfig = field(default_factory=ReasonerConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    max_new_tokens: int = 24

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        if self.prompt != "random" and int(self.prompt) not in tc.PROMPTS:
            raise ValueError(f"unknown prompt {self.prompt!r}")
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.lora, dict):
            self.lora = LoraConfig(**self.lora)
        if isinstance(self.reasoner, dict):
            self.reasoner = ReasonerConfig(**self.reasoner)
        if isinstance(self.seg, dict):
            self.seg = SegConfig(**self.seg)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "double" else torch.float32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora"]["targets"] = list(d["lora"]["targets"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def effective_weights(self) -> LossWeights:
        if self.setting == "D":
            return self.loss_weights
        # no instruction target outside setting D
        return dataclasses.replace(self.loss_weights, lambda_c=0.0)


# ----------------------------------------------------------------------


def stack_samples(samples: list[EditedSample], dtype=torch.float32):
    images = torch.as_tensor(np.stack([s.image for s in samples]), dtype=dtype)
    masks = torch.as_tensor(np.stack([s.mask for s in samples]), dtype=dtype)
    return images, masks


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Epoch-wise shuffled indices for ``step``; stateless."""
    bs = min(batch_size, n)
    out = []
    pos = step * bs
    while len(out) < bs:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([seed, 7, epoch]).permutation(n)
        take = min(bs - len(out), n - offset)
        out.extend(perm[offset : offset + take].tolist())
        pos += take
    return np.asarray(out)


TRAIN_STREAM, EVAL_STREAM = 11, 13


def prompt_ids_for(prompt, n: int, seed: int, step: int, stream: int = TRAIN_STREAM) -> list[int]:
    """Prompt id per sample; random mode draws from a stream keyed by ``(seed, step)``."""
    if prompt == "random":
        rng = np.random.default_rng([seed, stream, step])
        return [int(i) + 1 for i in rng.integers(0, len(tc.PROMPTS), size=n)]
    return [int(prompt)] * n


def compute_loss(model: ForgeryLocalizer, images, masks, text_batch, weights: LossWeights) -> LossBreakdown:
    text = text_batch.ids if text_batch is not None else None
    seg = text_batch.seg_positions if text_batch is not None else None
    logits, mask_logits = model(images, text, seg)
    if logits is not None and model.setting.predicts_instruction:
        l_c = instruction_ce(logits, text_batch.targets, text_batch.loss_mask)
    elif logits is not None:
        with torch.no_grad():
            l_c = instruction_ce(logits, text_batch.targets, text_batch.loss_mask)
    else:
        l_c = torch.zeros((), dtype=mask_logits.dtype)
    l_bce = bce_mask(mask_logits, masks)
    l_dice = dice_mask(mask_logits, masks)
    return total_loss(l_c, l_bce, l_dice, weights)


class Trainer:
    def __init__(
        self, cfg: TrainConfig, vocab: tc.Vocabulary, train: list[EditedSample] | None, corpus_hash: str = ""
    ):
        """``train=None`` builds an evaluation-only trainer that cannot step."""
        if train is not None and not train:
            raise ValueError("empty training split")
        self.cfg = cfg
        self.vocab = vocab
        self.corpus_hash = corpus_hash
        self.samples = train or []
        self.images, self.masks = stack_samples(train, cfg.dtype) if train else (None, None)
        rcfg = dataclasses.replace(cfg.reasoner, seed=cfg.seed)
        self.model = ForgeryLocalizer(
            len(vocab), rcfg, cfg.seg, cfg.lora, cfg.setting, base_seed=cfg.base_seed, dtype=cfg.dtype
        )
        self.policy = self.model.default_policy()
        self.trainable = apply_freeze_policy(self.model, self.policy)
        self.optimizer = torch.optim.AdamW(
            [p for _, p in self.trainable],
            lr=cfg.learning_rate,
            betas=(0.9, 0.999),
            eps=1e-8,
            weight_decay=cfg.weight_decay,
        )
        self.step = 0
        self.history: list[dict] = []

    def text_batch(self, idx: np.ndarray, step: int):
        if not self.model.setting.uses_prompt:
            return None
        instr = [self.samples[i].instruction if self.model.setting.predicts_instruction else None for i in idx]
        return build_text_batch(self.vocab, instr, prompt_ids_for(self.cfg.prompt, len(idx), self.cfg.seed, step))

    def train_step(self, idx: np.ndarray | None = None) -> LossBreakdown:
        if not self.samples:
            raise RuntimeError("trainer was built without training data")
        if idx is None:
            idx = batch_indices(len(self.samples), self.cfg.batch_size, self.cfg.seed, self.step)
        if len(idx) == 0:
            raise ValueError("empty batch")
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        losses = compute_loss(
            self.model, self.images[idx], self.masks[idx], self.text_batch(idx, self.step), self.cfg.effective_weights()
        )
        if not torch.isfinite(losses.total):
            raise TrainingDivergedError(f"non-finite loss at step {self.step}: {losses.as_floats()}")
        losses.total.backward()
        self.optimizer.step()
        self.step += 1
        rec = {"step": self.step, **losses.as_floats()}
        self.history.append(rec)
        return losses

    # ------------------------------------------------------------------
    # checkpoints

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for name, p in self.model.named_parameters():
            ns = "lora" if ".lora_" in name else "param"
            arrays[f"{ns}/{name}"] = p.detach().cpu().numpy()
        names = {id(p): n for n, p in self.trainable}
        for p, st in self.optimizer.state.items():
            n = names[id(p)]
            for k, v in st.items():
                arrays[f"optim/{n}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
        return arrays

    def meta(self) -> dict:
        return {
            "format": CKPT_FORMAT,
            "version": CKPT_VERSION,
            "step": self.step,
            "train_config": self.cfg.to_dict(),
            "vocab": list(self.vocab.tokens),
            "vocab_hash": self.vocab.digest(),
            "corpus_hash": self.corpus_hash,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = self.state_arrays()
        arrays["__meta__"] = np.frombuffer(json.dumps(self.meta(), sort_keys=True).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        path.write_bytes(buf.getvalue())
        return path

    def load_state(self, arrays: dict[str, np.ndarray], step: int) -> None:
        with torch.no_grad():
            for name, p in self.model.named_parameters():
                ns = "lora" if ".lora_" in name else "param"
                p.copy_(torch.as_tensor(arrays[f"{ns}/{name}"]))
        for name, p in self.trainable:
            keys = [k for k in arrays if k.startswith(f"optim/{name}/")]
            if keys:
                self.optimizer.state[p] = {
                    k.rsplit("/", 1)[1]: torch.as_tensor(arrays[k]).clone() for k in keys
                }
        self.step = step


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path} is not a {CKPT_FORMAT} file")
    if meta.get("version") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    return meta, arrays


def load_checkpoint(path, train: list[EditedSample] | None = None) -> Trainer:
    meta, arrays = read_checkpoint(path)
    cfg = TrainConfig.from_dict(meta["train_config"])
    vocab = tc.Vocabulary(tuple(meta["vocab"]))
    if vocab.digest() != meta["vocab_hash"]:
        raise ValueError("vocabulary hash mismatch in checkpoint")
    trainer = Trainer(cfg, vocab, train, meta.get("corpus_hash", ""))
    trainer.load_state(arrays, meta["step"])
    return trainer


# ----------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict(
    model: ForgeryLocalizer,
    vocab: tc.Vocabulary,
    samples: list[EditedSample],
    prompt=1,
    seed: int = 0,
    max_new: int = 24,
    batch_size: int = 16,
) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Masks keyed by sample id, plus per-sample text records."""
    model.eval()
    dtype = model.dtype
    preds: dict[str, np.ndarray] = {}
    records: list[dict] = []
    s = model.setting
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images, _ = stack_samples(chunk, dtype)
        visual, grid = model.encode_images(images)
        if not s.uses_prompt:
            query = model.query_from(visual, None, None)
            recs = [{"id": x.id} for x in chunk]
        elif not s.predicts_instruction:
            pids = prompt_ids_for(prompt, len(chunk), seed, start, EVAL_STREAM)
            tb = build_text_batch(vocab, [None] * len(chunk), pids)
            states = model.reasoner(visual, tb.ids)
            query = model.query_from(visual, states, tb.seg_positions)
            recs = [{"id": x.id, "seg_missing": False} for x in chunk]
        else:
            pids = prompt_ids_for(prompt, len(chunk), seed, start, EVAL_STREAM)
            hs, recs = [], []
            for k, x in enumerate(chunk):
                prompt_tokens = tc.encode_prompt(vocab, pids[k])
                out, states = model.reasoner.generate(visual[k : k + 1], prompt_tokens, max_new)
                try:
                    seg_in_resp, instr = tc.parse_response(out, vocab)
                    seg_pos = 1 + len(prompt_tokens) + seg_in_resp
                except tc.SegMissingError:
                    seg_pos, instr = None, ""
                h, missing = extract_seg_embedding(states, seg_pos)
                hs.append(h)
                recs.append(
                    {
                        "id": x.id,
                        "response": tc.decode(out, vocab),
                        "instruction": instr,
                        "target": x.instruction,
                        "seg_missing": missing,
                        **_token_accuracy(instr, x.instruction, vocab),
                    }
                )
            query = model.projector(torch.stack(hs))
        logits = model.mask_decoder(grid, query, images.shape[1:3])
        for x, m in zip(chunk, binarize(logits)):
            preds[x.id] = m
        records.extend(recs)
    return preds, records


def _token_accuracy(pred: str, target: str, vocab: tc.Vocabulary) -> dict:
    p = tc.encode(pred, vocab).ids
    t = tc.encode(target, vocab).ids
    correct = sum(1 for a, b in zip(p, t) if a == b)
    return {"tokens_correct": correct, "tokens_total": len(t), "exact_match": p == t}


def evaluate(
    trainer: Trainer, samples: list[EditedSample], split: str = "", mode: str = "per-image"
) -> tuple[MetricsReport, dict[str, np.ndarray], list[dict]]:
    cfg = trainer.cfg
    preds, recs = predict(trainer.model, trainer.vocab, samples, cfg.prompt, cfg.seed, cfg.max_new_tokens)
    report = evaluate_split(preds, {s.id: s.mask for s in samples}, split, mode)
    extra: dict = {"setting": cfg.setting, "prompt": cfg.prompt, "step": trainer.step}
    if trainer.model.setting.uses_prompt:
        extra["seg_missing_rate"] = float(np.mean([r["seg_missing"] for r in recs]))
    if trainer.model.setting.predicts_instruction:
        total = sum(r["tokens_total"] for r in recs)
        extra["instruction_token_accuracy"] = sum(r["tokens_correct"] for r in recs) / max(total, 1)
        extra["instruction_exact_match"] = float(np.mean([r["exact_match"] for r in recs]))
    report.extra = extra
    return report, preds, recs


def report_digest(report: MetricsReport) -> str:
    return hashlib.sha256(json.dumps(report.to_dict(), sort_keys=True).encode()).hexdigest()


def write_predictions(out_dir, preds: dict[str, np.ndarray], report: MetricsReport, recs: list[dict]) -> None:
    out = Path(out_dir)
    (out / "pred_masks").mkdir(parents=True, exist_ok=True)
    for sid, m in preds.items():
        Image.fromarray((m * 255).astype(np.uint8)).save(out / "pred_masks" / f"{sid}.png", format="PNG")
    by_id = {r["id"]: r for r in recs}
    with open(out / "predictions.jsonl", "w") as fh:
        for m in report.per_image:
            fh.write(json.dumps({**asdict(m), **by_id.get(m.id, {})}, sort_keys=True) + "\n")


# ----------------------------------------------------------------------


def fit(
    cfg: TrainConfig,
    corpus: CorpusManifest,
    out_dir=None,
    resume=None,
    vocab: tc.Vocabulary | None = None,
    train_split: str = "train",
    eval_split: str = "seen",
) -> Trainer:
    """Train for ``cfg.max_steps`` steps; returns the trainer at the final step.

    With ``out_dir`` set, writes ``config.json``, ``vocab.json``,
    ``train_log.jsonl`` (one LossBreakdown per step), ``eval_log.jsonl`` and
    checkpoints (``last.ckpt`` plus ``step_XXXXXX.ckpt`` every
    ``checkpoint_every`` steps).
    """
    if train_split not in corpus.splits:
        raise KeyError(f"corpus has no {train_split!r} split")
    train = corpus.load(train_split)
    evalset = corpus.load(eval_split) if cfg.eval_every and eval_split in corpus.splits else []
    vocab = vocab or tc.build_vocab(corpus)
    if resume is not None:
        trainer = load_checkpoint(resume, train)
        if trainer.cfg.to_dict() != cfg.to_dict():
            raise ValueError("resume checkpoint was written with a different TrainConfig")
        vocab = trainer.vocab
    else:
        trainer = Trainer(cfg, vocab, train, corpus.digest())

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "vocab.json").write_text(vocab.to_json() + "\n")
        mode = "a" if resume is not None else "w"
        if resume is not None:
            _truncate_log(out / "train_log.jsonl", trainer.step)
            _truncate_log(out / "eval_log.jsonl", trainer.step)
        train_log = open(out / "train_log.jsonl", mode)
        eval_log = open(out / "eval_log.jsonl", mode)
    t0 = time.time()
    try:
        while trainer.step < cfg.max_steps:
            try:
                trainer.train_step()
            except TrainingDivergedError:
                if out is not None:
                    dump = {"step": trainer.step, "config": cfg.to_dict(), "recent": trainer.history[-20:]}
                    (out / "divergence.json").write_text(json.dumps(dump, indent=2))
                raise
            if out is not None:
                train_log.write(json.dumps(trainer.history[-1], sort_keys=True) + "\n")
            if cfg.eval_every and evalset and trainer.step % cfg.eval_every == 0:
                rep, _, _ = evaluate(trainer, evalset, eval_split)
                rec = {"step": trainer.step, "split": eval_split, **rep.aggregate, **rep.extra}
                log.info("step %d eval %s", trainer.step, rec)
                if out is not None:
                    eval_log.write(json.dumps(rec, sort_keys=True) + "\n")
            if out is not None and cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                trainer.save(out / f"step_{trainer.step:06d}.ckpt")
    finally:
        if out is not None:
            train_log.close()
            eval_log.close()
    if out is not None:
        trainer.save(out / "last.ckpt")
    log.info("fit finished %d steps in %.1fs", trainer.step, time.time() - t0)
    return trainer


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [l for l in path.read_text().splitlines() if l.strip() and json.loads(l)["step"] <= step]
    path.write_text("".join(l + "\n" for l in keep))
