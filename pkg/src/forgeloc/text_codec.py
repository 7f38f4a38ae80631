"""Word-level tokenizer and the fixed prompt / response templates."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .dataset_synth import BACKGROUND, NOUNS, VERBS

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, IMG, SEG = 0, 1, 2, 3, 4, 5
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>", "<img>", "[SEG]")
SEG_TEXT = "[SEG]"
MAX_VOCAB = 512

PROMPTS = {
    1: "Can you segment the edited region and give the instruction used to edit this image.",
    2: "Could you segment the modified regions and provide a detailed explanation of the editing process?",
    3: (
        "Please analyze this image for any signs of editing. If the image has been edited, identify and "
        "segment the edited portions, and outline the steps taken to achieve the edits."
    ),
    4: (
        "Can you determine if this image has been manipulated? If so, please highlight the altered areas "
        "and describe the techniques used to modify the image."
    ),
}
RESPONSE_PREFIX = "The edited region is [SEG], and the edit instruction used is"

_WORD = re.compile(r"\[seg\]|[a-z0-9<>]+")


class SegMissingError(ValueError):
    """The response contains no [SEG] token."""


def normalize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split into words; ``[SEG]`` survives."""
    return _WORD.findall(text.lower())


def render_prompt(prompt_id: int = 1) -> str:
    if prompt_id not in PROMPTS:
        raise ValueError(f"unknown prompt id {prompt_id}; choose from {sorted(PROMPTS)}")
    return PROMPTS[prompt_id]


def render_response(instruction: str | None) -> str:
    """Template response; ``None`` gives the bare ``[SEG]`` response used without instruction prediction."""
    if instruction is None:
        return SEG_TEXT
    if not instruction.strip():
        raise ValueError("instruction must be non-empty")
    return f"{RESPONSE_PREFIX} {instruction}"


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("special tokens must occupy the first ids")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if len(self.tokens) > MAX_VOCAB:
            raise ValueError(f"vocabulary larger than {MAX_VOCAB}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        if word == "[seg]":
            return SEG
        return self._index.get(word, UNK)

    def to_json(self) -> str:
        specials = dict(zip(("pad", "bos", "eos", "unk", "img", "seg"), range(6)))
        return json.dumps({"version": 1, "specials": specials, "tokens": list(self.tokens)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(tuple(json.loads(text)["tokens"]))

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]


@dataclass
class TokenSequence:
    ids: list[int]
    segments: list[str]  # "prompt" or "response" per position

    def __len__(self) -> int:
        return len(self.ids)


def build_vocab(corpus) -> Vocabulary:
    """Vocabulary over every instruction, prompt and template word.

    ``corpus`` is a ``CorpusManifest`` or any iterable of instruction strings.
    Ordering is fixed: specials, then words sorted lexicographically.
    """
    instructions = list(corpus.instructions() if hasattr(corpus, "instructions") else corpus)
    if not instructions:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words: set[str] = set()
    for text in [*instructions, *PROMPTS.values(), RESPONSE_PREFIX]:
        words.update(normalize(text))
    # the synthetic generator's closed vocabularies, so held-out splits never hit <unk>
    words.update(NOUNS)
    words.update(VERBS)
    words.update({BACKGROUND, "to", "with", "a", "an"})
    words.discard("[seg]")
    words -= set(SPECIALS)
    return Vocabulary(SPECIALS + tuple(sorted(words)))


def encode(text: str, vocab: Vocabulary, segment: str = "prompt") -> TokenSequence:
    ids = [vocab.id(w) for w in normalize(text)]
    return TokenSequence(ids, [segment] * len(ids))


def decode(ids: Sequence[int] | TokenSequence, vocab: Vocabulary) -> str:
    if isinstance(ids, TokenSequence):
        ids = ids.ids
    words = []
    for i in ids:
        i = int(i)
        if i in (PAD, BOS, EOS):
            continue
        words.append(vocab.tokens[i] if 0 <= i < len(vocab) else "<unk>")
    return " ".join(words)


def encode_prompt(vocab: Vocabulary, prompt_id: int = 1) -> list[int]:
    ids = encode(render_prompt(prompt_id), vocab).ids
    assert SEG not in ids
    return ids


def encode_response(vocab: Vocabulary, instruction: str | None) -> list[int]:
    """Response ids terminated by EOS."""
    return encode(render_response(instruction), vocab, "response").ids + [EOS]


def parse_response(ids: Sequence[int] | TokenSequence, vocab: Vocabulary) -> tuple[int, str]:
    """Index of the first SEG id and the decoded instruction after ``... used is``."""
    if isinstance(ids, TokenSequence):
        ids = ids.ids
    ids = [int(i) for i in ids]
    positions = [k for k, i in enumerate(ids) if i == SEG]
    if not positions:
        raise SegMissingError("no [SEG] token in response")
    if len(positions) > 1:
        log.warning("response has %d [SEG] tokens; using the first", len(positions))
    seg = positions[0]
    if EOS in ids:
        ids = ids[: ids.index(EOS)]
    tail = ids[seg + 1 :]
    is_id = vocab.id("is")
    if is_id in tail:
        tail = tail[tail.index(is_id) + 1 :]
    else:
        tail = []
    return seg, decode(tail, vocab)
