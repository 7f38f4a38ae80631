import logging

import pytest
from hypothesis import given, strategies as st

from forgeloc import text_codec as tc
from forgeloc.dataset_synth import NOUNS


@pytest.fixture(scope="module")
def vocab():
    return tc.build_vocab(["edit dog to cat", "replace an apple with an orange"])


def test_vocab_contains_instruction_and_template_words(vocab):
    for w in ("edit", "dog", "to", "cat", "segment", "region", "instruction", "used"):
        assert vocab.id(w) != tc.UNK
    assert vocab.tokens[: len(tc.SPECIALS)] == tc.SPECIALS
    assert len(vocab) <= tc.MAX_VOCAB


def test_vocab_is_deterministic():
    a = tc.build_vocab(["edit dog to cat"])
    b = tc.build_vocab(["edit dog to cat"])
    assert a == b and a.digest() == b.digest()
    assert list(a.tokens[6:]) == sorted(a.tokens[6:])


def test_vocab_rejects_empty_corpus():
    with pytest.raises(ValueError):
        tc.build_vocab([])


def test_vocab_json_round_trip(vocab):
    assert tc.Vocabulary.from_json(vocab.to_json()) == vocab


def test_prompts():
    assert tc.render_prompt() == "Can you segment the edited region and give the instruction used to edit this image."
    assert tc.render_prompt(2) == (
        "Could you segment the modified regions and provide a detailed explanation of the editing process?"
    )
    assert tc.render_prompt(4).startswith("Can you determine if this image has been manipulated?")
    with pytest.raises(ValueError):
        tc.render_prompt(9)


def test_render_response():
    assert tc.render_response("put party hat on dog") == (
        "The edited region is [SEG], and the edit instruction used is put party hat on dog"
    )
    assert tc.render_response("edit dog to cat").endswith("used is edit dog to cat")
    with pytest.raises(ValueError):
        tc.render_response("")


def test_encode_decode(vocab):
    seq = tc.encode("edit dog to cat", vocab)
    assert tc.decode(seq, vocab) == "edit dog to cat"
    assert tc.encode("[SEG]", vocab).ids == [tc.SEG]
    oov = tc.encode("edit zebra", vocab)
    assert oov.ids[1] == tc.UNK
    assert tc.decode(oov, vocab) == "edit <unk>"


@given(st.lists(st.sampled_from(NOUNS + ("to", "edit", "with", "an")), min_size=1, max_size=8))
def test_encode_decode_identity_in_vocab(words):
    vocab = tc.build_vocab(["edit dog to cat"])
    text = " ".join(words)
    assert tc.decode(tc.encode(text, vocab), vocab) == text


def test_prompts_never_contain_seg(vocab):
    for pid in tc.PROMPTS:
        assert tc.SEG not in tc.encode_prompt(vocab, pid)


def test_parse_response(vocab):
    ids = tc.encode(tc.render_response("edit dog to cat"), vocab).ids
    pos, instr = tc.parse_response(ids, vocab)
    assert ids[pos] == tc.SEG and pos == 4
    assert instr == "edit dog to cat"


def test_parse_response_without_seg(vocab):
    with pytest.raises(tc.SegMissingError):
        tc.parse_response(tc.encode("edit dog to cat", vocab).ids, vocab)


def test_parse_response_two_segs_uses_first(vocab, caplog):
    ids = tc.encode("the edited region is", vocab).ids + [tc.SEG, tc.SEG]
    ids += tc.encode("and the edit instruction used is edit dog to cat", vocab).ids + [tc.EOS]
    with caplog.at_level(logging.WARNING):
        pos, instr = tc.parse_response(ids, vocab)
    assert pos == 4
    assert instr == "edit dog to cat"
    assert "2 [SEG]" in caplog.text
