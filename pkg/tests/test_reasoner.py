import numpy as np
import pytest
import torch
from torch import nn

from forgeloc import text_codec as tc
from forgeloc.reasoner import (
    CapacityError,
    HiddenStates,
    QueryProjector,
    Reasoner,
    ReasonerConfig,
    attention_layout,
    extract_seg_embedding,
    forensic_channels,
    sincos_2d,
)


def _reasoner(vocab, **kw):
    torch.manual_seed(0)
    cfg = ReasonerConfig(d_model=16, n_heads=2, **kw)
    return Reasoner(cfg, len(vocab)).double()


def _text(vocab, instr="edit dog to cat"):
    ids = [tc.BOS, *tc.encode_prompt(vocab, 1), *tc.encode_response(vocab, instr)]
    return torch.tensor([ids])


def test_config_validation():
    with pytest.raises(ValueError):
        ReasonerConfig(d_model=10, n_heads=4)


def test_visual_token_shape():
    r = Reasoner(ReasonerConfig(), 40)
    assert r.encode_image(torch.rand(2, 64, 64, 3)).shape == (2, 64, 64)
    with pytest.raises(ValueError):
        r.encode_image(torch.rand(1, 60, 64, 3))


def test_zero_image_gives_bias_plus_position_code():
    r = Reasoner(ReasonerConfig(), 40).double()
    tokens = r.encode_image(torch.zeros(1, 32, 32, 3, dtype=torch.float64))[0]
    expected = r.vision.proj.bias + sincos_2d(4, 4, 64, torch.float64)
    assert torch.allclose(tokens, expected, atol=1e-14)


def test_forensic_channels_of_flat_image_are_zero():
    img = torch.full((1, 8, 8, 3), 0.3, dtype=torch.float64)
    out = forensic_channels(img)
    assert out.shape == (1, 8, 8, 6)
    assert torch.equal(out[..., :3], img) and torch.all(out[..., 3:].abs() < 1e-12)


def test_forward_shapes_and_capacity(vocab):
    r = _reasoner(vocab, max_seq=60)
    vis = r.encode_image(torch.rand(1, 32, 32, 3, dtype=torch.float64))
    text = _text(vocab)
    st = r(vis, text)
    assert st.logits.shape == (1, text.shape[1], len(vocab))
    assert st.hidden.shape == (1, 16 + text.shape[1], 16)
    with pytest.raises(CapacityError):
        r(r.encode_image(torch.rand(1, 64, 64, 3, dtype=torch.float64)), text)


def test_attention_layout():
    a = attention_layout(2, 3)
    assert a[:2, :2].all() and not a[:2, 2:].any()
    assert a[2:, :2].all()
    assert torch.equal(a[2:, 2:], torch.tril(torch.ones(3, 3, dtype=torch.bool)))


def test_permuting_visual_tokens_leaves_text_unchanged(vocab):
    r = _reasoner(vocab)
    vis = r.encode_image(torch.rand(1, 32, 32, 3, dtype=torch.float64))
    perm = torch.randperm(vis.shape[1], generator=torch.Generator().manual_seed(3))
    text = _text(vocab)
    with torch.no_grad():
        a = r(vis, text).logits
        b = r(vis[:, perm], text).logits
    assert (a - b).abs().max() < 1e-12


def test_zero_weights_give_uniform_logits(vocab):
    r = _reasoner(vocab)
    with torch.no_grad():
        for p in r.parameters():
            p.zero_()
    vis = r.encode_image(torch.rand(1, 32, 32, 3, dtype=torch.float64))
    logits = r(vis, _text(vocab)).logits
    assert torch.all(logits == logits[..., :1])


def test_causality(vocab):
    r = _reasoner(vocab)
    vis = r.encode_image(torch.rand(1, 32, 32, 3, dtype=torch.float64))
    text = _text(vocab)
    t = text.shape[1] - 3
    other = text.clone()
    other[0, t] = tc.UNK
    with torch.no_grad():
        a, b = r(vis, text).logits, r(vis, other).logits
    assert torch.equal(a[:, :t], b[:, :t])
    assert not torch.equal(a[:, t:], b[:, t:])


def test_visual_tokens_matter(vocab):
    r = _reasoner(vocab)
    vis = r.encode_image(torch.rand(1, 32, 32, 3, dtype=torch.float64))
    with torch.no_grad():
        assert not torch.allclose(r(vis, _text(vocab)).logits, r(torch.zeros_like(vis), _text(vocab)).logits)


def test_forward_is_deterministic(vocab):
    r = _reasoner(vocab)
    vis = r.encode_image(torch.rand(1, 32, 32, 3, dtype=torch.float64))
    assert torch.equal(r(vis, _text(vocab)).logits, r(vis, _text(vocab)).logits)


def test_generate_respects_max_new(vocab):
    r = _reasoner(vocab)
    vis = r.encode_image(torch.rand(1, 32, 32, 3, dtype=torch.float64))
    prompt = tc.encode_prompt(vocab, 1)
    out, states = r.generate(vis, prompt, max_new=4)
    assert 1 <= len(out) <= 4
    assert states.logits.shape[1] == 1 + len(prompt) + len(out)
    with pytest.raises(ValueError):
        r.generate(vis, prompt, max_new=0)


def test_untrained_generation_falls_back_when_seg_missing(vocab):
    r = _reasoner(vocab)
    vis = r.encode_image(torch.rand(1, 32, 32, 3, dtype=torch.float64))
    out, states = r.generate(vis, tc.encode_prompt(vocab, 1), max_new=4)
    try:
        seg, _ = tc.parse_response(out, vocab)
        pos = 1 + len(tc.encode_prompt(vocab, 1)) + seg
    except tc.SegMissingError:
        pos = None
    h, flag = extract_seg_embedding(states, pos)
    assert h.shape == (16,) and flag == (pos is None)


def test_extract_seg_embedding():
    hidden = torch.arange(2 * 5 * 3, dtype=torch.float64).view(2, 5, 3)
    st = HiddenStates(hidden, torch.zeros(2, 3, 7), n_visual=2)
    h, flag = extract_seg_embedding(st, 1, batch_index=1)
    assert torch.equal(h, hidden[1, 3]) and not flag
    h, flag = extract_seg_embedding(st, None)
    assert torch.equal(h, hidden[0, 4]) and flag
    with pytest.raises(IndexError):
        extract_seg_embedding(st, 3)


def test_projector_zero_input_with_zero_second_layer():
    torch.manual_seed(0)
    p = QueryProjector(16, 8).double()
    nn.init.zeros_(p.fc2.weight)
    assert torch.equal(p(torch.zeros(16, dtype=torch.float64)), p.fc2.bias)
    with pytest.raises(ValueError):
        p(torch.zeros(15, dtype=torch.float64))


def test_projector_gradient_matches_finite_differences():
    torch.manual_seed(1)
    p = QueryProjector(6, 4).double()
    h = torch.randn(3, 6, dtype=torch.float64)
    target = torch.randn(3, 4, dtype=torch.float64)

    def loss():
        return ((p(h) - target) ** 2).sum()

    loss().backward()
    eps = 1e-5
    worst = 0.0
    with torch.no_grad():
        for param in p.parameters():
            flat = param.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = float(loss())
                flat[i] = old - eps
                down = float(loss())
                flat[i] = old
                fd = (up - down) / (2 * eps)
                an = float(param.grad.view(-1)[i])
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    assert worst < 1e-4


def test_sincos_shape_and_range():
    pe = sincos_2d(3, 5, 16)
    assert pe.shape == (15, 16)
    assert np.all(np.abs(pe.numpy()) <= 1.0)
