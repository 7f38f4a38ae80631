import pytest
import torch
from torch import nn

from forgeloc.lora import (
    FreezePolicy,
    FreezePolicyError,
    LoraConfig,
    apply_freeze_policy,
    inject_lora,
    lora_parameter_count,
    merge,
    merge_all,
    policy_from_rules,
    wrap_linear,
)

from .conftest import micro_model


def _linear(out_f, in_f, seed=0):
    torch.manual_seed(seed)
    return nn.Linear(in_f, out_f).double()


def test_default_scale():
    assert LoraConfig().scale == 4.0


def test_fresh_adapter_is_identity():
    base = _linear(6, 5)
    x = torch.randn(10, 5, dtype=torch.float64)
    expected = base(x)
    layer = wrap_linear(base, LoraConfig(rank=2, alpha=4))
    assert torch.equal(layer(x), expected)
    assert torch.all(layer.lora_B == 0)
    assert layer.lora_A.std() > 0


def test_hand_computed_update():
    base = nn.Linear(2, 2, bias=False).double()
    with torch.no_grad():
        base.weight.copy_(torch.eye(2))
    layer = wrap_linear(base, LoraConfig(rank=1, alpha=2.0))  # scale 2
    with torch.no_grad():
        layer.lora_A.copy_(torch.tensor([[1.0, 2.0]]))
        layer.lora_B.copy_(torch.tensor([[0.5], [-1.0]]))
    x = torch.tensor([[3.0, 4.0]], dtype=torch.float64)
    # A x = 11; B (A x) = [5.5, -11]; y = x + 2 * that
    assert torch.allclose(layer(x), torch.tensor([[14.0, -18.0]], dtype=torch.float64))


def test_merge_matches_adapter():
    layer = wrap_linear(_linear(7, 9), LoraConfig(rank=3, alpha=6.0))
    with torch.no_grad():
        layer.lora_B.normal_()
    x = torch.randn(4, 9, dtype=torch.float64)
    assert (merge(layer)(x) - layer(x)).abs().max() < 1e-10


def test_parameter_count():
    layer = wrap_linear(_linear(12, 10), LoraConfig(rank=4))
    assert lora_parameter_count(layer) == 4 * (10 + 12)
    assert all(not p.requires_grad for p in layer.base.parameters())


def test_rank_too_large():
    with pytest.raises(ValueError):
        wrap_linear(_linear(3, 3), LoraConfig(rank=4))
    with pytest.raises(ValueError):
        LoraConfig(rank=0)


def test_inject_targets_only_named_layers(vocab):
    m = micro_model(vocab, lora=False)
    wrapped = inject_lora(m.reasoner.blocks, LoraConfig(rank=2, alpha=4))
    assert sorted(wrapped) == ["0.attn.q", "0.attn.v", "1.attn.q", "1.attn.v"]
    with pytest.raises(ValueError):
        inject_lora(m.reasoner.blocks, LoraConfig(rank=2, targets=("nope",)))


def test_merge_all_restores_plain_linears(vocab):
    m = micro_model(vocab)
    x = torch.rand(2, 32, 32, 3, dtype=torch.float64)
    text = torch.tensor([[1, 6, 7, 5]] * 2)
    with torch.no_grad():
        for name, p in m.named_parameters():
            if ".lora_B" in name:
                p.normal_(std=0.1)
        before = m.reasoner(m.reasoner.encode_image(x), text).logits
        merge_all(m.reasoner)
        after = m.reasoner(m.reasoner.encode_image(x), text).logits
    assert not any("lora" in n for n, _ in m.named_parameters())
    assert (before - after).abs().max() < 1e-10


def test_policy_partitions_parameters(vocab):
    for setting in "ABCD":
        m = micro_model(vocab, setting)
        pol = m.default_policy()
        pol.validate(m)
        names = {n for n, _ in m.named_parameters()}
        assert pol.frozen | pol.trainable == names
        assert all(n in pol.frozen for n in names if n.startswith(("mask_encoder", "reasoner.vision")))
        assert all(pol.group_of(n) == "full" for n in names if n.startswith("mask_decoder"))


def test_setting_a_trains_no_language_parameters(vocab):
    m = micro_model(vocab, "A")
    trainable = {n for n, _ in apply_freeze_policy(m, m.default_policy())}
    assert trainable and not any(n.startswith(("reasoner", "projector")) for n in trainable)
    assert "seg_query" in trainable


def test_policy_errors(vocab):
    m = micro_model(vocab)
    names = {n for n, _ in m.named_parameters()}
    with pytest.raises(FreezePolicyError, match="unknown"):
        FreezePolicy(frozen=names | {"reasoner.blocks.0.attn.qq.weight"}).validate(m)
    first = sorted(names)[0]
    with pytest.raises(FreezePolicyError, match="more than one"):
        FreezePolicy(frozen=set(names), full={first}).validate(m)
    with pytest.raises(FreezePolicyError, match="not covered"):
        FreezePolicy(frozen=names - {first}).validate(m)


def test_policy_rules_first_match_wins(vocab):
    m = micro_model(vocab)
    pol = policy_from_rules(m, [("reasoner.lm_head", "full"), ("reasoner", "frozen"), ("*.lora_A", "lora")])
    assert pol.group_of("reasoner.lm_head.weight") == "full"
    # the reasoner prefix comes first, so its adapters stay frozen
    assert pol.group_of("reasoner.blocks.0.attn.q.lora_A") == "frozen"
