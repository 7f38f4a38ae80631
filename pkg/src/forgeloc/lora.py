"""Low-rank adapters and the parameter freeze policy."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 32.0
    targets: tuple[str, ...] = ("q", "v")
    init_std: float = 0.02

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("LoRA alpha must be positive")
        self.targets = tuple(self.targets)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoraLinear(nn.Module):
    """``y = base(x) + (alpha / rank) * B (A x)`` with the base layer frozen."""

    def __init__(self, base: nn.Linear, cfg: LoraConfig, generator: torch.Generator | None = None):
        super().__init__()
        out_f, in_f = base.weight.shape
        if cfg.rank > min(out_f, in_f):
            raise ValueError(f"rank {cfg.rank} exceeds min(out, in) = {min(out_f, in_f)}")
        self.base = base
        self.rank = cfg.rank
        self.alpha = cfg.alpha
        self.scale = cfg.alpha / cfg.rank
        w = base.weight
        self.lora_A = nn.Parameter(torch.randn(cfg.rank, in_f, generator=generator, dtype=w.dtype) * cfg.init_std)
        self.lora_B = nn.Parameter(torch.zeros(out_f, cfg.rank, dtype=w.dtype))
        for p in self.base.parameters():
            p.requires_grad_(False)

    @property
    def in_features(self) -> int:
        return self.base.in_features

    @property
    def out_features(self) -> int:
        return self.base.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * ((x @ self.lora_A.T) @ self.lora_B.T)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scale * (self.lora_B @ self.lora_A)

    def merge(self) -> nn.Linear:
        """Plain linear layer equivalent to this adapted one."""
        out = nn.Linear(self.in_features, self.out_features, bias=self.base.bias is not None)
        out = out.to(self.base.weight.dtype)
        with torch.no_grad():
            out.weight.copy_(self.merged_weight())
            if self.base.bias is not None:
                out.bias.copy_(self.base.bias)
        return out


def wrap_linear(base: nn.Linear, cfg: LoraConfig, generator: torch.Generator | None = None) -> LoraLinear:
    return LoraLinear(base, cfg, generator)


def merge(layer: LoraLinear) -> nn.Linear:
    return layer.merge()


def inject_lora(model: nn.Module, cfg: LoraConfig, seed: int = 0) -> list[str]:
    """Replace every ``nn.Linear`` whose attribute name is in ``cfg.targets``.

    Returns the dotted names of the wrapped modules.
    """
    gen = torch.Generator().manual_seed(seed)
    wrapped = []
    for name, module in list(model.named_modules()):
        for attr, child in list(module.named_children()):
            if attr in cfg.targets and isinstance(child, nn.Linear):
                setattr(module, attr, LoraLinear(child, cfg, gen))
                wrapped.append(f"{name}.{attr}" if name else attr)
    if not wrapped:
        raise ValueError(f"no linear layers named {cfg.targets} in model")
    return wrapped


def merge_all(model: nn.Module) -> None:
    """In-place: fold every adapter back into a plain linear layer."""
    for module in list(model.modules()):
        for attr, child in list(module.named_children()):
            if isinstance(child, LoraLinear):
                setattr(module, attr, child.merge())


class FreezePolicyError(ValueError):
    pass


@dataclass
class FreezePolicy:
    frozen: set[str] = field(default_factory=set)
    lora: set[str] = field(default_factory=set)
    full: set[str] = field(default_factory=set)
    scratch: set[str] = field(default_factory=set)

    @property
    def trainable(self) -> set[str]:
        return self.lora | self.full | self.scratch

    def groups(self) -> dict[str, set[str]]:
        return {"frozen": self.frozen, "lora": self.lora, "full": self.full, "scratch": self.scratch}

    def group_of(self, name: str) -> str:
        for g, names in self.groups().items():
            if name in names:
                return g
        raise KeyError(name)

    def validate(self, model: nn.Module) -> None:
        names = {n for n, _ in model.named_parameters()}
        groups = self.groups()
        seen: set[str] = set()
        for g, members in groups.items():
            unknown = members - names
            if unknown:
                raise FreezePolicyError(f"unknown parameter(s) in {g!r}: {sorted(unknown)}")
            overlap = members & seen
            if overlap:
                raise FreezePolicyError(f"parameter(s) in more than one group: {sorted(overlap)}")
            seen |= members
        missing = names - seen
        if missing:
            raise FreezePolicyError(f"parameter(s) not covered by the policy: {sorted(missing)}")


def policy_from_rules(model: nn.Module, rules: list[tuple[str, str]], default: str = "frozen") -> FreezePolicy:
    """Assign each parameter to the group of the first matching name prefix."""
    policy = FreezePolicy()
    groups = policy.groups()
    for name, _ in model.named_parameters():
        for prefix, group in rules:
            if prefix in ("*",) or name == prefix or name.startswith(prefix + ".") or (
                prefix.startswith("*") and name.endswith(prefix[1:])
            ):
                groups[group].add(name)
                break
        else:
            groups[default].add(name)
    return policy


def apply_freeze_policy(model: nn.Module, policy: FreezePolicy) -> list[tuple[str, nn.Parameter]]:
    """Set ``requires_grad`` per the policy and return the trainable view, in model order."""
    policy.validate(model)
    trainable = policy.trainable
    view = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in trainable)
        if name in trainable:
            view.append((name, p))
    return view


def lora_parameter_count(layer: LoraLinear) -> int:
    return layer.lora_A.numel() + layer.lora_B.numel()
