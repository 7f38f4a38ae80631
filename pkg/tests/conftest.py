import pytest
import torch

from forgeloc import text_codec as tc
from forgeloc.dataset_synth import CorpusConfig, build_corpus
from forgeloc.lora import LoraConfig
from forgeloc.model import ForgeryLocalizer
from forgeloc.reasoner import ReasonerConfig
from forgeloc.seg_decoder import SegConfig

INSTRUCTIONS = ["edit dog to cat", "change box to hat", "remove circle to background", "add background to apple"]


@pytest.fixture(scope="session")
def vocab():
    return tc.build_vocab(INSTRUCTIONS)


def micro_model(vocab, setting="D", seed=0, dtype=torch.float64, lora=True, **kw):
    rcfg = ReasonerConfig(d_model=16, n_layers=2, n_heads=2, ffn_mult=2, max_seq=128, patch=8, query_dim=8, seed=seed)
    scfg = SegConfig(patch=4, d_feat=16, n_heads=2, **kw)
    lcfg = LoraConfig(rank=4, alpha=8.0) if lora else None
    return ForgeryLocalizer(len(vocab), rcfg, scfg, lcfg, setting, base_seed=0, dtype=dtype)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    return build_corpus(CorpusConfig(train=8, seen=4, unseen=4, size=32, seed=1), tmp_path_factory.mktemp("corpus"))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
