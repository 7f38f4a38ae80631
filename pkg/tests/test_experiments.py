import json

import pytest

from forgeloc import experiments as ex
from forgeloc.cli import main

from .test_trainer import micro_cfg


def test_ablation_report_is_complete_and_regenerable(tiny_corpus, tmp_path):
    rep = ex.run_ablation("ABCD", micro_cfg(max_steps=2), tiny_corpus, n_seeds=2, out_dir=tmp_path / "abl")
    assert len(rep.runs) == 8
    assert {(r.label, r.seed) for r in rep.runs} == {(s, k) for s in "ABCD" for k in (0, 1)}
    s = rep.summary()
    assert set(s) == set("ABCD") and all(s[k]["seen"]["n_runs"] == 2 for k in s)
    d = json.loads((tmp_path / "abl" / "report.json").read_text())
    assert d["reference"]["label"] == "paper, not reproduced"
    assert d["reference"]["values"]["D"] == [23.77, 33.19]
    again = ex.load_report(tmp_path / "abl")
    assert again.summary() == s
    md = (tmp_path / "abl" / "report.md").read_text()
    assert "| D | yes | yes | yes |" in md and "paper, not reproduced" in md


def test_ablation_rejects_bad_input(tiny_corpus):
    with pytest.raises(ValueError):
        ex.run_ablation([], micro_cfg(), tiny_corpus)
    with pytest.raises(ValueError):
        ex.run_ablation(["E"], micro_cfg(), tiny_corpus)


def test_prompt_sweep_has_five_rows(tiny_corpus):
    rep = ex.run_prompt_sweep(micro_cfg(max_steps=1), tiny_corpus)
    assert [r.label for r in rep.runs] == ["prompt1", "prompt2", "prompt3", "prompt4", "promptrandom"]
    md = rep.to_markdown()
    assert "Randomly choose" in md and md.count("\n| ") >= 5


def test_generalization_reports_both_splits_and_gap(tiny_corpus, tmp_path):
    rep = ex.run_generalization(micro_cfg(max_steps=2), tiny_corpus, out_dir=tmp_path / "gen")
    s = rep.summary()["D"]
    assert set(s) == {"seen", "unseen"}
    gap = rep.gap()
    assert gap["miou"] == pytest.approx(s["seen"]["miou"] - s["unseen"]["miou"])
    assert "gap" in json.loads((tmp_path / "gen" / "report.json").read_text())


def test_report_command(tiny_corpus, tmp_path, capsys):
    ex.run_generalization(micro_cfg(max_steps=1), tiny_corpus, out_dir=tmp_path / "gen")
    capsys.readouterr()
    assert main(["report", "--runs", str(tmp_path / "gen"), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["kind"] == "generalization"
    assert main(["report", "--runs", str(tmp_path / "gen")]) == 0
    assert "Gap (seen minus unseen)" in capsys.readouterr().out
