"""Experiment harness: component ablation, prompt sweep, seen/unseen comparison.

Every run lives in its own directory under the experiment root with the
usual ``fit`` artifacts plus ``eval_<split>/`` holding ``report.json``,
``pred_masks/`` and ``predictions.jsonl``. ``experiment.json`` at the root
lists the runs, so :func:`load_report` rebuilds the summary from disk alone.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import text_codec as tc
from .dataset_synth import CorpusManifest
from .metrics import MetricsReport
from .model import ABLATIONS, SETTINGS
from .trainer import TrainConfig, evaluate, fit, write_predictions

# Published numbers, shown only as context next to toy-scale results.
PAPER_ABLATION = {"A": (5.96, 9.83), "B": (14.94, 21.98), "C": (22.23, 31.55), "D": (23.77, 33.19)}
PAPER_PROMPTS = {"1": (23.77, 33.19), "2": (20.20, 28.69), "3": (19.90, 28.35), "4": (19.27, 27.46), "random": (19.32, 31.54)}
PAPER_GENERALIZATION = {
    "full system": {"seen": 23.77, "unseen": 22.55},
    "CAT-Net": {"seen": 30.47, "unseen": 3.67},
}
REFERENCE_LABEL = "paper, not reproduced"

SUMMARY_FIELDS = ("miou", "f1", "iou_edited", "precision", "recall")


@dataclass
class RunRecord:
    label: str  # setting id, prompt id, or "D"
    seed: int
    run_dir: str
    runtime_s: float
    reports: dict[str, dict] = field(default_factory=dict)  # split -> MetricsReport.to_dict()


@dataclass
class ExperimentReport:
    kind: str  # ablation | prompt_sweep | generalization
    runs: list[RunRecord]
    seeds: list[int]
    runtime_s: float
    notes: list[str] = field(default_factory=list)

    def summary(self) -> dict[str, dict[str, dict[str, float]]]:
        """Mean aggregate metrics per label and split across seeds."""
        out: dict[str, dict[str, dict[str, float]]] = {}
        for label in dict.fromkeys(r.label for r in self.runs):
            runs = [r for r in self.runs if r.label == label]
            out[label] = {}
            for split in runs[0].reports:
                vals = {
                    k: float(np.mean([r.reports[split]["aggregate"][k] for r in runs])) for k in SUMMARY_FIELDS
                }
                vals["n_runs"] = len(runs)
                out[label][split] = vals
        return out

    def gap(self) -> dict[str, float] | None:
        """Seen minus unseen mean mIoU/F1 (generalization reports only)."""
        s = self.summary()
        for label in s:
            if {"seen", "unseen"} <= set(s[label]):
                return {k: s[label]["seen"][k] - s[label]["unseen"][k] for k in ("miou", "f1")}
        return None

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "seeds": self.seeds,
            "runtime_s": self.runtime_s,
            "notes": self.notes,
            "runs": [dataclasses.asdict(r) for r in self.runs],
            "summary": self.summary(),
            "reference": _reference(self.kind),
        }
        if self.kind == "generalization":
            d["gap"] = self.gap()
        return d

    def to_markdown(self) -> str:
        return render_markdown(self)

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "report.md").write_text(self.to_markdown())


def _reference(kind: str) -> dict:
    table = {"ablation": PAPER_ABLATION, "prompt_sweep": PAPER_PROMPTS, "generalization": PAPER_GENERALIZATION}[kind]
    return {"label": REFERENCE_LABEL, "values": table}


# ----------------------------------------------------------------------
# running


def _run(
    cfg: TrainConfig, corpus: CorpusManifest, label: str, splits: list[str], root: Path | None, vocab
) -> RunRecord:
    t0 = time.time()
    run_dir = root / f"{label}_seed{cfg.seed}" if root is not None else None
    trainer = fit(cfg, corpus, run_dir, vocab=vocab)
    reports = {}
    for split in splits:
        rep, preds, recs = evaluate(trainer, corpus.load(split), split)
        reports[split] = rep.to_dict()
        if run_dir is not None:
            edir = run_dir / f"eval_{split}"
            write_predictions(edir, preds, rep, recs)
            (edir / "report.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
    return RunRecord(label, cfg.seed, str(run_dir) if run_dir else "", time.time() - t0, reports)


def _finish(kind, runs, seeds, t0, notes, out_dir) -> ExperimentReport:
    report = ExperimentReport(kind, runs, seeds, time.time() - t0, notes)
    if out_dir is not None:
        report.save(out_dir)
        index = {"kind": kind, "seeds": seeds, "notes": notes, "runs": [dataclasses.asdict(r) for r in runs]}
        for r in index["runs"]:
            r.pop("reports")
        (Path(out_dir) / "experiment.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return report


def run_ablation(
    settings,
    base: TrainConfig,
    corpus: CorpusManifest,
    n_seeds: int = 3,
    out_dir=None,
    split: str = "seen",
) -> ExperimentReport:
    """Train and evaluate each setting for ``n_seeds`` paired seeds.

    Seed ``k`` is ``base.seed + k`` for every setting, so rows share
    run-seeded initialisation and batch order.
    """
    settings = list(settings)
    if not settings:
        raise ValueError("no settings given")
    bad = [s for s in settings if s not in SETTINGS]
    if bad:
        raise ValueError(f"unknown setting(s) {bad}")
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    t0 = time.time()
    root = Path(out_dir) if out_dir is not None else None
    vocab = tc.build_vocab(corpus)
    seeds = [base.seed + k for k in range(n_seeds)]
    runs = []
    for seed in seeds:
        for s in settings:
            cfg = dataclasses.replace(base, setting=s, seed=seed)
            runs.append(_run(cfg, corpus, s, [split], root, vocab))
    notes = [f"paired seeds {seeds}: every setting uses the same run seeds", f"evaluated on split {split!r}"]
    return _finish("ablation", runs, seeds, t0, notes, root)


def run_prompt_sweep(
    base: TrainConfig, corpus: CorpusManifest, n_seeds: int = 1, out_dir=None, split: str = "seen"
) -> ExperimentReport:
    """Setting D trained once per prompt condition (ids 1-4, then random choice)."""
    t0 = time.time()
    root = Path(out_dir) if out_dir is not None else None
    vocab = tc.build_vocab(corpus)
    seeds = [base.seed + k for k in range(n_seeds)]
    runs = []
    for seed in seeds:
        for prompt in [*sorted(tc.PROMPTS), "random"]:
            cfg = dataclasses.replace(base, setting="D", prompt=prompt, seed=seed)
            runs.append(_run(cfg, corpus, f"prompt{prompt}", [split], root, vocab))
    notes = ["random mode draws one prompt per training example; evaluation uses the same rule"]
    return _finish("prompt_sweep", runs, seeds, t0, notes, root)


def run_generalization(
    base: TrainConfig, corpus: CorpusManifest, n_seeds: int = 1, out_dir=None
) -> ExperimentReport:
    """Setting D evaluated on the seen family and on the held-out edit family."""
    for split in ("train", "seen", "unseen"):
        if split not in corpus.splits:
            raise KeyError(f"corpus has no {split!r} split")
    t0 = time.time()
    root = Path(out_dir) if out_dir is not None else None
    vocab = tc.build_vocab(corpus)
    seeds = [base.seed + k for k in range(n_seeds)]
    runs = [
        _run(dataclasses.replace(base, setting="D", seed=seed), corpus, "D", ["seen", "unseen"], root, vocab)
        for seed in seeds
    ]
    notes = ["seen: same edit family as training; unseen: feathered, re-noised edit family never trained on"]
    return _finish("generalization", runs, seeds, t0, notes, root)


# ----------------------------------------------------------------------
# reports from disk


def load_report(runs_dir) -> ExperimentReport:
    """Rebuild an ExperimentReport from ``experiment.json`` and per-run eval reports."""
    root = Path(runs_dir)
    index = json.loads((root / "experiment.json").read_text())
    runs = []
    for r in index["runs"]:
        run_dir = Path(r["run_dir"])
        if not run_dir.is_absolute() or not run_dir.exists():
            run_dir = root / Path(r["run_dir"]).name
        reports = {}
        for edir in sorted(d for d in run_dir.glob("eval_*") if d.is_dir()):
            reports[edir.name[len("eval_") :]] = json.loads((edir / "report.json").read_text())
        runs.append(RunRecord(r["label"], r["seed"], str(run_dir), r["runtime_s"], reports))
    return ExperimentReport(index["kind"], runs, index["seeds"], sum(r.runtime_s for r in runs), index["notes"])


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def render_markdown(report: ExperimentReport) -> str:
    s = report.summary()
    modes = {rep["mode"] for r in report.runs for rep in r.reports.values()}
    lines = [f"# {report.kind.replace('_', ' ').title()}", ""]
    lines.append(f"Seeds: {report.seeds}. Aggregation: {', '.join(sorted(modes))}. Values are percentages.")
    lines.append("")
    if report.kind == "ablation":
        lines += ["| Setting | LLM image embedding | Prompt | Instruction prediction | mIoU | F1 |", "|---|---|---|---|---|---|"]
        for label, by_split in s.items():
            m = next(iter(by_split.values()))
            a = ABLATIONS[label]
            f = ["yes" if x else "" for x in (a.uses_llm_image_embedding, a.uses_prompt, a.predicts_instruction)]
            lines.append(f"| {label} | {f[0]} | {f[1]} | {f[2]} | {_pct(m['miou'])} | {_pct(m['f1'])} |")
        lines += ["", f"Reference ({REFERENCE_LABEL}):", "", "| Setting | mIoU | F1 |", "|---|---|---|"]
        lines += [f"| {k} | {v[0]:.2f} | {v[1]:.2f} |" for k, v in PAPER_ABLATION.items()]
    elif report.kind == "prompt_sweep":
        lines += ["| Prompt | mIoU | F1 |", "|---|---|---|"]
        for label, by_split in s.items():
            key = label[len("prompt") :]
            text = tc.PROMPTS[int(key)] if key != "random" else "Randomly choose one of the above prompts"
            m = next(iter(by_split.values()))
            lines.append(f"| {text} | {_pct(m['miou'])} | {_pct(m['f1'])} |")
        lines += ["", f"Reference ({REFERENCE_LABEL}):", "", "| Prompt | mIoU | F1 |", "|---|---|---|"]
        lines += [f"| {k} | {v[0]:.2f} | {v[1]:.2f} |" for k, v in PAPER_PROMPTS.items()]
    else:
        lines += ["| Model | seen mIoU | seen F1 | unseen mIoU | unseen F1 |", "|---|---|---|---|---|"]
        for label, by_split in s.items():
            a, b = by_split["seen"], by_split["unseen"]
            lines.append(f"| {label} | {_pct(a['miou'])} | {_pct(a['f1'])} | {_pct(b['miou'])} | {_pct(b['f1'])} |")
        gap = report.gap()
        if gap is not None:
            lines += ["", f"Gap (seen minus unseen): mIoU {_pct(gap['miou'])}, F1 {_pct(gap['f1'])}."]
        lines += ["", f"Reference mIoU ({REFERENCE_LABEL}):", "", "| Model | seen | unseen |", "|---|---|---|"]
        lines += [f"| {k} | {v['seen']:.2f} | {v['unseen']:.2f} |" for k, v in PAPER_GENERALIZATION.items()]
    lines += ["", "Runs:", ""]
    lines += [f"- {r.label} seed {r.seed}: `{r.run_dir}` ({r.runtime_s:.1f} s)" for r in report.runs]
    if report.notes:
        lines += ["", "Notes:", ""] + [f"- {n}" for n in report.notes]
    return "\n".join(lines) + "\n"


def metrics_markdown(report: MetricsReport) -> str:
    """Single-split evaluation table for the ``eval`` command."""
    a = report.aggregate
    lines = [
        f"# Evaluation: {report.split or 'split'}",
        "",
        f"Images: {len(report.per_image)}. Aggregation: {report.mode}. Values are percentages.",
        "",
        "| mIoU | F1 | IoU edited | IoU authentic | Precision | Recall |",
        "|---|---|---|---|---|---|",
        "| " + " | ".join(_pct(a[k]) for k in ("miou", "f1", "iou_edited", "iou_authentic", "precision", "recall")) + " |",
    ]
    if report.extra:
        lines += ["", *(f"- {k}: {v}" for k, v in sorted(report.extra.items()))]
    return "\n".join(lines) + "\n"
