"""Accuracy aggregation and result files (JSON lines and CSV)."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError

Z_95 = 1.96


def confidence_interval(accs) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width, ``1.96 * s / sqrt(N)``."""
    x = np.asarray(list(accs), dtype=np.float64)
    if x.size < 2:
        raise ContractError(f"confidence interval needs at least 2 values, got {x.size}")
    return float(x.mean()), float(Z_95 * x.std(ddof=1) / math.sqrt(x.size))


@dataclass
class SummaryRow:
    model: str
    mean_acc_before: float
    ci_before: float
    mean_acc_after: float | None
    ci_after: float | None
    episode_count: int


def summarize(model: str, metrics) -> SummaryRow:
    metrics = list(metrics)
    before, ci_b = confidence_interval(m.acc_before for m in metrics)
    after = ci_a = None
    if all(m.acc_after is not None for m in metrics):
        after, ci_a = confidence_interval(m.acc_after for m in metrics)
    return SummaryRow(model, before, ci_b, after, ci_a, len(metrics))


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def write_metrics_jsonl(path, metrics, summary: SummaryRow | None = None) -> None:
    with open(path, "w") as fh:
        for m in metrics:
            fh.write(json.dumps({"record": "episode", **dataclasses.asdict(m)}) + "\n")
        if summary is not None:
            fh.write(json.dumps({"record": "summary", **dataclasses.asdict(summary)}) + "\n")


def read_metrics_jsonl(path):
    episodes, summary = [], None
    for line in Path(path).read_text().splitlines():
        rec = json.loads(line)
        kind = rec.pop("record")
        if kind == "summary":
            summary = rec
        else:
            episodes.append(rec)
    return episodes, summary


SUMMARY_COLUMNS = ["model", "acc_wo_finetune", "ci_wo_finetune",
                   "acc_w_finetune", "ci_w_finetune", "episodes"]


def write_summary_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r.model, _fmt(r.mean_acc_before), _fmt(r.ci_before),
                        _fmt(r.mean_acc_after), _fmt(r.ci_after), r.episode_count])


def format_summary(rows) -> str:
    """Plain-text table in the 'w/o | w/ fine-tuning' layout, percentages."""
    def cell(mean, ci):
        return "--" if mean is None else f"{100 * mean:.2f} +- {100 * ci:.2f}%"
    lines = [f"{'model':<12} {'w/o fine-tuning':>20} {'w/ fine-tuning':>20}"]
    for r in rows:
        lines.append(f"{r.model:<12} {cell(r.mean_acc_before, r.ci_before):>20} "
                     f"{cell(r.mean_acc_after, r.ci_after):>20}")
    return "\n".join(lines)


def write_sweep_csv(path, cells) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "n", "acc_before", "acc_after", "delta"])
        for c in cells:
            w.writerow([repr(c.alpha), c.n, f"{c.acc_before:.6f}", f"{c.acc_after:.6f}",
                        f"{c.delta:+.6f}"])
