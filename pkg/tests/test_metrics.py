import math
import statistics

import numpy as np
import pytest

from rdft.errors import ContractError
from rdft.meta import EpisodeMetrics, SweepCell
from rdft.metrics import (confidence_interval, format_summary, read_metrics_jsonl, summarize,
                          write_metrics_jsonl, write_summary_csv, write_sweep_csv)


def oracle_ci(values):
    return statistics.fmean(values), 1.96 * statistics.stdev(values) / math.sqrt(len(values))


def test_ci_hand_cases():
    assert confidence_interval([0.8] * 5) == (0.8, 0.0)
    mean, hw = confidence_interval([0.0, 1.0])
    assert mean == 0.5
    assert abs(hw - 0.98) < 1e-12


def test_ci_matches_oracle(rng):
    for _ in range(100):
        x = rng.uniform(0, 1, int(rng.integers(2, 300))).tolist()
        m, h = confidence_interval(x)
        om, oh = oracle_ci(x)
        assert abs(m - om) < 1e-10 and abs(h - oh) < 1e-10


def test_ci_bernoulli_approximation(rng):
    x = (rng.uniform(size=400) < 0.85).astype(float)
    _, hw = confidence_interval(x)
    assert abs(hw - 1.96 * math.sqrt(0.85 * 0.15 / 400)) < 0.005


def test_ci_needs_two_values():
    with pytest.raises(ContractError):
        confidence_interval([0.5])


def _metrics(after=True):
    return [EpisodeMetrics(i, 100 + i, 0.5 + 0.1 * (i % 3), (0.6 if after else None), 0.3)
            for i in range(6)]


def test_summary_matches_stream(tmp_path):
    ms = _metrics()
    row = summarize("maml_proto", ms)
    assert row.mean_acc_before == pytest.approx(np.mean([m.acc_before for m in ms]), abs=1e-12)
    path = tmp_path / "m.jsonl"
    write_metrics_jsonl(path, ms, row)
    episodes, summary = read_metrics_jsonl(path)
    assert len(episodes) == 6 and episodes[2]["seed"] == 102
    assert summary["mean_acc_before"] == pytest.approx(np.mean([e["acc_before"] for e in episodes]))
    assert summary["mean_acc_after"] == pytest.approx(0.6)


def test_summary_without_finetune_leaves_after_empty(tmp_path):
    row = summarize("protonet", _metrics(after=False))
    assert row.mean_acc_after is None and row.ci_after is None
    write_summary_csv(tmp_path / "s.csv", [row])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "model,acc_wo_finetune,ci_wo_finetune,acc_w_finetune,ci_w_finetune,episodes"
    assert lines[1].split(",")[3:5] == ["", ""]
    assert "--" in format_summary([row])


def test_sweep_csv(tmp_path):
    write_sweep_csv(tmp_path / "g.csv", [SweepCell(0.2, 8, 0.9, 0.7)])
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[1].startswith("0.2,8,0.900000,0.700000,-0.2")
