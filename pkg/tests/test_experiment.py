import csv

import numpy as np
import pytest

from focal3d.analysis import posterior_histogram
from focal3d.experiment import BranchResult, FocalBenefitConfig, build_frames, judge_focal_benefit, write_summary


def branch(seed, gamma, m, scores):
    return BranchResult(seed, gamma, m, (m, m, m), posterior_histogram(scores, 10))


def test_judge_counts_wins_and_pools_histograms():
    results = [
        branch(0, 0.0, 50.0, [0.99, 0.98]), branch(0, 2.0, 55.0, [0.85, 0.99]),
        branch(1, 0.0, 40.0, [0.97]), branch(1, 2.0, 40.0, [0.81, 0.82]),
        branch(2, 0.0, 30.0, [0.95]), branch(2, 2.0, 29.0, [0.83]),
    ]
    v = judge_focal_benefit(results)
    assert v["map_wins"] == 2 and v["seeds"] == 3
    # pooled: gamma 0 has 4 scores in the top bin, gamma 2 has 4 in [0.8, 0.9)
    assert v["peak_base"] == pytest.approx(0.95) and v["peak_focal"] == pytest.approx(0.85)
    assert [r["seed"] for r in v["rows"]] == [0, 1, 2]


def test_summary_csv_plain_numbers(tmp_path):
    write_summary(tmp_path / "s.csv", [branch(0, 2.0, 12.5, [0.33])])
    with open(tmp_path / "s.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][-1] == "peak_center" and float(rows[1][-1]) == pytest.approx(0.35)
    assert all("np." not in cell for cell in rows[1])


def test_build_frames_is_seeded():
    cfg = FocalBenefitConfig(n_frames=3)
    a, b = build_frames(cfg), build_frames(cfg)
    assert [f.id for f in a] == ["000000", "000001", "000002"]
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.cloud.points, fb.cloud.points)
        assert all(lab.support >= 10 for lab in fa.labels)
