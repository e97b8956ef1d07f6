import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ap_cases import CASES, MISS, box, det, label
from focal3d.analysis import (
    PredictionDump, average_precision, dump_from_scores, evaluate, gamma_sweep, hardest_share,
    imbalance_report, interpolated_ap, loss_cdf, posterior_histogram, precision_recall, read_dump,
    synthetic_dump, true_positive_scores, write_ap_report, write_curve, write_dump, write_histogram,
    write_sweep,
)
from focal3d.errors import DomainError, ParseError
from focal3d.geometry import Detection
from focal3d.train import TargetAssignment


@pytest.mark.parametrize("name", sorted(CASES))
def test_ap_micro_datasets(name):
    dets, labels, expected = CASES[name]
    for metric in ("bev", "3d"):
        assert average_precision(dets, labels, metric, 0.5, 0) == pytest.approx(expected, abs=1e-9)


def test_ap_pr_enumeration():
    dets, labels, _ = CASES["mixed"]
    p, r, n = precision_recall(dets, labels)
    assert n == 2
    assert np.allclose(p, [1.0, 0.5, 2 / 3]) and np.allclose(r, [0.5, 0.5, 1.0])


def test_ap_empty_bucket_is_undefined():
    assert average_precision([[det(box(0), 0.9)]], [[label(0, difficulty=2)]], "3d", 0.5, 0) is None
    assert average_precision([[]], [[]], "bev", 0.5, 2) is None


def test_ap_difficulty_buckets():
    labels = [[label(0, 0), label(1, 2), label(2, -1)]]
    dets = [[det(box(0), 0.9), det(box(1), 0.8), det(box(2), 0.7)]]
    # hits on labels outside the bucket are ignored, not counted as false positives
    assert average_precision(dets, labels, "3d", 0.5, 0) == pytest.approx(100.0)
    assert average_precision(dets, labels, "3d", 0.5, 2) == pytest.approx(100.0)
    p, r, n = precision_recall(dets, labels, "3d", 0.5, 2)
    assert n == 2 and r[-1] == 1.0


def test_ap_overlap_threshold():
    lab = label(0)
    shifted = det(box(0).__class__((5.8, 0.0, -1.0), (3.9, 1.6, 1.5), 0.0), 0.9)
    # IoU = 3.1 / 4.7 ~ 0.66
    assert average_precision([[shifted]], [[lab]], "3d", 0.5, 0) == 100.0
    assert average_precision([[shifted]], [[lab]], "3d", 0.7, 0) == 0.0
    with pytest.raises(DomainError):
        average_precision([[shifted]], [[lab]], "3d", 0.0, 0)
    with pytest.raises(DomainError):
        average_precision([[shifted]], [[lab]], "image", 0.5, 0)


def test_interpolation_variants():
    p, r = np.array([1.0, 0.5]), np.array([0.5, 1.0])
    assert interpolated_ap(p, r, 11) == pytest.approx(100 * (6 + 5 * 0.5) / 11)
    assert interpolated_ap(p, r, 40) == pytest.approx(100 * (20 + 20 * 0.5) / 40)
    with pytest.raises(DomainError):
        interpolated_ap(p, r, 7)


def random_eval_set(rng, n_frames=4):
    labels, dets = [], []
    for f in range(n_frames):
        n = int(rng.integers(0, 4))
        labels.append([label(i, int(rng.integers(0, 3))) for i in range(n)])
        fr = [det(box(i), float(rng.random())) for i in range(n) if rng.random() < 0.7]
        fr += [det(MISS, float(rng.random())) for _ in range(int(rng.integers(0, 3)))]
        dets.append(fr)
    return dets, labels


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 50), st.floats(-5, 5))
@settings(max_examples=60, deadline=None)
def test_ap_rank_invariance(seed, scale, shift):
    rng = np.random.default_rng(seed)
    dets, labels = random_eval_set(rng)
    base = evaluate(dets, labels)
    perm = rng.permutation(len(dets))
    pd = evaluate([dets[i] for i in perm], [labels[i] for i in perm])
    assert pd == base
    # positive affine maps of the scores keep every rank
    lo = min((d.score for fr in dets for d in fr), default=0.0)
    offset = max(shift, -lo * scale)
    mapped = [[Detection(d.box, (d.score * scale + offset) / (scale + offset + 1.0)) for d in fr] for fr in dets]
    assert evaluate(mapped, labels) == base


def test_evaluate_report(tmp_path):
    dets, labels, _ = CASES["two_frames"]
    res = evaluate(dets, labels)
    assert res.map3d == pytest.approx(np.mean(res.ap3d))
    write_ap_report(tmp_path / "ap.json", res)
    d = json.loads((tmp_path / "ap.json").read_text())
    assert set(d) == {"bev", "3d", "map3d"} and set(d["3d"]) == {"easy", "moderate", "hard"}


def test_dump_validation_and_round_trip(tmp_path):
    with pytest.raises(DomainError):
        PredictionDump([0], [0.5])
    with pytest.raises(DomainError):
        PredictionDump([1], [1.5])
    dump = PredictionDump([1, -1, 1], [0.0, 0.25, 1.0])
    assert 0 < dump.p_t.min() and dump.p_t.max() < 1
    write_dump(tmp_path / "d.csv", dump)
    back = read_dump(tmp_path / "d.csv")
    assert np.array_equal(back.y, dump.y) and np.array_equal(back.p_t, dump.p_t)
    (tmp_path / "bad.csv").write_text("a,b\n1,0.5\n")
    with pytest.raises(ParseError):
        read_dump(tmp_path / "bad.csv")


def test_cdf_examples():
    flat = PredictionDump(-np.ones(8, dtype=int), np.full(8, 0.7))
    for g in (0.0, 2.0):
        c = loss_cdf(flat, g)
        assert np.allclose(c.y, c.x, atol=1e-12)
    one = loss_cdf(PredictionDump([-1], [0.4]), 2.0)
    assert one.x.tolist() == [1.0] and one.y.tolist() == [1.0]
    pair = [0.6, 0.99]
    shares = [hardest_share(pair, g, 0.5) for g in (0.0, 2.0)]
    assert shares[1] > shares[0]
    with pytest.raises(DomainError):
        loss_cdf(PredictionDump([1], [0.5]), 0.0, "negative")


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=200), st.sampled_from([0.0, 0.5, 1.0, 2.0, 5.0]))
@settings(max_examples=100, deadline=None)
def test_cdf_monotone_terminal_one(ps, gamma):
    c = loss_cdf(PredictionDump(-np.ones(len(ps), dtype=int), ps), gamma)
    assert np.all(np.diff(c.y) >= -1e-15)
    assert abs(c.y[-1] - 1.0) <= 1e-9
    assert np.all((c.y >= 0) & (c.y <= 1))


def test_sweep_examples():
    uniform = PredictionDump(-np.ones(1000, dtype=int), np.full(1000, 0.9))
    for g, k, s in gamma_sweep(uniform, [0.0, 1.0, 2.0]):
        assert s == pytest.approx(k / 100)
    p = np.r_[np.full(199, 0.99), 0.3]
    dump = PredictionDump(-np.ones(200, dtype=int), p)
    shares = [s for _, _, s in gamma_sweep(dump, [0.0, 2.0], ks=[1])]
    assert shares[1] > shares[0]


@given(st.lists(st.floats(0.001, 0.999), min_size=2, max_size=300, unique=True))
@settings(max_examples=60, deadline=None)
def test_sweep_bounds_and_concentration(ps):
    dump = PredictionDump(-np.ones(len(ps), dtype=int), ps)
    rows = gamma_sweep(dump, [0.0, 0.5, 1.0, 2.0, 5.0], ks=[1, 10, 20])
    for g, k, s in rows:
        n = len(ps)
        kk = max(1, round(k / 100 * n))
        assert kk / n - 1e-12 <= s <= 1.0 + 1e-12
    for k in (1, 10, 20):
        seq = [s for g, kk, s in rows if kk == k]
        assert all(b >= a - 1e-12 for a, b in zip(seq, seq[1:]))


def test_hardest_share_strictly_increasing_on_distinct_dump():
    dump = synthetic_dump(20_000, 100, seed=1)
    shares = [hardest_share(dump.select("negative"), g, 0.1) for g in (0.0, 0.5, 1.0, 2.0)]
    assert all(b > a for a, b in zip(shares, shares[1:]))


def test_histogram_examples(tmp_path):
    assert not posterior_histogram([], 10).counts.any()
    h = posterior_histogram([1.0, 1.0, 1.0], 10)
    assert h.counts[-1] == 3 and h.peak_bin == 9 and h.peak_center == pytest.approx(0.95)
    rng = np.random.default_rng(0)
    s = rng.random(997)
    assert posterior_histogram(s, 20).counts.sum() == 997
    with pytest.raises(DomainError):
        posterior_histogram(s, 1)
    write_histogram(tmp_path / "h.csv", h)
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "bin_lo,bin_hi,count"


def test_csv_headers(tmp_path):
    dump = synthetic_dump(100, 10)
    write_curve(tmp_path / "c.csv", loss_cdf(dump, 2.0))
    write_sweep(tmp_path / "s.csv", gamma_sweep(dump, [0.0, 2.0]))
    assert (tmp_path / "c.csv").read_text().startswith("x,y\n")
    assert (tmp_path / "s.csv").read_text().startswith("gamma,k_percent,share\n")


def test_imbalance_examples():
    lab = np.zeros((4, 5, 6, 1), dtype=np.int8)
    t = TargetAssignment(lab, np.zeros(lab.shape + (24,)))
    r = imbalance_report(t)
    assert r.n_pos == 0 and r.ratio == r.n_neg == 120
    lab[0, 1, 1, 0] = 1
    lab[1, 2, 2, 0] = 1
    lab[1, 3, 3, 0] = -1
    r = imbalance_report(TargetAssignment(lab, np.zeros(lab.shape + (24,))))
    assert r.per_z_pos.tolist() == [1, 1, 0, 0]
    assert r.per_z_pos.sum() == r.n_pos == 2 and r.per_z_neg.sum() == r.n_neg == 117
    assert r.ratio == pytest.approx(58.5)
    bev = imbalance_report(TargetAssignment(np.zeros((3, 3, 2), np.int8), np.zeros((3, 3, 2, 7))))
    assert bev.per_z_neg.tolist() == [18]


def test_dump_from_scores_and_tp_scores():
    scores = [np.array([[0.9, 0.2], [0.4, 0.1]])]
    targets = [TargetAssignment(np.array([[1, 0], [-1, 0]], dtype=np.int8), np.zeros((2, 2, 7)))]
    d = dump_from_scores(scores, targets, n_neg=10, n_pos=10)
    assert sorted(zip(d.y.tolist(), np.round(d.p_t, 12).tolist())) == [(-1, 0.8), (-1, 0.9), (1, 0.9)]
    dets, labels, _ = CASES["mixed"]
    assert true_positive_scores(dets, labels).tolist() == [0.9, 0.7]


def test_synthetic_dump_is_seeded():
    a, b = synthetic_dump(500, 50, seed=3), synthetic_dump(500, 50, seed=3)
    assert np.array_equal(a.p_t, b.p_t)
    assert len(a) == 550 and (a.y == 1).sum() == 50
    assert math.isclose(float(np.mean(a.select("negative"))), 20 / 21, abs_tol=0.01)
