import json
import math
from dataclasses import replace
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from focal3d.data import Frame, Label, SceneRecipe, generate_scene
from focal3d.errors import ConfigError, DomainError, NumericError
from focal3d.geometry import Box3D, bev_iou, iou3d
from focal3d.losses import LossConfig
from focal3d.network.models import build_model, head_grid, make_anchors, preset
from focal3d.train import (
    IGNORE, METRIC_COLUMNS, NEGATIVE, POSITIVE, SGD, TrainConfig, assign_targets_3dfcn, assign_targets_voxelnet,
    batch_loss, canonical_yaw, predict, predict_prepared, prepare_frame, read_metrics, train,
)
from focal3d.voxel import VoxelGridSpec

VOX = preset("voxelnet-mini")
FCN = preset("3dfcn-mini")


def test_canonical_yaw():
    for y in np.linspace(-7, 7, 57):
        for ref in (0.0, math.pi / 2):
            c = canonical_yaw(y, ref)
            assert ref - math.pi / 2 <= c < ref + math.pi / 2
            assert abs(math.sin(c - y)) < 1e-12


def test_fcn_targets_examples():
    grid = VoxelGridSpec((0, 0, 0), (1, 1, 1), (2, 3, 4))
    t = assign_targets_3dfcn(grid, [], 4.0)
    assert t.n_pos == 0 and t.n_neg == t.n_total == 24
    box = Box3D((2.7, 1.2, 0.4), (3.9, 1.6, 1.5), 0.3)
    t = assign_targets_3dfcn(grid, [box], 4.0)
    # index order (z, x, y)
    assert t.n_pos == 1 and t.labels[0, 2, 1, 0] == POSITIVE
    assert t.residuals.shape == (2, 3, 4, 1, 24)


def test_fcn_targets_shared_voxel_keeps_larger_support(caplog):
    grid = VoxelGridSpec((0, 0, 0), (1, 1, 1), (2, 3, 4))
    a = Label("Car", Box3D((2.2, 1.2, 0.4), (3.9, 1.6, 1.5), 0.0), support=50)
    b = Label("Car", Box3D((2.8, 1.8, 0.6), (4.5, 1.8, 1.5), 0.0), support=80)
    with caplog.at_level("INFO"):
        t = assign_targets_3dfcn(grid, [a, b], 4.0)
    assert t.n_pos == 1
    only_b = assign_targets_3dfcn(grid, [b], 4.0)
    assert np.array_equal(t.residuals, only_b.residuals)
    assert "share head voxel" in caplog.text


def test_voxelnet_targets_examples():
    anchors = make_anchors(VOX)
    t = assign_targets_voxelnet(anchors, [])
    assert t.n_pos == 0 and t.n_neg == t.n_total == anchors[..., 0].size
    a = anchors[10, 12, 1]
    t = assign_targets_voxelnet(anchors, [Box3D.from_array(a)])
    assert t.labels[10, 12, 1] == POSITIVE
    assert np.allclose(t.residuals[10, 12, 1], 0.0, atol=1e-12)
    # neighbours one 0.8 m cell along the length overlap by 3.1 / 4.7 > 0.6; everything else < 0.45
    assert t.n_pos == 3 and t.n_ignore == 0
    with pytest.raises(DomainError):
        assign_targets_voxelnet(anchors, [], pos_iou=0.4, neg_iou=0.5)


def test_full_scale_anchor_counts():
    n_fcn = int(np.prod(head_grid(preset("3dfcn-full")).dims))
    n_vox = make_anchors(preset("voxelnet-full"))[..., 0].size
    assert abs(n_fcn - 50_000) / 50_000 < 0.1
    assert abs(n_vox - 70_000) / 70_000 < 0.1


boxes = st.builds(
    lambda x, y, yaw, l: Box3D((x, y, -1.0), (l, 1.6, 1.5), yaw),
    st.floats(2, 24), st.floats(-12, 12), st.floats(-3.2, 3.2), st.floats(3.0, 4.5),
)


@given(st.lists(boxes, max_size=4))
@settings(max_examples=25, deadline=None)
def test_voxelnet_label_partition(labels):
    anchors = make_anchors(VOX)
    t = assign_targets_voxelnet(anchors, labels)
    assert set(np.unique(t.labels)) <= {POSITIVE, NEGATIVE, IGNORE}
    assert t.n_pos + t.n_neg + t.n_ignore == t.n_total
    assert np.all(t.residuals[t.labels != POSITIVE] == 0.0)
    again = assign_targets_voxelnet(anchors, labels)
    assert np.array_equal(t.labels, again.labels) and np.array_equal(t.residuals, again.residuals)
    if labels:
        assert t.n_pos >= 1


def test_imbalance_on_synthetic_scene():
    f = generate_scene(SceneRecipe(seed=2, n_objects=(3, 3)))
    t = prepare_frame(f, VOX).targets
    assert 0 < t.n_pos < 30 and t.n_neg > 50 * t.n_pos


def test_train_config_validation():
    with pytest.raises(ConfigError) as exc:
        TrainConfig(lr=0.0, batch_size=0)
    assert set(exc.value.keys) == {"train.lr", "train.batch_size"}
    cfg = TrainConfig(lr=0.02)
    assert cfg.phase2_lr == pytest.approx(0.002)
    assert cfg.phase_loss(1).gamma == 0.0 and cfg.phase_loss(2).gamma == cfg.loss.gamma
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_sgd_momentum_and_clip():
    from focal3d.network import tensor as T

    p = T.Tensor(np.array([1.0, 1.0]), requires_grad=True)
    opt = SGD({"p": p}, lr=0.1, momentum=0.9)
    p.grad = np.array([3.0, 4.0])
    assert opt.step(clip=1.0) == pytest.approx(5.0)
    assert np.allclose(p.data, [1 - 0.1 * 0.6, 1 - 0.1 * 0.8])
    p.grad = np.array([0.0, 0.0])
    opt.step()
    assert np.allclose(p.data, [1 - 0.06 - 0.054, 1 - 0.08 - 0.072])


def small_frames(n=3, seed=0):
    return [generate_scene(SceneRecipe(seed=seed + i, n_objects=(1, 2)), f"{i:06d}") for i in range(n)]


@pytest.mark.parametrize("net", [FCN, VOX], ids=["3dfcn", "voxelnet"])
def test_one_step_decreases_frozen_batch_loss(net):
    frames = small_frames(2, seed=7)
    prepared = [prepare_frame(f, net) for f in frames]
    model = build_model(net, seed=1)
    loss_cfg = LossConfig(gamma=2.0, alpha=1.0, beta=10.0, eta=0.5)
    model.zero_grad()
    br = batch_loss(model, net, prepared, loss_cfg)
    before = float(br.total.data)
    br.total.backward()
    SGD(model.parameters(), 1e-4).step()
    after = float(batch_loss(model, net, prepared, loss_cfg).total.data)
    assert after < before


def test_gamma_zero_phase_boundary_only_changes_lr(tmp_path):
    frames = small_frames(2)
    prepared = [prepare_frame(f, VOX) for f in frames]
    cfg = TrainConfig(loss=LossConfig(gamma=0.0, alpha=1.0, beta=10.0, eta=0.5), epochs_phase1=1,
                      epochs_phase2=1, batch_size=2, checkpoint_every=0, eval_every=0)
    model = build_model(VOX, seed=0)
    a = batch_loss(model, VOX, prepared, cfg.phase_loss(1)).values()
    b = batch_loss(model, VOX, prepared, cfg.phase_loss(2)).values()
    assert a == b
    train(cfg, VOX, frames, [], tmp_path, prepared=(prepared, []))
    phases = json.loads((tmp_path / "config.json").read_text())["phases"]
    assert phases[0]["loss"] == phases[1]["loss"]
    assert phases[1]["lr"] == pytest.approx(0.1 * phases[0]["lr"])


def test_run_directory_and_determinism(tmp_path):
    frames = small_frames(3, seed=20)
    cfg = TrainConfig(epochs_phase1=1, epochs_phase2=1, batch_size=2, seed=4, checkpoint_every=1, eval_every=1)
    r1 = train(cfg, VOX, frames[:2], frames[2:], tmp_path / "a")
    train(cfg, VOX, frames[:2], frames[2:], tmp_path / "b")
    text = (tmp_path / "a" / "metrics.csv").read_text()
    assert text == (tmp_path / "b" / "metrics.csv").read_text()
    rows = read_metrics(tmp_path / "a" / "metrics.csv")
    assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == 2 == r1.step
    assert all(r["val_map"] != "" for r in rows)
    cfg_json = json.loads((tmp_path / "a" / "config.json").read_text())
    assert cfg_json["phases"][1]["lr"] == pytest.approx(0.1 * cfg_json["phases"][0]["lr"])
    assert (tmp_path / "a" / "checkpoints" / "final.json").exists()
    assert (tmp_path / "a" / "checkpoints" / "epoch_0002.bin").exists()
    a = (tmp_path / "a" / "checkpoints" / "final.bin").read_bytes()
    assert a == (tmp_path / "b" / "checkpoints" / "final.bin").read_bytes()


def test_resume_from_checkpoint_continues_steps(tmp_path):
    frames = small_frames(2, seed=30)
    base = TrainConfig(epochs_phase1=1, epochs_phase2=0, batch_size=1, checkpoint_every=0, eval_every=0)
    train(base, VOX, frames, [], tmp_path / "p1")
    r = train(replace(base, epochs_phase1=0, epochs_phase2=1), VOX, frames, [], tmp_path / "p2",
              init_checkpoint=tmp_path / "p1" / "checkpoints" / "final")
    assert [row[0] for row in r.rows] == [3, 4]


def test_numeric_failure_records_batch(tmp_path, monkeypatch):
    import focal3d.train as tr
    from focal3d.network import tensor as T

    real = tr.batch_loss

    def poisoned(model, config, chunk, loss_cfg):
        br = real(model, config, chunk, loss_cfg)
        if any(p.frame_id == "000001" for p in chunk):
            br = replace(br, total=br.total * float("nan"), reg=T.Tensor(float("inf")))
        return br

    monkeypatch.setattr(tr, "batch_loss", poisoned)
    frames = small_frames(2, seed=40)
    cfg = TrainConfig(epochs_phase1=1, epochs_phase2=0, batch_size=1, checkpoint_every=0, eval_every=0)
    with pytest.raises(NumericError) as exc:
        train(cfg, VOX, frames, [], tmp_path)
    assert exc.value.batch_id.endswith(":000001")
    err = json.loads((tmp_path / "error.json").read_text())
    assert err["batch_id"] == exc.value.batch_id and err["loss"] == "nan" and err["reg"] == "inf"


def test_nan_propagates_through_relu():
    from focal3d.network import tensor as T

    assert np.isnan(T.relu(T.Tensor([float("nan"), -1.0])).data[0])


def test_empty_training_set(tmp_path):
    with pytest.raises(DomainError):
        train(TrainConfig(), VOX, [], [], tmp_path)


def test_zero_heads_predict_nothing():
    model = build_model(VOX)
    model.zero_heads()
    frame = generate_scene(SceneRecipe(seed=1))
    prepared = [prepare_frame(frame, VOX)]
    dets, raw = predict_prepared(model, VOX, prepared, 0.5, return_scores=True)
    assert np.all(raw[0] == 0.5)
    assert dets == [[]] and predict(model, VOX, frame) == []


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    frame = generate_scene(SceneRecipe(seed=3, n_objects=(2, 2)))
    prepared = prepare_frame(frame, VOX)
    cfg = TrainConfig(epochs_phase1=200, epochs_phase2=0, lr=0.01, batch_size=1, checkpoint_every=0, eval_every=0)
    result = train(cfg, VOX, [frame], [], tmp_path_factory.mktemp("overfit"), prepared=([prepared], []))
    return frame, prepared, result


def test_overfit_single_frame(overfit):
    _, _, result = overfit
    losses = [row[2] for row in result.rows]
    assert len(losses) == 200
    assert losses[0] / losses[-1] >= 10.0


def test_overfit_recovers_boxes(overfit):
    frame, _, result = overfit
    dets = predict(result.model, VOX, frame, score_threshold=0.5)
    for lab in frame.labels:
        assert max(iou3d(d.box, lab.box) for d in dets) > 0.5


def test_nms_threshold_honored(overfit):
    _, prepared, result = overfit
    for thr in (0.1, 0.5):
        dets = predict_prepared(result.model, VOX, [prepared], 0.05, thr)[0]
        assert len(dets) > 1
        for a, b in combinations(dets, 2):
            assert bev_iou(a.box, b.box) <= thr
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)


def test_fcn_predict_decodes_corners():
    from focal3d.geometry import encode24

    frame = Frame("f", generate_scene(SceneRecipe(seed=5)).cloud, ())
    model = build_model(FCN)
    model.zero_heads()
    model.pmap_head.bias.data[...] = 5.0
    size = FCN.anchor.size
    model.rmap_head.bias.data[...] = encode24(Box3D((0, 0, 0), size, 0.0), np.zeros(3), FCN.anchor.diagonal)
    dets = predict(model, FCN, frame, score_threshold=0.5, nms_threshold=1.0, top_k=3)
    assert len(dets) == 3
    g = head_grid(FCN)
    centers = g.voxel_center(g.unflatten(np.arange(int(np.prod(g.dims)))))
    for d in dets:
        assert np.allclose(d.box.size, size)
        assert np.min(np.abs(centers - np.array(d.box.center)).sum(axis=1)) < 1e-9
