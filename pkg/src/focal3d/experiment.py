"""Desk-scale experiments shared by the CLI and the acceptance suite."""

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from focal3d import analysis
from focal3d.data import SceneRecipe, filter_sparse_boxes, generate_scene, split_train_val
from focal3d.network.models import preset
from focal3d.train import TrainConfig, predict_prepared, prepare_frame, train


@dataclass(frozen=True)
class FocalBenefitConfig:
    n_frames: int = 200
    data_seed: int = 2024
    seeds: tuple = (0, 1, 2)
    gammas: tuple = (0.0, 2.0)
    epochs_phase1: int = 8
    epochs_phase2: int = 8
    lr: float = 0.01
    batch_size: int = 4
    bins: int = 20
    network: str = "voxelnet-mini"
    recipe: SceneRecipe = field(default_factory=lambda: SceneRecipe(n_distractors=(2, 5)))


@dataclass
class BranchResult:
    seed: int
    gamma: float
    map3d: float
    ap3d: tuple
    histogram: analysis.Histogram


def build_frames(cfg):
    states = np.random.SeedSequence(cfg.data_seed).generate_state(cfg.n_frames)
    return [filter_sparse_boxes(generate_scene(replace(cfg.recipe, seed=int(s)), f"{i:06d}"))
            for i, s in enumerate(states)]


def focal_benefit(cfg, out_dir, progress=None):
    """Train one shared BCE phase per seed, then a focal phase per gamma.

    Both schedules start the second phase from the same first-phase weights,
    so they differ only in the second-phase gamma. Writes per-branch metrics
    and histogram CSVs plus ``summary.csv`` under ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = preset(cfg.network)
    frames = build_frames(cfg)
    train_ids, val_ids = split_train_val([f.id for f in frames], 0)
    by_id = {f.id: f for f in frames}
    train_frames, val_frames = [by_id[i] for i in train_ids], [by_id[i] for i in val_ids]
    prepared = ([prepare_frame(f, net) for f in train_frames], [prepare_frame(f, net) for f in val_frames])
    val_labels = [p.labels for p in prepared[1]]
    results = []
    for seed in cfg.seeds:
        base = TrainConfig(epochs_phase1=cfg.epochs_phase1, epochs_phase2=0, lr=cfg.lr,
                           batch_size=cfg.batch_size, seed=seed, checkpoint_every=0, eval_every=0)
        first = out / f"seed{seed}_phase1"
        train(base, net, train_frames, val_frames, first, prepared=prepared)
        for g in cfg.gammas:
            branch = replace(base, epochs_phase1=0, epochs_phase2=cfg.epochs_phase2,
                             loss=base.loss.replace(gamma=g))
            run = train(branch, net, train_frames, val_frames, out / f"seed{seed}_gamma{g:g}",
                        init_checkpoint=first / "checkpoints" / "final", prepared=prepared)
            dets = predict_prepared(run.model, net, prepared[1], branch.eval_score_threshold,
                                    branch.nms_threshold)
            ev = analysis.evaluate(dets, val_labels)
            tp = analysis.true_positive_scores(dets, val_labels)
            np.savetxt(out / f"tp_scores_seed{seed}_gamma{g:g}.csv", tp, fmt="%.17g", header="score", comments="")
            hist = analysis.posterior_histogram(tp, cfg.bins)
            analysis.write_histogram(out / f"histogram_seed{seed}_gamma{g:g}.csv", hist)
            res = BranchResult(seed, g, ev.map3d, tuple(ev.ap3d), hist)
            results.append(res)
            if progress:
                progress(res)
    write_summary(out / "summary.csv", results)
    return results


def write_summary(path, results):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("seed", "gamma", "map3d", "ap3d_easy", "ap3d_moderate", "ap3d_hard", "peak_center"))
        for r in results:
            w.writerow((r.seed, repr(float(r.gamma)), repr(r.map3d), *(repr(a) for a in r.ap3d),
                        repr(float(r.histogram.peak_center))))


def judge_focal_benefit(results, baseline=0.0, focal=2.0):
    """Per-seed comparison of the focal branch against the baseline branch."""
    by = {(r.seed, r.gamma): r for r in results}
    seeds = sorted({r.seed for r in results})
    rows = []
    for s in seeds:
        b, f = by[(s, baseline)], by[(s, focal)]
        rows.append({"seed": s, "map_base": b.map3d, "map_focal": f.map3d,
                     "peak_base": b.histogram.peak_center, "peak_focal": f.histogram.peak_center})
    wins = sum(r["map_focal"] >= r["map_base"] for r in rows)
    pooled = {}
    for g in (baseline, focal):
        counts = sum(by[(s, g)].histogram.counts for s in seeds)
        pooled[g] = analysis.Histogram(results[0].histogram.edges, counts)
    return {"rows": rows, "map_wins": wins, "seeds": len(seeds),
            "peak_base": pooled[baseline].peak_center, "peak_focal": pooled[focal].peak_center}


def summary_json(judgement):
    return json.dumps(judgement, indent=2, sort_keys=True, default=float) + "\n"
