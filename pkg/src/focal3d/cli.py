"""Command-line entry point: ``focal3d <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from focal3d import __version__, analysis, config as C, data
from focal3d.errors import (
    ConfigError, DomainError, GenerationError, NumericError, ParseError, StructuralError, VersionMismatchError,
)

log = logging.getLogger("focal3d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# run manifests --------------------------------------------------------------

def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def file_digest(path):
    p = Path(path)
    if p.is_dir():
        return data.dataset_digest(p)
    h = hashlib.sha256()
    for suffix in ("", ".json", ".bin"):
        q = p.with_suffix(suffix) if suffix else p
        if q.is_file():
            h.update(q.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir, command, cfg, inputs, started, extra=None):
    """The run manifest: resolved config, version, seed, input digests, timestamps."""
    manifest = {
        "command": command,
        "toolkit_version": __version__,
        "seed": cfg.get("seed", 0),
        "config": cfg,
        "inputs": {k: file_digest(v) for k, v in inputs.items() if v is not None},
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# helpers --------------------------------------------------------------------

def _rule(cfg):
    r = cfg["data"]["difficulty_rule"]
    return None if r == "auto" else r


def _frame_ids(cfg, root, split=None):
    root = Path(root)
    if split:
        path = root / "split" / f"{split}.txt"
        if path.exists():
            ids = data.read_split(path)
        else:
            train, val = data.split_train_val(data.list_frame_ids(root), cfg["data"]["split_seed"])
            ids = train if split == "train" else val
    else:
        ids = data.list_frame_ids(root)
    n = cfg["data"]["max_frames"]
    return ids[:n] if n else ids


def _load_frames(cfg, root, ids):
    if not Path(root).is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    return data.load_dataset(root, ids, cfg["data"]["min_points"], _rule(cfg))


def _load_model(checkpoint):
    from focal3d.network.checkpoint import load_model, read_manifest
    from focal3d.network.models import build_model, preset

    meta = read_manifest(checkpoint).get("meta", {})
    net = preset(meta.get("network", "voxelnet-mini"))
    if "max_points" in meta:
        net = replace(net, max_points=int(meta["max_points"]))
    model = build_model(net, 0)
    load_model(checkpoint, model)
    return model, net


def _checkpoint_path(arg):
    p = Path(arg)
    if p.is_dir():
        best = p / "best.json"
        if best.exists():
            return p / json.loads(best.read_text())["checkpoint"]
        return p / "checkpoints" / "final"
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def _detections_from_results(results_dir, ids):
    out = []
    for fid in ids:
        path = Path(results_dir) / f"{fid}.txt"
        labels = data.parse_labels(path) if path.exists() else []
        out.append([analysis_detection(lab) for lab in labels])
    return out


def analysis_detection(label):
    from focal3d.geometry import Detection

    return Detection(label.box, 1.0 if label.score is None else float(label.score))


# commands -------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    started = _now()
    out = Path(args.out)
    rec = C.recipe(cfg)
    ids = data.generate_dataset(out, rec, args.count, seed=cfg["seed"])
    if ids:
        data.split_train_val(ids, cfg["data"]["split_seed"], out / "split")
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, "gen-data", cfg, {}, started,
                   {"synthetic": True, "count": args.count, "ids": ids, "recipe": rec.to_dict()})
    print(f"wrote {len(ids)} frames to {out}")


def cmd_train(args, cfg):
    from focal3d.train import train

    started = _now()
    root = cfg["data"]["root"]
    train_frames = _load_frames(cfg, root, _frame_ids(cfg, root, "train"))
    val_frames = _load_frames(cfg, root, _frame_ids(cfg, root, "val"))
    if args.no_val:
        val_frames = []
    net = C.network_config(cfg)
    tc = C.train_config(cfg)
    out = Path(args.out)

    def progress(row):
        if args.verbose:
            print(",".join(str(v) for v in row), flush=True)

    result = train(tc, net, train_frames, val_frames, out, init_checkpoint=args.init, progress=progress)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "train", cfg, {"data": root, "init": args.init}, started,
                   {"steps": result.step, "best": result.best})
    print(f"trained {result.step} steps; run directory {out}")


def cmd_predict(args, cfg):
    from focal3d.train import predict_prepared, prepare_frame

    started = _now()
    ckpt = _checkpoint_path(args.checkpoint)
    model, net = _load_model(ckpt)
    root = cfg["data"]["root"]
    ids = _frame_ids(cfg, root, args.split)
    frames = _load_frames(cfg, root, ids)
    prepared = [prepare_frame(f, net, cfg["seed"]) for f in frames]
    p = cfg["predict"]
    dets = predict_prepared(model, net, prepared, p["score_threshold"], p["nms_threshold"], p["top_k"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fid, ds in zip(ids, dets):
        labels = [data.Label(cfg["recipe"].get("class_name", "Car"), d.box, score=d.score) for d in ds]
        data.write_labels(out / f"{fid}.txt", labels)
    write_manifest(out, "predict", cfg, {"checkpoint": ckpt, "data": root}, started)
    print(f"wrote predictions for {len(ids)} frames to {out}")


def cmd_eval(args, cfg):
    started = _now()
    root = cfg["data"]["root"]
    ids = _frame_ids(cfg, root, args.split)
    frames = _load_frames(cfg, root, ids)
    e = cfg["eval"]
    if args.results:
        dets = _detections_from_results(args.results, ids)
        inputs = {"results": args.results, "data": root}
    else:
        from focal3d.train import predict_prepared, prepare_frame

        ckpt = _checkpoint_path(args.checkpoint)
        model, net = _load_model(ckpt)
        prepared = [prepare_frame(f, net, cfg["seed"]) for f in frames]
        dets = predict_prepared(model, net, prepared, e["score_threshold"], cfg["predict"]["nms_threshold"],
                                cfg["predict"]["top_k"])
        inputs = {"checkpoint": ckpt, "data": root}
    res = analysis.evaluate(dets, [f.labels for f in frames],
                            {"bev": e["overlap_bev"], "3d": e["overlap_3d"]}, e["points"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    analysis.write_ap_report(out / "ap.json", res)
    write_manifest(out, "eval", cfg, inputs, started)
    print(json.dumps(res.to_dict(), sort_keys=True))


def cmd_analyze(args, cfg):
    started = _now()
    a = cfg["analysis"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {}
    hist = None
    if args.dump:
        dump = analysis.read_dump(args.dump)
        inputs["dump"] = args.dump
    elif args.synthetic:
        dump = analysis.synthetic_dump(a["n_neg"], a["n_pos"], seed=cfg["seed"])
    else:
        if not args.checkpoint:
            raise ConfigError("analyze needs --dump, --synthetic or --checkpoint", ["dump"])
        from focal3d.train import predict_prepared, prepare_frame

        ckpt = _checkpoint_path(args.checkpoint)
        model, net = _load_model(ckpt)
        root = cfg["data"]["root"]
        frames = _load_frames(cfg, root, _frame_ids(cfg, root, args.split))
        prepared = [prepare_frame(f, net, cfg["seed"]) for f in frames]
        dets, scores = predict_prepared(model, net, prepared, cfg["eval"]["score_threshold"],
                                        cfg["predict"]["nms_threshold"], cfg["predict"]["top_k"],
                                        return_scores=True)
        dump = analysis.dump_from_scores(scores, [p.targets for p in prepared], a["n_neg"], a["n_pos"], cfg["seed"])
        hist = analysis.posterior_histogram(
            analysis.true_positive_scores(dets, [p.labels for p in prepared]), a["bins"])
        inputs.update({"checkpoint": ckpt, "data": root})
        analysis.write_dump(out / "dump.csv", dump)
    for g in a["gammas"]:
        curve = analysis.loss_cdf(dump, g, a["class_filter"])
        analysis.write_curve(out / f"cdf_gamma_{g:g}.csv", curve)
    analysis.write_sweep(out / "sweep.csv", analysis.gamma_sweep(dump, a["gammas"], a["ks"], a["class_filter"]))
    if hist is not None:
        analysis.write_histogram(out / "histogram.csv", hist)
    write_manifest(out, "analyze", cfg, inputs, started)
    print(f"wrote analysis for {len(dump)} samples to {out}")


def cmd_imbalance(args, cfg):
    from focal3d.train import prepare_frame

    started = _now()
    root = cfg["data"]["root"]
    ids = _frame_ids(cfg, root, args.split)
    net = C.network_config(cfg)
    frames = _load_frames(cfg, root, ids)
    rows = []
    for f in frames:
        t = prepare_frame(f, net, cfg["seed"], cfg["train"]["pos_iou"], cfg["train"]["neg_iou"]).targets
        rep = analysis.imbalance_report(t)
        rows.append({"id": f.id, **rep.to_dict()})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "detector": cfg["detector"],
        "frames": len(rows),
        "anchors_per_frame": rows[0]["n_anchors"] if rows else 0,
        "mean_pos": float(np.mean([r["n_pos"] for r in rows])) if rows else 0.0,
        "mean_ratio": float(np.mean([r["ratio"] for r in rows])) if rows else 0.0,
        "per_frame": rows,
    }
    (out / "imbalance.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "imbalance", cfg, {"data": root}, started)
    print(f"mean positives {summary['mean_pos']:.2f}, mean neg/pos ratio {summary['mean_ratio']:.1f}")


def cmd_flops(args, cfg):
    from focal3d.network.models import flops_estimate, head_grid, preset

    started = _now()
    net = preset(cfg["detector"])
    rows = flops_estimate(net)
    g = head_grid(net)
    print(f"{'block':<12}{'layer':<16}{'GFLOPs':>12}")
    for block, name, f in rows:
        print(f"{block:<12}{name:<16}{f / 1e9:>12.3f}")
    print(f"anchors: {g.n_voxels * net.n_anchors}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "flops.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("block", "layer", "flops"))
            w.writerows(rows)
        write_manifest(out, "flops", cfg, {}, started)


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "predict": cmd_predict, "eval": cmd_eval,
    "analyze": cmd_analyze, "imbalance": cmd_imbalance, "flops": cmd_flops,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="focal3d", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"focal3d {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--detector", choices=C.PRESET_NAMES, help="shorthand for --set detector=NAME")
        p.add_argument("--data", help="dataset root (data.root)")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        p.add_argument("--gamma", type=float, help="shorthand for --set loss.gamma=G")
        p.add_argument("-v", "--verbose", action="store_true")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="write a synthetic KITTI-format dataset")
    common(p)
    p.add_argument("--count", type=int, required=True)

    p = sub.add_parser("train", help="two-phase training run")
    common(p)
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--no-val", action="store_true", help="skip validation evaluation")

    for name, hlp in (("predict", "write KITTI result files"), ("eval", "AP report"),
                      ("analyze", "loss distributions and histograms"), ("imbalance", "anchor imbalance report")):
        p = sub.add_parser(name, help=hlp)
        common(p)
        p.add_argument("--split", choices=["train", "val"], default=None)
        if name in ("predict", "eval", "analyze"):
            p.add_argument("--checkpoint", help="checkpoint stem or run directory")
        if name == "eval":
            p.add_argument("--results", help="directory of KITTI result files to score instead of a checkpoint")
        if name == "analyze":
            p.add_argument("--dump", help="CSV dump with header y,p_t")
            p.add_argument("--synthetic", action="store_true", help="use a seeded Beta-distributed dump")

    p = sub.add_parser("flops", help="per-layer FLOP estimate of a preset")
    common(p, out=False)
    p.add_argument("--out")
    return parser


def resolve_args(args):
    overrides = list(args.set)
    if args.data:
        overrides.append(("data.root", args.data))
    if args.seed is not None:
        overrides.append(("seed", args.seed))
    if args.gamma is not None:
        overrides.append(("loss.gamma", args.gamma))
    return C.load_config(args.config, overrides, args.detector)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command in ("predict", "eval") and not (args.checkpoint or getattr(args, "results", None)):
        parser.error(f"{args.command} needs --checkpoint" + (" or --results" if args.command == "eval" else ""))
    try:
        cfg = resolve_args(args)
        COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VersionMismatchError as exc:
        print(f"version mismatch: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, GenerationError, StructuralError, DomainError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
