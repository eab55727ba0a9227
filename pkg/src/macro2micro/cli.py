"""Command-line entry points.

Every subcommand accepts ``--config`` (TOML, see :mod:`macro2micro.config`)
and ``--set section.key=value`` overrides; the common flags below are
shorthands for the matching config keys. Failures print one JSON record
to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .checkpoint import load_bundle
from .config import VIEW_CHOICES, dump_config, load_config, parse_value
from .errors import ConfigInvalid, Macro2MicroError, MissingFile, ShapeMismatch
from .evaluation import (aggregate, distance_profile, image_metrics, linear_probe,
                         masked_metrics, pca_embed, write_metric_table)
from .pipelines import train_three_views, triview_synthesize
from .trainer import TASK_MODALITIES, fit, load_pairs, slice_predictor
from .volume_io import (VIEWS, DatasetManifest, ManifestEntry, VolumeGrid, load_volume,
                        make_synthetic_pairs, make_synthetic_volume_pair, read_manifest,
                        save_volume, write_manifest)

log = logging.getLogger("macro2micro")

EXIT_CONFIG = 2
EXIT_FAILURE = 1
VOLUME_SUFFIXES = (".nii", ".nii.gz", ".png")


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _overrides(args):
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigInvalid(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = parse_value(value.strip())
    for flag, key in (("seed", "train.seed"), ("device", "train.device"),
                      ("checkpoint", "run.checkpoint"), ("out", "run.out_dir"),
                      ("view", "run.view"), ("manifest", "run.manifest")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(Path(value).resolve()) if flag in ("checkpoint", "out", "manifest") \
                else value
    return out


def _config(args):
    cfg = load_config(args.config, _overrides(args))
    torch.manual_seed(cfg.train.seed)
    return cfg


def _stem(path):
    name = Path(path).name
    for suffix in VOLUME_SUFFIXES:
        if name.endswith(suffix):
            return name[:-len(suffix)]
    return Path(path).stem


def _volume_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFile(f"no such directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.name.endswith(VOLUME_SUFFIXES))
    return {_stem(p): p for p in files}


def _paired_files(pred_dir, gt_dir):
    pred, gt = _volume_files(pred_dir), _volume_files(gt_dir)
    missing = sorted(set(pred) ^ set(gt))
    if missing:
        raise ShapeMismatch(f"prediction and reference directories differ: {missing[:5]}")
    if not pred:
        raise MissingFile(f"no volumes found in {pred_dir}")
    return [(k, pred[k], gt[k]) for k in sorted(pred)]


def _axial_slices(v):
    return [v.data[:, :, k].astype(np.float64) for k in range(v.shape[2])]


def _split(manifests, name):
    if name not in manifests:
        raise ConfigInvalid(f"manifest has no {name!r} split (found {sorted(manifests)})")
    return manifests[name]


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(x):
    return f"{x:.12g}" if isinstance(x, float) else x


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth_data(args):
    """Write a synthetic paired dataset plus manifest (slices or volumes)."""
    out = Path(args.out).resolve()
    out.mkdir(parents=True, exist_ok=True)
    src_mod, tgt_mod = TASK_MODALITIES[args.task]
    entries = []
    for i in range(args.subjects):
        if args.volumes:
            src, tgt = make_synthetic_volume_pair(args.size, args.seed * 100003 + i)
            src_data, tgt_data = src.data, tgt.data
        else:
            p = make_synthetic_pairs(1, args.size, args.seed * 100003 + i)[0]
            src_data, tgt_data = p.source, p.target
        sid = f"sub{i:04d}"
        for tag, data, mod in (("src", src_data, src_mod), ("tgt", tgt_data, tgt_mod)):
            save_volume(VolumeGrid(data, modality=mod, subject_id=sid), out / f"{sid}_{tag}.nii.gz")
        entries.append(ManifestEntry(sid, str(out / f"{sid}_src.nii.gz"), str(out / f"{sid}_tgt.nii.gz")))
    n_test = max(1, round(args.subjects * args.test_fraction)) if args.subjects > 2 else 0
    n_val = n_test
    n_train = len(entries) - n_val - n_test
    if n_train < 1:
        raise ConfigInvalid("too few subjects for a train/val/test split")
    manifests = [DatasetManifest(entries[:n_train], "train"),
                 DatasetManifest(entries[n_train:n_train + n_val], "val"),
                 DatasetManifest(entries[n_train + n_val:], "test")]
    write_manifest([m for m in manifests if m.entries], out / "manifest.csv")
    print(out / "manifest.csv")
    return 0


def cmd_train(args):
    cfg = _config(args)
    run = cfg.run
    if not run.manifest:
        raise ConfigInvalid("run.manifest is required for training")
    manifests = read_manifest(run.manifest)
    train, val = _split(manifests, "train"), manifests.get("val")
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
    resume = run.checkpoint or None

    if run.view == "all":
        results = train_three_views(train, cfg.train, val, out, run.slice_offsets, run.task)
    else:
        vdir = out / run.view
        res = fit(train, cfg.train, val=val, out_dir=vdir, resume_from=resume,
                  log_path=vdir / "train_log.ndjson", view=run.view,
                  slice_offsets=run.slice_offsets, task=run.task)
        results = {run.view: res}

    rows = []
    for view, res in results.items():
        for rec in res.val_reports:
            for r in (rec["whole"], rec["wm"]):
                if r is not None:
                    rows.append([view, rec["epoch"], rec["step"], r.mask_label, _fmt(r.ssim),
                                 _fmt(r.psnr_db), _fmt(r.mae), _fmt(r.mse), r.n_subjects])
        if cfg.eval.figures and res.log:
            plotting.plot_loss_curve(res.log, out / view / "loss_curve.png")
    if rows:
        _write_csv(out / "val_metrics.csv",
                   ["view", "epoch", "step", "mask", "SSIM", "PSNR", "MAE", "MSE", "n_subjects"],
                   rows)
    print(json.dumps({"out_dir": str(out), "steps": {v: r.state.step for v, r in results.items()}}))
    return 0


def _checkpoint_path(cfg, view):
    ckpt = Path(cfg.run.checkpoint) if cfg.run.checkpoint else Path(cfg.run.out_dir) / view / "final.m2m"
    if ckpt.is_dir():
        ckpt = ckpt / f"{view}.m2m" if (ckpt / f"{view}.m2m").exists() else ckpt / view / "final.m2m"
    if not ckpt.is_file():
        raise MissingFile(f"no checkpoint at {ckpt}")
    return ckpt


def cmd_synthesize(args):
    """Predict the slices of one manifest split; writes pred/ and gt/ side by side."""
    cfg = _config(args)
    view = "axial" if cfg.run.view == "all" else cfg.run.view
    bundle = load_bundle(_checkpoint_path(cfg, view)).to(device=cfg.train.device)
    manifest = _split(read_manifest(cfg.run.manifest), args.split)
    pairs = load_pairs(manifest, view, cfg.run.slice_offsets, cfg.run.task)
    out = Path(cfg.run.out_dir) / "synth" / args.split
    predict = slice_predictor(bundle)
    _, tgt_mod = TASK_MODALITIES[cfg.run.task]
    timings = []
    for p in pairs:
        t0 = time.perf_counter()
        pred = predict(p.source[None])[0]
        timings.append(time.perf_counter() - t0)
        name = p.tag.replace(":", "_") + ".nii.gz"
        save_volume(VolumeGrid(pred, modality=tgt_mod, subject_id=p.subject_id), out / "pred" / name)
        save_volume(VolumeGrid(p.target, modality=tgt_mod, subject_id=p.subject_id),
                    out / "gt" / name)
        save_volume(VolumeGrid(p.source, subject_id=p.subject_id), out / "source" / name)
    print(json.dumps({"out_dir": str(out), "n": len(pairs),
                      "seconds_per_slice": float(np.mean(timings)) if timings else None}))
    return 0


def cmd_evaluate(args):
    """Score prediction files against references with identical names."""
    cfg = _config(args)
    pred_dir = Path(args.pred or Path(cfg.run.out_dir) / "synth" / "test" / "pred")
    gt_dir = Path(args.gt or pred_dir.parent / "gt")
    out = Path(args.report_dir or cfg.run.out_dir) / "report"
    wm_t = cfg.eval.wm_threshold if cfg.run.task == "t1_to_fa" else None

    per_item, whole, wm = [], [], []
    first = None
    for name, pf, gf in _paired_files(pred_dir, gt_dir):
        pv, gv = load_volume(pf), load_volume(gf)
        if pv.shape != gv.shape:
            raise ShapeMismatch(f"{name}: prediction {pv.shape} vs reference {gv.shape}")
        reports = [image_metrics(p, g) for p, g in zip(_axial_slices(pv), _axial_slices(gv))]
        r = aggregate(reports, "whole")
        whole.append(r)
        per_item.append([name, "whole", _fmt(r.ssim), _fmt(r.psnr_db), _fmt(r.mae), _fmt(r.mse)])
        if wm_t is not None:
            wms = [masked_metrics(p, g, wm_t)
                   for p, g in zip(_axial_slices(pv), _axial_slices(gv)) if (g > wm_t).any()]
            if wms:
                m = aggregate(wms, "wm")
                wm.append(m)
                per_item.append([name, "wm", _fmt(m.ssim), _fmt(m.psnr_db), _fmt(m.mae),
                                 _fmt(m.mse)])
        if first is None:
            first = (pv.data[:, :, pv.shape[2] // 2], gv.data[:, :, gv.shape[2] // 2])

    rows = [(cfg.run.method, aggregate(whole, "whole"))]
    if wm:
        rows.append((cfg.run.method, aggregate(wm, "wm")))
    write_metric_table(rows, out / "metrics.csv")
    _write_csv(out / "per_item.csv", ["item", "mask", "SSIM", "PSNR", "MAE", "MSE"], per_item)

    if args.profile:
        view = "axial" if cfg.run.view == "all" else cfg.run.view
        bundle = load_bundle(_checkpoint_path(cfg, view))
        manifest = _split(read_manifest(cfg.run.manifest), args.split)
        src_mod, tgt_mod = TASK_MODALITIES[cfg.run.task]
        vols = [(load_volume(e.source_path, src_mod), load_volume(e.target_path, tgt_mod))
                for e in manifest.entries]
        prof = distance_profile(bundle, vols, view, cfg.eval.profile_offsets,
                                wm_threshold=wm_t)
        _write_csv(out / "profile.csv", ["offset", "mask", "SSIM", "PSNR", "MAE", "MSE"],
                   [[row.offset, r.mask_label, _fmt(r.ssim), _fmt(r.psnr_db), _fmt(r.mae),
                     _fmt(r.mse)] for row in prof for r in (row.whole, row.wm) if r is not None])
        if cfg.eval.figures:
            plotting.plot_distance_profile(prof, out / "profile.png")
    if cfg.eval.figures and first is not None:
        p, g = first
        plotting.plot_slice_panel([p, g, np.abs(p - g)], ["synthesized", "reference", "|error|"],
                                  out / "example.png")
    print(json.dumps({"report": str(out / "metrics.csv")}))
    return 0


def cmd_triview(args):
    """Assemble 3D volumes from the three per-view checkpoints."""
    cfg = _config(args)
    bundles = {v: load_bundle(_checkpoint_path(cfg, v)).to(device=cfg.train.device)
               for v in VIEWS}
    src_mod, tgt_mod = TASK_MODALITIES[cfg.run.task]
    if args.source:
        sources = [load_volume(args.source, src_mod)]
    else:
        manifest = _split(read_manifest(cfg.run.manifest), args.split)
        sources = [load_volume(e.source_path, src_mod, e.subject_id) for e in manifest.entries]
    out = Path(cfg.run.out_dir) / "triview"
    written = []
    for src in sources:
        vol = triview_synthesize(bundles, src)
        vol.modality = tgt_mod
        path = out / f"{src.subject_id or 'volume'}.nii.gz"
        save_volume(vol, path)
        written.append(str(path))
    print(json.dumps({"volumes": written}))
    return 0


def _stack_dir(directory):
    files = _volume_files(directory)
    if not files:
        raise MissingFile(f"no volumes found in {directory}")
    names = sorted(files)
    return names, np.stack([load_volume(files[n]).data[:, :, 0] for n in names])


def cmd_pca(args):
    cfg = _config(args)
    groups, names = {}, None
    for label, directory in (("gt", args.gt), ("generated", args.pred), ("source", args.source)):
        if directory:
            n, stack = _stack_dir(directory)
            if names is not None and n != names:
                raise ShapeMismatch(f"{label} directory lists different items")
            names, groups[label] = n, stack
    emb = pca_embed(groups, batch_size=cfg.eval.pca_batch_size)
    out = Path(args.report_dir or cfg.run.out_dir) / "report"
    _write_csv(out / "pca_coords.csv", ["group", "item", "pc1", "pc2"],
               [[g, names[i], _fmt(float(xy[0])), _fmt(float(xy[1]))]
                for g, c in emb.coordinates.items() for i, xy in enumerate(c)])
    summary = [["explained_variance_ratio_1", _fmt(float(emb.explained_variance_ratio[0]))],
               ["explained_variance_ratio_2", _fmt(float(emb.explained_variance_ratio[1]))],
               ["n_features", emb.n_features]]
    summary += [[f"centroid_distance_{a}_{b}", _fmt(d)] for (a, b), d in emb.centroid_distances.items()]
    if emb.matched_distance is not None:
        summary.append(["matched_distance", _fmt(emb.matched_distance)])
    _write_csv(out / "pca_summary.csv", ["quantity", "value"], summary)
    if cfg.eval.figures:
        plotting.plot_pca(emb, out / "pca.png")
    print(json.dumps({"report": str(out / "pca_summary.csv")}))
    return 0


def cmd_probe(args):
    """Cross-validated linear probe; labels CSV has columns ``item,label``."""
    cfg = _config(args)
    names, stack = _stack_dir(args.images)
    labels = {}
    with open(args.labels, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            labels[row["item"]] = row["label"]
    missing = [n for n in names if n not in labels]
    if missing:
        raise ShapeMismatch(f"no label for {missing[:5]}")
    y = np.array([labels[n] for n in names])
    if args.task == "regression":
        y = y.astype(np.float64)
    res = linear_probe(stack, y, args.task, folds=cfg.eval.probe_folds, seed=cfg.train.seed)
    out = Path(args.report_dir or cfg.run.out_dir) / "report"
    _write_csv(out / "probe.csv", ["task", "metric", "value", "n", "folds"],
               [[args.task, k, _fmt(v), len(y), cfg.eval.probe_folds] for k, v in res.items()])
    print(json.dumps(res))
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--device", help="torch device, e.g. cpu or cuda:0")
    p.add_argument("--checkpoint", help="checkpoint file or directory of per-view checkpoints")
    p.add_argument("--out", help="run output directory (run.out_dir)")
    p.add_argument("--view", choices=VIEW_CHOICES)
    p.add_argument("--manifest", help="dataset manifest CSV (run.manifest)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override any config key; may be repeated")


def build_parser():
    parser = argparse.ArgumentParser(prog="macro2micro",
                                     description="Octave-conv GAN for cross-modal brain MRI synthesis")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one view (or all three with --view all)")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="predict the slices of a manifest split")
    _common(p)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="SSIM/PSNR/MAE/MSE report for pred vs reference files")
    _common(p)
    p.add_argument("--pred", help="directory of predicted volumes")
    p.add_argument("--gt", help="directory of reference volumes (same file names)")
    p.add_argument("--report-dir", help="write report/ here instead of the run directory")
    p.add_argument("--profile", action="store_true",
                   help="also score slices at eval.profile_offsets from the centre")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("triview", help="3D synthesis from the three per-view models")
    _common(p)
    p.add_argument("--source", help="single source volume (default: the manifest split)")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_triview)

    p = sub.add_parser("pca", help="2-component PCA embedding of image groups")
    _common(p)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--source")
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("probe", help="cross-validated linear probe on images")
    _common(p)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True, help="CSV with columns item,label")
    p.add_argument("--task", choices=("binary", "regression"), default="binary")
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("synth-data", help="write a synthetic paired dataset and manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--volumes", action="store_true", help="3D volumes instead of 2D slices")
    p.add_argument("--task", choices=sorted(TASK_MODALITIES), default="t1_to_fa")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except Macro2MicroError as exc:
        record = {"error": exc.code, "type": type(exc).__name__, "message": str(exc),
                  "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, ConfigInvalid) else EXIT_FAILURE
    except (OSError, ValueError) as exc:
        record = {"error": "failure", "type": type(exc).__name__, "message": str(exc),
                  "command": args.command}
        print(json.dumps(record), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
