"""Command-line entry point: generate | train | eval | ablate.

Every run is reproducible from its config file plus seed: training data is
regenerated deterministically (or loaded from ``data.dir``), model init is
seeded, and all outputs are CSV files with figures rendered alongside.

Exit codes: 0 success, 2 config error, 3 numerical failure (non-finite
loss), 4 I/O error (including a run directory already owned by another
process).
"""

import argparse
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as configmod
from . import data as datamod
from . import detect, reports
from .config import ConfigError, RunConfig
from .detect import find_local_maxima, froc, lesion_voxel_positions, match_detections
from .model import (SegModel, load_checkpoint, predict, save_checkpoint, train)
from .tensor import Adam, NumericalError

LOCKFILE = ".evlesion.lock"

ARMS = {
    "none+focal": ("none", "focal"),
    "gcsa+focal": ("gcsa", "focal"),
    "glcsa+focal": ("glcsa", "focal"),
    "none+evidential": ("none", "evidential"),
    "gcsa+evidential": ("gcsa", "evidential"),
    "glcsa+evidential": ("glcsa", "evidential"),
    "none+ec": ("none", "ec"),
    "gcsa+ec": ("gcsa", "ec"),
    "glcsa+ec": ("glcsa", "ec"),
}
DEFAULT_ARMS = ("none+focal", "gcsa+focal", "gcsa+ec", "glcsa+ec")


@contextmanager
def run_directory(path):
    """Create (if needed) and lock a run directory for this process."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lock = path / LOCKFILE
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"run directory {path} is locked by another process "
                      f"(stale? remove {lock})") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield path
    finally:
        lock.unlink(missing_ok=True)


def arm_config(cfg, arm):
    """A copy of cfg rewired for one ablation arm."""
    attention, loss_kind = ARMS[arm]
    new = configmod.parse(configmod.serialize(cfg))
    new.model.attention = attention
    new.loss.kind = loss_kind
    new.model.head = "softmax" if loss_kind == "focal" else "evidential"
    return new.validate()


def load_or_generate(cfg, which):
    """Dataset for 'train' or 'test' per the config."""
    d = cfg.data
    if d.dir:
        sub = Path(d.dir) / which
        paths = sorted(sub.glob("*.vol"))
        if not paths:
            raise OSError(f"no .vol files in {sub}")
        return [datamod.read_volume(p) for p in paths]
    gen_cfg = cfg.generator_config()
    seed = d.train_seed if which == "train" else d.test_seed
    count = d.train_count if which == "train" else d.test_count
    return datamod.generate(seed, count, gen_cfg)


def build_model(cfg):
    return SegModel(cfg.model, seed=cfg.run.seed)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate(cfg, out):
    with run_directory(out) as outdir:
        for which in ("train", "test"):
            sub = outdir / which
            sub.mkdir(exist_ok=True)
            volumes = load_or_generate(cfg, which)
            for i, vol in enumerate(volumes):
                datamod.write_volume(sub / f"volume_{i:05d}.vol", vol)
        configmod.save(outdir / "config.txt", cfg)
    return 0


def cmd_train(cfg, out, resume=None, quiet=False):
    with run_directory(out) as outdir:
        samples = load_or_generate(cfg, "train")
        model = build_model(cfg)
        train_cfg = cfg.train_config()
        opt = Adam(model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
        start_epoch = 0
        prior_trace = []
        if resume:
            start_epoch = load_checkpoint(resume, model, opt)
            prior_csv = Path(resume).parent / "loss_trace.csv"
            if prior_csv.exists():
                prior_trace = _read_trace(prior_csv)[:start_epoch]

        def log(row):
            if not quiet:
                print(f"epoch {row['epoch']:3d}  loss {row['loss']:.6g}  "
                      f"fit {row['fit']:.6g}  kl {row['kl']:.6g}")

        trace, opt = train(model, samples, train_cfg, opt=opt,
                           start_epoch=start_epoch, log=log)
        full_trace = prior_trace + trace
        save_checkpoint(outdir / "checkpoint.bin", model, opt, epoch=train_cfg.epochs)
        reports.write_trace_csv(outdir / "loss_trace.csv", full_trace)
        reports.render_trace_figure(outdir / "loss_trace.png", full_trace)
        configmod.save(outdir / "config.txt", cfg)
    return 0


def _read_trace(path):
    import csv as _csv

    with open(path) as fh:
        rows = list(_csv.DictReader(fh))
    return [{"epoch": int(r["epoch"]), "loss": float(r["loss"]),
             "fit": float(r["fit"]), "kl": float(r["kl"])} for r in rows]


def evaluate(cfg, model, test_samples):
    """All evaluation products for one model on one test set.

    Returns dict with the unthresholded FROC curve, per-u-threshold curves,
    the calibration table, and the detection rows.
    """
    ev = cfg.eval
    per_threshold = {t: [] for t in ev.u_thresholds}
    base_per_volume = []
    det_rows = []
    cal_u, cal_pred, cal_true = [], [], []

    for vol_id, vol in enumerate(test_samples):
        pred = predict(model, vol.image)
        score_map = pred["belief"][..., 1] if ev.score == "belief" else pred["prob"]
        uncert = pred["uncertainty"]
        label = vol.label
        if cfg.eval.match_mode == "centroid":
            lesion_pts = [np.array([l.center_mm]) for l in vol.lesions]
        else:
            lesion_pts = lesion_voxel_positions(label, vol.spacing, vol.lesions)

        dets = find_local_maxima(score_map, vol.spacing, min_score=ev.min_score)
        match_detections(dets, lesion_pts, radius_mm=ev.match_radius_mm)
        base_per_volume.append((dets, len(lesion_pts)))
        for d in dets:
            det_rows.append((vol_id, *d.position_mm, d.score, "TP" if d.is_tp else "FP"))

        for t in ev.u_thresholds:
            dets_t = find_local_maxima(score_map, vol.spacing, min_score=ev.min_score,
                                       uncert=uncert, u_threshold=t)
            match_detections(dets_t, lesion_pts, radius_mm=ev.match_radius_mm)
            per_threshold[t].append((dets_t, len(lesion_pts)))

        cal_u.append(uncert.reshape(-1))
        cal_pred.append((pred["p_hat"].argmax(axis=-1)).reshape(-1))
        cal_true.append(label.reshape(-1).astype(int))

    curve = froc(base_per_volume)
    curves_u = {t: froc(per_threshold[t]) for t in ev.u_thresholds}
    table = detect.calibration(np.concatenate(cal_u), np.concatenate(cal_pred),
                               np.concatenate(cal_true))
    return {"froc": curve, "froc_by_u": curves_u, "calibration": table,
            "detections": det_rows}


def write_eval_outputs(outdir, cfg, results):
    outdir = Path(outdir)
    reports.write_detections_csv(outdir / "detections.csv", results["detections"])
    reports.write_froc_csv(outdir / "froc.csv", results["froc"])
    reports.write_calibration_csv(outdir / "calibration.csv", results["calibration"])
    for t, curve in results["froc_by_u"].items():
        reports.write_froc_csv(outdir / f"froc_u{float(t)}.csv", curve)
    reports.render_froc_figure(outdir / "froc.png", {"model": results["froc"]})
    reports.render_froc_figure(
        outdir / "froc_uncertainty.png",
        {f"u <= {float(t)}": c for t, c in results["froc_by_u"].items()},
        title="FROC by uncertainty threshold")
    reports.render_calibration_figure(outdir / "calibration.png",
                                      {"model": results["calibration"]})


def cmd_eval(cfg, out, checkpoint):
    with run_directory(out) as outdir:
        test_samples = load_or_generate(cfg, "test")
        model = build_model(cfg)
        load_checkpoint(checkpoint, model)
        results = evaluate(cfg, model, test_samples)
        write_eval_outputs(outdir, cfg, results)
        configmod.save(outdir / "config.txt", cfg)
    return 0


def cmd_ablate(cfg, out, arms=DEFAULT_ARMS, quiet=False):
    """Train and evaluate each arm on the shared dataset; emit a comparison."""
    for arm in arms:
        if arm not in ARMS:
            raise ConfigError(f"unknown arm {arm!r}; choose from {sorted(ARMS)}")
    with run_directory(out) as outdir:
        comparison = []
        curves = {}
        for arm in arms:
            acfg = arm_config(cfg, arm)
            arm_dir = outdir / arm.replace("+", "_")
            arm_dir.mkdir(exist_ok=True)
            samples = load_or_generate(acfg, "train")
            model = SegModel(acfg.model, seed=acfg.run.seed)
            tc = acfg.train_config()
            opt = Adam(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)

            def log(row, _arm=arm):
                if not quiet:
                    print(f"[{_arm}] epoch {row['epoch']:3d}  loss {row['loss']:.6g}")

            trace, opt = train(model, samples, tc, opt=opt, log=log)
            save_checkpoint(arm_dir / "checkpoint.bin", model, opt, epoch=tc.epochs)
            reports.write_trace_csv(arm_dir / "loss_trace.csv", trace)
            test_samples = load_or_generate(acfg, "test")
            results = evaluate(acfg, model, test_samples)
            write_eval_outputs(arm_dir, acfg, results)
            sens = results["froc"].sensitivity_at(cfg.eval.fps_grid)
            comparison.append((arm, [float(s) for s in sens]))
            curves[arm] = results["froc"]
        reports.write_comparison_csv(outdir / "comparison.csv", comparison,
                                     fps_grid=cfg.eval.fps_grid)
        reports.render_froc_figure(outdir / "comparison.png", curves,
                                   title="Ablation FROC")
        configmod.save(outdir / "config.txt", cfg)
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="evlesion",
                                description="Uncertainty-aware lesion detection runs")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=str, default=None,
                        help="run config file (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, default=None, help="override run.seed")
        sp.add_argument("--out", type=str, required=True, help="output directory")

    g = sub.add_parser("generate", help="write dataset volumes to disk")
    common(g)

    t = sub.add_parser("train", help="train a model, write checkpoint + loss trace")
    common(t)
    t.add_argument("--checkpoint", type=str, default=None, help="resume from checkpoint")
    t.add_argument("--quiet", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint: FROC, calibration, detections")
    common(e)
    e.add_argument("--checkpoint", type=str, required=True)
    e.add_argument("--u-thresholds", type=str, default=None,
                   help="comma-separated uncertainty thresholds")

    a = sub.add_parser("ablate", help="train + eval the attention/loss arm matrix")
    common(a)
    a.add_argument("--arms", type=str, default=",".join(DEFAULT_ARMS))
    a.add_argument("--quiet", action="store_true")
    return p


def _load_config(args):
    cfg = configmod.load(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if getattr(args, "u_thresholds", None):
        try:
            cfg.eval.u_thresholds = tuple(float(s) for s in args.u_thresholds.split(","))
        except ValueError as exc:
            raise ConfigError(f"bad --u-thresholds: {exc}") from None
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "generate":
            return cmd_generate(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, resume=args.checkpoint, quiet=args.quiet)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, checkpoint=args.checkpoint)
        if args.command == "ablate":
            arms = tuple(s.strip() for s in args.arms.split(",") if s.strip())
            return cmd_ablate(cfg, args.out, arms=arms, quiet=args.quiet)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
