"""Command-line entry point: ``dualcue <command>``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
Relative output paths are placed under ``$DUALCUE_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .backbone import attention_rollout, cls_heatmap, patch_grid_mass, save_heatmap
from .datasets import generate_synthetic, load_artifact_boxes, load_images, load_manifest
from .errors import ConfigurationError, DualCueError
from .framework import (
    build_model,
    channel_stats,
    export_detector,
    fit,
    load_detector,
    load_training_checkpoint,
    predict,
)
from .metrics import evaluate, video_aggregate
from .threshold import (
    ScoreTable,
    accuracy_at,
    grid_threshold,
    grid_upper,
    optimal_threshold,
    plot_curve,
    read_scores,
    transfer_eval,
    write_scores,
)

log = logging.getLogger("dualcue")
OUTPUT_ROOT_ENV = "DUALCUE_OUTPUT_ROOT"


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _out(path):
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _config(args):
    return cfgmod.load_config(getattr(args, "config", None), getattr(args, "set", None))


def _kind(args):
    return "adjusted_p" if getattr(args, "adjusted", False) else "raw_p"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = _config(args)
    out = _out(args.out or Path(cfg.output.dir) / "data")
    result = generate_synthetic(cfg.synth, out)
    cfg.data.train_manifest = str(result.paths["train"])
    cfg.write(out / "effective_config.ini")
    for name, path in result.paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_train(args):
    cfg = _config(args)
    if args.train_manifest:
        cfg.data.train_manifest = args.train_manifest
    if not cfg.data.train_manifest:
        raise ConfigurationError("no training manifest: set data.train_manifest or pass --train-manifest")
    out = _out(args.out or cfg.output.dir)
    torch.set_num_threads(args.threads)
    manifest = load_manifest(cfg.data.train_manifest)
    train_m = manifest.select("train") if any(e.split == "train" for e in manifest) else manifest
    val_m = manifest.select(cfg.data.val_split)
    x = load_images(train_m)
    y = train_m.labels
    _check_size(x, cfg.model.image_size, cfg.data.train_manifest)
    vx = load_images(val_m) if len(val_m) else None
    vy = val_m.labels if len(val_m) else None
    if vy is not None and len(set(vy.tolist())) < 2:
        log.warning("validation split has a single class; validation AUC disabled")
        vx = vy = None

    if args.resume:
        model, state, meta = load_training_checkpoint(args.resume, cfg.train)
        log.info("resuming from %s at epoch %d", args.resume, state.epoch)
    else:
        model = build_model(cfg.model, cfg.train, cfg.loss)
        model.set_normalization(*channel_stats(x))
        state = None
    cfg.write(out / "effective_config.ini")
    state = fit(model, x, y, cfg.train, cfg.loss, vx, vy, out_dir=out, state=state, run_meta={"config": cfg.to_ini()})
    print(f"trained {state.epoch} epoch(s); checkpoints in {out}")
    return 0


def _check_size(images, expected, source):
    if images.shape[-1] != expected or images.shape[-2] != expected:
        raise ConfigurationError(
            f"{source}: images are {images.shape[-2]}x{images.shape[-1]} but the model expects {expected}x{expected}"
        )


def score_manifest(detector, manifest, batch_size=256):
    x = load_images(manifest)
    _check_size(x, detector.vit_config.image_size, "manifest")
    p, u = predict(detector, x, batch_size)
    return ScoreTable(
        [e.path for e in manifest],
        [e.video_id for e in manifest],
        [e.dataset_id for e in manifest],
        manifest.labels,
        p,
        u,
    )


def cmd_score(args):
    torch.set_num_threads(args.threads)
    detector, _ = load_detector(args.checkpoint)
    table = score_manifest(detector, load_manifest(args.manifest))
    if args.video_level:
        table = video_aggregate(table)
    out = _out(args.out)
    write_scores(table, out)
    print(f"wrote {len(table)} rows to {out}")
    return 0


def _load_named(paths):
    return {Path(p).stem: (Path(p), read_scores(p)) for p in paths}


def cmd_threshold(args):
    kind = _kind(args)
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tables = _load_named(args.scores)
    summary = []
    for name, (_, table) in tables.items():
        scored = table.scored(kind)
        report = optimal_threshold(scored.scores, scored.labels, kind)
        (out / f"{name}.{kind}.threshold.txt").write_text(report.to_text())
        plot_curve(report, out / f"{name}.{kind}.curve.png", title=name)
        line = f"{name}: score_kind={kind} tau_ot={report.tau_ot:.6g} acc={report.acc_at_tau:.6f}"
        if args.grid:
            upper = grid_upper(scored.scores, kind, args.grid)
            tau_g = grid_threshold(lambda t: accuracy_at(scored.scores, scored.labels, t), args.grid, upper)
            line += f" grid_tau={tau_g:.6g} grid_acc={accuracy_at(scored.scores, scored.labels, tau_g):.6f}"
        summary.append(line)
        print(line)
    if args.transfer:
        summary += _transfer_table(args.transfer, tables, kind, out)
    (out / f"threshold_summary.{kind}.txt").write_text("\n".join(summary) + "\n")
    return 0


def _lookup(tables, key):
    key = key.strip()
    if key in tables:
        return key
    stem = Path(key).stem
    if stem in tables:
        return stem
    raise ConfigurationError(f"--transfer refers to {key!r}, which is not among the score files")


def _transfer_table(pairing, tables, kind, out):
    """``SRC:TGT1,TGT2`` -> one row per method with per-target ACC and the average."""
    src, sep, tgts = pairing.partition(":")
    if not sep or not tgts:
        raise UsageError("--transfer expects SRC:TGT[,TGT...]")
    src = _lookup(tables, src)
    targets = [_lookup(tables, t) for t in tgts.split(",")]
    source = tables[src][1]
    rows = []
    fixed = [accuracy_at(tables[t][1].p, tables[t][1].label, 0.5) for t in targets]
    rows.append(["tau=0.5", "raw_p", 0.5] + fixed + [float(np.mean(fixed))])
    res = [transfer_eval(source.scored(kind), tables[t][1].scored(kind)) for t in targets]
    accs = [r.target_acc for r in res]
    rows.append([f"ot({src})", kind, res[0].tau] + accs + [float(np.mean(accs))])
    path = out / f"transfer_{src}.{kind}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "score_kind", "tau"] + targets + ["avg"])
        writer.writerows(rows)
    lines = [f"transfer {src} -> {','.join(targets)}"]
    for r in rows:
        lines.append("  " + " ".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))
    print("\n".join(lines))
    return lines


def cmd_eval(args):
    kind = _kind(args)
    rows = []
    for name, (_, table) in _load_named(args.scores).items():
        report = evaluate(table.scores(kind), table.label, args.tau, name=name)
        rows.append(report.row())
        print(report.to_text())
    out = _out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return 0


def cmd_rollout(args):
    torch.set_num_threads(args.threads)
    detector, _ = load_detector(args.checkpoint)
    manifest = load_manifest(args.manifest)
    entries = [e for e in manifest if e.label == 1] if args.fakes_only else list(manifest)
    entries = entries[: args.limit]
    sub = type(manifest)(entries, manifest.root)
    x = torch.as_tensor(load_images(sub))
    _check_size(x.numpy(), detector.vit_config.image_size, args.manifest)
    grid = detector.vit_config.grid
    rollout = attention_rollout(detector.attentions(x))
    heat = cls_heatmap(rollout, grid).numpy()
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    boxes = load_artifact_boxes(args.artifacts) if args.artifacts else {}
    masses = []
    for i, e in enumerate(entries):
        stem = Path(e.path).stem + f"_{i:04d}"
        np.save(out / f"{stem}.rollout.npy", rollout[i].numpy())
        save_heatmap(heat[i], out / f"{stem}.heatmap.png", size=detector.vit_config.image_size * 4)
        if e.path in boxes:
            masses.append(patch_grid_mass(heat[i], boxes[e.path][1], detector.vit_config.patch_size))
    if masses:
        m = np.asarray(masses)
        print(f"artifact mass {m[:, 0].mean():.4f} vs uniform baseline {m[:, 1].mean():.4f} over {len(m)} fakes")
    print(f"wrote {len(entries)} rollouts to {out}")
    return 0


def cmd_export(args):
    model, _, meta = load_training_checkpoint(args.checkpoint)
    out = _out(args.out)
    export_detector(model, out, {"source_epoch": meta.get("epoch")})
    print(f"wrote detector to {out}")
    return 0


def cmd_config(args):
    sys.stdout.write(_config(args).to_ini())
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="dualcue", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        return p

    p = with_config(sub.add_parser("synth", help="generate the synthetic forgery dataset"))
    p.add_argument("--out", help="output directory (default: <output.dir>/data)")
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("train", help="train the dual-branch model"))
    p.add_argument("--train-manifest")
    p.add_argument("--out", help="run directory (default: output.dir)")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="dump main-branch (p, u) scores for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--video-level", action="store_true", help="average frame scores per video")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("threshold", help="optimal-accuracy threshold search")
    p.add_argument("scores", nargs="+")
    p.add_argument("--adjusted", action="store_true", help="use p/u instead of p")
    p.add_argument("--grid", type=float, metavar="STEP", help="also run the black-box grid search")
    p.add_argument("--transfer", metavar="SRC:TGT[,TGT...]", help="pick tau on SRC, evaluate on targets")
    p.add_argument("--out", default="threshold")
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("eval", help="AUC / ACC / HTER table")
    p.add_argument("scores", nargs="+")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--adjusted", action="store_true")
    p.add_argument("--out", default="results.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="attention-rollout heatmaps from the main branch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=16)
    p.add_argument("--fakes-only", action="store_true")
    p.add_argument("--artifacts", help="artifact sidecar CSV, to report mass on the artifact box")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("export", help="strip the auxiliary branch from a training checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = with_config(sub.add_parser("config", help="print the effective configuration"))
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
        )
        return args.func(args)
    except DualCueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
