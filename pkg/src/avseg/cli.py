"""Command-line entry point: generate, preprocess-audio, train, eval, ablate, plot.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command prints
its resolved configuration before doing any work.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import audio as audiofe
from . import config as cfgmod
from . import data as avdata
from . import evaluate as evalvis
from . import train as trainmod
from .infer import InferenceConfig, gt_tracks_from_clip, predict_clip
from .model import load_checkpoint


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common_config_flags(p):
    p.add_argument("--config", type=Path, default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="avseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic audio-video dataset")
    _common_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--clips", type=int, default=8, help="training clips")
    p.add_argument("--val-clips", type=int, default=2)
    p.add_argument("--force", action="store_true", help="overwrite a nonempty output dir")

    p = sub.add_parser("preprocess-audio", help="write per-clip spectrogram slice files")
    _common_config_flags(p)
    p.add_argument("--dataset", type=Path, required=True)

    p = sub.add_parser("train", help="train a model")
    _common_config_flags(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-clips", type=int, default=None)
    p.add_argument("--no-crossover", action="store_true")
    p.add_argument("--no-audio", action="store_true")
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _common_config_flags(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--format", choices=["table", "records"], default="table")
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--no-audio", action="store_true")

    p = sub.add_parser("ablate", help="train/eval full, no-crossover and no-audio variants")
    _common_config_flags(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-clips", type=int, default=None)

    p = sub.add_parser("plot", help="render loss curves from one or two loss logs")
    p.add_argument("--log", type=Path, action="append", required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _resolve(args, extra_overrides=None) -> cfgmod.ResolvedConfig:
    overrides = dict(extra_overrides or {})
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = args.seed
        overrides["data.seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        overrides["train.base_lr"] = args.lr
    if getattr(args, "batch_clips", None) is not None:
        overrides["train.batch_clips"] = args.batch_clips
    if getattr(args, "no_crossover", False):
        overrides["crossover.enabled"] = False
    if getattr(args, "no_audio", False):
        overrides["audio.enabled"] = False
    rc = cfgmod.load_config(getattr(args, "config", None), overrides)
    print("resolved config:")
    for line in cfgmod.resolved_text(rc).splitlines():
        print(f"  {line}")
    return rc


def _class_names(data_cfg) -> list[str]:
    styles = data_cfg.class_styles()
    return [f"class{i}_{kind}" for i, (kind, _) in enumerate(styles)]


def cmd_generate(args) -> int:
    rc = _resolve(args)
    out = args.out
    if out.exists() and any(out.iterdir()) and not args.force:
        raise RuntimeError(f"output directory {out} is not empty (use --force to overwrite)")
    if args.clips == 0 and args.val_clips == 0:
        print("warning: generating an empty dataset")
    data_cfg = rc.data
    counts: Counter = Counter()
    entries = []
    for split, n, base in (("train", args.clips, 0), ("val", args.val_clips, 100_000)):
        for i in range(n):
            clip = avdata.generate_clip(data_cfg, base + i)
            avdata.save_clip(clip, avdata.clip_dir(out, split, clip.clip_id))
            entries.append({"clip_id": clip.clip_id, "split": split,
                            "num_frames": clip.num_frames()})
            for a in {a.instance_id: a for anns in clip.annotations for a in anns}.values():
                counts[a.class_id] += 1
    manifest = {
        "classes": _class_names(data_cfg),
        "fps": data_cfg.fps,
        "sample_rate": data_cfg.sample_rate,
        "num_classes": data_cfg.num_classes,
        "clips": entries,
    }
    avdata.save_manifest(out, manifest)
    names = _class_names(data_cfg)
    print("per-class instance counts:")
    for c in range(data_cfg.num_classes):
        print(f"  {names[c]}: {counts.get(c, 0)}")
    return 0


def cmd_preprocess_audio(args) -> int:
    _resolve(args)
    manifest = avdata.load_manifest(args.dataset)
    for entry in manifest["clips"]:
        cdir = avdata.clip_dir(args.dataset, entry["split"], entry["clip_id"])
        clip = avdata.load_clip(cdir)
        spec = audiofe.compute_spectrogram(audiofe.downmix(clip.audio))
        audiofe.save_audio_slices(cdir / "audio_slices.npz", spec, clip.num_frames())
        print(f"wrote {cdir / 'audio_slices.npz'}")
    return 0


def cmd_train(args) -> int:
    rc = _resolve(args)
    clips = avdata.load_split(args.dataset, "train")
    ckpt, log = trainmod.fit(clips, rc.train, rc.model, args.out, resume=args.resume)
    print(f"checkpoint: {ckpt}")
    print(f"loss log:   {log}")
    return 0


def _evaluate(model, clips, infer_cfg, audio_enabled, thresholds=None):
    preds = [predict_clip(model, c, infer_cfg, audio_enabled=audio_enabled) for c in clips]
    gts = [gt_tracks_from_clip(c) for c in clips]
    kwargs = {"thresholds": thresholds} if thresholds else {}
    return evalvis.compute_ap(preds, gts, **kwargs), preds, gts


def cmd_eval(args) -> int:
    rc = _resolve(args)
    model, _ = load_checkpoint(args.checkpoint)
    clips = avdata.load_split(args.dataset, args.split)
    if not clips:
        raise RuntimeError(f"split {args.split!r} has no loadable clips")
    audio_enabled = not args.no_audio
    result, _, _ = _evaluate(model, clips, rc.infer, audio_enabled)
    names = dict(enumerate(avdata.load_manifest(args.dataset)["classes"]))
    text = evalvis.format_results(result, args.format, class_names=names)
    print(text, end="")
    if args.out:
        args.out.write_text(text)
        print(f"wrote {args.out}")
    return 0


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_ablate(args) -> int:
    rc = _resolve(args)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    train_clips = avdata.load_split(args.dataset, "train")
    val_clips = avdata.load_split(args.dataset, "val")

    variants = [
        ("full", {"crossover_enabled": True, "audio_enabled": True}),
        ("no-crossover", {"crossover_enabled": False, "audio_enabled": True}),
        ("no-audio", {"crossover_enabled": True, "audio_enabled": False}),
    ]
    rows = []
    init_hashes = {}
    logs = {}
    for name, flags in variants:
        run_dir = out / name
        cfg = dataclasses.replace(rc.train, **flags)
        cfg.loss_weights = dict(rc.train.loss_weights)
        cfg.lr_milestones = list(rc.train.lr_milestones)
        try:
            ckpt, log = trainmod.fit(train_clips, cfg, rc.model, run_dir)
            init_hashes[name] = _file_sha256(run_dir / "init.ckpt")
            logs[name] = log
            model, _ = load_checkpoint(ckpt)
            result, _, _ = _evaluate(model, val_clips, rc.infer, cfg.audio_enabled)
            r50, _, _ = _evaluate(model, val_clips, rc.infer, cfg.audio_enabled, thresholds=[0.5])
            dice = trainmod.evaluate_mask_dice(model, val_clips, audio_enabled=cfg.audio_enabled)
            rows.append({"variant": name, "ap": result.ap, "ap50": r50.ap,
                         "ar": result.ar, "mask_dice_loss": dice, "status": "ok"})
        except Exception as e:  # report partial results rather than dying
            rows.append({"variant": name, "status": f"failed: {e}"})

    if len(set(init_hashes.values())) > 1:
        rows.append({"variant": "WARNING", "status": "initial checkpoints differ across variants"})

    lines = [f"{'variant':<15}{'AP':>8}{'AP@0.5':>9}{'AR':>8}{'mask dice':>11}  status"]
    for r in rows:
        if r.get("status") == "ok":
            lines.append(f"{r['variant']:<15}{r['ap']:>8.4f}{r['ap50']:>9.4f}"
                         f"{r['ar']:>8.4f}{r['mask_dice_loss']:>11.4f}  ok")
        else:
            lines.append(f"{r['variant']:<15}{'-':>8}{'-':>9}{'-':>8}{'-':>11}  {r['status']}")
    report = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(report)
    (out / "report.json").write_text(json.dumps(rows, indent=2))
    print(report, end="")

    ok_logs = [str(logs[n]) for n, _ in variants if n in logs]
    if ok_logs:
        _plot_logs(ok_logs, out / "loss_curves.png")
        print(f"wrote {out / 'loss_curves.png'}")
    print(f"wrote {out / 'report.txt'}")
    return 0


def _plot_logs(log_paths: list[str], out_path: Path) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    skipped = 0
    runs = []
    for lp in log_paths:
        reports = []
        for line in Path(lp).read_text().splitlines():
            if not line.strip():
                continue
            try:
                reports.append(trainmod.LossReport.from_json(line))
            except (json.JSONDecodeError, KeyError):
                skipped += 1
        runs.append((Path(lp).parent.name or Path(lp).stem, reports))
    if skipped:
        print(f"warning: skipped {skipped} malformed log line(s)")
    if all(not reports for _, reports in runs):
        raise RuntimeError("no parseable loss records; nothing to plot")

    components = trainmod.LOSS_COMPONENTS
    fig, axes = plt.subplots(2, 3, figsize=(15, 8))
    panels = ["total"] + list(components)
    for ax, comp in zip(axes.ravel(), panels):
        for name, reports in runs:
            xs = [r.iteration for r in reports]
            ys = [r.total if comp == "total" else r.components[comp] for r in reports]
            ax.plot(xs, ys, label=name)
        ax.set_title(comp)
        ax.set_xlabel("iteration")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return skipped


def cmd_plot(args) -> int:
    _plot_logs([str(p) for p in args.log], args.out)
    print(f"wrote {args.out}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "preprocess-audio": cmd_preprocess_audio,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
