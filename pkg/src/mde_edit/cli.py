"""``mde-edit`` command line: gen-data, train-toy, invert, edit, eval, ablate, demo.

Exit codes: 0 ok, 2 usage, 3 pipeline failure, 4 ablation ordering failure.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, assets
from .core import GuidanceConfig, MDEError

EXIT_OK, EXIT_USAGE, EXIT_PIPELINE, EXIT_ORDERING = 0, 2, 3, 4

log = logging.getLogger("mde_edit")

REFERENCE_DEFAULTS = "lambda1=1, lambda2=1.25, 20 optimized steps out of 50"


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------- manifest


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True, default=str).encode()).hexdigest()[:16]


def write_manifest(out_dir: Path, command: str, resolved: dict, inputs: dict, outputs: list[str], started: float) -> Path:
    manifest = {
        "command": command,
        "config": resolved,
        "config_hash": config_hash(resolved),
        "seed": resolved.get("seed"),
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _prepare_out(path: Path, force: bool, is_dir: bool = True) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    if path.exists() and force and is_dir and path.is_dir():
        shutil.rmtree(path)


def _staging(out: Path) -> Path:
    out.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))


def _commit(staging: Path, out: Path) -> None:
    if out.exists():
        shutil.rmtree(out)
    staging.rename(out)


def _load_backend(path: Optional[str]):
    from .backend_toy.checkpoint import load_backend

    return load_backend(path or assets.denoiser_path())


def _load_classifier(path: Optional[str]):
    from .metrics.classifier import ToyClassifier

    return ToyClassifier.load(path or assets.classifier_path())


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from .backend_toy.scenes import generate_dataset, write_dataset

    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if not 0.0 <= args.overlap <= 1.0:
        raise UsageError("--overlap must be in [0, 1]")
    started = time.time()
    out = Path(args.out)
    _prepare_out(out, args.force)
    scenes = generate_dataset(args.n, args.seed, args.overlap)
    stage = _staging(out)
    write_dataset(scenes, stage)
    resolved = {"n": args.n, "seed": args.seed, "overlap": args.overlap}
    write_manifest(stage, "gen-data", resolved, {}, [f"scene_{i:05d}" for i in range(args.n)], started)
    _commit(stage, out)
    print(f"wrote {args.n} scenes to {out}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .backend_toy.checkpoint import save_backend
    from .backend_toy.scenes import generate_dataset, read_dataset
    from .backend_toy.train import heldout_loss, train_toy
    from .metrics.classifier import classifier_accuracy, train_classifier

    started = time.time()
    out = Path(args.out)
    _prepare_out(out, args.force)
    if args.data:
        scenes = read_dataset(args.data)
        if not scenes:
            raise UsageError(f"no scenes in {args.data}")
    else:
        scenes = generate_dataset(args.n, args.seed, args.overlap)
    backend = train_toy(scenes, args.epochs, args.seed)
    heldout = generate_dataset(256, args.seed + 1, args.overlap)
    loss = heldout_loss(backend, heldout)
    stage = _staging(out)
    save_backend(backend, stage / "toy_denoiser.ckpt", {"heldout_loss": loss, "epochs": args.epochs, "seed": args.seed})
    outputs = ["toy_denoiser.ckpt"]
    report = {"heldout_loss": loss}
    if not args.skip_classifier:
        clf = train_classifier(scenes[: min(len(scenes), 5000)], args.seed)
        clf.save(stage / "toy_classifier.ckpt")
        report["classifier_accuracy"] = classifier_accuracy(clf, heldout)
        outputs.append("toy_classifier.ckpt")
    (stage / "train_report.json").write_text(json.dumps(report, indent=2))
    resolved = {"epochs": args.epochs, "seed": args.seed, "data": args.data, "n": args.n, "overlap": args.overlap}
    write_manifest(stage, "train-toy", resolved, {"data": args.data}, outputs, started)
    _commit(stage, out)
    print(json.dumps(report))
    return EXIT_OK


def cmd_invert(args) -> int:
    from .backend_toy.scenes import load_png
    from .pipeline import invert_image

    out = Path(args.out)
    _prepare_out(out, args.force, is_dir=False)
    backend = _load_backend(args.ckpt)
    image = load_png(args.image)
    traj = invert_image(backend, image, args.prompt, args.steps, args.guidance_scale, args.nti_steps)
    traj.save(out, args.prompt, backend.parameter_digest())
    print(f"wrote {out}")
    return EXIT_OK


EDIT_KEYS = (
    "lambda1",
    "lambda2",
    "delta",
    "opt_window",
    "inner_iters",
    "steps",
    "seed",
    "ccl_reduction",
    "guidance_scale",
    "merge_background",
)


def resolve_edit_config(args) -> dict:
    """CLI flag > config file > built-in default."""
    defaults = asdict(GuidanceConfig())
    resolved = {
        "lambda1": defaults["lambda1"],
        "lambda2": defaults["lambda2"],
        "delta": defaults["delta"],
        "opt_window": defaults["opt_window"],
        "inner_iters": defaults["inner_iters"],
        "steps": defaults["total_steps"],
        "seed": 0,
        "ccl_reduction": defaults["ccl_reduction"],
        "guidance_scale": defaults["guidance_scale"],
        "merge_background": defaults["merge_background"],
        "source_prompt": None,
        "target_prompt": None,
        "edits": [],
        "image": None,
        "checkpoint": None,
        "trajectory": None,
    }
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}")
        resolved.update({k: v for k, v in file_cfg.items() if k in resolved})
    for key in EDIT_KEYS + ("source_prompt", "target_prompt", "image", "checkpoint", "trajectory"):
        v = getattr(args, key, None)
        if v is not None:
            resolved[key] = v
    if args.edit:
        resolved["edits"] = [{"token": tok, "mask_path": path} for tok, path in (e.split("=", 1) for e in args.edit)]
    for key in ("source_prompt", "target_prompt", "image"):
        if not resolved[key]:
            raise UsageError(f"missing {key} (flag or config file)")
    return resolved


def _edit_specs(backend, resolved: dict, shape):
    from .backend_toy.scenes import load_mask
    from .core import EditSpec, align_tokens

    src = backend.ids(resolved["source_prompt"])
    tgt = backend.ids(resolved["target_prompt"])
    alignment = align_tokens(src, tgt, backend.vocabulary.special_ids)
    specs = []
    for e in resolved["edits"]:
        tok = e["token"]
        if isinstance(tok, int) or str(tok).isdigit():
            idx = [int(tok)]
        else:
            idx = [i for i in alignment.new_tokens if backend.vocabulary.word(tgt[i]) == tok]
            if not idx:
                raise MDEError(f"{tok!r} is not a new word of the target prompt")
            idx = idx[:1]
        mask = load_mask(e["mask_path"])
        if mask.shape != tuple(shape):
            raise MDEError(f"mask {e['mask_path']} has shape {mask.shape}, image is {tuple(shape)}")
        specs.append(EditSpec(mask, tuple(idx), str(tok)))
    return specs


def cmd_edit(args) -> int:
    from .backend_toy.scenes import load_png, save_png
    from .inversion import InversionTrajectory
    from .pipeline import edit

    started = time.time()
    resolved = resolve_edit_config(args)
    out = Path(args.out)
    _prepare_out(out, args.force)
    try:
        backend = _load_backend(resolved["checkpoint"])
        image = load_png(resolved["image"])
        specs = _edit_specs(backend, resolved, image.shape[-2:])
        cfg = GuidanceConfig(
            lambda1=float(resolved["lambda1"]),
            lambda2=float(resolved["lambda2"]),
            delta=float(resolved["delta"]),
            opt_window=int(resolved["opt_window"]),
            inner_iters=int(resolved["inner_iters"]),
            total_steps=int(resolved["steps"]),
            guidance_scale=float(resolved["guidance_scale"]),
            ccl_reduction=resolved["ccl_reduction"],
            merge_background=bool(resolved["merge_background"]),
        )
        traj = None
        if resolved["trajectory"]:
            traj, _ = InversionTrajectory.load(resolved["trajectory"])
        stage = _staging(out)
        debug = stage / "debug" if os.environ.get("MDE_DEBUG") == "1" else None
        try:
            result = edit(backend, image, resolved["source_prompt"], resolved["target_prompt"], specs, cfg, traj, debug)
            save_png(result.image, stage / "edited.png")
            save_png(result.reconstruction, stage / "reconstruction.png")
            (stage / "losses.jsonl").write_text(result.losses_jsonl())
            outputs = ["edited.png", "reconstruction.png", "losses.jsonl"] + (["debug/"] if debug else [])
            write_manifest(stage, "edit", resolved, {"image": resolved["image"]}, outputs, started)
        except BaseException:
            shutil.rmtree(stage, ignore_errors=True)
            raise
        _commit(stage, out)
    except (MDEError, OSError, ValueError, KeyError) as e:
        diag = {"error": type(e).__name__, "message": str(e), "config": resolved}
        print(json.dumps(diag, default=str), file=sys.stderr)
        return EXIT_PIPELINE
    print(f"wrote {out / 'edited.png'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .backend_toy.scenes import load_mask, load_png
    from .metrics import RegionTarget, evaluate

    original = load_png(args.original)
    edited = load_png(args.edited)
    masks = [load_mask(p) for p in args.mask]
    union = np.zeros(original.shape[-2:], np.uint8)
    for m in masks:
        union |= m
    targets = []
    if args.target:
        if len(args.target) != len(masks):
            raise UsageError("give one --target per --mask")
        for m, t in zip(masks, args.target):
            color, kind = t.split()
            targets.append(RegionTarget(m, kind, color))
    clf = None if args.no_classifier else _load_classifier(args.classifier)
    report = evaluate(original, edited, union, targets, clf, {"original": args.original, "edited": args.edited})
    if args.out:
        report.save(args.out)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


def _ablate_one(payload):
    ckpt, clf_path, task, settings, base = payload
    from .ablation import run_task

    return run_task(_load_backend(ckpt), _load_classifier(clf_path), task, settings, base)


def cmd_ablate(args) -> int:
    from .ablation import summarize, task_suite
    from .backend_toy.scenes import read_dataset
    from .metrics import write_summary_csv

    started = time.time()
    try:
        settings = sorted({int(s) for s in args.settings.split(",")})
    except ValueError:
        raise UsageError(f"bad --settings {args.settings!r}")
    if not settings or any(s not in (1, 2, 3, 4) for s in settings):
        raise UsageError("--settings must be a subset of 1,2,3,4")
    scenes = None
    if args.data:
        scenes = read_dataset(args.data)
        if not scenes:
            raise UsageError(f"dataset {args.data} is empty")
    tasks = task_suite(args.tasks, args.seed, scenes)
    if not tasks:
        raise UsageError("no usable two-object scenes in the dataset")
    out = Path(args.out)
    _prepare_out(out, args.force)
    base = GuidanceConfig(total_steps=args.steps, opt_window=args.opt_window)
    if args.delta:
        base = replace(base, delta=args.delta)
    payloads = [(args.ckpt, args.classifier, t, settings, base) for t in tasks]
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_ablate_one, payloads))
    else:
        results = [_ablate_one(p) for p in payloads]
    outcomes = [o for r in results for o in r]
    summary = summarize(outcomes)
    stage = _staging(out)
    write_summary_csv([(f"{o.task_id}/setting{o.setting}", o.report) for o in outcomes], stage / "per_task.csv")
    (stage / "summary.json").write_text(json.dumps(summary.rows, indent=2, sort_keys=True))
    resolved = {"settings": settings, "tasks": args.tasks, "seed": args.seed, "data": args.data, **asdict(base)}
    write_manifest(stage, "ablate", resolved, {"ckpt": args.ckpt, "data": args.data}, ["per_task.csv", "summary.json"], started)
    _commit(stage, out)
    print(summary.table())
    fails = summary.ordering_failures()
    if fails:
        for f in fails:
            print("ORDERING FAIL:", f, file=sys.stderr)
        return EXIT_ORDERING
    return EXIT_OK


def cmd_demo(args) -> int:
    from .ablation import standard_task
    from .backend_toy.scenes import save_mask, save_png
    from .metrics import evaluate
    from .pipeline import edit

    started = time.time()
    out = Path(args.out)
    _prepare_out(out, args.force)
    backend = _load_backend(args.ckpt)
    clf = _load_classifier(args.classifier)
    task = standard_task(args.seed)
    image = task.image()
    result = edit(backend, image, task.source_prompt, task.target_prompt, task.edit_specs(backend))
    report = evaluate(image, result.image, result.union_mask, task.region_targets(), clf, {"task": task.task_id})
    stage = _staging(out)
    save_png(image, stage / "original.png")
    save_png(result.image, stage / "edited.png")
    save_png(result.reconstruction, stage / "reconstruction.png")
    for k, m in enumerate(task.scene.masks):
        save_mask(m, stage / f"mask_{k}.png")
    (stage / "losses.jsonl").write_text(result.losses_jsonl())
    report.save(stage / "report.json")
    resolved = {"seed": args.seed, "source_prompt": task.source_prompt, "target_prompt": task.target_prompt}
    write_manifest(stage, "demo", resolved, {}, ["original.png", "edited.png", "report.json"], started)
    _commit(stage, out)
    print(f"{task.source_prompt!r} -> {task.target_prompt!r}")
    print(json.dumps(report.to_dict()))
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="mde-edit", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic shapes dataset", formatter_class=fmt)
    g.add_argument("--n", type=int, default=200, help="number of scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--overlap", type=float, default=0.5, help="fraction of scenes with an overlapping pair")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-toy", help="train the toy denoiser (and classifier)", formatter_class=fmt)
    t.add_argument("--data", help="dataset directory; generated in memory when omitted")
    t.add_argument("--n", type=int, default=20000, help="scenes to generate when --data is omitted")
    t.add_argument("--overlap", type=float, default=0.3)
    t.add_argument("--epochs", type=float, default=8.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--skip-classifier", action="store_true")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train_toy)

    i = sub.add_parser("invert", help="DDIM inversion + null-text optimization to a .traj file", formatter_class=fmt)
    i.add_argument("--ckpt", help="denoiser checkpoint (default: bundled)")
    i.add_argument("--image", required=True)
    i.add_argument("--prompt", required=True)
    i.add_argument("--steps", type=int, default=50, help="denoising steps (50 in the reference setup)")
    i.add_argument("--guidance-scale", type=float, default=GuidanceConfig.guidance_scale)
    i.add_argument("--nti-steps", type=int, default=10, help="null-text iterations per step")
    i.add_argument("--out", required=True)
    i.add_argument("--force", action="store_true")
    i.set_defaults(func=cmd_invert)

    e = sub.add_parser(
        "edit",
        help="masked dual-branch edit",
        formatter_class=fmt,
        description=f"Defaults follow the reference setup: {REFERENCE_DEFAULTS}.",
    )
    e.add_argument("--config", help="session config JSON")
    e.add_argument("--checkpoint", help="denoiser checkpoint (default: bundled)")
    e.add_argument("--image")
    e.add_argument("--source-prompt", dest="source_prompt")
    e.add_argument("--target-prompt", dest="target_prompt")
    e.add_argument("--edit", action="append", metavar="TOKEN=MASK.png", help="edit word and its mask (repeatable)")
    e.add_argument("--trajectory", help="precomputed .traj (skips inversion)")
    e.add_argument("--lambda1", type=float, help="OAL weight (default 1)")
    e.add_argument("--lambda2", type=float, help="CCL weight (default 1.25; 0 gives OAL-only)")
    e.add_argument("--delta", type=float, help=f"latent step size (default {GuidanceConfig.delta})")
    e.add_argument("--opt-window", dest="opt_window", type=int, help="optimized earliest steps (default 20)")
    e.add_argument("--inner-iters", dest="inner_iters", type=int, help="updates per optimized step (default 1)")
    e.add_argument("--steps", type=int, help="denoising steps (default 50)")
    e.add_argument("--guidance-scale", dest="guidance_scale", type=float, help="classifier-free guidance (default 3.0)")
    e.add_argument("--ccl-reduction", dest="ccl_reduction", choices=["masked_mean", "masked_sum"])
    e.add_argument(
        "--no-merge",
        dest="merge_background",
        action="store_false",
        default=None,
        help="keep the editing branch's own latent outside the masks",
    )
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_edit)

    v = sub.add_parser("eval", help="background SSIM / perceptual distance / alignment", formatter_class=fmt)
    v.add_argument("--original", required=True)
    v.add_argument("--edited", required=True)
    v.add_argument("--mask", action="append", required=True, help="edit-region mask PNG (repeatable)")
    v.add_argument("--target", action="append", help="'<color> <shape>' expected in the matching mask")
    v.add_argument("--classifier", help="classifier checkpoint (default: bundled)")
    v.add_argument("--no-classifier", action="store_true")
    v.add_argument("--out", help="report JSON path")
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="loss ablation grid (settings 1-4)", formatter_class=fmt)
    a.add_argument("--ckpt")
    a.add_argument("--classifier")
    a.add_argument("--data", help="dataset directory to draw scenes from")
    a.add_argument("--tasks", type=int, default=12)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--settings", default="1,2,3,4")
    a.add_argument("--delta", type=float, help="override the latent step size")
    a.add_argument("--steps", type=int, default=50, help="denoising steps")
    a.add_argument("--opt-window", dest="opt_window", type=int, default=20, help="optimized earliest steps")
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("demo", help="end-to-end edit of one generated scene", formatter_class=fmt)
    d.add_argument("--ckpt")
    d.add_argument("--classifier")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default="demo_out")
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_demo)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))  # exits with 2
    except MDEError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
