"""Measure the toy-backend constants once and freeze them into ``assets/calibration.json``.

    python scripts/calibrate.py [--denoiser PATH] [--classifier PATH] [--out PATH]

Reference images come from seeds disjoint from the ones used by the acceptance tests.
"""
from __future__ import annotations

import argparse
import json
import time
import warnings

import numpy as np

from mde_edit import __version__, assets
from mde_edit.ablation import standard_task
from mde_edit.backend_toy import generate_dataset, heldout_loss, load_backend
from mde_edit.backend_toy.scenes import random_scene
from mde_edit.core import GuidanceConfig
from mde_edit.inversion import ddim_invert, nti_optimize, reconstruct
from mde_edit.metrics import evaluate
from mde_edit.metrics.classifier import ToyClassifier, classifier_accuracy
from mde_edit.pipeline import edit, invert_image


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--denoiser", default=str(assets.denoiser_path()))
    ap.add_argument("--classifier", default=str(assets.classifier_path()))
    ap.add_argument("--out", default=str(assets.ROOT / "calibration.json"))
    ap.add_argument("--edit-seeds", type=int, default=20, help="standard tasks used for the edit reference run")
    args = ap.parse_args()
    warnings.simplefilter("ignore")

    backend = load_backend(args.denoiser)
    clf = ToyClassifier.load(args.classifier)
    cfg = GuidanceConfig()

    heldout = generate_dataset(256, 9001, 0.3)
    loss = heldout_loss(backend, heldout)
    acc = classifier_accuracy(clf, heldout)

    rng = np.random.default_rng(500)
    unguided, nti = [], []
    for _ in range(10):
        scene = random_scene(rng, int(rng.integers(1, 3)))
        img = scene.render()
        ids = backend.ids(scene.caption)
        traj = ddim_invert(backend, img, ids, cfg.total_steps)
        unguided.append(float(((backend.decode(reconstruct(backend, traj, 1.0)) - img) ** 2).mean()))
        fitted = nti_optimize(backend, traj, ids, guidance_scale=cfg.guidance_scale)
        nti.append(float(((backend.decode(reconstruct(backend, fitted)) - img) ** 2).mean()))

    # reference edit run: standard tasks on seeds beyond the acceptance range
    hits, ssims, secs = [], [], []
    for seed in range(100, 100 + args.edit_seeds):
        task = standard_task(seed)
        t0 = time.time()
        traj = invert_image(backend, task.image(), task.source_prompt, cfg.total_steps, cfg.guidance_scale)
        res = edit(backend, task.image(), task.source_prompt, task.target_prompt, task.edit_specs(backend), cfg, traj)
        secs.append(time.time() - t0)
        rep = evaluate(task.image(), res.image, res.union_mask, task.region_targets(), clf)
        hits += rep.per_edit_success
        ssims.append(rep.bg_ssim)

    record = {
        "version": __version__,
        "denoiser_digest": backend.parameter_digest(),
        "heldout_loss": loss,
        "c_train": 1.5 * loss,
        "classifier_accuracy": acc,
        "unguided_mse": unguided,
        "c_inv": 2.0 * float(np.median(unguided)),
        "nti_mse": nti,
        "nti_mse_ceiling": 2.0 * float(np.median(nti)),
        "reference_edit": {
            "seeds": [100, 100 + args.edit_seeds],
            "alignment_success": float(np.mean(hits)),
            "bg_ssim": float(np.mean(ssims)),
            "seconds_per_edit": float(np.mean(secs)),
        },
        "alignment_success_min": 0.90,
        "bg_ssim_min": 0.95,
        "sample_success_min": 0.90,
        "ablation_tasks": 12,
        "guidance": {
            "delta": cfg.delta,
            "guidance_scale": cfg.guidance_scale,
            "opt_window": cfg.opt_window,
            "merge_background": cfg.merge_background,
        },
    }
    with open(args.out, "w") as f:
        json.dump(record, f, indent=2)
    print(json.dumps(record, indent=2))


if __name__ == "__main__":
    main()
