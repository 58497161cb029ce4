"""Checks of the bundled toy denoiser and classifier against their calibrated constants."""
import warnings

import numpy as np
import pytest
import torch

from mde_edit import assets
from mde_edit.ablation import standard_task
from mde_edit.backend_toy import Background, Shape, SyntheticScene, ddim_sample, generate_dataset, heldout_loss
from mde_edit.backend_toy.scenes import random_scene
from mde_edit.core import EditSpec
from mde_edit.inversion import ddim_invert, reconstruct
from mde_edit.metrics import RegionTarget, alignment_score, evaluate
from mde_edit.pipeline import edit, invert_image

pytestmark = pytest.mark.filterwarnings("ignore::mde_edit.pipeline.UnmaskedEditToken")


@pytest.fixture(scope="module")
def calibration():
    return assets.calibration()


def foreground(img: np.ndarray) -> np.ndarray:
    # the background grating is gray, shapes are saturated
    return ((img.max(0) - img.min(0)) > 0.3).astype(np.uint8)


def test_heldout_loss_within_ceiling(bundled_backend, calibration):
    assert heldout_loss(bundled_backend, generate_dataset(256, 9001, 0.3)) <= calibration["c_train"]


def test_red_circle_samples(bundled_backend, bundled_classifier, calibration):
    ids = bundled_backend.ids("a red circle")
    hits = 0
    for seed in range(20):
        z = torch.randn(3, 32, 32, generator=torch.Generator().manual_seed(seed))
        img = bundled_backend.decode(ddim_sample(bundled_backend, z, ids, 50, 3.0))
        mask = foreground(img)
        hits += mask.sum() > 5 and bundled_classifier.predict(img, mask) == ("circle", "red")
    assert hits / 20 >= calibration["sample_success_min"]


def test_unguided_reconstruction_within_c_inv(bundled_backend, calibration):
    rng = np.random.default_rng(700)
    for _ in range(5):
        scene = random_scene(rng, int(rng.integers(1, 3)))
        img = scene.render()
        traj = ddim_invert(bundled_backend, img, bundled_backend.ids(scene.caption), 50)
        rec = bundled_backend.decode(reconstruct(bundled_backend, traj, 1.0))
        assert float(((rec - img) ** 2).mean()) <= calibration["c_inv"]


def test_classifier_on_clean_target_renders(bundled_classifier):
    for seed in range(20):
        task = standard_task(seed)
        score, _ = alignment_score(task.target_scene.render(), task.region_targets(), bundled_classifier)
        assert score == 1.0, task.target_prompt


def test_single_recolor_example(bundled_backend, bundled_classifier):
    bg = Background(base=0.5, amplitude=0.1, period=7.0, angle=0.6, phase=0.0)
    scene = SyntheticScene([Shape("square", "blue", (9.0, 14.0), 5.0), Shape("circle", "red", (23.0, 18.0), 5.0)], bg)
    assert scene.caption == "a blue square and a red circle"
    target = "a green square and a red circle"
    spec = EditSpec(scene.masks[0], (2,), "blue->green")
    res = edit(bundled_backend, scene.render(), scene.caption, target, [spec])
    assert bundled_classifier.predict(res.image, scene.masks[0]) == ("square", "green")
    assert bundled_classifier.predict(res.image, scene.masks[1]) == ("circle", "red")


def test_color_swap_success_over_20_seeds(bundled_backend, bundled_classifier, trajectories):
    hits = []
    for seed in range(20):
        task = standard_task(seed)
        k = task.recolor_index
        target_scene = task.scene.with_shape(k, color=task.new_color)
        pos = 2 + 4 * k
        spec = EditSpec(task.scene.masks[k], (pos,), f"->{task.new_color}")
        res = edit(bundled_backend, task.image(), task.source_prompt, target_scene.caption, [spec],
                   trajectory=trajectories(task))
        region = RegionTarget(task.scene.masks[k], task.scene.shapes[k].kind, task.new_color)
        hits += evaluate(task.image(), res.image, res.union_mask, [region], bundled_classifier).per_edit_success
    assert np.mean(hits) >= 0.9
