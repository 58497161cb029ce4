import math

import numpy as np
import pytest

from mde_edit.backend_toy.scenes import generate_dataset, random_scene
from mde_edit.core import EmptyMask, ShapeMismatch
from mde_edit.metrics import (
    EvalReport,
    MissingClassifier,
    MissingExtractor,
    RegionTarget,
    alignment_score,
    bg_perceptual,
    bg_ssim,
    evaluate,
    ssim_map,
    write_summary_csv,
)
from mde_edit.metrics.classifier import CROP, ToyClassifier, crop_region, train_classifier

C1, C2 = 0.01**2, 0.03**2


def test_ssim_constant_images_closed_form():
    a, b = np.full((1, 16, 16), 0.3), np.full((1, 16, 16), 0.7)
    want = (2 * 0.3 * 0.7 + C1) / (0.3**2 + 0.7**2 + C1)
    np.testing.assert_allclose(ssim_map(a, b), want, rtol=1e-10)
    np.testing.assert_allclose(ssim_map(a, a), 1.0, rtol=1e-12)


def test_ssim_interior_pixel_matches_direct_sum():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(1, 32, 32)), rng.uniform(size=(1, 32, 32))
    r = 5
    g1 = np.array([math.exp(-(d * d) / (2 * 1.5**2)) for d in range(-r, r + 1)])
    g1 /= g1.sum()
    y0 = x0 = 16
    mu_a = mu_b = saa = sbb = sab = 0.0
    for i in range(-r, r + 1):
        for j in range(-r, r + 1):
            w = g1[i + r] * g1[j + r]
            pa, pb = a[0, y0 + i, x0 + j], b[0, y0 + i, x0 + j]
            mu_a += w * pa
            mu_b += w * pb
            saa += w * pa * pa
            sbb += w * pb * pb
            sab += w * pa * pb
    va, vb, cov = saa - mu_a**2, sbb - mu_b**2, sab - mu_a * mu_b
    want = ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a**2 + mu_b**2 + C1) * (va + vb + C2))
    assert ssim_map(a, b)[y0, x0] == pytest.approx(want, rel=1e-9)


def test_bg_ssim_ignores_foreground():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(3, 32, 32))
    mask = np.zeros((32, 32), np.uint8)
    mask[8:20, 8:20] = 1
    b = a.copy()
    b[:, mask > 0] = rng.uniform(size=(3, int(mask.sum())))
    assert bg_ssim(a, b, 1 - mask) == pytest.approx(1.0, abs=1e-12)
    c = b + 0.05 * (1 - mask)
    assert bg_ssim(a, c, 1 - mask) < 1.0


def test_bg_ssim_errors():
    a = np.zeros((3, 8, 8))
    with pytest.raises(EmptyMask):
        bg_ssim(a, a, np.zeros((8, 8)))
    with pytest.raises(ShapeMismatch):
        bg_ssim(a, np.zeros((3, 4, 4)), np.ones((8, 8)))


def test_bg_perceptual():
    a = np.random.default_rng(2).uniform(size=(3, 8, 8))
    mask = np.ones((8, 8), np.uint8)
    mask[:2] = 0
    b = a.copy()
    b[:, :2] = 0.0  # foreground rows only
    feat = lambda x: x.reshape(-1) * 2
    assert bg_perceptual(a, b, mask, feat) == 0.0
    assert bg_perceptual(a, a + 0.1, mask, feat) == pytest.approx(0.2**2 * 144 / 192)
    with pytest.raises(MissingExtractor):
        bg_perceptual(a, b, mask, None)


def test_crop_region_centers_the_shape():
    scene = random_scene(np.random.default_rng(3), 1, colors=("red",))
    crop = crop_region(scene.render(), scene.masks[0])
    assert crop.shape == (3, CROP, CROP)
    c = crop[:, CROP // 2, CROP // 2]
    assert c[0] > 0.7 and c[2] < 0.4


@pytest.fixture(scope="module")
def quick_classifier():
    return train_classifier(generate_dataset(60, 0, 0.3), seed=0, steps=40, batch=16)


def test_classifier_api_and_roundtrip(quick_classifier, tmp_path):
    scene = random_scene(np.random.default_rng(4), 2)
    pred = quick_classifier.predict(scene.render(), scene.masks[0])
    assert len(pred) == 2
    quick_classifier.save(tmp_path / "c.ckpt")
    back = ToyClassifier.load(tmp_path / "c.ckpt")
    assert back.predict(scene.render(), scene.masks[0]) == pred
    np.testing.assert_array_equal(back.features(scene.render()), quick_classifier.features(scene.render()))


def test_alignment_score(quick_classifier):
    scene = random_scene(np.random.default_rng(5), 1)
    target = RegionTarget(scene.masks[0], *quick_classifier.predict(scene.render(), scene.masks[0]))
    assert alignment_score(scene.render(), [target], quick_classifier) == (1.0, [True])
    with pytest.raises(MissingClassifier):
        alignment_score(scene.render(), [target], None)


def test_evaluate_reports_missing_scorers(tmp_path):
    scene = random_scene(np.random.default_rng(6), 2)
    img = scene.render()
    union = scene.masks[0] | scene.masks[1]
    rep = evaluate(img, img, union, [RegionTarget(scene.masks[0], "circle", "red")], None, {"id": 1})
    assert rep.bg_ssim == pytest.approx(1.0)
    assert rep.alignment is None and rep.bg_perceptual is None
    assert set(rep.missing) == {"alignment", "bg_perceptual"}
    rep.save(tmp_path / "r.json")
    write_summary_csv([("x", rep), ("y", EvalReport(0.9, 0.1, 0.5, [True, False]))], tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert rows[0].startswith("id,bg_ssim") and rows[2].endswith(",0.5")
