"""Small CNN that names the shape and color inside a region crop.

It stands in for a text-image alignment model on the toy scenes, and its
convolutional trunk serves as the feature extractor for the background
perceptual distance.
"""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..backend_toy.scenes import COLORS, KINDS, Shape, SyntheticScene, shape_mask
from ..container import read_blobs, write_blobs
from ..core import MDEError

log = logging.getLogger(__name__)

CROP = 20


class MissingClassifier(MDEError):
    pass


class ShapeColorNet(nn.Module):
    def __init__(self, width: int = 32):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1),
            nn.GELU(),
        )
        self.shape_head = nn.Linear(2 * width, len(KINDS))
        self.color_head = nn.Linear(2 * width, len(COLORS))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x)

    def forward(self, x: torch.Tensor):
        f = self.trunk(x).mean((2, 3))
        return self.shape_head(f), self.color_head(f)


def crop_region(image: np.ndarray, mask: np.ndarray, pad: float = 2.0, shift=(0.0, 0.0), size: int = CROP) -> np.ndarray:
    """Square crop around the mask's bounding box, resized to ``size`` x ``size``."""
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise MDEError("cannot crop an empty region")
    cy = (ys.min() + ys.max() + 1) / 2 + shift[0]
    cx = (xs.min() + xs.max() + 1) / 2 + shift[1]
    half = max(ys.max() - ys.min() + 1, xs.max() - xs.min() + 1) / 2 + pad
    img = torch.as_tensor(np.asarray(image, dtype=np.float32))[None]
    H, W = img.shape[-2:]
    # affine grid in normalized coordinates
    theta = torch.tensor(
        [[half / (W / 2), 0, (cx - W / 2) / (W / 2)], [0, half / (H / 2), (cy - H / 2) / (H / 2)]],
        dtype=torch.float32,
    )[None]
    grid = F.affine_grid(theta, (1, 3, size, size), align_corners=False)
    out = F.grid_sample(img, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out[0].numpy()


class ToyClassifier:
    def __init__(self, net: ShapeColorNet):
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def predict(self, image: np.ndarray, mask: np.ndarray) -> tuple[str, str]:
        crop = torch.as_tensor(crop_region(image, mask))[None]
        with torch.no_grad():
            ls, lc = self.net(crop)
        return KINDS[int(ls.argmax())], list(COLORS)[int(lc.argmax())]

    def features(self, image: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.net.features(torch.as_tensor(np.asarray(image, dtype=np.float32))[None])[0].numpy()

    def save(self, path) -> None:
        write_blobs(path, {"format": "mde-toy-classifier", "crop": CROP}, dict(self.net.state_dict()))

    @classmethod
    def load(cls, path) -> "ToyClassifier":
        header, tensors = read_blobs(path)
        if header.get("format") != "mde-toy-classifier":
            raise MDEError(f"{path}: not a classifier checkpoint")
        net = ShapeColorNet()
        net.load_state_dict(tensors)
        return cls(net)


def _augmented_crop(rng: np.random.Generator, scene: SyntheticScene, k: int) -> np.ndarray:
    img = scene.render()
    img = img + rng.normal(0, rng.uniform(0, 0.06), img.shape)
    img = img + rng.uniform(-0.06, 0.06, (3, 1, 1))
    mask = scene.masks[k]
    if rng.random() < 0.4:
        # frame the crop by another kind's silhouette at the same place, as after a shape swap
        shape = scene.shapes[k]
        other = str(rng.choice([kind for kind in KINDS if kind != shape.kind]))
        mask = shape_mask(Shape(other, shape.color, shape.center, shape.radius))
    crop = crop_region(np.clip(img, 0, 1), mask, pad=rng.uniform(0.5, 4.0), shift=tuple(rng.uniform(-1.5, 1.5, 2)))
    if rng.random() < 0.3:
        crop = F.avg_pool2d(torch.as_tensor(crop)[None], 3, 1, 1, count_include_pad=False)[0].numpy()
    return crop


def train_classifier(scenes: Sequence[SyntheticScene], seed: int = 0, steps: int = 3000, batch: int = 64) -> ToyClassifier:
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    items = [(i, k) for i, s in enumerate(scenes) for k in range(len(s.shapes))]
    kinds = {k: i for i, k in enumerate(KINDS)}
    colors = {c: i for i, c in enumerate(COLORS)}
    net = ShapeColorNet()
    opt = torch.optim.AdamW(net.parameters(), lr=2e-3, weight_decay=1e-4)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    for step in range(steps):
        pick = rng.integers(0, len(items), batch)
        xs, ys_s, ys_c = [], [], []
        for j in pick:
            i, k = items[j]
            xs.append(_augmented_crop(rng, scenes[i], k))
            ys_s.append(kinds[scenes[i].shapes[k].kind])
            ys_c.append(colors[scenes[i].shapes[k].color])
        x = torch.as_tensor(np.stack(xs), dtype=torch.float32)
        ls, lc = net(x)
        loss = F.cross_entropy(ls, torch.tensor(ys_s)) + F.cross_entropy(lc, torch.tensor(ys_c))
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if (step + 1) % 200 == 0:
            log.info("classifier step %d loss %.4f", step + 1, loss.item())
    return ToyClassifier(net)


def classifier_accuracy(clf: ToyClassifier, scenes: Sequence[SyntheticScene]) -> float:
    hits = total = 0
    for s in scenes:
        img = s.render()
        for shape, mask in zip(s.shapes, s.masks):
            hits += clf.predict(img, mask) == (shape.kind, shape.color)
            total += 1
    return hits / total
