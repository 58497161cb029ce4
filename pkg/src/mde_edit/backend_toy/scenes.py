"""Synthetic multi-object scenes with exact per-shape masks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SIZE = 32
KINDS = ("circle", "square", "triangle")
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.15, 0.30, 0.95),
    "yellow": (0.95, 0.85, 0.15),
}


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    center: tuple[float, float]  # (x, y) in pixels
    radius: float

    def to_dict(self) -> dict:
        return {"kind": self.kind, "color": self.color, "center": list(self.center), "radius": self.radius}

    @classmethod
    def from_dict(cls, d: dict) -> "Shape":
        return cls(d["kind"], d["color"], tuple(d["center"]), d["radius"])


@dataclass(frozen=True)
class Background:
    base: float
    amplitude: float
    period: float
    angle: float
    phase: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SyntheticScene:
    shapes: list[Shape]
    background: Background
    color_jitter: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def caption(self) -> str:
        return caption_for(self.shapes)

    @property
    def masks(self) -> list[np.ndarray]:
        return [shape_mask(s) for s in self.shapes]

    @property
    def overlap_flag(self) -> bool:
        ms = self.masks
        return any((ms[i] & ms[j]).any() for i in range(len(ms)) for j in range(i + 1, len(ms)))

    def render(self) -> np.ndarray:
        """RGB image ``[3, H, W]`` in ``[0, 1]``; later shapes are drawn on top."""
        img = render_background(self.background)
        for k, (shape, mask) in enumerate(zip(self.shapes, self.masks)):
            rgb = np.asarray(COLORS[shape.color])
            if self.color_jitter:
                rgb = np.clip(rgb + np.asarray(self.color_jitter[k]), 0, 1)
            img[:, mask.astype(bool)] = rgb[:, None]
        return img

    def with_shape(self, index: int, **changes) -> "SyntheticScene":
        """Copy of the scene with one shape's attributes replaced (ground-truth edit target)."""
        shapes = list(self.shapes)
        shapes[index] = Shape(**{**shapes[index].__dict__, **changes})
        return SyntheticScene(shapes, self.background, list(self.color_jitter))

    def to_dict(self) -> dict:
        return {
            "caption": self.caption,
            "shapes": [s.to_dict() for s in self.shapes],
            "background": self.background.to_dict(),
            "color_jitter": [list(c) for c in self.color_jitter],
            "overlap": self.overlap_flag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        return cls(
            [Shape.from_dict(s) for s in d["shapes"]],
            Background(**d["background"]),
            [tuple(c) for c in d.get("color_jitter", [])],
        )


def caption_for(shapes: list[Shape]) -> str:
    ordered = sorted(shapes, key=lambda s: s.center[0])
    return " and ".join(f"a {s.color} {s.kind}" for s in ordered)


def _grid() -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    return xs + 0.5, ys + 0.5


def shape_mask(shape: Shape) -> np.ndarray:
    xs, ys = _grid()
    cx, cy = shape.center
    r = shape.radius
    if shape.kind == "circle":
        m = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    elif shape.kind == "square":
        h = 0.88 * r
        m = (np.abs(xs - cx) <= h) & (np.abs(ys - cy) <= h)
    elif shape.kind == "triangle":
        # upward triangle; apex above the center, flat base below
        R = 1.25 * r
        top, base = cy - R, cy + 0.6 * R
        half = (ys - top) / (base - top) * 1.05 * R
        m = (ys >= top) & (ys <= base) & (np.abs(xs - cx) <= half)
    else:
        raise ValueError(f"unknown shape kind {shape.kind!r}")
    return m.astype(np.uint8)


def render_background(bg: Background) -> np.ndarray:
    xs, ys = _grid()
    u = xs * np.cos(bg.angle) + ys * np.sin(bg.angle)
    v = bg.base + bg.amplitude * np.sin(2 * np.pi * u / bg.period + bg.phase)
    return np.repeat(v[None], 3, axis=0)


def random_background(rng: np.random.Generator) -> Background:
    return Background(
        base=float(rng.uniform(0.35, 0.6)),
        amplitude=float(rng.uniform(0.08, 0.14)),
        period=float(rng.uniform(5.0, 9.0)),
        angle=float(rng.uniform(0, np.pi)),
        phase=float(rng.uniform(0, 2 * np.pi)),
    )


def _random_shape(rng: np.random.Generator, kind=None, color=None) -> Shape:
    r = float(rng.uniform(5.0, 7.0))
    m = 1.3 * r + 1
    return Shape(
        kind or str(rng.choice(KINDS)),
        color or str(rng.choice(list(COLORS))),
        (float(rng.uniform(m, SIZE - m)), float(rng.uniform(m, SIZE - m))),
        r,
    )


def _pair_ok(a: Shape, b: Shape, overlap: bool) -> bool:
    if abs(a.center[0] - b.center[0]) < 4.0:
        return False  # left-to-right order must be unambiguous
    ma, mb = shape_mask(a), shape_mask(b)
    inter = (ma & mb).sum()
    if overlap:
        # partial overlap: both shapes keep most of their area visible
        return 0.1 * min(ma.sum(), mb.sum()) <= inter <= 0.4 * min(ma.sum(), mb.sum())
    # at least two pixels of background between the two masks
    grown = ma.copy()
    for dy in (-2, -1, 0, 1, 2):
        for dx in (-2, -1, 0, 1, 2):
            grown |= np.roll(np.roll(ma, dy, 0), dx, 1)
    return not (grown & mb).any()


def random_scene(
    rng: np.random.Generator,
    n_shapes: int = 2,
    overlap: bool = False,
    kinds: tuple[str | None, ...] | None = None,
    colors: tuple[str | None, ...] | None = None,
) -> SyntheticScene:
    kinds = kinds or (None,) * n_shapes
    colors = colors or (None,) * n_shapes
    bg = random_background(rng)
    for _ in range(10_000):
        shapes = [_random_shape(rng, kinds[i], colors[i]) for i in range(n_shapes)]
        if n_shapes == 2 and not _pair_ok(shapes[0], shapes[1], overlap):
            continue
        shapes.sort(key=lambda s: s.center[0])
        jitter = [tuple(float(x) for x in rng.uniform(-0.05, 0.05, 3)) for _ in shapes]
        return SyntheticScene(shapes, bg, jitter)
    raise RuntimeError("could not place shapes")


def generate_dataset(
    n: int,
    seed: int,
    overlap_fraction: float = 0.5,
    single_fraction: float = 0.25,
) -> list[SyntheticScene]:
    """Deterministic list of scenes; exactly ``round(n * overlap_fraction)`` contain an overlapping pair.

    Of the remaining scenes, about ``single_fraction`` hold one shape, the rest two
    disjoint shapes.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= overlap_fraction <= 1.0:
        raise ValueError("overlap_fraction must be in [0, 1]")
    rng = np.random.default_rng(seed)
    n_overlap = int(round(n * overlap_fraction))
    flags = np.zeros(n, dtype=bool)
    flags[:n_overlap] = True
    rng.shuffle(flags)
    scenes = []
    for overlap in flags:
        if overlap:
            scenes.append(random_scene(rng, 2, overlap=True))
        else:
            k = 1 if rng.random() < single_fraction else 2
            scenes.append(random_scene(rng, k, overlap=False))
    return scenes


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``[3, H, W]`` float in ``[0, 1]`` to ``[H, W, 3]`` uint8."""
    return (np.clip(img, 0, 1).transpose(1, 2, 0) * 255 + 0.5).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32).transpose(2, 0, 1) / 255.0


def save_png(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img)).save(path)


def load_png(path: str | Path) -> np.ndarray:
    return from_uint8(np.asarray(Image.open(path).convert("RGB")))


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def load_mask(path: str | Path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.uint8)


def write_dataset(scenes: list[SyntheticScene], out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scenes):
        stem = f"scene_{i:05d}"
        save_png(scene.render(), out / f"{stem}.png")
        mdir = out / f"{stem}.masks"
        mdir.mkdir(exist_ok=True)
        for k, m in enumerate(scene.masks):
            save_mask(m, mdir / f"shape_{k}.png")
        (out / f"{stem}.json").write_text(json.dumps(scene.to_dict(), indent=2, sort_keys=True))
    return out


def read_dataset(data_dir: str | Path) -> list[SyntheticScene]:
    paths = sorted(Path(data_dir).glob("scene_*.json"))
    return [SyntheticScene.from_dict(json.loads(p.read_text())) for p in paths]
