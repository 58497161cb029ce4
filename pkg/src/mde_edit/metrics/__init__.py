"""Background preservation and edit alignment scores."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..core import EmptyMask, MDEError, ShapeMismatch
from .classifier import MissingClassifier, ToyClassifier
from .ssim import bg_ssim, ssim_map

__all__ = [
    "EvalReport",
    "MissingClassifier",
    "MissingExtractor",
    "RegionTarget",
    "alignment_score",
    "bg_perceptual",
    "bg_ssim",
    "evaluate",
    "ssim_map",
    "write_summary_csv",
]


class MissingExtractor(MDEError):
    pass


@dataclass(frozen=True)
class RegionTarget:
    """What the classifier should see inside ``mask`` after the edit."""

    mask: np.ndarray
    kind: str
    color: str


def alignment_score(
    edited: np.ndarray,
    targets: Sequence[RegionTarget],
    classifier: Optional[ToyClassifier],
) -> tuple[float, list[bool]]:
    if classifier is None:
        raise MissingClassifier("alignment scoring needs a classifier")
    if not targets:
        return 1.0, []
    hits = [classifier.predict(edited, t.mask) == (t.kind, t.color) for t in targets]
    return sum(hits) / len(hits), hits


def bg_perceptual(
    original: np.ndarray,
    edited: np.ndarray,
    background_mask: np.ndarray,
    feature_extractor: Optional[Callable[[np.ndarray], np.ndarray]],
) -> float:
    """Mean squared feature distance between the background-only versions of two images."""
    if feature_extractor is None:
        raise MissingExtractor("bg_perceptual needs a feature extractor")
    bg = np.asarray(background_mask).astype(bool)
    if not bg.any():
        raise EmptyMask("background mask is empty")
    a = np.array(original, dtype=np.float32)
    b = np.array(edited, dtype=np.float32)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    a[..., ~bg] = 0.5
    b[..., ~bg] = 0.5
    fa = np.asarray(feature_extractor(a), dtype=np.float64)
    fb = np.asarray(feature_extractor(b), dtype=np.float64)
    return float(((fa - fb) ** 2).mean())


@dataclass
class EvalReport:
    bg_ssim: Optional[float]
    bg_perceptual: Optional[float]
    alignment: Optional[float]
    per_edit_success: list[bool] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    missing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def evaluate(
    original: np.ndarray,
    edited: np.ndarray,
    union_mask: np.ndarray,
    targets: Sequence[RegionTarget] = (),
    classifier: Optional[ToyClassifier] = None,
    metadata: Optional[dict] = None,
) -> EvalReport:
    """All three scores; an absent scorer is reported as ``None`` with the reason."""
    background = 1 - np.asarray(union_mask).astype(np.uint8)
    missing = {}
    s = bg_ssim(original, edited, background)
    try:
        p = bg_perceptual(original, edited, background, classifier.features if classifier else None)
    except MissingExtractor as e:
        p, missing["bg_perceptual"] = None, str(e)
    try:
        a, hits = alignment_score(edited, targets, classifier)
    except MissingClassifier as e:
        a, hits, missing["alignment"] = None, [], str(e)
    return EvalReport(s, p, a, [bool(h) for h in hits], metadata or {}, missing)


def write_summary_csv(rows: Sequence[tuple[str, EvalReport]], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "bg_ssim", "bg_perceptual", "alignment", "success_rate"])
        for rid, r in rows:
            rate = sum(r.per_edit_success) / len(r.per_edit_success) if r.per_edit_success else ""
            w.writerow([rid, r.bg_ssim, r.bg_perceptual, r.alignment, rate])
