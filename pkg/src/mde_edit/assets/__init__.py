"""Bundled toy checkpoints and the frozen calibration record."""
from __future__ import annotations

import json
from pathlib import Path

ROOT = Path(__file__).resolve().parent


def denoiser_path() -> Path:
    return ROOT / "toy_denoiser.ckpt"


def classifier_path() -> Path:
    return ROOT / "toy_classifier.ckpt"


def calibration() -> dict:
    """Thresholds fixed by the calibration run (see README)."""
    return json.loads((ROOT / "calibration.json").read_text())
