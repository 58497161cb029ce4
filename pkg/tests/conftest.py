from __future__ import annotations

import numpy as np
import pytest
import torch

from mde_edit import assets
from mde_edit.backend_toy import NoiseSchedule, ToyArch, ToyBackend, ToyDenoiser
from mde_edit.core import Vocabulary

SMALL_ARCH = ToyArch(channels=(16, 16, 16), heads=2, head_dim=8, text_dim=16)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_backend() -> ToyBackend:
    """Untrained small denoiser; enough for wiring and gradient tests."""
    torch.manual_seed(0)
    return ToyBackend(ToyDenoiser(SMALL_ARCH), Vocabulary(), NoiseSchedule())


@pytest.fixture(scope="session")
def bundled_backend():
    if not assets.denoiser_path().exists():
        pytest.skip("bundled toy denoiser not present")
    from mde_edit.backend_toy import load_backend

    return load_backend(assets.denoiser_path())


@pytest.fixture(scope="session")
def bundled_classifier():
    if not assets.classifier_path().exists():
        pytest.skip("bundled toy classifier not present")
    from mde_edit.metrics.classifier import ToyClassifier

    return ToyClassifier.load(assets.classifier_path())


@pytest.fixture(scope="session")
def trajectories(bundled_backend):
    """Inversions of standard tasks keyed on task id, shared across test modules."""
    from mde_edit.pipeline import invert_image

    cache = {}

    def get(task):
        if task.task_id not in cache:
            cache[task.task_id] = invert_image(bundled_backend, task.image(), task.source_prompt)
        return cache[task.task_id]

    return get
