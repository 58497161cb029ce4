"""Deterministic DDIM sampling with optional attention recording."""
from __future__ import annotations

from typing import Optional, Sequence

import torch

from ..attention import AttentionCapture, AttentionRecorder
from ..core import LatentGrid
from .backend import ToyBackend
from .schedule import ddim_move


def ddim_sample(
    backend: ToyBackend,
    z_T: torch.Tensor | LatentGrid,
    ids: Sequence[int],
    steps: int,
    guidance_scale: float = 3.0,
    recorder: Optional[AttentionRecorder] = None,
    null_embeddings: Optional[Sequence[torch.Tensor]] = None,
    branch: str = "reconstruction",
) -> LatentGrid:
    """Denoise ``z_T`` over ``steps`` DDIM steps (eta = 0).

    Step ``s`` (``0 <= s < steps``) moves from grid timestep ``tau[steps - s]`` to
    ``tau[steps - s - 1]``. ``null_embeddings[s]`` replaces the null caption
    embedding at step ``s`` when given. The conditional pass of every step is
    recorded under ``branch``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = (z_T.data if isinstance(z_T, LatentGrid) else z_T).to(backend.dtype)
    taus = backend.schedule.timesteps(steps)
    cond = backend.text_encode(ids)
    uncond = backend.text_encode(backend.null_ids())
    with torch.no_grad():
        for s in range(steps):
            t, t_prev = taus[steps - s], taus[steps - s - 1]
            capture = AttentionCapture() if recorder is not None else None
            u = null_embeddings[s] if null_embeddings is not None else uncond
            eps = backend.guided_noise(z, t, cond, u, guidance_scale, capture)
            z = ddim_move(z, eps, backend.schedule.ab(t), backend.schedule.ab(t_prev))
            if recorder is not None:
                recorder.record(branch, s, capture.stack())
    return LatentGrid(z, 0)
