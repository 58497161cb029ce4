"""DDIM inversion and per-step null-text embedding optimization."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backend_toy.backend import ToyBackend
from .backend_toy.schedule import ddim_move
from .container import read_blobs, write_blobs
from .core import LatentGrid, MDEError

log = logging.getLogger(__name__)


class DivergedOptimization(MDEError):
    pass


@dataclass(frozen=True)
class InversionTrajectory:
    """``latents[k]`` is the latent at grid timestep ``tau[k]``; ``latents[0]`` is the encoded image."""

    latents: tuple[LatentGrid, ...]
    source_ids: tuple[int, ...]
    null_embeddings: Optional[tuple[torch.Tensor, ...]] = None
    guidance_scale: float = 1.0
    # per denoising step: squared distance before and after optimization
    distances: tuple[tuple[float, float], ...] = field(default=(), compare=False)

    @property
    def steps(self) -> int:
        return len(self.latents) - 1

    @property
    def z_T(self) -> LatentGrid:
        return self.latents[-1]

    def target_for_step(self, s: int) -> LatentGrid:
        """Latent the sampler should reach after denoising step ``s``."""
        return self.latents[self.steps - s - 1]

    def save(self, path: str | Path, prompt: str = "", backend_hash: str = "") -> None:
        tensors = {f"latent_{k:03d}": z.data for k, z in enumerate(self.latents)}
        if self.null_embeddings is not None:
            tensors.update({f"null_{s:03d}": e for s, e in enumerate(self.null_embeddings)})
        header = {
            "format": "mde-trajectory",
            "prompt": prompt,
            "source_ids": list(self.source_ids),
            "steps": self.steps,
            "timesteps": [z.timestep for z in self.latents],
            "guidance_scale": self.guidance_scale,
            "backend_hash": backend_hash,
            "distances": [list(d) for d in self.distances],
        }
        write_blobs(path, header, tensors)

    @classmethod
    def load(cls, path: str | Path) -> tuple["InversionTrajectory", dict]:
        header, tensors = read_blobs(path)
        if header.get("format") != "mde-trajectory":
            raise MDEError(f"{path}: not a trajectory file")
        n = header["steps"]
        latents = tuple(LatentGrid(tensors[f"latent_{k:03d}"], header["timesteps"][k]) for k in range(n + 1))
        nulls = None
        if "null_000" in tensors:
            nulls = tuple(tensors[f"null_{s:03d}"] for s in range(n))
        traj = cls(
            latents,
            tuple(header["source_ids"]),
            nulls,
            header["guidance_scale"],
            tuple(tuple(d) for d in header.get("distances", [])),
        )
        return traj, header


def ddim_invert(backend: ToyBackend, image: np.ndarray, ids: Sequence[int], steps: int) -> InversionTrajectory:
    """Unguided DDIM inversion of ``image`` under the prompt ``ids``.

    The noise estimate used to climb from ``tau[k-1]`` to ``tau[k]`` is taken at the
    current latent with the destination timestep.
    """
    z0 = backend.encode(image)
    taus = backend.schedule.timesteps(steps)
    latents = [z0]
    cond = backend.text_encode(ids)
    z = z0.data
    with torch.no_grad():
        for k in range(1, steps + 1):
            eps = backend.predict_noise(z, taus[k], cond)
            z = ddim_move(z, eps, backend.schedule.ab(taus[k - 1]), backend.schedule.ab(taus[k]))
            latents.append(LatentGrid(z, taus[k]))
    return InversionTrajectory(tuple(latents), tuple(ids))


def nti_optimize(
    backend: ToyBackend,
    trajectory: InversionTrajectory,
    ids: Sequence[int],
    inner_steps: int = 10,
    lr: float = 1e-2,
    early_stop_tol: float = 1e-5,
    guidance_scale: float = 3.0,
) -> InversionTrajectory:
    """Fit one null-caption embedding per denoising step so guided sampling retraces ``trajectory``.

    Each step starts from the previous step's embedding, runs Adam on the mean squared
    distance to the trajectory latent, and keeps the best iterate seen.
    """
    steps = trajectory.steps
    taus = backend.schedule.timesteps(steps)
    cond = backend.text_encode(ids)
    null = backend.text_encode(backend.null_ids())
    z = trajectory.z_T.data.clone()
    nulls: list[torch.Tensor] = []
    distances: list[tuple[float, float]] = []

    for s in range(steps):
        t, t_prev = taus[steps - s], taus[steps - s - 1]
        ab, ab_prev = backend.schedule.ab(t), backend.schedule.ab(t_prev)
        target = trajectory.target_for_step(s).data
        with torch.no_grad():
            eps_c = backend.predict_noise(z, t, cond)

        def step_from(u: torch.Tensor) -> torch.Tensor:
            eps_u = backend.predict_noise(z, t, u)
            return ddim_move(z, eps_u + guidance_scale * (eps_c - eps_u), ab, ab_prev)

        u = null.clone().requires_grad_(True)
        opt = torch.optim.Adam([u], lr=lr)
        best_u, best_d, start_d = null.clone(), None, None
        for it in range(inner_steps + 1):
            d = F.mse_loss(step_from(u), target)
            dv = float(d.detach())
            if start_d is None:
                start_d = dv
            elif not np.isfinite(dv) or dv > 10 * max(start_d, 1e-12):
                raise DivergedOptimization(f"step {s}: distance grew from {start_d:.3e} to {dv:.3e}")
            if best_d is None or dv < best_d:
                best_d, best_u = dv, u.detach().clone()
            if it == inner_steps or dv < early_stop_tol:
                break
            opt.zero_grad()
            d.backward()
            opt.step()
        nulls.append(best_u)
        distances.append((start_d, best_d))
        null = best_u
        with torch.no_grad():
            z = step_from(best_u)
    log.debug("nti distances %s", distances)
    return InversionTrajectory(
        trajectory.latents,
        trajectory.source_ids,
        tuple(nulls),
        guidance_scale,
        tuple(distances),
    )


def reconstruct(backend: ToyBackend, trajectory: InversionTrajectory, guidance_scale: Optional[float] = None) -> LatentGrid:
    """Resample from ``z_T`` with the trajectory's null embeddings (or the plain null caption)."""
    from .backend_toy.sampling import ddim_sample

    scale = trajectory.guidance_scale if guidance_scale is None else guidance_scale
    return ddim_sample(
        backend,
        trajectory.z_T,
        trajectory.source_ids,
        trajectory.steps,
        scale,
        null_embeddings=trajectory.null_embeddings,
    )
