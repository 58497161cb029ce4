"""Noise schedules and the deterministic DDIM update rules."""
from __future__ import annotations

import torch


class NoiseSchedule:
    """Cumulative signal fractions ``alpha_bar[t]`` for ``t = 0..T`` with ``alpha_bar[0] = 1``.

    ``kind="scaled_linear"`` (the default) interpolates ``sqrt(beta)`` linearly, as in
    Stable Diffusion v1; ``kind="linear"`` interpolates ``beta`` itself (DDPM).
    """

    def __init__(
        self,
        num_train_timesteps: int = 1000,
        beta_start: float = 0.00085,
        beta_end: float = 0.012,
        kind: str = "scaled_linear",
    ):
        self.num_train_timesteps = num_train_timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.kind = kind
        if kind == "scaled_linear":
            betas = torch.linspace(beta_start**0.5, beta_end**0.5, num_train_timesteps, dtype=torch.float64) ** 2
        elif kind == "linear":
            betas = torch.linspace(beta_start, beta_end, num_train_timesteps, dtype=torch.float64)
        else:
            raise ValueError(f"unknown schedule kind {kind!r}")
        alpha_bar = torch.cumprod(1.0 - betas, dim=0)
        self.alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "num_train_timesteps": self.num_train_timesteps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(d["num_train_timesteps"], d["beta_start"], d["beta_end"], d.get("kind", "linear"))

    def timesteps(self, steps: int) -> list[int]:
        """Evenly spaced grid ``[0, T/steps, ..., T]`` (ascending, ``steps + 1`` entries)."""
        if steps < 0:
            raise ValueError("steps must be non-negative")
        if steps == 0:
            return [0]
        T = self.num_train_timesteps
        return [round(k * T / steps) for k in range(steps + 1)]

    def ab(self, t: int) -> float:
        return float(self.alpha_bar[t])

    def q_sample(self, z0: torch.Tensor, t: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        ab = self.alpha_bar.to(z0.device)[t].to(z0.dtype).view(-1, *([1] * (z0.dim() - 1)))
        return ab.sqrt() * z0 + (1 - ab).sqrt() * noise


def ddim_move(z: torch.Tensor, eps: torch.Tensor, ab_from: float, ab_to: float) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM transfer of ``z`` between two noise levels."""
    x0 = (z - (1 - ab_from) ** 0.5 * eps) / ab_from ** 0.5
    return ab_to ** 0.5 * x0 + (1 - ab_to) ** 0.5 * eps
