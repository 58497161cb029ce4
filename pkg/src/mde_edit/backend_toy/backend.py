"""Backend contract used by inversion and editing, and its toy implementation."""
from __future__ import annotations

from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np
import torch

from ..core import LatentGrid, Vocabulary, pad_ids, tensor_digest, tokenize
from .model import AttentionHook, ToyArch, ToyDenoiser
from .schedule import NoiseSchedule


@runtime_checkable
class DenoiserBackend(Protocol):
    schedule: NoiseSchedule
    vocabulary: Vocabulary

    def predict_noise(self, z: torch.Tensor, t: int, context: torch.Tensor, hook: Optional[AttentionHook] = None) -> torch.Tensor: ...

    def text_encode(self, ids: Sequence[int]) -> torch.Tensor: ...

    def encode(self, image: np.ndarray) -> LatentGrid: ...

    def decode(self, latent: LatentGrid) -> np.ndarray: ...

    def attention_layout(self) -> list[tuple[str, int]]: ...


class ToyBackend:
    """Identity codec around a :class:`ToyDenoiser`.

    Images are ``[3, H, W]`` arrays in ``[0, 1]``; latents are the same pixels
    rescaled to ``[-1, 1]``.
    """

    def __init__(self, model: ToyDenoiser, vocabulary: Vocabulary, schedule: NoiseSchedule):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.vocabulary = vocabulary
        self.schedule = schedule

    @property
    def arch(self) -> ToyArch:
        return self.model.arch

    @property
    def dtype(self) -> torch.dtype:
        return self.model.conv_in.weight.dtype

    def to(self, dtype: torch.dtype) -> "ToyBackend":
        """Copy of the backend in another precision (float64 for gradient checks)."""
        import copy

        model = copy.deepcopy(self.model).to(dtype)
        return ToyBackend(model, self.vocabulary, self.schedule)

    def ids(self, prompt: str) -> list[int]:
        return pad_ids(tokenize(prompt, self.vocabulary), self.arch.context_length, self.vocabulary)

    def null_ids(self) -> list[int]:
        return self.ids("")

    def text_encode(self, ids: Sequence[int]) -> torch.Tensor:
        ids_t = torch.as_tensor(list(ids), dtype=torch.long)[None]
        with torch.no_grad():
            return self.model.text_encode(ids_t)[0].to(self.dtype)

    def predict_noise(
        self,
        z: torch.Tensor,
        t: int,
        context: torch.Tensor,
        hook: Optional[AttentionHook] = None,
    ) -> torch.Tensor:
        squeeze = z.dim() == 3
        if squeeze:
            z = z[None]
        if context.dim() == 2:
            context = context[None].expand(z.shape[0], -1, -1)
        out = self.model(z, torch.tensor(int(t)), context, hook)
        return out[0] if squeeze else out

    def guided_noise(self, z, t, cond, uncond, scale: float, hook=None) -> torch.Tensor:
        """Classifier-free guidance; the hook sees only the conditional pass."""
        eps_c = self.predict_noise(z, t, cond, hook)
        if scale == 1.0:
            return eps_c
        eps_u = self.predict_noise(z, t, uncond)
        return eps_u + scale * (eps_c - eps_u)

    def encode(self, image: np.ndarray) -> LatentGrid:
        x = torch.as_tensor(np.asarray(image, dtype=np.float32)).to(self.dtype)
        return LatentGrid(x * 2 - 1, 0)

    def decode(self, latent: LatentGrid | torch.Tensor) -> np.ndarray:
        z = latent.data if isinstance(latent, LatentGrid) else latent
        return ((z.detach().to(torch.float64) + 1) / 2).clamp(0, 1).numpy()

    def attention_layout(self) -> list[tuple[str, int]]:
        return [(layer.name, h) for layer in self.model.attention_layers for h in range(layer.heads)]

    def parameter_digest(self) -> str:
        return tensor_digest(*[p for _, p in sorted(self.model.state_dict().items())])
