"""Cross-attention maps: computation, recording, injection and implicit segmentation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    AlignmentOutOfRange,
    AttentionStack,
    MDEError,
    ShapeMismatch,
    TokenAlignment,
)

BRANCHES = ("reconstruction", "editing")


def cross_attention(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-wise ``softmax(q k^T / sqrt(d_k))`` for ``q [n_pos, d_k]`` and ``k [n_tokens, d_k]``."""
    q = torch.as_tensor(q)
    k = torch.as_tensor(k)
    if q.dim() != 2 or k.dim() != 2 or q.shape[1] != k.shape[1] or q.shape[1] < 1:
        raise ShapeMismatch(f"incompatible query/key shapes {tuple(q.shape)} and {tuple(k.shape)}")
    return torch.softmax(q @ k.T / math.sqrt(q.shape[1]), dim=-1)


# --------------------------------------------------------------------------- injection


def _index_pairs(alignment: TokenAlignment, n_src: int, n_tgt: int):
    src = [s for s, _ in alignment.shared]
    tgt = [t for _, t in alignment.shared]
    if any(s >= n_src for s in src) or any(t >= n_tgt for t in tgt) or any(i >= n_tgt for i in alignment.new_tokens):
        raise AlignmentOutOfRange(
            f"alignment refers to tokens beyond the maps ({n_src} source / {n_tgt} target columns)"
        )
    return src, tgt


def inject_map(recon: torch.Tensor, edit: torch.Tensor, alignment: TokenAlignment) -> torch.Tensor:
    """Token axis last. Shared target columns copy the reconstruction column, new ones keep the edit column."""
    if recon.shape[:-1] != edit.shape[:-1]:
        raise ShapeMismatch(f"spatial shapes differ: {tuple(recon.shape)} vs {tuple(edit.shape)}")
    src, tgt = _index_pairs(alignment, recon.shape[-1], edit.shape[-1])
    out = edit.clone()
    if tgt:
        out[..., tgt] = recon[..., src].to(out.dtype)
    return out


def inject(recon: AttentionStack, edit: AttentionStack, alignment: TokenAlignment) -> AttentionStack:
    if recon.layer_ids != edit.layer_ids or recon.head_ids != edit.head_ids:
        raise ShapeMismatch("attention stacks have different layer/head structure")
    maps = tuple(inject_map(a, b, alignment) for a, b in zip(recon.maps, edit.maps))
    return AttentionStack(maps, edit.layer_ids, edit.head_ids)


# --------------------------------------------------------------------------- capture


class AttentionCapture:
    """Model hook that stores every cross-attention map of one forward pass.

    With ``reference`` and ``alignment`` set, each layer's probabilities are replaced
    by the injected mix before they are applied to the values.
    """

    def __init__(self, reference: Optional[AttentionStack] = None, alignment: Optional[TokenAlignment] = None):
        if (reference is None) != (alignment is None):
            raise MDEError("injection needs both a reference stack and an alignment")
        self.reference = reference
        self.alignment = alignment
        self._ref = {}
        if reference is not None:
            for m, layer, head in zip(reference.maps, reference.layer_ids, reference.head_ids):
                self._ref[(layer, head)] = m
        self.maps: list[torch.Tensor] = []
        self.layer_ids: list[str] = []
        self.head_ids: list[int] = []

    def __call__(self, probs: torch.Tensor, layer: str, hw: tuple) -> torch.Tensor:
        h, w = hw
        # single-sample batches only
        maps = probs[0].reshape(probs.shape[1], h, w, probs.shape[-1])
        if self.reference is not None:
            mixed = [inject_map(self._ref[(layer, head)], maps[head], self.alignment) for head in range(maps.shape[0])]
            maps = torch.stack(mixed)
            probs = maps.reshape(1, maps.shape[0], h * w, maps.shape[-1])
        for head in range(maps.shape[0]):
            self.maps.append(maps[head])
            self.layer_ids.append(layer)
            self.head_ids.append(head)
        return probs

    def stack(self) -> AttentionStack:
        return AttentionStack(tuple(self.maps), tuple(self.layer_ids), tuple(self.head_ids))


class AttentionRecorder:
    """Per-branch, per-step record of attention stacks; entries are write-once."""

    def __init__(self):
        self._entries: dict[str, dict[int, AttentionStack]] = {b: {} for b in BRANCHES}

    def record(self, branch: str, step: int, stack: AttentionStack) -> None:
        if branch not in self._entries:
            raise MDEError(f"unknown branch {branch!r}")
        if step in self._entries[branch]:
            raise MDEError(f"{branch} attention for step {step} already recorded")
        self._entries[branch][step] = stack.detached()

    def get(self, branch: str, step: int) -> AttentionStack:
        return self._entries[branch][step]

    def steps(self, branch: str) -> list[int]:
        return sorted(self._entries[branch])

    def has(self, branch: str, step: int) -> bool:
        return step in self._entries[branch]

    def all_stacks(self):
        for branch, entries in self._entries.items():
            for step in sorted(entries):
                yield branch, step, entries[step]


# --------------------------------------------------------------------------- segmentation


@dataclass(frozen=True)
class ImplicitSegmentation:
    map: torch.Tensor  # [H, W], values in [0, 1]
    token_index: int | tuple[int, ...]


def token_map(maps: Sequence[torch.Tensor], tokens: int | Sequence[int], target_shape: tuple[int, int]) -> torch.Tensor:
    """Layer/head average of one token's attention, each map bilinearly resized to ``target_shape``.

    Several token indices (one word split into sub-tokens) are averaged into one column first.
    """
    if not maps:
        raise MDEError("need at least one attention map")
    idx = [tokens] if isinstance(tokens, int) else list(tokens)
    acc = None
    for m in maps:
        if max(idx) >= m.shape[-1]:
            raise AlignmentOutOfRange(f"token {max(idx)} out of range for {m.shape[-1]} columns")
        col = m[..., idx].mean(-1)[None, None]
        if tuple(col.shape[-2:]) != tuple(target_shape):
            col = F.interpolate(col, size=tuple(target_shape), mode="bilinear", align_corners=False)
        acc = col if acc is None else acc + col
    return (acc / len(maps))[0, 0]


def implicit_segmentation(
    stacks: AttentionStack | Sequence[torch.Tensor],
    token: int | Sequence[int],
    target_shape: tuple[int, int],
) -> ImplicitSegmentation:
    maps = stacks.maps if isinstance(stacks, AttentionStack) else list(stacks)
    maps = [torch.as_tensor(m) for m in maps]
    tok = token if isinstance(token, int) else tuple(token)
    return ImplicitSegmentation(token_map(maps, token, target_shape), tok)


# --------------------------------------------------------------------------- debug output


def dump_attention(stack: AttentionStack, words: Sequence[str], out_dir: str | Path, step: int, size: int = 64) -> Path:
    """Write one grayscale heatmap per token: ``<out_dir>/step_%03d/token_<i>_<word>.png``."""
    from PIL import Image

    d = Path(out_dir) / f"step_{step:03d}"
    d.mkdir(parents=True, exist_ok=True)
    for i, word in enumerate(words):
        m = token_map(stack.maps, i, (size, size)).detach().cpu().numpy()
        img = (np.clip(m / max(m.max(), 1e-8), 0, 1) * 255).astype(np.uint8)
        safe = word.strip("<>") or "tok"
        Image.fromarray(img).save(d / f"token_{i}_{safe}.png")
    return d
