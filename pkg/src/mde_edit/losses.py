"""Object alignment loss, color consistency loss and their weighted sum.

All functions accept numpy arrays or torch tensors and return torch scalars so that
they can be differentiated back to the editing latent.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .core import DegenerateSegmentation, EmptyMask, GuidanceConfig, ShapeMismatch

BCE_EPS = 1e-6
NORM_FLOOR = 1e-8
RATIO_EPS = 1e-12


def _t(x, like: Optional[torch.Tensor] = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def bce(prediction, target, clamp_eps: float = BCE_EPS) -> torch.Tensor:
    """Per-pixel mean binary cross-entropy with the prediction clamped to ``[eps, 1 - eps]``."""
    p = _t(prediction)
    s = _t(target, like=p).to(p.dtype)
    if p.shape != s.shape:
        raise ShapeMismatch(f"prediction {tuple(p.shape)} vs target {tuple(s.shape)}")
    p = p.clamp(clamp_eps, 1 - clamp_eps)
    return -(s * torch.log(p) + (1 - s) * torch.log1p(-p)).mean()


def _seg_map(seg):
    return seg.map if hasattr(seg, "map") else _t(seg)


def oal_terms(segmentations: Sequence, masks: Sequence, clamp_eps: float = BCE_EPS) -> list[torch.Tensor]:
    if len(segmentations) != len(masks) or not masks:
        raise ShapeMismatch("need one mask per segmentation (at least one)")
    terms = []
    for seg, mask in zip(segmentations, masks):
        s_hat = _seg_map(seg)
        peak = s_hat.abs().max()
        if peak.item() < NORM_FLOOR:
            raise DegenerateSegmentation("implicit segmentation is identically zero")
        terms.append(bce(s_hat, mask, clamp_eps) + bce(s_hat / peak, mask, clamp_eps))
    return terms


def oal(segmentations: Sequence, masks: Sequence, clamp_eps: float = BCE_EPS) -> torch.Tensor:
    """Sum over edited objects of BCE(S_hat, S) + BCE(S_hat / max|S_hat|, S)."""
    return torch.stack(oal_terms(segmentations, masks, clamp_eps)).sum()


def ccl(edit_attn, common_attns: Sequence, mask, reduction: str = "masked_mean") -> torch.Tensor:
    """Squared deficit of the edit tokens' attention share inside ``mask``.

    ``edit_attn`` is one map or a list of maps (several edit tokens of one object,
    summed). The share is ``a / (a + sum(common))`` per pixel.
    """
    if isinstance(edit_attn, (list, tuple)):
        a = torch.stack([_t(x) for x in edit_attn]).sum(0)
    else:
        a = _t(edit_attn)
    s = _t(mask, like=a).to(a.dtype)
    if s.shape != a.shape:
        raise ShapeMismatch(f"mask {tuple(s.shape)} vs attention {tuple(a.shape)}")
    c = torch.zeros_like(a)
    for m in common_attns:
        m = _t(m, like=a).to(a.dtype)
        if m.shape != a.shape:
            raise ShapeMismatch(f"common attention {tuple(m.shape)} vs {tuple(a.shape)}")
        c = c + m
    inside = s > 0.5
    n = int(inside.sum())
    if n == 0:
        raise EmptyMask("color consistency mask has no set pixel")
    ratio = a / torch.clamp(a + c, min=RATIO_EPS)
    deficit = (1 - ratio)[inside] ** 2
    if reduction == "masked_mean":
        return deficit.sum() / n
    if reduction == "masked_sum":
        return deficit.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass(frozen=True)
class LossBreakdown:
    oal: float
    ccl: float
    total: float
    per_object_oal: tuple[float, ...] = ()
    tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    def to_json(self, step: int, iteration: int) -> str:
        return json.dumps({"step": step, "iter": iteration, "oal": self.oal, "ccl": self.ccl, "total": self.total})


def total_loss(oal_value, ccl_value, config: GuidanceConfig, per_object_oal: Sequence = ()) -> LossBreakdown:
    """``lambda1 * oal + lambda2 * ccl``; keeps the differentiable tensor when given tensors."""
    o, c = _scalar(oal_value), _scalar(ccl_value)
    if o < 0 or c < 0:
        raise ValueError("losses must be non-negative")
    total = config.lambda1 * oal_value + config.lambda2 * ccl_value
    tensor = total if isinstance(total, torch.Tensor) else None
    return LossBreakdown(o, c, _scalar(total), tuple(_scalar(x) for x in per_object_oal), tensor)


def _scalar(x) -> float:
    return x.detach().item() if isinstance(x, torch.Tensor) else float(x)
