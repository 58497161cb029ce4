"""Masked dual-editing of multiple objects with cross-attention guidance, on a toy diffusion backend."""
__version__ = "0.1.0"

from .attention import AttentionCapture, AttentionRecorder, implicit_segmentation, inject, inject_map
from .core import (
    AttentionStack,
    EditSpec,
    GuidanceConfig,
    LatentGrid,
    MDEError,
    RegionMask,
    TokenAlignment,
    Vocabulary,
    align_tokens,
    tokenize,
)
from .inversion import DivergedOptimization, InversionTrajectory, ddim_invert, nti_optimize, reconstruct
from .losses import LossBreakdown, ccl, oal, total_loss
from .pipeline import EditResult, EditSession, dual_branch_step, edit, invert_image, mde_optimize

__all__ = [
    "AttentionCapture",
    "AttentionRecorder",
    "AttentionStack",
    "DivergedOptimization",
    "EditResult",
    "EditSession",
    "EditSpec",
    "GuidanceConfig",
    "InversionTrajectory",
    "LatentGrid",
    "LossBreakdown",
    "MDEError",
    "RegionMask",
    "TokenAlignment",
    "Vocabulary",
    "align_tokens",
    "ccl",
    "ddim_invert",
    "dual_branch_step",
    "edit",
    "implicit_segmentation",
    "inject",
    "inject_map",
    "invert_image",
    "mde_optimize",
    "nti_optimize",
    "oal",
    "reconstruct",
    "tokenize",
    "total_loss",
]
