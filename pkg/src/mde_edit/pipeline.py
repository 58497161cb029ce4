"""Dual-branch editing: reconstruction branch, injected editing branch, masked latent optimization."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .attention import AttentionCapture, AttentionRecorder, dump_attention, token_map
from .backend_toy.backend import ToyBackend
from .backend_toy.schedule import ddim_move
from .core import (
    AttentionStack,
    EditSpec,
    GuidanceConfig,
    LatentGrid,
    MDEError,
    RegionMask,
    TokenAlignment,
    align_tokens,
)
from .inversion import InversionTrajectory, ddim_invert, nti_optimize
from .losses import LossBreakdown, ccl, oal_terms, total_loss

log = logging.getLogger(__name__)


class NonFiniteGradient(MDEError):
    pass


class UnmaskedEditToken(UserWarning):
    pass


def mask_to_latent(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resampling of a binary pixel mask to the latent grid."""
    mask = np.asarray(mask)
    if mask.shape == tuple(shape):
        return mask.astype(np.uint8)
    ys = (np.arange(shape[0]) + 0.5) * mask.shape[0] / shape[0]
    xs = (np.arange(shape[1]) + 0.5) * mask.shape[1] / shape[1]
    return mask[ys.astype(int)[:, None], xs.astype(int)[None, :]].astype(np.uint8)


def masked_update(z: torch.Tensor, grad: torch.Tensor, mask: torch.Tensor, delta: float) -> torch.Tensor:
    """``M * (z - delta * grad) + (1 - M) * z`` for a binary ``M`` broadcast over channels.

    Written as a select so coordinates with ``M = 0`` are returned bit-for-bit.
    """
    return torch.where(mask > 0, z - delta * grad, z)


@dataclass
class EditSession:
    backend: ToyBackend
    trajectory: InversionTrajectory
    alignment: TokenAlignment
    edit_specs: list[EditSpec]
    config: GuidanceConfig
    src_ids: list[int]
    tgt_ids: list[int]
    recorder: AttentionRecorder = field(default_factory=AttentionRecorder)
    call_log: list[int] = field(default_factory=list)
    loss_log: list[tuple[int, int, LossBreakdown]] = field(default_factory=list)
    debug_dir: Optional[Path] = None

    def __post_init__(self):
        for spec in self.edit_specs:
            spec.check_tokens(self.alignment)
        h, w = self.trajectory.z_T.shape[-2:]
        self.latent_shape = (h, w)
        self.latent_masks = [mask_to_latent(s.mask, (h, w)) for s in self.edit_specs]
        self.union = RegionMask.union(self.latent_masks, (h, w))
        dtype = self.backend.dtype
        self.union_t = torch.as_tensor(self.union.data, dtype=dtype)[None]
        self.mask_t = [torch.as_tensor(m, dtype=dtype) for m in self.latent_masks]
        self.cond_src = self.backend.text_encode(self.src_ids)
        self.cond_tgt = self.backend.text_encode(self.tgt_ids)
        self.taus = self.backend.schedule.timesteps(self.trajectory.steps)
        null = self.backend.text_encode(self.backend.null_ids())
        nulls = self.trajectory.null_embeddings
        self.nulls = [(nulls[s] if nulls is not None else null).to(dtype) for s in range(self.trajectory.steps)]

    @classmethod
    def create(
        cls,
        backend: ToyBackend,
        trajectory: InversionTrajectory,
        source_prompt: str,
        target_prompt: str,
        edit_specs: Sequence[EditSpec],
        config: GuidanceConfig = GuidanceConfig(),
        debug_dir: Optional[Path] = None,
    ) -> "EditSession":
        src = backend.ids(source_prompt)
        tgt = backend.ids(target_prompt)
        alignment = align_tokens(src, tgt, backend.vocabulary.special_ids)
        return cls(backend, trajectory, alignment, list(edit_specs), config, src, tgt, debug_dir=debug_dir)

    @property
    def steps(self) -> int:
        return self.trajectory.steps

    def timestep(self, s: int) -> tuple[int, int]:
        return self.taus[self.steps - s], self.taus[self.steps - s - 1]

    def in_window(self, s: int) -> bool:
        return s < self.config.opt_window

    def should_optimize(self, s: int) -> bool:
        return bool(self.edit_specs) and self.config.optimizes and self.in_window(s)

    # ------------------------------------------------------------------ losses

    def losses_from_stack(self, edit_stack: AttentionStack, recon_stack: AttentionStack) -> LossBreakdown:
        shape = self.latent_shape
        segs = [token_map(edit_stack.maps, list(spec.target_token_indices), shape) for spec in self.edit_specs]
        per_obj = oal_terms(segs, self.mask_t)
        oal_value = torch.stack(per_obj).sum()
        common = [token_map(recon_stack.maps, s, shape) for s, _ in self.alignment.common_pairs]
        ccl_value = torch.stack(
            [
                ccl([token_map(edit_stack.maps, i, shape) for i in spec.target_token_indices], common, m, self.config.ccl_reduction)
                for spec, m in zip(self.edit_specs, self.mask_t)
            ]
        ).sum()
        return total_loss(oal_value, ccl_value, self.config, per_obj)

    def loss_at(self, s: int, z: torch.Tensor) -> LossBreakdown:
        """Editing-branch forward at step ``s`` and the combined loss (differentiable in ``z``)."""
        t, _ = self.timestep(s)
        recon = self.recorder.get("reconstruction", s)
        capture = AttentionCapture(recon, self.alignment) if self.config.inject else AttentionCapture()
        self.backend.predict_noise(z, t, self.cond_tgt, capture)
        return self.losses_from_stack(capture.stack(), recon)


def mde_optimize(session: EditSession, s: int, z_edit: torch.Tensor) -> torch.Tensor:
    """Masked gradient steps on the editing latent at denoising step ``s``."""
    if not session.in_window(s):
        raise MDEError(f"step {s} is outside the optimization window ({session.config.opt_window})")
    cfg = session.config
    z = z_edit
    for it in range(cfg.inner_iters):
        session.call_log.append(s)
        zg = z.detach().clone().requires_grad_(True)
        losses = session.loss_at(s, zg)
        (grad,) = torch.autograd.grad(losses.tensor, zg)
        if not torch.isfinite(grad).all():
            raise NonFiniteGradient(f"non-finite gradient at step {s}, iteration {it}: {losses}")
        z = masked_update(z, grad.to(z.dtype), session.union_t, cfg.delta)
        session.loss_log.append((s, it, losses))
    return z


def dual_branch_step(session: EditSession, s: int, z_rec: torch.Tensor, z_edit: torch.Tensor):
    """One denoising step of both branches; the editing branch is optimized first when in the window."""
    b = session.backend
    cfg = session.config
    t, t_prev = session.timestep(s)
    ab, ab_prev = b.schedule.ab(t), b.schedule.ab(t_prev)
    null = session.nulls[s]

    rec_capture = AttentionCapture()
    with torch.no_grad():
        eps_r = b.guided_noise(z_rec, t, session.cond_src, null, cfg.guidance_scale, rec_capture)
    recon_stack = rec_capture.stack()
    session.recorder.record("reconstruction", s, recon_stack)

    if session.should_optimize(s):
        z_edit = mde_optimize(session, s, z_edit)

    edit_capture = AttentionCapture(recon_stack, session.alignment) if cfg.inject else AttentionCapture()
    with torch.no_grad():
        eps_e = b.guided_noise(z_edit, t, session.cond_tgt, null, cfg.guidance_scale, edit_capture)
    edit_stack = edit_capture.stack()
    session.recorder.record("editing", s, edit_stack)

    if session.debug_dir is not None:
        words = [b.vocabulary.word(i) for i in session.tgt_ids]
        dump_attention(edit_stack, words, session.debug_dir / "attn", s)

    with torch.no_grad():
        z_rec_next = ddim_move(z_rec, eps_r, ab, ab_prev)
        z_edit_next = ddim_move(z_edit, eps_e, ab, ab_prev)
        if cfg.merge_background:
            z_edit_next = torch.where(session.union_t > 0, z_edit_next, z_rec_next)
    return z_rec_next, z_edit_next, (recon_stack, edit_stack)


@dataclass
class EditResult:
    image: np.ndarray
    reconstruction: np.ndarray
    session: EditSession
    z0_edit: LatentGrid
    z0_recon: LatentGrid

    @property
    def union_mask(self) -> np.ndarray:
        return self.session.union.data

    def losses_jsonl(self) -> str:
        return "".join(lb.to_json(s, it) + "\n" for s, it, lb in self.session.loss_log)


def invert_image(
    backend: ToyBackend,
    image: np.ndarray,
    source_prompt: str,
    steps: int = 50,
    guidance_scale: float = 3.0,
    nti_inner_steps: int = 10,
    nti_lr: float = 1e-2,
    nti_tol: float = 1e-5,
) -> InversionTrajectory:
    ids = backend.ids(source_prompt)
    traj = ddim_invert(backend, image, ids, steps)
    return nti_optimize(backend, traj, ids, nti_inner_steps, nti_lr, nti_tol, guidance_scale)


def edit(
    backend: ToyBackend,
    image: np.ndarray,
    source_prompt: str,
    target_prompt: str,
    edit_specs: Sequence[EditSpec],
    config: GuidanceConfig = GuidanceConfig(),
    trajectory: Optional[InversionTrajectory] = None,
    debug_dir: Optional[str | Path] = None,
) -> EditResult:
    """Invert (unless a trajectory is given), then run the dual-branch denoising loop."""
    if trajectory is None:
        trajectory = invert_image(backend, image, source_prompt, config.total_steps, config.guidance_scale)
    if trajectory.steps != config.total_steps:
        raise MDEError(f"trajectory has {trajectory.steps} steps, config asks for {config.total_steps}")
    session = EditSession.create(
        backend,
        trajectory,
        source_prompt,
        target_prompt,
        edit_specs,
        config,
        Path(debug_dir) if debug_dir is not None else None,
    )
    z_rec = trajectory.z_T.data.to(backend.dtype)
    z_edit = z_rec.clone()
    for s in range(session.steps):
        z_rec, z_edit, _ = dual_branch_step(session, s, z_rec, z_edit)
    _check_edit_tokens(session)
    if session.debug_dir is not None:
        session.debug_dir.mkdir(parents=True, exist_ok=True)
        (session.debug_dir / "losses.jsonl").write_text(
            "".join(lb.to_json(s, it) + "\n" for s, it, lb in session.loss_log)
        )
    z0_edit, z0_rec = LatentGrid(z_edit, 0), LatentGrid(z_rec, 0)
    return EditResult(backend.decode(z0_edit), backend.decode(z0_rec), session, z0_edit, z0_rec)


def _check_edit_tokens(session: EditSession) -> None:
    if not session.edit_specs:
        return
    s = max(0, min(session.config.opt_window, session.steps) - 1)
    stack = session.recorder.get("editing", s)
    floor = 1.0 / stack.n_tokens
    for spec, m in zip(session.edit_specs, session.mask_t):
        seg = token_map(stack.maps, list(spec.target_token_indices), session.latent_shape)
        inside = float(seg[m > 0].mean())
        if inside <= floor:
            warnings.warn(
                f"edit {spec.label or spec.target_token_indices}: mean attention {inside:.3f} inside its mask "
                f"is at or below the uniform level {floor:.3f}",
                UnmaskedEditToken,
                stacklevel=3,
            )
