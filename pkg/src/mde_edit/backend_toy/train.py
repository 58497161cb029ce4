"""Training of the toy denoiser with the plain noise-prediction objective."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..core import MDEError, Vocabulary
from .backend import ToyBackend
from .model import ToyArch, ToyDenoiser
from .scenes import SyntheticScene
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)


class DivergedTraining(MDEError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    min_lr: float = 5e-5
    warmup_steps: int = 200
    weight_decay: float = 1e-4
    ema_decay: float = 0.999
    caption_dropout: float = 0.1
    grad_clip: float = 1.0


def scenes_to_tensors(scenes: Sequence[SyntheticScene], vocab: Vocabulary, context_length: int):
    from ..core import pad_ids, tokenize

    images = torch.from_numpy(np.stack([s.render() for s in scenes]).astype(np.float32)) * 2 - 1
    ids = torch.tensor([pad_ids(tokenize(s.caption, vocab), context_length, vocab) for s in scenes])
    return images, ids


def noise_prediction_loss(model: ToyDenoiser, schedule: NoiseSchedule, z0, ids, t, noise) -> torch.Tensor:
    """Mean squared error between the injected noise and the network's estimate."""
    zt = schedule.q_sample(z0, t, noise)
    return F.mse_loss(model(zt, t, model.text_encode(ids)), noise)


def heldout_loss(backend: ToyBackend, scenes: Sequence[SyntheticScene], seed: int = 1234, repeats: int = 4) -> float:
    """Noise-prediction loss on fixed (t, noise) draws, for comparison across checkpoints."""
    images, ids = scenes_to_tensors(scenes, backend.vocabulary, backend.arch.context_length)
    g = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for _ in range(repeats):
            for start in range(0, len(images), 64):
                z0 = images[start : start + 64]
                t = torch.randint(1, backend.schedule.num_train_timesteps + 1, (len(z0),), generator=g)
                noise = torch.randn(z0.shape, generator=g)
                loss = noise_prediction_loss(backend.model, backend.schedule, z0, ids[start : start + 64], t, noise)
                total += float(loss) * len(z0)
                count += len(z0)
    return total / count


def train_toy(
    dataset: Sequence[SyntheticScene],
    epochs: float,
    seed: int,
    arch: ToyArch | None = None,
    config: TrainConfig = TrainConfig(),
    vocabulary: Vocabulary | None = None,
    schedule: NoiseSchedule | None = None,
    callback: Optional[Callable[[int, float, ToyBackend], None]] = None,
    callback_every: int = 500,
) -> ToyBackend:
    """Train a fresh denoiser on ``dataset`` and return the EMA weights as a backend."""
    if not dataset:
        raise MDEError("dataset is empty")
    vocabulary = vocabulary or Vocabulary()
    schedule = schedule or NoiseSchedule()
    arch = arch or ToyArch(vocab_size=len(vocabulary))
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)

    model = ToyDenoiser(arch)
    ema = copy.deepcopy(model)
    for p in ema.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    images, ids = scenes_to_tensors(dataset, vocabulary, arch.context_length)
    null_ids = torch.tensor(
        [vocabulary.bos_id, vocabulary.eos_id] + [vocabulary.pad_id] * (arch.context_length - 2)
    )
    n = len(images)
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = max(1, int(round(epochs * steps_per_epoch)))

    def lr_at(step: int) -> float:
        if step < config.warmup_steps:
            return config.lr * (step + 1) / config.warmup_steps
        frac = (step - config.warmup_steps) / max(1, total_steps - config.warmup_steps)
        return config.min_lr + 0.5 * (config.lr - config.min_lr) * (1 + math.cos(math.pi * frac))

    step = 0
    running = None
    model.train()
    while step < total_steps:
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, config.batch_size):
            if step >= total_steps:
                break
            idx = perm[start : start + config.batch_size]
            z0 = images[idx]
            cap = ids[idx].clone()
            drop = torch.rand(len(idx), generator=gen) < config.caption_dropout
            cap[drop] = null_ids
            t = torch.randint(1, schedule.num_train_timesteps + 1, (len(idx),), generator=gen)
            noise = torch.randn(z0.shape, generator=gen)
            loss = noise_prediction_loss(model, schedule, z0, cap, t, noise)
            if not torch.isfinite(loss):
                raise DivergedTraining(f"non-finite loss at step {step}")
            for g in opt.param_groups:
                g["lr"] = lr_at(step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            with torch.no_grad():
                d = min(config.ema_decay, (1 + step) / (10 + step))
                for pe, pm in zip(ema.parameters(), model.parameters()):
                    pe.mul_(d).add_(pm, alpha=1 - d)
            lv = loss.item()
            running = lv if running is None else 0.98 * running + 0.02 * lv
            step += 1
            if step % 100 == 0:
                log.info("step %d/%d loss %.4f lr %.2e", step, total_steps, running, lr_at(step))
            if callback is not None and (step % callback_every == 0 or step == total_steps):
                callback(step, running, ToyBackend(copy.deepcopy(ema), vocabulary, schedule))
    return ToyBackend(ema, vocabulary, schedule)
