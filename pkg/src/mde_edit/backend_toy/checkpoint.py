"""Toy denoiser checkpoints (architecture, vocabulary and schedule in the JSON header)."""
from __future__ import annotations

from pathlib import Path

from ..container import read_blobs, write_blobs
from ..core import MDEError, Vocabulary
from .backend import ToyBackend
from .model import ToyArch, ToyDenoiser
from .schedule import NoiseSchedule


def save_backend(backend: ToyBackend, path: str | Path, extra: dict | None = None) -> None:
    header = {
        "format": "mde-toy-denoiser",
        "architecture": backend.arch.to_dict(),
        "vocabulary": list(backend.vocabulary.tokens),
        "vocabulary_hash": backend.vocabulary.digest(),
        "schedule": backend.schedule.to_dict(),
        "extra": extra or {},
    }
    write_blobs(path, header, dict(backend.model.state_dict()))


def load_backend(path: str | Path) -> ToyBackend:
    header, tensors = read_blobs(path)
    if header.get("format") != "mde-toy-denoiser":
        raise MDEError(f"{path}: not a toy denoiser checkpoint")
    vocab = Vocabulary.from_tokens(header["vocabulary"])
    if vocab.digest() != header["vocabulary_hash"]:
        raise MDEError(f"{path}: vocabulary hash mismatch")
    model = ToyDenoiser(ToyArch.from_dict(header["architecture"]))
    model.load_state_dict(tensors)
    backend = ToyBackend(model, vocab, NoiseSchedule.from_dict(header["schedule"]))
    backend.checkpoint_header = header
    return backend
