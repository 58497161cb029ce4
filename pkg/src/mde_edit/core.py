"""Shared domain types, the toy vocabulary and source/target token alignment."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

BOS, EOS, PAD = "<bos>", "<eos>", "<pad>"
SPECIAL_TOKENS = (BOS, EOS, PAD)

TOY_WORDS = (
    "a", "and",
    "red", "green", "blue", "yellow",
    "circle", "square", "triangle",
)


class MDEError(Exception):
    """Base class for all errors raised by this package."""


class UnknownWord(MDEError):
    def __init__(self, word: str):
        super().__init__(f"word not in vocabulary: {word!r}")
        self.word = word


class ShapeMismatch(MDEError, ValueError):
    pass


class AlignmentOutOfRange(MDEError, IndexError):
    pass


class EmptyMask(MDEError, ValueError):
    pass


class DegenerateSegmentation(MDEError, ValueError):
    pass


# --------------------------------------------------------------------------- vocabulary


class Vocabulary:
    """Word-level token table. Ids 0/1 are BOS/EOS, id 2 is padding."""

    def __init__(self, words: Iterable[str] = TOY_WORDS):
        tokens = list(SPECIAL_TOKENS)
        for w in words:
            if w not in tokens:
                tokens.append(w)
        self.tokens: tuple[str, ...] = tuple(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @property
    def bos_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def pad_id(self) -> int:
        return 2

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.bos_id, self.eos_id, self.pad_id))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def id(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise UnknownWord(word) from None

    def word(self, token_id: int) -> str:
        return self.tokens[token_id]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]

    # One token per line, line number is the id.
    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        tokens = list(tokens)
        if tokens[:2] != [BOS, EOS] or PAD not in tokens:
            raise MDEError(f"token table must start with {BOS}, {EOS} and contain {PAD}")
        vocab = cls(())
        vocab.tokens = tuple(tokens)
        vocab._ids = {t: i for i, t in enumerate(tokens)}
        return vocab

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_tokens([ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()])


def tokenize(prompt: str, vocabulary: Vocabulary) -> list[int]:
    """Map a prompt to ``[BOS, w1, ..., wn, EOS]`` ids (no padding)."""
    ids = [vocabulary.bos_id]
    for word in prompt.lower().split():
        ids.append(vocabulary.id(word))
    ids.append(vocabulary.eos_id)
    return ids


def pad_ids(ids: Sequence[int], length: int, vocabulary: Vocabulary) -> list[int]:
    if len(ids) > length:
        raise MDEError(f"prompt has {len(ids)} tokens, context length is {length}")
    return list(ids) + [vocabulary.pad_id] * (length - len(ids))


# --------------------------------------------------------------------------- alignment


@dataclass(frozen=True)
class TokenAlignment:
    """Which target tokens reuse a source token, and which are new.

    ``shared`` holds ``(src_index, tgt_index)`` pairs; ``new_tokens`` holds target
    indices. Special tokens are always shared and are excluded from
    ``common_pairs``, the set whose attention counts as competing content.
    """

    shared: tuple[tuple[int, int], ...]
    new_tokens: tuple[int, ...]
    src_ids: tuple[int, ...]
    tgt_ids: tuple[int, ...]
    special_ids: frozenset[int] = frozenset({0, 1, 2})

    def __post_init__(self):
        tgt_shared = [t for _, t in self.shared]
        seen = sorted(tgt_shared + list(self.new_tokens))
        if seen != list(range(len(self.tgt_ids))):
            raise AlignmentOutOfRange("every target index must be either shared or new, exactly once")
        for s, t in self.shared:
            if not (0 <= s < len(self.src_ids)):
                raise AlignmentOutOfRange(f"source index {s} out of range")

    @property
    def common_pairs(self) -> tuple[tuple[int, int], ...]:
        return tuple((s, t) for s, t in self.shared if self.tgt_ids[t] not in self.special_ids)

    @property
    def content_count(self) -> int:
        return sum(1 for i in self.tgt_ids if i not in self.special_ids)


def _lcs_pairs(a: Sequence[int], b: Sequence[int]) -> list[tuple[int, int]]:
    n, m = len(a), len(b)
    # suffix table so that a forward greedy walk picks the earliest match
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            dp[i, j] = dp[i + 1, j + 1] + 1 if a[i] == b[j] else max(dp[i + 1, j], dp[i, j + 1])
    pairs = []
    i = j = 0
    while i < n and j < m:
        if a[i] == b[j] and dp[i, j] == dp[i + 1, j + 1] + 1:
            pairs.append((i, j))
            i += 1
            j += 1
        elif dp[i + 1, j] >= dp[i, j + 1]:
            i += 1
        else:
            j += 1
    return pairs


def align_tokens(
    src_ids: Sequence[int],
    tgt_ids: Sequence[int],
    special_ids: Iterable[int] = (0, 1, 2),
) -> TokenAlignment:
    """Word-level LCS alignment of source and target token ids.

    Special tokens are matched by position role (BOS to BOS, EOS to EOS) and never
    count as new; content tokens outside the LCS are new.
    """
    if not src_ids or not tgt_ids:
        raise MDEError("align_tokens needs non-empty sequences")
    special = frozenset(special_ids)
    shared: list[tuple[int, int]] = []
    new: list[int] = []

    src_content = [i for i, t in enumerate(src_ids) if t not in special]
    tgt_content = [i for i, t in enumerate(tgt_ids) if t not in special]
    for pi, pj in _lcs_pairs([src_ids[i] for i in src_content], [tgt_ids[j] for j in tgt_content]):
        shared.append((src_content[pi], tgt_content[pj]))
    matched = {t for _, t in shared}
    new = [j for j in tgt_content if j not in matched]

    # special tokens: pair each with the same-kind occurrence in the source, else the nearest special
    src_special = [i for i, t in enumerate(src_ids) if t in special]
    for j, t in enumerate(tgt_ids):
        if t not in special:
            continue
        same = [i for i in src_special if src_ids[i] == t]
        if same:
            k = sum(1 for jj in range(j) if tgt_ids[jj] == t)
            shared.append((same[min(k, len(same) - 1)], j))
        elif src_special:
            shared.append((min(src_special, key=lambda i: abs(i - j)), j))
        else:
            new.append(j)
    shared.sort(key=lambda p: p[1])
    return TokenAlignment(tuple(shared), tuple(sorted(new)), tuple(src_ids), tuple(tgt_ids), special)


# --------------------------------------------------------------------------- data types


@dataclass(frozen=True)
class LatentGrid:
    data: torch.Tensor  # [C, H, W]
    timestep: int

    def __post_init__(self):
        if self.data.dim() != 3:
            raise ShapeMismatch(f"latent must be [C, H, W], got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise MDEError("latent contains non-finite values")
        if self.timestep < 0:
            raise MDEError("timestep must be non-negative")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class AttentionStack:
    """Cross-attention maps of one forward pass: one ``[h, w, n_tokens]`` map per layer/head."""

    maps: tuple[torch.Tensor, ...]
    layer_ids: tuple[str, ...]
    head_ids: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.maps) == len(self.layer_ids) == len(self.head_ids)):
            raise ShapeMismatch("maps, layer_ids and head_ids must have equal length")
        for m in self.maps:
            if m.dim() != 3:
                raise ShapeMismatch(f"attention map must be [h, w, tokens], got {tuple(m.shape)}")

    @property
    def resolutions(self) -> tuple[tuple[int, int], ...]:
        return tuple((m.shape[0], m.shape[1]) for m in self.maps)

    @property
    def n_tokens(self) -> int:
        return self.maps[0].shape[-1]

    def __len__(self) -> int:
        return len(self.maps)

    def check_normalized(self, tol: float = 1e-6) -> bool:
        for m in self.maps:
            m = m.detach()
            if (m < 0).any() or (m > 1 + tol).any():
                return False
            if (m.sum(-1) - 1).abs().max() > tol:
                return False
        return True

    def detached(self) -> "AttentionStack":
        return AttentionStack(tuple(m.detach() for m in self.maps), self.layer_ids, self.head_ids)


@dataclass(frozen=True)
class EditSpec:
    mask: np.ndarray  # binary [H, W]
    target_token_indices: tuple[int, ...]
    label: str = ""

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ShapeMismatch("edit mask must be 2-D")
        if not np.isin(m, (0, 1)).all():
            raise MDEError("edit mask must be binary")
        if m.sum() == 0:
            raise EmptyMask(f"edit {self.label!r} has an empty mask")
        if not self.target_token_indices:
            raise MDEError(f"edit {self.label!r} has no target tokens")
        object.__setattr__(self, "mask", m.astype(np.uint8))
        object.__setattr__(self, "target_token_indices", tuple(int(i) for i in self.target_token_indices))

    def check_tokens(self, alignment: TokenAlignment) -> None:
        for i in self.target_token_indices:
            if i not in alignment.new_tokens:
                raise AlignmentOutOfRange(f"edit token index {i} is not a new token of the target prompt")


@dataclass(frozen=True)
class RegionMask:
    data: np.ndarray
    role: str  # "object" | "union" | "background"

    def __post_init__(self):
        if self.role not in ("object", "union", "background"):
            raise MDEError(f"unknown mask role {self.role!r}")
        object.__setattr__(self, "data", np.asarray(self.data).astype(np.uint8))

    @classmethod
    def union(cls, masks: Sequence[np.ndarray], shape: tuple[int, int] | None = None) -> "RegionMask":
        if not masks:
            if shape is None:
                raise MDEError("need a shape for an empty union")
            return cls(np.zeros(shape, np.uint8), "union")
        out = np.zeros_like(np.asarray(masks[0]), dtype=bool)
        for m in masks:
            out |= np.asarray(m).astype(bool)
        return cls(out.astype(np.uint8), "union")

    def complement(self) -> "RegionMask":
        return RegionMask(1 - self.data, "background")


@dataclass(frozen=True)
class GuidanceConfig:
    lambda1: float = 1.0
    lambda2: float = 1.25
    delta: float = 10.0
    opt_window: int = 20
    inner_iters: int = 1
    total_steps: int = 50
    guidance_scale: float = 3.0
    ccl_reduction: str = "masked_mean"
    inject: bool = True
    # take the editing latent outside M from the reconstruction branch after each step
    merge_background: bool = True

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise MDEError("loss weights must be non-negative")
        if self.delta <= 0 or self.total_steps < 1 or self.opt_window < 0 or self.inner_iters < 0:
            raise MDEError("delta, total_steps must be positive; opt_window, inner_iters non-negative")
        if self.opt_window > self.total_steps:
            raise MDEError("opt_window cannot exceed total_steps")
        if self.ccl_reduction not in ("masked_mean", "masked_sum"):
            raise MDEError(f"unknown ccl_reduction {self.ccl_reduction!r}")

    @property
    def optimizes(self) -> bool:
        return self.opt_window > 0 and self.inner_iters > 0 and (self.lambda1 > 0 or self.lambda2 > 0)


def tensor_digest(*tensors: torch.Tensor) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
