"""Packing raw series and prompt strings into fine-grained token sequences.

Covers patching with a sliding window, optional per-window standardization,
splitting the patch sequence into ordered parts, a byte-level prompt
tokenizer, and assembly of the three sequence layouts used by the model:

* vanilla:          [patch tokens..., prompt tokens...]
* few-shot forecast: part_1, prompt, part_2, prompt, ..., part_N, prompt
* few-shot classify: ex_1, prompt, label_1, ..., ex_l, prompt, label_l,
                     query, prompt
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import numerics as nm
from .numerics import Tensor

DEFAULT_FORECAST_PROMPT = "Predict future sequences using previous data:"
CLASS_PROMPT_TEMPLATE = "Predict category ({count} in total) using previous data:"

NORM_STD_EPS = 1e-5


class LayoutError(ValueError):
    """Inputs inconsistent with the requested sequence layout."""


class TokenRole(NamedTuple):
    """Role of one fine-sequence position.

    kind:  "ts" | "prompt" | "label"
    group: part index for ts, copy index for prompt, example index for label
    index: position within the part / prompt copy (0 for labels)
    """

    kind: str
    group: int
    index: int


@dataclass(frozen=True)
class SeriesWindow:
    """One channel's contiguous slice of raw values, plus its z-score stats."""

    values: np.ndarray
    channel_id: int = 0
    norm_stats: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 1:
            raise LayoutError("SeriesWindow values must be 1-d")
        if self.norm_stats is not None and self.norm_stats[1] <= 0:
            raise LayoutError("norm_stats std must be positive")


@dataclass(frozen=True)
class SequenceLayout:
    """Which positions of the packed sequence hold what, and their grouping."""

    mode: str  # "vca" | "fsca_forecast" | "fsca_class"
    roles: tuple[TokenRole, ...]
    part_lengths: tuple[int, ...]
    prompt_len: int
    prompt_ids: tuple[int, ...]
    example_count: int = 0  # fsca_class only: number of demonstration examples

    @property
    def total_len(self) -> int:
        return len(self.roles)

    @property
    def n_patches(self) -> int:
        return sum(self.part_lengths)

    def positions(self, kind: str, group: int) -> list[int]:
        return [i for i, r in enumerate(self.roles) if r.kind == kind and r.group == group]

    def part_count(self) -> int:
        return len(self.part_lengths)

    def prompt_copy_count(self) -> int:
        return 1 + max((r.group for r in self.roles if r.kind == "prompt"), default=-1)


@dataclass
class PatchEmbedder:
    """Linear map from a length-p patch to an M-dimensional token embedding."""

    weight: Tensor  # (p, M)
    bias: Tensor  # (M,)

    @property
    def patch_size(self) -> int:
        return self.weight.shape[0]

    @property
    def width(self) -> int:
        return self.weight.shape[1]

    def embed(self, patches: np.ndarray) -> Tensor:
        if patches.ndim != 2 or patches.shape[1] != self.patch_size:
            raise LayoutError(
                f"patches of shape {patches.shape} do not match patch size {self.patch_size}"
            )
        return nm.add(nm.matmul(Tensor(patches), self.weight), self.bias)


def patchify(window: SeriesWindow, p: int, s: int) -> np.ndarray:
    """Slice a window into (T-p+s)/s overlapping patches of length p, stride s.

    (T - p) must be divisible by s; otherwise the caller has to pad or trim —
    nothing is padded silently here.
    """
    if p < 1 or s < 1:
        raise LayoutError("patch size and stride must be >= 1")
    t = window.values.shape[0]
    if t < p:
        raise LayoutError(f"window length {t} shorter than patch size {p}")
    if (t - p) % s != 0:
        raise LayoutError(
            f"(T - p) = {t - p} not divisible by stride {s}; pad or trim the window"
        )
    n = (t - p + s) // s
    return np.stack([window.values[i * s : i * s + p] for i in range(n)])


def instance_normalize(window: SeriesWindow) -> SeriesWindow:
    """Per-window z-score; stores (mean, std + eps) for exact inversion."""
    mean = float(window.values.mean())
    std = float(window.values.std()) + NORM_STD_EPS
    return SeriesWindow(
        values=(window.values - mean) / std,
        channel_id=window.channel_id,
        norm_stats=(mean, std),
    )


def denormalize(pred: np.ndarray, stats: tuple[float, float]) -> np.ndarray:
    mean, std = stats
    return np.asarray(pred) * std + mean


def split_parts(n: int, count: int) -> tuple[int, ...]:
    """Split n patches into `count` ordered parts of near-equal length.

    Lengths differ by at most one; the longer parts sit at the end so the
    most recent context gets the extra capacity.
    """
    if count < 1:
        raise LayoutError("part count must be >= 1")
    if count > n:
        raise LayoutError(f"cannot split {n} patches into {count} parts")
    base, rem = divmod(n, count)
    return tuple([base] * (count - rem) + [base + 1] * rem)


def tokenize_prompt(text: str) -> tuple[int, ...]:
    """Byte-level tokenization: one token per UTF-8 byte, id = byte value."""
    if not text:
        raise LayoutError("prompt must be non-empty")
    return tuple(text.encode("utf-8"))


def _roles_vca(n: int, m: int) -> tuple[TokenRole, ...]:
    return tuple(
        [TokenRole("ts", 0, i) for i in range(n)] + [TokenRole("prompt", 0, t) for t in range(m)]
    )


def _roles_fsca_forecast(part_lengths: Sequence[int], m: int) -> tuple[TokenRole, ...]:
    roles: list[TokenRole] = []
    for j, lj in enumerate(part_lengths):
        roles.extend(TokenRole("ts", j, s) for s in range(lj))
        roles.extend(TokenRole("prompt", j, t) for t in range(m))
    return tuple(roles)


def _roles_fsca_class(n: int, l: int, m: int) -> tuple[TokenRole, ...]:
    roles: list[TokenRole] = []
    for k in range(l):
        roles.extend(TokenRole("ts", k, i) for i in range(n))
        roles.extend(TokenRole("prompt", k, t) for t in range(m))
        roles.append(TokenRole("label", k, 0))
    roles.extend(TokenRole("ts", l, i) for i in range(n))
    roles.extend(TokenRole("prompt", l, t) for t in range(m))
    return tuple(roles)


def layout_vca(n: int, prompt_ids: Sequence[int]) -> SequenceLayout:
    m = len(prompt_ids)
    if n < 1 or m < 1:
        raise LayoutError("vanilla layout needs at least one patch and one prompt token")
    return SequenceLayout(
        mode="vca",
        roles=_roles_vca(n, m),
        part_lengths=(n,),
        prompt_len=m,
        prompt_ids=tuple(prompt_ids),
    )


def layout_fsca_forecast(n: int, n_parts: int, prompt_ids: Sequence[int]) -> SequenceLayout:
    m = len(prompt_ids)
    if m < 1:
        raise LayoutError("prompt must be non-empty")
    lengths = split_parts(n, n_parts)
    return SequenceLayout(
        mode="fsca_forecast",
        roles=_roles_fsca_forecast(lengths, m),
        part_lengths=lengths,
        prompt_len=m,
        prompt_ids=tuple(prompt_ids),
    )


def layout_fsca_class(n: int, example_count: int, prompt_ids: Sequence[int]) -> SequenceLayout:
    m = len(prompt_ids)
    if example_count < 1:
        raise LayoutError("few-shot classification needs at least one demonstration example")
    if n < 1 or m < 1:
        raise LayoutError("classification layout needs at least one patch and one prompt token")
    return SequenceLayout(
        mode="fsca_class",
        roles=_roles_fsca_class(n, example_count, m),
        part_lengths=tuple([n] * (example_count + 1)),
        prompt_len=m,
        prompt_ids=tuple(prompt_ids),
        example_count=example_count,
    )


@dataclass(frozen=True)
class VcaMode:
    pass


@dataclass(frozen=True)
class FscaForecastMode:
    n_parts: int


@dataclass(frozen=True)
class FscaClassMode:
    example_patches: tuple[np.ndarray, ...] = field(default_factory=tuple)
    example_labels: tuple[int, ...] = field(default_factory=tuple)


def build_sequence(
    patches: np.ndarray,
    prompt_ids: Sequence[int],
    mode,
    embedder: PatchEmbedder,
    prompt_table: Tensor,
    label_table: Tensor | None = None,
) -> tuple[SequenceLayout, Tensor]:
    """Assemble the fine token matrix (total_len x M) for one input.

    `patches` is the (n, p) patch stack of the window being modeled (the
    query window for classification).  Prompt tokens are looked up in
    `prompt_table`; label tokens (classification only) in `label_table`.
    """
    if patches.ndim != 2:
        raise LayoutError("patches must be a 2-d (n, p) array")
    n = patches.shape[0]
    prompt_ids = tuple(prompt_ids)
    prompt_rows = nm.gather_rows(prompt_table, np.asarray(prompt_ids, dtype=np.int64))

    if isinstance(mode, VcaMode):
        layout = layout_vca(n, prompt_ids)
        fine = nm.concat_rows([embedder.embed(patches), prompt_rows])
        return layout, fine

    if isinstance(mode, FscaForecastMode):
        layout = layout_fsca_forecast(n, mode.n_parts, prompt_ids)
        pieces = []
        start = 0
        for lj in layout.part_lengths:
            pieces.append(embedder.embed(patches[start : start + lj]))
            pieces.append(prompt_rows)
            start += lj
        return layout, nm.concat_rows(pieces)

    if isinstance(mode, FscaClassMode):
        if label_table is None:
            raise LayoutError("classification layout needs a label table")
        if len(mode.example_patches) != len(mode.example_labels) or not mode.example_patches:
            raise LayoutError("need one labeled demonstration example per class")
        for ex in mode.example_patches:
            if ex.shape != patches.shape:
                raise LayoutError(
                    f"example patch stack {ex.shape} differs from query {patches.shape}"
                )
        l = len(mode.example_patches)
        layout = layout_fsca_class(n, l, prompt_ids)
        pieces = []
        for ex, lab in zip(mode.example_patches, mode.example_labels):
            pieces.append(embedder.embed(ex))
            pieces.append(prompt_rows)
            pieces.append(nm.gather_rows(label_table, np.asarray([lab], dtype=np.int64)))
        pieces.append(embedder.embed(patches))
        pieces.append(prompt_rows)
        return layout, nm.concat_rows(pieces)

    raise LayoutError(f"unknown sequence mode {mode!r}")
