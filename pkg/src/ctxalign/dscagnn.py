"""Dual-scale alignment block: coarse projection, GCN updates, interaction.

One block recomputes edge weights from the current fine embeddings, runs a
single graph-convolution step on both scales,

    updated = relu(A_hat @ nodes @ W),    A_hat = normalized adjacency,

and adds the coarse-to-fine transfer

    fine += (gamma.T @ coarse_updated) @ W_cf.T

to the fine branch.  Edge weights enter as run constants (no gradient flows
through the cosine normalization); nodes and the W matrices are trained.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .graphspec import GraphSpec, compute_edge_weights, group_weights, normalize_adjacency
from .tsembed import SequenceLayout


class BlockError(ValueError):
    """Inputs inconsistent with the block's configured shapes."""


@dataclass
class CoarseProjector:
    """The two shared linear maps that collapse token blocks to single nodes.

    TS parts are flattened to part_capacity*M (zero-padded on the LEFT so
    the most recent patches keep fixed positions) and mapped through one
    weight; prompt copies are flattened to prompt_len*M and mapped through
    the other.  Label tokens pass through unchanged.  `calls` counts
    projections so the once-per-forward contract can be audited.
    """

    w_parts: Tensor  # (part_capacity * M, M)
    b_parts: Tensor  # (M,)
    w_prompt: Tensor  # (prompt_len * M, M)
    b_prompt: Tensor  # (M,)
    part_capacity: int
    calls: int = 0

    @property
    def width(self) -> int:
        return self.w_parts.shape[1]


@dataclass
class DscaParams:
    """Learnable matrices of one insertion: fine/coarse GCN weights + transfer."""

    w_fine: Tensor  # (M, M)
    w_coarse: Tensor  # (M, M)
    w_transfer: Tensor  # (M, M)


@dataclass
class DualScaleState:
    fine: Tensor  # (L_f, M)
    coarse: Tensor | None = None  # (L_c, M) once the coarse branch exists


def coarse_project(fine: Tensor, layout: SequenceLayout, proj: CoarseProjector) -> Tensor:
    """Collapse each same-modality block of the fine sequence to one node.

    All prompt copies map through the same weights and (at this point)
    identical inputs, so their coarse nodes coincide.
    """
    m = proj.width
    if fine.shape != (layout.total_len, m):
        raise BlockError(f"fine state {fine.shape} does not match layout/width ({layout.total_len}, {m})")
    rows: list[Tensor] = []
    seen: set[tuple[str, int]] = set()
    for role in layout.roles:
        key = (role.kind, role.group)
        if key in seen:
            continue
        seen.add(key)
        positions = layout.positions(role.kind, role.group)
        lo, hi = positions[0], positions[-1] + 1
        block = nm.slice_rows(fine, lo, hi)
        if role.kind == "ts":
            length = len(positions)
            if length > proj.part_capacity:
                raise BlockError(
                    f"part of length {length} exceeds projector capacity {proj.part_capacity}"
                )
            if length < proj.part_capacity:
                pad = Tensor(np.zeros((proj.part_capacity - length, m)))
                block = nm.concat_rows([pad, block])
            flat = nm.reshape(block, (1, proj.part_capacity * m))
            rows.append(nm.add(nm.matmul(flat, proj.w_parts), proj.b_parts))
        elif role.kind == "prompt":
            if len(positions) * m != proj.w_prompt.shape[0]:
                raise BlockError("prompt length does not match projector input width")
            flat = nm.reshape(block, (1, len(positions) * m))
            rows.append(nm.add(nm.matmul(flat, proj.w_prompt), proj.b_prompt))
        else:  # label tokens are already single nodes
            rows.append(block)
    proj.calls += 1
    return nm.concat_rows(rows)


def gcn_forward(nodes: Tensor, a_hat: np.ndarray, weight: Tensor) -> Tensor:
    """relu(A_hat @ nodes @ W); differentiable in nodes and W."""
    if a_hat.shape != (nodes.shape[0], nodes.shape[0]):
        raise BlockError(f"adjacency {a_hat.shape} does not match node count {nodes.shape[0]}")
    if weight.shape != (nodes.shape[1], nodes.shape[1]):
        raise BlockError(f"weight {weight.shape} does not match node width {nodes.shape[1]}")
    return nm.relu(nm.matmul(nm.matmul(Tensor(a_hat), nodes), weight))


def interaction(fine_out: Tensor, coarse_out: Tensor, gamma: np.ndarray, w_transfer: Tensor) -> Tensor:
    """fine_out + (gamma.T @ coarse_out) @ W.T: broadcast each coarse node
    to its fine members through a learnable map."""
    if gamma.shape != (coarse_out.shape[0], fine_out.shape[0]):
        raise BlockError(
            f"gamma {gamma.shape} does not match coarse {coarse_out.shape[0]} x fine {fine_out.shape[0]}"
        )
    spread = nm.matmul(Tensor(gamma.T.copy()), coarse_out)
    delta = nm.matmul(spread, nm.transpose(w_transfer))
    return nm.add(fine_out, delta)


class CosineWeighter:
    """Default weighting: recompute from the current embeddings every call."""

    def fine_weights(self, spec: GraphSpec, embeddings: np.ndarray, insertion: int) -> np.ndarray:
        return group_weights(spec, embeddings)


class FrozenWeighter:
    """Per-insertion edge weights fixed for the whole run.

    kind="random": uniform(0,1) draws renormalized per group (label groups
    stay at 1), one draw per insertion, frozen thereafter.
    kind="cosine": caches the cosine-derived weights of the first call per
    insertion (used to hold the adjacency constant, e.g. for gradient
    checking against finite differences).
    """

    def __init__(self, kind: str, seed: int = 0):
        if kind not in ("random", "cosine"):
            raise ValueError(f"unknown frozen weighter kind {kind!r}")
        self.kind = kind
        self.seed = seed
        self._cache: dict[int, np.ndarray] = {}

    def fine_weights(self, spec: GraphSpec, embeddings: np.ndarray, insertion: int) -> np.ndarray:
        if insertion not in self._cache:
            if self.kind == "random":
                rng = np.random.default_rng(self.seed * 100_003 + insertion)
                raw = rng.uniform(0.0, 1.0, size=len(spec.fine_edges))
                sums = np.zeros(spec.group_count)
                for r, e in zip(raw, spec.fine_edges):
                    sums[e.group] += r
                w = np.empty_like(raw)
                for idx, e in enumerate(spec.fine_edges):
                    if e.group in spec.fixed_weight_groups:
                        w[idx] = 1.0
                    else:
                        w[idx] = raw[idx] / sums[e.group]
                self._cache[insertion] = w
            else:
                self._cache[insertion] = group_weights(spec, embeddings)
        return self._cache[insertion]


def dsca_block(
    state: DualScaleState,
    spec: GraphSpec,
    params: DscaParams,
    *,
    layout: SequenceLayout | None = None,
    projector: CoarseProjector | None = None,
    first_insertion: bool = False,
    weighter=None,
    insertion: int = 0,
    coarse_enabled: bool = True,
) -> DualScaleState:
    """One dual-scale update.

    The first insertion projects the fine state into the coarse branch;
    later insertions consume the coarse state handed in (never re-project).
    With the coarse branch disabled only the fine GCN runs.
    """
    if weighter is None:
        weighter = CosineWeighter()
    fine_w = weighter.fine_weights(spec, state.fine.data, insertion)
    fine_adj, coarse_adj = compute_edge_weights(spec, state.fine.data, weights=fine_w)
    fine_hat = normalize_adjacency(fine_adj)

    if not coarse_enabled:
        return DualScaleState(fine=gcn_forward(state.fine, fine_hat, params.w_fine), coarse=None)

    if first_insertion:
        if state.coarse is not None:
            raise BlockError("coarse state already exists at the first insertion")
        if projector is None or layout is None:
            raise BlockError("first insertion needs the layout and the coarse projector")
        coarse = coarse_project(state.fine, layout, projector)
    else:
        if state.coarse is None:
            raise BlockError("coarse branch missing: first insertion must project it")
        coarse = state.coarse

    fine_out = gcn_forward(state.fine, fine_hat, params.w_fine)
    coarse_out = gcn_forward(coarse, normalize_adjacency(coarse_adj), params.w_coarse)
    fine_new = interaction(fine_out, coarse_out, spec.gamma, params.w_transfer)
    return DualScaleState(fine=fine_new, coarse=coarse_out)
