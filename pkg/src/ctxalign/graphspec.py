"""Dual-scale directed graphs over a packed token sequence.

The fine graph has one node per token of the sequence; the coarse graph has
one node per contiguous same-modality block (TS part, prompt copy, label).
Edges are directed source -> target and the adjacency convention is
A[target][source], so a row of A collects a node's in-neighborhood.

Fine edges carry cosine-derived weights normalized to sum to one within
"groups" (a group is the set of edges the weight constraint binds
together); coarse edges always carry weight 1.  Weight values are plain
numpy constants: no gradient flows through them by design.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .numerics import cosine_similarity
from .tsembed import SequenceLayout, TokenRole

WEIGHT_FLOOR = 1e-6  # added to clamped cosines before group normalization


class GraphError(ValueError):
    """Layout incompatible with the requested graph builder."""


class FineEdge(NamedTuple):
    src: int
    tgt: int
    group: int


class CoarseEdge(NamedTuple):
    src: int
    tgt: int


@dataclass(frozen=True)
class GraphSpec:
    """Edge structure of one fine + coarse graph pair.

    gamma is the 0/1 assignment matrix (coarse x fine): gamma[i][j] = 1 iff
    fine node j aggregates into coarse node i.  Each fine column has exactly
    one 1.  `fixed_weight_groups` lists the groups whose edges carry weight
    1 without cosine weighting (the label edges of classification graphs).
    """

    n_fine: int
    n_coarse: int
    fine_edges: tuple[FineEdge, ...]
    coarse_edges: tuple[CoarseEdge, ...]
    gamma: np.ndarray
    coarse_roles: tuple[TokenRole, ...]
    group_count: int
    fixed_weight_groups: frozenset[int] = frozenset()

    def __post_init__(self):
        for e in self.fine_edges:
            if e.src == e.tgt:
                raise GraphError("self-edges are not allowed (self-loops come from A + I)")
        for e in self.coarse_edges:
            if e.src == e.tgt:
                raise GraphError("self-edges are not allowed (self-loops come from A + I)")
        if self.gamma.shape != (self.n_coarse, self.n_fine):
            raise GraphError("gamma shape must be (n_coarse, n_fine)")
        if not np.array_equal(self.gamma.sum(axis=0), np.ones(self.n_fine)):
            raise GraphError("every fine node must map to exactly one coarse node")


def _coarse_structure(layout: SequenceLayout) -> tuple[tuple[TokenRole, ...], np.ndarray, dict]:
    """Coarse node order mirrors the fine sequence: one node per block.

    Returns (roles, gamma, index) where index maps ("ts", j) / ("prompt", i)
    / ("label", k) to the coarse node id.
    """
    roles: list[TokenRole] = []
    index: dict[tuple[str, int], int] = {}
    for pos, role in enumerate(layout.roles):
        key = (role.kind, role.group)
        if key not in index:
            index[key] = len(roles)
            roles.append(TokenRole(role.kind, role.group, 0))
    gamma = np.zeros((len(roles), layout.total_len))
    for pos, role in enumerate(layout.roles):
        gamma[index[(role.kind, role.group)], pos] = 1.0
    return tuple(roles), gamma, index


def build_vca_spec(layout: SequenceLayout) -> GraphSpec:
    """Vanilla graphs: every TS token feeds every prompt token.

    Fine: edge from each patch token to each prompt token, one
    normalization group per target prompt token (the weights arriving at a
    prompt token sum to 1).  Coarse: single edge from the TS block node to
    the prompt block node.
    """
    if layout.mode != "vca":
        raise GraphError(f"expected a vanilla layout, got mode {layout.mode!r}")
    n = layout.n_patches
    m = layout.prompt_len
    ts_pos = layout.positions("ts", 0)
    pr_pos = layout.positions("prompt", 0)
    fine = [FineEdge(ts_pos[i], pr_pos[t], t) for i in range(n) for t in range(m)]
    roles, gamma, index = _coarse_structure(layout)
    coarse = [CoarseEdge(index[("ts", 0)], index[("prompt", 0)])]
    return GraphSpec(
        n_fine=layout.total_len,
        n_coarse=len(roles),
        fine_edges=tuple(fine),
        coarse_edges=tuple(coarse),
        gamma=gamma,
        coarse_roles=roles,
        group_count=m,
    )


def build_fsca_forecast_spec(layout: SequenceLayout, pruned: bool = True) -> GraphSpec:
    """Few-shot forecast graphs over N interleaved (part, prompt) blocks.

    Coarse: part j feeds prompt copy i for every j <= i (each prompt copy
    sees all preceding parts), and prompt copy i feeds part i+1 (the next
    part is the correct continuation the prompt asks for).

    Fine, pruned: part tokens connect only to the *first* token of each
    later-or-same prompt copy (one group per (copy, part), summing to 1),
    and the *last* token of prompt copy i connects to every token of part
    i+1 (one group per copy).  Unpruned: the same structure expanded over
    every prompt token, grouped per (copy, part, prompt token) and per
    (copy, prompt token).
    """
    if layout.mode != "fsca_forecast":
        raise GraphError(f"expected a few-shot forecast layout, got mode {layout.mode!r}")
    n_parts = layout.part_count()
    if n_parts < 1:
        raise GraphError("need at least one part")
    m = layout.prompt_len
    part_pos = [layout.positions("ts", j) for j in range(n_parts)]
    prompt_pos = [layout.positions("prompt", i) for i in range(n_parts)]

    fine: list[FineEdge] = []
    group = 0
    prompt_targets = [0] if pruned else list(range(m))
    for i in range(n_parts):
        for j in range(i + 1):
            for t in prompt_targets:
                tgt = prompt_pos[i][t]
                fine.extend(FineEdge(src, tgt, group) for src in part_pos[j])
                group += 1
    prompt_sources = [m - 1] if pruned else list(range(m))
    for i in range(n_parts - 1):
        for t in prompt_sources:
            src = prompt_pos[i][t]
            fine.extend(FineEdge(src, tgt, group) for tgt in part_pos[i + 1])
            group += 1

    roles, gamma, index = _coarse_structure(layout)
    coarse: list[CoarseEdge] = []
    for i in range(n_parts):
        coarse.extend(
            CoarseEdge(index[("ts", j)], index[("prompt", i)]) for j in range(i + 1)
        )
    coarse.extend(
        CoarseEdge(index[("prompt", i)], index[("ts", i + 1)]) for i in range(n_parts - 1)
    )
    return GraphSpec(
        n_fine=layout.total_len,
        n_coarse=len(roles),
        fine_edges=tuple(fine),
        coarse_edges=tuple(coarse),
        gamma=gamma,
        coarse_roles=roles,
        group_count=group,
    )


def build_fsca_class_spec(layout: SequenceLayout, pruned: bool = True) -> GraphSpec:
    """Few-shot classification graphs over l labeled examples plus a query.

    Coarse: each example/query TS block feeds its prompt copy; each labeled
    example's prompt copy feeds its label node (the label is the prompt's
    answer).  The query block (k = l) has no label edge.

    Fine, pruned: example tokens connect to the first token of their prompt
    copy (one group per block, summing to 1); the last prompt token of each
    labeled example connects to its label with fixed weight 1.
    """
    if layout.mode != "fsca_class":
        raise GraphError(f"expected a few-shot classification layout, got mode {layout.mode!r}")
    l = layout.example_count
    if l < 1:
        raise GraphError("need at least one demonstration example (use vanilla mode otherwise)")
    m = layout.prompt_len
    blocks = l + 1  # l examples plus the query
    ts_pos = [layout.positions("ts", k) for k in range(blocks)]
    prompt_pos = [layout.positions("prompt", k) for k in range(blocks)]
    label_pos = [layout.positions("label", k)[0] for k in range(l)]

    fine: list[FineEdge] = []
    group = 0
    prompt_targets = [0] if pruned else list(range(m))
    for k in range(blocks):
        for t in prompt_targets:
            tgt = prompt_pos[k][t]
            fine.extend(FineEdge(src, tgt, group) for src in ts_pos[k])
            group += 1
    fixed: set[int] = set()
    prompt_sources = [m - 1] if pruned else list(range(m))
    for k in range(l):
        for t in prompt_sources:
            fine.append(FineEdge(prompt_pos[k][t], label_pos[k], group))
            fixed.add(group)
            group += 1

    roles, gamma, index = _coarse_structure(layout)
    coarse = [CoarseEdge(index[("ts", k)], index[("prompt", k)]) for k in range(blocks)]
    coarse.extend(CoarseEdge(index[("prompt", k)], index[("label", k)]) for k in range(l))
    return GraphSpec(
        n_fine=layout.total_len,
        n_coarse=len(roles),
        fine_edges=tuple(fine),
        coarse_edges=tuple(coarse),
        gamma=gamma,
        coarse_roles=roles,
        group_count=group,
        fixed_weight_groups=frozenset(fixed),
    )


def build_spec(layout: SequenceLayout, pruned: bool = True) -> GraphSpec:
    if layout.mode == "vca":
        return build_vca_spec(layout)
    if layout.mode == "fsca_forecast":
        return build_fsca_forecast_spec(layout, pruned=pruned)
    if layout.mode == "fsca_class":
        return build_fsca_class_spec(layout, pruned=pruned)
    raise GraphError(f"unknown layout mode {layout.mode!r}")


def group_weights(spec: GraphSpec, node_embeddings: np.ndarray) -> np.ndarray:
    """Per-edge weights: clamped cosine similarity, normalized per group.

    raw = max(cos(src, tgt), 0) + 1e-6 for each edge, then each group's raw
    values are divided by the group sum, so every group sums to exactly 1.
    Fixed-weight groups (label edges) get weight 1 per edge, untouched.
    """
    if node_embeddings.shape[0] != spec.n_fine:
        raise GraphError(
            f"embeddings have {node_embeddings.shape[0]} rows, graph has {spec.n_fine} nodes"
        )
    raw = np.empty(len(spec.fine_edges))
    for idx, e in enumerate(spec.fine_edges):
        if e.group in spec.fixed_weight_groups:
            raw[idx] = 1.0
        else:
            c = cosine_similarity(node_embeddings[e.src], node_embeddings[e.tgt])
            raw[idx] = max(c, 0.0) + WEIGHT_FLOOR
    sums = np.zeros(spec.group_count)
    for idx, e in enumerate(spec.fine_edges):
        sums[e.group] += raw[idx]
    weights = np.empty_like(raw)
    for idx, e in enumerate(spec.fine_edges):
        if e.group in spec.fixed_weight_groups:
            weights[idx] = 1.0
        else:
            weights[idx] = raw[idx] / sums[e.group]
    return weights


def compute_edge_weights(
    spec: GraphSpec, node_embeddings: np.ndarray, weights: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Assemble dense weighted adjacencies (fine, coarse), A[target][source].

    `weights` overrides the cosine-derived per-edge weights (used by the
    frozen-adjacency variants); by default they are recomputed from the
    current node embeddings.
    """
    if weights is None:
        weights = group_weights(spec, node_embeddings)
    fine = np.zeros((spec.n_fine, spec.n_fine))
    for w, e in zip(weights, spec.fine_edges):
        fine[e.tgt, e.src] = w
    coarse = np.zeros((spec.n_coarse, spec.n_coarse))
    for e in spec.coarse_edges:
        coarse[e.tgt, e.src] = 1.0
    return fine, coarse


def normalize_adjacency(adj: np.ndarray) -> np.ndarray:
    """Symmetrically normalized adjacency with self-loops.

    A' = A + I;  D = diag of A' row sums;  returns D^(-1/2) A' D^(-1/2).
    Row sums are >= 1 after the self-loops, so the inverse square root is
    always defined.
    """
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise GraphError(f"adjacency must be square, got {adj.shape}")
    if np.any(adj < 0):
        raise GraphError("adjacency entries must be nonnegative")
    a_loop = adj + np.eye(adj.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_loop.sum(axis=1))
    return d_inv_sqrt[:, None] * a_loop * d_inv_sqrt[None, :]
