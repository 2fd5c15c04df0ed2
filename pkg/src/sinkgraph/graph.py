"""Undirected graphs as reciprocal arc pairs, batching, and JSONL datasets.

Every undirected edge ``e = {u, v}`` is stored as two arcs ``(u, v, e)`` and
``(v, u, e)`` sharing one edge id, so per-edge quantities are computed once
and applied to both directions. Graphs are immutable after construction.

Dataset file format: JSON Lines, one object per example:

    {"num_nodes": int, "edges": [[u, v], ...], "features": [[f, ...], ...],
     "label": int, "gt_edge_mask": [0/1, ...], "gt_node_mask": [0/1, ...],
     "env": str}

``gt_edge_mask``, ``gt_node_mask`` and ``env`` are optional.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from sinkgraph.errors import (
    DuplicateEdge,
    EmptyBatch,
    FeatureDimMismatch,
    IndexOutOfRange,
    InvalidPermutation,
    SelfLoop,
)


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    num_edges: int
    node_features: np.ndarray  # [num_nodes, feat_dim]
    edge_u: np.ndarray  # [num_edges], canonical endpoint u < v
    edge_v: np.ndarray
    arc_src: np.ndarray  # [2 * num_edges]
    arc_dst: np.ndarray
    arc_edge: np.ndarray

    @property
    def feat_dim(self) -> int:
        return self.node_features.shape[1]

    @property
    def num_arcs(self) -> int:
        return self.arc_src.shape[0]

    @property
    def arcs(self) -> np.ndarray:
        """[num_arcs, 3] rows of (src, dst, edge_id)."""
        return np.stack([self.arc_src, self.arc_dst, self.arc_edge], axis=1)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.arc_src, minlength=self.num_nodes)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def new_graph(num_nodes: int, edges: Sequence[tuple[int, int]], features) -> Graph:
    """Build a graph from undirected edges; arcs are symmetrized.

    Raises on out-of-range endpoints, self-loops, and duplicate undirected
    edges. ``features`` must have one row per node.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != num_nodes:
        raise FeatureDimMismatch(
            f"features shape {features.shape} does not match {num_nodes} nodes"
        )
    m = len(edges)
    edge_u = np.empty(m, dtype=np.int64)
    edge_v = np.empty(m, dtype=np.int64)
    seen: set[tuple[int, int]] = set()
    for e, (a, b) in enumerate(edges):
        a, b = int(a), int(b)
        if not (0 <= a < num_nodes and 0 <= b < num_nodes):
            raise IndexOutOfRange(f"edge ({a},{b}) references a missing node")
        if a == b:
            raise SelfLoop(f"self-loop at node {a}")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise DuplicateEdge(f"duplicate undirected edge {key}")
        seen.add(key)
        edge_u[e], edge_v[e] = key
    arc_src = np.concatenate([edge_u, edge_v]) if m else np.empty(0, dtype=np.int64)
    arc_dst = np.concatenate([edge_v, edge_u]) if m else np.empty(0, dtype=np.int64)
    arc_edge = np.concatenate([np.arange(m), np.arange(m)]) if m else np.empty(0, dtype=np.int64)
    order = np.argsort(arc_src, kind="stable") if m else np.empty(0, dtype=np.int64)
    return Graph(
        num_nodes=num_nodes,
        num_edges=m,
        node_features=_freeze(features),
        edge_u=_freeze(edge_u),
        edge_v=_freeze(edge_v),
        arc_src=_freeze(arc_src[order]),
        arc_dst=_freeze(arc_dst[order]),
        arc_edge=_freeze(arc_edge[order].astype(np.int64)),
    )


def permute_nodes(graph: Graph, perm: Sequence[int]) -> tuple[Graph, np.ndarray]:
    """Relabel nodes by ``perm`` (old id -> new id).

    Edge order is preserved, so the returned edge relabeling is the
    identity; it is returned explicitly for callers tracking edge ids.
    """
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (graph.num_nodes,) or not np.array_equal(
        np.sort(perm), np.arange(graph.num_nodes)
    ):
        raise InvalidPermutation("perm must be a bijection on node ids")
    inv = np.argsort(perm)
    edges = list(zip(perm[graph.edge_u].tolist(), perm[graph.edge_v].tolist()))
    g = new_graph(graph.num_nodes, edges, graph.node_features[inv])
    return g, np.arange(graph.num_edges, dtype=np.int64)


def incident_edges(graph: Graph, node: int) -> np.ndarray:
    """Edge ids touching ``node``, each once, in arc order."""
    if not 0 <= node < graph.num_nodes:
        raise IndexOutOfRange(f"node {node} out of range")
    return graph.arc_edge[graph.arc_src == node].copy()


@dataclass(frozen=True)
class LabeledExample:
    graph: Graph
    label: int
    gt_edge_mask: np.ndarray | None = None
    gt_node_mask: np.ndarray | None = None
    env_tag: str | None = None

    def __post_init__(self):
        if self.gt_edge_mask is not None and len(self.gt_edge_mask) != self.graph.num_edges:
            raise FeatureDimMismatch("gt_edge_mask length mismatch")
        if self.gt_node_mask is not None and len(self.gt_node_mask) != self.graph.num_nodes:
            raise FeatureDimMismatch("gt_node_mask length mismatch")


Dataset = list[LabeledExample]


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of graphs with per-node/per-edge segment maps."""

    num_graphs: int
    num_nodes: int
    num_edges: int
    node_features: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    arc_src: np.ndarray
    arc_dst: np.ndarray
    arc_edge: np.ndarray
    node_offsets: np.ndarray  # [num_graphs + 1]
    edge_offsets: np.ndarray
    segment_of_node: np.ndarray  # [num_nodes]
    segment_of_edge: np.ndarray  # [num_edges]
    labels: np.ndarray  # [num_graphs]
    gt_edge_mask: np.ndarray | None = None
    gt_node_mask: np.ndarray | None = None

    @property
    def feat_dim(self) -> int:
        return self.node_features.shape[1]

    @property
    def edges_per_graph(self) -> np.ndarray:
        return np.diff(self.edge_offsets)


def batch(examples: Sequence[LabeledExample]) -> GraphBatch:
    """Merge examples into one graph; node ids of graph i are offset by the
    total node count of graphs before it."""
    if len(examples) == 0:
        raise EmptyBatch("cannot batch zero graphs")
    feat_dim = examples[0].graph.feat_dim
    for ex in examples:
        if ex.graph.feat_dim != feat_dim:
            raise FeatureDimMismatch(
                f"feature dims differ: {ex.graph.feat_dim} vs {feat_dim}"
            )
    node_counts = [ex.graph.num_nodes for ex in examples]
    edge_counts = [ex.graph.num_edges for ex in examples]
    node_offsets = np.concatenate([[0], np.cumsum(node_counts)]).astype(np.int64)
    edge_offsets = np.concatenate([[0], np.cumsum(edge_counts)]).astype(np.int64)

    feats = np.concatenate([ex.graph.node_features for ex in examples], axis=0)
    edge_u = np.concatenate(
        [ex.graph.edge_u + node_offsets[i] for i, ex in enumerate(examples)]
    ).astype(np.int64)
    edge_v = np.concatenate(
        [ex.graph.edge_v + node_offsets[i] for i, ex in enumerate(examples)]
    ).astype(np.int64)
    arc_src = np.concatenate(
        [ex.graph.arc_src + node_offsets[i] for i, ex in enumerate(examples)]
    ).astype(np.int64)
    arc_dst = np.concatenate(
        [ex.graph.arc_dst + node_offsets[i] for i, ex in enumerate(examples)]
    ).astype(np.int64)
    arc_edge = np.concatenate(
        [ex.graph.arc_edge + edge_offsets[i] for i, ex in enumerate(examples)]
    ).astype(np.int64)
    seg_node = np.repeat(np.arange(len(examples), dtype=np.int64), node_counts)
    seg_edge = np.repeat(np.arange(len(examples), dtype=np.int64), edge_counts)
    labels = np.array([ex.label for ex in examples], dtype=np.int64)

    gt_edge = None
    if all(ex.gt_edge_mask is not None for ex in examples):
        gt_edge = np.concatenate([np.asarray(ex.gt_edge_mask, dtype=bool) for ex in examples])
    gt_node = None
    if all(ex.gt_node_mask is not None for ex in examples):
        gt_node = np.concatenate([np.asarray(ex.gt_node_mask, dtype=bool) for ex in examples])

    return GraphBatch(
        num_graphs=len(examples),
        num_nodes=int(node_offsets[-1]),
        num_edges=int(edge_offsets[-1]),
        node_features=_freeze(feats),
        edge_u=_freeze(edge_u),
        edge_v=_freeze(edge_v),
        arc_src=_freeze(arc_src),
        arc_dst=_freeze(arc_dst),
        arc_edge=_freeze(arc_edge),
        node_offsets=_freeze(node_offsets),
        edge_offsets=_freeze(edge_offsets),
        segment_of_node=_freeze(seg_node),
        segment_of_edge=_freeze(seg_edge),
        labels=_freeze(labels),
        gt_edge_mask=None if gt_edge is None else _freeze(gt_edge),
        gt_node_mask=None if gt_node is None else _freeze(gt_node),
    )


def unbatch(gb: GraphBatch) -> list[Graph]:
    """Split a batch back into its member graphs (inverse of :func:`batch`)."""
    out = []
    for i in range(gb.num_graphs):
        n0, n1 = gb.node_offsets[i], gb.node_offsets[i + 1]
        e0, e1 = gb.edge_offsets[i], gb.edge_offsets[i + 1]
        edges = list(
            zip((gb.edge_u[e0:e1] - n0).tolist(), (gb.edge_v[e0:e1] - n0).tolist())
        )
        out.append(new_graph(int(n1 - n0), edges, gb.node_features[n0:n1]))
    return out


# --- JSONL serialization -------------------------------------------------

def example_to_dict(ex: LabeledExample) -> dict:
    g = ex.graph
    obj = {
        "num_nodes": g.num_nodes,
        "edges": np.stack([g.edge_u, g.edge_v], axis=1).tolist() if g.num_edges else [],
        "features": g.node_features.tolist(),
        "label": int(ex.label),
    }
    if ex.gt_edge_mask is not None:
        obj["gt_edge_mask"] = [int(b) for b in ex.gt_edge_mask]
    if ex.gt_node_mask is not None:
        obj["gt_node_mask"] = [int(b) for b in ex.gt_node_mask]
    if ex.env_tag is not None:
        obj["env"] = ex.env_tag
    return obj


def example_from_dict(obj: dict) -> LabeledExample:
    g = new_graph(obj["num_nodes"], [tuple(e) for e in obj["edges"]], obj["features"])
    return LabeledExample(
        graph=g,
        label=int(obj["label"]),
        gt_edge_mask=(
            np.asarray(obj["gt_edge_mask"], dtype=bool) if "gt_edge_mask" in obj else None
        ),
        gt_node_mask=(
            np.asarray(obj["gt_node_mask"], dtype=bool) if "gt_node_mask" in obj else None
        ),
        env_tag=obj.get("env"),
    )


def save_dataset(path: str | Path, examples: Iterable[LabeledExample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_dict(ex)) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(example_from_dict(json.loads(line)))
    return out
