"""Synthetic benchmark: label-determining motif attached to a spuriously
correlated base graph.

Each example is a small motif (cycle / house / crane) whose class index is
the graph label, joined by a single bridging edge to a larger base graph
(tree / ladder / wheel). In the train and validation splits the base kind
matches the label with probability ``bias_b``; the test split draws base
kinds uniformly, producing the distribution shift. Ground-truth masks mark
the motif's nodes and internal edges.

Fixed templates (documented here because downstream tests enumerate them):

    cycle  5 nodes, 5 edges   0-1-2-3-4-0
    house  5 nodes, 6 edges   square 0-1-2-3 plus roof node 4 on edge (0,1)
    crane  6 nodes, 6 edges   square body 0-1-2-3, neck (0,4), head (4,5)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from sinkgraph.errors import InvalidConfig, SizeTooSmall
from sinkgraph.graph import Dataset, LabeledExample, new_graph, save_dataset


class MotifKind(Enum):
    CYCLE = 0
    HOUSE = 1
    CRANE = 2


class BaseKind(Enum):
    TREE = 0
    LADDER = 1
    WHEEL = 2


class FeatMode(Enum):
    DEGREE_ONE_HOT = "degree-one-hot"
    UNIFORM_RANDOM = "uniform-random"


@dataclass(frozen=True)
class Fragment:
    """Edge list on local node ids; features are attached later."""

    num_nodes: int
    edges: tuple[tuple[int, int], ...]


_MOTIF_EDGES = {
    MotifKind.CYCLE: ((0, 1), (1, 2), (2, 3), (3, 4), (4, 0)),
    MotifKind.HOUSE: ((0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)),
    MotifKind.CRANE: ((0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (4, 5)),
}
_MOTIF_NODES = {MotifKind.CYCLE: 5, MotifKind.HOUSE: 5, MotifKind.CRANE: 6}


def make_motif(kind: MotifKind) -> tuple[Fragment, int]:
    n = _MOTIF_NODES[kind]
    return Fragment(n, _MOTIF_EDGES[kind]), n


def make_base(kind: BaseKind, size: int, rng: np.random.Generator) -> Fragment:
    """Connected base graph on exactly ``size`` nodes."""
    if size < 4:
        raise SizeTooSmall(f"base size {size} < 4")
    if kind is BaseKind.TREE:
        # uniform random recursive tree
        edges = [(int(rng.integers(0, i)), i) for i in range(1, size)]
    elif kind is BaseKind.LADDER:
        k = size // 2
        edges = []
        for i in range(k - 1):
            edges.append((i, i + 1))  # left rail
            edges.append((k + i, k + i + 1))  # right rail
        for i in range(k):
            edges.append((i, k + i))  # rungs
        if size % 2 == 1:
            # odd leftover node hangs off the last rung
            edges.append((2 * k - 1, 2 * k))
    else:  # WHEEL: hub 0 plus a rim cycle
        rim = size - 1
        edges = [(0, i) for i in range(1, size)]
        edges += [(i, i % rim + 1) for i in range(1, size)]
    return Fragment(size, tuple(edges))


def attach(
    base: Fragment, motif: Fragment, rng: np.random.Generator
) -> tuple[Fragment, np.ndarray, np.ndarray]:
    """Join base and motif with one bridging edge.

    Base nodes keep ids [0, nb); motif node ids are offset by nb. Returns
    the combined fragment plus ground-truth edge/node masks (true on the
    motif, false on base and bridge).
    """
    nb = base.num_nodes
    motif_edges = [(u + nb, v + nb) for u, v in motif.edges]
    bridge = (int(rng.integers(0, nb)), nb + int(rng.integers(0, motif.num_nodes)))
    edges = list(base.edges) + motif_edges + [bridge]
    edge_mask = np.zeros(len(edges), dtype=bool)
    edge_mask[len(base.edges) : len(base.edges) + len(motif_edges)] = True
    node_mask = np.zeros(nb + motif.num_nodes, dtype=bool)
    node_mask[nb:] = True
    return Fragment(nb + motif.num_nodes, tuple(edges)), edge_mask, node_mask


@dataclass(frozen=True)
class SynthConfig:
    bias_b: float = 0.9
    n_train: int = 600
    n_val: int = 200
    n_test: int = 600
    base_size_range: tuple[int, int] = (8, 14)
    feat_mode: FeatMode = FeatMode.DEGREE_ONE_HOT
    feat_dim: int = 11
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.bias_b <= 1.0:
            raise InvalidConfig(f"bias_b={self.bias_b} outside [0, 1]")
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise InvalidConfig("split sizes must be positive")
        lo, hi = self.base_size_range
        if lo > hi or lo < 4:
            raise InvalidConfig(f"bad base_size_range {self.base_size_range}")
        if self.feat_dim <= 0:
            raise InvalidConfig("feat_dim must be positive")


def _features(frag: Fragment, mode: FeatMode, dim: int, rng: np.random.Generator) -> np.ndarray:
    if mode is FeatMode.UNIFORM_RANDOM:
        return rng.random((frag.num_nodes, dim))
    deg = np.zeros(frag.num_nodes, dtype=np.int64)
    for u, v in frag.edges:
        deg[u] += 1
        deg[v] += 1
    feats = np.zeros((frag.num_nodes, dim))
    feats[np.arange(frag.num_nodes), np.minimum(deg, dim - 1)] = 1.0
    return feats


def _sample_example(cfg: SynthConfig, rng: np.random.Generator, biased: bool) -> LabeledExample:
    label = int(rng.integers(0, 3))
    motif, _ = make_motif(MotifKind(label))
    if biased and rng.random() < cfg.bias_b:
        base_kind = BaseKind(label)
    else:
        if biased:
            others = [k for k in BaseKind if k.value != label]
            base_kind = others[int(rng.integers(0, 2))]
        else:
            base_kind = BaseKind(int(rng.integers(0, 3)))
    size = int(rng.integers(cfg.base_size_range[0], cfg.base_size_range[1] + 1))
    base = make_base(base_kind, size, rng)
    frag, edge_mask, node_mask = attach(base, motif, rng)
    feats = _features(frag, cfg.feat_mode, cfg.feat_dim, rng)
    return LabeledExample(
        graph=new_graph(frag.num_nodes, frag.edges, feats),
        label=label,
        gt_edge_mask=edge_mask,
        gt_node_mask=node_mask,
        env_tag=base_kind.name.lower(),
    )


def generate_dataset(cfg: SynthConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Biased train/val splits plus an unbiased test split.

    Splits use independent rng streams derived from ``cfg.seed``, so the
    same seed always reproduces byte-identical datasets.
    """
    cfg.validate()
    seq = np.random.SeedSequence(cfg.seed)
    rng_train, rng_val, rng_test = (np.random.default_rng(s) for s in seq.spawn(3))
    train = [_sample_example(cfg, rng_train, biased=True) for _ in range(cfg.n_train)]
    val = [_sample_example(cfg, rng_val, biased=True) for _ in range(cfg.n_val)]
    test = [_sample_example(cfg, rng_test, biased=False) for _ in range(cfg.n_test)]
    return train, val, test


def write_dataset_files(cfg: SynthConfig, out_dir: str | Path) -> dict:
    """Generate and write train/val/test JSONL plus a metadata sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val, test = generate_dataset(cfg)
    save_dataset(out / "train.jsonl", train)
    save_dataset(out / "val.jsonl", val)
    save_dataset(out / "test.jsonl", test)
    meta = asdict(cfg)
    meta["feat_mode"] = cfg.feat_mode.value
    meta["base_size_range"] = list(cfg.base_size_range)
    meta["schema_version"] = 1
    with open(out / "metadata.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    return meta
