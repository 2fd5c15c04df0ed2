"""Score head, attention-weighted GIN message passing, and predictors.

The score head (a 2-layer GIN plus a pairwise MLP on concatenated endpoint
embeddings) produces one scalar per undirected edge, normalized batch-style
to a stable range. The soft top-r operator turns scores into edge
attention; node attention is the max over incident edges. The predictor is
a GIN whose messages are weighted by edge attention, followed by an
attention-weighted readout (graph tasks) or a per-node classifier (node
tasks).

Setting ``r = 1`` disables subgraph extraction: attention is all ones and
the forward pass reduces to the plain GIN in :func:`forward_plain`, bit for
bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sinkgraph import tape as tp
from sinkgraph.errors import InvalidConfig, InvalidLabel, TooFewEdges
from sinkgraph.graph import GraphBatch
from sinkgraph.optim import ParamStore
from sinkgraph.sinkhorn import TopRConfig, TopRMode, node_attention, soft_top_r
from sinkgraph.tape import Tensor

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1
_VAR_GUARD = 1e-12
_SCORE_GIN_LAYERS = 2


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int
    hidden_dim: int = 32
    num_layers: int = 2
    num_classes: int = 3
    dropout_rate: float = 0.3
    topr: TopRConfig = field(default_factory=TopRConfig)
    ablate_gumbel: bool = False
    ablate_node_attn: bool = False
    readout: str = "sum"

    def __post_init__(self):
        if min(self.feat_dim, self.hidden_dim, self.num_layers, self.num_classes) <= 0:
            raise InvalidConfig("model dimensions must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfig(f"dropout_rate={self.dropout_rate} outside [0, 1)")
        if self.readout not in ("sum", "mean"):
            raise InvalidConfig(f"unknown readout kind {self.readout!r}")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParamStore:
    """Glorot-initialized score head (phi) and predictor (theta)."""
    store = ParamStore()

    def gin_layer(prefix: str, d_in: int, d_hid: int) -> None:
        store.add(f"{prefix}.lin1.w", _glorot(rng, d_in, d_hid))
        store.add(f"{prefix}.lin1.b", np.zeros(d_hid))
        store.add(f"{prefix}.lin2.w", _glorot(rng, d_hid, d_hid))
        store.add(f"{prefix}.lin2.b", np.zeros(d_hid))

    h = config.hidden_dim
    for layer in range(_SCORE_GIN_LAYERS):
        gin_layer(f"score.gin{layer}", config.feat_dim if layer == 0 else h, h)
    store.add("score.mlp.lin1.w", _glorot(rng, 2 * h, h))
    store.add("score.mlp.lin1.b", np.zeros(h))
    store.add("score.mlp.lin2.w", _glorot(rng, h, 1))
    store.add("score.mlp.lin2.b", np.zeros(1))
    store.add_buffer("score.norm_mean", np.zeros(1))
    store.add_buffer("score.norm_var", np.ones(1))

    for layer in range(config.num_layers):
        gin_layer(f"pred.gin{layer}", config.feat_dim if layer == 0 else h, h)
    store.add("pred.cls.w", _glorot(rng, h, config.num_classes))
    store.add("pred.cls.b", np.zeros(config.num_classes))
    return store


def _linear(x: Tensor, store: ParamStore, name: str) -> Tensor:
    return tp.matmul(x, store.params[f"{name}.w"]) + store.params[f"{name}.b"]


def _dropout(h: Tensor, rate: float, train_mode: bool, rng) -> Tensor:
    if not train_mode or rate <= 0.0:
        return h
    mask = (rng.random(h.data.shape) >= rate) / (1.0 - rate)
    return h * tp.tensor(mask)


def _gin_layer(
    batch: GraphBatch,
    h: Tensor,
    prefix: str,
    store: ParamStore,
    alpha_arc: Tensor | None,
    config: ModelConfig,
    train_mode: bool,
    dropout_rng,
) -> Tensor:
    """GIN update h_i' = MLP(h_i + sum_{j->i} w_ij h_j); epsilon fixed at 0.

    ``alpha_arc`` carries per-arc attention weights; None means the plain
    unweighted update (the two paths are bitwise-equal at weight 1).
    """
    msg = tp.gather_rows(h, batch.arc_src)
    if alpha_arc is not None:
        msg = msg * tp.broadcast_col(alpha_arc, h.data.shape[1])
    agg = tp.segment_sum(msg, batch.arc_dst, batch.num_nodes)
    pre = h + agg
    out = _linear(tp.relu(_linear(pre, store, f"{prefix}.lin1")), store, f"{prefix}.lin2")
    return _dropout(out, config.dropout_rate, train_mode, dropout_rng)


def encode_nodes(
    batch: GraphBatch,
    store: ParamStore,
    config: ModelConfig,
    train_mode: bool = False,
    dropout_rng=None,
    num_layers: int | None = None,
) -> Tensor:
    """Score-head GIN embeddings of every node in the batch.

    ``num_layers=0`` returns the input features unchanged.
    """
    layers = _SCORE_GIN_LAYERS if num_layers is None else num_layers
    h = tp.tensor(batch.node_features)
    for layer in range(layers):
        h = _gin_layer(batch, h, f"score.gin{layer}", store, None, config, train_mode, dropout_rng)
    return h


def edge_scores(
    embeddings: Tensor,
    batch: GraphBatch,
    store: ParamStore,
    train_mode: bool = False,
) -> Tensor:
    """One normalized score per undirected edge.

    The pairwise MLP reads concatenated endpoint embeddings; both
    orientations are averaged so the score depends only on the edge, not on
    node labeling. Scores are normalized to mean 0 / std 1 over the whole
    batch at train time (running statistics updated with momentum 0.1);
    evaluation uses the frozen running statistics.
    """
    if train_mode and batch.num_edges < 2:
        raise TooFewEdges("batch normalization needs at least 2 edges")
    hu = tp.gather_rows(embeddings, batch.edge_u)
    hv = tp.gather_rows(embeddings, batch.edge_v)

    def pair_mlp(x):
        return _linear(tp.relu(_linear(x, store, "score.mlp.lin1")), store, "score.mlp.lin2")

    raw = 0.5 * (pair_mlp(tp.concat([hu, hv], axis=1)) + pair_mlp(tp.concat([hv, hu], axis=1)))
    s = raw.sum(axis=1)  # [m, 1] -> [m]
    if train_mode:
        mu = s.mean()
        centered = s - mu
        var = (centered * centered).mean()
        std = tp.exp(0.5 * tp.log(var + _VAR_GUARD))
        out = centered / (std + _BN_EPS)
        rm, rv = store.buffers["score.norm_mean"], store.buffers["score.norm_var"]
        rm *= 1.0 - _BN_MOMENTUM
        rm += _BN_MOMENTUM * mu.data
        rv *= 1.0 - _BN_MOMENTUM
        rv += _BN_MOMENTUM * var.data
        return out
    rm = float(store.buffers["score.norm_mean"][0])
    rv = float(store.buffers["score.norm_var"][0])
    return (s - rm) / (np.sqrt(rv + _VAR_GUARD) + _BN_EPS)


def weighted_message_pass(
    batch: GraphBatch,
    h: Tensor,
    alpha_e: Tensor,
    prefix: str,
    store: ParamStore,
    config: ModelConfig,
    train_mode: bool = False,
    dropout_rng=None,
) -> Tensor:
    """One predictor GIN layer with messages weighted by edge attention."""
    alpha_arc = tp.gather_rows(alpha_e, batch.arc_edge)
    return _gin_layer(batch, h, prefix, store, alpha_arc, config, train_mode, dropout_rng)


def readout(h: Tensor, alpha_v: Tensor, batch: GraphBatch, kind: str = "sum") -> Tensor:
    """Per-graph reduction of node-attention-weighted embeddings."""
    weighted = h * tp.broadcast_col(alpha_v, h.data.shape[1])
    pooled = tp.segment_sum(weighted, batch.segment_of_node, batch.num_graphs)
    if kind == "mean":
        counts = np.diff(batch.node_offsets).astype(np.float64)
        pooled = pooled / tp.tensor(counts[:, None])
    return pooled


def _attention(
    batch: GraphBatch,
    store: ParamStore,
    config: ModelConfig,
    train_mode: bool,
    gumbel_rng=None,
    dropout_rng=None,
) -> tuple[Tensor, Tensor]:
    """Edge and node attention for a batch; all-ones at r = 1."""
    topr = config.topr
    if topr.r == 1.0:
        # degenerate mode: attention fixed at 1, score head not consulted
        alpha_e = tp.tensor(np.ones(batch.num_edges))
    else:
        emb = encode_nodes(batch, store, config, train_mode, dropout_rng)
        scores = edge_scores(emb, batch, store, train_mode)
        sigma = topr.sigma if (train_mode and not config.ablate_gumbel) else 0.0
        run_cfg = TopRConfig(
            r=topr.r, tau=topr.tau, sigma=sigma, n_iters=topr.n_iters, mode=topr.mode
        )
        if topr.mode is TopRMode.MICRO:
            segments, n_seg = batch.segment_of_edge, batch.num_graphs
        else:
            segments = np.zeros(batch.num_edges, dtype=np.int64)
            n_seg = 1
        alpha_e = soft_top_r(scores, segments, run_cfg, rng=gumbel_rng, num_segments=n_seg)
    if config.ablate_node_attn:
        alpha_v = tp.tensor(np.ones(batch.num_nodes))
    else:
        alpha_v = node_attention(batch, alpha_e)
    return alpha_e, alpha_v


def forward_graph(
    batch: GraphBatch,
    store: ParamStore,
    config: ModelConfig,
    train_mode: bool = False,
    gumbel_rng=None,
    dropout_rng=None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Graph-level logits plus the attention pair that produced them."""
    alpha_e, alpha_v = _attention(batch, store, config, train_mode, gumbel_rng, dropout_rng)
    h = tp.tensor(batch.node_features)
    for layer in range(config.num_layers):
        h = weighted_message_pass(
            batch, h, alpha_e, f"pred.gin{layer}", store, config, train_mode, dropout_rng
        )
    hg = readout(h, alpha_v, batch, config.readout)
    logits = _linear(hg, store, "pred.cls")
    return logits, alpha_e, alpha_v


def forward_node(
    batch: GraphBatch,
    store: ParamStore,
    config: ModelConfig,
    train_mode: bool = False,
    gumbel_rng=None,
    dropout_rng=None,
) -> tuple[Tensor, Tensor]:
    """Per-node logits; no readout stage, node attention unused."""
    alpha_e, _ = _attention(batch, store, config, train_mode, gumbel_rng, dropout_rng)
    h = tp.tensor(batch.node_features)
    for layer in range(config.num_layers):
        h = weighted_message_pass(
            batch, h, alpha_e, f"pred.gin{layer}", store, config, train_mode, dropout_rng
        )
    logits = _linear(h, store, "pred.cls")
    return logits, alpha_e


def forward_plain(
    batch: GraphBatch,
    store: ParamStore,
    config: ModelConfig,
    train_mode: bool = False,
    dropout_rng=None,
) -> Tensor:
    """Reference GIN + pooling forward with no attention machinery."""
    h = tp.tensor(batch.node_features)
    for layer in range(config.num_layers):
        h = _gin_layer(batch, h, f"pred.gin{layer}", store, None, config, train_mode, dropout_rng)
    pooled = tp.segment_sum(h, batch.segment_of_node, batch.num_graphs)
    if config.readout == "mean":
        counts = np.diff(batch.node_offsets).astype(np.float64)
        pooled = pooled / tp.tensor(counts[:, None])
    return _linear(pooled, store, "pred.cls")


def loss_nll(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood under a softmax over the logits.

    Computed via log-sum-exp, so confident predictions cannot underflow.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise InvalidLabel(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidLabel("label outside [0, num_classes)")
    m = tp.max_reduce(logits, axis=1, keepdims=True)
    z = logits - m
    lse = tp.log(tp.exp(z).sum(axis=1)) + m.sum(axis=1)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = (logits * tp.tensor(onehot)).sum(axis=1)
    return (lse - picked).mean()
