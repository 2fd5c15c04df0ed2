"""Training loop with early stopping, evaluation metrics, separability
histograms, and the ablation suite.

All randomness in a run flows from a single seed through four named
sub-streams (data order, Gumbel noise, parameter init, dropout), so two
runs with the same seed and config are identical, and ablation variants
trained under the same seed see the same data order and initialization.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from sinkgraph.errors import Divergence, EmptyDataset, MissingMask
from sinkgraph.graph import Dataset, GraphBatch, batch
from sinkgraph.model import (
    ModelConfig,
    forward_graph,
    forward_node,
    init_params,
    loss_nll,
)
from sinkgraph.optim import ParamStore, adam_step
from sinkgraph.tape import Tape

_STREAM_NAMES = ("data", "gumbel", "init", "dropout")


class Task(Enum):
    GRAPH_LEVEL = "graph"
    NODE_LEVEL = "node"


def named_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for data / gumbel / init / dropout."""
    children = np.random.SeedSequence(seed).spawn(len(_STREAM_NAMES))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAM_NAMES, children)}


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    patience: int = 10
    seed: int = 0
    task: Task = Task.GRAPH_LEVEL


@dataclass
class MetricsReport:
    accuracy: float
    roc_auc: float | None = None
    interpret_edge_auc: float | None = None
    precision_at_k: float | None = None
    loss_curve: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = 1
        return d


def _node_labels(gb: GraphBatch) -> np.ndarray:
    """Node-level targets: motif membership from the ground-truth mask."""
    if gb.gt_node_mask is None:
        raise MissingMask("node-level task needs gt_node_mask on every example")
    return gb.gt_node_mask.astype(np.int64)


def _batch_loss(gb: GraphBatch, store, config: TrainConfig, streams, train_mode: bool):
    if config.task is Task.GRAPH_LEVEL:
        logits, _, _ = forward_graph(
            gb, store, config.model, train_mode=train_mode,
            gumbel_rng=streams["gumbel"], dropout_rng=streams["dropout"],
        )
        return loss_nll(logits, gb.labels)
    logits, _ = forward_node(
        gb, store, config.model, train_mode=train_mode,
        gumbel_rng=streams["gumbel"], dropout_rng=streams["dropout"],
    )
    return loss_nll(logits, _node_labels(gb))


def _accuracy(store, dataset: Dataset, config: TrainConfig, eval_batch: int = 256) -> float:
    correct, total = 0, 0
    for i in range(0, len(dataset), eval_batch):
        gb = batch(dataset[i : i + eval_batch])
        if config.task is Task.GRAPH_LEVEL:
            logits, _, _ = forward_graph(gb, store, config.model, train_mode=False)
            correct += int((logits.data.argmax(axis=1) == gb.labels).sum())
            total += gb.num_graphs
        else:
            logits, _ = forward_node(gb, store, config.model, train_mode=False)
            correct += int((logits.data.argmax(axis=1) == _node_labels(gb)).sum())
            total += gb.num_nodes
    return correct / total


def train(
    train_ds: Dataset, val_ds: Dataset, config: TrainConfig
) -> tuple[ParamStore, dict]:
    """Run the full training procedure and return the best parameters.

    Per epoch: shuffle, batch, forward, NLL loss, Adam step. Validation
    accuracy drives early stopping: after ``patience`` epochs without
    strict improvement, training stops and the parameters of the best
    epoch (earliest on ties) are restored.
    """
    if not train_ds or not val_ds:
        raise EmptyDataset("train and validation sets must be non-empty")
    streams = named_streams(config.seed)
    store = init_params(config.model, streams["init"])
    n = len(train_ds)
    history: dict = {"train_loss": [], "val_accuracy": [], "best_epoch": None}
    best_acc, best_epoch, best_state = -np.inf, None, None
    stale = 0
    for epoch in range(config.epochs):
        order = streams["data"].permutation(n)
        epoch_loss = 0.0
        for i in range(0, n, config.batch_size):
            gb = batch([train_ds[j] for j in order[i : i + config.batch_size]])
            with Tape() as tape:
                loss = _batch_loss(gb, store, config, streams, train_mode=True)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise Divergence(f"non-finite loss at epoch {epoch}")
            grads = store.grads_by_name(tape.backward(loss))
            adam_step(store, grads, config.learning_rate)
            epoch_loss += lval * gb.num_graphs
        history["train_loss"].append(epoch_loss / n)
        val_acc = _accuracy(store, val_ds, config)
        history["val_accuracy"].append(val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch, best_state = val_acc, epoch, store.state_copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_state is not None:
        store.load_state(best_state)
    history["best_epoch"] = best_epoch
    history["best_val_accuracy"] = best_acc
    return store, history


# --- metrics --------------------------------------------------------------

def rank_auc(scores, labels) -> float:
    """ROC-AUC via the rank statistic; ties get average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = float(ranks[labels].sum())
    return (pos_rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


def interpret_metrics(alpha_e, gt_edge_mask, k: int = 5) -> tuple[float, float]:
    """Edge-attention quality against a ground-truth mask.

    Returns (ROC-AUC, precision@k): the AUC of attention as a per-edge
    binary classifier, and the fraction of the k highest-attention edges
    that are ground-truth.
    """
    if gt_edge_mask is None:
        raise MissingMask("interpretability metrics need gt_edge_mask")
    alpha = np.asarray(alpha_e, dtype=np.float64)
    mask = np.asarray(gt_edge_mask, dtype=bool)
    auc = rank_auc(alpha, mask)
    k_eff = min(k, alpha.size)
    top = np.argsort(-alpha, kind="mergesort")[:k_eff]
    precision = float(mask[top].sum()) / k_eff
    return auc, precision


def evaluate(
    store: ParamStore,
    dataset: Dataset,
    config: TrainConfig,
    eval_batch: int = 256,
    precision_k: int = 5,
) -> MetricsReport:
    """Deterministic evaluation pass (no noise, frozen statistics).

    Interpretability numbers are averaged per graph: the AUC skips graphs
    whose mask is degenerate (all true or all false).
    """
    if not dataset:
        raise EmptyDataset("cannot evaluate an empty dataset")
    model = config.model
    correct, total = 0, 0
    bin_scores: list[np.ndarray] = []
    bin_labels: list[np.ndarray] = []
    aucs: list[float] = []
    precs: list[float] = []
    for i in range(0, len(dataset), eval_batch):
        part = dataset[i : i + eval_batch]
        gb = batch(part)
        if config.task is Task.GRAPH_LEVEL:
            logits, alpha_e, _ = forward_graph(gb, store, model, train_mode=False)
            correct += int((logits.data.argmax(axis=1) == gb.labels).sum())
            total += gb.num_graphs
            if model.num_classes == 2:
                bin_scores.append(logits.data[:, 1] - logits.data[:, 0])
                bin_labels.append(gb.labels.astype(bool))
        else:
            logits, alpha_e = forward_node(gb, store, model, train_mode=False)
            labels = _node_labels(gb)
            correct += int((logits.data.argmax(axis=1) == labels).sum())
            total += gb.num_nodes
            if model.num_classes == 2:
                bin_scores.append(logits.data[:, 1] - logits.data[:, 0])
                bin_labels.append(labels.astype(bool))
        if gb.gt_edge_mask is not None:
            for g in range(gb.num_graphs):
                e0, e1 = gb.edge_offsets[g], gb.edge_offsets[g + 1]
                mask = gb.gt_edge_mask[e0:e1]
                auc, prec = interpret_metrics(alpha_e.data[e0:e1], mask, k=precision_k)
                precs.append(prec)
                if not np.isnan(auc):
                    aucs.append(auc)
    roc = None
    if bin_scores:
        roc = rank_auc(np.concatenate(bin_scores), np.concatenate(bin_labels))
    return MetricsReport(
        accuracy=correct / total,
        roc_auc=roc,
        interpret_edge_auc=float(np.mean(aucs)) if aucs else None,
        precision_at_k=float(np.mean(precs)) if precs else None,
    )


@dataclass
class SeparabilityReport:
    """Histograms of attention over background vs explanation edges."""

    bin_edges: np.ndarray  # 51 edges over [0, 1]
    counts_background: np.ndarray
    counts_explanation: np.ndarray
    overlap: float


def separability_report(pairs, num_bins: int = 50) -> SeparabilityReport:
    """Histogram pair and overlap coefficient for (alpha_e, mask) pairs.

    Overlap is the shared mass of the two normalized histograms: 0 means
    perfectly separated attention, 1 means indistinguishable.
    """
    bg, ex = [], []
    for alpha, mask in pairs:
        if mask is None:
            raise MissingMask("separability needs gt_edge_mask")
        alpha = np.asarray(alpha, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        bg.append(alpha[~mask])
        ex.append(alpha[mask])
    bg_all = np.concatenate(bg) if bg else np.empty(0)
    ex_all = np.concatenate(ex) if ex else np.empty(0)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    cb, _ = np.histogram(np.clip(bg_all, 0, 1), bins=edges)
    ce, _ = np.histogram(np.clip(ex_all, 0, 1), bins=edges)
    pb = cb / cb.sum() if cb.sum() else np.zeros(num_bins)
    pe = ce / ce.sum() if ce.sum() else np.zeros(num_bins)
    return SeparabilityReport(
        bin_edges=edges,
        counts_background=cb,
        counts_explanation=ce,
        overlap=float(np.minimum(pb, pe).sum()),
    )


def collect_attention(store: ParamStore, dataset: Dataset, config: TrainConfig):
    """Per-graph (alpha_e, gt_edge_mask) pairs from a deterministic pass."""
    pairs = []
    for i in range(0, len(dataset), 256):
        gb = batch(dataset[i : i + 256])
        if config.task is Task.GRAPH_LEVEL:
            _, alpha_e, _ = forward_graph(gb, store, config.model, train_mode=False)
        else:
            _, alpha_e = forward_node(gb, store, config.model, train_mode=False)
        for g in range(gb.num_graphs):
            e0, e1 = gb.edge_offsets[g], gb.edge_offsets[g + 1]
            mask = None if gb.gt_edge_mask is None else gb.gt_edge_mask[e0:e1]
            pairs.append((alpha_e.data[e0:e1].copy(), mask))
    return pairs


# --- ablations -------------------------------------------------------------

_VARIANTS = ("full", "no_gumbel", "no_nodeattn", "no_both", "erm")


def _variant_config(base: TrainConfig, variant: str, seed: int) -> TrainConfig:
    model = base.model
    if variant == "no_gumbel":
        model = dataclasses.replace(model, ablate_gumbel=True)
    elif variant == "no_nodeattn":
        model = dataclasses.replace(model, ablate_node_attn=True)
    elif variant == "no_both":
        model = dataclasses.replace(model, ablate_gumbel=True, ablate_node_attn=True)
    elif variant == "erm":
        model = dataclasses.replace(
            model, topr=dataclasses.replace(model.topr, r=1.0)
        )
    return dataclasses.replace(base, model=model, seed=seed)


def ablation_suite(
    base: TrainConfig,
    train_ds: Dataset,
    val_ds: Dataset,
    test_ds: Dataset,
    seeds,
    variants=_VARIANTS,
) -> dict:
    """Train every variant under every seed and tabulate test metrics.

    All variants share each seed, hence identical data order and
    initialization, making the comparison paired.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise EmptyDataset("ablation suite needs at least 3 seeds")
    table: dict = {}
    for variant in variants:
        accs, edge_aucs = [], []
        for seed in seeds:
            cfg = _variant_config(base, variant, seed)
            store, _ = train(train_ds, val_ds, cfg)
            report = evaluate(store, test_ds, cfg)
            accs.append(report.accuracy)
            if report.interpret_edge_auc is not None:
                edge_aucs.append(report.interpret_edge_auc)
        table[variant] = {
            "accuracy_mean": float(np.mean(accs)),
            "accuracy_std": float(np.std(accs)),
            "accuracies": accs,
            "edge_auc_mean": float(np.mean(edge_aucs)) if edge_aucs else None,
        }
    return table
