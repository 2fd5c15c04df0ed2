"""Soft top-r edge attention via entropically regularized optimal transport.

Scores are mapped to a 2-row transport problem: moving mass to the
"invariant" row (marginal ``r * m``) or the "variant" row (marginal
``(1 - r) * m``) with unit mass per edge column. Alternating row/column
normalizations (Sinkhorn) solve it; the invariant row of the resulting
plan is the edge attention. The whole pipeline runs on the tape, so
attention is differentiable with respect to the scores through all
unrolled iterations.

Conventions baked in here:

* cost anchors ``min(s)`` / ``max(s)`` are taken over the unperturbed
  scores of each segment, while Gumbel noise perturbs the numerators;
* each iteration applies the row step then the column step, so returned
  plans are exactly column-normalized and attention lies in [0, 1];
* ``r = 1`` short-circuits to all-ones attention (the transport problem
  degenerates: the variant row would carry zero mass).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from sinkgraph import tape as tp
from sinkgraph.errors import (
    DegenerateTrace,
    EmptySegment,
    InvalidConfig,
    InvalidRatio,
    NonFiniteValue,
    SegmentTooSmall,
    ZeroMarginal,
)
from sinkgraph.tape import Tensor

_CLAMP = 50.0  # cap on D / tau before exponentiation
_DENOM_FLOOR = 1e-300
_RESIDUAL_FLOOR = 1e-14


class TopRMode(Enum):
    MICRO = "micro"  # one transport problem per graph
    MACRO = "macro"  # one transport problem for the whole batch


@dataclass(frozen=True)
class TopRConfig:
    r: float = 0.5
    tau: float = 1.0
    sigma: float = 1.0
    n_iters: int = 10
    mode: TopRMode = TopRMode.MICRO

    def __post_init__(self):
        if not 0.0 < self.r <= 1.0:
            raise InvalidRatio(f"r={self.r} outside (0, 1]")
        if self.tau <= 0.0:
            raise InvalidConfig(f"tau={self.tau} must be positive")
        if self.sigma < 0.0:
            raise InvalidConfig(f"sigma={self.sigma} must be nonnegative")
        if self.n_iters < 1:
            raise InvalidConfig(f"n_iters={self.n_iters} must be >= 1")


@dataclass
class TransportPlan:
    """Nonnegative 2 x m plan; row 1 is the invariant-destination row."""

    T: Tensor
    tau: float
    m: int
    r: float | None = None


@dataclass(frozen=True)
class ConvergenceTrace:
    """Per-iteration row-marginal residual and plan movement (L2 norms)."""

    row_residuals: np.ndarray
    plan_deltas: np.ndarray


def gumbel_perturb(scores, sigma: float, rng: np.random.Generator | None) -> Tensor:
    """``s - sigma * log(-log u)`` with u ~ Uniform(0,1) minus endpoints.

    ``sigma = 0`` returns the scores unchanged (evaluation mode).
    """
    scores = tp.tensor(scores)
    if sigma == 0.0:
        return scores
    if rng is None:
        raise InvalidConfig("gumbel_perturb with sigma > 0 needs an rng")
    u = rng.random(scores.data.shape)
    u = u * (1.0 - 2e-12) + 1e-12
    noise = -sigma * np.log(-np.log(u))
    return scores + tp.tensor(noise)


def build_cost(scores, perturbed=None) -> Tensor:
    """Cost matrix [2, m]: row 0 distance to min(s), row 1 to max(s).

    Anchors use the unperturbed ``scores``; ``perturbed`` (default:
    ``scores``) supplies the numerators.
    """
    scores = tp.tensor(scores)
    m = scores.data.shape[0]
    if m < 1:
        raise EmptySegment("cost matrix needs at least one edge")
    st = scores if perturbed is None else tp.tensor(perturbed)
    smin = tp.neg(tp.max_reduce(tp.neg(scores)))
    smax = tp.max_reduce(scores)
    row_var = st - smin
    row_inv = smax - st
    return tp.concat([tp.broadcast_row(row_var, 1), tp.broadcast_row(row_inv, 1)], axis=0)


def build_marginals(m: int, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Row marginals [(1-r)m, rm] and unit column marginals."""
    if m < 1:
        raise EmptySegment("need at least one edge")
    if not 0.0 < r <= 1.0:
        raise InvalidRatio(f"r={r} outside (0, 1]")
    return np.array([(1.0 - r) * m, r * m]), np.ones(m)


def sinkhorn_init(D, tau: float) -> TransportPlan:
    """Initial plan ``exp(-D / tau)``, stabilized and clamped.

    Each column of ``D / tau`` is shifted by its own minimum before the
    exponent. Column rescalings are absorbed by column normalization, so
    the transport plan is unchanged, but the shift keeps the clamp (at 50)
    from flattening genuinely different costs when scores are spread wider
    than ``50 * tau``.
    """
    if tau <= 0.0:
        raise InvalidConfig(f"tau={tau} must be positive")
    D = tp.tensor(D)
    scaled = D / tau
    colmin = tp.neg(tp.max_reduce(tp.neg(scaled), axis=0, keepdims=True))
    T = tp.exp(tp.neg(tp.clamp(scaled - colmin, max_value=_CLAMP)))
    return TransportPlan(T=T, tau=tau, m=D.data.shape[1])


def sinkhorn_iterate(
    plan: TransportPlan, R, C, n_iters: int
) -> tuple[TransportPlan, ConvergenceTrace]:
    """Alternating row/column rescaling toward marginals R and C.

    Each iteration scales rows to R then columns to C, so the returned
    plan is exactly column-normalized. The trace records, per iteration,
    the L2 row-marginal residual and the plan delta from the previous
    iterate.
    """
    T = plan.T
    m = T.data.shape[1]
    Rt = tp.tensor(np.asarray(R, dtype=np.float64))
    Ct = tp.tensor(np.asarray(C, dtype=np.float64))
    residuals = np.zeros(n_iters)
    deltas = np.zeros(n_iters)
    prev = T.data.copy()
    for k in range(n_iters):
        rowsum = T.sum(axis=1)
        if rowsum.data.min() < _DENOM_FLOOR:
            raise ZeroMarginal(f"row sum underflow at iteration {k}")
        T = T * tp.broadcast_col(Rt / rowsum, m)
        colsum = T.sum(axis=0)
        if colsum.data.min() < _DENOM_FLOOR:
            raise ZeroMarginal(f"column sum underflow at iteration {k}")
        T = T * tp.broadcast_row(Ct / colsum, 2)
        residuals[k] = np.linalg.norm(T.data.sum(axis=1) - np.asarray(R))
        deltas[k] = np.linalg.norm(T.data - prev)
        prev = T.data.copy()
    return (
        TransportPlan(T=T, tau=plan.tau, m=m, r=plan.r),
        ConvergenceTrace(row_residuals=residuals, plan_deltas=deltas),
    )


def edge_attention(plan: TransportPlan) -> Tensor:
    """Invariant-row slice T[1, :] of a column-normalized plan."""
    row = tp.gather_rows(plan.T, np.array([1], dtype=np.int64))
    return row.sum(axis=0)


def soft_top_r(
    scores,
    segments,
    config: TopRConfig,
    rng: np.random.Generator | None = None,
    num_segments: int | None = None,
) -> Tensor:
    """Per-segment soft top-r attention, vectorized over segments.

    Mathematically identical to running the perturb / cost / marginals /
    init / iterate / slice pipeline on each segment separately; segments
    are processed jointly with segment reductions so the tape stays small.
    Gumbel noise uses one spawned rng child per segment, making results
    independent of segment evaluation order.
    """
    scores = tp.tensor(scores)
    seg = np.ascontiguousarray(np.asarray(segments, dtype=np.int64))
    m_total = scores.data.shape[0]
    if seg.shape != (m_total,):
        raise SegmentTooSmall("segment map must cover every edge")
    n_seg = int(num_segments) if num_segments is not None else (int(seg.max()) + 1 if m_total else 0)
    if n_seg < 1 or m_total == 0:
        raise SegmentTooSmall("need at least one non-empty segment")
    seg_sizes = np.bincount(seg, minlength=n_seg)
    if seg_sizes.min() == 0:
        raise SegmentTooSmall(f"segment {int(np.argmin(seg_sizes))} has no edges")

    if config.r == 1.0:
        return tp.tensor(np.ones(m_total))

    # Gumbel perturbation, one deterministic sub-stream per segment
    noise = None
    if config.sigma > 0.0:
        if rng is None:
            raise InvalidConfig("sigma > 0 requires an rng")
        noise = np.empty(m_total)
        children = rng.spawn(n_seg)
        order = np.argsort(seg, kind="stable")
        pos = 0
        for g in range(n_seg):
            size = int(seg_sizes[g])
            u = children[g].random(size)
            u = u * (1.0 - 2e-12) + 1e-12
            noise[order[pos : pos + size]] = -config.sigma * np.log(-np.log(u))
            pos += size

    needs_tape = tp._current_tape() is not None and (
        scores.requires_grad or scores.vjp is not None
    )
    if not needs_tape:
        return tp.tensor(_soft_top_r_raw(scores.data, noise, seg, n_seg, seg_sizes, config))

    st = scores if noise is None else scores + tp.tensor(noise)

    # cost columns [M, 2]: distance to per-segment min / max of raw scores
    neg_min = tp.segment_max(tp.neg(scores), seg, n_seg)
    smax = tp.segment_max(scores, seg, n_seg)
    min_e = tp.neg(tp.gather_rows(neg_min, seg))
    max_e = tp.gather_rows(smax, seg)
    col_var = st - min_e
    col_inv = max_e - st
    D = tp.concat([tp.broadcast_col(col_var, 1), tp.broadcast_col(col_inv, 1)], axis=1)

    # same per-column stabilization as sinkhorn_init (plan-invariant)
    scaled = D / config.tau
    colmin = tp.neg(tp.max_reduce(tp.neg(scaled), axis=1, keepdims=True))
    T = tp.exp(tp.neg(tp.clamp(scaled - colmin, max_value=_CLAMP)))
    R_mat = np.stack(
        [(1.0 - config.r) * seg_sizes.astype(np.float64), config.r * seg_sizes.astype(np.float64)],
        axis=1,
    )
    Rt = tp.tensor(R_mat)
    for _ in range(config.n_iters):
        rowsum = tp.segment_sum(T, seg, n_seg)
        if rowsum.data.min() < _DENOM_FLOOR:
            raise ZeroMarginal("row sum underflow")
        T = T * tp.gather_rows(Rt / rowsum, seg)
        colsum = T.sum(axis=1, keepdims=True)
        if colsum.data.min() < _DENOM_FLOOR:
            raise ZeroMarginal("column sum underflow")
        T = T / colsum
    return (T * tp.tensor(np.array([[0.0, 1.0]]))).sum(axis=1)


def _soft_top_r_raw(
    s: np.ndarray,
    noise: np.ndarray | None,
    seg: np.ndarray,
    n_seg: int,
    seg_sizes: np.ndarray,
    config: TopRConfig,
) -> np.ndarray:
    """Plain-array mirror of the on-tape pipeline, used when no gradient is
    required. Operation order matches the tape path exactly, so results are
    bit-identical."""
    from sinkgraph import kernels

    st = s if noise is None else s + noise
    s2 = s.reshape(-1, 1)
    neg_min = kernels.segment_max(np.ascontiguousarray(-s2), seg, n_seg, 0.0)[0][:, 0]
    smax = kernels.segment_max(np.ascontiguousarray(s2), seg, n_seg, 0.0)[0][:, 0]
    min_e = -kernels.gather_rows(np.ascontiguousarray(neg_min.reshape(-1, 1)), seg)[:, 0]
    max_e = kernels.gather_rows(np.ascontiguousarray(smax.reshape(-1, 1)), seg)[:, 0]
    col_var = st - min_e
    col_inv = max_e - st
    D = np.concatenate([col_var[:, None], col_inv[:, None]], axis=1)
    scaled = D / config.tau
    colmin = -np.max(-scaled, axis=1, keepdims=True)
    T = np.exp(-np.clip(scaled - colmin, None, _CLAMP))
    R_mat = np.stack(
        [(1.0 - config.r) * seg_sizes.astype(np.float64), config.r * seg_sizes.astype(np.float64)],
        axis=1,
    )
    T = np.ascontiguousarray(T)
    for _ in range(config.n_iters):
        rowsum = kernels.segment_sum(T, seg, n_seg)
        if rowsum.min() < _DENOM_FLOOR:
            raise ZeroMarginal("row sum underflow")
        T = T * kernels.gather_rows(np.ascontiguousarray(R_mat / rowsum), seg)
        colsum = T.sum(axis=1, keepdims=True)
        if colsum.min() < _DENOM_FLOOR:
            raise ZeroMarginal("column sum underflow")
        T = T / colsum
    alpha = (T * np.array([[0.0, 1.0]])).sum(axis=1)
    if not np.all(np.isfinite(alpha)):
        raise NonFiniteValue("soft_top_r produced non-finite attention")
    return alpha


def node_attention(graph, alpha_e) -> Tensor:
    """Max of incident edge attention per node; isolated nodes get 0."""
    alpha_e = tp.tensor(alpha_e)
    per_arc = tp.gather_rows(alpha_e, graph.arc_edge)
    return tp.segment_max(per_arc, graph.arc_src, graph.num_nodes, empty_value=0.0)


def estimate_rho(trace: ConvergenceTrace) -> tuple[float, float]:
    """Fit ``log(residual_k) ~ a + k * log(rho)`` by least squares.

    Residuals at or below the 1e-14 floor are dropped (they sit in
    round-off noise); at least 4 usable leading residuals are required.
    Returns ``(rho_hat, fit_r2)``; ``rho_hat >= 1`` flags a
    non-contracting trace.
    """
    res = np.asarray(trace.row_residuals, dtype=np.float64)
    if res.shape[0] < 4:
        raise DegenerateTrace(f"trace length {res.shape[0]} < 4")
    usable = res > _RESIDUAL_FLOOR
    cut = int(np.argmin(usable)) if not usable.all() else res.shape[0]
    if cut < 4:
        raise DegenerateTrace("fewer than 4 residuals above the 1e-14 floor")
    k = np.arange(1, cut + 1, dtype=np.float64)
    y = np.log(res[:cut])
    slope, intercept = np.polyfit(k, y, 1)
    fitted = intercept + slope * k
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return float(np.exp(slope)), r2
