"""Segment reductions and row gather/scatter with backend selection.

The compiled extension (``sinkgraph._ckernels``) is used when it imported
cleanly and ``SINKGRAPH_FORCE_NUMPY`` is unset; otherwise the numpy
implementations below take over. Both accumulate in input order, so results
are bit-identical across backends.

All kernels operate on C-contiguous float64 arrays of shape [N, D] with
int64 index arrays; callers reshape 1-D data to [N, 1].
"""

from __future__ import annotations

import os

import numpy as np


def _np_segment_sum(values: np.ndarray, segments: np.ndarray, num_segments: int) -> np.ndarray:
    out = np.zeros((num_segments, values.shape[1]), dtype=np.float64)
    # bincount accumulates in input order, same as the compiled loop
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(segments, weights=values[:, j], minlength=num_segments)
    return out


def _np_segment_max(
    values: np.ndarray, segments: np.ndarray, num_segments: int, empty_value: float
) -> tuple[np.ndarray, np.ndarray]:
    out = np.full((num_segments, values.shape[1]), empty_value, dtype=np.float64)
    arg = np.full((num_segments, values.shape[1]), -1, dtype=np.int64)
    for i in range(values.shape[0]):
        s = segments[i]
        row = values[i]
        fresh = arg[s] < 0
        better = fresh | (row > out[s])
        out[s] = np.where(better, row, out[s])
        arg[s] = np.where(better, i, arg[s])
    return out, arg


def _np_gather_rows(values: np.ndarray, index: np.ndarray) -> np.ndarray:
    return values[index]


def _np_scatter_add_rows(values: np.ndarray, index: np.ndarray, num_rows: int) -> np.ndarray:
    out = np.zeros((num_rows, values.shape[1]), dtype=np.float64)
    np.add.at(out, index, values)
    return out


def _np_scatter_rows_at(values: np.ndarray, arg: np.ndarray, num_rows: int) -> np.ndarray:
    out = np.zeros((num_rows, values.shape[1]), dtype=np.float64)
    rows = arg.ravel()
    cols = np.tile(np.arange(values.shape[1]), arg.shape[0])
    keep = rows >= 0
    np.add.at(out, (rows[keep], cols[keep]), values.ravel()[keep])
    return out


_ckernels = None
if os.environ.get("SINKGRAPH_FORCE_NUMPY") != "1":
    try:
        from sinkgraph import _ckernels  # type: ignore[no-redef]
    except ImportError:
        _ckernels = None

if _ckernels is not None:
    BACKEND = "compiled"
    segment_sum = _ckernels.segment_sum
    segment_max = _ckernels.segment_max
    gather_rows = _ckernels.gather_rows
    scatter_add_rows = _ckernels.scatter_add_rows
    scatter_rows_at = _ckernels.scatter_rows_at
else:
    BACKEND = "numpy"
    segment_sum = _np_segment_sum
    segment_max = _np_segment_max
    gather_rows = _np_gather_rows
    scatter_add_rows = _np_scatter_add_rows
    scatter_rows_at = _np_scatter_rows_at
