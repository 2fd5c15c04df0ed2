"""Parameter store, Adam updates, and checkpoint serialization.

Checkpoint layout (little-endian, documented for external tooling):

    magic           8 bytes   b"SGCKPT01"
    n_params        uint32
    n_buffers       uint32
    step_count      uint64
    then for each named array (params first, buffers after):
        name_len    uint16
        name        utf-8 bytes
        ndim        uint8
        dims        ndim x uint64
        payload     float64 little-endian, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sinkgraph.errors import MissingGradient
from sinkgraph.tape import Tensor, parameter

_MAGIC = b"SGCKPT01"


@dataclass
class ParamStore:
    """Named trainable tensors plus Adam moment buffers.

    ``buffers`` holds non-trainable state (e.g. running normalization
    statistics); it is checkpointed but never touched by the optimizer.
    """

    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        t = parameter(data)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        self.buffers[name] = np.asarray(data, dtype=np.float64)
        return self.buffers[name]

    def grads_by_name(self, grad_map: dict[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
        """Translate a tape gradient map into named gradients.

        Parameters the forward pass never touched get zero gradients.
        """
        out = {}
        for name, t in self.params.items():
            g = grad_map.get(t)
            out[name] = np.zeros_like(t.data) if g is None else g
        return out

    def state_copy(self) -> dict[str, np.ndarray]:
        snap = {f"p:{k}": t.data.copy() for k, t in self.params.items()}
        snap.update({f"b:{k}": b.copy() for k, b in self.buffers.items()})
        return snap

    def load_state(self, snap: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data[...] = snap[f"p:{k}"]
        for k in self.buffers:
            self.buffers[k][...] = snap[f"b:{k}"]


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """Standard Adam with bias correction; updates the store in place."""
    for name in store.params:
        if name not in grads:
            raise MissingGradient(f"no gradient for parameter {name!r}")
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return store


def _write_named(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_named(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", fh.read(2))
    name = fh.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    dims = [struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim)]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return name, data


def save_checkpoint(path: str | Path, store: ParamStore) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", len(store.params), len(store.buffers)))
        fh.write(struct.pack("<Q", store.step_count))
        for name, t in store.params.items():
            _write_named(fh, name, t.data)
        for name, arr in store.buffers.items():
            _write_named(fh, name, arr)


def load_checkpoint(path: str | Path) -> ParamStore:
    store = ParamStore()
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        n_params, n_buffers = struct.unpack("<II", fh.read(8))
        (store.step_count,) = struct.unpack("<Q", fh.read(8))
        for _ in range(n_params):
            name, data = _read_named(fh)
            store.add(name, data)
        for _ in range(n_buffers):
            name, data = _read_named(fh)
            store.add_buffer(name, data)
    return store
