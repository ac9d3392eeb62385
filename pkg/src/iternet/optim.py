"""Named parameter storage, Adam updates, and checkpoint serialization.

Checkpoint layout (all integers little-endian):
    magic b"ITNT" | version u32 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | dims u32 each
               | float32 values, row-major
Only parameter values are stored; optimizer moments are not.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CHECKPOINT_MAGIC = b"ITNT"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class OptimizerConfig:
    """Adam hyperparameters plus the shared step counter."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0


class _Entry:
    __slots__ = ("value", "grad", "m", "v")

    def __init__(self, value):
        self.value = value
        self.grad = np.zeros_like(value)
        self.m = np.zeros_like(value)
        self.v = np.zeros_like(value)


class ParamStore:
    """name -> (value, grad accumulator, Adam moments), insertion ordered.

    Values are float32 (the checkpoint dtype) unless the store was created
    with another dtype; numerical checkers clone to float64 via astype().
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries = {}

    def add(self, name, value):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._entries[name] = _Entry(np.asarray(value, dtype=self.dtype))

    def names(self):
        return list(self._entries)

    def __contains__(self, name):
        return name in self._entries

    def value(self, name):
        return self._entries[name].value

    def grad(self, name):
        return self._entries[name].grad

    def set_value(self, name, value):
        e = self._entries[name]
        if value.shape != e.value.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {value.shape} vs {e.value.shape}")
        e.value = np.asarray(value, dtype=self.dtype)

    def accumulate_grad(self, name, g):
        e = self._entries[name]
        if g.shape != e.value.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match {name!r} {e.value.shape}")
        e.grad = e.grad + g.astype(e.grad.dtype)

    def zero_grads(self):
        for e in self._entries.values():
            e.grad = np.zeros_like(e.value)

    def param_count(self, prefix=""):
        return sum(e.value.size for n, e in self._entries.items()
                   if n.startswith(prefix))

    def clone(self):
        out = ParamStore(self.dtype)
        for n, e in self._entries.items():
            out.add(n, e.value.copy())
        return out

    def astype(self, dtype):
        out = ParamStore(dtype)
        for n, e in self._entries.items():
            out.add(n, e.value)
        return out

    def items(self):
        return [(n, e.value) for n, e in self._entries.items()]


def adam_step(store, cfg):
    """One bias-corrected Adam update over every entry; grads zeroed after."""
    cfg.step_count += 1
    t = cfg.step_count
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for e in store._entries.values():
        g = e.grad
        e.m = b1 * e.m + (1.0 - b1) * g
        e.v = b2 * e.v + (1.0 - b2) * (g * g)
        m_hat = e.m / c1
        v_hat = e.v / c2
        e.value = e.value - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        e.grad = np.zeros_like(e.value)


def save_checkpoint(store, path):
    items = sorted(store.items())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, value in items:
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", value.ndim))
            f.write(struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(np.ascontiguousarray(value, dtype="<f4").tobytes())


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path, layout=None):
    """Read a checkpoint into a fresh ParamStore.

    layout, when given, maps name -> shape tuple; any missing, extra or
    reshaped entry is rejected so a checkpoint cannot silently drive a
    differently configured model.
    """
    store = ParamStore()
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic in {path}: not a checkpoint file")
        version, count = struct.unpack("<II", _read_exact(f, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims"))
            nbytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
            data = np.frombuffer(_read_exact(f, nbytes, f"values of {name!r}"),
                                 dtype="<f4").reshape(dims)
            store.add(name, data.astype(np.float32))
        if f.read(1):
            raise CheckpointError(f"trailing bytes after {count} entries in {path}")
    if layout is not None:
        have = set(store.names())
        want = set(layout)
        missing = sorted(want - have)
        extra = sorted(have - want)
        if missing:
            raise CheckpointError(f"checkpoint missing parameter {missing[0]!r}")
        if extra:
            raise CheckpointError(f"checkpoint has unknown parameter {extra[0]!r}")
        for name, shape in layout.items():
            if store.value(name).shape != tuple(shape):
                raise CheckpointError(
                    f"checkpoint entry {name!r} has shape "
                    f"{store.value(name).shape}, model expects {tuple(shape)}")
    return store
