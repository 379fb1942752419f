"""Tensor plumbing: parameters with gradients, the DSUT file format,
finite-value guards and the runtime FLOP counter.

Tensors are plain numpy arrays (row-major, float32 or float64).
"""
from __future__ import annotations

import contextlib
import contextvars
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DSUT_MAGIC = b"DSUT"
DSUT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class NonFiniteError(FloatingPointError):
    """A kernel produced NaN or Inf."""


class GraphError(RuntimeError):
    """Backward was requested without a recorded forward pass."""


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s) in output of shape {np.shape(x)}")
    return x


@dataclass
class Param:
    """A trainable tensor and its accumulated gradient (same shape)."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ValueError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def astype(self, dtype) -> "Param":
        return Param(self.value.astype(dtype, copy=True))


# ---------------------------------------------------------------------------
# DSUT format: magic, u32 version, u8 dtype code, u32 ndim, u64 dims, payload
# ---------------------------------------------------------------------------

def save_tensor(path: str | Path, x: np.ndarray) -> None:
    x = np.asarray(x)
    if x.dtype not in _DTYPE_CODES:
        raise TypeError(f"DSUT supports float32/float64, got {x.dtype}")
    header = DSUT_MAGIC + struct.pack("<IBI", DSUT_VERSION, _DTYPE_CODES[x.dtype], x.ndim)
    header += struct.pack(f"<{x.ndim}Q", *x.shape)
    payload = np.ascontiguousarray(x).astype(x.dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DSUT_MAGIC:
        raise ValueError(f"{path}: not a DSUT file")
    version, code, ndim = struct.unpack_from("<IBI", raw, 4)
    if version != DSUT_VERSION:
        raise ValueError(f"{path}: unsupported DSUT version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    offset = 4 + struct.calcsize("<IBI")
    dims = struct.unpack_from(f"<{ndim}Q", raw, offset)
    offset += 8 * ndim
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(dims)) if ndim else 1
    if len(raw) - offset != count * dtype.itemsize:
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.astype(_CODE_DTYPES[code]).reshape(dims)


# ---------------------------------------------------------------------------
# FLOP counting
# ---------------------------------------------------------------------------

class FlopCounter:
    """Collects FLOPs reported by kernels while active, keyed by tag."""

    def __init__(self):
        self.by_tag: dict[str, int] = defaultdict(int)

    def add(self, tag: str, flops: int) -> None:
        self.by_tag[tag] += int(flops)

    @property
    def total(self) -> int:
        return sum(self.by_tag.values())

    def total_for(self, prefix: str) -> int:
        return sum(v for k, v in self.by_tag.items() if k.startswith(prefix))


_ACTIVE_COUNTER: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "streamdsu_flop_counter", default=None
)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


def record_flops(tag: str, flops: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.add(tag, flops)
