"""Rank-4 tensors, the recording tape and reverse-mode gradient propagation."""
from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class DimensionError(ValueError):
    """Tensor shapes do not line up for an operation."""


class GeometryError(ValueError):
    """Kernel/stride/padding geometry yields an impossible output size."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class Tensor:
    """Dense (n, c, h, w) array with an optional gradient slot.

    Parameters are stored rank-4 as well: conv weights as (out, in, kh, kw),
    per-channel vectors (bias, gamma, beta) as (1, c, 1, 1).
    """

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim != 4:
            raise DimensionError(f"Tensor must be rank 4 (n, c, h, w), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise DimensionError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    @classmethod
    def zeros(cls, shape, dtype=np.float64, name=None) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), name=name)

    @classmethod
    def ones(cls, shape, dtype=np.float64, name=None) -> "Tensor":
        return cls(np.ones(shape, dtype=dtype), name=name)


@dataclass
class Record:
    """One executed primitive: which op, what it read, what it wrote.

    ``backward`` maps the output gradient to one gradient per input (``None``
    for inputs that need none). Saved intermediates live in its closure.
    """

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)

    def record(self, op, inputs, output, backward) -> None:
        self.records.append(Record(op, tuple(inputs), output, backward))

    def __len__(self) -> int:
        return len(self.records)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)


_ACTIVE: list[Tape] = []


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextmanager
def no_tape():
    """Run ops without recording (inference)."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def record(op: str, inputs: Iterable[Tensor], output: Tensor, backward) -> Tensor:
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, output, backward)
    return output


def backprop(tape: Tape, loss: Tensor, params: Mapping[str, Tensor] | Sequence[Tensor] | None = None,
             seed: np.ndarray | None = None):
    """Propagate d(loss)/d(.) backwards through ``tape``.

    Every tensor touched by the tape gets its ``.grad`` set. When ``params``
    is given, their gradients are also returned (a dict for a mapping, a list
    for a sequence); parameters the loss does not depend on get zeros.
    ``seed`` replaces the implicit scalar 1.0 and lifts the scalar-loss
    requirement, which is how block-level gradients are probed.
    """
    if seed is None:
        if loss.numel() != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
    elif seed.shape != loss.shape:
        raise DimensionError(f"seed shape {seed.shape} != loss shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): seed}
    owners: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g_out = grads.get(id(rec.output))
        if g_out is None:
            continue
        for inp, g in zip(rec.inputs, rec.backward(g_out)):
            if g is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                owners[key] = inp
    for key, t in owners.items():
        t.grad = grads[key]

    if params is None:
        return None
    if isinstance(params, Mapping):
        return {k: grads.get(id(p), np.zeros_like(p.data)) for k, p in params.items()}
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


# ---------------------------------------------------------------------------
# serialization: "SDT1" + 4 x u32 LE dims + float64 LE payload, row-major

MAGIC = b"SDT1"


def to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 4:
        raise DimensionError(f"only rank-4 arrays serialize, got {arr.shape}")
    header = MAGIC + struct.pack("<4I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def from_bytes(buf: bytes, dtype=np.float64) -> Tensor:
    if buf[:4] != MAGIC:
        raise ValueError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    dims = struct.unpack("<4I", buf[4:20])
    count = int(np.prod(dims))
    payload = buf[20:]
    if len(payload) != 8 * count:
        raise ValueError(f"payload holds {len(payload)} bytes, dims {dims} need {8 * count}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(dims)
    return Tensor(arr.astype(dtype), dtype=dtype)


def save(t: Tensor | np.ndarray, path) -> None:
    Path(path).write_bytes(to_bytes(t))


def load(path, dtype=np.float64) -> Tensor:
    return from_bytes(Path(path).read_bytes(), dtype=dtype)
