"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in C-order (row-major) numpy arrays of rank 0, 1 or 2. Every op
records a backward closure; calling backward() on a scalar result walks the
graph in reverse topological order and accumulates gradients into every
tensor that requires them. There is no broadcasting beyond scalar * tensor
and the two explicit row-wise ops (add_row, row_gate).
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes do not line up for the requested op."""


class ContractError(ValueError):
    """An op precondition was violated (not a shape problem)."""


_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if arr.ndim > 2:
            raise DimensionError(f"rank {arr.ndim} > 2 not supported, shape {arr.shape}")
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------

    def backward(self) -> None:
        """Seed d(self)/d(self) = 1 and propagate. self must be scalar."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            out = _node(self.data + float(other), (self,))
            if out.requires_grad:
                out._backward = lambda g: self._accumulate(g)
            return out
        _check_same_shape(self, other, "add")
        out = _node(self.data + other.data, (self, other))
        if out.requires_grad:
            def back(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(g)
                if b.requires_grad:
                    b._accumulate(g)
            out._backward = back
        return out

    __radd__ = __add__

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            c = float(other)
            out = _node(self.data * c, (self,))
            if out.requires_grad:
                out._backward = lambda g: self._accumulate(g * c)
            return out
        _check_same_shape(self, other, "mul")
        out = _node(self.data * other.data, (self, other))
        if out.requires_grad:
            def back(g, a=self, b=other):
                if a.requires_grad:
                    a._accumulate(g * b.data)
                if b.requires_grad:
                    b._accumulate(g * a.data)
            out._backward = back
        return out

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return self + (-float(other))
        return self + (other * -1.0)

    def __rsub__(self, other) -> "Tensor":
        return (self * -1.0) + other

    def __truediv__(self, other) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise ContractError("tensor / tensor not supported, divide by a scalar")
        return self * (1.0 / float(other))

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        out = _node(np.asarray(self.data.sum()), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(np.full_like(self.data, g.reshape(())))
        return out

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise DimensionError(f"transpose needs rank 2, got shape {self.shape}")
        out = _node(np.ascontiguousarray(self.data.T), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(np.ascontiguousarray(g.T))
        return out

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape {a.data.shape} vs {b.data.shape}")


# -- ops ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = _node(a.data @ b.data, (a, b))
    if out.requires_grad:
        def back(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        out._backward = back
    return out


def add_row(matrix: Tensor, vec: Tensor) -> Tensor:
    """Add a length-w vector to every row of a t x w matrix."""
    if matrix.data.ndim != 2 or vec.data.ndim != 1:
        raise DimensionError(f"add_row: need matrix and vector, got {matrix.shape} and {vec.shape}")
    if matrix.data.shape[1] != vec.data.shape[0]:
        raise DimensionError(f"add_row: width {matrix.data.shape[1]} vs {vec.data.shape[0]}")
    out = _node(matrix.data + vec.data[None, :], (matrix, vec))
    if out.requires_grad:
        def back(g):
            if matrix.requires_grad:
                matrix._accumulate(g)
            if vec.requires_grad:
                vec._accumulate(g.sum(axis=0))
        out._backward = back
    return out


def row_gate(matrix: Tensor, scores: Tensor) -> Tensor:
    """Scale row i of a t x w matrix by scores[i] (the one allowed row broadcast)."""
    if matrix.data.ndim != 2 or scores.data.ndim != 1:
        raise DimensionError(f"row_gate: need matrix and vector, got {matrix.shape} and {scores.shape}")
    if matrix.data.shape[0] != scores.data.shape[0]:
        raise DimensionError(f"row_gate: {matrix.data.shape[0]} rows vs {scores.data.shape[0]} scores")
    out = _node(matrix.data * scores.data[:, None], (matrix, scores))
    if out.requires_grad:
        def back(g):
            if matrix.requires_grad:
                matrix._accumulate(g * scores.data[:, None])
            if scores.requires_grad:
                scores._accumulate((g * matrix.data).sum(axis=1))
        out._backward = back
    return out


def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0.0), (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * (x.data > 0.0))
    return out


def tanh(x: Tensor) -> Tensor:
    val = np.tanh(x.data)
    out = _node(val, (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * (1.0 - val * val))
    return out


def log(x: Tensor) -> Tensor:
    # log(0) -> -inf without a warning; the training loop treats non-finite
    # losses as divergence.
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _node(np.log(x.data), (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g / x.data)
    return out


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    if x.data.ndim not in (1, 2):
        raise DimensionError(f"softmax needs rank 1 or 2, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=-1, keepdims=True)
    out = _node(val, (x,))
    if out.requires_grad:
        def back(g):
            # dx = p * (g - sum(g * p)) per row
            inner = (g * val).sum(axis=-1, keepdims=True)
            x._accumulate(val * (g - inner))
        out._backward = back
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    if axis not in (0, 1):
        raise DimensionError(f"concat axis must be 0 or 1, got {axis}")
    ndim = parts[0].data.ndim
    for p in parts:
        if p.data.ndim != ndim:
            raise DimensionError("concat: mixed ranks")
    if ndim == 1 and axis != 0:
        raise DimensionError("concat: rank-1 tensors concat on axis 0 only")
    out = _node(np.concatenate([p.data for p in parts], axis=axis), (*parts,))
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        offsets = np.cumsum([0] + sizes)
        def back(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if not p.requires_grad:
                    continue
                if axis == 0:
                    p._accumulate(g[lo:hi])
                else:
                    p._accumulate(g[:, lo:hi])
        out._backward = back
    return out


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split along axis into consecutive chunks of the given sizes."""
    if axis not in (0, 1):
        raise DimensionError(f"split axis must be 0 or 1, got {axis}")
    total = x.data.shape[axis] if x.data.ndim > axis else None
    if total is None or sum(sizes) != total:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis {axis} of shape {x.shape}")
    outs: list[Tensor] = []
    lo = 0
    for s in sizes:
        outs.append(rows(x, lo, lo + s) if axis == 0 else _cols(x, lo, lo + s))
        lo += s
    return outs


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous row slice [start, stop) of a rank-2 tensor (or elements of rank 1)."""
    if x.data.ndim not in (1, 2):
        raise DimensionError(f"rows needs rank 1 or 2, got shape {x.shape}")
    if not (0 <= start <= stop <= x.data.shape[0]):
        raise DimensionError(f"rows [{start}:{stop}] out of range for shape {x.shape}")
    out = _node(x.data[start:stop].copy(), (x,))
    if out.requires_grad:
        def back(g):
            acc = np.zeros_like(x.data)
            acc[start:stop] = g
            x._accumulate(acc)
        out._backward = back
    return out


def _cols(x: Tensor, start: int, stop: int) -> Tensor:
    out = _node(np.ascontiguousarray(x.data[:, start:stop]), (x,))
    if out.requires_grad:
        def back(g):
            acc = np.zeros_like(x.data)
            acc[:, start:stop] = g
            x._accumulate(acc)
        out._backward = back
    return out


def pick(x: Tensor, index: int | tuple[int, int]) -> Tensor:
    """Extract one element as a scalar tensor."""
    idx = index if isinstance(index, tuple) else (index,)
    if len(idx) != x.data.ndim:
        raise DimensionError(f"pick index {index} on shape {x.shape}")
    out = _node(np.asarray(x.data[idx]), (x,))
    if out.requires_grad:
        def back(g):
            acc = np.zeros_like(x.data)
            acc[idx] = g.reshape(())
            x._accumulate(acc)
        out._backward = back
    return out


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a rank-1 tensor."""
    for p in parts:
        if p.data.size != 1:
            raise DimensionError(f"stack_scalars got shape {p.shape}")
    out = _node(np.array([p.data.reshape(()) for p in parts]), (*parts,))
    if out.requires_grad:
        def back(g):
            for i, p in enumerate(parts):
                if p.requires_grad:
                    p._accumulate(np.asarray(g[i]).reshape(p.data.shape))
        out._backward = back
    return out


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Look up rows of an embedding table; backward scatter-adds."""
    if table.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a rank-2 table, got shape {table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("gather_rows needs a flat id list")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ContractError(f"gather_rows: id out of range for table with {table.data.shape[0]} rows")
    out = _node(table.data[idx], (table,))
    if out.requires_grad:
        def back(g):
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx, g)
            table._accumulate(acc)
        out._backward = back
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: keep with prob 1-p and scale kept values by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate {p} outside [0, 1)")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    mask = (rng.random(x.data.shape) >= p) / (1.0 - p)
    out = _node(x.data * mask, (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * mask)
    return out


# -- gradient checking -------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    Per coordinate: |analytic - numeric| / max(1, |analytic|, |numeric|).
    f must be deterministic and scalar-valued; eps must sit in [1e-6, 1e-4].
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ContractError(f"grad_check eps {eps} outside [1e-6, 1e-4]")
    if not x.requires_grad:
        raise ContractError("grad_check input must require gradients")
    x.grad = None
    y = f(x)
    if y.data.size != 1:
        raise ContractError(f"grad_check: f returned shape {y.shape}, need a scalar")
    y.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with no_grad():
            f_plus = f(x).item()
        flat[i] = orig - eps
        with no_grad():
            f_minus = f(x).item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        if err > worst:
            worst = err
    return worst


# -- checkpoint i/o ----------------------------------------------------

CHECKPOINT_MAGIC = b"VERIFACTCKPT\x00\x01\x00\x00"
assert len(CHECKPOINT_MAGIC) == 16


def save_tensors(path, items: Iterable[tuple[str, Tensor]]) -> None:
    """Write named tensors: 16-byte magic, then per tensor a u64-LE name
    length, the UTF-8 name, u64-LE rank, u64-LE extents and f64-LE row-major
    data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, t in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", t.data.ndim))
            for extent in t.data.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(16)
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"bad checkpoint magic in {path}")
        out: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(8)
            if not head:
                break
            if len(head) != 8:
                raise ContractError(f"truncated checkpoint {path}")
            (name_len,) = struct.unpack("<Q", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<Q", fh.read(8))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ContractError(f"truncated tensor {name!r} in {path}")
            out[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        return out


def load_into(path, params: Iterable[tuple[str, Tensor]]) -> None:
    """Load a checkpoint into existing tensors, strict on names and shapes."""
    stored = load_tensors(path)
    seen = set()
    for name, t in params:
        if name not in stored:
            raise ContractError(f"checkpoint {path} missing tensor {name!r}")
        arr = stored[name]
        if arr.shape != t.data.shape:
            raise DimensionError(f"checkpoint tensor {name!r}: shape {arr.shape} vs {t.data.shape}")
        t.data[...] = arr
        seen.add(name)
    extra = set(stored) - seen
    if extra:
        raise ContractError(f"checkpoint {path} has unexpected tensors: {sorted(extra)}")
