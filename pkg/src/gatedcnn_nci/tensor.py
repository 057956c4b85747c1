"""Dense 2-D reverse-mode autodiff.

Only the operations the encoder and scorer need are provided. Every op
returns a new :class:`Tensor`; when a :class:`Tape` is active and at least
one operand requires a gradient, the op appends a backward rule to the tape.

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(x, x))
    >>> tape.backward(loss)
    >>> x.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class NonDeterminismError(RuntimeError):
    pass


class Tensor:
    """Row-major 2-D array with an accumulated gradient of the same shape."""

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.values = np.ascontiguousarray(arr)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}({self.rows}x{self.cols}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], None]


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops, replayed in reverse by :meth:`backward`.

    A tape is used as a context manager; ops executed inside the block are
    recorded. Tapes are thread-confined (the active-tape stack is thread-local).
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, backward))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already consumed; record a new forward pass")
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must be scalar (1x1), got {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True
        loss.grad += 1.0
        for node in reversed(self.nodes):
            node.backward(node.output.grad)


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _record(op: str, inputs: Sequence[Tensor], out_values: np.ndarray, rule) -> Tensor:
    """Wrap ``out_values``; attach ``rule(grad_out)`` if anything needs a gradient."""
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs)
    if tape is not None and needs:
        tape.record(op, inputs, out, rule)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def scatter_add_rows(table: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    """``table[idx[r]] += vals[r]`` for every r, repeated indices accumulating."""
    uniq, inv = np.unique(idx, return_inverse=True)
    d = vals.shape[1]
    flat = (inv.reshape(-1, 1) * d + np.arange(d)).ravel()
    sums = np.bincount(flat, weights=vals.ravel(), minlength=uniq.size * d)
    table[uniq] += sums.reshape(uniq.size, d)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def rule(g):
        if a.requires_grad:
            a.grad += g @ b.values.T
        if b.requires_grad:
            b.grad += a.values.T @ g

    return _record("matmul", (a, b), a.values @ b.values, rule)


def transpose(a: Tensor) -> Tensor:
    def rule(g):
        a.grad += g.T

    return _record("transpose", (a,), a.values.T.copy(), rule)


# -- elementwise ------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.exp(-x)
    out += 1.0
    return np.reciprocal(out, out=out)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.values)

    def rule(g):
        a.grad += g * s * (1.0 - s)

    return _record("sigmoid", (a,), s, rule)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.values)

    def rule(g):
        a.grad += g * (1.0 - t * t)

    return _record("tanh", (a,), t, rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def rule(g):
        if a.requires_grad:
            a.grad += g * b.values
        if b.requires_grad:
            b.grad += g * a.values

    return _record("mul", (a, b), a.values * b.values, rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def rule(g):
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return _record("add", (a, b), a.values + b.values, rule)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"mul": mul, "add": add}


def elementwise(op_id: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if op_id in _UNARY:
        return _UNARY[op_id](a)
    if op_id in _BINARY:
        if b is None:
            raise ParameterError(f"{op_id} needs two operands")
        return _BINARY[op_id](a, b)
    raise ParameterError(f"unknown elementwise op {op_id!r}")


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """``a + row`` with the 1xc ``row`` broadcast over every row of ``a``."""
    if row.rows != 1 or row.cols != a.cols:
        raise ShapeError(f"add_row: cannot broadcast {row.shape} onto {a.shape}")

    def rule(g):
        if a.requires_grad:
            a.grad += g
        if row.requires_grad:
            row.grad += g.sum(axis=0, keepdims=True)

    return _record("add_row", (a, row), a.values + row.values, rule)


def scale(a: Tensor, c: float) -> Tensor:
    def rule(g):
        a.grad += c * g

    return _record("scale", (a,), a.values * c, rule)


def broadcast_rows(row: Tensor, n: int) -> Tensor:
    if row.rows != 1:
        raise ShapeError(f"broadcast_rows expects a 1xc tensor, got {row.shape}")

    def rule(g):
        row.grad += g.sum(axis=0, keepdims=True)

    return _record("broadcast_rows", (row,), np.repeat(row.values, n, axis=0), rule)


# -- reductions -------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    def rule(g):
        a.grad += g[0, 0]

    return _record("sum_all", (a,), np.array([[a.values.sum()]]), rule)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    """Sum over ``axis`` keeping a 2-D result (1xc for axis 0, rx1 for axis 1)."""

    def rule(g):
        a.grad += g  # broadcasts back over the reduced axis

    return _record("sum_axis", (a,), a.values.sum(axis=axis, keepdims=True), rule)


def max_rows(a: Tensor) -> Tensor:
    """Per-column maximum over rows; the gradient goes to the first argmax."""
    idx = np.argmax(a.values, axis=0)
    cols = np.arange(a.cols)

    def rule(g):
        a.grad[idx, cols] += g[0]

    return _record("max_rows", (a,), a.values[idx, cols][None, :], rule)


# -- structural -------------------------------------------------------------


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    if a.rows != b.rows:
        raise ShapeError(f"concat_features: row count mismatch {a.shape} vs {b.shape}")
    p = a.cols

    def rule(g):
        if a.requires_grad:
            a.grad += g[:, :p]
        if b.requires_grad:
            b.grad += g[:, p:]

    return _record("concat", (a, b), np.concatenate([a.values, b.values], axis=1), rule)


def _column_slice(u: Tensor, start: int, stop: int) -> Tensor:
    def rule(g):
        u.grad[:, start:stop] += g

    return _record("slice", (u,), u.values[:, start:stop].copy(), rule)


def split_columns(u: Tensor, parts: int = 4) -> tuple[Tensor, ...]:
    """Split into ``parts`` equal contiguous column blocks (I, O, G, F order for 4)."""
    if u.cols % parts:
        raise ShapeError(f"split_columns: {u.cols} columns not divisible by {parts}")
    g = u.cols // parts
    return tuple(_column_slice(u, i * g, (i + 1) * g) for i in range(parts))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ShapeError("embedding_lookup needs a non-empty 1-D id sequence")
    if ids.min() < 0 or ids.max() >= table.rows:
        raise IndexError(f"token id out of range for table of {table.rows} rows")

    def rule(g):
        scatter_add_rows(table.grad, ids, g)

    return _record("embedding", (table,), table.values[ids], rule)


def bag_mean(table: Tensor, groups: Sequence[Sequence[int]]) -> Tensor:
    """Row j is the mean of ``table`` rows listed in ``groups[j]`` (groups must be non-empty)."""
    lengths = np.array([len(grp) for grp in groups], dtype=np.int64)
    if (lengths == 0).any():
        raise ShapeError("bag_mean: empty group")
    flat = np.concatenate([np.asarray(grp, dtype=np.int64) for grp in groups])
    seg = np.repeat(np.arange(len(groups)), lengths)
    weights = (1.0 / lengths)[seg][:, None]
    out = np.zeros((len(groups), table.cols), dtype=table.values.dtype)
    np.add.at(out, seg, table.values[flat] * weights)

    def rule(g):
        scatter_add_rows(table.grad, flat, g[seg] * weights)

    return _record("bag_mean", (table,), out, rule)


# -- convolution ------------------------------------------------------------


def conv1d_dilated(x: Tensor, kernel: Tensor, bias: Tensor, dilation: int) -> Tensor:
    """Causal dilated 1-D convolution over the row (time) axis.

    ``kernel`` is stored flattened as ``(k * c_in) x c_out``; rows
    ``[i*c_in, (i+1)*c_in)`` hold tap ``i``, which reads ``x[s - dilation*i]``.
    Positions before the start of the sequence read zeros, so the output has
    as many rows as the input.
    """
    n, c_in = x.shape
    if dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {dilation}")
    if kernel.rows == 0 or kernel.cols == 0:
        raise ParameterError(f"zero-size kernel {kernel.shape}")
    if n < 1:
        raise ShapeError("conv1d_dilated: empty input")
    if kernel.rows % c_in:
        raise ShapeError(f"conv1d_dilated: kernel {kernel.shape} incompatible with {c_in} input channels")
    if bias.shape != (1, kernel.cols):
        raise ShapeError(f"conv1d_dilated: bias {bias.shape} does not match kernel {kernel.shape}")
    k = kernel.rows // c_in

    cols = np.zeros((n, k * c_in), dtype=x.values.dtype)
    for i in range(k):
        shift = dilation * i
        if shift < n:
            cols[shift:, i * c_in:(i + 1) * c_in] = x.values[: n - shift]
    out = cols @ kernel.values + bias.values

    def rule(g):
        if kernel.requires_grad:
            kernel.grad += cols.T @ g
        if bias.requires_grad:
            bias.grad += g.sum(axis=0, keepdims=True)
        if x.requires_grad:
            dcols = g @ kernel.values.T
            for i in range(k):
                shift = dilation * i
                if shift < n:
                    x.grad[: n - shift] += dcols[shift:, i * c_in:(i + 1) * c_in]

    return _record("conv1d_dilated", (x, kernel, bias), out, rule)


def receptive_field(kernel_size: int, dilations: Sequence[int]) -> int:
    return 1 + sum(d * (kernel_size - 1) for d in dilations)


# -- regularisation and loss ------------------------------------------------


def dropout(x: Tensor, p: float, training: bool, rng_seed=None) -> Tensor:
    """Inverted dropout; ``rng_seed`` may be an int or a ``numpy.random.Generator``."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def rule(g):
        x.grad += g * mask

    return _record("dropout", (x,), x.values * mask, rule)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Summed binary cross-entropy on raw logits, in the overflow-free form."""
    y = targets.values if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if y.size != logits.size:
        raise ShapeError(f"bce_with_logits: targets {y.shape} vs logits {logits.shape}")
    y = y.reshape(logits.shape)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ParameterError("bce_with_logits: targets must be 0 or 1")
    z = logits.values
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def rule(g):
        logits.grad += g[0, 0] * (_sigmoid(z) - y)

    return _record("bce_with_logits", (logits,), np.array([[loss.sum()]]), rule)


# -- verification -----------------------------------------------------------


def grad_check(
    forward_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_elements: int = 200,
    seed: int = 0,
    floor: float = 1e-8,
) -> list[float]:
    """Compare tape gradients against central finite differences.

    ``forward_fn`` must rebuild the loss from the current values of
    ``params`` and be deterministic. For tensors larger than
    ``max_elements`` a seeded random sample of ``max_elements`` entries is
    checked. Returns the worst elementwise relative error per parameter,
    ``|g - fd| / max(|g|, |fd|, floor)``.
    """
    base = forward_fn().item()
    if forward_fn().item() != base:
        raise NonDeterminismError("forward_fn returned different losses on identical parameters")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = forward_fn()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = []
    for p, g in zip(params, analytic):
        flat_vals = p.values.reshape(-1)
        flat_grad = g.reshape(-1)
        if flat_vals.size > max_elements:
            idx = rng.choice(flat_vals.size, size=max_elements, replace=False)
        else:
            idx = np.arange(flat_vals.size)
        err = 0.0
        for j in idx:
            orig = flat_vals[j]
            flat_vals[j] = orig + eps
            up = forward_fn().item()
            flat_vals[j] = orig - eps
            down = forward_fn().item()
            flat_vals[j] = orig
            fd = (up - down) / (2.0 * eps)
            a = flat_grad[j]
            denom = max(abs(a), abs(fd), floor)
            err = max(err, abs(a - fd) / denom)
        worst.append(err)
    return worst
