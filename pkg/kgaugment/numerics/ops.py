"""
Differentiable operations on Graph tensors.

Every op computes its forward value with numpy and records a closure that maps
the upstream gradient to one gradient per input. Ops that the model applies to
a batch accept a leading batch axis; the per-row semantics are unchanged.
"""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from kgaugment.errors import DimensionError, DomainError, LabelIndexError
from kgaugment.numerics.tensor import Tensor


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b; b may also be a bias vector added to every row of a."""
    if a.shape == b.shape:
        return a.graph.record("add", (a, b), a.data + b.data, lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        width = b.shape[0]
        return a.graph.record(
            "add_bias",
            (a, b),
            a.data + b.data,
            lambda g: (g, g.reshape(-1, width).sum(axis=0)),
        )
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not align")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return a.graph.record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    x, y = a.data, b.data
    return a.graph.record("mul", (a, b), x * y, lambda g: (g * y, g * x))


def scale(a: Tensor, factor: float) -> Tensor:
    return a.graph.record("scale", (a,), a.data * factor, lambda g: (g * factor,))


def add_scalar(a: Tensor, value: float) -> Tensor:
    return a.graph.record("add_scalar", (a,), a.data + value, lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data
    return a.graph.record("matmul", (a, b), x @ y, lambda g: (g @ y.T, x.T @ g))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        value = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {original} as {shape}") from exc
    return a.graph.record("reshape", (a,), value, lambda g: (g.reshape(original),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {a.shape}")
    return a.graph.record("transpose", (a,), a.data.T, lambda g: (g.T,))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return a.graph.record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return a.graph.record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return a.graph.record("relu", (a,), np.where(active, a.data, 0.0), lambda g: (g * active,))


def mean(a: Tensor) -> Tensor:
    size = a.data.size
    if size == 0:
        raise DomainError("mean of an empty tensor")
    shape = a.shape
    return a.graph.record(
        "mean", (a,), np.asarray(a.data.mean()), lambda g: (np.full(shape, g / size),)
    )


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Join along the last axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: leading shapes {a.shape} and {b.shape} differ")
    split = a.shape[-1]
    return a.graph.record(
        "concat",
        (a, b),
        np.concatenate([a.data, b.data], axis=-1),
        lambda g: (g[..., :split], g[..., split:]),
    )


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[-1]:
        raise DimensionError(f"slice_last: [{start}:{stop}] outside last extent of {a.shape}")
    shape = a.shape

    def backward(g: np.ndarray):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return a.graph.record("slice", (a,), a.data[..., start:stop], backward)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """table[ids] for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise LabelIndexError(f"gather_rows: ids outside [0, {table.shape[0]})")
    rows, width = table.shape

    def backward(g: np.ndarray):
        full = np.zeros((rows, width))
        np.add.at(full, ids.reshape(-1), g.reshape(-1, width))
        return (full,)

    return table.graph.record("gather_rows", (table,), table.data[ids], backward)


# ---------------------------------------------------------------------------
# normalization and losses
# ---------------------------------------------------------------------------


def softmax(z: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    if z.data.size == 0 or z.shape[-1] == 0:
        raise DomainError("softmax of an empty input")
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return z.graph.record("softmax", (z,), y, backward)


def cross_entropy(p: Tensor, labels) -> Tensor:
    """Mean of -log p[label] over the rows of p (a single row for 1-D p)."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    probs = p.data.reshape(-1, p.shape[-1])
    classes = probs.shape[1]
    if labels.shape[0] != probs.shape[0]:
        raise DimensionError(
            f"cross_entropy: {labels.shape[0]} labels for {probs.shape[0]} rows"
        )
    if labels.min() < 0 or labels.max() >= classes:
        raise LabelIndexError(f"cross_entropy: label outside [0, {classes})")
    rows = np.arange(probs.shape[0])
    picked = probs[rows, labels]
    with np.errstate(divide="ignore"):
        value = -np.log(picked).mean()
    count = probs.shape[0]
    shape = p.shape

    def backward(g: np.ndarray):
        full = np.zeros_like(probs)
        full[rows, labels] = -g / (picked * count)
        return (full.reshape(shape),)

    return p.graph.record("cross_entropy", (p,), np.asarray(value), backward)


def row_norm(x: Tensor, norm: str = "L1") -> Tensor:
    """L1 or L2 norm over the last axis."""
    data = x.data
    if norm == "L1":
        sign = np.sign(data)
        return x.graph.record(
            "l1_norm", (x,), np.abs(data).sum(axis=-1), lambda g: (g[..., None] * sign,)
        )
    if norm == "L2":
        value = np.sqrt((data * data).sum(axis=-1))
        safe = np.where(value > 0, value, 1.0)

        def backward(g: np.ndarray):
            return (np.where(value[..., None] > 0, g[..., None] * data / safe[..., None], 0.0),)

        return x.graph.record("l2_norm", (x,), value, backward)
    raise DomainError(f"unknown norm {norm!r}; expected 'L1' or 'L2'")


def mean_over_time(steps: Sequence[Tensor], mask: np.ndarray) -> Tensor:
    """
    Average of per-step states over the real (mask=1) steps only.

    steps: T tensors of shape (B, n) or (n,); mask: (B, T) or (T,).
    """
    if not steps:
        raise DomainError("mean_over_time of zero steps")
    mask = np.asarray(mask, dtype=np.float64)
    single = steps[0].ndim == 1
    weights = mask.reshape(1, -1) if single else mask
    if weights.shape[1] != len(steps):
        raise DimensionError(f"mean_over_time: mask covers {weights.shape[1]} steps, got {len(steps)}")
    counts = weights.sum(axis=1)
    if np.any(counts == 0):
        raise DomainError("mean_over_time: a sequence has no real steps")
    scaled = weights / counts[:, None]

    total = np.zeros((weights.shape[0], steps[0].shape[-1]))
    for t, step in enumerate(steps):
        total = total + scaled[:, t, None] * step.data.reshape(weights.shape[0], -1)
    value = total[0] if single else total

    def backward(g: np.ndarray):
        g2 = g.reshape(weights.shape[0], -1)
        grads = []
        for t in range(len(steps)):
            part = scaled[:, t, None] * g2
            grads.append(part[0] if single else part)
        return grads

    return steps[0].graph.record("mean_over_time", tuple(steps), value, backward)


# ---------------------------------------------------------------------------
# column-wise convolution and pooling over stacked cluster members
# ---------------------------------------------------------------------------


def window_mask(mask: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """Validity of each conv window: True when any row in it is real."""
    mask = np.asarray(mask, dtype=bool)
    rows = mask.shape[-1]
    starts = np.arange((rows - kernel) // stride + 1) * stride
    index = starts[:, None] + np.arange(kernel)[None, :]
    return mask[..., index].any(axis=-1)


def pool_windows(rows: int, window: int, stride: int) -> list[tuple[int, int]]:
    count = -(-(rows - window) // stride) + 1
    return [(j * stride, min(j * stride + window, rows)) for j in range(count)]


def pooled_mask(mask: np.ndarray, window: int, stride: int | None = None) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    stride = stride or window
    spans = pool_windows(mask.shape[-1], window, stride)
    return np.stack([mask[..., s:e].any(axis=-1) for s, e in spans], axis=-1)


def _as_stack(data: np.ndarray) -> np.ndarray:
    """View (q, m) or (C, q, m) input as (C, q, m)."""
    return data[None] if data.ndim == 2 else data


def conv1d_col(
    x: Tensor, weights: Tensor, stride: int = 1, mask: np.ndarray | None = None
) -> Tensor:
    """
    1-D filter slid along the rows of x, independently for every column.

    x: (q, m) or (C, q, m). out[i, j] = sum_a w[a] * x[i*stride + a, j].
    Windows made only of masked (padding) rows are forced to zero.
    """
    if x.ndim not in (2, 3):
        raise DimensionError(f"conv1d_col: expected (q, m) or (C, q, m), got {x.shape}")
    if weights.ndim != 1:
        raise DimensionError(f"conv1d_col: filter must be 1-D, got {weights.shape}")
    if stride < 1:
        raise DomainError(f"conv1d_col: stride must be >= 1, got {stride}")
    kernel = weights.shape[0]
    rows = x.shape[-2]
    if kernel > rows:
        raise DimensionError(f"conv1d_col: filter length {kernel} exceeds {rows} rows")

    data = _as_stack(x.data)
    w = weights.data
    out_rows = (rows - kernel) // stride + 1
    starts = np.arange(out_rows) * stride
    index = starts[:, None] + np.arange(kernel)[None, :]
    patches = data[:, index, :]  # (C, q', k, m)
    valid = np.ones((data.shape[0], out_rows), dtype=bool)
    if mask is not None:
        valid = window_mask(np.asarray(mask).reshape(data.shape[0], rows), kernel, stride)
    keep = valid[:, :, None].astype(np.float64)
    out = np.einsum("cikm,k->cim", patches, w) * keep
    shape = x.shape

    def backward(g: np.ndarray):
        g3 = _as_stack(g) * keep
        dw = np.einsum("cikm,cim->k", patches, g3)
        dx = np.zeros_like(data)
        for a in range(kernel):
            dx[:, starts + a, :] += w[a] * g3
        return (dx.reshape(shape), dw)

    value = out[0] if x.ndim == 2 else out
    return x.graph.record("conv1d_col", (x, weights), value, backward)


def maxpool_col(
    x: Tensor, window: int, stride: int | None = None, mask: np.ndarray | None = None
) -> Tensor:
    """
    Per-column max over row windows; the trailing partial window is pooled as-is.

    Masked rows never win a window; a window with no real rows yields 0.
    """
    if window < 1:
        raise DomainError(f"maxpool_col: window must be >= 1, got {window}")
    if x.ndim not in (2, 3):
        raise DimensionError(f"maxpool_col: expected (p, m) or (C, p, m), got {x.shape}")
    rows = x.shape[-2]
    if window > rows:
        raise DimensionError(f"maxpool_col: window {window} exceeds {rows} rows")
    stride = stride or window

    data = _as_stack(x.data)
    stacks, _, width = data.shape
    valid_rows = np.ones((stacks, rows), dtype=bool)
    if mask is not None:
        valid_rows = np.asarray(mask, dtype=bool).reshape(stacks, rows)

    spans = pool_windows(rows, window, stride)
    out = np.zeros((stacks, len(spans), width))
    winners = np.zeros((stacks, len(spans), width), dtype=np.int64)
    live = np.zeros((stacks, len(spans)), dtype=bool)
    for j, (s, e) in enumerate(spans):
        segment = np.where(valid_rows[:, s:e, None], data[:, s:e, :], -np.inf)
        arg = segment.argmax(axis=1)  # (C, m)
        winners[:, j, :] = arg + s
        live[:, j] = valid_rows[:, s:e].any(axis=1)
        best = np.take_along_axis(data[:, s:e, :], arg[:, None, :], axis=1)[:, 0, :]
        out[:, j, :] = np.where(live[:, j, None], best, 0.0)
    shape = x.shape

    def backward(g: np.ndarray):
        g3 = _as_stack(g) * live[:, :, None]
        dx = np.zeros_like(data)
        stack_index = np.arange(stacks)[:, None]
        column_index = np.arange(width)[None, :]
        for j in range(len(spans)):
            np.add.at(dx, (stack_index, winners[:, j, :], column_index), g3[:, j, :])
        return (dx.reshape(shape),)

    value = out[0] if x.ndim == 2 else out
    return x.graph.record("maxpool_col", (x,), value, backward)


# ---------------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------------


class LstmWeights(NamedTuple):
    input: Tensor  # (d, 4n), gate blocks ordered input, forget, candidate, output
    recurrent: Tensor  # (n, 4n)
    bias: Tensor  # (4n,)


def lstm_cell(
    x_t: Tensor, state: tuple[Tensor, Tensor], weights: LstmWeights
) -> tuple[Tensor, Tensor]:
    """Standard LSTM step (no peepholes): returns (h', c')."""
    h, c = state
    single = x_t.ndim == 1
    if single:
        x_t = reshape(x_t, (1, x_t.shape[0]))
        h = reshape(h, (1, h.shape[0]))
        c = reshape(c, (1, c.shape[0]))

    hidden = h.shape[-1]
    if weights.input.shape != (x_t.shape[-1], 4 * hidden):
        raise DimensionError(
            f"lstm_cell: input weights {weights.input.shape} do not match "
            f"input {x_t.shape[-1]} and hidden {hidden}"
        )
    if weights.recurrent.shape != (hidden, 4 * hidden) or weights.bias.shape != (4 * hidden,):
        raise DimensionError(
            f"lstm_cell: recurrent {weights.recurrent.shape} / bias {weights.bias.shape} "
            f"do not match hidden {hidden}"
        )
    if c.shape != h.shape:
        raise DimensionError(f"lstm_cell: state shapes {h.shape} and {c.shape} differ")

    z = add(add(matmul(x_t, weights.input), matmul(h, weights.recurrent)), weights.bias)
    input_gate = sigmoid(slice_last(z, 0, hidden))
    forget_gate = sigmoid(slice_last(z, hidden, 2 * hidden))
    candidate = tanh(slice_last(z, 2 * hidden, 3 * hidden))
    output_gate = sigmoid(slice_last(z, 3 * hidden, 4 * hidden))

    c_next = add(mul(forget_gate, c), mul(input_gate, candidate))
    h_next = mul(output_gate, tanh(c_next))

    if single:
        return reshape(h_next, (hidden,)), reshape(c_next, (hidden,))
    return h_next, c_next
