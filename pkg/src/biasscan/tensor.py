"""Minimal float32 tensor engine with tape-based reverse-mode differentiation.

Only the operators needed by the MNIST CNN and the sign-gradient attacks are
provided. Operations are recorded on the tape that is active in the current
thread (``with Tape(): ...``) whenever at least one input requires a gradient;
outside a tape they run as plain numpy forwards.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
NUM_CLASSES = 10

_local = threading.local()


class ShapeError(ValueError):
    """Operator inputs violate the operator's shape contract."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense row-major float32 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of executed operators; usable once for a backward pass."""

    records: list[_Record] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape.consumed:
            raise TapeError("cannot record on a tape that has already been differentiated")
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(op, inputs, out, backward))
    return out


def _check(cond: bool, op: str, msg: str, *tensors: Tensor) -> None:
    if not cond:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"{op}: {msg} (got shapes {shapes})")


# --------------------------------------------------------------------------
# operators
# --------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 zero-padded cross-correlation in channels-last layout.

    ``x`` is N x H x W x C, ``weight`` is k x k x C x O, ``bias`` has O entries;
    the result is N x OH x OW x O.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    _check(x.data.ndim == 4, "conv2d", "input must be N x H x W x C", x)
    _check(weight.data.ndim == 4 and weight.shape[0] == weight.shape[1], "conv2d",
           "weight must be k x k x C x O", weight)
    n, h, w, c = x.shape
    k, _, wc, o = weight.shape
    _check(wc == c, "conv2d", "input channels differ from weight channels", x, weight)
    _check(bias.shape == (o,), "conv2d", "bias must have one entry per output channel", weight, bias)
    p = int(padding)
    oh, ow = h + 2 * p - k + 1, w + 2 * p - k + 1
    _check(p >= 0 and oh > 0 and ow > 0, "conv2d", "kernel larger than padded input", x, weight)

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    # window view is (N, OH, OW, C, k, k); reorder so channels stay innermost
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = cols.reshape(n * oh * ow, k * k * c)
    wmat = weight.data.reshape(k * k * c, o)
    out = cols @ wmat
    out += bias.data
    out = out.reshape(n, oh, ow, o)

    def backward(g: np.ndarray):
        g2 = g.reshape(n * oh * ow, o)
        gx = gw = gb = None
        if x.requires_grad:
            # one (N*OH*OW, C) slab per kernel offset, scattered back into the padded input
            per_offset = np.matmul(g2, weight.data.reshape(k * k, c, o).transpose(0, 2, 1))
            per_offset = per_offset.reshape(k, k, n, oh, ow, c)
            gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=DTYPE)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + oh, j:j + ow, :] += per_offset[i, j]
            gx = gxp[:, p:p + h, p:p + w, :] if p else gxp
        if weight.requires_grad:
            gw = (g2.T @ cols).T if c == 1 else cols.T @ g2
            gw = gw.reshape(weight.shape)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gw, gb

    return _emit("conv2d", (x, weight, bias), out, backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling over N x H x W x C.

    Ties go to the first element of the window in row-major order.
    """
    x = _as_tensor(x)
    _check(x.data.ndim == 4, "maxpool2x2", "input must be N x H x W x C", x)
    n, h, w, c = x.shape
    _check(h % 2 == 0 and w % 2 == 0, "maxpool2x2", "spatial dims must be even", x)
    corners = (x.data[:, 0::2, 0::2], x.data[:, 0::2, 1::2],
               x.data[:, 1::2, 0::2], x.data[:, 1::2, 1::2])
    out = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))

    def backward(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=DTYPE)
        taken = np.zeros(out.shape, dtype=bool)
        for (di, dj), corner in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
            hit = (corner == out) & ~taken
            taken |= hit
            gx[:, di::2, dj::2] = np.where(hit, g, DTYPE(0))
        return (gx,)

    return _emit("maxpool2x2", (x,), out, backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.maximum(x.data, DTYPE(0))

    def backward(g):
        return (g * mask,)

    return _emit("relu", (x,), out, backward)


def flatten(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    _check(x.data.ndim >= 2, "flatten", "input needs a batch axis", x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g):
        return (g.reshape(shape),)

    return _emit("flatten", (x,), out, backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(src),)

    return _emit("reshape", (x,), out, backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W.T + b`` with W stored as (out_features, in_features)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    _check(x.data.ndim == 2, "dense", "input must be N x features", x)
    _check(weight.data.ndim == 2 and weight.shape[1] == x.shape[1], "dense",
           "weight must be out x in with in == input features", x, weight)
    _check(bias.shape == (weight.shape[0],), "dense", "bias must match output features", weight, bias)
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _emit("dense", (x, weight, bias), out, backward)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels -> scalar tensor.

    ``reduction='sum'`` keeps per-sample input gradients independent of the
    batch size, which the attacks rely on.
    """
    logits = _as_tensor(logits)
    _check(logits.data.ndim == 2, "softmax_cross_entropy", "logits must be N x classes", logits)
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size == 1 and n > 1:
        labels = np.full(n, labels[0], dtype=np.int64)
    _check(labels.size == n, "softmax_cross_entropy", f"expected {n} labels, got {labels.size}", logits)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range 0..{k - 1}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    per_sample = -logp[rows, labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(per_sample.sum(dtype=np.float64) * scale, dtype=DTYPE)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (DTYPE(scale) * g),)

    return _emit("softmax_cross_entropy", (logits,), out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check(a.shape == b.shape, "add", "operands must have equal shapes", a, b)

    def backward(g):
        return g, g

    return _emit("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check(a.shape == b.shape, "sub", "operands must have equal shapes", a, b)

    def backward(g):
        return g, -g

    return _emit("sub", (a, b), a.data - b.data, backward)


def scale(a: Tensor, factor: float) -> Tensor:
    a = _as_tensor(a)
    f = DTYPE(factor)

    def backward(g):
        return (g * f,)

    return _emit("scale", (a,), a.data * f, backward)


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return _emit("sum", (a,), np.asarray(a.data.sum(dtype=np.float64), dtype=DTYPE), backward)


def pick(a: Tensor, index: tuple[int, ...]) -> Tensor:
    """Select one element of ``a`` as a scalar tensor."""
    a = _as_tensor(a)
    try:
        value = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"pick: index {index} outside shape {a.shape}") from exc

    def backward(g):
        grad = np.zeros(a.shape, dtype=DTYPE)
        grad[index] = np.asarray(g).reshape(-1)[0]
        return (grad,)

    return _emit("pick", (a,), np.asarray(value, dtype=DTYPE), backward)


OPERATORS: dict[str, Callable[..., Tensor]] = {
    "conv2d": conv2d,
    "maxpool2x2": maxpool2x2,
    "relu": relu,
    "dense": dense,
    "flatten": flatten,
    "reshape": reshape,
    "softmax_cross_entropy": softmax_cross_entropy,
    "add": add,
    "sub": sub,
    "scale": scale,
    "sum": sum_all,
    "pick": pick,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = OPERATORS[kind]
    except KeyError:
        raise ValueError(f"unknown operator {kind!r}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# differentiation
# --------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not tape.records:
        raise TapeError("backward on an empty tape: loss was not computed under an active Tape")
    if tape.consumed:
        raise TapeError("backward already ran on this tape; re-run the forward pass first")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=DTYPE)
            if inp.is_leaf:
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = np.ascontiguousarray(grads[key].reshape(leaf.shape), dtype=DTYPE)


def _check_category(y, name: str) -> np.ndarray:
    arr = np.asarray(y)
    if arr.dtype.kind not in "iu" or arr.size == 0 or arr.min() < 0 or arr.max() >= NUM_CLASSES:
        raise ValueError(f"{name} must be an integer category in 0..{NUM_CLASSES - 1}, got {y!r}")
    return arr.astype(np.int64)


def grad_wrt_input(forward: Callable[[Tensor], Tensor], x, target, source=None) -> np.ndarray:
    """Gradient of J(x, target) [- J(x, source)] with respect to the input.

    ``forward`` maps an input tensor to logits. Per-sample losses are summed so
    each image in a batch receives its own gradient. Parameters seen by
    ``forward`` are never written to.
    """
    target = _check_category(target, "target")
    if source is not None:
        source = _check_category(source, "source")
    xt = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    with Tape():
        z = forward(xt)
        loss = softmax_cross_entropy(z, target, reduction="sum")
        if source is not None:
            loss = sub(loss, softmax_cross_entropy(z, source, reduction="sum"))
        if loss.requires_grad:
            backward(loss)
    if xt.grad is None:
        # input does not influence the loss at all
        return np.zeros(xt.shape, dtype=DTYPE)
    return xt.grad
