"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in execution
order; ``Tape.backward`` replays the records in reverse to accumulate
gradients. Outside a tape, the same operations run as plain numpy with no
bookkeeping, which is what inference and evaluation use.
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "fedtp_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when an operation receives incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or update contains NaN or inf."""


class Tensor:
    """Numeric array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            # integer index arrays stay integral unless they are differentiated
            if requires_grad or not np.issubdtype(arr.dtype, np.integer):
                arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; every primitive whose inputs require gradients is
    appended as ``(output, inputs, vjp)``. Records are in topological order by
    construction since an output can only be consumed after it is produced.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def vjp(self, outputs: Sequence[Tensor], cotangents: Sequence[np.ndarray]) -> dict[int, tuple[Tensor, np.ndarray]]:
        """Backpropagate arbitrary output cotangents.

        Returns ``{id(leaf): (leaf, gradient)}`` for every leaf that requires
        gradients and is reachable from the outputs.
        """
        grads: dict[int, np.ndarray] = {}
        for out, cot in zip(outputs, cotangents):
            cot = np.asarray(cot, dtype=out.data.dtype)
            if cot.shape != out.shape:
                raise ShapeError(f"vjp: cotangent shape {cot.shape} does not match output shape {out.shape}")
            key = id(out)
            grads[key] = grads[key] + cot if key in grads else cot
        produced = set()
        for out, inputs, rule in reversed(self.records):
            produced.add(id(out))
            g = grads.pop(id(out), None)
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in inputs)
            for t, gi in zip(inputs, rule(g, needs)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        known = {id(t): t for _, inputs, _ in self.records for t in inputs}
        known.update({id(o): o for o in outputs})
        for key, g in grads.items():
            if key in produced:
                continue
            t = known[key]
            if t.requires_grad:
                leaves[key] = (t, g)
        return leaves

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to named leaf tensors.

        Leaves that never fed into ``loss`` are absent from the result rather
        than zero-filled. Each reached leaf also gets its ``.grad`` set.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        leaves = self.vjp([loss], [np.ones_like(loss.data)])
        grads: dict[str, np.ndarray] = {}
        for t, g in leaves.values():
            t.grad = g
            if t.name is not None:
                grads[t.name] = g
        return grads


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((out, inputs, rule))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + k for k, extent in enumerate(shape) if extent == 1 and g.shape[lead + k] != 1
    )
    return g.sum(axis=axes).reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def rule(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _emit(a.data + b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def rule(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _emit(a.data * b.data, (a, b), rule)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g, needs: (g * c,))


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # stacked rows times one matrix: a single GEMM on the flattened rows
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def rule(g, needs):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if needs[0] else None
            gb = a2.T @ g2 if needs[1] else None
            return ga, gb

        return _emit(out, (a, b), rule)

    def rule(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit(a.data @ b.data, (a, b), rule)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g, needs: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _emit(out, (a,), lambda g, needs: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from err
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g, needs):
        parts = []
        for k, need in enumerate(needs):
            if not need:
                parts.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[k], bounds[k + 1])
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _emit(out, tensors, rule)


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``slice_(x, (slice(None), 0))``."""
    a = _as_tensor(a)
    out = a.data[index]

    def rule(g, needs):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit(np.array(out), (a,), rule)


def softmax(a) -> Tensor:
    """Softmax over the last axis, computed with row-max subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g, needs):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(p, (a,), rule)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape {x.shape[-1:]}, got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def rule(g, needs):
        gx = gg = gb = None
        g2 = g.reshape(-1, n)
        if needs[0]:
            gxhat = g * gamma.data
            gx = inv * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if needs[1]:
            gg = np.einsum("ij,ij->j", g2, xhat.reshape(-1, n))
        if needs[2]:
            gb = g2.sum(axis=0)
        return gx, gg, gb

    return _emit(out, (x, gamma, beta), rule)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def rule(g, needs):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _emit(out, (a,), rule)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit(a.data * mask, (a,), lambda g, needs: (g * mask,))


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer index array."""
    table = _as_tensor(table)
    ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding: indices must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table with {table.shape[0]} rows")

    def rule(g, needs):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _emit(table.data[ids], (table,), rule)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        out = np.asarray(a.data.mean())
        count = a.data.size
        return _emit(out, (a,), lambda g, needs: (np.full(a.shape, g / count, dtype=a.data.dtype),))
    out = a.data.mean(axis=axis)
    count = a.shape[axis]

    def rule(g, needs):
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy(),)

    return _emit(out, (a,), rule)


def cross_entropy(logits, targets) -> Tensor:
    """Mean softmax cross-entropy over all leading positions.

    ``logits`` has classes on the last axis; ``targets`` holds integer class
    ids with the logits' leading shape.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} does not match logits {logits.shape}")
    z = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.asarray((logsum - shifted[rows, t]).mean())

    def rule(g, needs):
        p = np.exp(shifted - logsum[:, None])
        p[rows, t] -= 1.0
        return ((g / z.shape[0]) * p.reshape(logits.shape),)

    return _emit(loss, (logits,), rule)


# ---------------------------------------------------------------- drivers


def parameters(arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap named arrays as leaf tensors (named, so they appear in GradMaps)."""
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in arrays.items()}


def forward_eval(fn: Callable[..., Tensor], inputs: Mapping[str, Tensor], tape: Tape | None = None):
    """Run ``fn(**inputs)`` recording onto ``tape`` (a fresh one if omitted).

    Returns ``(output, tape)`` so the caller can run ``tape.backward``.
    """
    tape = Tape() if tape is None else tape
    with tape:
        out = fn(**inputs)
    return out, tape


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    return tape.backward(loss)


def value_and_grad(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray]):
    """Evaluate a scalar loss of named parameters and its GradMap."""
    leaves = parameters(params)
    with Tape() as tape:
        loss = fn(leaves)
    return float(loss.data), tape.backward(loss)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """``p - lr * g`` for every parameter with a gradient; others pass through."""
    if lr <= 0:
        raise ValueError(f"sgd_step: lr must be positive, got {lr}")
    missing = [k for k in grads if k not in params]
    if missing:
        raise KeyError(f"sgd_step: gradients for unknown parameters {missing}")
    out = dict(params)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"sgd_step: non-finite gradient for parameter {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"sgd_step: gradient shape {g.shape} != parameter {k!r} shape {params[k].shape}")
        out[k] = params[k] - lr * g
    return out


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    The error of one entry is ``|a - fd| / max(|a|, |fd|, 1e-12)``; NaN or inf
    anywhere counts as an infinite error.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"grad_check: eps must lie in (0, 1e-2], got {eps}")
    params = {k: np.array(v, dtype=DEFAULT_DTYPE) for k, v in params.items()}
    _, analytic = value_and_grad(f, params)
    worst = 0.0
    for name in params if names is None else names:
        base = params[name]
        a_grad = analytic.get(name, np.zeros_like(base))
        flat = base.reshape(-1)
        fd = np.empty_like(flat)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + eps
            up = float(f({k: Tensor(v) for k, v in params.items()}).data)
            flat[j] = old - eps
            down = float(f({k: Tensor(v) for k, v in params.items()}).data)
            flat[j] = old
            fd[j] = (up - down) / (2 * eps)
        a = a_grad.reshape(-1)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(fd))):
            return math.inf
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-12)
        worst = max(worst, float(np.max(np.abs(a - fd) / denom)))
    return worst
