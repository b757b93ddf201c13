"""Dense f64 tensors with reverse-mode differentiation.

The op set is deliberately small: per-pixel affine stacks, cosine/softmax
heads, masked reductions, and region pooling are expressible with 2-D
matmul, elementwise arithmetic, a handful of unary maps, axis reductions,
basic slicing, row gathers, and axis-0 concatenation. There is no
broadcasting beyond scalar-tensor; ``add_bias`` is the one explicit
row-alignment helper.

Every op records its inputs and a vector-Jacobian closure on the output
node; the recorded graph *is* the tape, and ``backward`` replays it in
reverse topological (execution) order, so gradient accumulation order is
deterministic. ``check_gradients`` is the independent central-difference
oracle used by the verification CLI and the test suite.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12  # added to L2 denominators; norms below it are a domain error


class ShapeError(ValueError):
    """Operand shapes incompatible for the named op."""


class DomainError(ValueError):
    """Operand values outside the op's domain (log <= 0, tau <= 0, zero norm)."""


class Tensor:
    """Row-major f64 array, optionally tracked for reverse-mode gradients.

    Leaves created with ``requires_grad=True`` own a zero-initialised
    ``grad`` buffer; ``backward`` accumulates into it (call ``zero_grad``
    between steps). Op outputs carry transient adjoints only.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return _elementwise("add", self, other)

    def __radd__(self, other):
        return _elementwise("add", self, other)

    def __sub__(self, other):
        return _elementwise("sub", self, other)

    def __rsub__(self, other):
        return _elementwise("sub", _as_tensor(other), self)

    def __mul__(self, other):
        return _elementwise("mul", self, other)

    def __rmul__(self, other):
        return _elementwise("mul", self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("div: only division by a plain scalar is supported")
        return _elementwise("mul", self, 1.0 / float(other))

    def __neg__(self):
        return _elementwise("mul", self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    def __abs__(self):
        return self.abs()

    # -- unary maps ---------------------------------------------------------

    def relu(self) -> "Tensor":
        out = _node(np.maximum(self.data, 0.0), (self,), "relu")
        mask = self.data > 0.0
        out._vjp = lambda g: (g * mask,)
        return out

    def exp(self) -> "Tensor":
        value = np.exp(self.data)
        out = _node(value, (self,), "exp")
        out._vjp = lambda g: (g * value,)
        return out

    def log(self) -> "Tensor":
        if np.any(self.data <= 0.0):
            raise DomainError("log: input has non-positive entries")
        out = _node(np.log(self.data), (self,), "log")
        x = self.data
        out._vjp = lambda g: (g / x,)
        return out

    def abs(self) -> "Tensor":
        out = _node(np.abs(self.data), (self,), "abs")
        sign = np.sign(self.data)
        out._vjp = lambda g: (g * sign,)
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, mean=False)

    def mean(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, mean=True)

    # -- structure ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        if int(np.prod(shape)) != self.data.size:
            raise ShapeError(f"reshape: cannot view {self.data.shape} as {shape}")
        out = _node(self.data.reshape(shape), (self,), "reshape")
        orig = self.data.shape
        out._vjp = lambda g: (g.reshape(orig),)
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._op = op
    return out


def _elementwise(op: str, a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    a_scalar, b_scalar = a.data.ndim == 0, b.data.ndim == 0
    if not (a.data.shape == b.data.shape or a_scalar or b_scalar):
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ (no broadcasting)")

    if op == "add":
        value = a.data + b.data
    elif op == "sub":
        value = a.data - b.data
    else:
        value = a.data * b.data
    out = _node(value, (a, b), op)
    if not out.requires_grad:
        return out

    def vjp(g):
        if op == "add":
            ga, gb = g, g
        elif op == "sub":
            ga, gb = g, -g
        else:
            ga, gb = g * b.data, g * a.data
        # a scalar operand collects the full adjoint
        if a_scalar and np.ndim(ga):
            ga = np.sum(ga)
        if b_scalar and np.ndim(gb):
            gb = np.sum(gb)
        return ga, gb

    out._vjp = vjp
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        out._vjp = lambda g: (g @ b.data.T, a.data.T @ g)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis (the explicit row-broadcast op)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim < 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: bias {b.data.shape} does not match last axis of {x.data.shape}")
    out = _node(x.data + b.data, (x, b), "add_bias")
    if out.requires_grad:
        lead = tuple(range(x.data.ndim - 1))
        out._vjp = lambda g: (g, g.sum(axis=lead) if lead else g)
    return out


def _reduce(t: Tensor, axis: int | None, mean: bool) -> Tensor:
    op = "mean" if mean else "sum"
    if axis is not None and not -t.data.ndim <= axis < t.data.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {t.data.shape}")
    value = t.data.mean(axis=axis) if mean else t.data.sum(axis=axis)
    out = _node(value, (t,), op)
    if not out.requires_grad:
        return out
    shape = t.data.shape
    n = t.data.size if axis is None else shape[axis]
    scale = 1.0 / n if mean else 1.0

    def vjp(g):
        if axis is None:
            return (np.full(shape, g * scale),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) * scale,)

    out._vjp = vjp
    return out


def _slice(t: Tensor, key) -> Tensor:
    if isinstance(key, (np.ndarray, list, Tensor)):
        raise ShapeError("slice: advanced indexing unsupported, use gather_rows")
    out = _node(np.array(t.data[key]), (t,), "slice")
    if out.requires_grad:
        shape = t.data.shape

        def vjp(g):
            full = np.zeros(shape)
            full[key] += g
            return (full,)

        out._vjp = vjp
    return out


def gather_rows(t: Tensor, index) -> Tensor:
    """Select rows of ``t`` along axis 0 by an integer index vector."""
    idx = np.asarray(index, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-D, got {idx.shape}")
    if t.data.ndim < 1:
        raise ShapeError("gather_rows: input must have rank >= 1")
    if idx.size and (idx.min() < 0 or idx.max() >= t.data.shape[0]):
        raise ShapeError("gather_rows: index out of range")
    out = _node(t.data[idx], (t,), "gather_rows")
    if out.requires_grad:
        shape = t.data.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            return (full,)

        out._vjp = vjp
    return out


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input")
    tail = ts[0].data.shape[1:]
    if any(t.data.ndim == 0 or t.data.shape[1:] != tail for t in ts):
        raise ShapeError("concat: trailing dimensions differ")
    out = _node(np.concatenate([t.data for t in ts], axis=0), tuple(ts), "concat")
    if out.requires_grad:
        sizes = [t.data.shape[0] for t in ts]
        offsets = np.cumsum([0] + sizes)

        def vjp(g):
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

        out._vjp = vjp
    return out


def l2_normalize(t: Tensor) -> Tensor:
    """Normalize to unit L2 norm along the last axis.

    Denominators carry a ``NORM_EPS`` guard; rows with norm below the guard
    raise ``DomainError`` instead of producing garbage directions.
    """
    t = _as_tensor(t)
    if t.data.ndim == 0:
        raise ShapeError("l2_normalize: input must have rank >= 1")
    x = t.data
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    if np.any(norms < NORM_EPS):
        raise DomainError("l2_normalize: zero-norm row")
    denom = norms + NORM_EPS
    out = _node(x / denom, (t,), "l2_normalize")
    if out.requires_grad:
        def vjp(g):
            inner = np.sum(g * x, axis=-1, keepdims=True)
            return (g / denom - x * (inner / (norms * denom * denom)),)

        out._vjp = vjp
    return out


def softmax_with_temperature(t: Tensor, tau) -> Tensor:
    """Softmax of ``t / tau`` along the last axis, max-subtracted for stability.

    ``tau`` may be a plain positive number or a scalar Tensor; gradients
    flow through a Tensor temperature.
    """
    t = _as_tensor(t)
    tau_t = tau if isinstance(tau, Tensor) else None
    tau_v = float(tau_t.data) if tau_t is not None else float(tau)
    if tau_v <= 0.0:
        raise DomainError(f"softmax_with_temperature: tau must be positive, got {tau_v}")
    if tau_t is not None and tau_t.data.ndim != 0:
        raise ShapeError("softmax_with_temperature: tau must be scalar")
    shifted = (t.data - t.data.max(axis=-1, keepdims=True)) / tau_v
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    parents = (t,) if tau_t is None else (t, tau_t)
    out = _node(p, parents, "softmax_with_temperature")
    if not out.requires_grad:
        return out

    def vjp(g):
        inner = np.sum(g * p, axis=-1, keepdims=True)
        centered = p * (g - inner)
        gx = centered / tau_v
        if tau_t is None:
            return (gx,)
        # d(softmax((x-m)/tau))/dtau via z = (x-m)/tau, dz/dtau = -z/tau
        gtau = -np.sum(centered * shifted) / tau_v
        return gx, np.float64(gtau)

    out._vjp = vjp
    return out


# -- backward pass ------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    """Tape for ``root``: every node appears after all producers of its inputs."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf."""
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.float64(1.0)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is not None:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = pg


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be pure and scalar-valued; intended step sizes are <= 1e-2.
    Error metric per coordinate: |analytic - numeric| / max(1, |analytic|).
    """
    if eps <= 0.0:
        raise ValueError(f"check_gradients: eps must be positive, got {eps}")
    probe = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.data.shape != ():
        raise ShapeError("check_gradients: f must return a scalar Tensor")
    backward(out)
    analytic = probe.grad.reshape(-1).copy()

    base = probe.data.copy()
    numeric = np.empty_like(analytic)
    for i in range(base.size):
        hi = base.copy()
        hi.flat[i] += eps
        lo = base.copy()
        lo.flat[i] -= eps
        numeric[i] = (float(f(Tensor(hi)).data) - float(f(Tensor(lo)).data)) / (2.0 * eps)
    if analytic.size == 0:
        return 0.0
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max())


# -- fixture serialization -----------------------------------------------------

_MAGIC = b"TNSR"


def save_tensor(path, array: np.ndarray) -> None:
    """Write ``array`` in the fixture format: magic, u32 rank, u32 extents, f64 payload.

    All fields are little-endian; the payload is row-major.
    """
    a = np.asarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        if a.ndim:
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())  # tobytes emits C order regardless of layout


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a TNSR file")
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if rank else 1
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
