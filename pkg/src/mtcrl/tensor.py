"""Dense float64 tensors on a recording tape, with reverse-mode autodiff.

The backward rules are written in terms of the tape ops themselves, so a
backward pass run with ``create_graph=True`` appends ordinary nodes to the
tape and the resulting gradient tensors can be differentiated again.  That
double-backward path is what the gradient-norm penalties in this package
rely on; the op set is deliberately closed and small so every rule stays
enumerable and testable.

Conventions:
  * all data is float64, row-major (numpy ndarray);
  * leaves (parameters, inputs) are put on a tape via :meth:`Tape.leaf`;
  * tensors with ``node is None`` are constants - gradients never flow
    into them;
  * one tape per training step, reset between steps.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class TensorError(Exception):
    """Base class for tensor-core failures."""


class ShapeMismatchError(TensorError):
    pass


class DomainError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class NonScalarOutputError(TensorError):
    pass


class StaleTapeError(TensorError):
    pass


class NotOnTapeError(TensorError):
    pass


class Node:
    """One recorded operation: kind, parent tensors, and a backward rule.

    ``vjp(upstream)`` returns one gradient per parent (``None`` for
    constant parents).  Parent node ids always precede ``nid`` because
    nodes are appended in execution order.
    """

    __slots__ = ("nid", "op", "parents", "vjp", "tape", "generation", "trainable")

    def __init__(self, nid, op, parents, vjp, tape, trainable=False):
        self.nid = nid
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.tape = tape
        self.generation = tape.generation
        self.trainable = trainable


class Tape:
    """Append-only record of operations for one differentiation scope."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: set[int] = set()
        self.generation = 0
        self.recording = True

    def reset(self):
        """Drop all nodes; tensors from before the reset become stale."""
        self.nodes.clear()
        self.parameters.clear()
        self.generation += 1

    @contextlib.contextmanager
    def stop_recording(self):
        prev = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = prev

    def leaf(self, value, trainable: bool = False) -> "Tensor":
        """Put an array on the tape as a leaf (no parents)."""
        data = np.asarray(value, dtype=np.float64)
        node = Node(len(self.nodes), "leaf", (), None, self, trainable=trainable)
        self.nodes.append(node)
        if trainable:
            self.parameters.add(node.nid)
        return Tensor(data, node)


class Tensor:
    """A float64 array plus an optional reference into the active tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: Node | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        """Constant view of the same data; gradients stop here."""
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def __repr__(self):
        tag = "const" if self.node is None else f"node {self.node.nid}"
        return f"Tensor(shape={self.data.shape}, {tag})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return multiply(self, pow_const(other, -1.0))

    def __pow__(self, p):
        return pow_const(self, float(p))


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _tape_of(tensors: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.node is None:
            continue
        if t.node.generation != t.node.tape.generation:
            raise StaleTapeError(
                f"tensor from node {t.node.nid} predates a tape reset"
            )
        if tape is None:
            tape = t.node.tape
        elif tape is not t.node.tape:
            raise TensorError("inputs live on different tapes")
    return tape


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"operation '{op}' produced non-finite values")
    return data


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor],
          vjp: Callable | None) -> Tensor:
    _check_finite(data, op)
    tape = _tape_of(parents)
    if tape is None or not tape.recording:
        return Tensor(data)
    node = Node(len(tape.nodes), op, tuple(parents), vjp, tape)
    tape.nodes.append(node)
    return Tensor(data, node)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(
            f"operation '{op}': shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape`` (differentiable)."""
    if g.shape == tuple(shape):
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1
    )
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != tuple(shape):
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), vjp)


def subtract(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("subtract", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(scale(g, -1.0), b.shape)

    return _make("subtract", a.data - b.data, (a, b), vjp)


def multiply(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("multiply", a, b)

    def vjp(g):
        return (
            _unbroadcast(multiply(g, b), a.shape),
            _unbroadcast(multiply(g, a), b.shape),
        )

    return _make("multiply", a.data * b.data, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"operation 'matmul': incompatible shapes {a.shape} @ {b.shape}"
        )

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make("matmul", a.data @ b.data, (a, b), vjp)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError(
            f"operation 'transpose': expected 2-d, got shape {a.shape}"
        )

    def vjp(g):
        return (transpose(g),)

    return _make("transpose", a.data.T.copy(), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeMismatchError(
            f"operation 'reshape': cannot view {a.shape} as {shape}"
        )
    old = a.shape

    def vjp(g):
        return (reshape(g, old),)

    return _make("reshape", a.data.reshape(shape), (a,), vjp)


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)

    def vjp(g):
        return (scale(g, c),)

    return _make("scale", a.data * c, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_holder = []

    def vjp(g):
        y = out_holder[0]
        return (multiply(multiply(g, y), subtract(1.0, y)),)

    out = _make("sigmoid", data, (a,), vjp)
    out_holder.append(out)
    return out


def tanh(a) -> Tensor:
    a = _lift(a)
    out_holder = []

    def vjp(g):
        y = out_holder[0]
        return (multiply(g, subtract(1.0, square(y))),)

    out = _make("tanh", np.tanh(a.data), (a,), vjp)
    out_holder.append(out)
    return out


def relu(a) -> Tensor:
    a = _lift(a)
    mask = Tensor((a.data > 0).astype(np.float64))  # subgradient at 0 is 0

    def vjp(g):
        return (multiply(g, mask),)

    return _make("relu", np.maximum(a.data, 0.0), (a,), vjp)


def exp(a) -> Tensor:
    a = _lift(a)
    out_holder = []

    def vjp(g):
        return (multiply(g, out_holder[0]),)

    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = _make("exp", data, (a,), vjp)
    out_holder.append(out)
    return out


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise DomainError("operation 'log': input has non-positive values")

    def vjp(g):
        return (multiply(g, pow_const(a, -1.0)),)

    return _make("log", np.log(a.data), (a,), vjp)


def square(a) -> Tensor:
    a = _lift(a)

    def vjp(g):
        return (scale(multiply(g, a), 2.0),)

    return _make("square", a.data * a.data, (a,), vjp)


def absolute(a) -> Tensor:
    a = _lift(a)
    sign = Tensor(np.sign(a.data))  # derivative at 0 defined as 0

    def vjp(g):
        return (multiply(g, sign),)

    return _make("absolute", np.abs(a.data), (a,), vjp)


def pow_const(a, p: float) -> Tensor:
    a = _lift(a)
    p = float(p)
    if p != int(p) and np.any(a.data < 0):
        raise DomainError("operation 'pow': fractional power of negative values")
    if p < 0 and np.any(a.data == 0):
        raise DomainError("operation 'pow': negative power of zero")

    def vjp(g):
        return (scale(multiply(g, pow_const(a, p - 1.0)), p),)

    with np.errstate(over="ignore"):
        data = a.data ** p
    return _make("pow", data, (a,), vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    in_shape = a.shape

    def vjp(g):
        if axis is None:
            expand = g if g.data.ndim == a.data.ndim else reshape(g, (1,) * a.data.ndim)
        elif keepdims:
            expand = g
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % len(in_shape) for ax in axes)
            kshape = tuple(
                1 if i in axes else s for i, s in enumerate(in_shape)
            )
            expand = reshape(g, kshape)
        return (multiply(expand, Tensor(np.ones(in_shape))),)

    return _make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.data.ndim] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    a = _lift(a)
    axis = axis % a.data.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeMismatchError(
            f"operation 'slice': [{start}:{start + length}) out of range for "
            f"axis {axis} of shape {a.shape}"
        )
    key = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(a.data.ndim)
    )
    in_shape = a.shape

    def vjp(g):
        return (scatter_narrow(g, axis, start, in_shape),)

    return _make("slice", a.data[key].copy(), (a,), vjp)


def scatter_narrow(g, axis: int, start: int, target_shape) -> Tensor:
    """Adjoint of :func:`narrow`: embed ``g`` into zeros of ``target_shape``."""
    g = _lift(g)
    axis = axis % len(target_shape)
    data = np.zeros(target_shape)
    length = g.shape[axis]
    key = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(len(target_shape))
    )
    data[key] = g.data

    def vjp(up):
        return (narrow(up, axis, start, length),)

    return _make("scatter", data, (g,), vjp)


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeMismatchError("operation 'concatenate': no inputs")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            i != axis and t.shape[i] != tensors[0].shape[i] for i in range(ndim)
        ):
            raise ShapeMismatchError(
                f"operation 'concatenate': shapes "
                f"{[t.shape for t in tensors]} differ off axis {axis}"
            )
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        return tuple(
            narrow(g, axis, int(offsets[i]), t.shape[axis])
            for i, t in enumerate(tensors)
        )

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make("concatenate", data, tuple(tensors), vjp)


# ---------------------------------------------------------------------------
# composite ops (built from primitives; second order comes for free)


def l1_norm(a) -> Tensor:
    return sum_(absolute(a))


def l2_norm_sq(a) -> Tensor:
    return sum_(square(a))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-sample negative log-likelihood of integer ``labels``.

    ``logits`` is B x C; returns a length-B vector.  Stable via a detached
    row-max shift, which leaves all derivatives unchanged.
    """
    logits = _lift(logits)
    if logits.data.ndim != 2:
        raise ShapeMismatchError(
            f"operation 'softmax_cross_entropy': logits must be 2-d, got "
            f"{logits.shape}"
        )
    lab = np.asarray(labels).astype(np.int64).ravel()
    n, c = logits.shape
    if lab.shape[0] != n:
        raise ShapeMismatchError(
            f"operation 'softmax_cross_entropy': {n} rows vs {lab.shape[0]} labels"
        )
    if lab.min() < 0 or lab.max() >= c:
        raise DomainError(
            "operation 'softmax_cross_entropy': label outside [0, num_classes)"
        )
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = subtract(logits, shift)
    lse = log(sum_(exp(z), axis=1, keepdims=True))
    logp = subtract(z, lse)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), lab] = 1.0
    return scale(sum_(multiply(logp, Tensor(onehot)), axis=1), -1.0)


_RECORDABLE = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "matmul": matmul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "sum": sum_,
    "mean": mean,
    "square": square,
    "absolute": absolute,
    "l1_norm": l1_norm,
    "l2_norm_sq": l2_norm_sq,
    "softmax_cross_entropy": softmax_cross_entropy,
    "log": log,
    "exp": exp,
    "concatenate": concatenate,
    "slice": narrow,
    "scatter": scatter_narrow,
    "scale": scale,
    "transpose": transpose,
    "reshape": reshape,
    "pow": pow_const,
}


def record(op_kind: str, inputs, **attrs) -> Tensor:
    """Dispatch an op by name onto the active tape (test/introspection surface)."""
    try:
        fn = _RECORDABLE[op_kind]
    except KeyError:
        raise TensorError(f"unknown operation kind '{op_kind}'") from None
    if op_kind == "concatenate":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# reverse pass


class GradMap:
    """Gradients keyed by parameter node id, one entry per requested tensor.

    Every requested tensor gets an entry; tensors unreachable from the
    differentiated output (or explicitly detached) map to zero tensors of
    matching shape.
    """

    def __init__(self):
        self.by_id: dict[int, Tensor] = {}

    def put(self, tensor: Tensor, grad: Tensor):
        self.by_id[tensor.node.nid] = grad

    def get(self, tensor: Tensor) -> Tensor:
        if tensor.node is None:
            raise NotOnTapeError("tensor is a constant; it has no gradient entry")
        return self.by_id[tensor.node.nid]

    def __contains__(self, tensor: Tensor):
        return tensor.node is not None and tensor.node.nid in self.by_id

    def __len__(self):
        return len(self.by_id)


def grad(output: Tensor, wrt, create_graph: bool = False,
         detached=()) -> GradMap:
    """Reverse-mode derivatives of a scalar ``output`` w.r.t. ``wrt`` tensors.

    With ``create_graph=True`` the returned gradients are themselves on the
    tape, so a second call differentiates through them.  Tensors listed in
    ``detached`` get exactly-zero entries.
    """
    if output.node is None:
        raise NotOnTapeError("output is not on a tape")
    tape = output.node.tape
    if output.node.generation != tape.generation:
        raise StaleTapeError("output predates a tape reset")
    if output.size != 1:
        raise NonScalarOutputError(
            f"grad requires a scalar output, got shape {output.shape}"
        )
    wrt = list(wrt)
    detached_ids = set()
    for t in detached:
        if t.node is not None:
            detached_ids.add(t.node.nid)

    ctx = contextlib.nullcontext() if create_graph else tape.stop_recording()
    grads: dict[int, Tensor] = {output.node.nid: Tensor(np.ones(output.shape))}
    with ctx:
        for nid in range(output.node.nid, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = tape.nodes[nid]
            if node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or parent.node is None:
                    continue
                pid = parent.node.nid
                if pid in grads:
                    grads[pid] = add(grads[pid], pg)
                else:
                    grads[pid] = pg

    out = GradMap()
    for t in wrt:
        if t.node is None:
            raise NotOnTapeError("requested gradient for a constant tensor")
        if t.node.tape is not tape:
            raise NotOnTapeError("requested tensor lives on a different tape")
        g = grads.get(t.node.nid)
        if g is None or t.node.nid in detached_ids:
            g = Tensor(np.zeros(t.shape))
        out.put(t, g)
    return out


# ---------------------------------------------------------------------------
# finite-difference oracle


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def finite_diff_check(f, params, step: float = 1e-5, order: int = 1) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` takes one leaf tensor per entry of ``params`` (arrays of initial
    values) and returns a scalar tensor.  ``order=1`` checks the gradient of
    ``f``; ``order=2`` checks the gradient of the gradient-norm penalty
    ``sum_p ||d f / d p||^2`` via double backward.  Relative error uses a
    denominator floored at 1 so near-zero derivatives compare absolutely.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    base = [np.array(p, dtype=np.float64) for p in params]

    def build(values):
        tape = Tape()
        leaves = [tape.leaf(v, trainable=True) for v in values]
        out = f(*leaves)
        if not np.all(np.isfinite(out.data)):
            raise NonFiniteError("objective evaluated to a non-finite value")
        return leaves, out

    def objective_value(values) -> float:
        leaves, out = build(values)
        if order == 1:
            return float(out.data)
        gm = grad(out, leaves, create_graph=True)
        pen = None
        for leaf in leaves:
            term = l2_norm_sq(gm.get(leaf))
            pen = term if pen is None else add(pen, term)
        return float(pen.data)

    # analytic side
    leaves, out = build(base)
    if order == 1:
        amap = grad(out, leaves)
    else:
        gm = grad(out, leaves, create_graph=True)
        pen = None
        for leaf in leaves:
            term = l2_norm_sq(gm.get(leaf))
            pen = term if pen is None else add(pen, term)
        amap = grad(pen, leaves)
    analytic = [amap.get(leaf).data for leaf in leaves]

    worst = 0.0
    for i, arr in enumerate(base):
        flat = arr.reshape(-1)
        for j in range(flat.size):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[i].reshape(-1)[j] += step
            minus[i].reshape(-1)[j] -= step
            numeric = (objective_value(plus) - objective_value(minus)) / (2 * step)
            worst = max(worst, _rel_err(float(analytic[i].reshape(-1)[j]), numeric))
    return worst
