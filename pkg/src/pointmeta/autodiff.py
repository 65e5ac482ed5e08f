"""Dense tensors with reverse-mode automatic differentiation on a tape.

Operations compute eagerly with numpy and, while a :class:`Tape` is active,
record themselves in creation order (which is a topological order).
``backward`` replays the tape in reverse to accumulate gradients.

The backward rule of every primitive is itself built from primitives, so
running ``backward(..., create_graph=True)`` produces gradients that are
again differentiable.  That is what the second-order meta-update relies on.

Tapes are single-writer: build one tape per task evaluation and do not share
it across threads.  Parameter stores are plain read-only data and may be
shared freely.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Mapping

import numpy as np

from .errors import ContractError, DimensionError, ValidationError

_LOCAL = threading.local()


def _stack() -> list:
    if not hasattr(_LOCAL, "stack"):
        _LOCAL.stack = []
    return _LOCAL.stack


def _active_tape():
    stack = _stack()
    return stack[-1] if stack else None


class _push_tape:
    """Make ``tape`` active for a block; ``None`` suppresses recording."""

    def __init__(self, tape):
        self.tape = tape

    def __enter__(self):
        _stack().append(self.tape)
        return self.tape

    def __exit__(self, *exc):
        _stack().pop()
        return False


class Tape:
    """Ordered record of operations.

    Node ``i`` only ever depends on nodes ``< i``, so a single reverse sweep
    visits every node after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode AD.

    Leaves created with ``requires_grad=True`` (typically named parameters)
    collect gradients; everything else is an op output whose ``_vjp`` maps
    the output gradient to per-parent gradients.
    """

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.tape: Tape | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    # arithmetic sugar; second operand may be a plain number or array
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _lift_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, like=a)
    return _lift(a, like=b), b


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._vjp = vjp
        out.tape = tape
        tape.nodes.append(out)
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = sum_(g, axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = sum_(g, axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _record(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    out = Tensor(a.data / b.data)

    def vjp(g):
        da = div(g, b)
        db = neg(div(mul(g, a), mul(b, b)))
        return _unbroadcast(da, a.shape), _unbroadcast(db, b.shape)

    return _record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _lift(a)
    out = Tensor(-a.data)

    def vjp(g):
        return (neg(g),)

    return _record(out, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _record(out, (a, b), vjp)


def transpose(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.ascontiguousarray(a.data.T))

    def vjp(g):
        return (transpose(g),)

    return _record(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.reshape(shape))

    def vjp(g):
        return (reshape(g, a.shape),)

    return _record(out, (a,), vjp)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    out = Tensor(np.ascontiguousarray(np.broadcast_to(a.data, shape)))

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _record(out, (a,), vjp)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            kept = list(a.shape)
            for ax in np.atleast_1d(axis):
                kept[ax] = 1
            g = reshape(g, tuple(kept))
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)

    return _record(out, (a,), vjp)


def exp(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.exp(a.data))

    def vjp(g):
        return (mul(g, out),)

    return _record(out, (a,), vjp)


def log(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.log(a.data))

    def vjp(g):
        return (div(g, a),)

    return _record(out, (a,), vjp)


def relu(a) -> Tensor:
    """Elementwise max(x, 0); the subgradient at exactly 0 is defined as 0."""
    a = _lift(a)
    out = Tensor(np.maximum(a.data, 0))
    mask = Tensor((a.data > 0).astype(a.data.dtype))

    def vjp(g):
        return (mul(g, mask),)

    return _record(out, (a,), vjp)


def max_over_points(a) -> tuple[Tensor, np.ndarray]:
    """Per-feature maximum over the point axis of a [P, F] tensor.

    Returns the pooled [F] tensor and the argmax row per feature.  The
    gradient of each feature flows only to its argmax point; ties break
    toward the lowest point index (numpy argmax convention).
    """
    a = _lift(a)
    if a.ndim != 2 or a.shape[0] < 1:
        raise DimensionError(f"max_over_points: need a non-empty [P, F] input, got {a.shape}")
    argmax = np.argmax(a.data, axis=0)
    out = Tensor(a.data[argmax, np.arange(a.shape[1])])
    routing = np.zeros(a.shape, dtype=a.data.dtype)
    routing[argmax, np.arange(a.shape[1])] = 1
    routing = Tensor(routing)

    def vjp(g):
        spread = broadcast_to(reshape(g, (1, a.shape[1])), a.shape)
        return (mul(routing, spread),)

    return _record(out, (a,), vjp), argmax


def permute_rows(a, order) -> Tensor:
    """Reorder the rows of a [P, F] tensor; exactly linear, exactly invertible."""
    a = _lift(a)
    order = np.asarray(order)
    out = Tensor(a.data[order])
    inverse = np.argsort(order)

    def vjp(g):
        return (permute_rows(g, inverse),)

    return _record(out, (a,), vjp)


def concat_cols(a, b) -> Tensor:
    a, b = _lift_pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    split = a.shape[1]

    def vjp(g):
        return slice_cols(g, 0, split), slice_cols(g, split, out.shape[1])

    return _record(out, (a, b), vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    out = Tensor(np.ascontiguousarray(a.data[:, start:stop]))

    def vjp(g):
        pieces = g
        if start > 0:
            pieces = concat_cols(Tensor(np.zeros((a.shape[0], start), a.data.dtype)), pieces)
        if stop < a.shape[1]:
            pieces = concat_cols(pieces, Tensor(np.zeros((a.shape[0], a.shape[1] - stop), a.data.dtype)))
        return (pieces,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# composite losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of [P, C] logits against P class indices."""
    logits = _lift(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be [P, C], got {logits.shape}")
    labels = np.asarray(labels)
    n_points, n_classes = logits.shape
    if labels.shape != (n_points,):
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} does not match {n_points} points")
    bad = np.nonzero((labels < 0) | (labels >= n_classes))[0]
    if bad.size:
        i = int(bad[0])
        raise ValidationError(f"label {int(labels[i])} out of range [0, {n_classes}) at point {i}")

    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(n_points), labels] = 1
    # the row-max shift is a constant: softmax is shift invariant, so the
    # gradient is unaffected and values stay finite
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = sub(logits, shift)
    logsumexp = log(sum_(exp(shifted), axis=1, keepdims=True))
    logprobs = sub(shifted, logsumexp)
    picked = sum_(mul(logprobs, Tensor(onehot)))
    return mul(picked, -1.0 / n_points)


# ---------------------------------------------------------------------------
# parameters and gradients


class ParamStore:
    """Ordered ``name -> ndarray`` parameter store with a single precision.

    Stores are treated as immutable: updates return new stores.  Arrays are
    not copied on construction, so callers must hand over fresh arrays.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray], dtype=None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, value in arrays.items():
            self._arrays[name] = np.asarray(value, dtype=dtype)
        dtypes = {a.dtype for a in self._arrays.values()}
        if len(dtypes) > 1:
            raise ContractError(f"mixed parameter dtypes: {sorted(map(str, dtypes))}")

    @property
    def dtype(self):
        if not self._arrays:
            return np.dtype(np.float32)
        return next(iter(self._arrays.values())).dtype

    def keys(self):
        return self._arrays.keys()

    def items(self):
        return self._arrays.items()

    def values(self):
        return self._arrays.values()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self):
        return len(self._arrays)

    def __iter__(self):
        return iter(self._arrays)

    def copy(self) -> "ParamStore":
        return ParamStore({n: a.copy() for n, a in self._arrays.items()})

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({n: a.astype(dtype) for n, a in self._arrays.items()})

    def tensors(self) -> dict[str, Tensor]:
        """Fresh named leaf tensors, one per parameter."""
        return {n: Tensor(a, requires_grad=True, name=n) for n, a in self._arrays.items()}

    def num_values(self) -> int:
        return sum(a.size for a in self._arrays.values())


GradientMap = dict[str, Tensor]


def grad_array(g) -> np.ndarray:
    return g.data if isinstance(g, Tensor) else np.asarray(g)


def backward(loss: Tensor, tape: Tape, wrt: Mapping[str, Tensor], create_graph: bool = False) -> GradientMap:
    """Gradients of a scalar ``loss`` with respect to the ``wrt`` tensors.

    ``wrt`` maps names to tensors that participated in the tape (leaves or
    intermediates); tensors the loss does not depend on get zero gradients.
    With ``create_graph`` the returned gradients are recorded on the same
    tape and can be differentiated again.
    """
    if loss.data.shape != ():
        raise ContractError(f"loss must be a scalar, got shape {loss.data.shape}")
    if loss.tape is not tape:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, Tensor] = {id(loss): Tensor(np.ones((), dtype=loss.data.dtype))}
    nodes = list(tape.nodes)
    with _push_tape(tape if create_graph else None):
        for node in reversed(nodes):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node.parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                held = grads.get(id(parent))
                grads[id(parent)] = pg if held is None else add(held, pg)

    result: GradientMap = {}
    for name, tensor in wrt.items():
        g = grads.get(id(tensor))
        if g is None:
            g = Tensor(np.zeros(tensor.shape, dtype=tensor.data.dtype))
        result[name] = g
    return result


def sgd_step(params: ParamStore, grads: Mapping[str, Tensor], lr: float) -> ParamStore:
    """One plain gradient-descent step, ``p - lr * g`` per parameter.

    Functional: the input store is untouched.
    """
    missing = [n for n in params.keys() if n not in grads]
    if missing:
        raise ContractError(f"gradient missing for parameters: {missing}")
    updated = {}
    for name, value in params.items():
        g = grad_array(grads[name])
        if g.shape != value.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {value.shape} for {name!r}")
        updated[name] = value - np.asarray(lr, dtype=value.dtype) * g
    return ParamStore(updated)


def finite_diff_gradient(f: Callable[[ParamStore], float], params: ParamStore, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, one coordinate at a time.

    Slow by construction; this is the oracle the reverse-mode engine is
    checked against, so it must stay independent of the tape machinery.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    work = {n: a.copy() for n, a in params.items()}
    store = ParamStore(work)
    out = {}
    for name, array in work.items():
        grad = np.zeros_like(array)
        it = np.nditer(array, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            saved = array[idx]
            array[idx] = saved + eps
            up = f(store)
            array[idx] = saved - eps
            down = f(store)
            array[idx] = saved
            grad[idx] = (up - down) / (2 * eps)
            it.iternext()
        out[name] = grad
    return out
