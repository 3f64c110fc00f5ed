"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every tensor operation records its parents and a closure mapping the output
gradient to parent gradients.  ``backward`` walks the recorded graph once in
reverse topological order.  Broadcasting is deliberately limited to
scalar-versus-tensor; bias rows go through :func:`linear`.
"""

from __future__ import annotations

import builtins
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, ParameterError

_GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        *,
        _parents: tuple[Tensor, ...] = (),
        _backward: _GradFn | None = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: _GradFn, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def custom_op(data, parents: tuple[Tensor, ...], backward: _GradFn, op: str) -> Tensor:
    """Wrap a hand-written forward/backward pair as a graph node."""
    return _result(np.asarray(data, dtype=np.float64), tuple(parents), backward, op)


def _conform(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only scalar broadcast is ever produced
    return np.asarray(g.sum())


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _conform("add", a, b)

    def back(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _conform("sub", a, b)

    def back(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _conform("mul", a, b)

    def back(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _conform("div", a, b)

    def back(g):
        return (
            _reduce_to(g / b.data, a.shape),
            _reduce_to(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), back, "div")


def _unary(a, out: np.ndarray, local: Callable[[np.ndarray], np.ndarray], op: str) -> Tensor:
    a = as_tensor(a)

    def back(g):
        return (g * local(g),)

    return _result(out, (a,), back, op)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, 0.0), lambda g: mask, "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _unary(a, out, lambda g: 1.0 - out * out, "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _unary(a, out, lambda g: out, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, np.log(a.data), lambda g: 1.0 / a.data, "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _unary(a, a.data * a.data, lambda g: 2.0 * a.data, "square")


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return _unary(a, np.abs(a.data), lambda g: np.sign(a.data), "abs")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _unary(a, np.clip(a.data, lo, hi), lambda g: inside, "clamp")


# reductions -----------------------------------------------------------------


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), back, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise DimensionError(f"mean: empty operand of shape {a.shape}")

    def back(g):
        if axis is None:
            return (np.full(a.shape, float(g) / count),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy(),)

    return _result(np.asarray(a.data.mean(axis=axis)), (a,), back, "mean")


# linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def back(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _result(a.data @ b.data, (a, b), back, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: shapes {x.shape} and {w.shape} do not conform")
    out = x.data @ w.data
    if b is None:

        def back(g):
            return (
                g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
            )

        return _result(out, (x, w), back, "linear")
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match weight {w.shape}")

    def back_b(g):
        return (
            g @ w.data.T if x.requires_grad else None,
            x.data.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _result(out + b.data, (x, w, b), back_b, "linear")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D operand, got shape {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def diag(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"diag: expected square matrix, got shape {a.shape}")
    return _result(np.diag(a.data).copy(), (a,), lambda g: (np.diag(g),), "diag")


def take(a, index) -> Tensor:
    """Basic or integer-array indexing along the leading axis."""
    a = as_tensor(a)
    out = np.asarray(a.data[index])

    def back(g):
        full = np.zeros_like(a.data)
        if isinstance(index, slice):
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(out.copy(), (a,), back, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise DimensionError("concat: no operands")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for k, (s, r) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} do not conform")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def embed_mean(table, tokens: np.ndarray) -> Tensor:
    """Mean of embedding rows for each token sequence (rows of ``tokens``)."""
    table = as_tensor(table)
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or table.ndim != 2:
        raise DimensionError(f"embed_mean: shapes {table.shape} and {tokens.shape} do not conform")
    n, length = tokens.shape
    vocab = table.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise DimensionError(f"embed_mean: token ids outside [0, {vocab})")

    def back(g):
        flat = (np.arange(n)[:, None] * vocab + tokens).ravel()
        counts = np.bincount(flat, minlength=n * vocab).reshape(n, vocab) / length
        return (counts.T @ g,)

    return _result(table.data[tokens].mean(axis=1), (table,), back, "embed_mean")


def add_lowrank(w, a, b, scale: float) -> Tensor:
    """``w + scale · b @ a`` as a single node (low-rank adapted weight)."""
    w, a, b = as_tensor(w), as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or b.shape[1] != a.shape[0] or w.shape != (b.shape[0], a.shape[1]):
        raise DimensionError(f"add_lowrank: shapes {w.shape}, {b.shape} @ {a.shape} do not conform")

    def back(g):
        return (
            g,
            scale * (b.data.T @ g) if a.requires_grad else None,
            scale * (g @ a.data.T) if b.requires_grad else None,
        )

    return _result(w.data + scale * (b.data @ a.data), (w, a, b), back, "add_lowrank")


# row-wise normalisations ---------------------------------------------------------


def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), back, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def back(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), back, "log_softmax")


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    norm = np.maximum(np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True)), eps)
    y = a.data / norm

    def back(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result(y, (a,), back, "l2_normalize")


# backward pass ------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Propagate d(loss)/d(node) to every leaf that requires a gradient.

    Sets ``.grad`` on those leaves and returns the gradients of named leaves.
    """
    if loss.shape != ():
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[str, np.ndarray] = {}
    if not loss.requires_grad:
        return leaves
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            if node.name is not None:
                leaves[node.name] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return leaves


# parameters -----------------------------------------------------------------------

GROUPS = ("visual", "textual", "cross_modal")


class ParamStore:
    """Named float64 arrays, each tagged with a group and a trainable flag."""

    def __init__(self) -> None:
        self.values: dict[str, np.ndarray] = {}
        self.groups: dict[str, str] = {}
        self.trainable: dict[str, bool] = {}

    def add(self, name: str, value, group: str, trainable: bool = True) -> None:
        if name in self.values:
            raise ContractError(f"parameter {name!r} already exists")
        if group not in GROUPS:
            raise ParameterError(f"unknown parameter group {group!r}")
        self.values[name] = np.array(value, dtype=np.float64)
        self.groups[name] = group
        self.trainable[name] = bool(trainable)

    def remove(self, name: str) -> None:
        del self.values[name], self.groups[name], self.trainable[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: object) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def names(self, group: str | None = None, trainable_only: bool = False) -> list[str]:
        return [
            n
            for n in self.values
            if (group is None or self.groups[n] == group) and (not trainable_only or self.trainable[n])
        ]

    def count(self, trainable_only: bool = False) -> int:
        return int(np.sum([self.values[n].size for n in self.names(trainable_only=trainable_only)]))

    def set_trainable(self, names: Iterable[str], flag: bool) -> None:
        for n in names:
            self.trainable[n] = bool(flag)

    def leaves(self, all_grad: bool = False) -> dict[str, Tensor]:
        """Fresh leaf tensors over the current values (values are shared, not copied)."""
        return {
            n: Tensor(v, requires_grad=all_grad or self.trainable[n], name=n)
            for n, v in self.values.items()
        }

    def copy(self) -> ParamStore:
        out = ParamStore()
        out.values = {n: v.copy() for n, v in self.values.items()}
        out.groups = dict(self.groups)
        out.trainable = dict(self.trainable)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self.values.items()}


def sgd_step(
    params: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    weight_decay: float = 0.0,
    anchor: Mapping[str, np.ndarray] | None = None,
) -> ParamStore:
    """In-place ``θ ← θ − lr·(g + weight_decay·(θ − θ_ref))`` over trainable parameters.

    ``θ_ref`` is ``anchor[name]`` when given, otherwise zero.  Gradients for
    frozen parameters are ignored.
    """
    if lr < 0:
        raise ParameterError(f"lr must be non-negative, got {lr}")
    if weight_decay < 0:
        raise ParameterError(f"weight_decay must be non-negative, got {weight_decay}")
    trainable = params.names(trainable_only=True)
    missing = [n for n in trainable if n not in grads]
    if missing:
        raise ContractError(f"sgd_step: no gradient for trainable parameter(s) {missing}")
    for name in trainable:
        step = grads[name]
        if weight_decay:
            theta = params.values[name]
            ref = anchor[name] if anchor is not None and name in anchor else 0.0
            step = step + weight_decay * (theta - ref)
        params.values[name] = params.values[name] - lr * step
    return params


def check_gradient(
    fn: Callable[[dict[str, Tensor]], Tensor],
    params: ParamStore,
    step: float = 1e-5,
    names: Sequence[str] | None = None,
    max_coords: int | None = None,
    seed: int = 0,
    per_name: bool = False,
):
    """Worst ``|analytic − numeric| / max(1, |numeric|)`` over parameter coordinates.

    ``numeric`` is a central finite difference with the given step.  When
    ``max_coords`` is set, at most that many coordinates per parameter are
    probed (chosen with ``seed``).  With ``per_name`` the per-parameter worst
    errors are returned as a dict instead.
    """
    if step <= 0:
        raise ParameterError(f"step must be positive, got {step}")
    names = list(params.names() if names is None else names)
    leaves = params.leaves(all_grad=True)
    out = fn(leaves)
    if not np.isfinite(out.data).all():
        raise NumericError("check_gradient: function output is not finite")
    backward(out)
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for name in names:
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(params.values[name])
        value = params.values[name]
        coords = np.arange(value.size)
        if max_coords is not None and value.size > max_coords:
            coords = np.sort(rng.choice(value.size, size=max_coords, replace=False))
        err = 0.0
        for i in coords:
            original = value.flat[i]
            value.flat[i] = original + step
            hi = fn(params.leaves()).data
            value.flat[i] = original - step
            lo = fn(params.leaves()).data
            value.flat[i] = original
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"check_gradient: non-finite output perturbing {name}[{i}]")
            numeric = float(hi - lo) / (2.0 * step)
            err = max(err, builtins.abs(analytic.flat[i] - numeric) / max(1.0, builtins.abs(numeric)))
        worst[name] = err
    if per_name:
        return worst
    return max(worst.values(), default=0.0)

