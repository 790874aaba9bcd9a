"""Reverse-mode automatic differentiation on dense numpy tensors.

A :class:`Tensor` wraps a float64 ``numpy`` array together with links to the
tensors it was computed from and a VJP (vector-Jacobian product) closure.
Evaluating an expression therefore records the computation graph implicitly;
:func:`backward` replays it in reverse topological order.

The VJP closures are themselves written in terms of the primitives below, so a
backward pass executed with ``create_graph=True`` produces gradients that are
again differentiable.  That is what lets an outer optimisation differentiate
through the inner-loop gradient steps of the encoder (second-order mode).

All data is float64.  Shapes are validated eagerly so mismatches surface at
the offending operation, not three matmuls later.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import CheckInvalidError, NumericError, ShapeError

Array = np.ndarray

_grad_enabled: bool = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (ops produce constants)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A node in the computation graph, holding a float64 array."""

    __slots__ = ("data", "parents", "vjp", "op")

    def __init__(self, data, parents=(), vjp=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        if _grad_enabled:
            self.parents: tuple[Tensor, ...] = tuple(parents)
            self.vjp: Callable[[Tensor, int], "Tensor"] | None = vjp
        else:
            self.parents = ()
            self.vjp = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # Operator sugar.  Scalars are lifted to constant tensors.
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    """Cut the graph: same values, no parents."""
    return Tensor(x.data, op="detach")


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
#
# Each op stores ``vjp(g, i) -> Tensor``: the cotangent for parent ``i`` given
# the output cotangent ``g``.  Per-parent form lets the backward pass skip
# parents that cannot reach the differentiation targets.
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return Tensor(
        a.data + b.data,
        parents=(a, b),
        vjp=lambda g, i: _unbroadcast(g, (a if i == 0 else b).shape),
        op="add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return Tensor(
        a.data - b.data,
        parents=(a, b),
        vjp=lambda g, i: _unbroadcast(g, a.shape) if i == 0 else _unbroadcast(neg(g), b.shape),
        op="sub",
    )


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, parents=(a,), vjp=lambda g, i: neg(g), op="neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return Tensor(
        a.data * b.data,
        parents=(a, b),
        vjp=lambda g, i: _unbroadcast(mul(g, b if i == 0 else a), (a if i == 0 else b).shape),
        op="mul",
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")

    def _vjp(g: Tensor, i: int) -> Tensor:
        if i == 0:
            return _unbroadcast(div(g, b), a.shape)
        return _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)

    return Tensor(a.data / b.data, parents=(a, b), vjp=_vjp, op="div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return Tensor(
        a.data @ b.data,
        parents=(a, b),
        vjp=lambda g, i: matmul(g, transpose(b)) if i == 0 else matmul(transpose(a), g),
        op="matmul",
    )


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), parents=(a,), op="exp")
    out.vjp = lambda g, i: mul(g, out)
    return out


def sin(a: Tensor) -> Tensor:
    return Tensor(np.sin(a.data), parents=(a,), vjp=lambda g, i: mul(g, cos(a)), op="sin")


def cos(a: Tensor) -> Tensor:
    return Tensor(np.cos(a.data), parents=(a,), vjp=lambda g, i: neg(mul(g, sin(a))), op="cos")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def _vjp(g: Tensor, i: int) -> Tensor:
        if axis is None:
            return broadcast_to(reshape(g, (1,) * a.ndim), a.shape)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            kept = list(g.shape)
            for ax in sorted(ax % a.ndim for ax in axes):
                kept.insert(ax, 1)
            g = reshape(g, tuple(kept))
        return broadcast_to(g, a.shape)

    return Tensor(np.sum(a.data, axis=axis, keepdims=keepdims), parents=(a,), vjp=_vjp, op="sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / count))


def squared_norm(a: Tensor) -> Tensor:
    """Sum of squared entries (scalar)."""
    return tsum(mul(a, a))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from exc
    return Tensor(data, parents=(a,), vjp=lambda g, i: _unbroadcast(g, a.shape), op="broadcast")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return Tensor(
        a.data.reshape(shape),
        parents=(a,),
        vjp=lambda g, i: reshape(g, a.shape),
        op="reshape",
    )


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor(
        np.transpose(a.data, axes),
        parents=(a,),
        vjp=lambda g, i: transpose(g, inverse),
        op="transpose",
    )


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def _vjp(g: Tensor, i: int) -> Tensor:
        return slice_axis(g, axis, int(offsets[i]), int(offsets[i + 1]))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), parents=parts, vjp=_vjp, op="concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    return Tensor(
        a.data[index],
        parents=(a,),
        vjp=lambda g, i: pad_axis(g, axis, start, a.shape[axis] - stop),
        op="slice",
    )


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    return Tensor(
        np.pad(a.data, widths),
        parents=(a,),
        vjp=lambda g, i: slice_axis(g, axis, before, before + a.shape[axis]),
        op="pad",
    )


def gather(a: Tensor, indices: Array, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    return Tensor(
        np.take(a.data, indices, axis=axis),
        parents=(a,),
        vjp=lambda g, i: scatter_add(g, indices, a.shape[axis], axis),
        op="gather",
    )


def scatter_add(values: Tensor, indices: Array, length: int, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    shape = list(values.shape)
    shape[axis] = length
    out = np.zeros(shape, dtype=np.float64)
    moved = np.moveaxis(out, axis, 0)
    np.add.at(moved, indices, np.moveaxis(values.data, axis, 0))
    return Tensor(out, parents=(values,), vjp=lambda g, i: gather(g, indices, axis), op="scatter_add")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilised softmax along ``axis``.

    The per-row max is subtracted as a constant; softmax is shift-invariant so
    both the values and all derivative orders are unaffected.
    """
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, tsum(e, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph=True`` the returned gradients are graph nodes that can
    be differentiated again; otherwise they are constants.  Nodes from which
    no ``wrt`` tensor is reachable are skipped; this is exact, since their
    adjoints cannot contribute to the requested gradients.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    topo = _toposort(output)
    wrt_ids = {id(w) for w in wrt}
    relevant: set[int] = set()
    for node in topo:  # parents precede consumers in topo order
        if id(node) in wrt_ids or any(id(p) in relevant for p in node.parents):
            relevant.add(id(node))
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}

    def _run() -> None:
        for node in reversed(topo):
            if id(node) not in relevant:
                continue
            g = grads.get(id(node))
            if g is None or node.vjp is None:
                continue
            for i, parent in enumerate(node.parents):
                if id(parent) not in relevant:
                    continue
                pg = node.vjp(g, i)
                held = grads.get(id(parent))
                grads[id(parent)] = pg if held is None else add(held, pg)

    if create_graph:
        _run()
    else:
        with no_grad():
            _run()

    out: list[Tensor] = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros_like(w.data)))
    return out


def assert_graph_finite(root: Tensor) -> None:
    """Walk the graph below ``root`` and flag the first non-finite node."""
    for index, node in enumerate(_toposort(root)):
        if not np.all(np.isfinite(node.data)):
            raise NumericError(f"non-finite values in node #{index} (op={node.op!r}, shape={node.shape})")


# ---------------------------------------------------------------------------
# Gradient evaluation and finite-difference checking
# ---------------------------------------------------------------------------

def evaluate_with_gradients(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Array],
) -> tuple[float, dict[str, Array]]:
    """Evaluate a scalar computation and its gradients w.r.t. named parameters."""
    leaves = {name: Tensor(np.asarray(value, dtype=np.float64)) for name, value in params.items()}
    out = f(leaves)
    if not isinstance(out, Tensor):
        raise ShapeError("computation must return a Tensor")
    if out.data.size != 1:
        raise ShapeError(f"computation must be scalar-valued, got shape {out.shape}")
    assert_graph_finite(out)
    names = list(leaves)
    grads = backward(out, [leaves[n] for n in names])
    return float(out.data), {n: g.data for n, g in zip(names, grads)}


@dataclass
class FdReport:
    """Outcome of a central finite-difference gradient check."""

    passed: bool
    tol: float
    step: float
    max_rel_err: float
    per_param: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        lines = [f"finite-difference check: {'PASS' if self.passed else 'FAIL'} "
                 f"(h={self.step:g}, tol={self.tol:g}, max rel err={self.max_rel_err:.3e})"]
        for name, err in sorted(self.per_param.items()):
            lines.append(f"  {name:<24s} {err:.3e}")
        return "\n".join(lines)


def finite_difference_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Array],
    h: float = 1e-5,
    tol: float = 1e-4,
    exhaustive_limit: int = 512,
    n_directions: int = 8,
    rng: np.random.Generator | None = None,
) -> FdReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    Parameters with at most ``exhaustive_limit`` entries are perturbed one
    coordinate at a time; larger ones are probed along ``n_directions`` random
    unit directions.  The relative error for a pair (analytic, numeric) uses
    ``max(|analytic|, |numeric|, 1e-6)`` as denominator.
    """
    if h <= 0:
        raise CheckInvalidError("finite-difference step h must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    base = {name: np.asarray(value, dtype=np.float64).copy() for name, value in params.items()}

    # Evaluated with recording on: f may run inner backward passes itself.
    def scalar(values: Mapping[str, Array]) -> float:
        out = f({name: Tensor(v) for name, v in values.items()})
        return float(out.data)

    v0 = scalar(base)
    if scalar(base) != v0:
        raise CheckInvalidError("target function is not deterministic under fixed inputs")

    _, grads = evaluate_with_gradients(f, base)

    def rel_err(analytic: float, numeric: float) -> float:
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)

    per_param: dict[str, float] = {}
    for name, value in base.items():
        worst = 0.0
        flat = value.reshape(-1)
        grad_flat = grads[name].reshape(-1)
        if flat.size <= exhaustive_limit:
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                plus = scalar(base)
                flat[i] = orig - h
                minus = scalar(base)
                flat[i] = orig
                worst = max(worst, rel_err(float(grad_flat[i]), (plus - minus) / (2 * h)))
        else:
            for _ in range(n_directions):
                u = rng.standard_normal(flat.size)
                u /= np.linalg.norm(u)
                saved = flat.copy()
                flat[:] = saved + h * u
                plus = scalar(base)
                flat[:] = saved - h * u
                minus = scalar(base)
                flat[:] = saved
                worst = max(worst, rel_err(float(grad_flat @ u), (plus - minus) / (2 * h)))
        per_param[name] = worst

    max_err = max(per_param.values()) if per_param else 0.0
    return FdReport(passed=max_err <= tol, tol=tol, step=h, max_rel_err=max_err, per_param=per_param)
