"""Small reverse-mode automatic differentiation engine over dense float64 arrays.

Graphs are built lazily: constructing a node only records the op and its
inputs. :func:`forward` evaluates a root in topological order, caching every
intermediate value, and :func:`backward` walks the same order in reverse.

Axis convention: 2-D values are ``(batch, features)``. ``mean``/``sum`` with
``axis=0`` reduce over the batch, ``axis=None`` reduces everything to a
0-d scalar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node",
    "ShapeError",
    "NonFiniteError",
    "input_node",
    "parameter",
    "constant",
    "affine",
    "elu",
    "sigmoid",
    "concat",
    "add",
    "scale",
    "matmul",
    "mul",
    "mean",
    "sum_",
    "abs_",
    "square",
    "log",
    "dot",
    "clip",
    "standardize",
    "sinkhorn_cost",
    "forward",
    "backward",
    "grad_check",
    "GradCheckResult",
]


class ShapeError(ValueError):
    """Raised when a node receives inputs of incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces NaN or Inf."""


class Node:
    __slots__ = ("op", "inputs", "attrs", "value", "grad", "name")

    def __init__(self, op: str, inputs: Sequence["Node"] = (), attrs=None, value=None, name=None):
        self.op = op
        self.inputs = tuple(inputs)
        self.attrs = attrs or {}
        self.value = value
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return None if self.value is None else self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} shape={self.shape}>"

    # operator sugar used by the loss code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def input_node(value, name=None) -> Node:
    """A leaf holding data. Receives a gradient but is not trained."""
    return Node("input", value=None if value is None else _as_array(value), name=name)


def constant(value, name=None) -> Node:
    return input_node(value, name=name)


def parameter(value: np.ndarray, name=None) -> Node:
    """A trainable leaf. ``value`` is shared, not copied, so in-place updates
    of the array are visible to the next forward pass."""
    if not isinstance(value, np.ndarray) or value.dtype != np.float64:
        value = _as_array(value)
    return Node("parameter", value=value, name=name)


def affine(x: Node, w: Node, b: Node) -> Node:
    return Node("affine", (x, w, b))


def elu(x: Node) -> Node:
    return Node("elu", (x,))


def sigmoid(x: Node) -> Node:
    return Node("sigmoid", (x,))


def concat(nodes: Sequence[Node], axis: int = 1) -> Node:
    return Node("concat", tuple(nodes), {"axis": axis})


def add(a: Node, b: Node) -> Node:
    return Node("add", (a, b))


def scale(x: Node, c: float) -> Node:
    return Node("scale", (x,), {"c": float(c)})


def matmul(a: Node, b: Node) -> Node:
    return Node("matmul", (a, b))


def mul(a: Node, b: Node) -> Node:
    """Elementwise product of equal-shaped nodes."""
    return Node("elementwise-product", (a, b))


def mean(x: Node, axis=None) -> Node:
    return Node("reduce-mean", (x,), {"axis": axis})


def sum_(x: Node, axis=None) -> Node:
    return Node("reduce-sum", (x,), {"axis": axis})


def abs_(x: Node) -> Node:
    return Node("abs", (x,))


def square(x: Node) -> Node:
    return Node("square", (x,))


def log(x: Node) -> Node:
    return Node("log", (x,))


def dot(a: Node, b: Node) -> Node:
    """Inner product of two 1-D nodes, giving a scalar."""
    return Node("dot", (a, b))


def clip(x: Node, lo: float, hi: float) -> Node:
    """Clamp to ``[lo, hi]``; gradient is zero where the clamp is active."""
    return Node("clip", (x,), {"lo": float(lo), "hi": float(hi)})


def standardize(x: Node, eps: float = 1e-8) -> Node:
    """Column-wise z-score over the batch axis of a 2-D node."""
    return Node("standardize", (x,), {"eps": float(eps)})


def sinkhorn_cost(a: Node, b: Node, epsilon: float, iterations: int) -> Node:
    """Entropic optimal-transport cost between the rows of ``a`` and ``b``.

    Uniform marginals, squared Euclidean ground cost, ``iterations``
    alternating Sinkhorn updates. The scaling iteration runs on the kernel
    while ``max(C) / epsilon`` is small enough to avoid underflow and in
    the log domain otherwise (or when ``attrs["log_domain"]`` is set). The
    plan is the same either way. The returned scalar is the
    transport cost ``sum(P * C)`` of the final plan, and its gradient is
    propagated exactly through every unrolled iteration.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    return Node("sinkhorn", (a, b), {"epsilon": float(epsilon), "iterations": int(iterations)})


# ---------------------------------------------------------------------------
# forward rules


def _check(node: Node, cond: bool, msg: str):
    if not cond:
        raise ShapeError(f"{node.op} node{' ' + repr(node.name) if node.name else ''}: {msg}")


def _fw_affine(node, x, w, b):
    _check(node, x.ndim == 2 and w.ndim == 2 and b.ndim == 1, "expects x (n,k), W (k,m), b (m,)")
    _check(node, x.shape[1] == w.shape[0] and w.shape[1] == b.shape[0],
           f"x {x.shape} @ W {w.shape} + b {b.shape}")
    return x @ w + b


def _fw_elu(node, x):
    return np.maximum(x, 0.0) + np.expm1(np.minimum(x, 0.0))


def _fw_sigmoid(node, x):
    # stable on both tails
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _fw_concat(node, *xs):
    axis = node.attrs["axis"]
    ref = xs[0].shape
    for v in xs[1:]:
        _check(node, v.ndim == len(ref) and all(
            s == r for i, (s, r) in enumerate(zip(v.shape, ref)) if i != axis % len(ref)),
            f"cannot concatenate shapes {[u.shape for u in xs]} on axis {axis}")
    return np.concatenate(xs, axis=axis)


def _fw_add(node, a, b):
    _check(node, a.shape == b.shape, f"{a.shape} + {b.shape}")
    return a + b


def _fw_scale(node, x):
    return node.attrs["c"] * x


def _fw_matmul(node, a, b):
    _check(node, a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0], f"{a.shape} @ {b.shape}")
    return a @ b


def _fw_mul(node, a, b):
    _check(node, a.shape == b.shape, f"{a.shape} * {b.shape}")
    return a * b


def _fw_mean(node, x):
    return np.asarray(x.mean(axis=node.attrs["axis"]))


def _fw_sum(node, x):
    return np.asarray(x.sum(axis=node.attrs["axis"]))


def _fw_dot(node, a, b):
    _check(node, a.ndim == 1 and a.shape == b.shape, f"dot of {a.shape} and {b.shape}")
    return np.asarray(a @ b)


def _fw_clip(node, x):
    return np.clip(x, node.attrs["lo"], node.attrs["hi"])


def _fw_standardize(node, x):
    _check(node, x.ndim == 2, "expects a 2-D input")
    mu = x.mean(axis=0)
    sd = np.sqrt(x.var(axis=0) + node.attrs["eps"])
    node.attrs["_cache"] = (x - mu) / sd, sd
    return node.attrs["_cache"][0]


def _logsumexp(z, axis):
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _softmax(z, axis):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    e /= e.sum(axis=axis, keepdims=True)
    return e


# above this ratio exp(-C/eps) may underflow, so the log-domain path is used
_KERNEL_LIMIT = 300.0


def _fw_sinkhorn(node, a, b):
    _check(node, a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[1],
           f"point sets {a.shape} and {b.shape}")
    _check(node, a.shape[0] > 0 and b.shape[0] > 0, "empty point set")
    eps, iters = node.attrs["epsilon"], node.attrs["iterations"]
    n, m = a.shape[0], b.shape[0]
    cost = (np.square(a).sum(1)[:, None] + np.square(b).sum(1)[None, :] - 2.0 * a @ b.T)
    np.maximum(cost, 0.0, out=cost)
    if cost.max() / eps <= _KERNEL_LIMIT and not node.attrs.get("log_domain"):
        kernel = np.exp(-cost / eps)
        v = np.ones(m)
        us, vs, kvs, kus = [], [v], [], []
        for _ in range(iters):
            kv = kernel @ v
            u = (1.0 / n) / kv
            ku = kernel.T @ u
            v = (1.0 / m) / ku
            us.append(u), kvs.append(kv), kus.append(ku), vs.append(v)
        plan = u[:, None] * kernel * v[None, :]
        node.attrs["_cache"] = ("kernel", cost, kernel, us, vs, kvs, kus, plan)
    else:
        log_a, log_b = -math.log(n), -math.log(m)
        g = np.zeros(m)
        rows, cols = [], []
        for _ in range(iters):
            zr = (g[None, :] - cost) / eps
            f = eps * log_a - eps * _logsumexp(zr, axis=1)
            zq = (f[:, None] - cost) / eps
            g = eps * log_b - eps * _logsumexp(zq, axis=0)
            rows.append(_softmax(zr, axis=1))
            cols.append(_softmax(zq, axis=0))
        plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
        node.attrs["_cache"] = ("log", cost, rows, cols, plan)
    return np.asarray((plan * cost).sum())


_FORWARD: dict[str, Callable] = {
    "affine": _fw_affine,
    "elu": _fw_elu,
    "sigmoid": _fw_sigmoid,
    "concat": _fw_concat,
    "add": _fw_add,
    "scale": _fw_scale,
    "matmul": _fw_matmul,
    "elementwise-product": _fw_mul,
    "reduce-mean": _fw_mean,
    "reduce-sum": _fw_sum,
    "abs": lambda node, x: np.abs(x),
    "square": lambda node, x: x * x,
    "log": lambda node, x: np.log(x),
    "dot": _fw_dot,
    "clip": _fw_clip,
    "standardize": _fw_standardize,
    "sinkhorn": _fw_sinkhorn,
}


# ---------------------------------------------------------------------------
# vector-Jacobian products; each returns one gradient per input


def _bw_affine(node, g, x, w, b):
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _bw_elu(node, g, x):
    slope = np.minimum(node.value, 0.0)
    slope += 1.0
    return (g * slope,)


def _bw_sigmoid(node, g, x):
    s = node.value
    return (g * s * (1.0 - s),)


def _bw_concat(node, g, *xs):
    axis = node.attrs["axis"]
    cuts = np.cumsum([v.shape[axis] for v in xs])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _bw_mean(node, g, x):
    axis = node.attrs["axis"]
    count = x.size if axis is None else x.shape[axis]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / count, x.shape),)


def _bw_sum(node, g, x):
    axis = node.attrs["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape),)


def _bw_clip(node, g, x):
    inside = (x >= node.attrs["lo"]) & (x <= node.attrs["hi"])
    return (np.where(inside, g, 0.0),)


def _bw_standardize(node, g, x):
    z, sd = node.attrs["_cache"]
    gz = g / sd
    return (gz - gz.mean(axis=0) - z * (gz * z).mean(axis=0),)


def _bw_sinkhorn(node, g, a, b):
    eps = node.attrs["epsilon"]
    cache = node.attrs["_cache"]
    cost, plan = cache[1], cache[-1]
    if cache[0] == "kernel":
        grad_cost = _sinkhorn_kernel_vjp(eps, *cache[1:])
    else:
        grad_cost = _sinkhorn_log_vjp(eps, cost, cache[2], cache[3], plan)
    grad_cost *= float(g)
    row = grad_cost.sum(axis=1)
    col = grad_cost.sum(axis=0)
    ga = 2.0 * (row[:, None] * a - grad_cost @ b)
    gb = 2.0 * (col[:, None] * b - grad_cost.T @ a)
    return ga, gb


def _sinkhorn_kernel_vjp(eps, cost, kernel, us, vs, kvs, kus, plan):
    # L = sum_ij u_i K_ij v_j C_ij with u = a / (K v), v = b / (K^T u)
    u, v = us[-1], vs[-1]
    kc = kernel * cost
    grad_u = kc @ v
    grad_v = kc.T @ u
    grad_kernel = u[:, None] * cost * v[None, :]
    grad_cost = plan.copy()
    for k in range(len(us) - 1, -1, -1):
        # v_k = b / ku_k, ku_k = K^T u_k
        d_ku = -grad_v * vs[k + 1] / kus[k]
        grad_u = grad_u + kernel @ d_ku
        grad_kernel += us[k][:, None] * d_ku[None, :]
        # u_k = a / kv_k, kv_k = K v_{k-1}
        d_kv = -grad_u * us[k] / kvs[k]
        grad_v = kernel.T @ d_kv
        grad_kernel += d_kv[:, None] * vs[k][None, :]
        grad_u = 0.0
    grad_cost -= grad_kernel * kernel / eps
    return grad_cost


def _sinkhorn_log_vjp(eps, cost, rows, cols, plan):
    s = plan * cost / eps
    grad_cost = plan - s
    grad_f_plan = s.sum(axis=1)
    grad_g = s.sum(axis=0)
    for r, q in zip(reversed(rows), reversed(cols)):
        # g_j = eps*log b_j - eps*LSE_i((f_i - C_ij)/eps)
        grad_f = grad_f_plan - q @ grad_g
        grad_f_plan = 0.0
        grad_cost += q * grad_g[None, :]
        # f_i = eps*log a_i - eps*LSE_j((g_j - C_ij)/eps)
        grad_g = -(r.T @ grad_f)
        grad_cost += r * grad_f[:, None]
    return grad_cost


_BACKWARD: dict[str, Callable] = {
    "affine": _bw_affine,
    "elu": _bw_elu,
    "sigmoid": _bw_sigmoid,
    "concat": _bw_concat,
    "add": lambda node, g, a, b: (g, g),
    "scale": lambda node, g, x: (None if node.attrs["c"] == 0.0 else node.attrs["c"] * g,),
    "matmul": lambda node, g, a, b: (g @ b.T, a.T @ g),
    "elementwise-product": lambda node, g, a, b: (g * b, g * a),
    "reduce-mean": _bw_mean,
    "reduce-sum": _bw_sum,
    "abs": lambda node, g, x: (g * np.sign(x),),
    "square": lambda node, g, x: (2.0 * g * x,),
    "log": lambda node, g, x: (g / x,),
    "dot": lambda node, g, a, b: (g * b, g * a),
    "clip": _bw_clip,
    "standardize": _bw_standardize,
    "sinkhorn": _bw_sinkhorn,
}


def _toposort(root: Node) -> list[Node]:
    # node inputs are fixed at construction, so the order can be cached
    cached = root.attrs.get("_topo")
    if cached is not None:
        return cached
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.inputs):
            if id(parent) not in seen:
                stack.append((parent, False))
    root.attrs["_topo"] = order
    return order


def _evaluate(nodes: Sequence[Node]):
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for node in nodes:
            if node.op in ("input", "parameter"):
                if node.value is None:
                    raise ShapeError(f"{node.op} node {node.name!r} has no value")
                continue
            node.value = value = _FORWARD[node.op](node, *(p.value for p in node.inputs))
            # a finite sum implies finite entries; only an overflowing sum needs the full test
            if not math.isfinite(value.sum()) and not np.isfinite(value).all():
                raise NonFiniteError(f"non-finite value produced by {node.op} node"
                                     f"{' ' + repr(node.name) if node.name else ''}")


def forward(root: Node) -> np.ndarray:
    """Evaluate ``root``, caching the value of every node it depends on."""
    _evaluate(_toposort(root))
    return root.value


def backward(root: Node, params: Sequence[Node] | None = None) -> dict[Node, np.ndarray]:
    """Accumulate d(root)/d(node) into ``node.grad`` for every ancestor.

    ``root`` must be scalar and already evaluated. Returns a map from each
    parameter to its gradient; parameters listed in ``params`` that are not
    reachable from ``root`` map to zeros.
    """
    if root.value is None:
        raise ValueError("run forward() before backward()")
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or not node.inputs:
            continue
        grads = _BACKWARD[node.op](node, node.grad, *(p.value for p in node.inputs))
        for parent, g in zip(node.inputs, grads):
            if g is None:
                # zero-weighted branch: nothing flows upstream
                continue
            g = np.reshape(g, parent.value.shape)
            parent.grad = g.copy() if parent.grad is None else parent.grad + g
    result = {}
    for node in order:
        if node.op == "parameter":
            result[node] = node.grad if node.grad is not None else np.zeros_like(node.value)
    for p in params or ():
        if p not in result:
            p.grad = np.zeros_like(p.value)
            result[p] = p.grad
    return result


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple[int, int] | None
    nonfinite: tuple[int, int] | None = None

    @property
    def ok(self) -> bool:
        return self.nonfinite is None


def grad_check(loss_builder: Callable[[list[Node]], Node], params: Sequence[np.ndarray],
               step: float = 3e-4, order: int = 4) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``loss_builder`` receives parameter nodes wrapping ``params`` and returns
    a scalar loss node. It is called once; after each perturbation only the
    nodes downstream of the perturbed parameter are re-evaluated. ``order`` selects the central stencil: 2 uses
    ``f(x +- h)``, 4 adds ``f(x +- 2h)`` for fourth-order accuracy, which
    leaves room for a larger step and less rounding noise. The relative
    error per entry is ``|a - n| / max(|a| + |n|, floor)`` where
    ``floor = sqrt(machine eps) * max|a|`` over all entries. Without the
    floor an exactly zero gradient compares rounding noise against rounding
    noise and reports an error near 1. The maximum is returned together with
    the ``(parameter index, flat entry index)`` where it occurs. A non-finite
    loss during probing yields ``max_rel_error = inf`` and sets ``nonfinite``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    arrays = [np.array(p, dtype=np.float64) for p in params]
    nodes = [parameter(a, name=f"p{i}") for i, a in enumerate(arrays)]
    loss = loss_builder(nodes)
    forward(loss)
    grads = backward(loss, nodes)
    analytic = [grads[n].copy() for n in nodes]
    scale = max((float(np.abs(a).max()) for a in analytic if a.size), default=0.0)
    floor = max(math.sqrt(np.finfo(np.float64).eps) * scale, 1e-300)

    topo = _toposort(loss)

    def downstream(param):
        dirty, sub = {id(param)}, []
        for node in topo:
            if any(id(p) in dirty for p in node.inputs):
                dirty.add(id(node))
                sub.append(node)
        return sub

    def evaluate(sub):
        try:
            _evaluate(sub)
            return float(loss.value)
        except (NonFiniteError, FloatingPointError):
            return math.nan

    offsets = (1.0, -1.0) if order == 2 else (1.0, -1.0, 2.0, -2.0)
    worst, worst_err = None, 0.0
    for i, arr in enumerate(arrays):
        flat, sub = arr.reshape(-1), downstream(nodes[i])
        for j in range(flat.size):
            orig = flat[j]
            vals = []
            for k in offsets:
                flat[j] = orig + k * step
                vals.append(evaluate(sub))
            flat[j] = orig
            if not all(math.isfinite(v) for v in vals):
                return GradCheckResult(math.inf, (i, j), nonfinite=(i, j))
            if order == 2:
                numeric = (vals[0] - vals[1]) / (2.0 * step)
            else:
                numeric = (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * step)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
            if err > worst_err or worst is None:
                worst_err, worst = err, (i, j)
        # restore the cached values the probes left behind
        evaluate(sub)
    return GradCheckResult(worst_err, worst)
