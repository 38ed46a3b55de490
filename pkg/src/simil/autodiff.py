"""Reverse-mode automatic differentiation over dense float64 arrays.

A computation is a DAG of `Tensor` nodes built eagerly by the op functions
below.  Each non-leaf node stores its parents and a VJP closure; `backward`
seeds a scalar root with gradient 1.0 and walks the graph once in reverse
topological order, summing gradients where a node fans out to several
consumers.  Graphs are throwaway: the trainer rebuilds one per step and keeps
only the leaf tensors (parameters and inputs) alive across steps.

Broadcasting is restricted to scalar-with-tensor.  Anything shaped (row-vector
bias, per-row/per-column scaling) is its own explicit op so that shape
mistakes fail loudly instead of silently broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class DomainError(ValueError):
    """Operand values lie outside an op's mathematical domain."""


class ContractError(RuntimeError):
    """Engine API misuse (non-scalar root, repeated backward, missing state)."""


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "op", "_parents", "_vjp", "_backward_done")

    def __init__(self, data, *, op="leaf", parents=(), vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        if op == "leaf":
            if arr.ndim:  # ascontiguousarray would promote 0-d to (1,)
                # contiguous so that in-place probes (grad_check) see a view
                arr = np.ascontiguousarray(arr)
            if not np.all(np.isfinite(arr)):
                raise DomainError("leaf tensor contains non-finite values")
        self.data = arr
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._vjp = vjp
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # Operator sugar; scalars mean python numbers, everything else must be a
    # Tensor of identical shape (or a 0-d Tensor).
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_operand(x):
    """Return (tensor_or_None, scalar_or_None) for an op operand."""
    if isinstance(x, Tensor):
        if x.data.ndim == 0:
            return x, None
        return x, None
    if np.ndim(x) == 0:
        return None, float(x)
    raise ShapeError(f"operand must be a Tensor or python scalar, got {type(x).__name__}")


def _is_scalar_tensor(t):
    return isinstance(t, Tensor) and t.data.ndim == 0


def _node(data, parents, vjp, op):
    return Tensor(data, op=op, parents=parents, vjp=vjp)


def _sum_to_scalar(g):
    return np.asarray(np.sum(g))


# ---------------------------------------------------------------------------
# arithmetic


def _binary_shapes(a, b, op):
    if a.data.shape == b.data.shape:
        return
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ "
                     "(only scalar-with-tensor broadcast is allowed)")


def add(a, b):
    ta, sa = _as_operand(a)
    tb, sb = _as_operand(b)
    if ta is None and tb is None:
        raise ShapeError("add: at least one operand must be a Tensor")
    if ta is None:
        return _node(sa + tb.data, (tb,), lambda g: (g,), "add")
    if tb is None:
        return _node(ta.data + sb, (ta,), lambda g: (g,), "add")
    _binary_shapes(ta, tb, "add")

    def vjp(g):
        ga = _sum_to_scalar(g) if ta.data.ndim == 0 and g.ndim > 0 else g
        gb = _sum_to_scalar(g) if tb.data.ndim == 0 and g.ndim > 0 else g
        return ga, gb

    return _node(ta.data + tb.data, (ta, tb), vjp, "add")


def sub(a, b):
    ta, sa = _as_operand(a)
    tb, sb = _as_operand(b)
    if ta is None and tb is None:
        raise ShapeError("sub: at least one operand must be a Tensor")
    if ta is None:
        return _node(sa - tb.data, (tb,), lambda g: (-g,), "sub")
    if tb is None:
        return _node(ta.data - sb, (ta,), lambda g: (g,), "sub")
    _binary_shapes(ta, tb, "sub")

    def vjp(g):
        ga = _sum_to_scalar(g) if ta.data.ndim == 0 and g.ndim > 0 else g
        gb = -(_sum_to_scalar(g) if tb.data.ndim == 0 and g.ndim > 0 else g)
        return ga, gb

    return _node(ta.data - tb.data, (ta, tb), vjp, "sub")


def mul(a, b):
    ta, sa = _as_operand(a)
    tb, sb = _as_operand(b)
    if ta is None and tb is None:
        raise ShapeError("mul: at least one operand must be a Tensor")
    if ta is None:
        return _node(sa * tb.data, (tb,), lambda g: (g * sa,), "mul")
    if tb is None:
        return _node(ta.data * sb, (ta,), lambda g: (g * sb,), "mul")
    _binary_shapes(ta, tb, "mul")
    da, db = ta.data, tb.data

    def vjp(g):
        ga = g * db
        gb = g * da
        if ta.data.ndim == 0 and ga.ndim > 0:
            ga = _sum_to_scalar(ga)
        if tb.data.ndim == 0 and gb.ndim > 0:
            gb = _sum_to_scalar(gb)
        return ga, gb

    return _node(da * db, (ta, tb), vjp, "mul")


def div(a, b):
    ta, sa = _as_operand(a)
    tb, sb = _as_operand(b)
    if ta is None and tb is None:
        raise ShapeError("div: at least one operand must be a Tensor")
    if tb is None:
        return mul(ta, 1.0 / sb)
    if ta is None:
        out = sa / tb.data
        db = tb.data

        def vjp_r(g):
            gb = -g * sa / (db * db)
            if tb.data.ndim == 0 and gb.ndim > 0:
                gb = _sum_to_scalar(gb)
            return (gb,)

        return _node(out, (tb,), vjp_r, "div")
    _binary_shapes(ta, tb, "div")
    da, db = ta.data, tb.data
    out = da / db

    def vjp(g):
        ga = g / db
        gb = -g * da / (db * db)
        if ta.data.ndim == 0 and ga.ndim > 0:
            ga = _sum_to_scalar(ga)
        if tb.data.ndim == 0 and gb.ndim > 0:
            gb = _sum_to_scalar(gb)
        return ga, gb

    return _node(out, (ta, tb), vjp, "div")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise ShapeError("matmul: both operands must be Tensors")
    da, db = a.data, b.data
    if da.ndim == 2 and db.ndim == 2:
        if da.shape[1] != db.shape[0]:
            raise ShapeError(f"matmul: inner dims {da.shape} @ {db.shape}")

        def vjp(g):
            return g @ db.T, da.T @ g

        return _node(da @ db, (a, b), vjp, "matmul")
    if da.ndim == 2 and db.ndim == 1:
        if da.shape[1] != db.shape[0]:
            raise ShapeError(f"matmul: inner dims {da.shape} @ {db.shape}")

        def vjp(g):
            return np.outer(g, db), da.T @ g

        return _node(da @ db, (a, b), vjp, "matmul")
    if da.ndim == 1 and db.ndim == 2:
        if da.shape[0] != db.shape[0]:
            raise ShapeError(f"matmul: inner dims {da.shape} @ {db.shape}")

        def vjp(g):
            return db @ g, np.outer(da, g)

        return _node(da @ db, (a, b), vjp, "matmul")
    if da.ndim == 1 and db.ndim == 1:
        if da.shape[0] != db.shape[0]:
            raise ShapeError(f"matmul: inner dims {da.shape} @ {db.shape}")

        def vjp(g):
            return g * db, g * da

        return _node(np.asarray(da @ db), (a, b), vjp, "matmul")
    raise ShapeError(f"matmul: unsupported ranks {da.ndim} @ {db.ndim}")


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape):
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis=0):
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    datas = [t.data for t in tensors]
    nd = datas[0].ndim
    if any(d.ndim != nd for d in datas):
        raise ShapeError("concat: rank mismatch")
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, tensors, vjp, "concat")


def gather_rows(a, indices):
    if a.data.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows: indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeError("gather_rows: index out of range")
    shape = a.data.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), vjp, "gather_rows")


def gather_cols(a, indices):
    if a.data.ndim != 2:
        raise ShapeError("gather_cols expects a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_cols: indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[1]):
        raise ShapeError("gather_cols: index out of range")
    shape = a.data.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out.T, idx, g.T)
        return (out,)

    return _node(a.data[:, idx], (a,), vjp, "gather_cols")


def add_bias(m, bias):
    """matrix (n, d) + row vector (d,), gradient of bias sums over rows."""
    if m.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError("add_bias expects (matrix, row-vector)")
    if m.data.shape[1] != bias.data.shape[0]:
        raise ShapeError(f"add_bias: {m.data.shape} + {bias.data.shape}")
    return _node(m.data + bias.data[None, :], (m, bias),
                 lambda g: (g, g.sum(axis=0)), "add_bias")


def mul_rowvec(m, v):
    """Scale every row of (n, d) by the vector (d,) elementwise."""
    if m.data.ndim != 2 or v.data.ndim != 1:
        raise ShapeError("mul_rowvec expects (matrix, row-vector)")
    if m.data.shape[1] != v.data.shape[0]:
        raise ShapeError(f"mul_rowvec: {m.data.shape} * {v.data.shape}")
    dm, dv = m.data, v.data

    def vjp(g):
        return g * dv[None, :], (g * dm).sum(axis=0)

    return _node(dm * dv[None, :], (m, v), vjp, "mul_rowvec")


def mul_colvec(m, v):
    """Scale row i of (n, d) by scalar v[i]."""
    if m.data.ndim != 2 or v.data.ndim != 1:
        raise ShapeError("mul_colvec expects (matrix, column-vector)")
    if m.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"mul_colvec: {m.data.shape} * {v.data.shape}")
    dm, dv = m.data, v.data

    def vjp(g):
        return g * dv[:, None], (g * dm).sum(axis=1)

    return _node(dm * dv[:, None], (m, v), vjp, "mul_colvec")


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    d = a.data
    return _node(np.log(d), (a,), lambda g: (g / d,), "log")


def sqrt(a):
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(np.atleast_1d(a.data)).reshape(a.data.shape)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    d = a.data
    return _node(np.maximum(d, 0.0), (a,), lambda g: (g * (d > 0.0),), "relu")


def silu(a):
    """x * sigmoid(x); the smooth unit used inside the mixer blocks."""
    d = np.atleast_1d(a.data)
    s = _sigmoid(d).reshape(a.data.shape)
    d = a.data

    def vjp(g):
        return (g * (s + d * s * (1.0 - s)),)

    return _node(d * s, (a,), vjp, "silu")


def clip(a, lo, hi):
    """Clamp values; gradient passes through wherever lo <= x <= hi."""
    d = a.data
    mask = (d >= lo) & (d <= hi)
    return _node(np.clip(d, lo, hi), (a,), lambda g: (g * mask,), "clip")


def softmax(a, axis=-1):
    d = a.data
    if d.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    shifted = d - d.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), vjp, "softmax")


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None):
    d = a.data
    shape = d.shape
    out = d.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def mean(a, axis=None):
    d = a.data
    shape = d.shape
    count = d.size if axis is None else shape[axis]
    out = d.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)

    return _node(out, (a,), vjp, "mean")


def quantile(a, q):
    """Linear-interpolation quantile of a 1-D tensor (same rule as
    np.percentile's default).  Gradient splits between the two order
    statistics the interpolation touches; piecewise linear in the inputs."""
    if a.data.ndim != 1:
        raise ShapeError("quantile expects a 1-D tensor")
    if not 0.0 <= q <= 1.0:
        raise DomainError("quantile fraction must be in [0, 1]")
    d = a.data
    n = d.shape[0]
    if n == 0:
        raise ShapeError("quantile of an empty tensor")
    order = np.argsort(d, kind="stable")
    pos = q * (n - 1)
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    frac = pos - lo
    out = np.asarray(d[order[lo]] * (1.0 - frac) + d[order[hi]] * frac)
    ilo, ihi = order[lo], order[hi]

    def vjp(g):
        grad = np.zeros(n)
        grad[ilo] += (1.0 - frac) * float(g)
        grad[ihi] += frac * float(g)
        return (grad,)

    return _node(out, (a,), vjp, "quantile")


# ---------------------------------------------------------------------------
# graph plumbing


def stop_grad(a):
    """Detach: forwards the value, blocks the gradient entirely."""
    return _node(a.data.copy(), (a,), lambda g: (np.zeros_like(a.data),), "stop_grad")


def custom(data, parents, vjp, op="custom"):
    """Extension point: a node with a caller-supplied VJP.

    `vjp(upstream)` must return one gradient array per parent (zeros are
    fine for barriers)."""
    for p in parents:
        if not isinstance(p, Tensor):
            raise ShapeError("custom: parents must be Tensors")
    return _node(data, tuple(parents), vjp, op)


_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "transpose": transpose, "reshape": reshape, "concat": concat,
    "gather_rows": gather_rows, "gather_cols": gather_cols,
    "add_bias": add_bias, "mul_rowvec": mul_rowvec, "mul_colvec": mul_colvec,
    "exp": exp, "ln": log, "log": log, "sqrt": sqrt, "tanh": tanh,
    "sigmoid": sigmoid, "relu": relu, "silu": silu, "clip": clip,
    "softmax": softmax, "sum": sum_, "mean": mean, "quantile": quantile,
    "stop_grad": stop_grad, "custom": custom,
}


def apply(op, *args, **kwargs):
    """Dispatch by op-kind name; the functional forms above are the usual API."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ContractError(f"unknown op kind {op!r}") from None
    return fn(*args, **kwargs)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, iter(root._parents))]
    seen.add(id(root))
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(root):
    """Accumulate gradients of a scalar root into every reachable node.

    Returns {leaf_tensor: gradient_array}.  Calling twice on the same root
    without rebuilding the graph is rejected; fan-out gradients sum.
    """
    if not isinstance(root, Tensor):
        raise ContractError("backward root must be a Tensor")
    if root.data.size != 1:
        raise ContractError("backward root must be a scalar")
    if root._backward_done:
        raise ContractError("backward already ran on this root; rebuild the graph")
    root._backward_done = True

    order = _toposort(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        if len(grads) != len(node._parents):
            raise ContractError(f"op {node.op!r} returned {len(grads)} gradients "
                                f"for {len(node._parents)} parents")
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != parent.data.shape:
                raise ShapeError(f"op {node.op!r}: gradient shape {g.shape} != "
                                 f"parent shape {parent.data.shape}")
            if parent.grad is None:
                parent.grad = g.copy()
            else:
                parent.grad = parent.grad + g
    return {n: n.grad for n in order if n.is_leaf and n.grad is not None}


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    n_coords: int
    worst: tuple = ()            # (param index, flat coord, analytic, numeric)
    failures: list = field(default_factory=list)
    note: str = ""

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max_rel_err={self.max_rel_err:.3e} "
                f"over {self.n_coords} coords {self.note}")


def grad_check(f, params, step=1e-5, tol=1e-4, rel_floor=1e-6):
    """Compare analytic gradients of f(params) against central differences.

    `f` must rebuild its graph from the given leaf tensors on every call and
    be deterministic.  A non-finite probe value (discontinuity, domain edge)
    is reported as a failure rather than raised.
    """
    params = list(params)
    zero_grads(params)
    out = f(params)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check target must return a scalar Tensor")
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    zero_grads(params)

    max_rel = 0.0
    worst = ()
    failures = []
    n_coords = 0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for ci in range(flat.size):
            n_coords += 1
            orig = flat[ci]
            try:
                flat[ci] = orig + step
                f_hi = f(params).item()
                flat[ci] = orig - step
                f_lo = f(params).item()
            except DomainError as e:
                failures.append((pi, ci, f"domain edge: {e}"))
                continue
            finally:
                flat[ci] = orig
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                failures.append((pi, ci, "non-finite probe"))
                continue
            num = (f_hi - f_lo) / (2.0 * step)
            ana = analytic[pi].reshape(-1)[ci]
            rel = abs(ana - num) / max(abs(ana), abs(num), rel_floor)
            if rel > max_rel:
                max_rel = rel
                worst = (pi, ci, float(ana), float(num))
    passed = not failures and max_rel <= tol
    note = f"({len(failures)} discontinuous coords)" if failures else ""
    return GradCheckReport(passed=passed, max_rel_err=max_rel, n_coords=n_coords,
                           worst=worst, failures=failures, note=note)
