"""Dense 2-D arrays with reverse-mode differentiation.

Each operation stores its inputs and the name of its backward rule on the
array it returns. :func:`backward` walks that recorded graph in reverse
topological order and looks every rule up in :data:`BACKWARD_RULES`, which
keeps rules swappable (the gradient checker uses this for negative controls).

All arithmetic is float64. Vectors are 2-D as well: a length-s sequence is
an ``s x 1`` column, a length-d embedding a ``1 x d`` row.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, UsageError

COSINE_EPS = 1e-12


class DiffArray:
    """A float64 matrix plus its accumulated gradient."""

    __slots__ = ("values", "grad", "requires_grad", "op", "parents", "ctx")
    __array_priority__ = 1000  # keep ndarray <op> DiffArray on our side

    def __init__(self, values, requires_grad=False):
        v = np.array(values, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeError(f"DiffArray must be at most 2-D, got shape {v.shape}")
        self.values = v
        self.grad = np.zeros_like(v)
        self.requires_grad = bool(requires_grad)
        self.op = None
        self.parents = ()
        self.ctx = None

    @classmethod
    def _from_op(cls, values, op, parents, ctx=None):
        out = cls.__new__(cls)
        out.values = values
        out.grad = np.zeros_like(values)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.op = op
            out.parents = tuple(parents)
            out.ctx = ctx
        else:
            out.op = None
            out.parents = ()
            out.ctx = None
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def item(self):
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1x1 array, got {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self):
        self.grad.fill(0.0)

    def detach(self):
        return DiffArray(self.values)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray({self.values!r}{flag})"

    # operator sugar
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    @property
    def T(self):
        return transpose(self)


def as_diff(x):
    return x if isinstance(x, DiffArray) else DiffArray(x)


def constant(values):
    return DiffArray(values, requires_grad=False)


def parameter(values):
    return DiffArray(values, requires_grad=True)


BACKWARD_RULES = {}


def _rule(name):
    def register(fn):
        BACKWARD_RULES[name] = fn
        return fn

    return register


def _topo_order(root):
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(x) into ``x.grad`` for every reachable array.

    Repeated calls accumulate; zero the gradients between steps.
    """
    if root.values.shape != (1, 1):
        raise UsageError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    upstream = {id(root): np.ones((1, 1))}
    for node in reversed(_topo_order(root)):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node.op is None:
            continue
        grads = BACKWARD_RULES[node.op](node, g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg


# ---------------------------------------------------------------------------
# elementwise arithmetic with 2-D broadcasting


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def add(a, b):
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b)
    return DiffArray._from_op(a.values + b.values, "add", (a, b))


@_rule("add")
def _add_backward(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b):
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b)
    return DiffArray._from_op(a.values - b.values, "sub", (a, b))


@_rule("sub")
def _sub_backward(node, g):
    a, b = node.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b):
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b)
    return DiffArray._from_op(a.values * b.values, "mul", (a, b))


@_rule("mul")
def _mul_backward(node, g):
    a, b = node.parents
    return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)


def div(a, b):
    a, b = as_diff(a), as_diff(b)
    _broadcast_shape(a, b)
    return DiffArray._from_op(a.values / b.values, "div", (a, b))


@_rule("div")
def _div_backward(node, g):
    a, b = node.parents
    ga = _unbroadcast(g / b.values, a.shape)
    gb = _unbroadcast(-g * a.values / (b.values * b.values), b.shape)
    return ga, gb


def power(x, exponent):
    """``x ** exponent`` for a constant real exponent.

    Where the base is exactly zero and the exponent is below one the gradient
    is taken as zero rather than infinite.
    """
    x = as_diff(x)
    e = float(exponent)
    return DiffArray._from_op(np.power(x.values, e), "power", (x,), e)


@_rule("power")
def _power_backward(node, g):
    (x,) = node.parents
    e = node.ctx
    if e == 0.0:
        return (np.zeros_like(x.values),)
    if e == 1.0:
        return (g,)
    base = x.values
    with np.errstate(divide="ignore", invalid="ignore"):
        d = e * np.power(base, e - 1.0)
    d = np.where((base == 0.0) & (e < 1.0), 0.0, d)
    return (g * d,)


def log(x):
    x = as_diff(x)
    return DiffArray._from_op(np.log(x.values), "log", (x,))


@_rule("log")
def _log_backward(node, g):
    (x,) = node.parents
    return (g / x.values,)


def abs_(x):
    x = as_diff(x)
    return DiffArray._from_op(np.abs(x.values), "abs", (x,))


@_rule("abs")
def _abs_backward(node, g):
    (x,) = node.parents
    return (g * np.sign(x.values),)


def clamp(x, lo=None, hi=None):
    """Clip to ``[lo, hi]``; gradient passes only where the input was inside."""
    x = as_diff(x)
    v = x.values
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (v >= lo_) & (v <= hi_)
    return DiffArray._from_op(np.clip(v, lo_, hi_), "clamp", (x,), inside)


@_rule("clamp")
def _clamp_backward(node, g):
    return (g * node.ctx,)


def sigmoid(x):
    x = as_diff(x)
    v = x.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return DiffArray._from_op(out, "sigmoid", (x,))


@_rule("sigmoid")
def _sigmoid_backward(node, g):
    s = node.values
    return (g * s * (1.0 - s),)


def leaky_relu(x, slope=0.2):
    x = as_diff(x)
    v = x.values
    return DiffArray._from_op(np.where(v >= 0, v, slope * v), "leaky_relu", (x,), slope)


@_rule("leaky_relu")
def _leaky_relu_backward(node, g):
    (x,) = node.parents
    return (g * np.where(x.values >= 0, 1.0, node.ctx),)


# ---------------------------------------------------------------------------
# structural ops


def matmul(a, b):
    a, b = as_diff(a), as_diff(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return DiffArray._from_op(a.values @ b.values, "matmul", (a, b))


@_rule("matmul")
def _matmul_backward(node, g):
    a, b = node.parents
    ga = g @ b.values.T if a.requires_grad else None
    gb = a.values.T @ g if b.requires_grad else None
    return ga, gb


def transpose(x):
    x = as_diff(x)
    return DiffArray._from_op(x.values.T.copy(), "transpose", (x,))


@_rule("transpose")
def _transpose_backward(node, g):
    return (g.T,)


def sum_(x, axis=None):
    """Sum everything (1x1 result) or along one axis, keeping two dimensions."""
    x = as_diff(x)
    if axis is None:
        out = np.array([[x.values.sum()]])
    else:
        out = x.values.sum(axis=axis, keepdims=True)
    return DiffArray._from_op(out, "sum", (x,), axis)


@_rule("sum")
def _sum_backward(node, g):
    (x,) = node.parents
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(x, axis=None):
    x = as_diff(x)
    n = x.values.size if axis is None else x.values.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def take_rows(x, index):
    x = as_diff(x)
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    return DiffArray._from_op(x.values[idx], "take_rows", (x,), idx)


@_rule("take_rows")
def _take_rows_backward(node, g):
    (x,) = node.parents
    out = np.zeros_like(x.values)
    np.add.at(out, node.ctx, g)
    return (out,)


def concat(arrays, axis=0):
    arrays = [as_diff(a) for a in arrays]
    try:
        vals = np.concatenate([a.values for a in arrays], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    sizes = [a.values.shape[axis] for a in arrays]
    return DiffArray._from_op(vals, "concat", tuple(arrays), (axis, sizes))


@_rule("concat")
def _concat_backward(node, g):
    axis, sizes = node.ctx
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def row_max(x):
    """Per-row maximum as a column; ties go to the lowest column index."""
    x = as_diff(x)
    arg = np.argmax(x.values, axis=1)
    rows = np.arange(x.rows)
    return DiffArray._from_op(x.values[rows, arg][:, None], "row_max", (x,), arg)


@_rule("row_max")
def _row_max_backward(node, g):
    (x,) = node.parents
    out = np.zeros_like(x.values)
    out[np.arange(x.rows), node.ctx] = g[:, 0]
    return (out,)


def topk_indices(values, k):
    """Indices of the k largest entries of each column (ties: lowest index)."""
    order = np.argsort(-values, axis=0, kind="stable")
    return order[:k]


def topk_mean(x, k):
    """Mean of the ``k`` largest entries of each column.

    A ``1 x n`` row is treated as a single length-n vector, so any vector
    yields a ``1 x 1`` result and an ``s x C`` matrix yields ``1 x C``.
    """
    x = as_diff(x)
    row_vector = x.rows == 1 and x.cols > 1
    v = x.values.T if row_vector else x.values
    s = v.shape[0]
    k = int(k)
    if not 1 <= k <= s:
        raise ConfigError(f"top-k needs 1 <= k <= {s}, got k={k}")
    idx = topk_indices(v, k)
    cols = np.arange(v.shape[1])
    out = v[idx, cols].mean(axis=0, keepdims=True)
    return DiffArray._from_op(out, "topk_mean", (x,), (idx, k, row_vector))


@_rule("topk_mean")
def _topk_mean_backward(node, g):
    (x,) = node.parents
    idx, k, row_vector = node.ctx
    shape = x.values.T.shape if row_vector else x.values.shape
    out = np.zeros(shape)
    cols = np.arange(shape[1])
    out[idx, cols] += g[0] / k
    return (out.T if row_vector else out,)


def cosine(a, b):
    """Cosine similarity of two equally shaped arrays, as a 1x1 array.

    If either norm is below ``COSINE_EPS`` the result is 0 with zero gradient.
    """
    a, b = as_diff(a), as_diff(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine needs equal shapes, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na < COSINE_EPS or nb < COSINE_EPS:
        return DiffArray._from_op(np.zeros((1, 1)), "cosine", (a, b), None)
    c = float(np.sum(a.values * b.values)) / (na * nb)
    return DiffArray._from_op(np.array([[c]]), "cosine", (a, b), (na, nb, c))


@_rule("cosine")
def _cosine_backward(node, g):
    a, b = node.parents
    if node.ctx is None:
        return np.zeros_like(a.values), np.zeros_like(b.values)
    na, nb, c = node.ctx
    s = g[0, 0]
    ga = s * (b.values / (na * nb) - c * a.values / (na * na))
    gb = s * (a.values / (na * nb) - c * b.values / (nb * nb))
    return ga, gb


def conv1d_temporal(x, kernel, bias, kernel_size, dilation=1):
    """Same-padded 1-D convolution along the rows (time axis).

    ``kernel`` stacks one ``c_in x c_out`` block per tap; tap ``j`` reads the
    input at offset ``(j - (kernel_size - 1) // 2) * dilation``.
    """
    x, kernel, bias = as_diff(x), as_diff(kernel), as_diff(bias)
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"kernel_size must be odd and positive, got {kernel_size}")
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    s, c_in = x.shape
    if s < 1:
        raise ShapeError("temporal convolution needs at least one timestep")
    if kernel.rows != kernel_size * c_in:
        raise ShapeError(
            f"kernel has {kernel.rows} rows, expected kernel_size*c_in = {kernel_size * c_in}"
        )
    if bias.shape != (1, kernel.cols):
        raise ShapeError(f"bias shape {bias.shape} does not match 1x{kernel.cols}")
    cols = _im2col(x.values, kernel_size, dilation)
    out = cols @ kernel.values + bias.values
    return DiffArray._from_op(out, "conv1d", (x, kernel, bias), (cols, kernel_size, dilation))


def _tap_offsets(kernel_size, dilation):
    half = (kernel_size - 1) // 2
    return [(j - half) * dilation for j in range(kernel_size)]


def _im2col(v, kernel_size, dilation):
    s, c = v.shape
    cols = np.zeros((s, kernel_size * c))
    for j, off in enumerate(_tap_offsets(kernel_size, dilation)):
        lo, hi = max(0, -off), min(s, s - off)
        if lo < hi:
            cols[lo:hi, j * c:(j + 1) * c] = v[lo + off:hi + off]
    return cols


@_rule("conv1d")
def _conv1d_backward(node, g):
    x, kernel, bias = node.parents
    cols, kernel_size, dilation = node.ctx
    gk = cols.T @ g if kernel.requires_grad else None
    gb = g.sum(axis=0, keepdims=True) if bias.requires_grad else None
    gx = None
    if x.requires_grad:
        s, c = x.shape
        gcols = g @ kernel.values.T
        gx = np.zeros((s, c))
        for j, off in enumerate(_tap_offsets(kernel_size, dilation)):
            lo, hi = max(0, -off), min(s, s - off)
            if lo < hi:
                gx[lo + off:hi + off] += gcols[lo:hi, j * c:(j + 1) * c]
    return gx, gk, gb


# ---------------------------------------------------------------------------
# small-matrix SVD


@dataclass(frozen=True)
class SvdResult:
    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray
    numerical_rank: int

    @property
    def condition_number(self):
        r = self.numerical_rank
        if r == 0:
            return math.inf
        return float(self.singular_values[0] / self.singular_values[r - 1])


JACOBI_TOL = 1e-12
_MAX_SWEEPS = 80


def svd_small(u, rank_tol=1e-9):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns singular values in descending order with column-orthonormal
    left/right factors of width ``min(m, n)``.
    """
    a = np.array(u, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"svd_small needs a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("svd_small: matrix has non-finite entries")
    m, n = a.shape
    if m < n:
        r = svd_small(a.T, rank_tol)
        return SvdResult(r.singular_values, r.right_vectors, r.left_vectors, r.numerical_rank)

    # Work on a max-abs normalized copy so tiny or huge entries cannot
    # underflow/overflow the rotation formulas.
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    work = a / scale if scale > 0.0 else a.copy()
    v = np.eye(n)
    for _ in range(_MAX_SWEEPS):
        worst = 0.0
        for i in range(n - 1):
            for j in range(i + 1, n):
                ci, cj = work[:, i], work[:, j]
                alpha = ci @ ci
                beta = cj @ cj
                gamma = ci @ cj
                if alpha == 0.0 or beta == 0.0 or gamma == 0.0:
                    continue
                rel = abs(gamma) / (math.sqrt(alpha) * math.sqrt(beta))
                if rel <= 1e-15:
                    continue
                worst = max(worst, rel)
                zeta = (beta - alpha) / (2.0 * gamma)
                if abs(zeta) > 1e150:
                    t = 0.5 / zeta  # limit of the formula below
                else:
                    t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * ci - s * cj
                work[:, j] = s * ci + c * cj
                work[:, i] = new_i
                vi = v[:, i].copy()
                v[:, i] = c * vi - s * v[:, j]
                v[:, j] = s * vi + c * v[:, j]
        if worst <= JACOBI_TOL:
            break

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    left = np.zeros((m, n))
    floor = max(m, n) * np.finfo(float).eps * (sigma[0] if n else 0.0)
    missing = []
    for i in range(n):
        if sigma[i] > floor and sigma[i] > 0.0:
            left[:, i] = work[:, i] / sigma[i]
        else:
            missing.append(i)
    if scale > 0.0:
        sigma = sigma * scale
    filled = [i for i in range(n) if i not in missing]
    for i in missing:
        left[:, i] = _orthogonal_complement_vector(left, filled)
        filled.append(i)
    rank = int(np.sum(sigma > rank_tol * sigma[0])) if n and sigma[0] > 0 else 0
    return SvdResult(sigma, left, v, rank)


def _orthogonal_complement_vector(basis, used):
    m = basis.shape[0]
    q = basis[:, used]
    best, best_norm = None, -1.0
    for k in range(m):
        e = np.zeros(m)
        e[k] = 1.0
        for _ in range(2):
            e = e - q @ (q.T @ e)
        nrm = np.linalg.norm(e)
        if nrm > best_norm:
            best, best_norm = e, nrm
    return best / best_norm


def abs_det(u):
    """``|det(u)|`` for a square matrix (the DMI quantity)."""
    a = np.asarray(u, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"abs_det needs a square matrix, got shape {a.shape}")
    return float(abs(np.linalg.det(a)))


DEGENERATE_GAP = 1e-9


def log_condition_number(u, rank_tol=1e-9):
    """``log(sigma_1 / sigma_r)`` over the nonzero singular values of ``u``."""
    u = as_diff(u)
    res = svd_small(u.values, rank_tol)
    r = res.numerical_rank
    if r == 0:
        raise NumericError("log_condition_number: matrix is zero")
    s1, sr = res.singular_values[0], res.singular_values[r - 1]
    out = np.array([[math.log(s1 / sr)]])
    return DiffArray._from_op(out, "log_cond", (u,), res)


@_rule("log_cond")
def _log_cond_backward(node, g):
    res = node.ctx
    r = res.numerical_rank
    s = res.singular_values
    if s[0] - s[r - 1] < DEGENERATE_GAP * s[0]:
        return (np.zeros_like(node.parents[0].values),)
    u1, v1 = res.left_vectors[:, 0], res.right_vectors[:, 0]
    ur, vr = res.left_vectors[:, r - 1], res.right_vectors[:, r - 1]
    d = np.outer(u1, v1) / s[0] - np.outer(ur, vr) / s[r - 1]
    return (g[0, 0] * d,)
