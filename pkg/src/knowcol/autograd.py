"""Minimal reverse-mode automatic differentiation over numpy arrays.

Everything here operates on float64. A :class:`Var` wraps an ndarray and
remembers how it was produced; calling :func:`backward` on a scalar Var
fills ``.grad`` on every Var it depends on. Plain ndarrays may be mixed
into any op and are treated as constants (they receive no gradient).

The op set is deliberately small: just enough for linear projections,
row normalization, fusion MLPs, cosine-similarity matrices and the
softmax/hinge losses built on top of them. Pairwise similarity matrices
go through ``np.einsum`` with a fixed contraction order so that
sim(A, B) and sim(B, A) are bitwise transposes of each other, which the
symmetric contrastive loss relies on.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Var", "backward"]


class Var:
    __slots__ = ("value", "grad", "operands", "vjp")

    def __init__(self, value, operands=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.operands = operands
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def leaf(value) -> Var:
    """Wrap an array as a trainable leaf."""
    return Var(value)


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _topo(root):
    # Iterative post-order: dependencies come before dependents.
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for op in node.operands:
            if isinstance(op, Var) and id(op) not in visited:
                stack.append((op, False))
    return order


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar ``root`` into every reachable Var."""
    if root.value.shape != ():
        raise ValueError("backward requires a scalar Var")
    order = _topo(root)
    root.grad = np.array(1.0)
    for node in reversed(order):
        if node.vjp is None or node.grad is None:
            continue
        grads = node.vjp(node.grad)
        for op, g in zip(node.operands, grads):
            if not isinstance(op, Var) or g is None:
                continue
            if op.grad is None:
                op.grad = np.zeros_like(op.value)
            op.grad += g


# ---------------------------------------------------------------------------
# Elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    av, bv = _val(a), _val(b)
    return Var(av + bv, (a, b), lambda g: (g, g))


def sub(a, b):
    av, bv = _val(a), _val(b)
    return Var(av - bv, (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = _val(a), _val(b)
    return Var(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float):
    return Var(_val(a) * c, (a,), lambda g: (g * c,))


def add_const(a, c: float):
    return Var(_val(a) + c, (a,), lambda g: (g,))


def relu(a):
    av = _val(a)
    mask = av > 0.0
    return Var(np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def linear(x, w, b=None):
    """Affine map ``x @ w.T + b`` for a batch of row vectors."""
    xv, wv = _val(x), _val(w)
    out = xv @ wv.T
    if b is not None:
        out = out + _val(b)

    def vjp(g):
        return (g @ wv, g.T @ xv, g.sum(axis=0) if b is not None else None)

    return Var(out, (x, w, b), vjp)


def matmul_nt(a, b):
    """``a @ b.T`` via einsum with fixed order (bitwise-transpose symmetric)."""
    av, bv = _val(a), _val(b)
    out = np.einsum("id,jd->ij", av, bv, optimize=False)
    return Var(out, (a, b), lambda g: (g @ bv, g.T @ av))


def normalize_rows(a):
    """Scale each row to unit Euclidean norm; zero rows are an error."""
    av = _val(a)
    n = np.linalg.norm(av, axis=1, keepdims=True)
    if not np.all(n > 0.0):
        raise ValueError("zero-norm row cannot be normalized")
    z = av / n

    def vjp(g):
        return ((g - z * (g * z).sum(axis=1, keepdims=True)) / n,)

    return Var(z, (a,), vjp)


def row_norm(a):
    """Euclidean norm of each row."""
    av = _val(a)
    n = np.linalg.norm(av, axis=1)
    return Var(n, (a,), lambda g: ((g / n)[:, None] * av,))


def rowsum(a):
    av = _val(a)
    k = av.shape[1]
    return Var(av.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], k, axis=1),))


def mul_colvec(a, v):
    """Multiply each row of ``a`` by the matching scalar in ``v``."""
    av, vv = _val(a), _val(v)
    return Var(av * vv[:, None], (a, v),
               lambda g: (g * vv[:, None], (g * av).sum(axis=1)))


def expand_col(v, k: int):
    """Tile a vector into ``k`` identical columns."""
    vv = _val(v)
    return Var(np.repeat(vv[:, None], k, axis=1), (v,), lambda g: (g.sum(axis=1),))


# ---------------------------------------------------------------------------
# Shape / indexing
# ---------------------------------------------------------------------------

def reshape(a, shape):
    av = _val(a)
    return Var(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose_c(a):
    """Contiguous transpose (bitwise-stable reductions on either layout)."""
    av = _val(a)
    return Var(np.ascontiguousarray(av.T), (a,),
               lambda g: (np.ascontiguousarray(g.T),))


def concat_cols(a, b):
    av, bv = _val(a), _val(b)
    na = av.shape[1]
    return Var(np.concatenate([av, bv], axis=1), (a, b),
               lambda g: (g[:, :na], g[:, na:]))


def gather_rows(src, idx):
    """Select rows ``src[idx]``; gradients accumulate back per row."""
    sv = _val(src)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        gs = np.zeros_like(sv)
        np.add.at(gs, idx, g)
        return (gs,)

    return Var(sv[idx], (src,), vjp)


def put_rows(n_rows: int, idx, a):
    """Place rows of ``a`` at positions ``idx`` in a zero matrix."""
    av = _val(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n_rows, av.shape[1]))
    out[idx] = av
    return Var(out, (a,), lambda g: (g[idx],))


def segment_mean(a, seg, n_seg: int):
    """Mean of rows grouped by segment id; every segment must be non-empty."""
    av = _val(a)
    seg = np.asarray(seg, dtype=np.intp)
    counts = np.bincount(seg, minlength=n_seg)
    if not np.all(counts > 0):
        raise ValueError("segment_mean requires every segment to be non-empty")
    sums = np.zeros((n_seg, av.shape[1]))
    np.add.at(sums, seg, av)
    out = sums / counts[:, None]
    return Var(out, (a,), lambda g: (g[seg] / counts[seg][:, None],))


def take_diag(a):
    av = _val(a)
    n = av.shape[0]

    def vjp(g):
        gs = np.zeros_like(av)
        gs[np.arange(n), np.arange(n)] = g
        return (gs,)

    return Var(np.diagonal(av).copy(), (a,), vjp)


def mask_fill(a, keep_mask, fill: float):
    """Keep entries where ``keep_mask`` is True, replace the rest by ``fill``."""
    av = _val(a)
    keep_mask = np.asarray(keep_mask, dtype=bool)
    return Var(np.where(keep_mask, av, fill), (a,), lambda g: (g * keep_mask,))


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def logsumexp_rows(a):
    """Stable log-sum-exp over each row; -inf entries drop out exactly."""
    av = _val(a)
    m = np.max(av, axis=1)
    e = np.exp(av - m[:, None])
    s = e.sum(axis=1)
    out = m + np.log(s)

    def vjp(g):
        return ((e / s[:, None]) * g[:, None],)

    return Var(out, (a,), vjp)


def weighted_sum(a, w):
    """Dot with a constant weight vector."""
    av = _val(a)
    w = np.asarray(w, dtype=np.float64)
    return Var((av * w).sum(), (a,), lambda g: (g * w,))


def mean_all(a):
    av = _val(a)
    n = av.size
    return Var(av.mean(), (a,), lambda g: (np.full_like(av, g / n),))


def sum_all(a):
    av = _val(a)
    return Var(av.sum(), (a,), lambda g: (np.full_like(av, g),))
