"""Reverse-mode gradient engine over float64 numpy arrays.

Operations build a graph of :class:`Variable` nodes; :func:`backward` walks
the recorded graph once in reverse topological order and accumulates adjoints
into ``Variable.grad``. Every op validates that its output is finite and
raises :class:`NumericError` naming the op otherwise, so NaN/Inf never
propagates silently.

Any op argument may be a plain ndarray instead of a Variable; it is then
treated as a constant and receives no gradient. The engine is array-level
(one node per tensor op, not per scalar) and supports exactly the operations
the two language-model architectures need.

Hessian-vector products are approximated with central finite differences of
gradients (two gradient evaluations), avoiding a second-order tape.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NumericError
from .params import ParamVector

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_finite(value: np.ndarray, op: str):
    # One reduce pass: the sum is non-finite iff the array holds NaN/Inf
    # (values here are far too small for a spurious overflow).
    if not np.isfinite(value.sum()):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Variable:
    """One node of the recorded computation."""

    __slots__ = ("value", "grad", "parents", "vjp", "op")

    def __init__(self, value, parents=(), vjp=None, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        _check_finite(self.value, op)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Variable(op={self.op}, shape={self.value.shape})"


def _val(x):
    return x.value if isinstance(x, Variable) else np.asarray(x, dtype=np.float64)


def _parents(*args):
    return tuple(a for a in args if isinstance(a, Variable))


def _make(value, op, args, vjp_full):
    """Build a node; vjp_full returns one adjoint per *arg* (None for consts)."""
    parents = _parents(*args)
    if not parents:
        return Variable(value, op=op)

    def vjp(g):
        grads = vjp_full(g)
        return tuple(gr for a, gr in zip(args, grads) if isinstance(a, Variable))

    return Variable(value, parents=parents, vjp=vjp, op=op)


def backward(root: Variable):
    """Accumulate gradients of ``root`` (a scalar) into every reachable node."""
    if root.value.ndim != 0:
        raise ConfigError("backward() expects a scalar root")
    # Iterative post-order DFS; each recorded op is visited exactly once.
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    root.grad = np.asarray(1.0)
    for node in reversed(topo):
        if node.vjp is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad += g


# -- elementwise and arithmetic ------------------------------------------


def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv

    def vjp(g):
        ga = g if av.shape == out.shape else _unbroadcast(g, av.shape)
        gb = g if bv.shape == out.shape else _unbroadcast(g, bv.shape)
        return ga, gb

    return _make(out, "add", (a, b), vjp)


def _unbroadcast(g, shape):
    """Sum g down to `shape` (trailing-dim broadcasting only)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def sub(a, b):
    out = _val(a) - _val(b)
    return _make(out, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise ConfigError(f"mul shape mismatch {av.shape} vs {bv.shape}")
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float):
    c = float(c)
    return _make(_val(a) * c, "scale", (a,), lambda g: (g * c,))


def scalar_mul(s, x):
    """Multiply tensor x by the 0-d Variable s."""
    sv, xv = _val(s), _val(x)
    if sv.ndim != 0:
        raise ConfigError("scalar_mul expects a 0-d scalar")
    out = sv * xv
    return _make(out, "scalar_mul", (s, x), lambda g: (np.sum(g * xv), g * sv))


def square(a):
    av = _val(a)
    return _make(av * av, "square", (a,), lambda g: (2.0 * g * av,))


def vsum(a):
    """Sum of all elements -> 0-d."""
    av = _val(a)
    return _make(av.sum(), "vsum", (a,), lambda g: (np.broadcast_to(g, av.shape),))


def sigmoid(a):
    av = _val(a)
    # exp(-|a|) never overflows; the two branches share it.
    z = np.exp(-np.abs(av))
    out = np.where(av >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(_val(a))
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a):
    """Gaussian error linear unit, exact erf form."""
    av = _val(a)
    cdf = 0.5 * (1.0 + erf(av * _INV_SQRT2))
    out = av * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * av * av) * _INV_SQRT2PI
        return (g * (cdf + av * pdf),)

    return _make(out, "gelu", (a,), vjp)


# -- linear algebra --------------------------------------------------------


def matmul(a, b):
    av, bv = _val(a), _val(b)
    out = np.matmul(av, bv)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(out, "matmul", (a, b), vjp)


def linear(x, w):
    """x @ w for x (..., F) and w (F, O)."""
    xv, wv = _val(x), _val(w)
    out = np.matmul(xv, wv)

    def vjp(g):
        x2 = xv.reshape(-1, xv.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return np.matmul(g, wv.T), np.matmul(x2.T, g2)

    return _make(out, "linear", (x, w), vjp)


def affine(x, w):
    """x @ w[:-1] + w[-1] for x (..., F) and w (F+1, O); the last row is a bias."""
    xv, wv = _val(x), _val(w)
    out = np.matmul(xv, wv[:-1]) + wv[-1]

    def vjp(g):
        x2 = xv.reshape(-1, xv.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        gw = np.empty_like(wv)
        np.matmul(x2.T, g2, out=gw[:-1])
        gw[-1] = g2.sum(axis=0)
        return np.matmul(g, wv[:-1].T), gw

    return _make(out, "affine", (x, w), vjp)


def embedding(table, ids):
    """Row gather; gradients scatter-add so unused rows stay exactly zero."""
    tv = _val(table)
    ids = np.asarray(ids)
    out = tv[ids]

    def vjp(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, "embedding", (table,), vjp)


# -- shape ops -------------------------------------------------------------


def reshape(a, shape):
    av = _val(a)
    return _make(
        av.reshape(shape), "reshape", (a,), lambda g: (g.reshape(av.shape),)
    )


def transpose(a, axes):
    av = _val(a)
    inv = np.argsort(axes)
    return _make(
        np.transpose(av, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),)
    )


def narrow(a, axis, start, length):
    """Slice ``length`` entries from ``start`` along ``axis``."""
    av = _val(a)
    idx = [slice(None)] * av.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        ga = np.zeros_like(av)
        ga[idx] = g
        return (ga,)

    return _make(av[idx], "narrow", (a,), vjp)


def concat(parts, axis):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def vjp_full(g):
        grads = []
        for i in range(len(vals)):
            idx = [slice(None)] * out.ndim
            idx[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(idx)])
        return grads

    parents = _parents(*parts)
    if not parents:
        return Variable(out, op="concat")

    def vjp(g):
        grads = vjp_full(g)
        return tuple(gr for p, gr in zip(parts, grads) if isinstance(p, Variable))

    return Variable(out, parents=parents, vjp=vjp, op="concat")


# -- normalization and losses ----------------------------------------------


def layer_norm(a, eps: float = 1e-5):
    """Normalize the last axis to zero mean / unit variance (no learned affine)."""
    av = _val(a)
    mu = av.mean(axis=-1, keepdims=True)
    var = ((av - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (av - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return ((g - gm - xhat * gx) * inv,)

    return _make(xhat, "layer_norm", (a,), vjp)


def softmax(a):
    """Softmax over the last axis."""
    av = _val(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "softmax", (a,), vjp)


def causal_softmax(a):
    """Softmax over the last axis of (..., S, S) scores with positions > row
    index excluded; excluded entries get probability exactly zero, so the
    output at row t depends only on columns <= t."""
    av = _val(a)
    S = av.shape[-1]
    if av.shape[-2] != S:
        raise ConfigError("causal_softmax expects square trailing axes")
    allow = np.tril(np.ones((S, S), dtype=bool))
    neg = np.where(allow, 0.0, -np.inf)
    shifted = av + neg
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)  # masked entries are exp(-inf) == 0
    out = ex / ex.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make(out, "causal_softmax", (a,), vjp)


def cross_entropy(logits, targets, mask):
    """Mean negative log-likelihood of ``targets`` over ``mask`` positions.

    logits: (..., N); targets/mask: matching leading shape.
    """
    lv = _val(logits)
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ConfigError("cross_entropy: empty mask")
    m = lv.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(lv - m).sum(axis=-1, keepdims=True)) + m
    picked = np.take_along_axis(lv, targets[..., None], axis=-1)
    nll = (lse - picked)[..., 0]
    loss = nll[mask].sum() / count

    def vjp(g):
        probs = np.exp(lv - lse)
        gl = probs
        np.subtract.at(
            gl.reshape(-1, gl.shape[-1]),
            (np.arange(targets.size), targets.ravel()),
            1.0,
        )
        gl *= (mask[..., None] * (float(g) / count))
        return (gl,)

    return _make(loss, "cross_entropy", (logits,), vjp)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    """Plain-numpy stable log-softmax over the last axis (no graph)."""
    m = logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)) + m
    return logits - lse


# -- model protocol drivers --------------------------------------------------
#
# A "model" is anything exposing loss_var(leaves: dict[str, Variable], batch)
# that builds the scalar loss from leaf parameter Variables.


def make_leaves(params: ParamVector) -> dict[str, Variable]:
    return {name: Variable(arr, op="leaf") for name, arr in params.items()}


def forward_backward(model, params: ParamVector, batch):
    """Evaluate loss and its gradient; unused parameters get exactly-zero grads."""
    leaves = make_leaves(params)
    loss = model.loss_var(leaves, batch)
    backward(loss)
    grads = ParamVector(
        params.names,
        {
            name: (
                leaves[name].grad
                if leaves[name].grad is not None
                else np.zeros_like(params.tensors[name])
            )
            for name in params.names
        },
    )
    return float(loss.value), grads


def loss_only(model, params: ParamVector, batch) -> float:
    leaves = make_leaves(params)
    return float(model.loss_var(leaves, batch).value)


def default_hvp_eps(params: ParamVector) -> float:
    return 1e-4 * (1.0 + params.inf_norm())


def hvp(model, params: ParamVector, batch, v: ParamVector, eps: float | None = None):
    """Central-difference Hessian-vector product (grad(p+ev)-grad(p-ev))/(2e)."""
    params.require_same_structure(v, "direction vector")
    if eps is None:
        eps = default_hvp_eps(params)
    if not eps > 0:
        raise ConfigError("hvp eps must be positive")
    _, gp = forward_backward(model, params.add_scaled(v, eps), batch)
    _, gm = forward_backward(model, params.add_scaled(v, -eps), batch)
    return gp.sub(gm).scale(0.5 / eps)
