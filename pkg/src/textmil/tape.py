"""Dense numeric kernels with hand-derived VJPs on a reverse-mode tape.

The op set is closed on purpose: every primitive used by the slide
classifier lives here with its backward rule next to it, so the whole
reverse pass can be audited function by function. Values are either
python floats (scalars) or float64 numpy arrays (vectors / matrices).

Ops are module-level functions. Arguments may be plain arrays/floats
(constants) or `Node`s created via `Tape.param`. An op records itself
on the tape only when at least one argument is a Node; a call on plain
values is just numpy and costs nothing at backward time. That rule is
what keeps frozen weights structurally outside the gradient: they are
never wrapped in a Node, so no backward rule ever touches them.

Summations that matter for permutation tests (`mean`, `weighted_sum`)
run left-to-right over the stored order, so reordering inputs changes
results only through float rounding.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

# Conventional stabilizers, fixed package-wide (see module docs).
EPS_LN = 1e-5    # layernorm variance stabilizer
EPS_NORM = 1e-8  # minimum norm for cosine / l2_normalize
REL_GUARD = 1e-12  # denominator guard for relative errors

Value = "float | np.ndarray"


class DegenerateVectorError(ValueError):
    """Vector norm below EPS_NORM where a direction is required."""


class Node:
    """A recorded value plus pulls that route a cotangent to its parents."""

    __slots__ = ("tape", "value", "index", "pulls")

    def __init__(self, tape: "Tape", value, pulls: tuple):
        self.tape = tape
        self.value = value
        self.index = len(tape._nodes)
        self.pulls = pulls
        tape._nodes.append(self)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Node(#{self.index}, value={self.value!r})"


class Gradients:
    """Backward results, indexable by the Node the gradient belongs to."""

    def __init__(self, grads: list):
        self._grads = grads

    def __getitem__(self, node: Node):
        g = self._grads[node.index]
        if g is None:
            if isinstance(node.value, np.ndarray):
                return np.zeros_like(node.value)
            return 0.0
        return g


class Tape:
    """Ordered record of primitive ops for one reverse pass."""

    def __init__(self):
        self._nodes: list[Node] = []

    def param(self, value) -> Node:
        """Wrap a trainable array (copied) as a leaf node."""
        arr = np.array(value, dtype=np.float64)
        return Node(self, arr, ())

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, root: Node) -> Gradients:
        """Reverse sweep from `root` (a scalar node) through every record once."""
        if not isinstance(root, Node) or root.tape is not self:
            raise ValueError("backward root must be a Node on this tape")
        grads: list = [None] * len(self._nodes)
        grads[root.index] = 1.0
        for node in reversed(self._nodes):
            g = grads[node.index]
            if g is None:
                continue
            for parent, pull in node.pulls:
                contrib = pull(g)
                if grads[parent.index] is None:
                    grads[parent.index] = contrib
                else:
                    grads[parent.index] = grads[parent.index] + contrib
        return Gradients(grads)


def value(x):
    """Underlying float/array of a Node, or the argument itself."""
    return x.value if isinstance(x, Node) else x


def _tape_of(*args) -> Tape | None:
    t = None
    for a in args:
        if isinstance(a, Node):
            if t is None:
                t = a.tape
            elif a.tape is not t:
                raise ValueError("cannot mix nodes from different tapes")
    return t


def record(out_value, pulls: Sequence[tuple[Node, Callable]]):
    """Record a custom primitive. `pulls` maps the output cotangent to each
    Node parent; constants simply do not appear. Returns the plain value when
    there is nothing to record."""
    pulls = tuple(p for p in pulls if isinstance(p[0], Node))
    if not pulls:
        return out_value
    tape = _tape_of(*(n for n, _ in pulls))
    return Node(tape, out_value, pulls)


# ---------------------------------------------------------------------------
# shape checks


def _check_vector(x, name: str):
    if not (isinstance(x, np.ndarray) and x.ndim == 1 and x.size > 0):
        raise ValueError(f"{name} must be a nonempty 1-d array, got {getattr(x, 'shape', type(x))}")


def _check_matrix(x, name: str):
    if not (isinstance(x, np.ndarray) and x.ndim == 2):
        raise ValueError(f"{name} must be a 2-d array, got {getattr(x, 'shape', type(x))}")


def _same_shape(a, b):
    av, bv = value(a), value(b)
    sa = av.shape if isinstance(av, np.ndarray) else ()
    sb = bv.shape if isinstance(bv, np.ndarray) else ()
    if sa != sb:
        raise ValueError(f"shape mismatch: {sa} vs {sb}")


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    _same_shape(a, b)
    out = value(a) + value(b)
    return record(out, [(a, lambda g: g), (b, lambda g: g)])


def scale(a, k: float):
    """Multiply by a python-float constant."""
    k = float(k)
    out = value(a) * k
    return record(out, [(a, lambda g: g * k)])


def hadamard(a, b):
    _same_shape(a, b)
    av, bv = value(a), value(b)
    return record(av * bv, [(a, lambda g: g * bv), (b, lambda g: g * av)])


def tanh(a):
    y = np.tanh(value(a))
    return record(y, [(a, lambda g: g * (1.0 - y * y))])


def sigmoid(a):
    av = value(a)
    y = 1.0 / (1.0 + np.exp(-av))
    return record(y, [(a, lambda g: g * y * (1.0 - y))])


def matmul(a, b):
    av, bv = value(a), value(b)
    _check_matrix(av, "A")
    _check_matrix(bv, "B")
    if av.shape[1] != bv.shape[0]:
        raise ValueError(f"inner dimensions disagree: {av.shape} x {bv.shape}")
    return record(av @ bv, [(a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)])


def matvec(a, x):
    av, xv = value(a), value(x)
    _check_matrix(av, "A")
    _check_vector(xv, "x")
    if av.shape[1] != xv.shape[0]:
        raise ValueError(f"inner dimensions disagree: {av.shape} x {xv.shape}")
    return record(av @ xv, [(a, lambda g: np.outer(g, xv)), (x, lambda g: av.T @ g)])


def dot(u, v):
    uv, vv = value(u), value(v)
    _check_vector(uv, "u")
    _check_vector(vv, "v")
    _same_shape(u, v)
    out = float(uv @ vv)
    return record(out, [(u, lambda g: g * vv), (v, lambda g: g * uv)])


def stack(items: Sequence):
    """Assemble scalars into a vector."""
    vals = np.array([value(s) for s in items], dtype=np.float64)
    pulls = [(s, (lambda i: lambda g: float(g[i]))(i)) for i, s in enumerate(items)]
    return record(vals, pulls)


def pick(v, i: int):
    vv = value(v)
    _check_vector(vv, "v")
    if not 0 <= i < vv.shape[0]:
        raise ValueError(f"index {i} out of range for vector of length {vv.shape[0]}")
    out = float(vv[i])

    def pull(g):
        c = np.zeros_like(vv)
        c[i] = g
        return c

    return record(out, [(v, pull)])


def log(s):
    sv = value(s)
    if sv <= 0:
        raise NumericError(f"log of non-positive value {sv}")
    return record(float(np.log(sv)), [(s, lambda g: g / sv)])


def softmax(x):
    """Stable softmax over a nonempty vector of logits."""
    xv = value(x)
    _check_vector(xv, "logits")
    e = np.exp(xv - xv.max())
    y = e / e.sum()
    return record(y, [(x, lambda g: y * (g - float(g @ y)))])


def mean(vectors: Sequence):
    """Mean of equal-length vectors, summed left-to-right."""
    if len(vectors) == 0:
        raise ValueError("mean of empty sequence")
    acc = np.array(value(vectors[0]), dtype=np.float64, copy=True)
    for v in vectors[1:]:
        _same_shape(vectors[0], v)
        acc = acc + value(v)
    k = 1.0 / len(vectors)
    out = acc * k
    return record(out, [(v, lambda g: g * k) for v in vectors])


def weighted_sum(weights, vectors: Sequence):
    """Sum_j weights[j] * vectors[j], left-to-right over the stored order."""
    wv = value(weights)
    _check_vector(wv, "weights")
    if len(vectors) != wv.shape[0]:
        raise ValueError(f"{len(vectors)} vectors for {wv.shape[0]} weights")
    hs = [value(v) for v in vectors]
    acc = wv[0] * hs[0]
    for j in range(1, len(hs)):
        acc = acc + wv[j] * hs[j]
    pulls = [(weights, lambda g: np.array([float(g @ h) for h in hs]))]
    pulls += [(v, (lambda j: lambda g: wv[j] * g)(j)) for j, v in enumerate(vectors)]
    return record(acc, pulls)


def cosine(u, v):
    """Cosine similarity; both arguments must have norm >= EPS_NORM."""
    uv, vv = value(u), value(v)
    _check_vector(uv, "u")
    _check_vector(vv, "v")
    _same_shape(u, v)
    nu = float(np.linalg.norm(uv))
    nv = float(np.linalg.norm(vv))
    if nu < EPS_NORM or nv < EPS_NORM:
        raise DegenerateVectorError(f"cosine of near-zero vector (norms {nu:g}, {nv:g})")
    c = float(uv @ vv) / (nu * nv)

    def pull_u(g):
        return g * (vv / (nu * nv) - c * uv / (nu * nu))

    def pull_v(g):
        return g * (uv / (nu * nv) - c * vv / (nv * nv))

    return record(c, [(u, pull_u), (v, pull_v)])


def l2_normalize(u):
    uv = value(u)
    _check_vector(uv, "u")
    n = float(np.linalg.norm(uv))
    if n < EPS_NORM:
        raise DegenerateVectorError(f"cannot normalize vector with norm {n:g}")
    y = uv / n
    return record(y, [(u, lambda g: (g - float(g @ y) * y) / n)])


def layernorm(x, gain, bias):
    """Zero-mean/unit-variance normalization with affine gain and bias."""
    xv, gv, bv = value(x), value(gain), value(bias)
    _check_vector(xv, "x")
    if xv.shape[0] < 2:
        raise ValueError("layernorm needs dim >= 2")
    _same_shape(x, gain)
    _same_shape(x, bias)
    mu = xv.mean()
    xc = xv - mu
    inv = 1.0 / np.sqrt(float((xc * xc).mean()) + EPS_LN)
    xhat = xc * inv
    out = gv * xhat + bv

    def pull_x(g):
        dxhat = g * gv
        return inv * (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean())

    return record(out, [(x, pull_x), (gain, lambda g: g * xhat), (bias, lambda g: g)])


# ---------------------------------------------------------------------------
# finite-difference oracle


def central_difference(f: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    params = np.asarray(params, dtype=np.float64)
    fd = np.zeros_like(params)
    for i in range(params.size):
        step = np.zeros_like(params)
        step[i] = h
        fp = f(params + step)
        fm = f(params - step)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation while differentiating coordinate {i}")
        fd[i] = (fp - fm) / (2.0 * h)
    return fd


def grad_check(f: Callable[[np.ndarray], float], params: np.ndarray, grad: np.ndarray, h: float = 1e-6) -> float:
    """Max relative error between `grad` and central differences of `f`.

    Relative error per coordinate is |g_fd - g| / (|g_fd| + |g| + 1e-12).
    """
    grad = np.asarray(grad, dtype=np.float64)
    fd = central_difference(f, params, h)
    err = np.abs(fd - grad) / (np.abs(fd) + np.abs(grad) + REL_GUARD)
    return float(err.max())
