"""Minimal reverse-mode autodiff over dense float64 arrays.

Every value that participates in a differentiable computation lives on a
``Tape`` as a ``Node``: leaves hold inputs, parameters and constants, and
every operator application appends exactly one node whose parents have
strictly smaller ids, so the tape is topologically ordered by construction.
A single reverse sweep from a scalar root then yields gradients with
respect to any set of leaves.

The operator set is deliberately small: elementwise arithmetic, a strict
2-d matmul, a handful of nonlinearities and losses, an affine combination
of same-shaped tensors, and a 2-d rotation. There is no broadcasting
beyond scalar-times-tensor; callers reshape explicitly (``reshape`` is an
operator so gradients flow through it). All values are float64.

Instrumentation: the tape keeps two counters, readable via ``stats()``.

* ``node_count`` counts operator applications (leaves excluded) -- a proxy
  for computation-graph size.
* ``stored_bytes`` counts the value payload (8 bytes per element) of
  operator results that must be retained for a reverse sweep, i.e. nodes
  with a differentiable ancestor. Results with no gradient path are
  transient in a real engine and are not charged; leaves (inputs and
  parameters) are not activations and are not charged either. Per-node
  metadata is not charged.

Tapes are single-threaded; distinct tapes may be used concurrently.
Gradients are only ever returned as plain arrays -- there is no operator
that consumes a gradient, so nothing built on this module can silently
become second-order.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class ShapeMismatch(ValueError):
    """An operator was applied to inputs violating its shape contract."""


class NonScalarRoot(ValueError):
    """Reverse sweep requested from a non-scalar node."""


def _as_value(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr


class Node:
    """One tape entry: an operator result or a leaf value."""

    __slots__ = ("idx", "op", "parents", "value", "requires_grad", "vjps", "meta")

    def __init__(self, idx, op, parents, value, requires_grad, vjps, meta=None):
        self.idx = idx
        self.op = op
        self.parents = parents          # tuple of parent node ids
        self.value = value              # np.ndarray, float64
        self.requires_grad = requires_grad
        self.vjps = vjps                # tuple of (parent_id, fn(upstream) -> grad)
        self.meta = meta or {}          # op-specific details (flags, targets, ...)


class Var:
    """Lightweight handle addressing a node on a tape.

    Supports numpy-flavoured arithmetic (``+``, ``-``, ``*``, ``@``,
    ``float * var``) plus ``.sum()``, ``.mean()`` and ``.reshape()`` so
    experiment code reads naturally.
    """

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self) -> tuple:
        return self.tape.nodes[self.idx].value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.idx].requires_grad

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scalar_mul(other, self)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum(self)

    def mean(self):
        return mean(self)

    def reshape(self, new_shape):
        return reshape(self, new_shape)

    def __repr__(self):
        node = self.tape.nodes[self.idx]
        return f"Var(idx={self.idx}, op={node.op!r}, shape={node.value.shape})"


@dataclass
class TapeStats:
    node_count: int
    stored_bytes: int


@dataclass
class PassMeter:
    """Counts semantic forward/backward passes for cost reporting."""

    forward_passes: int = 0
    backward_passes: int = 0

    def add_forward(self, n=1):
        self.forward_passes += n

    def add_backward(self, n=1):
        self.backward_passes += n


_METER_STACK: list[PassMeter] = []


@contextmanager
def measure_passes():
    """Context manager yielding a PassMeter that records passes within."""
    meter = PassMeter()
    _METER_STACK.append(meter)
    try:
        yield meter
    finally:
        _METER_STACK.remove(meter)


def count_forward(n=1):
    for meter in _METER_STACK:
        meter.add_forward(n)


def _count_backward():
    for meter in _METER_STACK:
        meter.add_backward()


class Tape:
    """Append-only record of one scope of computation.

    A tape never shrinks; scope reset between optimizer steps is done by
    constructing a fresh tape, which keeps the graph-size counters honest
    for a single step.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._node_count = 0
        self._stored_bytes = 0

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        """Place an input/parameter value on the tape as a leaf."""
        arr = _as_value(value)
        node = Node(len(self.nodes), "leaf", (), arr, requires_grad, ())
        self.nodes.append(node)
        return Var(self, node.idx)

    def constant(self, value) -> Var:
        """Place a non-differentiable constant on the tape."""
        return self.leaf(value, requires_grad=False)

    def stats(self) -> TapeStats:
        """Current (node_count, stored_bytes) counters; pure read."""
        return TapeStats(self._node_count, self._stored_bytes)

    def ancestors(self, idx: int) -> set[int]:
        """Ids of all nodes reachable from ``idx`` through parent links."""
        seen = set()
        stack = [idx]
        while stack:
            i = stack.pop()
            if i in seen:
                continue
            seen.add(i)
            stack.extend(self.nodes[i].parents)
        return seen

    def dump(self) -> str:
        """Line-per-node debug format: ``id op parent-ids shape``."""
        lines = []
        for node in self.nodes:
            parents = ",".join(str(p) for p in node.parents) or "-"
            shape = "x".join(str(s) for s in node.value.shape) or "scalar"
            lines.append(f"{node.idx} {node.op} {parents} {shape}")
        return "\n".join(lines)


# --- operator shape contracts ------------------------------------------------
#
# Each checker maps input shapes (+ per-op metadata) to the required output
# shape, raising ShapeMismatch with the operator named. `record` re-validates
# the value it is handed against this contract, so the registry doubles as
# the definitive list of recordable operators.

def _same_shape(op):
    def check(shapes, meta):
        a, b = shapes
        if a != b:
            raise ShapeMismatch(f"{op}: operands must share a shape, got {a} and {b}")
        return a
    return check


def _check_scalar_mul(shapes, meta):
    if len(shapes) == 2:        # scalar operand is a Var
        s, t = shapes
        if s != ():
            raise ShapeMismatch(f"scalar_mul: scalar operand must have shape (), got {s}")
        return t
    return shapes[0]


def _check_matmul(shapes, meta):
    a, b = shapes
    if len(a) != 2 or len(b) != 2:
        raise ShapeMismatch(f"matmul: operands must be 2-d, got {a} and {b}")
    ar, ac = (a[1], a[0]) if meta.get("ta") else a
    br, bc = (b[1], b[0]) if meta.get("tb") else b
    if ac != br:
        raise ShapeMismatch(f"matmul: inner dimensions disagree, {a} @ {b}"
                            f" (ta={meta.get('ta', False)}, tb={meta.get('tb', False)})")
    return (ar, bc)


def _check_unary(op, max_ndim=2):
    def check(shapes, meta):
        (a,) = shapes
        if len(a) > max_ndim:
            raise ShapeMismatch(f"{op}: expected at most {max_ndim}-d input, got {a}")
        return a
    return check


def _check_softmaxish(op):
    def check(shapes, meta):
        (a,) = shapes
        if len(a) not in (1, 2):
            raise ShapeMismatch(f"{op}: expected a vector or a matrix of rows, got {a}")
        return a
    return check


def _check_cross_entropy(shapes, meta):
    (a,) = shapes
    if len(a) not in (1, 2):
        raise ShapeMismatch(f"cross_entropy: logits must be (classes,) or (batch, classes), got {a}")
    if meta["reduction"] == "none":
        return (1,) if len(a) == 1 else (a[0],)
    return ()


def _check_reduce(op):
    def check(shapes, meta):
        return ()
    return check


def _check_mse(shapes, meta):
    if len(shapes) == 2 and shapes[0] != shapes[1]:
        raise ShapeMismatch(f"mse: operands must share a shape, got {shapes[0]} and {shapes[1]}")
    return ()


def _check_affine_combine(shapes, meta):
    w, *cands = shapes
    if len(w) != 1:
        raise ShapeMismatch(f"affine_combine: weights must be a vector, got {w}")
    if w[0] != len(cands):
        raise ShapeMismatch(f"affine_combine: {w[0]} weights for {len(cands)} candidates")
    for c in cands:
        if c != cands[0]:
            raise ShapeMismatch(f"affine_combine: candidates must share a shape, got {cands}")
    return cands[0]


def _check_rotate2d(shapes, meta):
    if len(shapes) == 2:
        angle, pts = shapes
        if angle != ():
            raise ShapeMismatch(f"rotate2d: angle must be a scalar, got {angle}")
    else:
        (pts,) = shapes
    if len(pts) != 2 or pts[1] != 2:
        raise ShapeMismatch(f"rotate2d: points must be (n, 2), got {pts}")
    return pts


def _check_reshape(shapes, meta):
    return meta["new_shape"]


OP_CONTRACTS = {
    "add": _same_shape("add"),
    "sub": _same_shape("sub"),
    "mul": _same_shape("mul"),
    "scalar_mul": _check_scalar_mul,
    "matmul": _check_matmul,
    "relu": _check_unary("relu"),
    "sigmoid": _check_unary("sigmoid"),
    "softmax": _check_softmaxish("softmax"),
    "log_softmax": _check_softmaxish("log_softmax"),
    "cross_entropy": _check_cross_entropy,
    "mse": _check_mse,
    "sum": _check_reduce("sum"),
    "mean": _check_reduce("mean"),
    "affine_combine": _check_affine_combine,
    "rotate2d": _check_rotate2d,
    "reshape": _check_reshape,
}


def _precheck(op, inputs, meta=None):
    """Validate the operator's shape contract before any value is computed."""
    return OP_CONTRACTS[op]([v.shape for v in inputs], meta or {})


def record(tape: Tape, op: str, inputs: list[Var], value, vjps=(), meta=None) -> Var:
    """Append one operator result to the tape and return a Var for it.

    ``vjps`` is a sequence of ``(input_position, fn)`` pairs where ``fn``
    maps the upstream gradient to that input's gradient contribution; pairs
    for inputs that do not require gradients may be omitted. The value is
    validated against the operator's shape contract.
    """
    if op not in OP_CONTRACTS:
        raise ValueError(f"unknown operator {op!r}")
    for v in inputs:
        if v.tape is not tape:
            raise ValueError(f"{op}: input Var lives on a different tape")
    value = _as_value(value)
    expected = OP_CONTRACTS[op]([v.shape for v in inputs], meta or {})
    if tuple(value.shape) != tuple(expected):
        raise ShapeMismatch(f"{op}: value shape {value.shape} does not match contract {expected}")

    requires_grad = any(v.requires_grad for v in inputs)
    kept = ()
    if requires_grad:
        kept = tuple((inputs[pos].idx, fn) for pos, fn in vjps
                     if inputs[pos].requires_grad)
    node = Node(len(tape.nodes), op, tuple(v.idx for v in inputs), value, requires_grad,
                kept, meta)
    tape.nodes.append(node)
    tape._node_count += 1
    if requires_grad:
        tape._stored_bytes += value.nbytes
    return Var(tape, node.idx)


# --- forward operators --------------------------------------------------------

def add(a: Var, b: Var) -> Var:
    _precheck("add", [a, b])
    return record(a.tape, "add", [a, b], a.value + b.value,
                  vjps=((0, lambda g: g), (1, lambda g: g)))


def sub(a: Var, b: Var) -> Var:
    _precheck("sub", [a, b])
    return record(a.tape, "sub", [a, b], a.value - b.value,
                  vjps=((0, lambda g: g), (1, lambda g: -g)))


def mul(a: Var, b: Var) -> Var:
    """Elementwise product of same-shaped tensors."""
    _precheck("mul", [a, b])
    av, bv = a.value, b.value
    return record(a.tape, "mul", [a, b], av * bv,
                  vjps=((0, lambda g: g * bv), (1, lambda g: g * av)))


def scalar_mul(s, t: Var) -> Var:
    """Scalar times tensor; the scalar may be a python float or a scalar Var."""
    if isinstance(s, Var):
        sv, tv = s.value, t.value
        if sv.shape != ():
            raise ShapeMismatch(f"scalar_mul: scalar operand must have shape (), got {sv.shape}")
        return record(t.tape, "scalar_mul", [s, t], sv * tv,
                      vjps=((0, lambda g: np.asarray((g * tv).sum())), (1, lambda g: g * sv)))
    c = float(s)
    return record(t.tape, "scalar_mul", [t], c * t.value,
                  vjps=((0, lambda g: g * c),), meta={"const": c})


def matmul(a: Var, b: Var, transpose_a: bool = False, transpose_b: bool = False) -> Var:
    """Strict 2-d matrix product, with BLAS-style transpose flags."""
    _precheck("matmul", [a, b], {"ta": transpose_a, "tb": transpose_b})
    av = a.value.T if transpose_a else a.value
    bv = b.value.T if transpose_b else b.value

    def grad_a(g):
        ga = g @ bv.T
        return ga.T if transpose_a else ga

    def grad_b(g):
        gb = av.T @ g
        return gb.T if transpose_b else gb

    return record(a.tape, "matmul", [a, b], av @ bv,
                  vjps=((0, grad_a), (1, grad_b)),
                  meta={"ta": transpose_a, "tb": transpose_b})


def relu(a: Var) -> Var:
    v = a.value
    mask = (v > 0).astype(np.float64)
    return record(a.tape, "relu", [a], v * mask, vjps=((0, lambda g: g * mask),))


def sigmoid(a: Var) -> Var:
    y = expit(a.value)
    return record(a.tape, "sigmoid", [a], y, vjps=((0, lambda g: g * y * (1.0 - y)),))


def _softmax_value(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Var) -> Var:
    """Softmax along the last axis, computed with max-subtraction.

    The stabilisation matters here: fitness weighting divides small losses
    by small temperatures, which overflows a naive exponential.
    """
    y = _softmax_value(a.value)

    def grad(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - dot)

    return record(a.tape, "softmax", [a], y, vjps=((0, grad),))


def log_softmax(a: Var) -> Var:
    v = a.value
    z = v - v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    sm = np.exp(y)

    def grad(g):
        return g - sm * g.sum(axis=-1, keepdims=True)

    return record(a.tape, "log_softmax", [a], y, vjps=((0, grad),))


def cross_entropy(logits: Var, targets, reduction: str = "mean") -> Var:
    """Softmax cross-entropy against integer class targets.

    ``reduction="mean"`` gives a scalar averaged over the batch;
    ``"none"`` gives the per-instance loss vector. Targets are data, not
    tape values; they must be integers within the class range.
    """
    if reduction not in ("mean", "none"):
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")
    v = logits.value
    two_d = v.reshape(1, -1) if v.ndim == 1 else v
    n, c = two_d.shape
    t = np.asarray(targets)
    if t.ndim == 0:
        t = t.reshape(1)
    if t.shape != (n,) or not np.issubdtype(t.dtype, np.integer):
        raise ValueError(f"cross_entropy: targets must be {n} integers, got {t.shape} {t.dtype}")
    if t.min() < 0 or t.max() >= c:
        raise ValueError(f"cross_entropy: target class out of range [0, {c})")

    z = two_d - two_d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    per_instance = (lse[:, 0] - z[np.arange(n), t])
    sm = np.exp(z - lse)
    onehot = np.zeros_like(two_d)
    onehot[np.arange(n), t] = 1.0
    diff = sm - onehot

    if reduction == "mean":
        value = per_instance.mean()

        def grad(g):
            out = g * diff / n
            return out.reshape(v.shape)
    else:
        value = per_instance

        def grad(g):
            out = g[:, None] * diff
            return out.reshape(v.shape)

    return record(logits.tape, "cross_entropy", [logits], value,
                  vjps=((0, grad),), meta={"reduction": reduction, "targets": t})


def mse(a: Var, b=None) -> Var:
    """Mean squared error between ``a`` and ``b`` (Var or constant array)."""
    av = a.value
    if isinstance(b, Var):
        bv = b.value
        d = av - bv
        n = d.size
        return record(a.tape, "mse", [a, b], (d * d).mean(),
                      vjps=((0, lambda g: g * 2.0 * d / n), (1, lambda g: -g * 2.0 * d / n)))
    bv = 0.0 if b is None else _as_value(b)
    d = av - bv
    n = d.size
    return record(a.tape, "mse", [a], (d * d).mean(),
                  vjps=((0, lambda g: g * 2.0 * d / n),), meta={"target": bv, "n": n})


def sum(a: Var) -> Var:  # noqa: A001 - numpy-style module-level reduction
    shape = a.shape
    return record(a.tape, "sum", [a], a.value.sum(),
                  vjps=((0, lambda g: np.broadcast_to(g, shape).copy()),))


def mean(a: Var) -> Var:
    shape = a.shape
    n = a.value.size
    return record(a.tape, "mean", [a], a.value.mean(),
                  vjps=((0, lambda g: np.broadcast_to(g / n, shape).copy()),))


def affine_combine(w: Var, candidates: list[Var]) -> Var:
    """Weighted sum ``w[0]*c[0] + ... + w[k-1]*c[k-1]`` of same-shaped tensors."""
    _precheck("affine_combine", [w] + list(candidates))
    wv = w.value
    cvs = [c.value for c in candidates]
    value = np.zeros_like(cvs[0])
    for wk, cv in zip(wv, cvs):
        value += wk * cv

    def grad_w(g):
        return np.array([(g * cv).sum() for cv in cvs])

    vjps = [(0, grad_w)]
    for k, _ in enumerate(candidates):
        vjps.append((k + 1, (lambda kk: lambda g: wv[kk] * g)(k)))
    return record(w.tape, "affine_combine", [w] + list(candidates), value, vjps=tuple(vjps))


def rotate2d(angle, points: Var) -> Var:
    """Rotate row-vector points by ``angle`` radians (counter-clockwise).

    ``angle`` may be a scalar Var (meta-learned) or a plain float.
    """
    if isinstance(angle, Var):
        _precheck("rotate2d", [angle, points])
    else:
        _precheck("rotate2d", [points])
    pv = points.value
    if isinstance(angle, Var):
        th = float(angle.value)
    else:
        th = float(angle)
    c, s = np.cos(th), np.sin(th)
    rot = np.array([[c, -s], [s, c]])
    value = pv @ rot.T

    def grad_points(g):
        return g @ rot

    if isinstance(angle, Var):
        drot = np.array([[-s, -c], [c, -s]])

        def grad_angle(g):
            return np.asarray((g * (pv @ drot.T)).sum())

        return record(points.tape, "rotate2d", [angle, points], value,
                      vjps=((0, grad_angle), (1, grad_points)))
    return record(points.tape, "rotate2d", [points], value, vjps=((0, grad_points),),
                  meta={"angle": th})


def reshape(a: Var, new_shape) -> Var:
    new_shape = tuple(int(s) for s in (new_shape if hasattr(new_shape, "__len__") else (new_shape,)))
    old_shape = a.shape
    return record(a.tape, "reshape", [a], a.value.reshape(new_shape),
                  vjps=((0, lambda g: g.reshape(old_shape)),),
                  meta={"new_shape": new_shape})


# --- reverse sweep -------------------------------------------------------------

def backward(tape: Tape, root: Var, wrt: list[Var]) -> list[np.ndarray]:
    """Gradients of a scalar root with respect to each Var in ``wrt``.

    One reverse sweep over the tape; each node is visited at most once and
    the tape itself is left unchanged. Vars with no path to the root get a
    zero gradient (use ``tape.ancestors`` to distinguish structural
    disconnection from a numerically zero gradient).
    """
    if root.tape is not tape:
        raise ValueError("backward: root lives on a different tape")
    if root.shape != ():
        raise NonScalarRoot(f"backward: root must be scalar, got shape {root.shape}")
    for v in wrt:
        if v.tape is not tape:
            raise ValueError("backward: wrt Var lives on a different tape")

    adjoint: dict[int, np.ndarray] = {root.idx: np.asarray(1.0)}
    for idx in range(root.idx, -1, -1):
        g = adjoint.get(idx)
        if g is None:
            continue
        for pid, fn in tape.nodes[idx].vjps:
            contrib = fn(g)
            got = adjoint.get(pid)
            if got is None:
                adjoint[pid] = np.asarray(contrib, dtype=np.float64).copy()
            else:
                got += contrib

    _count_backward()
    out = []
    for v in wrt:
        g = adjoint.get(v.idx)
        out.append(np.zeros(v.shape) if g is None else np.asarray(g))
    return out


def tape_stats(tape: Tape) -> tuple[int, int]:
    """(node_count, stored_bytes) of a tape; see module docstring for the accounting."""
    s = tape.stats()
    return s.node_count, s.stored_bytes
