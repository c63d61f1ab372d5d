"""Tape-based reverse-mode AD.

A :class:`Tape` records elementary programs as they run forward.  Derived
programs are chosen only when :func:`backprop` runs, from the
:class:`NonsmoothPolicy` passed in, so one forward tape can be differentiated
under several policies and reduction orders without recomputing anything.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nonsmooth import PoolMode, check_relu_s
from .precision import SEQUENTIAL, Precision, ReductionOrder
from .tensor import fold


@dataclass(frozen=True)
class NonsmoothPolicy:
    """Derived-program selection: ReLU'(0) and the pooling backward rule."""

    relu_s: float = 0.0
    pool_mode: PoolMode = PoolMode()

    def __post_init__(self):
        check_relu_s(self.relu_s)
        if isinstance(self.pool_mode, str):
            object.__setattr__(self, "pool_mode", PoolMode.parse(self.pool_mode))

    def __str__(self) -> str:
        return f"relu_s={self.relu_s:g},pool={self.pool_mode}"


class Op:
    """An elementary program together with its derived program.

    ``forward`` maps input values to ``(value, ctx)``; ``backward`` maps the
    upstream gradient to one gradient per input (``None`` where the input
    does not need one).  Both receive a :class:`ReductionOrder` already
    specialised to the node.
    """

    name = "op"
    nonsmooth = False

    def forward(self, *inputs, order: ReductionOrder):
        raise NotImplementedError

    def backward(self, g, node: "Node", inputs, needs, policy: NonsmoothPolicy, order: ReductionOrder):
        raise NotImplementedError

    def nonsmooth_sites(self, node: "Node") -> int:
        """How many nonsmooth points this node was evaluated at."""
        return 0

    def selection(self, node: "Node") -> bytes:
        """Which smooth piece the node was evaluated on (empty for smooth ops)."""
        return b""

    def __repr__(self) -> str:
        return self.name


@dataclass
class Node:
    id: int
    op: Op | None
    inputs: tuple[int, ...]
    value: np.ndarray
    ctx: dict = field(default_factory=dict)
    name: str | None = None
    requires_grad: bool = False


class Tape:
    def __init__(self, precision: Precision = Precision.B32, order: ReductionOrder = SEQUENTIAL):
        self.precision = Precision.parse(precision)
        self.order = order
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def _cast(self, value):
        value = np.asarray(value)
        if value.dtype != self.precision.dtype:
            with np.errstate(over="ignore"):
                value = value.astype(self.precision.dtype)
        return value

    def leaf(self, value, name: str | None = None, requires_grad: bool = False) -> "Var":
        node = Node(len(self.nodes), None, (), self._cast(value), name=name, requires_grad=requires_grad)
        self.nodes.append(node)
        return Var(self, node.id)

    def param(self, value, name: str) -> "Var":
        return self.leaf(value, name=name, requires_grad=True)

    def apply(self, op: Op, *args: "Var") -> "Var":
        ids = []
        for a in args:
            if not isinstance(a, Var):
                a = self.leaf(a)
            elif a.tape is not self:
                raise ValueError("cannot mix variables from different tapes")
            ids.append(a.id)
        nid = len(self.nodes)
        value, ctx = op.forward(*(self.nodes[i].value for i in ids), order=self.order.derive(nid))
        rg = any(self.nodes[i].requires_grad for i in ids)
        self.nodes.append(Node(nid, op, tuple(ids), value, ctx or {}, requires_grad=rg))
        return Var(self, nid)

    def params(self) -> dict[str, "Var"]:
        return {n.name: Var(self, n.id) for n in self.nodes if n.op is None and n.requires_grad}

    def replay(self) -> bool:
        """Recompute every node from the leaves; True iff all values match bitwise."""
        for node in self.nodes:
            if node.op is None:
                continue
            ins = [self.nodes[i].value for i in node.inputs]
            value, _ = node.op.forward(*ins, order=self.order.derive(node.id))
            if value.dtype != node.value.dtype or value.tobytes() != node.value.tobytes():
                return False
        return True

    def nonsmooth_sites(self) -> dict[str, int]:
        """Count of nonsmooth evaluation points per op name (ReLU at 0, tied windows...)."""
        counts: dict[str, int] = {}
        for node in self.nodes:
            if node.op is not None and node.op.nonsmooth:
                counts[node.op.name] = counts.get(node.op.name, 0) + node.op.nonsmooth_sites(node)
        return counts

    def selection(self) -> tuple[bytes, ...]:
        """Selections of every nonsmooth node; equal tuples mean the same smooth piece."""
        return tuple(n.op.selection(n) for n in self.nodes if n.op is not None and n.op.nonsmooth)

    def has_nan(self) -> bool:
        return any(np.isnan(n.value).any() for n in self.nodes)


class Var:
    """Handle on a tape node; arithmetic records new nodes."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: Tape, id: int):
        self.tape = tape
        self.id = id

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.id]

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def shape(self):
        return self.node.value.shape

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape}, op={self.node.op})"

    def _lift(self, other):
        return other if isinstance(other, Var) else self.tape.leaf(other)

    def __add__(self, other):
        from . import ops
        return self.tape.apply(ops.Add(), self, self._lift(other))

    def __radd__(self, other):
        from . import ops
        return self.tape.apply(ops.Add(), self._lift(other), self)

    def __sub__(self, other):
        from . import ops
        return self.tape.apply(ops.Sub(), self, self._lift(other))

    def __rsub__(self, other):
        from . import ops
        return self.tape.apply(ops.Sub(), self._lift(other), self)

    def __mul__(self, other):
        from . import ops
        return self.tape.apply(ops.Mul(), self, self._lift(other))

    def __rmul__(self, other):
        from . import ops
        return self.tape.apply(ops.Mul(), self._lift(other), self)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Var):
            raise NotImplementedError("division by a variable is not supported")
        return self.tape.apply(ops.DivConst(other), self)

    def __neg__(self):
        from . import ops
        return self.tape.apply(ops.Neg(), self)

    def __getitem__(self, idx):
        from . import ops
        return self.tape.apply(ops.Index(idx), self)


@dataclass
class Gradient:
    """Result of one backward pass.

    ``values`` maps parameter names to gradients of the same shape and
    precision.  ``nan`` is set when any forward value or gradient is NaN.
    ``selections`` records which derived program each nonsmooth node used.
    """

    values: dict[str, np.ndarray]
    nan: bool = False
    selections: dict[int, str] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.values[name]

    def __iter__(self):
        return iter(self.values)

    def keys(self):
        return self.values.keys()

    def items(self):
        return self.values.items()

    def flat(self, dtype=None) -> np.ndarray:
        parts = [v.reshape(-1) for v in self.values.values()]
        out = np.concatenate(parts) if parts else np.zeros(0)
        return out.astype(dtype) if dtype is not None else out


def backprop(tape: Tape, root: Var | None = None, policy: NonsmoothPolicy = NonsmoothPolicy(),
             order: ReductionOrder = SEQUENTIAL, wrt: str = "params") -> Gradient:
    """Reverse sweep from a scalar ``root`` (default: last node).

    Gradients reaching a node from several consumers are summed in consumer
    id order (permuted per node under a shuffled order).  ``wrt="params"``
    returns gradients for named leaves created with ``requires_grad``;
    ``wrt="leaves"`` returns every leaf that received a gradient, keyed by id.
    """
    if root is None:
        root_id = len(tape.nodes) - 1
    else:
        if root.tape is not tape:
            raise ValueError("root does not belong to this tape")
        root_id = root.id
    root_node = tape.nodes[root_id]
    if root_node.value.size != 1:
        raise ValueError(f"backprop needs a scalar root, got shape {root_node.value.shape}")

    dt = tape.precision.dtype
    pending: dict[int, list[tuple[int, np.ndarray]]] = {root_id: [(-1, np.ones(root_node.value.shape, dt))]}
    nan = False
    selections: dict[int, str] = {}
    leaf_grads: dict[int, np.ndarray] = {}

    for nid in range(root_id, -1, -1):
        contribs = pending.pop(nid, None)
        if not contribs:
            continue
        node = tape.nodes[nid]
        contribs.sort(key=lambda c: c[0])
        g = fold([c[1] for c in contribs], order, key=(nid, 0))
        if node.op is None:
            leaf_grads[nid] = g
            continue
        needs = [tape.nodes[i].requires_grad or wrt == "leaves" for i in node.inputs]
        if not any(needs):
            continue
        ins = [tape.nodes[i].value for i in node.inputs]
        with np.errstate(all="ignore"):
            grads = node.op.backward(g, node, ins, needs, policy, order.derive(nid))
        if node.op.nonsmooth:
            selections[nid] = node.ctx.get("selection", "") or _describe(node.op, policy)
        for i, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            pending.setdefault(i, []).append((nid, gi))

    if wrt == "leaves":
        values = {nid: g for nid, g in sorted(leaf_grads.items())}
    else:
        values = {}
        for node in tape.nodes:
            if node.op is None and node.requires_grad and node.name is not None:
                g = leaf_grads.get(node.id)
                values[node.name] = g if g is not None else np.zeros_like(node.value)
    nan = tape.has_nan() or any(np.isnan(v).any() for v in values.values())
    return Gradient(values, nan, selections)


def _describe(op: Op, policy: NonsmoothPolicy) -> str:
    if op.name == "relu":
        s = getattr(op, "s", None)
        return f"relu_s={policy.relu_s if s is None else s:g}"
    return str(policy.pool_mode)


# -- finite-difference check ----------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    errors: dict[str, float]
    skipped: bool = False
    reason: str = ""
    crossed: int = 0  # probed coordinates left out because the step crossed a kink


def grad_check(fn, params: dict[str, np.ndarray], policy: NonsmoothPolicy = NonsmoothPolicy(),
               h: float = 1e-6, tol: float = 1e-5, precision: Precision = Precision.B64,
               max_entries: int | None = None, rng=None) -> GradCheckReport:
    """Compare :func:`backprop` with central differences.

    ``fn(tape, vars)`` builds the scalar loss on ``tape`` from a dict of
    parameter variables.  If the forward tape touches a nonsmooth point
    (ReLU input exactly 0, tied pooling window) the check is skipped and
    reported as such; coordinates whose finite-difference step changes a
    ReLU sign or a pooling selection are left out and counted in
    ``crossed``.  The relative error per parameter tensor is
    ``||g_ad - g_fd||_2 / max(||g_ad||_2, ||g_fd||_2, tiny)``.  ``max_entries``
    limits how many coordinates per tensor are probed (chosen with ``rng``).
    """
    precision = Precision.parse(precision)

    def loss_at(values):
        tape = Tape(precision)
        vs = {k: tape.param(v, k) for k, v in values.items()}
        out = fn(tape, vs)
        return tape, out

    tape, out = loss_at(params)
    sites = tape.nonsmooth_sites()
    if any(sites.values()):
        return GradCheckReport(True, 0.0, {}, skipped=True, reason="nonsmooth point, check skipped")
    base = tape.selection()
    g = backprop(tape, out, policy)
    rng = rng if rng is not None else np.random.default_rng(0)
    errors = {}
    crossed = 0
    for name, value in params.items():
        value = np.asarray(value, dtype=precision.dtype)
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = np.sort(rng.choice(value.size, max_entries, replace=False))
        fd, kept = [], []
        for k in flat_idx:
            vals = dict(params)
            plus = value.copy().reshape(-1)
            minus = value.copy().reshape(-1)
            plus[k] += h
            minus[k] -= h
            vals[name] = plus.reshape(value.shape)
            tp, op = loss_at(vals)
            vals[name] = minus.reshape(value.shape)
            tm, om = loss_at(vals)
            # a probe that lands on another smooth piece differences across a kink
            if tp.selection() != base or tm.selection() != base:
                crossed += 1
                continue
            fd.append((float(op.value) - float(om.value)) / (2 * h))
            kept.append(k)
        if not kept:
            continue
        fd = np.array(fd)
        ad = np.asarray(g[name], dtype=np.float64).reshape(-1)[kept]
        denom = max(np.linalg.norm(ad), np.linalg.norm(fd), 1e-300)
        errors[name] = float(np.linalg.norm(ad - fd) / denom)
    worst = max(errors.values()) if errors else 0.0
    return GradCheckReport(worst <= tol, worst, errors, crossed=crossed)
