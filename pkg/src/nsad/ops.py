"""Elementary programs recorded on a :class:`~nsad.autodiff.Tape`.

Each op's ``backward`` is its derived program.  Only the nonsmooth ops
(``Relu``, ``MaxPool2d``, ``MaxAll``, ``NormPool2d``) look at the policy.
Reduction keys passed to the tensor routines keep the shuffled permutations of
different reductions inside one node independent.
"""

from __future__ import annotations

import numpy as np

from . import nonsmooth as ns
from .autodiff import Op, Tape, Var
from .tensor import col2im, fold, im2col, matmul, reduce_sum, sum_axis, sum_rows


def _unbroadcast(g, shape, order, key):
    if g.shape == tuple(shape):
        return g
    if int(np.prod(shape)) == 1:
        return reduce_sum(g, order, key).reshape(shape)
    raise ValueError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_broadcast(a, b):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


class Add(Op):
    name = "add"

    def forward(self, a, b, *, order):
        _check_broadcast(a, b)
        return a + b, None

    def backward(self, g, node, inputs, needs, policy, order):
        a, b = inputs
        return [_unbroadcast(g, a.shape, order, (0,)) if needs[0] else None,
                _unbroadcast(g, b.shape, order, (1,)) if needs[1] else None]


class Sub(Op):
    name = "sub"

    def forward(self, a, b, *, order):
        _check_broadcast(a, b)
        return a - b, None

    def backward(self, g, node, inputs, needs, policy, order):
        a, b = inputs
        return [_unbroadcast(g, a.shape, order, (0,)) if needs[0] else None,
                _unbroadcast(-g, b.shape, order, (1,)) if needs[1] else None]


class Mul(Op):
    name = "mul"

    def forward(self, a, b, *, order):
        _check_broadcast(a, b)
        return a * b, None

    def backward(self, g, node, inputs, needs, policy, order):
        a, b = inputs
        return [_unbroadcast(g * b, a.shape, order, (0,)) if needs[0] else None,
                _unbroadcast(g * a, b.shape, order, (1,)) if needs[1] else None]


class Neg(Op):
    name = "neg"

    def forward(self, a, *, order):
        return -a, None

    def backward(self, g, node, inputs, needs, policy, order):
        return [-g]


class DivConst(Op):
    name = "div"

    def __init__(self, c: float):
        self.c = float(c)

    def forward(self, a, *, order):
        return a / a.dtype.type(self.c), None

    def backward(self, g, node, inputs, needs, policy, order):
        return [g / g.dtype.type(self.c)]


class Index(Op):
    name = "index"

    def __init__(self, idx):
        self.idx = idx

    def forward(self, a, *, order):
        return np.array(a[self.idx]), None

    def backward(self, g, node, inputs, needs, policy, order):
        out = np.zeros_like(inputs[0])
        out[self.idx] = g
        return [out]


class Stack(Op):
    name = "stack"

    def forward(self, *xs, order):
        return np.stack(xs), None

    def backward(self, g, node, inputs, needs, policy, order):
        return [np.array(g[i]) if needs[i] else None for i in range(len(inputs))]


class Reshape(Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, a, *, order):
        return a.reshape(self.shape), None

    def backward(self, g, node, inputs, needs, policy, order):
        return [g.reshape(inputs[0].shape)]


class SumAll(Op):
    name = "sum"

    def forward(self, a, *, order):
        return reduce_sum(a, order, (0,)), None

    def backward(self, g, node, inputs, needs, policy, order):
        return [np.broadcast_to(g, inputs[0].shape).copy()]


class Linear(Op):
    """y = x @ W.T + b with x (B, in), W (out, in), b (out,)."""

    name = "linear"

    def forward(self, x, w, b, *, order):
        y = matmul(x, w.T, order, (0,))
        return y + b, None

    def backward(self, g, node, inputs, needs, policy, order):
        x, w, b = inputs
        dx = matmul(g, w, order, (1,)) if needs[0] else None
        dw = matmul(g.T, x, order, (2,)) if needs[1] else None
        db = sum_rows(g, order, (3,)) if needs[2] else None
        return [dx, dw, db]


class Conv2d(Op):
    """Valid, stride-1 convolution: x (N, C, H, W), W (OC, C, KH, KW), b (OC,)."""

    name = "conv2d"

    def forward(self, x, w, b, *, order):
        n, c, h, wd = x.shape
        oc, c2, kh, kw = w.shape
        if c != c2:
            raise ValueError(f"conv2d: input has {c} channels, kernel expects {c2}")
        cols = im2col(x, kh, kw)
        y = matmul(cols, w.reshape(oc, -1).T, order, (0,)) + b
        y = np.ascontiguousarray(y.reshape(n, h - kh + 1, wd - kw + 1, oc).transpose(0, 3, 1, 2))
        return y, {"cols": cols}

    def backward(self, g, node, inputs, needs, policy, order):
        x, w, b = inputs
        oc, c, kh, kw = w.shape
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, oc)
        dx = dw = db = None
        if needs[1]:
            dw = matmul(g2.T, node.ctx["cols"], order, (2,)).reshape(w.shape)
        if needs[2]:
            db = sum_rows(g2, order, (3,))
        if needs[0]:
            dcols = matmul(g2, w.reshape(oc, -1), order, (1,))
            dx = col2im(dcols, x.shape, kh, kw, order, (4,))
        return [dx, dw, db]


class Relu(Op):
    """ReLU; ``s`` pins ReLU'(0) for this node, otherwise the policy decides."""

    name = "relu"
    nonsmooth = True

    def __init__(self, s: float | None = None):
        self.s = None if s is None else ns.check_relu_s(s)

    def forward(self, x, *, order):
        return ns.relu_forward(x), {"x": x}

    def backward(self, g, node, inputs, needs, policy, order):
        s = policy.relu_s if self.s is None else self.s
        return [ns.relu_backward(inputs[0], g, s)]

    def nonsmooth_sites(self, node):
        return int(np.count_nonzero(node.ctx["x"] == 0))

    def selection(self, node):
        return np.sign(node.ctx["x"]).astype(np.int8).tobytes()


class MaxPool2d(Op):
    name = "maxpool"
    nonsmooth = True

    def __init__(self, geom: ns.PoolGeometry = ns.PoolGeometry()):
        self.geom = geom

    def forward(self, x, *, order):
        y, mask = ns.maxpool_forward(x, self.geom)
        return y, {"mask": mask}

    def backward(self, g, node, inputs, needs, policy, order):
        mode = policy.pool_mode
        win = ns.route_max(g, node.ctx["mask"], mode)
        return [ns.unwindow(win, self.geom, inputs[0].shape)]

    def nonsmooth_sites(self, node):
        return int(np.count_nonzero(node.ctx["mask"].sum(axis=-1) > 1))

    def selection(self, node):
        return np.packbits(node.ctx["mask"]).tobytes()


class MaxAll(Op):
    """Maximum of all entries, differentiated with the policy's max rule."""

    name = "max"
    nonsmooth = True

    def forward(self, x, *, order):
        y, mask = ns.max_windows(x.reshape(-1))
        return np.array(y), {"mask": mask}

    def backward(self, g, node, inputs, needs, policy, order):
        win = ns.route_max(np.asarray(g).reshape(()), node.ctx["mask"], policy.pool_mode)
        return [win.reshape(inputs[0].shape)]

    def nonsmooth_sites(self, node):
        return int(node.ctx["mask"].sum() > 1)

    def selection(self, node):
        return np.packbits(node.ctx["mask"]).tobytes()


class NormPool2d(Op):
    name = "normpool"
    nonsmooth = True

    def __init__(self, geom: ns.PoolGeometry = ns.PoolGeometry()):
        self.geom = geom

    def forward(self, x, *, order):
        win = ns.windows(x, self.geom)
        y = ns.norm_windows(win, order, (0,))
        return y, None

    def backward(self, g, node, inputs, needs, policy, order):
        x = inputs[0]
        win = ns.windows(x, self.geom)
        out = ns.route_norm(g, win, node.value, policy.pool_mode)
        return [ns.unwindow(out, self.geom, x.shape)]

    def nonsmooth_sites(self, node):
        return int(np.count_nonzero(node.value == 0))

    def selection(self, node):
        return np.packbits(node.value == 0).tobytes()


class BatchNorm(Op):
    """Batch normalisation over all axes but the channel axis (axis 1).

    In training mode the batch statistics are functions of the input and are
    differentiated through.  In eval mode ``running`` = (mean, var) is used as
    constants.  Binary16 statistics are accumulated in binary32, which is what
    frameworks do for half-precision batch norm.
    """

    name = "batchnorm"

    def __init__(self, eps: float = 1e-5, running=None):
        self.eps = eps
        self.running = running

    @staticmethod
    def _axes(x):
        return (0,) + tuple(range(2, x.ndim))

    @staticmethod
    def _chan(v, x):
        return v.reshape((1, -1) + (1,) * (x.ndim - 2))

    def forward(self, x, gamma, beta, *, order):
        dt = x.dtype
        acc = np.float32 if dt == np.float16 else dt.type
        eps = dt.type(self.eps)
        if self.running is not None:
            mean = np.asarray(self.running[0], dt)
            var = np.asarray(self.running[1], dt)
            invstd = dt.type(1) / np.sqrt(var + eps)
            xhat = (x - self._chan(mean, x)) * self._chan(invstd, x)
            return xhat * self._chan(gamma, x) + self._chan(beta, x), {"mean": mean, "var": var}
        axes = self._axes(x)
        cnt = x.size // x.shape[1]
        xa = x.astype(acc)
        mean = sum_axis(xa, axes, order, (0,)) / acc(cnt)
        xc = xa - self._chan(mean, xa)
        var = sum_axis(xc * xc, axes, order, (1,)) / acc(cnt)
        invstd = (acc(1) / np.sqrt(var + acc(self.eps))).astype(dt)
        xhat = (x - self._chan(mean.astype(dt), x)) * self._chan(invstd, x)
        y = xhat * self._chan(gamma, x) + self._chan(beta, x)
        return y, {"xhat": xhat, "invstd": invstd, "mean": mean.astype(dt),
                   "var": var.astype(dt), "count": cnt}

    def backward(self, g, node, inputs, needs, policy, order):
        x, gamma, beta = inputs
        dt = x.dtype
        acc = np.float32 if dt == np.float16 else dt.type
        axes = self._axes(x)
        if self.running is not None:
            ctx_inv = dt.type(1) / np.sqrt(np.asarray(self.running[1], dt) + dt.type(self.eps))
            xhat = (x - self._chan(np.asarray(self.running[0], dt), x)) * self._chan(ctx_inv, x)
            dx = g * self._chan(gamma * ctx_inv, x) if needs[0] else None
            dgamma = sum_axis(g * xhat, axes, order, (2,)) if needs[1] else None
            dbeta = sum_axis(g, axes, order, (3,)) if needs[2] else None
            return [dx, dgamma, dbeta]
        xhat, invstd, cnt = node.ctx["xhat"], node.ctx["invstd"], node.ctx["count"]
        ga = g.astype(acc)
        xh = xhat.astype(acc)
        sum_g = sum_axis(ga, axes, order, (3,))
        sum_gx = sum_axis(ga * xh, axes, order, (2,))
        dgamma = sum_gx.astype(dt) if needs[1] else None
        dbeta = sum_g.astype(dt) if needs[2] else None
        dx = None
        if needs[0]:
            gam = gamma.astype(acc)
            dxhat = ga * self._chan(gam, ga)
            s1 = sum_g * gam
            s2 = sum_gx * gam
            n = acc(cnt)
            inner = dxhat * n - self._chan(s1, ga) - xh * self._chan(s2, ga)
            dx = (inner * self._chan(invstd.astype(acc) / n, ga)).astype(dt)
        return [dx, dgamma, dbeta]


class SoftmaxCrossEntropy(Op):
    """Cross-entropy of softmax(logits) against integer labels.

    ``reduction`` is "mean" or "sum" over the batch.  The log-sum-exp sums
    over classes in class order (permuted under a shuffled order).
    """

    name = "softmax_xent"

    def __init__(self, labels, reduction: str = "mean"):
        self.labels = np.asarray(labels, dtype=np.int64)
        if reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {reduction!r}")
        self.reduction = reduction

    def forward(self, logits, *, order):
        b, c = logits.shape
        if self.labels.shape != (b,):
            raise ValueError(f"{self.labels.shape[0]} labels for a batch of {b}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= c):
            raise ValueError(f"label out of class range [0, {c})")
        dt = logits.dtype
        with np.errstate(over="ignore", invalid="ignore"):
            m = logits.max(axis=1, keepdims=True)
            z = logits - m
            e = np.exp(z)
            s = fold([e[:, k] for k in range(c)], order, (0,))
            probs = e / s[:, None]
            losses = np.log(s) - z[np.arange(b), self.labels]
        total = reduce_sum(losses, order, (1,))
        if self.reduction == "mean":
            total = total / dt.type(b)
        return np.asarray(total, dt), {"probs": probs, "losses": losses}

    def backward(self, g, node, inputs, needs, policy, order):
        probs = node.ctx["probs"]
        b = probs.shape[0]
        dt = probs.dtype
        scale = g / dt.type(b) if self.reduction == "mean" else g
        onehot = np.zeros_like(probs)
        onehot[np.arange(b), self.labels] = 1
        return [(probs - onehot) * scale]


# -- functional helpers ----------------------------------------------------

def add(a: Var, b) -> Var:
    return a + b


def relu(x: Var, s: float | None = None) -> Var:
    return x.tape.apply(Relu(s), x)


def maxpool2d(x: Var, geom: ns.PoolGeometry = ns.PoolGeometry()) -> Var:
    return x.tape.apply(MaxPool2d(geom), x)


def normpool2d(x: Var, geom: ns.PoolGeometry = ns.PoolGeometry()) -> Var:
    return x.tape.apply(NormPool2d(geom), x)


def max_all(x: Var) -> Var:
    return x.tape.apply(MaxAll(), x)


def conv2d(x: Var, w: Var, b: Var) -> Var:
    return x.tape.apply(Conv2d(), x, w, b)


def linear(x: Var, w: Var, b: Var) -> Var:
    return x.tape.apply(Linear(), x, w, b)


def reshape(x: Var, shape) -> Var:
    return x.tape.apply(Reshape(shape), x)


def flatten(x: Var) -> Var:
    return reshape(x, (x.shape[0], -1))


def stack(*xs: Var) -> Var:
    return xs[0].tape.apply(Stack(), *xs)


def sum_all(x: Var) -> Var:
    return x.tape.apply(SumAll(), x)


def batchnorm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5, running=None) -> Var:
    return x.tape.apply(BatchNorm(eps, running), x, gamma, beta)


def softmax_cross_entropy(logits: Var, labels, reduction: str = "mean") -> Var:
    return logits.tape.apply(SoftmaxCrossEntropy(labels, reduction), logits)


__all__ = [
    "Tape", "Var", "add", "relu", "maxpool2d", "normpool2d", "max_all", "conv2d", "linear",
    "reshape", "flatten", "stack", "sum_all", "batchnorm", "softmax_cross_entropy",
]
