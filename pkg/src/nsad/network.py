"""Layer-list network descriptions, parameter initialisation and the loss tape."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .autodiff import Tape, Var
from .nonsmooth import PoolGeometry
from .precision import SEQUENTIAL, Precision, ReductionOrder


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int


@dataclass(frozen=True)
class Pool:
    m: int = 2
    n: int = 2
    kind: str = "max"  # or "norm"

    def __post_init__(self):
        if self.kind not in ("max", "norm"):
            raise ValueError(f"pool kind must be 'max' or 'norm', got {self.kind!r}")


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class BatchNorm:
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Linear:
    out: int


Layer = Conv | Pool | Relu | BatchNorm | Flatten | Linear


@dataclass(frozen=True)
class NetworkSpec:
    """Layers applied in order to (N, *input_shape), followed by softmax cross-entropy."""

    layers: tuple
    input_shape: tuple = (1, 28, 28)
    precision: Precision = Precision.B32
    seed: int = 0
    name: str = "net"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "precision", Precision.parse(self.precision))
        self.shapes()  # validates the chain

    def with_precision(self, precision) -> "NetworkSpec":
        return replace(self, precision=Precision.parse(precision))

    def shapes(self) -> list[tuple]:
        """Per-sample output shape after each layer; raises on a broken chain."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: conv needs (C, H, W) input, got {shape}")
                c, h, w = shape
                if h < layer.kernel or w < layer.kernel:
                    raise ValueError(f"layer {i}: kernel {layer.kernel} larger than {h}x{w}")
                shape = (layer.out_channels, h - layer.kernel + 1, w - layer.kernel + 1)
            elif isinstance(layer, Pool):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: pool needs (C, H, W) input, got {shape}")
                oh, ow = PoolGeometry(layer.m, layer.n).output_shape(*shape[1:])
                shape = (shape[0], oh, ow)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Linear):
                if len(shape) != 1:
                    raise ValueError(f"layer {i}: linear needs a flat input, got {shape}; add Flatten")
                shape = (layer.out,)
            elif isinstance(layer, (Relu, BatchNorm)):
                pass
            else:
                raise TypeError(f"layer {i}: unknown layer {layer!r}")
            out.append(shape)
        if not out or len(out[-1]) != 1:
            raise ValueError("network must end in a flat class-score vector")
        return out

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][0]

    @property
    def has_batchnorm(self) -> bool:
        return any(isinstance(l, BatchNorm) for l in self.layers)


# -- builders ------------------------------------------------------------

def lenet5(batchnorm: bool = False, pool: str = "max", precision=Precision.B32, seed: int = 0,
           input_shape=(1, 28, 28), classes: int = 10) -> NetworkSpec:
    """conv6-5 -> pool -> relu -> conv16-5 -> pool -> relu -> 120 -> 84 -> classes.

    With ``batchnorm`` a batch norm follows each convolution.
    """
    def block(c):
        return [Conv(c, 5)] + ([BatchNorm()] if batchnorm else []) + [Pool(kind=pool), Relu()]

    layers = block(6) + block(16) + [Flatten(), Linear(120), Relu(), Linear(84), Relu(), Linear(classes)]
    name = "lenet5" + ("-bn" if batchnorm else "") + ("-normpool" if pool == "norm" else "")
    return NetworkSpec(tuple(layers), input_shape, precision, seed, name)


def conv_stack(depth: int, batchnorm: bool = False, precision=Precision.B32, seed: int = 0,
               input_shape=(1, 28, 28), classes: int = 10) -> NetworkSpec:
    """LeNet-like family indexed by the number of conv/pool/relu blocks (1 to 3)."""
    if not 1 <= depth <= 3:
        raise ValueError("depth must be 1, 2 or 3")
    plan = [(6, 5), (16, 5), (32, 3)][:depth]
    layers = []
    for c, k in plan:
        layers += [Conv(c, k)] + ([BatchNorm()] if batchnorm else []) + [Pool(), Relu()]
    layers += [Flatten(), Linear(120), Relu(), Linear(84), Relu(), Linear(classes)]
    return NetworkSpec(tuple(layers), input_shape, precision, seed, f"convstack{depth}" + ("-bn" if batchnorm else ""))


def mlp(hidden=(128, 64), precision=Precision.B32, seed: int = 0, input_shape=(1, 28, 28),
        classes: int = 10) -> NetworkSpec:
    layers = [Flatten()]
    for h in hidden:
        layers += [Linear(h), Relu()]
    layers.append(Linear(classes))
    return NetworkSpec(tuple(layers), input_shape, precision, seed, "mlp")


NETWORKS = {
    "lenet5": lambda **kw: lenet5(**kw),
    "lenet5-bn": lambda **kw: lenet5(batchnorm=True, **kw),
    "lenet5-normpool": lambda **kw: lenet5(pool="norm", **kw),
    "mlp": lambda **kw: mlp(**kw),
}


def build(name: str, **kw) -> NetworkSpec:
    if name.startswith("convstack"):
        tail = name[len("convstack"):]
        bn = tail.endswith("-bn")
        return conv_stack(int(tail.removesuffix("-bn")), batchnorm=bn, **kw)
    try:
        return NETWORKS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown network {name!r}; expected one of {sorted(NETWORKS)} or convstackN[-bn]") from None


# -- parameters ----------------------------------------------------------

@dataclass
class ParameterSet:
    """Named parameters in layer order plus batch-norm running statistics."""

    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: v.copy() for k, v in self.params.items()},
                            {k: v.copy() for k, v in self.buffers.items()})

    @property
    def size(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1).astype(np.float64) for v in self.params.values()])

    def astype(self, precision) -> "ParameterSet":
        dt = Precision.parse(precision).dtype
        with np.errstate(over="ignore"):
            return ParameterSet({k: v.astype(dt) for k, v in self.params.items()},
                                {k: v.astype(dt) for k, v in self.buffers.items()})


def kaiming_bound(fan_in: int, a: float = math.sqrt(5.0)) -> float:
    """Uniform bound gain * sqrt(3 / fan_in) with the leaky-ReLU gain for slope ``a``."""
    gain = math.sqrt(2.0 / (1.0 + a * a))
    return gain * math.sqrt(3.0 / fan_in)


def init_kaiming_uniform(spec: NetworkSpec, seed: int | None = None, a: float = math.sqrt(5.0)) -> ParameterSet:
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    dt = spec.precision.dtype
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    shape = spec.input_shape
    for i, (layer, out_shape) in enumerate(zip(spec.layers, spec.shapes())):
        if isinstance(layer, Conv):
            fan_in = shape[0] * layer.kernel ** 2
            wshape = (layer.out_channels, shape[0], layer.kernel, layer.kernel)
        elif isinstance(layer, Linear):
            fan_in = shape[0]
            wshape = (layer.out, fan_in)
        elif isinstance(layer, BatchNorm):
            c = shape[0]
            params[f"{i}.gamma"] = np.ones(c, dt)
            params[f"{i}.beta"] = np.zeros(c, dt)
            buffers[f"{i}.mean"] = np.zeros(c, dt)
            buffers[f"{i}.var"] = np.ones(c, dt)
            shape = out_shape
            continue
        else:
            shape = out_shape
            continue
        b = kaiming_bound(fan_in, a)
        params[f"{i}.weight"] = rng.uniform(-b, b, wshape).astype(dt)
        bb = 1.0 / math.sqrt(fan_in)
        params[f"{i}.bias"] = rng.uniform(-bb, bb, wshape[0]).astype(dt)
        shape = out_shape
    return ParameterSet(params, buffers)


# -- forward -------------------------------------------------------------

def forward(spec: NetworkSpec, params: ParameterSet, x, tape: Tape, train: bool = True,
            stats_out: dict | None = None) -> tuple[Var, dict[str, Var]]:
    """Record the network on ``tape``; returns (logits, parameter vars).

    In training mode each batch norm records its batch mean and variance in
    ``stats_out`` (keyed like the buffers) so the caller can update running
    statistics.
    """
    xv = tape.leaf(x)
    pv = {k: tape.param(v, k) for k, v in params.params.items()}
    h = xv
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            h = ops.conv2d(h, pv[f"{i}.weight"], pv[f"{i}.bias"])
        elif isinstance(layer, Linear):
            h = ops.linear(h, pv[f"{i}.weight"], pv[f"{i}.bias"])
        elif isinstance(layer, Pool):
            geom = PoolGeometry(layer.m, layer.n)
            h = ops.maxpool2d(h, geom) if layer.kind == "max" else ops.normpool2d(h, geom)
        elif isinstance(layer, Relu):
            h = ops.relu(h)
        elif isinstance(layer, Flatten):
            h = ops.flatten(h)
        elif isinstance(layer, BatchNorm):
            running = None if train else (params.buffers[f"{i}.mean"], params.buffers[f"{i}.var"])
            h = ops.batchnorm(h, pv[f"{i}.gamma"], pv[f"{i}.beta"], layer.eps, running)
            if train and stats_out is not None:
                stats_out[f"{i}"] = h.node.ctx
    return h, pv


def forward_loss(spec: NetworkSpec, params: ParameterSet, batch, reduction: str = "mean",
                 train: bool = True, order: ReductionOrder = SEQUENTIAL,
                 update_stats: bool = False) -> tuple[Var, Tape]:
    """Softmax cross-entropy of the network on ``batch = (inputs, labels)``.

    ``update_stats`` applies the momentum update to the batch-norm running
    statistics held in ``params.buffers`` (training mode only).
    """
    x, y = batch
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match network input {spec.input_shape}")
    tape = Tape(spec.precision, order)
    stats: dict = {}
    logits, _ = forward(spec, params, x, tape, train, stats)
    loss = ops.softmax_cross_entropy(logits, y, reduction)
    if update_stats and train:
        _update_running(spec, params, stats)
    return loss, tape


def _update_running(spec: NetworkSpec, params: ParameterSet, stats: dict):
    for key, ctx in stats.items():
        mom = spec.layers[int(key)].momentum
        n = ctx["count"]
        dt = params.buffers[f"{key}.mean"].dtype
        unbiased = ctx["var"].astype(np.float64) * (n / max(n - 1, 1))
        m_old = params.buffers[f"{key}.mean"].astype(np.float64)
        v_old = params.buffers[f"{key}.var"].astype(np.float64)
        params.buffers[f"{key}.mean"] = ((1 - mom) * m_old + mom * ctx["mean"].astype(np.float64)).astype(dt)
        params.buffers[f"{key}.var"] = ((1 - mom) * v_old + mom * unbiased).astype(dt)


def logits(spec: NetworkSpec, params: ParameterSet, x, chunk: int = 500) -> np.ndarray:
    """Eval-mode class scores, computed in chunks."""
    out = []
    for s in range(0, len(x), chunk):
        tape = Tape(spec.precision)
        z, _ = forward(spec, params, x[s:s + chunk], tape, train=False)
        out.append(z.value)
    return np.concatenate(out)


def accuracy(spec: NetworkSpec, params: ParameterSet, x, y, chunk: int = 500) -> float:
    z = logits(spec, params, x, chunk).astype(np.float64)
    z = np.where(np.isnan(z), -np.inf, z)
    return float(np.mean(np.argmax(z, axis=1) == np.asarray(y)))
