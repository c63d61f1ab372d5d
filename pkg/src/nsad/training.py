"""SGD and Adam training loops, weight-divergence runs and hybrid-beta sweeps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import NonsmoothPolicy, backprop
from .data import Dataset
from .network import NetworkSpec, ParameterSet, accuracy, forward_loss, init_kaiming_uniform
from .nonsmooth import PoolMode
from .precision import SEQUENTIAL, Precision, ReductionOrder


@dataclass
class TrainConfig:
    optimizer: str = "sgd"  # "sgd" or "adam"
    gamma: float = 0.01  # step size
    alpha_q: float = 1.0  # per-batch learning rate; the effective rate is gamma * alpha_q
    batch_size: int = 128
    epochs: int = 20
    precision: str = "B32"
    policy: NonsmoothPolicy = NonsmoothPolicy()
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    strict_b16: bool = False  # keep weights and optimizer state in binary16 too
    divergence_factor: float = 1e3
    order: ReductionOrder = SEQUENTIAL

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not self.alpha_q > 0:
            raise ValueError(f"alpha_q must be > 0, got {self.alpha_q}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        self.precision = str(Precision.parse(self.precision))

    @property
    def learning_rate(self) -> float:
        return self.gamma * self.alpha_q

    def to_json(self) -> dict:
        d = asdict(self)
        d["policy"] = {"relu_s": self.policy.relu_s, "pool_mode": str(self.policy.pool_mode)}
        d["order"] = str(self.order)
        return d


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    test_accuracy: float
    grad_l1: float  # mean over the epoch's steps of the L1 norm of the applied gradient
    param_l1: float


@dataclass
class TrainTrace:
    epochs: list[EpochStats] = field(default_factory=list)
    diverged: bool = False
    halted: bool = False
    initial_loss: float = float("nan")
    step0_grad_l1: float = float("nan")
    steps: int = 0

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].test_accuracy if self.epochs else float("nan")

    def rows(self) -> list[dict]:
        return [asdict(e) for e in self.epochs]


# -- optimizers --------------------------------------------------------------

class SGD:
    """theta <- theta - gamma * (alpha_q / |B|) * sum_i g_i, rounded in the weights' format."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg

    def step(self, params: dict[str, np.ndarray], grad_sum: dict[str, np.ndarray], batch: int):
        for k, w in params.items():
            dt = w.dtype.type
            rate = dt(self.cfg.gamma * self.cfg.alpha_q / batch)
            params[k] = w - rate * grad_sum[k].astype(w.dtype)


class Adam:
    """Adam with bias correction on the mean gradient (alpha_q / |B|) * sum_i g_i."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grad_sum: dict[str, np.ndarray], batch: int):
        c = self.cfg
        self.t += 1
        for k, w in params.items():
            dt = w.dtype.type
            g = grad_sum[k].astype(w.dtype) * dt(c.alpha_q / batch)
            m = self.m.get(k, np.zeros_like(w))
            v = self.v.get(k, np.zeros_like(w))
            m = dt(c.adam_beta1) * m + dt(1 - c.adam_beta1) * g
            v = dt(c.adam_beta2) * v + dt(1 - c.adam_beta2) * (g * g)
            self.m[k], self.v[k] = m, v
            mhat = m / dt(1 - c.adam_beta1 ** self.t)
            vhat = v / dt(1 - c.adam_beta2 ** self.t)
            params[k] = w - dt(c.gamma) * mhat / (np.sqrt(vhat) + dt(c.adam_eps))


def make_optimizer(cfg: TrainConfig):
    return SGD(cfg) if cfg.optimizer == "sgd" else Adam(cfg)


# -- training loop -------------------------------------------------------------

def _l1(arrays) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        return float(sum(np.sum(np.abs(a.astype(np.float64))) for a in arrays))


def train(spec: NetworkSpec, cfg: TrainConfig, train_set: Dataset, test_set: Dataset | None = None,
          init: ParameterSet | None = None, on_epoch=None) -> tuple[TrainTrace, ParameterSet]:
    """Train from ``init`` (default: Kaiming-uniform with ``cfg.seed``).

    Each epoch visits the training set in a seed-determined order.  The
    divergence flag is set (and stays set) once the batch loss is non-finite
    or exceeds ``divergence_factor`` times the first batch loss; non-finite
    values also halt training.  ``on_epoch(epoch, params)`` sees the weights
    after every epoch (epoch 0 is the initial state).
    """
    spec = spec.with_precision(cfg.precision)
    prec = spec.precision
    # weights live in binary32 for binary16 models unless strict
    master_dt = np.float32 if (prec is Precision.B16 and not cfg.strict_b16) else prec.dtype
    params = (init if init is not None else init_kaiming_uniform(spec, cfg.seed)).copy()
    master = {k: v.astype(master_dt) for k, v in params.params.items()}
    opt = make_optimizer(cfg)
    trace = TrainTrace()
    n = len(train_set)
    rng = np.random.default_rng([cfg.seed, 1])

    def current() -> ParameterSet:
        with np.errstate(over="ignore"):
            return ParameterSet({k: v.astype(prec.dtype) for k, v in master.items()}, params.buffers)

    if on_epoch is not None:
        on_epoch(0, current())
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        losses, gnorms = [], []
        for s in range(0, n - n % cfg.batch_size or n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            model = current()
            with np.errstate(all="ignore"):
                loss, tape = forward_loss(spec, model, (train_set.images[idx], train_set.labels[idx]),
                                          reduction="sum", order=cfg.order, update_stats=True)
                grads = backprop(tape, loss, cfg.policy, cfg.order)
            params.buffers = model.buffers
            batch_loss = float(loss.value) / len(idx)
            if trace.steps == 0:
                trace.initial_loss = batch_loss
                trace.step0_grad_l1 = _l1(grads.values.values()) / len(idx)
            finite = math.isfinite(batch_loss) and not grads.nan
            if not finite or batch_loss > cfg.divergence_factor * trace.initial_loss:
                trace.diverged = True
            if not finite:
                trace.halted = True
                break
            with np.errstate(all="ignore"):
                opt.step(master, grads.values, len(idx))
            trace.steps += 1
            losses.append(batch_loss)
            gnorms.append(_l1(grads.values.values()) * cfg.alpha_q / len(idx))
            if not all(np.isfinite(v).all() for v in master.values()):
                trace.diverged = trace.halted = True
                break
        model = current()
        acc = accuracy(spec, model, test_set.images, test_set.labels) if test_set is not None else float("nan")
        trace.epochs.append(EpochStats(epoch, float(np.mean(losses)) if losses else float("nan"), acc,
                                       float(np.mean(gnorms)) if gnorms else float("nan"), _l1(model.params.values())))
        if on_epoch is not None:
            on_epoch(epoch, model)
        if trace.halted:
            break
    return trace, current()


# -- experiments ---------------------------------------------------------------

def hybrid_policy(beta: float, relu_s: float = 0.0) -> NonsmoothPolicy:
    return NonsmoothPolicy(relu_s, PoolMode.hybrid(beta))


@dataclass
class DivergenceResult:
    betas: list[float]
    distances: dict[str, list[float]]  # "0 vs b" -> per-epoch L1 distance
    traces: dict[str, TrainTrace]


def weight_divergence(spec: NetworkSpec, cfg: TrainConfig, betas, train_set: Dataset,
                      test_set: Dataset | None = None) -> DivergenceResult:
    """Train one network per beta from the same initial weights and data order.

    Distances are ||theta_k(beta_0) - theta_k(beta_i)||_1 per epoch k, plus a
    "0 vs 0" pair from a second run with the reference beta.
    """
    betas = list(betas)
    if not betas:
        raise ValueError("need at least one beta")
    init = init_kaiming_uniform(spec.with_precision(cfg.precision), cfg.seed)
    snaps: dict[str, list[np.ndarray]] = {}
    traces: dict[str, TrainTrace] = {}
    runs = [(f"{b:g}", b) for b in betas] + [(f"{betas[0]:g} (rerun)", betas[0])]
    for name, b in runs:
        snaps[name] = []
        trace, _ = train(spec, replace(cfg, policy=hybrid_policy(b, cfg.policy.relu_s)), train_set, test_set,
                         init, on_epoch=lambda e, p, s=snaps[name]: s.append(p.flat()))
        traces[name] = trace
    ref = f"{betas[0]:g}"
    distances = {}
    for name, _ in runs[1:]:
        a, b = snaps[ref], snaps[name]
        label = f"{ref} vs {name.replace(' (rerun)', '')}"
        distances[label] = [float(np.sum(np.abs(x - y))) for x, y in zip(a, b)]
    return DivergenceResult(betas, distances, traces)


@dataclass
class SweepCell:
    precision: str
    beta: float
    batchnorm: bool
    optimizer: str
    seed: int
    final_accuracy: float
    diverged: bool
    trace: TrainTrace


def beta_sweep(build_spec, cfg: TrainConfig, precisions, betas, batchnorm=(False,), seeds=(0,),
               train_set: Dataset | None = None, test_set: Dataset | None = None) -> list[SweepCell]:
    """Train every (precision, beta, batchnorm, seed) cell.

    ``build_spec(batchnorm: bool, precision) -> NetworkSpec``.
    """
    cells = []
    for prec in precisions:
        for bn in batchnorm:
            spec = build_spec(bn, prec)
            for seed in seeds:
                for beta in betas:
                    c = replace(cfg, precision=str(prec), seed=seed, policy=hybrid_policy(beta, cfg.policy.relu_s))
                    trace, _ = train(spec, c, train_set, test_set)
                    cells.append(SweepCell(c.precision, float(beta), bn, c.optimizer, seed,
                                           trace.final_accuracy, trace.diverged, trace))
    return cells
