"""Monte Carlo estimates of the share of parameters where two programs disagree.

For M parameter draws and R mini-batches, with variation records d[m, q]:

    prop_theta_in_S       = (1/M)     sum_m 1[max_q d[m, q] > tau]
    prop_batches_impacted = (1/(M R)) sum_{m,q} 1[d[m, q] > tau]

with a Hoeffding margin for the first (n = M iid draws) and a McDiarmid
margin for the second (bounded differences 1/M per draw, 1/R per batch).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

from .data import Dataset, batches as make_batches
from .network import NetworkSpec, build
from .nonsmooth import PoolMode
from .variation import (TAU1_BLOCK, Program, VariationResult, classify_zone, measure_pairs, tau1_from, tau1_pair,
                        tau2_from, tau2_pair)
from .autodiff import NonsmoothPolicy


def hoeffding_margin(n: int, alpha: float = 0.05) -> float:
    """Half-width of the two-sided Hoeffding interval for a mean of n values in [0, 1]."""
    if n < 1 or not 0 < alpha < 1:
        raise ValueError("need n >= 1 and 0 < alpha < 1")
    return math.sqrt(math.log(2.0 / alpha) / (2.0 * n))


def mcdiarmid_margin(m: int, r: int, alpha: float = 0.05) -> float:
    if m < 1 or r < 1 or not 0 < alpha < 1:
        raise ValueError("need M, R >= 1 and 0 < alpha < 1")
    return math.sqrt(0.5 * (1.0 / m + 1.0 / r) * math.log(2.0 / alpha))


@dataclass
class VolumeEstimate:
    prop_theta_in_S: float
    prop_batches_impacted: float
    hoeffding_margin: float
    mcdiarmid_margin: float
    alpha: float
    M: int
    R: int
    tau: float
    label: str = ""
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def volume_from_records(records, tau: float, alpha: float = 0.05, label: str = "") -> VolumeEstimate:
    zones = classify_zone(records, tau)
    draws = sorted(zones.in_s)
    m = len(draws)
    if m == 0:
        raise ValueError("no valid records")
    r = len(zones.impacted) // m
    theta = zones.n_in_s / m
    batch = zones.n_impacted / len(zones.impacted)
    return VolumeEstimate(theta, batch, hoeffding_margin(m, alpha), mcdiarmid_margin(m, max(r, 1), alpha),
                          alpha, m, r, float(tau), label)


@dataclass
class VolumeConfig:
    """Everything that defines one zone-volume estimate."""

    network: str = "lenet5"
    precision: str = "B32"
    batch_size: int = 128
    subset: int = 2048
    draws: int = 100
    seed: int = 0
    alpha: float = 0.05
    pool_p: str = "native"
    pool_q: str = "minimal"
    tau: str = "tau1"  # "tau1", "tau2" or a number
    tau1_seed: int = 1
    tau1_block: int = TAU1_BLOCK  # 0 shuffles every term of every reduction

    def spec(self) -> NetworkSpec:
        return build(self.network, precision=self.precision, seed=self.seed)


@dataclass
class VolumeRun:
    estimate: VolumeEstimate
    pq: VariationResult
    tau_result: VariationResult | None
    tau: float
    tau_positive: bool


def estimate_volume(cfg: VolumeConfig, data: Dataset, on_record=None) -> VolumeRun:
    """Variation records for P vs Q over ``cfg.draws`` draws, thresholded at tau.

    With ``tau="tau1"`` the threshold is the largest variation between P and
    P under a shuffled backward order, measured on the same forward passes.
    """
    spec = cfg.spec()
    bt = make_batches(data, cfg.batch_size)
    p = Program(NonsmoothPolicy(pool_mode=PoolMode.parse(cfg.pool_p)))
    q = Program(NonsmoothPolicy(pool_mode=PoolMode.parse(cfg.pool_q)))
    pairs = {"pq": (p, q)}
    if cfg.tau == "tau1":
        pairs["tau"] = tau1_pair(PoolMode.parse(cfg.pool_p), cfg.tau1_seed, block=cfg.tau1_block or None)
    elif cfg.tau == "tau2":
        pairs["tau"] = tau2_pair(PoolMode.parse(cfg.pool_p))
    res = measure_pairs(spec, cfg.draws, bt, pairs, cfg.seed, on_record=on_record)
    positive = True
    if cfg.tau == "tau1":
        tau = tau1_from(res["tau"])
        positive = tau > 0
    elif cfg.tau == "tau2":
        tau, positive = tau2_from(res["tau"])
    else:
        tau = float(cfg.tau)
    est = volume_from_records(res["pq"].records, tau, cfg.alpha, f"{spec.name}/{spec.precision}")
    est.meta = {"config": asdict(cfg), "tau_source": cfg.tau, "tau_positive": positive,
                "nan_records": res["pq"].nan_count}
    return VolumeRun(est, res["pq"], res.get("tau"), tau, positive)


SWEEP_DIMENSIONS = ("batch_size", "depth", "batchnorm", "precision")


def sweep_configs(base: VolumeConfig, dimension: str, values) -> list[VolumeConfig]:
    """One config per value with everything else (including the seed) held fixed."""
    if dimension not in SWEEP_DIMENSIONS:
        raise ValueError(f"unknown sweep dimension {dimension!r}; expected one of {SWEEP_DIMENSIONS}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    out = []
    for v in values:
        if dimension == "batch_size":
            out.append(replace(base, batch_size=int(v)))
        elif dimension == "precision":
            out.append(replace(base, precision=str(v)))
        elif dimension == "depth":
            bn = base.network.endswith("-bn")
            out.append(replace(base, network=f"convstack{int(v)}" + ("-bn" if bn else "")))
        else:
            on = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "on", "yes")
            stem = base.network.removesuffix("-bn")
            out.append(replace(base, network=stem + ("-bn" if on else "")))
    return out


def sweep(base: VolumeConfig, dimension: str, values, data: Dataset) -> list[VolumeRun]:
    return [estimate_volume(c, data) for c in sweep_configs(base, dimension, values)]
