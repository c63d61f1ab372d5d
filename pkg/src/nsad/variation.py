"""Gradient variation between two differentiations of one forward tape.

For parameter draw ``m`` and mini-batch ``q`` the variation is the L1
distance between the gradients two programs return for the summed batch
loss.  Both programs differentiate the same recorded forward pass; they may
differ in the nonsmooth policy and in the reduction order of the backward.
The L1 sum itself is taken in float64.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NonsmoothPolicy, backprop
from .network import NetworkSpec, ParameterSet, forward_loss, init_kaiming_uniform
from .nonsmooth import PoolMode
from .precision import SEQUENTIAL, ReductionOrder


@dataclass(frozen=True)
class Program:
    """A way of differentiating a tape: nonsmooth policy plus backward reduction order."""

    policy: NonsmoothPolicy = NonsmoothPolicy()
    order: ReductionOrder = SEQUENTIAL

    def __str__(self) -> str:
        return f"{self.policy}/{self.order}"


@dataclass(frozen=True)
class ProgramPair:
    spec: NetworkSpec
    p: Program
    q: Program
    label: str = ""


@dataclass
class VariationRecord:
    m: int
    q: int
    d: float
    scale: float = 0.0  # L1 norm of the P gradient
    nan: bool = False
    seed: int = 0


@dataclass
class VariationResult:
    records: list[VariationRecord]
    nan_count: int = 0
    label: str = ""
    precision: str = ""
    policy_p: str = ""
    policy_q: str = ""

    @property
    def valid(self) -> list[VariationRecord]:
        return [r for r in self.records if not r.nan]

    def values(self) -> np.ndarray:
        return np.array([r.d for r in self.valid])

    def scales(self) -> np.ndarray:
        return np.array([r.scale for r in self.valid])


def draw_seed(root: int, m: int) -> int:
    """Counter-based seed for parameter draw ``m``."""
    return int(np.random.SeedSequence([root, m]).generate_state(1, np.uint64)[0])


def draw_parameters(spec: NetworkSpec, m: int, root_seed: int) -> ParameterSet:
    return init_kaiming_uniform(spec, draw_seed(root_seed, m))


def l1_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return float(np.sum(np.abs(a - b)))


def _vary_order(order: ReductionOrder, m: int, q: int, rep: int) -> ReductionOrder:
    return order if order.is_sequential else order.derive(m, q, rep)


def measure_pairs(spec: NetworkSpec, n_draws: int, batches, pairs: dict[str, tuple[Program, Program]],
                  root_seed: int = 0, repeats: int = 1, on_record=None) -> dict[str, VariationResult]:
    """Variation records for several program pairs sharing every forward pass.

    Shuffled orders are re-derived for each (m, q, repeat) so that every
    record sees an independent accumulation order; ``repeats`` > 1 adds more
    independent re-runs (records share ``m`` and ``q``).
    """
    if n_draws < 1:
        raise ValueError("need at least one parameter draw")
    if not batches:
        raise ValueError("no mini-batches")
    results = {k: VariationResult([], label=k, precision=str(spec.precision),
                                  policy_p=str(p), policy_q=str(q)) for k, (p, q) in pairs.items()}
    for m in range(n_draws):
        seed = draw_seed(root_seed, m)
        params = init_kaiming_uniform(spec, seed)
        for qi, batch in enumerate(batches):
            loss, tape = forward_loss(spec, params, batch, reduction="sum")
            for rep in range(repeats):
                cache: dict = {}

                def grad(prog: Program):
                    order = _vary_order(prog.order, m, qi, rep)
                    key = (prog.policy, order)
                    if key not in cache:
                        g = backprop(tape, loss, prog.policy, order)
                        cache[key] = (g.flat(np.float64), g.nan)
                    return cache[key]

                for label, (p, q) in pairs.items():
                    if rep > 0 and p.order.is_sequential and q.order.is_sequential:
                        continue
                    gp, nan_p = grad(p)
                    gq, nan_q = grad(q)
                    nan = nan_p or nan_q
                    d = l1_distance(gp, gq)
                    rec = VariationRecord(m, qi, d, float(np.sum(np.abs(gp))), nan or not math.isfinite(d), seed)
                    res = results[label]
                    res.records.append(rec)
                    res.nan_count += int(rec.nan)
                    if on_record is not None:
                        on_record(label, rec)
    return results


def measure_variation(pair: ProgramPair, n_draws: int, batches, root_seed: int = 0,
                      repeats: int = 1) -> VariationResult:
    out = measure_pairs(pair.spec, n_draws, batches, {pair.label or "pq": (pair.p, pair.q)},
                        root_seed, repeats)
    return next(iter(out.values()))


# -- thresholds ------------------------------------------------------------

@dataclass
class ThresholdEstimate:
    kind: str  # "tau1" or "tau2"
    value: float
    precision: str
    draws: int
    batch_size: int
    network: str
    positive: bool = True  # False: no strictly positive variation observed
    records: int = 0

    @property
    def note(self) -> str:
        return "" if self.positive else "no positive variation observed"


def tau1_from(result: VariationResult) -> float:
    v = result.values()
    return float(v.max()) if v.size else 0.0


def tau2_from(result: VariationResult) -> tuple[float, bool]:
    v = result.values()
    v = v[v > 0]
    return (float(v.min()), True) if v.size else (0.0, False)


TAU1_BLOCK = 256


def tau1_pair(pool_mode: PoolMode = PoolMode.native(), seed: int | None = 1, shuffled_reference: bool = True,
              block: int | None = TAU1_BLOCK):
    """Two runs of the same program under independently shuffled orders.

    ``block`` is the block length of the shuffled orders (None shuffles every
    term).  With ``shuffled_reference=False`` the first run keeps the
    sequential order instead; ``seed=None`` switches the emulated
    nondeterminism off.
    """
    pol = NonsmoothPolicy(pool_mode=pool_mode)
    if seed is None:
        return Program(pol), Program(pol)
    ref = ReductionOrder.shuffled(seed + 7919, block) if shuffled_reference else SEQUENTIAL
    return Program(pol, ref), Program(pol, ReductionOrder.shuffled(seed, block))


def tau2_pair(pool_mode: PoolMode = PoolMode.native()):
    return (Program(NonsmoothPolicy(0.0, pool_mode)), Program(NonsmoothPolicy(1.0, pool_mode)))


def estimate_tau1(spec: NetworkSpec, n_draws: int, batches, pool_mode: PoolMode = PoolMode.native(),
                  seed: int | None = 1, root_seed: int = 0, repeats: int = 1,
                  block: int | None = TAU1_BLOCK) -> ThresholdEstimate:
    pair = tau1_pair(pool_mode, seed, block=block)
    res = measure_pairs(spec, n_draws, batches, {"tau1": pair}, root_seed, repeats)["tau1"]
    v = tau1_from(res)
    return ThresholdEstimate("tau1", v, str(spec.precision), n_draws, len(batches[0][1]), spec.name,
                             v > 0, len(res.records))


def estimate_tau2(spec: NetworkSpec, n_draws: int, batches, pool_mode: PoolMode = PoolMode.native(),
                  root_seed: int = 0) -> ThresholdEstimate:
    res = measure_pairs(spec, n_draws, batches, {"tau2": tau2_pair(pool_mode)}, root_seed)["tau2"]
    v, pos = tau2_from(res)
    return ThresholdEstimate("tau2", v, str(spec.precision), n_draws, len(batches[0][1]), spec.name,
                             pos, len(res.records))


# -- zones -----------------------------------------------------------------

@dataclass
class ZoneClassification:
    tau: float
    in_s: dict[int, bool] = field(default_factory=dict)
    impacted: dict[tuple[int, int], bool] = field(default_factory=dict)

    @property
    def n_in_s(self) -> int:
        return sum(self.in_s.values())

    @property
    def n_impacted(self) -> int:
        return sum(self.impacted.values())


def classify_zone(records, tau: float) -> ZoneClassification:
    """A draw is in S iff one of its batches has variation strictly above ``tau``."""
    if not tau >= 0:
        raise ValueError(f"tau must be >= 0, got {tau}")
    out = ZoneClassification(tau)
    for r in records:
        if r.nan:
            continue
        hit = r.d > tau
        key = (r.m, r.q)
        out.impacted[key] = out.impacted.get(key, False) or hit
        out.in_s[r.m] = out.in_s.get(r.m, False) or hit
    return out


# -- histograms and modes ------------------------------------------------------

def log_histogram(values, width: float = 0.5, lo: float | None = None, hi: float | None = None):
    """Counts of log10(d) for the positive values, bins ``width`` decades wide."""
    v = np.asarray(values, dtype=np.float64)
    v = v[v > 0]
    if v.size == 0:
        return np.zeros(0), np.zeros(0, dtype=int)
    logs = np.log10(v)
    lo = math.floor(logs.min() / width) * width if lo is None else lo
    hi = (math.floor(logs.max() / width) + 1) * width if hi is None else hi
    edges = np.arange(lo, hi + width / 2, width)
    counts, edges = np.histogram(logs, bins=edges)
    return edges, counts


@dataclass
class Modes:
    """Lower (compensation) and upper (bifurcation) modes of a variation histogram."""

    lower: float | None  # log10 of the lower mode's bin centre
    upper: float | None
    lower_count: int = 0
    upper_count: int = 0
    valley: int | None = None  # smallest bin count strictly between the modes
    n_lower: int = 0  # records below the split
    n_upper: int = 0

    @property
    def separation(self) -> float:
        return (self.upper - self.lower) if self.lower is not None and self.upper is not None else 0.0

    @property
    def bimodal(self) -> bool:
        return (self.lower is not None and self.upper is not None and self.valley is not None
                and self.valley < min(self.lower_count, self.upper_count))


def find_modes(d, split, width: float = 0.5) -> Modes:
    """Peak of the log-histogram below ``split`` and peak at or above it.

    ``split`` is a scalar or a per-record array (e.g. a multiple of each
    record's gradient scale).
    """
    d = np.asarray(d, dtype=np.float64)
    split = np.broadcast_to(np.asarray(split, dtype=np.float64), d.shape)
    pos = d > 0
    low, up = d[pos & (d < split)], d[pos & (d >= split)]
    edges, counts = log_histogram(d, width)
    if counts.size == 0:
        return Modes(None, None)
    centres = edges[:-1] + width / 2

    def peak(vals):
        if vals.size == 0:
            return None, 0
        c, _ = np.histogram(np.log10(vals), bins=edges)
        k = int(np.argmax(c))
        return k, int(c[k])

    kl, cl = peak(low)
    ku, cu = peak(up)
    valley = None
    if kl is not None and ku is not None and ku - kl > 1:
        valley = int(counts[kl + 1:ku].min())
    return Modes(None if kl is None else float(centres[kl]), None if ku is None else float(centres[ku]),
                 cl, cu, valley, int(low.size), int(up.size))


# -- output ------------------------------------------------------------------

CSV_COLUMNS = ["m", "q", "d", "scale", "nan", "policyP", "policyQ", "precision", "seed"]


def write_records_csv(path, result: VariationResult):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in result.records:
            w.writerow([r.m, r.q, repr(r.d), repr(r.scale), int(r.nan), result.policy_p, result.policy_q,
                        result.precision, r.seed])


def read_records_csv(path) -> list[VariationRecord]:
    with open(path, newline="") as f:
        return [VariationRecord(int(row["m"]), int(row["q"]), float(row["d"]), float(row["scale"]),
                                bool(int(row["nan"])), int(row["seed"])) for row in csv.DictReader(f)]


def histogram_summary(result: VariationResult, width: float = 0.5) -> dict:
    edges, counts = log_histogram(result.values(), width)
    v = result.values()
    return {
        "label": result.label,
        "precision": result.precision,
        "policyP": result.policy_p,
        "policyQ": result.policy_q,
        "records": len(result.records),
        "nan_records": result.nan_count,
        "zero_records": int(np.sum(v == 0)),
        "log10_bin_edges": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
    }


def threshold_json(t: ThresholdEstimate) -> dict:
    out = asdict(t)
    out["note"] = t.note
    return out


def dump_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=str))
