import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nsad.autodiff import NonsmoothPolicy
from nsad.data import Dataset, batches, synth_tied
from nsad.network import Conv, Flatten, Linear, NetworkSpec, Pool, Relu
from nsad.nonsmooth import PoolMode
from nsad.precision import Precision, ReductionOrder
from nsad.variation import (Program, ProgramPair, VariationRecord, VariationResult, classify_zone, draw_seed,
                            estimate_tau1, estimate_tau2, find_modes, histogram_summary, l1_distance,
                            log_histogram, measure_pairs, measure_variation, read_records_csv, tau1_pair,
                            write_records_csv)

NATIVE = Program(NonsmoothPolicy(pool_mode=PoolMode.native()))
MINIMAL = Program(NonsmoothPolicy(pool_mode=PoolMode.minimal()))


def tiny(precision=Precision.B32):
    # 1x1 conv keeps the ties of the input intact for the pool
    return NetworkSpec((Conv(2, 1), Pool(), Relu(), Flatten(), Linear(10)), (1, 8, 8), precision, name="tiny")


def tied_batches(frac, precision=Precision.B32, n=8, bs=4):
    ds = synth_tied(n, frac, size=8, seed=3)
    ds = Dataset(ds.images.astype(precision.dtype), ds.labels, ds.split, ds.classes)
    return batches(ds, bs)


def test_l1_distance():
    assert l1_distance([1.0, -2.0], [0.5, 1.0]) == 3.5
    assert math.isnan(l1_distance([np.nan], [0.0]))


def test_draw_seed_is_counter_based():
    assert draw_seed(0, 3) == draw_seed(0, 3)
    assert len({draw_seed(0, m) for m in range(50)}) == 50
    assert draw_seed(0, 1) != draw_seed(1, 1)


def test_same_program_gives_zero():
    res = measure_variation(ProgramPair(tiny(), NATIVE, NATIVE), 3, tied_batches(1.0))
    assert len(res.records) == 3 * 2 and np.all(res.values() == 0)


def test_no_ties_no_variation():
    res = measure_variation(ProgramPair(tiny(), NATIVE, MINIMAL), 3, tied_batches(0.0))
    assert np.all(res.values() == 0) and np.all(res.scales() > 0)


def test_ties_give_variation():
    res = measure_variation(ProgramPair(tiny(), NATIVE, MINIMAL), 3, tied_batches(1.0))
    assert np.all(res.values() > 0)


def test_symmetric():
    bt = tied_batches(0.5)
    a = measure_variation(ProgramPair(tiny(), NATIVE, MINIMAL), 2, bt).values()
    b = measure_variation(ProgramPair(tiny(), MINIMAL, NATIVE), 2, bt).values()
    assert a.tobytes() == b.tobytes()


def test_shared_forward_matches_separate():
    bt = tied_batches(0.5)
    both = measure_pairs(tiny(), 2, bt, {"a": (NATIVE, MINIMAL), "b": tau1_pair(seed=2, block=None)})
    alone = measure_variation(ProgramPair(tiny(), NATIVE, MINIMAL), 2, bt)
    assert both["a"].values().tobytes() == alone.values().tobytes()
    assert len(both["b"].records) == len(alone.records)


def test_tau1_sequential_b64_is_zero():
    est = estimate_tau1(tiny(Precision.B64), 2, tied_batches(0.5, Precision.B64), seed=None)
    assert est.value == 0.0 and not est.positive and est.note


def test_tau1_shuffled_reproducible():
    bt = tied_batches(0.5)
    a = estimate_tau1(tiny(), 2, bt, block=None)
    b = estimate_tau1(tiny(), 2, bt, block=None)
    assert a.value == b.value


def test_tau2_positive_on_relu_ties():
    # a zero-weight conv channel feeds exact zeros into relu
    ds = synth_tied(4, 0.0, size=8, seed=0)
    bt = batches(Dataset(np.zeros_like(ds.images, dtype=np.float32), ds.labels, "zeros", 10), 4)
    est = estimate_tau2(tiny(), 2, bt)
    assert est.kind == "tau2"
    # zero inputs give conv output = bias, ties in every window but relu inputs only vanish by chance
    assert est.value >= 0


def test_repeats_reuse_draws():
    bt = tied_batches(0.5)
    res = measure_pairs(tiny(), 2, bt, {"t": tau1_pair(seed=1, block=None)}, repeats=3)["t"]
    assert len(res.records) == 2 * 2 * 3
    assert {(r.m, r.q) for r in res.records} == {(m, q) for m in range(2) for q in range(2)}


def test_input_errors():
    with pytest.raises(ValueError):
        measure_pairs(tiny(), 0, tied_batches(0.5), {"a": (NATIVE, MINIMAL)})
    with pytest.raises(ValueError):
        measure_pairs(tiny(), 1, [], {"a": (NATIVE, MINIMAL)})


def recs(values):
    return [VariationRecord(m, q, d) for (m, q), d in values]


class TestZones:
    def test_example(self):
        r = recs([((0, 0), 0.0), ((0, 1), 2e-3), ((1, 0), 1e-5), ((1, 1), 1e-6), ((2, 0), 0.0), ((2, 1), 0.0)])
        z = classify_zone(r, 1e-4)
        assert z.in_s == {0: True, 1: False, 2: False}
        assert z.n_in_s == 1 and z.n_impacted == 1

    def test_strict_threshold(self):
        assert classify_zone(recs([((0, 0), 1.0)]), 1.0).n_in_s == 0

    def test_nan_skipped(self):
        r = recs([((0, 0), 5.0)]) + [VariationRecord(1, 0, float("nan"), nan=True)]
        assert classify_zone(r, 0).in_s == {0: True}

    def test_negative_tau(self):
        with pytest.raises(ValueError):
            classify_zone([], -1.0)

    @given(st.lists(st.floats(0, 1e3, allow_subnormal=False), min_size=1, max_size=40),
           st.floats(0, 1e3), st.floats(0, 1e3))
    def test_monotone_in_tau(self, ds, t1, t2):
        r = [VariationRecord(i // 4, i % 4, d) for i, d in enumerate(ds)]
        lo, hi = sorted((t1, t2))
        a, b = classify_zone(r, lo), classify_zone(r, hi)
        assert a.n_in_s >= b.n_in_s and a.n_impacted >= b.n_impacted
        assert classify_zone(r, math.inf).n_in_s == 0


class TestHistogram:
    def test_counts(self):
        edges, counts = log_histogram([1e-3, 2e-3, 5e-3, 1.0, 0.0], width=0.5)
        assert edges[0] == -3.0 and counts.sum() == 4
        assert counts[0] == 2 and counts[1] == 1 and counts[-1] == 1

    def test_empty(self):
        edges, counts = log_histogram([0.0, 0.0])
        assert counts.size == 0

    def test_bimodal(self, rng):
        lo = 10 ** rng.normal(-7, 0.3, 500)
        hi = 10 ** rng.normal(-1, 0.3, 300)
        m = find_modes(np.concatenate([lo, hi]), 1e-4)
        assert m.bimodal and abs(m.lower + 7) <= 0.5 and abs(m.upper + 1) <= 0.5
        assert m.n_lower == 500 and m.n_upper == 300 and m.separation >= 5

    def test_per_record_split(self):
        d = np.array([1e-8, 1e-8, 1e-2, 1e-2])
        m = find_modes(d, np.array([1e-6, 1e-6, 1.0, 1e-3]))
        assert m.n_lower == 3 and m.n_upper == 1

    def test_unimodal(self, rng):
        m = find_modes(10 ** rng.normal(-7, 0.3, 200), 1e-4)
        assert m.upper is None and not m.bimodal


def test_csv_round_trip(tmp_path):
    res = VariationResult(recs([((0, 0), 0.1), ((0, 1), 1e-300)]), policy_p="p", policy_q="q", precision="B32")
    write_records_csv(tmp_path / "r.csv", res)
    back = read_records_csv(tmp_path / "r.csv")
    assert [(r.m, r.q, r.d) for r in back] == [(0, 0, 0.1), (0, 1, 1e-300)]
    s = histogram_summary(res)
    assert s["records"] == 2 and sum(s["counts"]) == 2


def test_normpool_variants_differ_only_on_zero_windows():
    spec = NetworkSpec((Conv(2, 1), Pool(kind="norm"), Relu(), Flatten(), Linear(10)), (1, 8, 8), name="np")
    ds = synth_tied(8, 0.5, size=8, seed=1)
    bt = batches(Dataset(ds.images.astype(np.float32), ds.labels, "s", 10), 4)
    p = Program(NonsmoothPolicy(pool_mode=PoolMode.parse("normpool-zero")))
    q = Program(NonsmoothPolicy(pool_mode=PoolMode.parse("normpool-uniform")))
    # without an all-zero window both variants take the smooth branch
    assert np.all(measure_variation(ProgramPair(spec, p, q), 2, bt).values() == 0)


def test_order_labels():
    p = Program(order=ReductionOrder.shuffled(3, 256))
    assert str(p).endswith("blocked(3,256)")
