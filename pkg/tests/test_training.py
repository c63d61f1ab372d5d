import numpy as np
import pytest

from nsad.autodiff import NonsmoothPolicy
from nsad.data import Dataset, synth_tied
from nsad.network import Conv, Flatten, Linear, NetworkSpec, Pool, Relu, init_kaiming_uniform
from nsad.nonsmooth import PoolMode
from nsad.precision import Precision
from nsad.training import (SGD, Adam, TrainConfig, beta_sweep, hybrid_policy, train, weight_divergence)


def tiny(precision=Precision.B32):
    return NetworkSpec((Conv(3, 1), Pool(), Relu(), Flatten(), Linear(10)), (1, 8, 8), precision, name="tiny")


def data(n=32, frac=0.5, seed=0, dtype=np.float32):
    ds = synth_tied(n, frac, size=8, seed=seed)
    return Dataset(ds.images.astype(dtype), ds.labels, "synthetic", 10)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert c.learning_rate == pytest.approx(0.01) and c.precision == "B32"

    @pytest.mark.parametrize("kw", [dict(gamma=0), dict(alpha_q=-1), dict(optimizer="rmsprop"),
                                    dict(batch_size=0), dict(precision="B8")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_json(self):
        d = TrainConfig(policy=hybrid_policy(10)).to_json()
        assert d["policy"]["pool_mode"] == "hybrid:10" and d["order"] == "sequential"


def test_sgd_closed_form():
    cfg = TrainConfig(gamma=0.5, alpha_q=0.2)
    w = {"w": np.array([1.0, -2.0])}
    SGD(cfg).step(w, {"w": np.array([4.0, 8.0])}, batch=4)
    np.testing.assert_array_equal(w["w"], [1.0 - 0.1 * 1.0, -2.0 - 0.1 * 2.0])


def test_adam_matches_scalar_reference():
    cfg = TrainConfig(optimizer="adam", gamma=0.1, alpha_q=1.0)
    opt = Adam(cfg)
    w = {"w": np.array([0.3])}
    grads = [2.0, -1.0, 0.5]
    m = v = 0.0
    ref = 0.3
    for t, g in enumerate(grads, 1):
        opt.step(w, {"w": np.array([g * 2])}, batch=2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert w["w"][0] == pytest.approx(ref, rel=1e-12)


def test_adam_keeps_dtype():
    w = {"w": np.ones(3, np.float16)}
    Adam(TrainConfig(optimizer="adam")).step(w, {"w": np.ones(3, np.float16)}, 1)
    assert w["w"].dtype == np.float16


def test_linear_model_loss_decreases():
    spec = NetworkSpec((Flatten(), Linear(10)), (1, 8, 8), Precision.B64, name="linear")
    ds = data(64, 0.0, dtype=np.float64)
    # full-batch gradient descent on a convex loss with a small step
    trace, _ = train(spec, TrainConfig(gamma=0.05, batch_size=64, epochs=8, precision="B64"), ds, ds)
    losses = [e.train_loss for e in trace.epochs]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert not trace.diverged and trace.steps == 8


def test_deterministic():
    cfg = TrainConfig(batch_size=8, epochs=2)
    a = train(tiny(), cfg, data())[1].flat()
    b = train(tiny(), cfg, data())[1].flat()
    assert a.tobytes() == b.tobytes()


def test_hybrid_zero_is_native():
    cfg = TrainConfig(batch_size=8, epochs=2)
    a = train(tiny(), cfg, data())[1].flat()
    b = train(tiny(), TrainConfig(batch_size=8, epochs=2, policy=hybrid_policy(0)), data())[1].flat()
    assert a.tobytes() == b.tobytes()


def test_epoch_zero_callback_and_halting():
    seen = []
    trace, _ = train(tiny(), TrainConfig(batch_size=8, epochs=2), data(), on_epoch=lambda e, p: seen.append(e))
    assert seen == [0, 1, 2]
    trace, _ = train(tiny(), TrainConfig(gamma=1e30, batch_size=8, epochs=3), data())
    assert trace.diverged


def checkerboard(n=8, seed=0):
    # 2x2 box filter of a checkerboard is constant: every pooling window is tied
    # while the patches under it differ
    rng = np.random.default_rng(seed)
    sign = np.indices((9, 9)).sum(0) % 2
    imgs = np.stack([np.where(sign, a, b) for a, b in rng.uniform(0, 1, (n, 2))])[:, None]
    return Dataset(imgs.astype(np.float32), rng.integers(0, 10, n), "checkerboard", 10)


def test_grad_scale_grows_with_beta():
    spec = NetworkSpec((Conv(1, 2), Pool(), Relu(), Flatten(), Linear(10)), (1, 9, 9), name="box")
    init = init_kaiming_uniform(spec, 0)
    init.params["0.weight"][:] = 0.25
    init.params["0.bias"][:] = 0.1
    g = []
    for beta in (1, 10, 1e2, 1e3, 1e4):
        trace, _ = train(spec, TrainConfig(batch_size=8, epochs=1, policy=hybrid_policy(beta)), checkerboard(),
                         init=init)
        g.append(trace.step0_grad_l1)
    assert all(b >= a for a, b in zip(g, g[1:])) and g[-1] > 10 * g[0]


def test_flat_patch_ties_cancel():
    # when every patch under a tied window is the same the blend sums back to g
    ds = data(16, 1.0)
    g = [train(tiny(), TrainConfig(batch_size=16, epochs=1, policy=hybrid_policy(b)), ds)[0].step0_grad_l1
         for b in (0, 1e4)]
    assert g[1] == pytest.approx(g[0], rel=1e-3)


def test_weight_divergence():
    res = weight_divergence(tiny(), TrainConfig(batch_size=8, epochs=2), [0, 1, 100], data(32, 1.0))
    assert set(res.distances) == {"0 vs 0", "0 vs 1", "0 vs 100"}
    assert res.distances["0 vs 0"] == [0.0, 0.0, 0.0]
    assert res.distances["0 vs 100"][0] == 0.0 and res.distances["0 vs 100"][-1] > 0
    with pytest.raises(ValueError):
        weight_divergence(tiny(), TrainConfig(), [], data())


def test_beta_sweep_cells():
    cells = beta_sweep(lambda bn, p: tiny(p), TrainConfig(batch_size=8, epochs=1), ["B32", "B64"], [0, 10],
                       seeds=(0, 1), train_set=data(16), test_set=data(16, seed=1))
    assert len(cells) == 8
    assert {(c.precision, c.beta, c.seed) for c in cells} == {(p, b, s) for p in ("B32", "B64")
                                                             for b in (0.0, 10.0) for s in (0, 1)}
    assert all(0 <= c.final_accuracy <= 1 for c in cells)


def test_b16_master_weights():
    trace, p = train(tiny(Precision.B16), TrainConfig(batch_size=8, epochs=1, precision="B16"),
                     data(dtype=np.float16))
    assert p.params["0.weight"].dtype == np.float16 and trace.steps == 4
    init = init_kaiming_uniform(tiny(Precision.B16), 0)
    assert p.flat().tobytes() != init.flat().tobytes()


def test_minimal_policy_trains():
    pol = NonsmoothPolicy(pool_mode=PoolMode.minimal())
    trace, _ = train(tiny(), TrainConfig(batch_size=8, epochs=1, policy=pol), data())
    assert trace.steps == 4
