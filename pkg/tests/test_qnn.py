
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distforge.nn import SOFTPLUS_SHIFT
from distforge.qnn import (
    Batch,
    BenchmarkNet,
    EarlyStopping,
    Ensemble,
    ForecastTable,
    InputError,
    TrainConfig,
    TwoStageNet,
    aggregated_loss,
    benchmark_nets,
    epochs_for,
    fit_ensemble,
    fit_model,
    raw_head_loss,
    train,
)
from distforge.taus import pinball, tau_grid

TAUS = np.linspace(0.1, 0.9, 9)


def small_net(seed=0, **kw):
    return TwoStageNet(5, 3, taus=TAUS, hidden=(8, 8, 4, 8, 8), market_hidden=4,
                       seed=seed, **kw)


def smooth_batch(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 5))
    r = 0.05 * (x[:, 0] + 0.5 * x[:, 1]) + 0.02 * rng.standard_normal(n)
    return Batch(x, np.zeros((n, 3)), np.full(n, 0.05), r)


# ---------------------------------------------------------------- tau grid


def test_default_grid_has_37_levels():
    g = tau_grid()
    assert g.size == 37 and g[0] == 0.00005 and g[-1] == 0.99995
    assert np.all(np.diff(g) > 0)
    assert {0.075, 0.925, 0.5}.issubset(set(np.round(g, 6)))


@pytest.mark.parametrize("bad", [[0.5, 0.4], [0.0, 0.5], [0.5, 1.0], []])
def test_invalid_tau_grids_rejected(bad):
    with pytest.raises(ValueError):
        tau_grid(bad)


# ---------------------------------------------------------------- pinball


@pytest.mark.parametrize("tau, xi, expected", [(0.9, 1.0, 0.9), (0.9, -1.0, 0.1),
                                               (0.3, 0.0, 0.0), (0.01, 0.0, 0.0)])
def test_pinball_definition(tau, xi, expected):
    assert pinball(tau, xi) == pytest.approx(expected)


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.2, 1.5])
def test_pinball_rejects_tau_outside_unit_interval(tau):
    with pytest.raises(ValueError):
        pinball(tau, 0.1)


@given(st.floats(0.001, 0.999), st.floats(-1e3, 1e3))
def test_pinball_non_negative(tau, xi):
    assert pinball(tau, xi) >= 0.0


# ---------------------------------------------------------------- losses


def test_aggregated_loss_perfect_forecasts_zero():
    r = np.array([0.1, -0.2])
    q = np.tile(r[:, None], (1, 3))
    assert aggregated_loss(r, r / 0.1, q, q / 0.1, np.array([0.1, 0.5, 0.9])) == 0.0


def test_aggregated_loss_single_record_arithmetic():
    one = np.array([1.0])
    assert aggregated_loss(one, one, np.zeros((1, 1)), np.zeros((1, 1)),
                           np.array([0.5])) == pytest.approx(1.0)


def test_aggregated_loss_matches_double_loop(rng):
    B, K = 7, 5
    taus = np.sort(rng.uniform(0.01, 0.99, K))
    r, rs = rng.normal(size=B), rng.normal(size=B)
    q, qs = rng.normal(size=(B, K)), rng.normal(size=(B, K))
    total = 0.0
    for i in range(B):
        for k in range(K):
            total += pinball(taus[k], r[i] - q[i, k]) + pinball(taus[k], rs[i] - qs[i, k])
    assert aggregated_loss(r, rs, q, qs, taus) == pytest.approx(total / (B * K), rel=1e-14)


def test_raw_head_loss_is_aggregated_without_standardised_term(rng):
    r = rng.normal(size=6)
    rs = r / 0.2
    q = rng.normal(size=(6, TAUS.size))
    perfect_std = np.tile(rs[:, None], (1, TAUS.size))
    assert raw_head_loss(r, q, TAUS) == pytest.approx(aggregated_loss(r, rs, q, perfect_std, TAUS))


@pytest.mark.parametrize("n, expected", [(3_000_000, 100), (6_000_000, 50),
                                         (1_000_000_000, 1)])
def test_epochs_for(n, expected):
    assert epochs_for(n, 3_000_000) == expected


def test_epochs_for_requires_positive_count():
    with pytest.raises(ValueError):
        epochs_for(0)


# ---------------------------------------------------------------- forward pass


def _last_dense(net, prefix):
    ws = [k for k in net.store.params if k.startswith(prefix + ".") and k.endswith(".W")]
    w = max(ws, key=lambda k: int(k.split(".")[1]))
    return w, w[:-2] + ".b"


def _force_unit_market(net):
    w, b = _last_dense(net, "mkt")
    net.store.params[w][...] = 0.0
    net.store.params[b][...] = 0.0


def test_unit_market_scalar_gives_std_times_sigma_bar(rng):
    net = small_net()
    _force_unit_market(net)
    x, z = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
    sbar = np.array([0.05, 0.1, 0.2, 0.3])
    out = net.forward(x, z, sbar)
    assert np.allclose(out["market"], 1.0, atol=1e-15)
    np.testing.assert_allclose(out["raw"], out["std"] * sbar[:, None], rtol=1e-14)
    assert np.log1p(np.exp(SOFTPLUS_SHIFT)) == pytest.approx(1.0)


def test_large_negative_standardised_output_clips_raw_at_minus_one(rng):
    net = small_net()
    _force_unit_market(net)
    w, b = _last_dense(net, "std")
    net.store.params[w][...] = 0.0
    net.store.params[b][...] = -20.0
    out = net.forward(rng.normal(size=(2, 5)), rng.normal(size=(2, 3)), np.array([0.1, 0.1]))
    assert np.all(out["raw"] == -1.0)
    # the standardised head floors at a -100% return expressed in std units
    assert np.all(out["std"] == -1.0 / 0.1)


def test_nonpositive_sigma_bar_rejected(rng):
    net = small_net()
    with pytest.raises(InputError):
        net.forward(rng.normal(size=(2, 5)), rng.normal(size=(2, 3)), np.array([0.1, 0.0]))


def test_market_scalar_identical_across_stocks_of_a_date(rng):
    net = small_net()
    z = np.tile(rng.normal(size=(1, 3)), (6, 1))
    out = net.forward(rng.normal(size=(6, 5)), z, np.full(6, 0.1))
    assert np.ptp(out["market"]) == 0.0 and np.all(out["market"] > 0)


def test_bottleneck_width_and_input_sizes():
    net = TwoStageNet()
    assert net.stage1.n_in == 176 and net.market.n_in == 18
    widths = [s.width for s in net.stage1.specs if s.kind == "dense"]
    assert widths == [128, 128, 4, 128, 128, 37]
    assert [s.width for s in net.market.specs if s.kind == "dense"] == [8, 1]


# ---------------------------------------------------------------- benchmarks


def test_benchmark_architectures():
    shape = lambda net: [s.width for s in net.net.specs if s.kind == "dense"]
    assert shape(benchmark_nets("LNN")) == [37]
    assert shape(benchmark_nets("1hNN")) == [128, 37]
    assert shape(benchmark_nets("1hNN", width=32)) == [32, 37]
    assert shape(benchmark_nets("2hNN")) == [128, 128, 37]
    assert shape(benchmark_nets("2hNN-MSE")) == [128, 128, 1]
    with pytest.raises(ValueError):
        benchmark_nets("3hNN")


def test_lnn_zero_weights_returns_bias(rng):
    net = BenchmarkNet("LNN", n_stock=5, taus=TAUS)
    net.store.params["LNN.0.W"][...] = 0.0
    bias = np.linspace(-0.5, 0.5, TAUS.size)
    net.store.params["LNN.0.b"][...] = bias
    out = net.forward(rng.normal(size=(3, 5)))
    np.testing.assert_array_equal(out["raw"], np.tile(bias, (3, 1)))


def test_mse_network_learns_constant_target(rng):
    n = 2000
    b = Batch(rng.normal(size=(n, 5)), np.zeros((n, 1)), np.ones(n), np.full(n, 0.3))
    net = BenchmarkNet("2hNN-MSE", n_stock=5, width=16, dropout=0.0)
    fit_model(net, b, TrainConfig(batch_size=128, lr=3e-3, patience=5, max_epochs=60))
    pred = net.forward(b.x[:200])["mean"]
    assert abs(pred.mean() - 0.3) < 0.02


# ---------------------------------------------------------------- training


def test_patience_rule_example():
    stop = EarlyStopping(patience=2)
    flags = [stop.update(e, v) for e, v in enumerate([3.0, 2.0, 2.5, 2.4])]
    assert [f[1] for f in flags] == [False, False, False, True]
    assert stop.best_epoch == 1


def test_fit_restores_best_validation_state():
    net = small_net()
    hist = fit_model(net, smooth_batch(), TrainConfig(batch_size=256, max_epochs=6))
    assert hist.best_epoch == int(np.argmin(hist.val_loss))


def test_training_loss_non_increasing_in_most_runs():
    mono = 0
    for s in range(10):
        net = small_net(seed=s)
        h = fit_model(net, smooth_batch(seed=s),
                      TrainConfig(batch_size=256, patience=100, max_epochs=8, lr=1e-3),
                      seed=s)
        mono += bool(np.all(np.diff(h.train_loss) <= 0))
    assert mono >= 9


def test_identical_seeds_give_identical_checkpoints():
    stores = []
    for _ in range(2):
        net = small_net(seed=4)
        fit_model(net, smooth_batch(), TrainConfig(batch_size=256, max_epochs=3), seed=9)
        stores.append(net.store)
    for k in stores[0].params:
        assert stores[0].params[k].tobytes() == stores[1].params[k].tobytes()


def test_ensemble_of_identical_members_equals_single_member():
    b = smooth_batch(200)
    net = small_net(seed=2)
    single = net.forward(b.x, b.z, b.sigma_bar)
    ens = Ensemble([net, net, net]).predict(b)
    np.testing.assert_allclose(ens["raw"], np.sort(single["raw"], axis=1), rtol=1e-14)


def test_ensemble_output_monotone_in_tau():
    b = smooth_batch(500)
    ens, hists = fit_ensemble(lambda j: small_net(seed=j), b,
                              TrainConfig(batch_size=256, max_epochs=2, ensemble_size=3))
    pred = ens.predict(b)
    assert np.all(np.diff(pred["raw"], axis=1) >= 0) and len(hists) == 3


class _Design:
    def __init__(self, b, dates):
        self.b, self.dates = b, dates

    def batch(self, mask):
        return self.b.take(mask)

    def keys(self, mask):
        return np.array([f"S{i}" for i in np.flatnonzero(mask)]), self.dates[mask]


def test_train_skips_empty_window_and_fine_tunes():
    b = smooth_batch(600)
    dates = np.repeat(np.arange(6), 100)
    design = _Design(b, dates)
    windows = [(dates < 0, dates == 2),            # no training rows
               (dates < 3, dates == 3),
               (dates < 4, dates == 4)]
    cfg = TrainConfig(batch_size=128, max_epochs=2, ensemble_size=2)
    with pytest.warns(UserWarning, match="no training rows"):
        ens, table, hists = train(design, cfg, windows, lambda j: small_net(seed=j))
    assert len(ens) == 2 and len(table) == 200 and table.monotone()
    assert np.all(table.q_raw >= -1.0)


def test_forecast_table_select_and_concat():
    t = ForecastTable(np.array(["a", "b"]), np.array([1, 1]), TAUS,
                      np.tile(TAUS, (2, 1)), np.tile(TAUS, (2, 1)))
    both = ForecastTable.concat([t.select(np.array([True, False])),
                                 t.select(np.array([False, True]))])
    assert list(both.stock_id) == ["a", "b"] and both.monotone()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(val_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(ensemble_size=0)
    assert TrainConfig().batch_size == 8192 and TrainConfig().ensemble_size == 20
