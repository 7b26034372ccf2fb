import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from avsr_temporal.autodiff import ConfigurationError, Tape, Value, parameter
from avsr_temporal.temporal import (LN2, NoPairsError, NoWindowsError, Predictors, TemporalConfig,
                                    TemporalPredictor, direction_windows, loss_direction,
                                    loss_order, loss_speed, loss_temp, predictor_logit,
                                    sample_order_pairs, speed_windows)


@given(st.integers(2, 40), st.integers(1, 200), st.integers(0, 10_000))
def test_order_pairs_balanced_and_distinct(T, n, seed):
    pairs = sample_order_pairs(T, n, seed)
    n_eff = min(n, T * (T - 1))
    assert pairs.shape == (n_eff, 2)
    assert np.all(pairs[:, 0] != pairs[:, 1])
    assert len({tuple(p) for p in pairs}) == n_eff
    fwd = int(np.sum(pairs[:, 0] < pairs[:, 1]))
    assert abs(fwd - (n_eff - fwd)) <= 1


def test_order_pairs_need_two_frames():
    with pytest.raises(NoPairsError):
        sample_order_pairs(1, 4, 0)


def test_windows():
    cfg = TemporalConfig()
    fwd, rev = direction_windows(5, cfg)
    np.testing.assert_array_equal(fwd, [[0, 1, 2], [1, 2, 3], [2, 3, 4]])
    np.testing.assert_array_equal(rev, [[2, 1, 0], [3, 2, 1], [4, 3, 2]])
    reg, skip = speed_windows(6, cfg)
    np.testing.assert_array_equal(reg, [[0, 1, 2], [1, 2, 3]])
    np.testing.assert_array_equal(skip, [[0, 2, 4], [1, 3, 5]])


def test_too_short_for_windows():
    with pytest.raises(NoWindowsError):
        direction_windows(2, TemporalConfig())
    with pytest.raises(NoWindowsError):
        speed_windows(4, TemporalConfig())


def test_config_validation():
    for bad in ({"t": 1}, {"k": 1}, {"stride": 0}, {"n_order_pairs": 0}):
        with pytest.raises(ConfigurationError):
            TemporalConfig(**bad)
    assert TemporalConfig().pairs_for(32) == 128


def test_predictor_even_width_rejected():
    with pytest.raises(ConfigurationError):
        TemporalPredictor.init(np.random.default_rng(0), 4, 4, "p", width=2)


def test_predictor_logit_shape():
    g = TemporalPredictor.init(np.random.default_rng(0), 4, 6, "p")
    assert predictor_logit(g, Value(np.ones((2, 7, 3, 4)))).shape == (2, 7, 1, 1)


def test_chance_levels_with_zero_predictor():
    rng = np.random.default_rng(0)
    f_v, f_a = Value(rng.standard_normal((3, 16, 8))), Value(rng.standard_normal((3, 16, 8)))
    cfg = TemporalConfig()
    assert loss_order(f_v, f_a, TemporalPredictor.zeros(16, 4), cfg, [1, 2, 3]).item() == \
        pytest.approx(LN2, abs=1e-12)
    assert loss_direction(f_v, TemporalPredictor.zeros(8, 4), cfg).item() == \
        pytest.approx(2 * math.log(2), abs=1e-12)
    assert loss_speed(f_v, TemporalPredictor.zeros(8, 4), cfg).item() == \
        pytest.approx(2 * math.log(2), abs=1e-12)


def test_direction_loss_hand_computed():
    # with a predictor reading only the temporal difference, direction is
    # separable and the loss follows the closed-form softplus
    D = 1
    g = TemporalPredictor.zeros(D, 1)
    g.kernel.data[:, 0, 0] = [-1.0, 0.0, 1.0]  # h_t = x_{t+1} - x_{t-1}
    g.fc_w.data[:] = 1.0
    x = np.arange(5, dtype=float)[:, None]
    cfg = TemporalConfig()
    fwd, rev = direction_windows(5, cfg)

    def logit(w):  # zero-padded conv, then mean over the window
        seq = np.concatenate([[0.0], x[w, 0], [0.0]])
        return np.mean([seq[i + 2] - seq[i] for i in range(3)])

    softplus = lambda z: math.log1p(math.exp(z))
    want = np.mean([softplus(-logit(f)) + softplus(logit(r)) for f, r in zip(fwd, rev)])
    assert loss_direction(Value(x), g, cfg).item() == pytest.approx(want, abs=1e-12)


def test_order_loss_detaches_audio():
    rng = np.random.default_rng(1)
    f_v, f_a = parameter(rng.standard_normal((2, 8, 4))), parameter(rng.standard_normal((2, 8, 4)))
    g = TemporalPredictor.init(rng, 8, 4, "p")
    with Tape() as tape:
        loss = loss_order(f_v, f_a, g, TemporalConfig(), [0, 1])
    tape.backward(loss)
    assert np.all(f_a.grad == 0.0)
    assert np.any(f_v.grad != 0.0)


def test_loss_temp_sums_components():
    parts = {"order": Value(0.5), "direction": Value(1.25)}
    assert loss_temp(parts).item() == 1.75
    with pytest.raises(ValueError):
        loss_temp({})


def test_predictors_are_independent():
    p = Predictors.init(np.random.default_rng(0), 8, 4, with_v2v=True)
    names = p.named_parameters()
    assert len(names) == 16
    assert p.order.kernel is not p.order_v2v.kernel
    assert p.order.kernel.shape == (3, 16, 4) and p.direction.kernel.shape == (3, 8, 4)
