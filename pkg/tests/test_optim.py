import math

import numpy as np
import pytest

from eprop.errors import ConfigurationError
from eprop.optim import (
    SCHEDULES,
    AdamState,
    Schedule,
    accumulate,
    adam_update,
    gaussian,
    init_lstm_weights,
    init_weights,
    mask_recurrent_diagonal,
)


def scripted_adam(p, grads, rate, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar loop implementation, written independently of the vectorized one."""
    p = list(p)
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for i in range(len(p)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1**t)
            vh = v[i] / (1 - b2**t)
            p[i] -= rate * mh / (math.sqrt(vh) + eps)
    return np.array(p)


def test_accumulate_trivial_cases():
    assert accumulate([]) == {}
    g = {"in": np.arange(3.0)}
    np.testing.assert_array_equal(accumulate([g])["in"], g["in"])


def test_accumulate_matches_serial_replay():
    rng = np.random.default_rng(0)
    batch = [{"in": rng.normal(size=(2, 3)), "out": rng.normal(size=(1, 2))} for _ in range(5)]
    total = accumulate(batch)
    serial = {"in": np.zeros((2, 3)), "out": np.zeros((1, 2))}
    for g in batch:
        for k in serial:
            serial[k] = serial[k] + g[k]
    for k in serial:
        np.testing.assert_allclose(total[k], serial[k], rtol=1e-14)
    np.testing.assert_allclose(accumulate(batch, "mean")["in"], serial["in"] / 5)
    reversed_total = accumulate(batch[::-1])
    np.testing.assert_allclose(reversed_total["in"], total["in"], rtol=1e-14)


def test_accumulate_rejects_mismatches():
    with pytest.raises(ConfigurationError):
        accumulate([{"in": np.zeros(2)}, {"out": np.zeros(2)}])
    with pytest.raises(ConfigurationError):
        accumulate([{"in": np.zeros(2)}, {"in": np.zeros(3)}])
    with pytest.raises(ConfigurationError):
        accumulate([], "median")


def test_adam_matches_scripted_reference():
    rng = np.random.default_rng(1)
    p0 = rng.normal(size=4)
    grads = rng.normal(size=(10, 4))
    params = {"w": p0.copy()}
    state = AdamState.zeros_like(params)
    for g in grads:
        params, state = adam_update(params, {"w": g}, state, 0.01)
    np.testing.assert_allclose(params["w"], scripted_adam(p0, grads, 0.01), rtol=1e-13)
    assert state.step == 10


def test_adam_zero_gradient_keeps_weights():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState.zeros_like(params)
    for _ in range(20):
        params, state = adam_update(params, {}, state, 0.1)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_constant_gradient_step_tends_to_rate_times_sign():
    params = {"w": np.zeros(3)}
    state = AdamState.zeros_like(params)
    g = {"w": np.array([0.5, -3.0, 1e-3])}
    for _ in range(200):
        prev = params["w"]
        params, state = adam_update(params, g, state, 0.01)
    np.testing.assert_allclose(params["w"] - prev, -0.01 * np.sign(g["w"]), rtol=1e-4)


def test_adam_is_pure_and_checks_shapes():
    params = {"w": np.ones(2)}
    state = AdamState.zeros_like(params)
    new, new_state = adam_update(params, {"w": np.ones(2)}, state, 0.1)
    np.testing.assert_array_equal(params["w"], 1.0)
    assert state.step == 0 and new_state.step == 1
    with pytest.raises(ConfigurationError):
        adam_update(params, {"w": np.ones(3)}, state, 0.1)
    with pytest.raises(ConfigurationError):
        adam_update({"v": np.ones(2)}, {}, state, 0.1)


def test_diagonal_stays_zero_after_updates():
    w = init_weights(3, 6, 2, seed=0)
    params = w.blocks()
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(2)
    for _ in range(5):
        g = {k: rng.normal(size=v.shape) for k, v in params.items()}
        params, state = adam_update(params, mask_recurrent_diagonal(g), state, 0.05)
    np.testing.assert_array_equal(np.diag(params["rec"]), 0.0)


def test_schedule_decays():
    s = Schedule(0.003, 0.7, 100)
    assert s.at(0) == s.at(99) == 0.003
    assert s.at(100) == pytest.approx(0.0021)
    assert s.at(250) == pytest.approx(0.003 * 0.49)
    capped = Schedule(0.01, 0.3, 100, max_decays=1)
    assert capped.at(1000) == pytest.approx(0.003)
    assert SCHEDULES["copy_repeat"].at(10**6) == 1e-4
    with pytest.raises(ConfigurationError):
        Schedule(0.0)
    with pytest.raises(ConfigurationError):
        Schedule(0.1, 1.5, 10)


def test_init_scale_and_determinism():
    rng = np.random.default_rng(3)
    assert gaussian(rng, (400, 100), 100).std() == pytest.approx(0.1, rel=0.02)
    a = init_weights(100, 50, 3, seed=[4, 1])
    b = init_weights(100, 50, 3, seed=[4, 1])
    for k, v in a.blocks().items():
        np.testing.assert_array_equal(v, b.blocks()[k])
    np.testing.assert_array_equal(np.diag(a.theta_rec), 0.0)
    assert init_weights(2, 4, 1, seed=0, recurrent=False).theta_rec.sum() == 0.0
    with pytest.raises(ConfigurationError):
        init_weights(0, 4, 1, seed=0)


def test_spectral_radius_at_default_scale():
    radii = [np.abs(np.linalg.eigvals(init_weights(1, 600, 1, seed=s).theta_rec)).max() for s in range(3)]
    # circular law: radius close to 1 for std 1/sqrt(n)
    assert max(radii) < 3.0
    assert min(radii) > 0.8


def test_lstm_init_blocks():
    w = init_lstm_weights(3, 5, 2, seed=0)
    assert set(w.blocks()) == {f"{p}_{g}" for p in ("in", "rec") for g in "ifoc"} | {"out", "b_out"}
