import numpy as np
import pytest

from eprop import eligibility as elig
from eprop.dynamics import NetworkWeights, SigmoidRNN, simulate_trial
from eprop.errors import ConfigurationError
from eprop.oracle import bptt_gradients, random_instance
from eprop.signals import (
    FeedbackMatrix,
    LossSpec,
    RegularizationSpec,
    clopath_post_factor,
    firing_rates,
    grad_eprop1,
    grad_output_weights,
    learning_signal_classification,
    learning_signal_regression,
    output_error,
    readout_backward,
    regularization_dEdz,
    regularization_loss,
)


def test_regression_signal_zero_at_target():
    B = np.random.default_rng(0).normal(size=(5, 2))
    y = np.random.default_rng(1).normal(size=(7, 2))
    np.testing.assert_array_equal(learning_signal_regression(y, y, B), 0.0)


def test_symmetric_feedback_equals_partial_derivative():
    rng = np.random.default_rng(2)
    w_out = rng.normal(size=(2, 4))
    y, ys = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    fb = FeedbackMatrix.symmetric()
    sig = learning_signal_regression(y, ys, fb.matrix(w_out))
    # with kappa = 0 the partial dE/dz is (y - y*) @ W_out, the signal its negative
    rb = readout_backward(np.zeros((6, 4)), y, w_out, 0.0, LossSpec("mse", ys))
    np.testing.assert_allclose(sig, -rb.dEdz)


def test_global_feedback_is_uniform():
    fb = FeedbackMatrix.uniform(16, 3)
    np.testing.assert_allclose(fb.matrix(), 0.25)


def test_random_feedback_variance_and_resampling():
    rng = np.random.default_rng(3)
    fb = FeedbackMatrix.random(400, 50, rng)
    assert fb.matrix().var() == pytest.approx(1 / 400, rel=0.05)
    rs = FeedbackMatrix.random(4, 2, rng, resample_period=10, T=35)
    assert rs.matrices.shape == (4, 4, 2)
    np.testing.assert_array_equal(rs.matrix(t=19), rs.matrices[1])
    with pytest.raises(ConfigurationError):
        FeedbackMatrix.random(4, 2, rng, resample_period=10)


def test_classification_signal_two_classes():
    B = np.array([[1.0, 2.0]])
    sig = learning_signal_classification(np.zeros(2), np.array([1.0, 0.0]), B)
    np.testing.assert_allclose(sig, [0.5 * 1.0 - 0.5 * 2.0])


def test_classification_signal_masked_outside_recall():
    y = np.random.default_rng(4).normal(size=(5, 2))
    target = np.eye(2)[[0, 1, 1, 0, 0]]
    mask = np.array([0, 1, 1, 0, 0.0])
    sig = learning_signal_classification(y, target, np.ones((3, 2)), mask)
    np.testing.assert_array_equal(sig[[0, 3, 4]], 0.0)
    assert np.all(sig[[1, 2]] != 0)


def test_classification_rejects_soft_targets():
    with pytest.raises(ConfigurationError):
        learning_signal_classification(np.zeros((2, 2)), np.full((2, 2), 0.5), np.ones((1, 2)))


def test_grad_eprop1_trivial_cases():
    tr = np.random.default_rng(5).normal(size=(4, 3, 2))
    np.testing.assert_array_equal(grad_eprop1(np.zeros((4, 3)), tr), 0.0)
    # single step: signal x h x pre
    L, h, pre = np.array([[0.7]]), 0.2, 1.0
    e = np.array([[[h * pre]]])
    np.testing.assert_allclose(grad_eprop1(L, e), [[-0.7 * 0.2]])
    with pytest.raises(ConfigurationError):
        grad_eprop1(L, e, filter_kappa=0.5, readout_kappa=0.6)


def test_eprop1_symmetric_matches_bptt_without_future_paths():
    # no recurrent weights and no self-dependence of z: dE/dz is purely local,
    # so filtered e-prop 1 with symmetric feedback is exact
    rng = np.random.default_rng(6)
    n, n_in, T, kappa = 5, 3, 30, 0.7
    w = NetworkWeights(rng.normal(size=(n, n_in)), np.zeros((n, n)), rng.normal(size=(2, n)), np.zeros(2))
    model = SigmoidRNN(alpha=0.6)
    x = rng.normal(size=(T, n_in))
    traj = simulate_trial(model, w, x, kappa=kappa)
    loss = LossSpec("mse", rng.normal(size=(T, 2)))
    ref = bptt_gradients(traj, loss, model, w).grads
    filt, _ = elig.trial_traces(model, traj, w, kappa=kappa)
    L = learning_signal_regression(traj.y, loss.target, w.theta_out.T)
    np.testing.assert_allclose(grad_eprop1(L, filt["in"], filter_kappa=kappa, readout_kappa=kappa), ref["in"], rtol=1e-10)


@pytest.mark.parametrize("kind", ["lif", "alif", "sigmoid", "lstm"])
def test_readout_gradient_is_exact(kind):
    rng = np.random.default_rng([7, len(kind)])
    inst = random_instance(kind, rng)
    traj = inst.simulate()
    ref = bptt_gradients(traj, inst.loss, inst.model, inst.w).grads
    got = grad_output_weights(traj.y, inst.loss, traj.z, traj.kappa)
    np.testing.assert_allclose(got["out"], ref["out"], rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(got["b_out"], ref["b_out"], rtol=1e-10, atol=1e-12)


def test_readout_gradient_zero_at_perfect_output_and_delta_rule():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    y = np.array([[0.3], [0.1]])
    g = grad_output_weights(y, LossSpec("mse", y.copy()), z, 0.4)
    np.testing.assert_array_equal(g["out"], 0.0)
    target = np.zeros((2, 1))
    g0 = grad_output_weights(y, LossSpec("mse", target), z, 0.0)
    np.testing.assert_allclose(g0["out"], (y - target).T @ z)


def test_output_error_ce_and_bce():
    y = np.array([[0.0, 0.0]])
    E, d = output_error(y, LossSpec("ce", np.array([[1.0, 0.0]])))
    assert E == pytest.approx(np.log(2))
    np.testing.assert_allclose(d, [[-0.5, 0.5]])
    E2, _ = output_error(np.zeros((1, 3)), LossSpec("bce", np.array([[1.0, 0.0, 1.0]])))
    assert E2 == pytest.approx(3.0)  # one bit per channel at p = 0.5


def test_regularization_zero_at_target_and_signs():
    reg = RegularizationSpec(10.0, 0.5)
    T = 1000
    counts = np.array([10.0, 10.0])  # exactly 10 Hz over 1 s
    np.testing.assert_allclose(regularization_dEdz(counts, reg, 1, T), 0.0)
    assert regularization_loss(counts, reg, 1, T) == 0.0
    silent = regularization_dEdz(np.array([0.0, 30.0]), reg, 1, T)
    assert silent[0] < 0 < silent[1]  # descent raises the silent neuron's rate


def test_regularization_gradient_matches_finite_difference_of_loss():
    reg = RegularizationSpec(10.0, 0.5)
    counts = np.array([3.0, 25.0, 7.0])
    T, B = 500, 2
    g = regularization_dEdz(counts, reg, B, T)
    for j in range(3):
        for red in ("mean", "sum", "population"):
            r = RegularizationSpec(10.0, 0.5, reduction=red)
            e = np.zeros(3)
            e[j] = 1e-3
            fd = (regularization_loss(counts + e, r, B, T) - regularization_loss(counts - e, r, B, T)) / 2e-3
            assert regularization_dEdz(counts, r, B, T)[j] == pytest.approx(fd, rel=1e-6)
    assert g.shape == (3,)


def test_firing_rates_units():
    np.testing.assert_allclose(firing_rates(np.array([20.0]), 2, 1000, 1.0), [10.0])


def test_clopath_factor_rectifiers():
    v_th = 0.6
    assert clopath_post_factor(-0.1, 1.0, v_th) == 0.0
    assert clopath_post_factor(0.5, v_th / 4 - 1e-3, v_th) == 0.0
    assert clopath_post_factor(0.5, 0.4, v_th) == pytest.approx(0.5 * (0.4 - 0.15))


def test_loss_spec_validation():
    with pytest.raises(ConfigurationError):
        LossSpec("hinge", np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        LossSpec("mse", np.zeros((2, 2)), np.ones(3))
    with pytest.raises(ConfigurationError):
        LossSpec("ce", np.full((2, 2), 0.5))
