import numpy as np
import pytest

from eprop import eligibility as elig
from eprop.dynamics import LIF, LSTM, LifParams, LstmWeights, NetworkWeights, SigmoidRNN, simulate_trial
from eprop.errors import ConfigurationError, UnsupportedModelError
from eprop.oracle import (
    MODEL_KINDS,
    bptt_gradients,
    eprop_exact_gradient,
    exact_learning_signals,
    finite_difference_gradient,
    max_relative_error,
    random_instance,
    verify_factorization,
)
from eprop.signals import LossSpec, readout_backward


def fd_relative_error(fd, ref, floor=1e-5):
    """Elementwise relative error with the denominator floored at ``floor``
    times the largest gradient entry of the instance.

    Central differences carry a rounding error of about eps*E/h (1e-10 here),
    so entries near zero cannot be compared relatively.
    """
    scale = max(float(np.abs(r).max()) for r in ref.values())
    worst = 0.0
    for k, r in ref.items():
        f = fd[k]
        keep = ~np.isnan(f)
        denom = np.maximum(np.abs(r[keep]), floor * scale + 1e-30)
        worst = max(worst, float(np.max(np.abs(f[keep] - r[keep]) / denom)))
    return worst


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_factorization_identity(kind):
    report = verify_factorization([kind], n_instances=40, seed=3)
    res = report.results[kind]
    assert res["passed"], res
    assert res["max_rel_error"] < 1e-10
    if kind in ("lif", "alif"):
        assert res["instances_with_activity"] > 20


def test_truncated_traces_are_detected():
    report = verify_factorization(["alif", "lstm"], n_instances=20, seed=4, truncate=True)
    assert not report.passed
    for r in report.results.values():
        assert r["max_rel_error"] > 1e-3


def test_verifier_report_is_json():
    import json

    rep = json.loads(verify_factorization(["lif"], n_instances=2).to_json())
    assert set(rep) == {"tolerance", "passed", "models"}
    assert "max_rel_error" in rep["models"]["lif"]


def test_single_step_chain_rule():
    w = NetworkWeights(np.array([[2.0]]), np.zeros((1, 1)), np.array([[3.0]]), np.zeros(1))
    model = SigmoidRNN(alpha=0.0)
    traj = simulate_trial(model, w, np.array([[0.5]]))
    loss = LossSpec("mse", np.array([[0.0]]))
    g = bptt_gradients(traj, loss, model, w).grads
    z = 1 / (1 + np.exp(-1.0))
    # E = 0.5 (3 z)^2 ; dE/dw_in = 3 z * 3 * z (1 - z) * 0.5
    np.testing.assert_allclose(g["in"], [[9 * z * z * (1 - z) * 0.5]])
    np.testing.assert_allclose(g["out"], [[3 * z * z]])


def test_last_step_signal_is_partial_derivative():
    inst = random_instance("alif", np.random.default_rng(8))
    traj = inst.simulate()
    L = exact_learning_signals(traj, inst.loss, inst.w)
    partial = readout_backward(traj.z, traj.y, inst.w.theta_out, traj.kappa, inst.loss).dEdz
    np.testing.assert_allclose(L[-1], partial[-1])


def test_zero_error_gives_zero_signals():
    inst = random_instance("lif", np.random.default_rng(9), n_out=2)
    traj = inst.simulate()
    L = exact_learning_signals(traj, LossSpec("mse", np.array(traj.y)), inst.w)
    np.testing.assert_array_equal(L, 0.0)


def test_signal_reaches_steps_before_the_masked_window():
    rng = np.random.default_rng(0)
    n, T = 5, 40
    lif = LifParams.from_tau(20.0, v_th=0.4, refractory_steps=0)
    w_rec = rng.normal(0, 0.3, size=(n, n))
    np.fill_diagonal(w_rec, 0.0)
    w = NetworkWeights(rng.normal(0.3, 0.3, size=(n, 2)), w_rec, rng.normal(size=(2, n)), np.zeros(2))
    x = (rng.random((T, 2)) < 0.3).astype(float)
    traj = simulate_trial(LIF(lif), w, x, kappa=0.0)
    mask = np.zeros(T)
    mask[-5:] = 1.0
    loss = LossSpec("ce", np.tile([1.0, 0.0], (T, 1)), mask)
    res = bptt_gradients(traj, loss, traj.model, w)
    np.testing.assert_array_equal(res.dEdz_partial[:-5], 0.0)
    assert traj.z.sum() > 0
    # every step before the window receives credit through the recurrent paths
    assert np.all(np.abs(res.dEdz[:-5]).max(axis=1) > 0)


@pytest.mark.parametrize("kind", ["sigmoid", "lstm"])
def test_bptt_matches_finite_differences(kind):
    rng = np.random.default_rng([20, len(kind)])
    worst = 0.0
    for _ in range(50):
        inst = random_instance(kind, rng, n=int(rng.integers(2, 5)), T=int(rng.integers(5, 21)))
        ref = bptt_gradients(inst.simulate(), inst.loss, inst.model, inst.w).grads
        fd = finite_difference_gradient(inst.model, inst.w, inst.inputs, inst.loss, 1e-5, kappa=inst.kappa)
        worst = max(worst, fd_relative_error(fd, ref))
    assert worst < 1e-5


def test_finite_differences_on_quadratic_readout():
    # no recurrence, alpha = 0: E is an explicit function of the readout weights
    w = NetworkWeights(np.array([[1.0], [-1.0]]), np.zeros((2, 2)), np.array([[0.3, 0.7]]), np.array([0.1]))
    model = SigmoidRNN(alpha=0.0)
    x = np.array([[0.4], [1.2]])
    target = np.array([[0.5], [-0.2]])
    loss = LossSpec("mse", target)
    fd = finite_difference_gradient(model, w, x, loss, 1e-5)
    z = 1 / (1 + np.exp(-x * np.array([1.0, -1.0])))
    err = z @ w.theta_out.T + w.b_out - target
    np.testing.assert_allclose(fd["out"], err.T @ z, atol=1e-8)
    np.testing.assert_allclose(fd["b_out"], err.sum(axis=0), atol=1e-8)
    assert np.isnan(fd["rec"][0, 0])


def test_finite_differences_reject_spiking_models():
    inst = random_instance("lif", np.random.default_rng(11))
    with pytest.raises(UnsupportedModelError):
        finite_difference_gradient(inst.model, inst.w, inst.inputs, inst.loss)


def test_bptt_matches_torch_autograd_for_alif():
    torch = pytest.importorskip("torch")
    from eprop.dynamics import lsnn

    torch.set_default_dtype(torch.float64)
    rng = np.random.default_rng(3)
    n, n_in, n_out, T = 8, 5, 2, 60
    lif = LifParams.from_tau(20.0, 1.0, v_th=0.5, refractory_steps=2)
    model = lsnn(4, 4, lif, 200.0, 0.3)
    w = NetworkWeights(
        rng.normal(size=(n, n_in)) * 0.8, rng.normal(size=(n, n)) * 0.3 * (1 - np.eye(n)), rng.normal(size=(n_out, n)), np.zeros(n_out)
    )
    x = (rng.random((T, n_in)) < 0.3).astype(float)
    kappa = 0.8
    tgt = np.zeros((T, n_out))
    tgt[np.arange(T), rng.integers(0, 2, T)] = 1
    loss = LossSpec("ce", tgt, (rng.random(T) < 0.5).astype(float))
    traj = simulate_trial(model, w, x, kappa=kappa)
    assert traj.z.sum() > 0
    ref = bptt_gradients(traj, loss, model, w).grads

    p = model.params
    beta = torch.tensor(p.beta_vector(n))

    class Spike(torch.autograd.Function):
        @staticmethod
        def forward(ctx, v, A, blk):
            ctx.save_for_backward(v, A, blk)
            return ((v >= A) & ~blk).double()

        @staticmethod
        def backward(ctx, g):
            v, A, blk = ctx.saved_tensors
            h = lif.gamma * torch.clamp(1 - torch.abs((v - A) / lif.v_th), min=0) * (~blk)
            return g * h, -g * h, None

    w_in = torch.tensor(w.theta_in, requires_grad=True)
    w_rec = torch.tensor(w.theta_rec, requires_grad=True)
    w_out = torch.tensor(w.theta_out, requires_grad=True)
    v, a, z, y = torch.zeros(n), torch.zeros(n), torch.zeros(n), torch.zeros(n_out)
    refr = np.zeros(n, dtype=int)
    E = 0.0
    X = torch.tensor(x)
    for t in range(T):
        v = lif.alpha * v + w_rec @ z + w_in @ X[t] - lif.v_th * z
        a = p.rho * a + z
        blk = torch.tensor(refr > 0)
        z = Spike.apply(v, lif.v_th + beta * a, blk)
        zn = z.detach().numpy()
        refr = np.where(zn > 0, lif.refractory_steps, np.maximum(refr - 1, 0))
        y = kappa * y + w_out @ z
        E = E - loss.mask[t] * (torch.tensor(tgt[t]) * torch.log_softmax(y, 0)).sum()
    E.backward()
    np.testing.assert_allclose(ref["in"], w_in.grad.numpy(), atol=1e-12)
    off = 1 - np.eye(n)  # the diagonal is not a parameter
    np.testing.assert_allclose(ref["rec"] * off, w_rec.grad.numpy() * off, atol=1e-12)
    np.testing.assert_allclose(ref["out"], w_out.grad.numpy(), atol=1e-12)


def test_eprop_exact_gradient_checks_trace_blocks():
    inst = random_instance("alif", np.random.default_rng(12))
    traj = inst.simulate()
    traces, _ = elig.trial_traces(inst.model, traj, inst.w)
    del traces["rec"]
    with pytest.raises(ConfigurationError):
        eprop_exact_gradient(traj, inst.loss, inst.w, traces)


def test_bptt_rejects_model_mismatch_and_missing_records():
    inst = random_instance("lif", np.random.default_rng(13))
    traj = inst.simulate()
    with pytest.raises(ConfigurationError):
        bptt_gradients(traj, inst.loss, SigmoidRNN(0.5), inst.w)
    bare = simulate_trial(inst.model, inst.w, inst.inputs, kappa=inst.kappa, record=False)
    with pytest.raises(ConfigurationError):
        bptt_gradients(bare, inst.loss, inst.model, inst.w)


def test_lstm_gate_blocks_are_covered():
    inst = random_instance("lstm", np.random.default_rng(14))
    assert isinstance(inst.w, LstmWeights) and isinstance(inst.model, LSTM)
    traj = inst.simulate()
    ref = bptt_gradients(traj, inst.loss, inst.model, inst.w)
    est = eprop_exact_gradient(traj, inst.loss, inst.w, signals=ref.dEdz)
    assert {k for k in ref.grads if k not in ("out", "b_out")} == {f"{p}_{g}" for p in ("in", "rec") for g in "ifoc"}
    assert max_relative_error(est, ref.grads) < 1e-10
