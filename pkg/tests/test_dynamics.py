import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ntklab.data import GaussianModelConfig, gen_gaussian_model
from ntklab.dynamics import (
    condition_report,
    discrete_gd,
    halving_times,
    solve_linearized,
    spectral_loss_curve,
    trace_table,
)
from ntklab.kernel import KernelSpec, eigendecompose, gram

SPEC = KernelSpec()


def _problem(seed, n=15, d=4):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    return eigendecompose(gram(SPEC, X)), rng.standard_normal(n)


def test_zero_at_start_and_parseval():
    eig, Y = _problem(0)
    tr = solve_linearized(eig, Y, 0.5, [0.0])
    np.testing.assert_array_equal(tr.f_t[0], np.zeros(eig.n))
    t, loss, modes = spectral_loss_curve(eig, Y, 0.5, [0.0])[0]
    assert loss == pytest.approx(Y @ Y, rel=1e-12)
    assert modes.shape == (eig.n,)


def test_long_time_limit_interpolates():
    eig, Y = _problem(1)
    eta = 0.3
    t = 1e3 / (eta * eig.lambda_min)
    np.testing.assert_allclose(solve_linearized(eig, Y, eta, [t]).f_t[0], Y, atol=1e-6)


def test_scalar_ode():
    eig = eigendecompose([[1.7]])
    times = np.linspace(0, 3, 7)
    tr = solve_linearized(eig, [-0.8], 0.4, times)
    np.testing.assert_allclose(tr.f_t[:, 0], (1 - np.exp(-0.4 * 1.7 * times)) * -0.8, rtol=1e-14)


@given(seed=st.integers(0, 10_000), eta=st.floats(0.01, 2.0))
def test_two_routes_agree(seed, eta):
    eig, Y = _problem(seed)
    times = np.linspace(0, 20, 25)
    tr = solve_linearized(eig, Y, eta, times)
    curve = spectral_loss_curve(eig, Y, eta, times)
    np.testing.assert_allclose([c[1] for c in curve], tr.loss_t, rtol=0, atol=1e-10 * (Y @ Y))
    assert np.all(np.diff(tr.loss_t) <= 1e-12 * (Y @ Y))


def test_larger_eigenvalue_decays_faster():
    eig, Y = _problem(2)
    _, _, modes = spectral_loss_curve(eig, np.ones(eig.n), 1.0, [0.7])[0]
    decay = modes / eig.project(np.ones(eig.n)) ** 2
    assert np.all(np.diff(decay) > 0)


@given(seed=st.integers(0, 10_000))
def test_halving_time_ratios(seed):
    eig, _ = _problem(seed)
    h = halving_times(eig, 0.7)
    lam = eig.eigenvalues
    i, j = 0, eig.n - 1
    assert h[i] / h[j] == pytest.approx(lam[j] / lam[i], rel=1e-8)
    np.testing.assert_allclose(halving_times(eig, 1.4), h / 2, rtol=1e-14)


def test_halving_is_halving():
    eig, Y = _problem(3)
    h = halving_times(eig, 1.0)
    p0 = eig.project(Y)
    for k in (0, eig.n - 1):
        resid = Y - solve_linearized(eig, Y, 1.0, [h[k]]).f_t[0]
        assert eig.project(resid)[k] == pytest.approx(p0[k] / 2, rel=1e-10)


def test_condition_report():
    assert condition_report(eigendecompose(np.eye(3)))["kappa"] == 1.0
    rep = condition_report(eigendecompose(np.diag([4.0, 1.0])))
    assert rep["kappa"] == 0.25 and rep["eta_max"] == pytest.approx(0.4)
    ds = gen_gaussian_model(GaussianModelConfig(d=10, sigma=2.0, n=50, seed=0))
    eig = eigendecompose(gram(SPEC, ds.X))
    rep = condition_report(eig)
    lam = np.linalg.eigvalsh(gram(SPEC, ds.X))
    assert rep["kappa"] == pytest.approx(lam[0] / lam[-1], rel=1e-6)
    with pytest.raises(ValueError):
        condition_report(eigendecompose(np.zeros((2, 2))))


def test_errors():
    eig, Y = _problem(4)
    with pytest.raises(ValueError):
        solve_linearized(eig, Y, 0.1, [-1.0])
    with pytest.raises(ValueError):
        solve_linearized(eig, Y[:-1], 0.1, [1.0])
    with pytest.raises(ValueError):
        solve_linearized(eig, Y, 0.0, [1.0])


def test_discrete_gd_matches_iteration_and_flow():
    eig, Y = _problem(5)
    eta = 0.01
    K = eig.K
    f = np.zeros(eig.n)
    traj = discrete_gd(eig, Y, eta, 30)
    for t in range(30):
        np.testing.assert_allclose(traj[t], f, atol=1e-12)
        f = f - eta * K @ (f - Y)
    # small eta: unit-step GD tracks the flow at equal times
    flow = solve_linearized(eig, Y, eta, [30.0]).f_t[0]
    assert np.linalg.norm(traj[30] - flow) < 0.05 * np.linalg.norm(flow)


def test_trace_table_columns():
    eig, Y = _problem(6, n=3)
    tab = trace_table(solve_linearized(eig, Y, 1.0, [0.0, 1.0]))
    assert list(tab) == ["t", "loss", "mode_1", "mode_2", "mode_3"]
    np.testing.assert_allclose(tab["loss"], tab["mode_1"] + tab["mode_2"] + tab["mode_3"])
