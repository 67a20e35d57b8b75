import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ntklab.data import Dataset, GaussianModelConfig, gen_gaussian_model
from ntklab.dynamics import discrete_gd
from ntklab.finite_net import (
    FiniteNet,
    DivergenceError,
    empirical_ntk,
    one_step_distill,
    one_step_outer,
    stability_bound,
    train_gd,
    width_scaling_experiment,
)
from ntklab.kernel import KernelSpec, gram

SPEC = KernelSpec()


def _perturbed(d0, m, seed, scale=0.3):
    net = FiniteNet.init(d0, m, seed=seed)
    noise = np.random.default_rng(seed + 1).standard_normal(net.theta.size)
    return net.with_theta(net.theta + scale * noise)


def _hand_net():
    return FiniteNet(np.array([[1.0, 2.0]]), np.array([3.0]), np.array([[-1.0, 1.0]]), np.array([0.5]))


def test_zero_at_init():
    net = FiniteNet.init(5, 64, seed=0)
    X = np.random.default_rng(0).standard_normal((100, 5))
    assert np.abs(net.forward(X)).max() <= 1e-10


def test_hand_forward():
    # z = (1 + 2)/sqrt(2), twin pre-activation 0; scale sqrt(2/2) = 1
    assert _hand_net().forward([1.0, 1.0])[0] == pytest.approx(9 / np.sqrt(2), rel=1e-14)


def test_top_layer_linearity():
    net = _perturbed(3, 8, 0)
    X = np.random.default_rng(1).standard_normal((4, 3))
    scaled = FiniteNet(net.W1, 2.5 * net.W2, net.W1b, 2.5 * net.W2b)
    np.testing.assert_allclose(scaled.forward(X), 2.5 * net.forward(X), rtol=1e-13)


def test_hand_ntk_entry():
    # relu(z) relu(z') = 3, W2^2 * x.x'/d0 = 9; twin inactive at x'
    K = empirical_ntk(_hand_net(), np.array([[1.0, 1.0]]), np.array([[2.0, 0.0]]))
    assert K[0, 0] == pytest.approx(12.0, rel=1e-14)


@given(seed=st.integers(0, 10_000), m=st.sampled_from([2, 6, 32]), d0=st.integers(1, 6))
def test_empirical_ntk_symmetric_psd(seed, m, d0):
    net = _perturbed(d0, m, seed)
    X = np.random.default_rng(seed).standard_normal((7, d0))
    K = empirical_ntk(net, X)
    np.testing.assert_allclose(K, K.T, atol=1e-12)
    lam = np.linalg.eigvalsh((K + K.T) / 2)
    assert lam[0] >= -1e-10 * max(lam[-1], 1.0)


def test_empirical_ntk_converges():
    ds = gen_gaussian_model(GaussianModelConfig(d=8, sigma=1.0, n=20, seed=0))
    K_emp = empirical_ntk(FiniteNet.init(8, 10_000, seed=3), ds.X)
    K = gram(SPEC, ds.X)
    assert np.linalg.norm(K_emp - K) / np.linalg.norm(K) <= 0.05


@given(seed=st.integers(0, 10_000))
def test_backprop_matches_finite_differences(seed):
    net = _perturbed(3, 6, seed)
    rng = np.random.default_rng(seed + 2)
    ds = Dataset(rng.standard_normal((5, 3)), rng.standard_normal(5))
    g = net.loss_grad(ds)
    th, h = net.theta, 1e-5
    fd = np.array([(net.with_theta(th + h * e).loss(ds) - net.with_theta(th - h * e).loss(ds)) / (2 * h)
                   for e in np.eye(th.size)])
    assert np.abs(g - fd).max() <= 1e-6 * np.abs(fd).max()


def test_input_gradient_matches_finite_differences():
    net = _perturbed(4, 10, 7)
    x = np.random.default_rng(8).standard_normal(4)
    h = 1e-6
    fd = np.array([(net.forward(x + h * e)[0] - net.forward(x - h * e)[0]) / (2 * h) for e in np.eye(4)])
    np.testing.assert_allclose(net.input_gradient(x)[0], fd, rtol=1e-6, atol=1e-9)


def test_init_variance():
    net = FiniteNet.init(8, 40_000, seed=0)
    assert abs(net.W1.var() - 1.0) < 0.05
    with pytest.raises(ValueError):
        FiniteNet.init(3, 5)


def test_zero_learning_rate():
    ds = gen_gaussian_model(GaussianModelConfig(d=4, sigma=1.0, n=6, seed=1))
    net = FiniteNet.init(4, 32, seed=0)
    tr = train_gd(net, ds, 0.0, 5)
    np.testing.assert_array_equal(tr.net.theta, net.theta)
    assert np.all(tr.loss == tr.loss[0]) and np.all(tr.displacement == 0)


def test_monotone_loss_and_linearized_match():
    ds = gen_gaussian_model(GaussianModelConfig(d=8, sigma=1.0, n=20, seed=0))
    eta = stability_bound(SPEC, ds) / 2
    tr = train_gd(FiniteNet.init(8, 2048, seed=0), ds, eta, 100, spec=SPEC)
    assert np.all(np.diff(tr.loss) <= 1e-12 * tr.loss[0])
    lin = discrete_gd(gram(SPEC, ds.X), ds.Y, eta, 100)
    lin_loss = np.sum((lin - ds.Y) ** 2, axis=1)
    assert np.max(np.abs(tr.loss - lin_loss) / lin_loss) <= 0.10


def test_single_point_scalar_recursion():
    ds = Dataset([[0.5, -1.0, 2.0]], [1.0])
    net = FiniteNet.init(3, 4096, seed=1)
    k = empirical_ntk(net, ds.X)[0, 0]
    eta = 0.05 / k
    tr = train_gd(net, ds, eta, 20)
    expected = (1 - eta * k) ** (2 * np.arange(21))
    np.testing.assert_allclose(tr.loss, expected, rtol=1e-3)


def test_stability_and_divergence():
    ds = gen_gaussian_model(GaussianModelConfig(d=4, sigma=1.0, n=8, seed=2))
    bound = stability_bound(SPEC, ds)
    with pytest.raises(ValueError, match="stability"):
        train_gd(FiniteNet.init(4, 16, seed=0), ds, bound * 1.01, 3, spec=SPEC)
    with pytest.raises(DivergenceError):
        train_gd(FiniteNet.init(4, 64, seed=0), ds, 50 * bound, 200)


def test_width_scaling_reproducible_and_validated():
    ds = gen_gaussian_model(GaussianModelConfig(d=4, sigma=1.0, n=6, seed=3))
    eta = stability_bound(SPEC, ds) / 2
    a = width_scaling_experiment([8, 32, 256], ds, eta, 5, [0])
    b = width_scaling_experiment([8, 32, 256], ds, eta, 5, [0])
    for k in a[0]:
        np.testing.assert_array_equal(a[0][k], b[0][k])
    with pytest.raises(ValueError):
        width_scaling_experiment([8, 32], ds, eta, 5, [0])
    with pytest.raises(ValueError):
        width_scaling_experiment([8, 16, 32], ds, eta, 5, [0])


def _distill_problem(seed=0):
    rng = np.random.default_rng(seed)
    target = Dataset(rng.standard_normal((10, 3)), np.sign(rng.standard_normal(10)))
    return target


def test_one_step_full_set_descends():
    target = _distill_problem()
    net = FiniteNet.init(3, 64, seed=0)
    loss, _, _ = one_step_outer(net, target.X, target.Y, target, 0.05)
    assert loss < 0.5 * target.Y @ target.Y


def test_one_step_alpha_zero():
    target = _distill_problem()
    support = target.subset([0, 1, 2])
    res = one_step_distill(FiniteNet.init(3, 16, seed=0), support, target, 0.1, 0.0, 3)
    np.testing.assert_array_equal(res.X_S, support.X)
    assert res.eta == 0.1


def test_one_step_outer_gradient():
    target = _distill_problem(1)
    net = _perturbed(3, 6, 1)
    XS, YS = target.X[:3].copy(), target.Y[:3]
    _, gX, geta = one_step_outer(net, XS, YS, target, 0.1)
    h = 1e-5
    fd = np.zeros_like(XS)
    for idx in np.ndindex(*XS.shape):
        E = np.zeros_like(XS)
        E[idx] = h
        fd[idx] = (one_step_outer(net, XS + E, YS, target, 0.1)[0]
                   - one_step_outer(net, XS - E, YS, target, 0.1)[0]) / (2 * h)
    assert np.abs(gX - fd).max() <= 1e-4 * np.abs(fd).max()
    fd_eta = (one_step_outer(net, XS, YS, target, 0.1 + h)[0] - one_step_outer(net, XS, YS, target, 0.1 - h)[0]) / (2 * h)
    assert geta == pytest.approx(fd_eta, rel=1e-4)


def test_one_step_depends_on_init():
    target = _distill_problem(2)
    support = target.subset([0, 1, 2])
    a = one_step_distill(FiniteNet.init(3, 16, seed=0), support, target, 0.1, 0.05, 3)
    b = one_step_distill(FiniteNet.init(3, 16, seed=1), support, target, 0.1, 0.05, 3)
    assert not np.array_equal(a.X_S, b.X_S)
