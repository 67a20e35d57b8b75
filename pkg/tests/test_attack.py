import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ntklab.attack import (
    AttackConfig,
    LinearPredictor,
    attack_dataset,
    corner_search,
    fgsm,
    pgd,
)
from ntklab.data import Dataset, GaussianModelConfig, TradeoffModelConfig, gen_gaussian_model, gen_tradeoff_model
from ntklab.kernel import KernelSpec
from ntklab.regression import fit

SPEC = KernelSpec()


def _linear(seed, d):
    rng = np.random.default_rng(seed)
    return LinearPredictor(rng.standard_normal(d), rng.standard_normal()), rng


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=-1)
    with pytest.raises(ValueError):
        AttackConfig(alpha=0.0, steps=3)
    with pytest.raises(ValueError):
        AttackConfig(norm="l1")
    with pytest.raises(ValueError):
        AttackConfig(loss="hinge")
    AttackConfig(alpha=0.0, steps=0)


def test_standard_mnist_cifar_configs_round_trip():
    for eps, alpha in ((0.3, 0.01), (8 / 255, 2 / 255)):
        cfg = AttackConfig(epsilon=eps, alpha=alpha, steps=40)
        d = cfg.to_dict()
        assert d["epsilon"] == eps and d["alpha"] == alpha and d["steps"] == 40


def test_fgsm_zero_budget():
    p, rng = _linear(0, 5)
    X = rng.standard_normal((4, 5))
    np.testing.assert_array_equal(fgsm(p, X, np.ones(4), AttackConfig(epsilon=0.0)), X)


def test_fgsm_hand_computed():
    # f = x1 - 2 x2; at x = (1, 0), y = -1 the residual is 2, grad = 2 r w = (4, -8)
    p = LinearPredictor([1.0, -2.0])
    x_adv = fgsm(p, [[1.0, 0.0]], [-1.0], AttackConfig(epsilon=0.25, loss="square"))
    np.testing.assert_array_equal(x_adv, [[1.25, -0.25]])


@given(seed=st.integers(0, 10_000), eps=st.floats(0.01, 2.0))
def test_fgsm_saturates_budget(seed, eps):
    p, rng = _linear(seed, 6)
    X = rng.standard_normal((5, 6))
    x_adv = fgsm(p, X, np.sign(rng.standard_normal(5)), AttackConfig(epsilon=eps))
    np.testing.assert_allclose(np.abs(x_adv - X).max(axis=1), eps, rtol=1e-12)


@given(seed=st.integers(0, 10_000), loss=st.sampled_from(["square", "logistic", "margin"]))
def test_fgsm_equals_one_saturated_pgd_step(seed, loss):
    p, rng = _linear(seed, 7)
    X = rng.standard_normal((6, 7))
    y = np.sign(rng.standard_normal(6))
    eps = 0.2
    cfg = AttackConfig(epsilon=eps, alpha=eps, steps=1, loss=loss)
    assert fgsm(p, X, y, cfg).tobytes() == pgd(p, X, y, cfg).tobytes()
    cfg_big = AttackConfig(epsilon=eps, alpha=3 * eps, steps=1, loss=loss)
    assert fgsm(p, X, y, cfg).tobytes() == pgd(p, X, y, cfg_big).tobytes()


@given(seed=st.integers(0, 10_000), d=st.integers(1, 12), loss=st.sampled_from(["square", "logistic", "margin"]))
def test_pgd_matches_corner_search(seed, d, loss):
    p, rng = _linear(seed, d)
    x = rng.standard_normal(d)
    y = float(np.sign(rng.standard_normal()))
    cfg = AttackConfig(epsilon=0.3, alpha=0.1, steps=10, loss=loss)
    res = pgd(p, x[None], [y], cfg, return_result=True)
    _, best = corner_search(p, x, y, 0.3, loss)
    assert abs(res.losses[-1, 0] - best) <= 1e-8 * max(1.0, abs(best))
    assert np.all(np.diff(res.losses[:, 0]) >= -1e-12)


@given(seed=st.integers(0, 10_000), norm=st.sampled_from(["linf", "l2"]), random_start=st.booleans())
def test_pgd_stays_in_ball(seed, norm, random_start):
    rng = np.random.default_rng(seed)
    train = Dataset(rng.standard_normal((6, 3)), np.sign(rng.standard_normal(6)))
    p = fit(SPEC, train)
    X = rng.standard_normal((5, 3))
    cfg = AttackConfig(norm=norm, epsilon=0.4, alpha=0.3, steps=8, random_start=random_start, seed=seed)
    res = pgd(p, X, np.ones(5), cfg, return_result=True)
    ord_ = np.inf if norm == "linf" else 2
    assert res.max_excursion <= 0.4
    assert np.linalg.norm(res.X_adv - X, ord=ord_, axis=1).max() <= 0.4


def test_l2_pgd_on_linear_reaches_optimum():
    p = LinearPredictor([3.0, 4.0])
    cfg = AttackConfig(norm="l2", epsilon=1.0, alpha=0.5, steps=5, loss="margin")
    x_adv = pgd(p, [[0.0, 0.0]], [1.0], cfg)
    np.testing.assert_allclose(x_adv, [[-0.6, -0.8]], atol=1e-12)


def test_keep_best_never_worse_than_start():
    rng = np.random.default_rng(2)
    p = fit(SPEC, Dataset(rng.standard_normal((8, 2)), np.sign(rng.standard_normal(8))))
    X = rng.standard_normal((10, 2))
    y = np.ones(10)
    cfg = AttackConfig(epsilon=0.5, alpha=0.4, steps=6, loss="margin")
    res = pgd(p, X, y, cfg, keep_best=True, return_result=True)
    assert np.all(-y * p.decision_function(res.X_adv) >= res.losses.max(axis=0) - 1e-12)


def test_corner_search_limit():
    with pytest.raises(ValueError):
        corner_search(LinearPredictor(np.ones(21)), np.zeros(21), 1.0, 0.1)


def test_attack_dataset_zero_budget():
    data = gen_gaussian_model(GaussianModelConfig(d=10, sigma=2.0, n=50, seed=0))
    p = fit(SPEC, gen_gaussian_model(GaussianModelConfig(d=10, sigma=2.0, n=20, seed=1)))
    res = attack_dataset(p, data, AttackConfig(epsilon=0.0, alpha=0.1, steps=3))
    assert res.robust_acc == res.clean_acc and not res.flipped.any()
    m = res.manifest()
    assert m["config"]["epsilon"] == 0.0 and len(m["flipped"]) == 50


def test_robust_accuracy_monotone_in_budget():
    d = 100
    train = gen_gaussian_model(GaussianModelConfig.from_c(d, 0.5, 20, seed=0))
    test = gen_gaussian_model(GaussianModelConfig.from_c(d, 0.5, 300, seed=1))
    p = fit(SPEC, train)
    accs = []
    for eps in (0.0, 1.0, 1.5, 2.0, 3.0):
        accs.append(attack_dataset(p, test, AttackConfig(epsilon=eps, alpha=eps / 4 or 0.01, steps=10)).robust_acc)
    assert all(b <= a for a, b in zip(accs, accs[1:]))
    assert accs[-1] < accs[0]


def test_tradeoff_averaging_classifier_breaks():
    d = 400
    data = gen_tradeoff_model(TradeoffModelConfig(d=d, n=5000, seed=0))
    w = np.concatenate([[0.0], np.full(d, 1.0 / d)])
    res = attack_dataset(LinearPredictor(w), data, AttackConfig(epsilon=20 / np.sqrt(d)), method="fgsm")
    assert res.clean_acc > 0.99 and res.robust_acc < 0.02
    with pytest.raises(ValueError):
        attack_dataset(LinearPredictor(w), data, AttackConfig(), method="cw")
