import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ntklab.data import (
    Dataset,
    GaussianModelConfig,
    TradeoffModelConfig,
    gen_basis_vector_task,
    gen_gaussian_model,
    gen_hidden_pattern_task,
    gen_quadratic_task,
    gen_tradeoff_model,
    load_idx_subset,
    make_rng,
    pattern_index,
    quadratic_label,
    read_idx,
    write_idx,
)


def test_dataset_rejects_duplicate_rows():
    with pytest.raises(ValueError, match="duplicate"):
        Dataset([[1.0, 2.0], [1.0, 2.0]], [1, -1])


def test_dataset_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        Dataset([[1.0], [2.0]], [1.0])
    with pytest.raises(ValueError):
        Dataset([[np.nan]], [1.0])


def test_dataset_is_immutable():
    ds = Dataset([[1.0], [2.0]], [1, -1])
    with pytest.raises(ValueError):
        ds.X[0, 0] = 5.0
    assert ds.is_classification
    assert not Dataset([[1.0]], [0.3]).is_classification
    with pytest.raises(ValueError):
        Dataset([[1.0]], [0.3]).require_classification()


def test_csv_round_trip(tmp_path):
    ds = gen_gaussian_model(GaussianModelConfig(d=3, sigma=1.0, n=5, seed=4))
    path, sidecar = ds.write(tmp_path / "g.csv")
    header = path.read_text().splitlines()[0]
    assert header == "x0,x1,x2,y"
    back = Dataset.from_csv(path)
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.Y, ds.Y)
    meta = json.loads(sidecar.read_text())
    assert meta["generator"] == "gen_gaussian_model" and meta["d"] == 3 and meta["seed"] == 4


def test_make_rng_streams():
    a = make_rng(3, "x").standard_normal(4)
    b = make_rng(3, "x").standard_normal(4)
    c = make_rng(3, "y").standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# gaussian model ----------------------------------------------------------------

def test_gaussian_zero_noise():
    ds = gen_gaussian_model(GaussianModelConfig(d=4, sigma=0.0, n=2, seed=1))
    for x, y in zip(ds.X, ds.Y):
        np.testing.assert_array_equal(x, y * np.array([2.0, 0, 0, 0]))


def test_gaussian_mean_concentrates():
    d, n = 400, 10_000
    cfg = GaussianModelConfig.from_c(d, 2.0, n, seed=0)
    ds = gen_gaussian_model(cfg)
    mean = (ds.Y[:, None] * ds.X).mean(axis=0)
    se = cfg.sigma / np.sqrt(n)
    assert abs(mean[0] - np.sqrt(d)) < 3 * se
    # the remaining coordinates: squared error ~ se^2 chi^2_{d-1}
    z2 = np.sum((mean[1:] / se) ** 2)
    assert abs(z2 - (d - 1)) < 3 * np.sqrt(2 * (d - 1))


def test_gaussian_determinism():
    cfg = GaussianModelConfig(d=2, sigma=1.0, n=1000, seed=7)
    assert gen_gaussian_model(cfg).X.tobytes() == gen_gaussian_model(cfg).X.tobytes()


def test_gaussian_config_validation():
    with pytest.raises(ValueError):
        GaussianModelConfig(d=0, sigma=1.0, n=1)
    with pytest.raises(ValueError):
        GaussianModelConfig(d=2, sigma=-1.0, n=1)
    cfg = GaussianModelConfig(d=9, sigma=1.0, n=1)
    np.testing.assert_array_equal(cfg.theta_star, [3.0] + [0.0] * 8)


# tradeoff model ---------------------------------------------------------------

def test_tradeoff_statistics():
    d = 25
    ds = gen_tradeoff_model(TradeoffModelConfig(d=d, n=100_000, seed=0))
    assert ds.d == d + 1
    assert abs(np.mean(ds.X[:, 0] == ds.Y) - 0.9) < 0.01
    pos = ds.Y > 0
    assert abs(ds.X[pos, 1].mean() - 10 / np.sqrt(d)) < 0.02


def test_tradeoff_small_deterministic():
    cfg = TradeoffModelConfig(d=1, n=1, seed=3)
    np.testing.assert_array_equal(gen_tradeoff_model(cfg).X, gen_tradeoff_model(cfg).X)
    with pytest.raises(ValueError):
        TradeoffModelConfig(d=1, n=1, p_flip=1.5)


# basis vectors ----------------------------------------------------------------

def test_basis_rows_are_signed_unit_vectors():
    ds = gen_basis_vector_task(3, 3, seed=0)
    assert sorted(np.flatnonzero(row)[0] for row in ds.X) == [0, 1, 2]
    np.testing.assert_array_equal(ds.X.sum(axis=1), ds.Y)
    with pytest.raises(ValueError):
        gen_basis_vector_task(3, 4)


@given(d=st.integers(1, 30), frac=st.floats(0.01, 1.0), seed=st.integers(0, 2**32 - 1))
def test_basis_rows_orthonormal(d, frac, seed):
    n = max(1, int(frac * d))
    ds = gen_basis_vector_task(d, n, seed)
    np.testing.assert_array_equal(ds.X @ ds.X.T, np.eye(n))


def test_basis_determinism():
    a, b = gen_basis_vector_task(10, 4, seed=5), gen_basis_vector_task(10, 4, seed=5)
    np.testing.assert_array_equal(a.X, b.X)


# quadratic task ---------------------------------------------------------------

def test_quadratic_label_examples():
    assert quadratic_label([[1.0, 0.0]])[0] == 1
    assert quadratic_label([[0.0, 1.0]])[0] == -1


def test_quadratic_balance():
    ds = gen_quadratic_task(3, 100_000, seed=0)
    assert abs(np.mean(ds.Y > 0) - 0.5) < 0.01


@given(seed=st.integers(0, 10_000), d=st.integers(1, 6))
def test_quadratic_permutation_invariance(seed, d):
    ds = gen_quadratic_task(d, 20, seed)
    rng = np.random.default_rng(seed)
    perm = np.concatenate([rng.permutation(d), d + rng.permutation(d)])
    np.testing.assert_array_equal(quadratic_label(ds.X[:, perm]), ds.Y)


# hidden pattern ---------------------------------------------------------------

def test_pattern_identity_and_xor():
    ds = gen_hidden_pattern_task(6, 1, 3, [1, -1], 50, seed=0)
    np.testing.assert_array_equal(ds.Y, ds.X[:, 2])
    xor = [1, -1, -1, 1]  # product of the two bits
    assert xor[pattern_index(np.array([1, -1]))] == -1
    ds = gen_hidden_pattern_task(5, 2, 1, xor, 50, seed=1)
    np.testing.assert_array_equal(ds.Y, ds.X[:, 0] * ds.X[:, 1])


def test_pattern_xor_balance():
    ds = gen_hidden_pattern_task(8, 2, 4, [1, -1, -1, 1], 100_000, seed=2)
    assert abs(np.mean(ds.Y > 0) - 0.5) < 0.01


def test_pattern_validation():
    with pytest.raises(ValueError):
        gen_hidden_pattern_task(4, 2, 4, [1, -1, -1, 1], 5)
    with pytest.raises(ValueError):
        gen_hidden_pattern_task(4, 2, 1, [1, -1, 0, 1], 5)
    with pytest.raises(ValueError):
        gen_hidden_pattern_task(4, 2, 1, [1, -1], 5)


# IDX --------------------------------------------------------------------------

@pytest.fixture
def idx_files(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(12, 28, 28), dtype=np.uint8)
    images[0, 0, 0] = 255
    labels = np.array([3, 5, 3, 1, 5, 3, 5, 5, 3, 1, 3, 5], dtype=np.uint8)
    write_idx(tmp_path / "img.idx", images)
    write_idx(tmp_path / "lab.idx", labels)
    return tmp_path / "img.idx", tmp_path / "lab.idx", images, labels


def test_idx_subset(idx_files):
    ip, lp, images, labels = idx_files
    ds = load_idx_subset(ip, lp, 3, 5, 3)
    assert ds.d == 784 and ds.n == 6
    assert ds.X[0, 0] == 1.0
    assert np.sum(ds.Y > 0) == 3
    np.testing.assert_array_equal(ds.X, load_idx_subset(ip, lp, 3, 5, 3).X)
    assert ds.meta["image_shape"] == [28, 28]


def test_idx_errors(idx_files, tmp_path):
    ip, lp, _, _ = idx_files
    with pytest.raises(ValueError, match="magic"):
        read_idx(lp, 0x00000803)
    with pytest.raises(ValueError, match="absent"):
        load_idx_subset(ip, lp, 3, 7, 1)
    with pytest.raises(ValueError, match="only"):
        load_idx_subset(ip, lp, 3, 1, 3)
    trunc = tmp_path / "t.idx"
    trunc.write_bytes(ip.read_bytes()[:100])
    with pytest.raises(ValueError, match="truncated"):
        read_idx(trunc, 0x00000803)
