"""Datasets, synthetic generators and IDX ingestion.

Every generator is a pure function of its configuration: randomness comes
from a Philox counter-based bit generator seeded by the config seed, so the
same config always reproduces the same arrays.
"""

from __future__ import annotations

import gzip
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RNG_ALGORITHM = "numpy.Philox4x64-10"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def make_rng(seed, *keys):
    """Return a Philox generator for ``seed`` and optional sub-stream ``keys``.

    String keys are mapped to integers by CRC32 so named streams stay stable
    across runs and platforms.
    """
    key = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def _has_duplicate_rows(X):
    seen = set()
    for row in np.ascontiguousarray(X):
        key = row.tobytes()
        if key in seen:
            return True
        seen.add(key)
    return False


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable (X, Y) pair with provenance.

    ``X`` has one row per point, ``Y`` stores labels as floats (``±1`` for
    classification). Duplicate rows are rejected.
    """

    X: np.ndarray
    Y: np.ndarray
    name: str = "dataset"
    seed: int = 0
    meta: dict = field(default_factory=dict)
    check_distinct: bool = True

    def __post_init__(self):
        X = np.array(self.X, dtype=float, copy=True)
        Y = np.array(self.Y, dtype=float, copy=True).ravel()
        if X.ndim == 1:
            X = X.reshape(1, -1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"X must be a non-empty 2-d array, got shape {X.shape}")
        if Y.shape[0] != X.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]} entries")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("X and Y must be finite")
        if self.check_distinct and _has_duplicate_rows(X):
            raise ValueError("duplicate rows in X: training points must be distinct")
        X.flags.writeable = False
        Y.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "meta", dict(self.meta))

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]

    @property
    def is_classification(self):
        return bool(np.all(np.abs(self.Y) == 1.0))

    def require_classification(self):
        if not self.is_classification:
            raise ValueError(f"dataset {self.name!r} does not carry ±1 labels")

    def subset(self, idx, name=None):
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.Y[idx], name=name or f"{self.name}[subset]",
                       seed=self.seed, meta=self.meta, check_distinct=False)

    def with_X(self, X, name=None):
        """Same labels, new inputs (e.g. adversarially perturbed)."""
        return Dataset(X, self.Y, name=name or self.name, seed=self.seed,
                       meta=self.meta, check_distinct=False)

    def metadata(self):
        return {
            "name": self.name,
            "seed": int(self.seed),
            "generator": self.meta.get("generator", "file"),
            "rng": self.meta.get("rng", RNG_ALGORITHM),
            "n": int(self.n),
            "d": int(self.d),
            **{k: v for k, v in self.meta.items() if k not in ("generator", "rng")},
        }

    def to_csv(self, path):
        path = Path(path)
        header = ",".join([f"x{i}" for i in range(self.d)] + ["y"])
        table = np.column_stack([self.X, self.Y])
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")
        return path

    def write(self, csv_path):
        """Write the CSV table plus a ``.json`` metadata sidecar."""
        csv_path = self.to_csv(csv_path)
        sidecar = csv_path.with_suffix(".json")
        sidecar.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True))
        return csv_path, sidecar

    @classmethod
    def from_csv(cls, path, name=None):
        path = Path(path)
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if not header or header[-1] != "y":
            raise ValueError(f"{path}: last CSV column must be 'y'")
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        meta = {}
        sidecar = path.with_suffix(".json")
        if sidecar.exists():
            meta = json.loads(sidecar.read_text())
        return cls(table[:, :-1], table[:, -1], name=name or meta.get("name", path.stem),
                   seed=meta.get("seed", 0), meta={"generator": meta.get("generator", "file")})


# ---------------------------------------------------------------------------
# configs

@dataclass(frozen=True)
class GaussianModelConfig:
    d: int
    sigma: float
    n: int
    seed: int = 0
    c_const: float | None = None

    def __post_init__(self):
        if self.d < 1 or self.n < 1:
            raise ValueError(f"invalid dimensions d={self.d}, n={self.n}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @classmethod
    def from_c(cls, d, c_const, n, seed=0):
        """sigma = c * d**(1/4), the scaling used in the sample-complexity argument."""
        return cls(d=d, sigma=c_const * d ** 0.25, n=n, seed=seed, c_const=c_const)

    @property
    def theta_star(self):
        theta = np.zeros(self.d)
        theta[0] = np.sqrt(self.d)
        return theta


@dataclass(frozen=True)
class TradeoffModelConfig:
    d: int
    n: int
    seed: int = 0
    p_flip: float = 0.1
    mean_scale: float = 10.0

    def __post_init__(self):
        if self.d < 1 or self.n < 1:
            raise ValueError(f"invalid dimensions d={self.d}, n={self.n}")
        if not 0.0 <= self.p_flip <= 1.0:
            raise ValueError("p_flip must lie in [0, 1]")


# ---------------------------------------------------------------------------
# generators

def _labels(rng, n):
    return rng.choice(np.array([-1.0, 1.0]), size=n)


def gen_gaussian_model(cfg: GaussianModelConfig) -> Dataset:
    """y ~ Unif{±1}, x ~ N(y theta*, sigma^2 I) with theta* = (sqrt(d), 0, ..., 0)."""
    rng = make_rng(cfg.seed)
    y = _labels(rng, cfg.n)
    X = y[:, None] * cfg.theta_star[None, :] + cfg.sigma * rng.standard_normal((cfg.n, cfg.d))
    return Dataset(X, y, name="gaussian_model", seed=cfg.seed,
                   meta={"generator": "gen_gaussian_model", "rng": RNG_ALGORITHM,
                         "sigma": cfg.sigma, "c_const": cfg.c_const},
                   check_distinct=cfg.sigma > 0)


def gen_tradeoff_model(cfg: TradeoffModelConfig) -> Dataset:
    """Column 0 is the robust feature (equals y w.p. 1 - p_flip); columns
    1..d are weak features drawn from N(mean_scale * y / sqrt(d), 1)."""
    rng = make_rng(cfg.seed)
    y = _labels(rng, cfg.n)
    flip = rng.random(cfg.n) < cfg.p_flip
    x0 = np.where(flip, -y, y)
    weak = cfg.mean_scale * y[:, None] / np.sqrt(cfg.d) + rng.standard_normal((cfg.n, cfg.d))
    X = np.column_stack([x0, weak])
    return Dataset(X, y, name="tradeoff_model", seed=cfg.seed,
                   meta={"generator": "gen_tradeoff_model", "rng": RNG_ALGORITHM,
                         "p_flip": cfg.p_flip, "mean_scale": cfg.mean_scale})


def gen_basis_vector_task(d, n, seed=0) -> Dataset:
    """Points y_i * e_{k_i} on distinct canonical directions k_i."""
    if n < 1 or d < 1:
        raise ValueError("d and n must be positive")
    if n > d:
        raise ValueError(f"n={n} exceeds d={d}: basis directions must be distinct")
    rng = make_rng(seed)
    idx = rng.permutation(d)[:n]
    y = _labels(rng, n)
    X = np.zeros((n, d))
    X[np.arange(n), idx] = y
    return Dataset(X, y, name="basis_vector_task", seed=seed,
                   meta={"generator": "gen_basis_vector_task", "rng": RNG_ALGORITHM,
                         "basis_indices": idx.tolist()})


def quadratic_label(X):
    """sign(sum of squares of the first half - sum of squares of the second half); 0 on ties."""
    X = np.atleast_2d(X)
    half = X.shape[1] // 2
    return np.sign(np.sum(X[:, :half] ** 2, axis=1) - np.sum(X[:, half:] ** 2, axis=1))


def gen_quadratic_task(d, n, seed=0) -> Dataset:
    if n < 1 or d < 1:
        raise ValueError("d and n must be positive")
    rng = make_rng(seed)
    X = rng.standard_normal((n, 2 * d))
    y = quadratic_label(X)
    # exact ties have probability zero but would leave a third class
    while np.any(y == 0):
        bad = y == 0
        X[bad] = rng.standard_normal((int(bad.sum()), 2 * d))
        y = quadratic_label(X)
    return Dataset(X, y, name="quadratic_task", seed=seed,
                   meta={"generator": "gen_quadratic_task", "rng": RNG_ALGORITHM})


def pattern_index(bits):
    """Row index into a 2^k lookup table: bit i is set when bits[..., i] == -1,
    most significant first. (+1, ..., +1) maps to 0."""
    bits = np.asarray(bits)
    k = bits.shape[-1]
    weights = 1 << np.arange(k - 1, -1, -1)
    return ((bits < 0).astype(np.int64) * weights).sum(axis=-1)


def gen_hidden_pattern_task(d, k, j_star, g_table, n, seed=0) -> Dataset:
    """x ~ Unif{±1}^d, y = g(x_{j*}, ..., x_{j*+k-1}) with ``j_star`` 1-based."""
    g_table = np.asarray(g_table, dtype=float).ravel()
    if k < 1 or d < k:
        raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
    if not 1 <= j_star <= d - k + 1:
        raise ValueError(f"j_star={j_star} outside [1, {d - k + 1}]")
    if g_table.shape[0] != 2 ** k or not np.all(np.abs(g_table) == 1.0):
        raise ValueError(f"g_table must hold 2^k={2 ** k} entries in {{-1, +1}}")
    rng = make_rng(seed)
    X = rng.choice(np.array([-1.0, 1.0]), size=(n, d))
    window = X[:, j_star - 1:j_star - 1 + k]
    y = g_table[pattern_index(window)]
    return Dataset(X, y, name="hidden_pattern_task", seed=seed,
                   meta={"generator": "gen_hidden_pattern_task", "rng": RNG_ALGORITHM,
                         "k": k, "j_star": j_star, "g_table": g_table.tolist()},
                   check_distinct=False)


# ---------------------------------------------------------------------------
# IDX files

def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path, expected_magic):
    """Parse an IDX file into a uint8 array, checking the magic number and length."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise ValueError(f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - header_len < count:
        raise ValueError(f"{path}: truncated IDX payload ({len(raw) - header_len} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_len).reshape(dims)


def load_idx_subset(images_path, labels_path, class_a, class_b, n_per_class) -> Dataset:
    """First ``n_per_class`` images of each class in file order; class_a -> +1, class_b -> -1."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image and label files disagree on item count")
    picks = []
    for cls in (class_a, class_b):
        where = np.flatnonzero(labels == cls)
        if where.size == 0:
            raise ValueError(f"class {cls} absent from {labels_path}")
        if where.size < n_per_class:
            raise ValueError(f"class {cls} has only {where.size} items, {n_per_class} requested")
        picks.append(where[:n_per_class])
    idx = np.sort(np.concatenate(picks))
    X = images[idx].reshape(idx.size, -1).astype(float) / 255.0
    y = np.where(labels[idx] == class_a, 1.0, -1.0)
    image_shape = list(images.shape[1:])
    return Dataset(X, y, name=f"idx_{class_a}_vs_{class_b}", seed=0,
                   meta={"generator": "load_idx_subset", "images": str(images_path),
                         "labels": str(labels_path), "image_shape": image_shape})


def write_idx(path, array):
    """Write a uint8 array as IDX (used for fixtures and round trips)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())
