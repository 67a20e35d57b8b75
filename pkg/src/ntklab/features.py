"""Split the kernel predictor into one function per Gram eigenvector and
measure how useful, and how robustly useful, each piece is."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attack import AttackConfig, pgd
from .data import Dataset
from .io import svg_image_montage, write_pgm
from .kernel import KernelSpec, eigendecompose, gram, ntk_grad_weighted

ZERO_MODE_RTOL = 1e-10
GAMMA_LABEL = "PGD upper bound"
CLASSES = ("robustly useful", "useful non-robust", "not useful")


@dataclass(frozen=True, eq=False)
class FeatureFunction:
    """f_i(x) = K(x, X_T) . coef with coef = V_i (V_i . Y_T) / (lambda_i + ridge)."""

    index: int
    eigenvalue: float
    eigenvector: np.ndarray
    coef: np.ndarray
    spec: KernelSpec
    train: Dataset

    def decision_function(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return gram(self.spec, X, self.train.X) @ self.coef

    __call__ = decision_function

    def input_gradient(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return ntk_grad_weighted(self.spec, X, self.train.X, self.coef)

    def train_values(self):
        """Values on the training inputs, (V_i . Y) V_i when ridge = 0."""
        return self.decision_function(self.train.X)


@dataclass(frozen=True, eq=False)
class Decomposition:
    features: list
    n_zero_modes: int
    ridge: float

    def __len__(self):
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    def __getitem__(self, i):
        return self.features[i]

    def values(self, X):
        """(n, k) matrix of every feature at X, sharing one kernel evaluation."""
        if not self.features:
            return np.zeros((np.atleast_2d(X).shape[0], 0))
        f0 = self.features[0]
        C = np.column_stack([f.coef for f in self.features])
        return gram(f0.spec, np.atleast_2d(np.asarray(X, dtype=float)), f0.train.X) @ C

    def reconstruct(self, X):
        return self.values(X).sum(axis=1)


def decompose(spec: KernelSpec, train: Dataset, ridge=0.0) -> Decomposition:
    """One feature per eigenvector with lambda_i > 1e-10 lambda_max.

    Modes are selected on the un-ridged spectrum; a positive ``ridge`` only
    shifts the inverse so the features sum to the ridge predictor.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    eig = eigendecompose(gram(spec, train.X))
    if eig.lambda_max <= 0:
        raise ValueError("all Gram eigenvalues are zero")
    keep = eig.eigenvalues > ZERO_MODE_RTOL * eig.lambda_max
    proj = eig.project(train.Y)
    feats = []
    for i in np.flatnonzero(keep):
        v = eig.eigenvectors[:, i].copy()
        lam = float(eig.eigenvalues[i])
        coef = v * proj[i] / (lam + ridge)
        v.flags.writeable = False
        coef.flags.writeable = False
        feats.append(FeatureFunction(len(feats), lam, v, coef, spec, train))
    return Decomposition(feats, int((~keep).sum()), float(ridge))


@dataclass(frozen=True, eq=False)
class NormalizedFeature:
    """(f(x) - mean) / scale with mean and root second moment taken over a reference set."""

    base: object
    mean: float
    scale: float

    def decision_function(self, X):
        return (self.base.decision_function(X) - self.mean) / self.scale

    __call__ = decision_function

    def input_gradient(self, X):
        return self.base.input_gradient(X) / self.scale


def normalize_feature(f, reference) -> NormalizedFeature:
    X = reference.X if isinstance(reference, Dataset) else np.asarray(reference, dtype=float)
    if X.shape[0] == 0:
        raise ValueError("empty reference set")
    v = f.decision_function(X)
    mu = float(v.mean())
    sd = float(np.sqrt(np.mean((v - mu) ** 2)))
    if not sd > 0:
        raise ValueError("feature is constant on the reference set; cannot normalize")
    if isinstance(f, NormalizedFeature):
        # fold into the base so repeated normalization does not nest
        return NormalizedFeature(f.base, f.mean + mu * f.scale, f.scale * sd)
    return NormalizedFeature(f, mu, sd)


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise ValueError("empty evaluation set")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), se


def usefulness(f, eval_set: Dataset):
    """(rho, standard error) for rho = mean of y f(x)."""
    eval_set.require_classification()
    if eval_set.n == 0:
        raise ValueError("empty evaluation set")
    return _mean_se(eval_set.Y * f.decision_function(eval_set.X))


def robust_usefulness(f, eval_set: Dataset, attack: AttackConfig):
    """(gamma, standard error): mean of y f(x + delta) at the lowest value PGD finds.

    The start point is one of the candidates, so gamma <= rho pointwise. PGD
    cannot certify the infimum, so this is an upper bound on the true gamma.
    """
    eval_set.require_classification()
    if eval_set.n == 0:
        raise ValueError("empty evaluation set")
    cfg = AttackConfig(norm=attack.norm, epsilon=attack.epsilon, alpha=attack.alpha, steps=attack.steps,
                       loss="margin", random_start=attack.random_start, seed=attack.seed)
    X_adv = pgd(f, eval_set.X, eval_set.Y, cfg, keep_best=True)
    m_adv = eval_set.Y * f.decision_function(X_adv)
    # keep_best already prefers the start on ties; guard against rounding in re-evaluation
    m_adv = np.minimum(m_adv, eval_set.Y * f.decision_function(eval_set.X))
    return _mean_se(m_adv)


def classify(rho, gamma, rho_threshold, gamma_threshold):
    if rho < rho_threshold:
        return "not useful"
    return "robustly useful" if gamma > gamma_threshold else "useful non-robust"


@dataclass(eq=False)
class FeatureReport:
    features: list                  # dicts: index, eigenvalue, rho, rho_se, gamma, gamma_se, class
    rho_threshold: float
    gamma_threshold: float
    attack: dict
    n_zero_modes: int
    gamma_estimate: str = GAMMA_LABEL
    images: list = field(default_factory=list)

    def counts(self):
        return {c: sum(f["class"] == c for f in self.features) for c in CLASSES}

    def consistent(self):
        return all(f["class"] == classify(f["rho"], f["gamma"], self.rho_threshold, self.gamma_threshold)
                   for f in self.features)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def feature_report(spec: KernelSpec, train: Dataset, eval_set: Dataset, attack: AttackConfig,
                   rho_threshold=0.05, gamma_threshold=0.0, max_features=None, ridge=0.0,
                   normalize=True, out_dir=None, image_shape=None) -> FeatureReport:
    """Classify the leading eigenfeatures (by eigenvalue) as robustly useful,
    useful non-robust, or not useful.

    Features are normalized over ``eval_set`` before measuring. When an
    image shape is known and ``out_dir`` is given, the input gradient of each
    feature at the training-mean point is written as a PGM plus an SVG montage.
    """
    if not rho_threshold > 0:
        raise ValueError("rho_threshold must be positive")
    if gamma_threshold < 0:
        raise ValueError("gamma_threshold must be nonnegative")
    dec = decompose(spec, train, ridge)
    feats = dec.features if max_features is None else dec.features[:max_features]
    rows = []
    for f in feats:
        g = f
        if normalize:
            try:
                g = normalize_feature(f, eval_set)
            except ValueError:
                rows.append({"index": f.index, "eigenvalue": f.eigenvalue, "rho": 0.0, "rho_se": 0.0,
                             "gamma": 0.0, "gamma_se": 0.0, "class": "not useful"})
                continue
        rho, rho_se = usefulness(g, eval_set)
        gamma, gamma_se = robust_usefulness(g, eval_set, attack)
        rows.append({"index": f.index, "eigenvalue": f.eigenvalue, "rho": rho, "rho_se": rho_se,
                     "gamma": gamma, "gamma_se": gamma_se,
                     "class": classify(rho, gamma, rho_threshold, gamma_threshold)})
    report = FeatureReport(rows, float(rho_threshold), float(gamma_threshold), attack.to_dict(),
                           dec.n_zero_modes)
    shape = image_shape or train.meta.get("image_shape")
    if out_dir is not None and shape is not None:
        report.images = export_gradient_images(feats, train, tuple(shape), out_dir)
    return report


def export_gradient_images(feats, train: Dataset, shape, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    center = train.X.mean(axis=0, keepdims=True)
    imgs, labels, names = [], [], []
    for f in feats:
        img = f.input_gradient(center)[0].reshape(shape)
        name = f"feature_{f.index:03d}.pgm"
        write_pgm(out / name, img)
        imgs.append(img)
        labels.append(f"#{f.index} l={f.eigenvalue:.3g}")
        names.append(name)
    svg_image_montage(out / "features.svg", imgs, labels)
    return names


class EigenFeatures(TransformerMixin, BaseEstimator):
    """Map inputs to the values of the leading kernel eigenfeatures."""

    def __init__(self, depth=1, ridge=0.0, n_features=None):
        self.depth = depth
        self.ridge = ridge
        self.n_features = n_features

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        self.spec_ = KernelSpec(depth=self.depth)
        dec = decompose(self.spec_, Dataset(X, y, name="fit"), self.ridge)
        k = len(dec) if self.n_features is None else min(self.n_features, len(dec))
        self.decomposition_ = Decomposition(dec.features[:k], dec.n_zero_modes, dec.ridge)
        self.eigenvalues_ = np.array([f.eigenvalue for f in self.decomposition_])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "decomposition_")
        return self.decomposition_.values(check_array(X, dtype=float))
