"""FGSM and PGD against any predictor exposing ``decision_function`` and
``input_gradient`` (kernel predictors, finite nets, linear models)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, make_rng
from .regression import sign_accuracy

NORMS = ("linf", "l2")
LOSSES = ("square", "logistic", "margin")


@dataclass(frozen=True)
class AttackConfig:
    """Perturbation budget and PGD schedule.

    ``loss`` is the objective the attacker ascends: ``square`` (f - y)^2,
    ``logistic`` log(1 + exp(-y f)), or ``margin`` -y f.
    """

    norm: str = "linf"
    epsilon: float = 0.1
    alpha: float = 0.01
    steps: int = 10
    loss: str = "logistic"
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.steps < 0 or int(self.steps) != self.steps:
            raise ValueError("steps must be a nonnegative integer")
        if self.steps > 0 and not self.alpha > 0:
            raise ValueError("alpha must be positive when steps > 0")

    def to_dict(self):
        return asdict(self)


class LinearPredictor:
    """f(x) = w . x + b."""

    def __init__(self, w, b=0.0):
        self.w = np.asarray(w, dtype=float).ravel()
        self.b = float(b)

    def decision_function(self, X):
        return np.atleast_2d(X) @ self.w + self.b

    def input_gradient(self, X):
        return np.broadcast_to(self.w, np.atleast_2d(X).shape).copy()


def attack_loss(f, y, kind):
    if kind == "square":
        return (f - y) ** 2
    if kind == "logistic":
        return np.logaddexp(0.0, -y * f)
    return -y * f


def _dloss_df(f, y, kind):
    if kind == "square":
        return 2.0 * (f - y)
    if kind == "logistic":
        # -y * sigmoid(-y f), written to avoid overflow
        return -y * np.exp(-np.logaddexp(0.0, y * f))
    return -y


def loss_and_grad(predictor, X, y, kind):
    f = predictor.decision_function(X)
    g = _dloss_df(f, y, kind)[:, None] * predictor.input_gradient(X)
    return attack_loss(f, y, kind), g


def _contain_linf(X, X0, eps):
    """Nudge coordinates toward X0 by ulps until |X - X0| <= eps holds in floating point."""
    X = X.copy()
    bad = np.abs(X - X0) > eps
    while np.any(bad):
        X[bad] = np.nextafter(X[bad], X0[bad])
        bad = np.abs(X - X0) > eps
    return X


def _project(X, X0, cfg):
    if cfg.norm == "linf":
        return _contain_linf(np.clip(X, X0 - cfg.epsilon, X0 + cfg.epsilon), X0, cfg.epsilon)
    delta = X - X0
    norms = np.linalg.norm(delta, axis=1, keepdims=True)
    factor = np.minimum(1.0, cfg.epsilon / np.where(norms > 0, norms, 1.0))
    out = X0 + delta * factor
    # rounding can leave a row a few ulps outside the ball; shrink it radially
    over = np.linalg.norm(out - X0, axis=1) > cfg.epsilon
    while np.any(over):
        out[over] = X0[over] + (out[over] - X0[over]) * (1.0 - 4 * np.finfo(float).eps)
        over = np.linalg.norm(out - X0, axis=1) > cfg.epsilon
    return out


def _step(grad, cfg):
    if cfg.norm == "linf":
        return np.sign(grad)
    norms = np.linalg.norm(grad, axis=1, keepdims=True)
    return np.where(norms > 0, grad / np.where(norms > 0, norms, 1.0), 0.0)


def fgsm(predictor, X, y, cfg: AttackConfig):
    """x + epsilon * sign(grad_x loss); sign(0) = 0 leaves a coordinate untouched."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    _, g = loss_and_grad(predictor, X, y, cfg.loss)
    if cfg.norm == "linf":
        return _contain_linf(X + cfg.epsilon * np.sign(g), X, cfg.epsilon)
    return X + cfg.epsilon * np.sign(g)


@dataclass(eq=False)
class PGDResult:
    X_adv: np.ndarray
    losses: np.ndarray       # (steps + 1, n): loss at every iterate, start included
    max_excursion: float     # largest ||x_t - x_0|| over all iterates


def pgd(predictor, X, y, cfg: AttackConfig, keep_best=False, return_result=False):
    """Projected gradient ascent on the attack loss inside the budget ball
    around the original points.

    ``keep_best`` returns, per point, the highest-loss iterate seen (the
    start point included) rather than the last one.
    """
    X0 = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    Xt = X0.copy()
    if cfg.random_start and cfg.epsilon > 0:
        rng = make_rng(cfg.seed)
        if cfg.norm == "linf":
            Xt = X0 + rng.uniform(-cfg.epsilon, cfg.epsilon, X0.shape)
        else:
            u = rng.standard_normal(X0.shape)
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            r = cfg.epsilon * rng.random((X0.shape[0], 1)) ** (1.0 / X0.shape[1])
            Xt = X0 + u * r
    history = []
    best, best_loss = Xt.copy(), None
    excursion = 0.0
    ord_ = np.inf if cfg.norm == "linf" else 2
    for t in range(cfg.steps + 1):
        loss, g = loss_and_grad(predictor, Xt, y, cfg.loss)
        history.append(loss)
        excursion = max(excursion, float(np.max(np.linalg.norm(Xt - X0, ord=ord_, axis=1), initial=0.0)))
        if keep_best:
            if best_loss is None:
                best_loss = loss.copy()
            better = loss > best_loss
            best[better] = Xt[better]
            best_loss = np.where(better, loss, best_loss)
        if t < cfg.steps:
            Xt = _project(Xt + cfg.alpha * _step(g, cfg), X0, cfg)
    X_adv = best if keep_best else Xt
    if return_result:
        return PGDResult(X_adv, np.array(history), excursion)
    return X_adv


def corner_search(predictor, x, y, epsilon, kind="square"):
    """Exhaustive maximum of the attack loss over the 2^d corners of the linf ball."""
    x = np.asarray(x, dtype=float).ravel()
    d = x.size
    if d > 20:
        raise ValueError("corner search is exponential in d; keep d <= 20")
    signs = 1.0 - 2.0 * ((np.arange(2 ** d)[:, None] >> np.arange(d)[None, :]) & 1)
    corners = x[None, :] + epsilon * signs
    losses = attack_loss(predictor.decision_function(corners), np.full(len(corners), float(y)), kind)
    k = int(np.argmax(losses))
    return corners[k], float(losses[k])


@dataclass(eq=False)
class AttackResult:
    adversarial: Dataset
    clean_acc: float
    robust_acc: float
    flipped: np.ndarray      # sign(f(x_adv)) != sign(f(x))
    config: AttackConfig

    def manifest(self):
        return {"config": self.config.to_dict(), "clean_acc": self.clean_acc,
                "robust_acc": self.robust_acc, "flipped": self.flipped.astype(int).tolist()}


def attack_dataset(predictor, data: Dataset, cfg: AttackConfig, method="pgd") -> AttackResult:
    """Attack every point independently and report clean / robust accuracy."""
    data.require_classification()
    if method == "fgsm":
        X_adv = fgsm(predictor, data.X, data.Y, cfg)
    elif method == "pgd":
        X_adv = pgd(predictor, data.X, data.Y, cfg)
    else:
        raise ValueError(f"unknown method {method!r}")
    f_clean = predictor.decision_function(data.X)
    f_adv = predictor.decision_function(X_adv)
    return AttackResult(
        adversarial=data.with_X(X_adv, name=f"{data.name}_adv"),
        clean_acc=sign_accuracy(f_clean, data.Y),
        robust_acc=sign_accuracy(f_adv, data.Y),
        flipped=np.sign(f_adv) != np.sign(f_clean),
        config=cfg,
    )
