"""Kernel Inducing Points: distill a training set into a few support points by
descending the closed-form kernel-regression loss, plus its adversarial variant."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .attack import AttackConfig, pgd
from .data import Dataset, make_rng
from .io import write_json, write_table_csv
from .kernel import KernelSpec, gram, ntk_grad_weighted
from .regression import KernelPredictor, RankDeficientGramError, fit, sign_accuracy, solve_spd

AUTO_RIDGE_SCALE = 1e-6
MAX_HALVINGS = 20


class SingularSupportError(RankDeficientGramError):
    """The support Gram became singular during optimization."""

    def __init__(self, cause: RankDeficientGramError, iteration):
        super().__init__(cause.lambda_min, cause.ridge)
        self.iteration = int(iteration)
        self.args = (f"singular support Gram at iteration {iteration}: {cause}",)

    def __str__(self):
        return self.args[0]


@dataclass(eq=False)
class SupportSet:
    """Learnable distilled dataset.

    ``ridge`` is a nonnegative float or ``"auto"``, meaning
    1e-6 * trace(K_SS) / s recomputed at the current X_S. With
    ``learn_inputs`` off, X_S stays frozen and only labels can move.
    """

    X_S: np.ndarray
    Y_S: np.ndarray
    learn_labels: bool = False
    ridge: object = "auto"
    step: int = 0
    learn_inputs: bool = True

    def __post_init__(self):
        self.X_S = np.array(self.X_S, dtype=float, ndmin=2)
        self.Y_S = np.array(self.Y_S, dtype=float).ravel()
        if self.X_S.shape[0] < 1:
            raise ValueError("support needs at least one point")
        if self.Y_S.shape[0] != self.X_S.shape[0]:
            raise ValueError("X_S and Y_S lengths differ")
        if self.ridge != "auto" and not float(self.ridge) >= 0:
            raise ValueError("ridge must be 'auto' or nonnegative")
        if not (self.learn_inputs or self.learn_labels):
            raise ValueError("nothing to learn: enable learn_inputs or learn_labels")

    @property
    def s(self):
        return self.X_S.shape[0]

    def ridge_value(self, spec, K_SS=None):
        if self.ridge == "auto":
            if K_SS is None:
                K_SS = gram(spec, self.X_S)
            return AUTO_RIDGE_SCALE * float(np.trace(K_SS)) / self.s
        return float(self.ridge)

    def copy(self):
        return SupportSet(self.X_S.copy(), self.Y_S.copy(), self.learn_labels, self.ridge, self.step,
                          self.learn_inputs)

    def as_dataset(self, name="support"):
        return Dataset(self.X_S, self.Y_S, name=name, meta={"generator": "distill"}, check_distinct=False)

    def predictor(self, spec, ridge=0.0) -> KernelPredictor:
        """Refit the kernel predictor on the support at a user-chosen ridge."""
        return fit(spec, self.as_dataset(), ridge)


@dataclass(eq=False)
class DistillTrace:
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    heldout_acc: list = field(default_factory=list)
    best_iter: int = 0

    def __len__(self):
        return len(self.loss)

    def table(self):
        cols = {"iter": np.arange(len(self.loss)), "loss": self.loss,
                "grad_norm": self.grad_norm, "lr": self.lr}
        if self.heldout_acc:
            cols["heldout_acc"] = self.heldout_acc
        return cols


def _targets(target):
    if isinstance(target, Dataset):
        return target.X, target.Y
    X, Y = target
    return np.asarray(X, dtype=float), np.asarray(Y, dtype=float)


def _check(support, XT):
    if XT.shape[1] != support.X_S.shape[1]:
        raise ValueError(f"dimension mismatch: support d={support.X_S.shape[1]}, target d={XT.shape[1]}")


def _solve(spec, support, K_SS, rhs):
    r = support.ridge_value(spec, K_SS)
    return solve_spd(K_SS, rhs, r), r


def kip_residual(spec, support: SupportSet, XT, YT):
    K_SS = gram(spec, support.X_S)
    alpha, _ = _solve(spec, support, K_SS, support.Y_S)
    return YT - gram(spec, XT, support.X_S) @ alpha


def kip_loss(spec: KernelSpec, support: SupportSet, target) -> float:
    """||Y_T - K_TS (K_SS + ridge I)^-1 Y_S||^2."""
    XT, YT = _targets(target)
    _check(support, XT)
    r = kip_residual(spec, support, XT, YT)
    return float(r @ r)


def kip_grad(spec: KernelSpec, support: SupportSet, target):
    """Analytic gradient of ``kip_loss``.

    Returns ``(grad_X, grad_Y)``; ``grad_Y`` is None unless labels are learnable.
    With A = K_SS + r I, alpha = A^-1 Y_S, residual e = Y_T - K_TS alpha and
    beta = A^-1 K_TS^T e, the differential is
    dL = -2 e^T dK_TS alpha + 2 beta^T (dK_SS + dr I) alpha - 2 beta^T dY_S.
    """
    XT, YT = _targets(target)
    _check(support, XT)
    XS, YS = support.X_S, support.Y_S
    K_SS = gram(spec, XS)
    K_TS = gram(spec, XT, XS)
    alpha, _ = _solve(spec, support, K_SS, YS)
    e = YT - K_TS @ alpha
    beta, _ = _solve(spec, support, K_SS, K_TS.T @ e)

    # weights on d K(x_k, .) / d x_k, the derivative in the first slot
    gX = ntk_grad_weighted(spec, XS, XT, -2.0 * np.outer(alpha, e))
    # K_SS[k, j] depends on x_k through both its row and column
    W = np.outer(beta, alpha)
    W_SS = 2.0 * (W + W.T)
    if support.ridge == "auto":
        # trace(K_SS) = sum_k K(x_k, x_k); its derivative is twice the first-slot gradient
        W_SS += 4.0 * float(beta @ alpha) * (AUTO_RIDGE_SCALE / support.s) * np.eye(support.s)
    gX += ntk_grad_weighted(spec, XS, XS, W_SS)
    gY = -2.0 * beta if support.learn_labels else None
    return gX, gY


def _init_support(target: Dataset, s, init, seed, learn_labels, ridge, learn_inputs=True):
    n = target.n
    if s < 1 or s > n:
        raise ValueError(f"support size must be in [1, {n}], got {s}")
    rng = make_rng(seed, "distill-init")
    if target.is_classification:
        # balanced +-1 labels: ceil(s/2) positives, floor(s/2) negatives
        labels = np.array([1.0 if i % 2 == 0 else -1.0 for i in range(s)])
    else:
        labels = None
    if init == "subsample":
        if labels is None:
            idx = rng.choice(n, s, replace=False)
        else:
            idx = []
            for lab in (1.0, -1.0):
                pool = np.flatnonzero(target.Y == lab)
                want = int(np.sum(labels == lab))
                if pool.size < want:
                    raise ValueError(f"only {pool.size} targets labeled {lab:+g}, need {want}")
                idx.append(rng.choice(pool, want, replace=False))
            idx = np.concatenate(idx)
            labels = target.Y[idx]
        XS = target.X[idx].copy()
        YS = target.Y[idx].copy()
    elif init == "noise":
        scale = float(np.sqrt(np.mean(target.X ** 2)))
        XS = scale * rng.standard_normal((s, target.d))
        YS = labels if labels is not None else rng.choice(target.Y, s, replace=False)
    else:
        raise ValueError(f"init must be 'subsample' or 'noise', got {init!r}")
    return SupportSet(XS, YS, learn_labels=learn_labels, ridge=ridge, learn_inputs=learn_inputs)


def _optimize(spec, target: Dataset, support: SupportSet, lr, iters, perturb, squared=True,
              backtrack=True, eval_set=None):
    """Gradient descent with halving backtracking. ``perturb(support)`` returns
    the target inputs for the current outer step (identity for plain KIP)."""
    if not lr > 0:
        raise ValueError("lr must be positive")
    if iters < 0:
        raise ValueError("iters must be nonnegative")
    trace = DistillTrace()
    best, best_loss = support.copy(), np.inf
    cur = support.copy()
    for it in range(iters):
        XT = perturb(cur)
        tgt = (XT, target.Y)
        try:
            loss = kip_loss(spec, cur, tgt)
            gX, gY = kip_grad(spec, cur, tgt)
        except RankDeficientGramError as exc:
            raise SingularSupportError(exc, it) from exc
        if not squared:
            root = np.sqrt(loss)
            scale = 0.5 / root if root > 0 else 0.0
            loss, gX = root, gX * scale
            gY = gY * scale if gY is not None else None
        if not cur.learn_inputs:
            gX = np.zeros_like(gX)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        gnorm = float(np.sqrt(np.sum(gX ** 2) + (np.sum(gY ** 2) if gY is not None else 0.0)))
        trace.loss.append(float(loss))
        trace.grad_norm.append(gnorm)
        trace.lr.append(float(lr))
        if eval_set is not None:
            trace.heldout_acc.append(
                sign_accuracy(cur.predictor(spec, cur.ridge_value(spec)).decision_function(eval_set.X),
                              eval_set.Y))
        if loss < best_loss:
            best, best_loss = cur.copy(), loss
            trace.best_iter = it

        # propose a step; halve lr while the loss (at the same perturbation) goes up
        for _ in range(MAX_HALVINGS + 1):
            nxt = cur.copy()
            nxt.X_S = cur.X_S - lr * gX
            if gY is not None:
                nxt.Y_S = cur.Y_S - lr * gY
            nxt.step = it + 1
            if not backtrack:
                break
            try:
                new = kip_loss(spec, nxt, tgt)
            except RankDeficientGramError:
                new = np.inf
            new = np.sqrt(new) if not squared else new
            if new <= loss:
                break
            lr *= 0.5
        else:
            nxt = cur.copy()   # no acceptable step; stay put with the reduced lr
            nxt.step = it + 1
        cur = nxt
    best.step = iters
    return best, trace


def distill(spec: KernelSpec, target: Dataset, s, init="subsample", lr=0.1, iters=100, seed=0,
            learn_labels=False, ridge="auto", backtrack=True, eval_set=None, learn_inputs=True):
    """Plain KIP. Returns the best-loss support and the per-iteration trace."""
    support = _init_support(target, s, init, seed, learn_labels, ridge, learn_inputs)
    return _optimize(spec, target, support, lr, iters, lambda sup: target.X,
                     backtrack=backtrack, eval_set=eval_set)


def _worst_targets(spec, support: SupportSet, target: Dataset, attack: AttackConfig):
    """Cold-start PGD from delta = 0 against the current support predictor."""
    if attack.steps == 0 or attack.epsilon == 0:
        return target.X
    K_SS = gram(spec, support.X_S)
    alpha, r = _solve(spec, support, K_SS, support.Y_S)
    pred = KernelPredictor(spec, support.as_dataset(), alpha, r)
    return pgd(pred, target.X, target.Y, attack)


def adv_kip_loss(spec: KernelSpec, support: SupportSet, target: Dataset, attack: AttackConfig,
                 squared=False) -> float:
    """KIP loss with the targets moved to their worst case inside the budget.

    Unsquared by default, matching the adversarial display; ``squared=True``
    gives the quantity ``adv_distill`` optimizes.
    """
    _check(support, target.X)
    XT = _worst_targets(spec, support, target, attack)
    loss = kip_loss(spec, support, (XT, target.Y))
    return loss if squared else float(np.sqrt(loss))


def adv_distill(spec: KernelSpec, target: Dataset, s, attack: AttackConfig, init="subsample", lr=0.1,
                iters=100, seed=0, learn_labels=False, ridge="auto", squared=True, backtrack=True,
                eval_set=None):
    """Adversarial KIP: each outer step recomputes the worst targets, then descends
    the KIP loss on X_S with those targets held fixed."""
    target.require_classification()
    support = _init_support(target, s, init, seed, learn_labels, ridge)
    return _optimize(spec, target, support, lr, iters,
                     lambda sup: _worst_targets(spec, sup, target, attack),
                     squared=squared, backtrack=backtrack, eval_set=eval_set)


def export_support(out_dir, support: SupportSet, trace: DistillTrace, spec: KernelSpec, seed,
                   attack: AttackConfig = None, extra=None):
    """support.csv, trace.csv and a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = {f"x{j}": support.X_S[:, j] for j in range(support.X_S.shape[1])}
    cols["y"] = support.Y_S
    write_table_csv(out / "support.csv", cols)
    write_table_csv(out / "trace.csv", trace.table())
    manifest = {"seed": seed, "spec": spec.to_dict(), "attack": attack.to_dict() if attack else None,
                "ridge": support.ridge, "learn_labels": support.learn_labels,
                "best_iter": trace.best_iter,
                "init_loss": trace.loss[0] if trace.loss else None,
                "best_loss": trace.loss[trace.best_iter] if trace.loss else None,
                "final_loss": trace.loss[-1] if trace.loss else None,
                **(extra or {})}
    write_json(out / "distill.json", manifest)
    return manifest


class KIPDistiller(ClassifierMixin, BaseEstimator):
    """Distill (X, y) into ``support_size`` points; predicts with the kernel
    predictor refit on the support at ``final_ridge``."""

    def __init__(self, support_size=4, init="subsample", lr=0.1, iters=100, learn_labels=False,
                 ridge="auto", final_ridge=0.0, depth=1, seed=0, backtrack=True):
        self.support_size = support_size
        self.init = init
        self.lr = lr
        self.iters = iters
        self.learn_labels = learn_labels
        self.ridge = ridge
        self.final_ridge = final_ridge
        self.depth = depth
        self.seed = seed
        self.backtrack = backtrack

    def _run(self, spec, data):
        return distill(spec, data, self.support_size, self.init, self.lr, self.iters, self.seed,
                       self.learn_labels, self.ridge, self.backtrack)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        self.spec_ = KernelSpec(depth=self.depth)
        data = Dataset(X, y, name="fit", check_distinct=False)
        self.support_, self.trace_ = self._run(self.spec_, data)
        self.predictor_ = self.support_.predictor(self.spec_, self.final_ridge)
        self.classes_ = np.array([-1.0, 1.0])
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "predictor_")
        return self.predictor_.decision_function(check_array(X, dtype=float))

    def predict(self, X):
        return np.where(self.decision_function(X) > 0, 1.0, -1.0)

    def transform(self, X):
        """Kernel features K(X, X_S)."""
        check_is_fitted(self, "support_")
        return gram(self.spec_, check_array(X, dtype=float), self.support_.X_S)


class AdversarialKIPDistiller(KIPDistiller):
    def __init__(self, support_size=4, init="subsample", lr=0.1, iters=100, learn_labels=False,
                 ridge="auto", final_ridge=0.0, depth=1, seed=0, backtrack=True, epsilon=0.1,
                 norm="linf", attack_alpha=0.025, attack_steps=10, attack_loss="logistic", squared=True):
        super().__init__(support_size, init, lr, iters, learn_labels, ridge, final_ridge, depth, seed,
                         backtrack)
        self.epsilon = epsilon
        self.norm = norm
        self.attack_alpha = attack_alpha
        self.attack_steps = attack_steps
        self.attack_loss = attack_loss
        self.squared = squared

    def attack_config(self):
        return AttackConfig(norm=self.norm, epsilon=self.epsilon, alpha=self.attack_alpha,
                            steps=self.attack_steps, loss=self.attack_loss)

    def _run(self, spec, data):
        return adv_distill(spec, data, self.support_size, self.attack_config(), self.init, self.lr,
                           self.iters, self.seed, self.learn_labels, self.ridge, self.squared,
                           self.backtrack)
