"""One-hidden-layer ReLU network in the NTK parametrization.

    f(x) = sqrt(c/m) * (W2 . relu(W1 x / sqrt(d0)) - W2' . relu(W1' x / sqrt(d0)))

The primed twin starts as an exact copy of the unprimed half, so f is the
zero function at initialization; both halves (m/2 units each) are trained
jointly. All gradients are written out by hand. The ReLU subgradient at 0
is taken to be 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, make_rng
from .kernel import KernelSpec, eigendecompose, gram

NTK_AGREEMENT_TOL = 1e-10


class DivergenceError(RuntimeError):
    pass


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_prime(z):
    return (z > 0).astype(float)


@dataclass(eq=False)
class FiniteNet:
    W1: np.ndarray    # (m/2, d0)
    W2: np.ndarray    # (m/2,)
    W1b: np.ndarray   # twin
    W2b: np.ndarray
    c: float = 2.0

    @classmethod
    def init(cls, d0, m, seed=0, c=2.0):
        if m < 2 or m % 2:
            raise ValueError(f"width m must be even and >= 2, got {m}")
        rng = make_rng(seed)
        h = m // 2
        W1 = rng.standard_normal((h, d0))
        W2 = rng.standard_normal(h)
        return cls(W1, W2, W1.copy(), W2.copy(), c)

    @property
    def m(self):
        return 2 * self.W2.shape[0]

    @property
    def d0(self):
        return self.W1.shape[1]

    @property
    def scale(self):
        return np.sqrt(self.c / self.m)

    # parameter vector --------------------------------------------------
    @property
    def theta(self):
        return np.concatenate([self.W1.ravel(), self.W2, self.W1b.ravel(), self.W2b])

    def with_theta(self, theta):
        h, d0 = self.W1.shape
        k = h * d0
        parts = np.split(np.asarray(theta, dtype=float), [k, k + h, 2 * k + h])
        return FiniteNet(parts[0].reshape(h, d0), parts[1], parts[2].reshape(h, d0), parts[3], self.c)

    def copy(self):
        return self.with_theta(self.theta.copy())

    # forward / derivatives -----------------------------------------------
    def _check(self, X):
        X = X.X if isinstance(X, Dataset) else np.asarray(X, dtype=float)
        X = X.reshape(1, -1) if X.ndim == 1 else X
        if X.shape[1] != self.d0:
            raise ValueError(f"dimension mismatch: {X.shape[1]} vs {self.d0}")
        return X

    def _pre(self, X):
        r = np.sqrt(self.d0)
        return X @ self.W1.T / r, X @ self.W1b.T / r

    def forward(self, X):
        X = self._check(X)
        z, zb = self._pre(X)
        return self.scale * (_relu(z) @ self.W2 - _relu(zb) @ self.W2b)

    def jacobian(self, X):
        """d f(x_k) / d theta, shape (n, P), ordered like ``theta``."""
        X = self._check(X)
        z, zb = self._pre(X)
        s, r = self.scale, np.sqrt(self.d0)
        gW1 = s * (self.W2 * _relu_prime(z))[:, :, None] * X[:, None, :] / r
        gW1b = -s * (self.W2b * _relu_prime(zb))[:, :, None] * X[:, None, :] / r
        n = X.shape[0]
        return np.concatenate([gW1.reshape(n, -1), s * _relu(z), gW1b.reshape(n, -1), -s * _relu(zb)], axis=1)

    def input_gradient(self, X):
        X = self._check(X)
        z, zb = self._pre(X)
        s, r = self.scale, np.sqrt(self.d0)
        return s / r * ((self.W2 * _relu_prime(z)) @ self.W1 - (self.W2b * _relu_prime(zb)) @ self.W1b)

    def loss(self, data: Dataset):
        """Half squared error, the objective gradient descent minimizes."""
        return 0.5 * float(np.sum((self.forward(data.X) - data.Y) ** 2))

    def loss_grad(self, data: Dataset):
        resid = self.forward(data.X) - data.Y
        return self.jacobian(data.X).T @ resid


def _ntk_sum(net: FiniteNet, A, B):
    """Explicit sum over hidden units of relu*relu + W2^2 relu'*relu' x.x'/d0."""
    c, m, d0 = net.c, net.m, net.d0
    za, zba = net._pre(A)
    zb, zbb = net._pre(B)
    dot = A @ B.T / d0
    K = _relu(za) @ _relu(zb).T + _relu(zba) @ _relu(zbb).T
    K += ((_relu_prime(za) * net.W2 ** 2) @ _relu_prime(zb).T
          + (_relu_prime(zba) * net.W2b ** 2) @ _relu_prime(zbb).T) * dot
    return c / m * K


def empirical_ntk(net: FiniteNet, A, B=None):
    """Finite-width NTK, computed as the explicit unit sum and as J(A) J(B)^T.

    Raises if the two routes disagree beyond 1e-10 (relative to the largest
    entry), which would indicate a backpropagation error.
    """
    A = net._check(A)
    B = A if B is None else net._check(B)
    K_sum = _ntk_sum(net, A, B)
    K_jac = net.jacobian(A) @ net.jacobian(B).T
    scale = max(np.abs(K_sum).max(), 1.0)
    if np.abs(K_sum - K_jac).max() > NTK_AGREEMENT_TOL * scale:
        raise RuntimeError("empirical NTK: unit-sum and Jacobian routes disagree")
    return K_jac


def stability_bound(spec: KernelSpec, train: Dataset):
    """Largest stable learning rate 2 / (lambda_min + lambda_max) of the analytic Gram."""
    eig = eigendecompose(gram(spec, train.X))
    return 2.0 / (eig.lambda_min + eig.lambda_max)


@dataclass(eq=False)
class TrainTrace:
    loss: np.ndarray               # ||f_t(X) - Y||^2 for t = 0..steps
    displacement: np.ndarray       # ||theta_t - theta_0||
    kernel_drift: np.ndarray       # ||K_t - K_0||_F on the training set
    kernel_deviation: np.ndarray   # ||K_t - K_analytic||_F when a reference is given
    predictions: np.ndarray        # f_t(X), shape (steps + 1, n)
    theta_norm0: float
    net: FiniteNet = field(repr=False)


def train_gd(net: FiniteNet, train: Dataset, eta, steps, spec: KernelSpec | None = None,
             track_kernel=True) -> TrainTrace:
    """Full-batch gradient descent on 0.5 * ||f(X) - Y||^2.

    When ``spec`` is given, ``eta`` must sit below the stability bound of the
    analytic Gram and the per-step deviation from that Gram is recorded.
    Raises DivergenceError when the loss exceeds 1e6 times its initial value.
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    K_ref = None
    if spec is not None:
        K_ref = gram(spec, train.X)
        eig = eigendecompose(K_ref)
        bound = 2.0 / (eig.lambda_min + eig.lambda_max)
        if eta >= bound:
            raise ValueError(f"eta={eta:g} violates the stability bound {bound:g}")
    X, Y = train.X, train.Y
    net = net.copy()
    theta0 = net.theta
    K0 = empirical_ntk(net, X) if track_kernel else None
    losses, disp, drift, dev, preds = [], [], [], [], []
    for t in range(steps + 1):
        f = net.forward(X)
        J = net.jacobian(X)
        loss = float(np.sum((f - Y) ** 2))
        if t == 0:
            loss0 = max(loss, np.finfo(float).tiny)
        if not np.isfinite(loss) or loss > 1e6 * loss0:
            raise DivergenceError(f"training diverged at step {t} (loss {loss:.3e})")
        losses.append(loss)
        preds.append(f)
        disp.append(float(np.linalg.norm(net.theta - theta0)))
        if track_kernel:
            Kt = J @ J.T
            drift.append(float(np.linalg.norm(Kt - K0)))
            dev.append(float(np.linalg.norm(Kt - K_ref)) if K_ref is not None else np.nan)
        else:
            drift.append(np.nan)
            dev.append(np.nan)
        if t < steps:
            net = net.with_theta(net.theta - eta * (J.T @ (f - Y)))
    return TrainTrace(np.array(losses), np.array(disp), np.array(drift), np.array(dev), np.array(preds),
                      float(np.linalg.norm(theta0)), net)


def loglog_slope(x, y):
    slope, _ = np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)
    return float(slope)


def width_scaling_experiment(widths, train: Dataset, eta, steps, seeds, spec=None):
    """Parameter displacement and kernel deviation against width, averaged over seeds.

    Returns ``(table, slopes)``. Table columns: width; displacement
    (max_t ||theta_t - theta_0||); relative_displacement (the same over
    ||theta_0||); kernel_deviation (max_t ||K_t - K||_F against the analytic
    Gram K); kernel_change (max_t ||K_t - K_0||_F). Slopes are least-squares
    log-log slopes against width.
    """
    spec = spec or KernelSpec()
    widths = sorted(int(w) for w in widths)
    if len(widths) < 3:
        raise ValueError("need at least 3 widths")
    if np.log10(widths[-1] / widths[0]) < 1.5:
        raise ValueError("widths must span at least 1.5 decades")
    cols = ("displacement", "relative_displacement", "kernel_deviation", "kernel_change")
    rows = {k: [] for k in ("width",) + cols}
    for m in widths:
        per_seed = {k: [] for k in cols}
        for seed in seeds:
            tr = train_gd(FiniteNet.init(train.d, m, seed=seed), train, eta, steps, spec=spec)
            per_seed["displacement"].append(tr.displacement.max())
            per_seed["relative_displacement"].append(tr.displacement.max() / tr.theta_norm0)
            per_seed["kernel_deviation"].append(tr.kernel_deviation.max())
            per_seed["kernel_change"].append(tr.kernel_drift.max())
        rows["width"].append(m)
        for k in cols:
            rows[k].append(float(np.mean(per_seed[k])))
    table = {k: np.array(v) for k, v in rows.items()}
    slopes = {k: loglog_slope(table["width"], table[k]) for k in cols}
    return table, slopes


# ---------------------------------------------------------------------------
# one-step bi-level distillation on the finite net

def _directional(net: FiniteNet, g_theta, X):
    """h(x) = g . grad_theta f(x) and grad_x h(x) for a parameter direction g."""
    g = net.with_theta(g_theta)
    z, zb = net._pre(X)
    s, r = net.scale, np.sqrt(net.d0)
    p, pb = _relu_prime(z), _relu_prime(zb)
    h = s * (_relu(z) @ g.W2 + ((p * net.W2) * (X @ g.W1.T)).sum(axis=1) / r
             - _relu(zb) @ g.W2b - ((pb * net.W2b) * (X @ g.W1b.T)).sum(axis=1) / r)
    grad_h = s / r * ((p * g.W2) @ net.W1 + (p * net.W2) @ g.W1
                      - (pb * g.W2b) @ net.W1b - (pb * net.W2b) @ g.W1b)
    return h, grad_h


def one_step_outer(net0: FiniteNet, XS, YS, target: Dataset, eta):
    """Outer loss 0.5 ||f_{theta_1}(X_T) - Y_T||^2 with theta_1 one GD step on (XS, YS).

    Returns ``(loss, grad_XS, grad_eta)``.
    """
    XS = np.asarray(XS, dtype=float)
    fS = net0.forward(XS)
    rS = fS - YS
    JS = net0.jacobian(XS)
    net1 = net0.with_theta(net0.theta - eta * (JS.T @ rS))
    rT = net1.forward(target.X) - target.Y
    loss = 0.5 * float(rT @ rT)
    g = net1.jacobian(target.X).T @ rT
    grad_eta = -float((JS @ g) @ rS)
    h, grad_h = _directional(net0, g, XS)
    grad_fS = net0.input_gradient(XS)
    grad_XS = -eta * (h[:, None] * grad_fS + rS[:, None] * grad_h)
    return loss, grad_XS, grad_eta


@dataclass(eq=False)
class OneStepResult:
    X_S: np.ndarray
    eta: float
    losses: np.ndarray


def one_step_distill(net_init: FiniteNet, support: Dataset, target: Dataset, eta, alpha,
                     outer_steps) -> OneStepResult:
    """Alternate the inner GD step on the support set with an outer gradient
    step of size ``alpha`` on (X_S, eta) along the full-set loss."""
    if support.d != target.d or support.d != net_init.d0:
        raise ValueError("support, target and network dimensions must match")
    XS = np.array(support.X, dtype=float)
    YS = support.Y
    losses = []
    for _ in range(outer_steps):
        loss, gX, geta = one_step_outer(net_init, XS, YS, target, eta)
        if not np.isfinite(loss) or (losses and loss > 1e6 * max(losses[0], 1e-300)):
            raise DivergenceError(f"one-step distillation diverged (loss {loss:.3e})")
        losses.append(loss)
        XS = XS - alpha * gX
        eta = eta - alpha * geta
    loss, _, _ = one_step_outer(net_init, XS, YS, target, eta)
    losses.append(loss)
    return OneStepResult(XS, float(eta), np.array(losses))
