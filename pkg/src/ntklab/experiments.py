"""Analytically checkable reproductions: Gaussian-model sample complexity,
the robustness/accuracy trade-off, orthogonal equivariance of gradient
descent, and the coupon-collector convolutional construction."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .attack import AttackConfig, LinearPredictor, fgsm
from .data import (GaussianModelConfig, TradeoffModelConfig, gen_basis_vector_task, gen_tradeoff_model,
                   make_rng, pattern_index)
from .io import svg_line_plot, write_json, write_table_csv
from .kernel import KernelSpec, gram
from .regression import fit, sign_accuracy


@dataclass(eq=False)
class ExperimentResult:
    name: str
    config: dict
    table: dict                      # column name -> sequence
    verdicts: dict                   # assertion name -> bool
    seeds: list
    summary: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.verdicts.values())

    def manifest(self):
        return {"name": self.name, "config": self.config, "verdicts": self.verdicts,
                "passed": self.passed, "seeds": self.seeds, "summary": self.summary}

    def write(self, out_dir, plot=None):
        """``<name>.csv`` and ``<name>.json``; ``plot`` = (x column, [y columns], logx, logy)
        adds ``<name>.svg``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [write_table_csv(out / f"{self.name}.csv", self.table),
                 write_json(out / f"{self.name}.json", self.manifest())]
        if plot is not None:
            xcol, ycols, logx, logy = plot
            series = {c: (self.table[xcol], self.table[c]) for c in ycols}
            paths.append(svg_line_plot(out / f"{self.name}.svg", series, title=self.name, xlabel=xcol,
                                       logx=logx, logy=logy))
        return paths


def _seed_int(seed, *keys):
    return int(make_rng(seed, *keys).integers(2 ** 62))


# ---------------------------------------------------------------------------
# Gaussian model: standard vs robust sample complexity

def _mean_classifiers(cfg: GaussianModelConfig, n_values, trials, seed):
    """w_hat(n) = (1/n) sum_{i<=n} y_i x_i for every n, reusing one draw of
    max(n_values) points per trial so the curves are nested in n."""
    n_values = np.asarray(sorted(set(int(n) for n in n_values)))
    if n_values[0] < 1:
        raise ValueError("n_values must be positive")
    theta = cfg.theta_star
    W = np.empty((trials, len(n_values), cfg.d))
    for t in range(trials):
        rng = make_rng(seed, "train", t)
        y = rng.choice(np.array([-1.0, 1.0]), size=n_values[-1])
        X = y[:, None] * theta + cfg.sigma * rng.standard_normal((n_values[-1], cfg.d))
        csum = np.cumsum(y[:, None] * X, axis=0)
        W[t] = csum[n_values - 1] / n_values[:, None]
    return n_values, W


def clean_error_closed(w, theta, sigma):
    """P(y w.x <= 0) for x ~ N(y theta, sigma^2 I)."""
    return norm.cdf(-(w @ theta) / (sigma * np.linalg.norm(w, axis=-1)))


def robust_error_closed(w, theta, sigma, epsilon):
    """Same under the worst linf perturbation delta = -epsilon y sign(w)."""
    return norm.cdf((epsilon * np.abs(w).sum(axis=-1) - w @ theta) / (sigma * np.linalg.norm(w, axis=-1)))


def _mc_errors(W, theta, sigma, epsilon, n_test, rng, chunk=500):
    """Monte-Carlo clean and robust error of each row of W on fresh test points."""
    clean = np.zeros(len(W))
    robust = np.zeros(len(W))
    for i, w in enumerate(W):
        done = 0
        while done < n_test:
            m = min(chunk, n_test - done)
            y = rng.choice(np.array([-1.0, 1.0]), size=m)
            X = y[:, None] * theta + sigma * rng.standard_normal((m, len(theta)))
            f = X @ w
            clean[i] += np.sum(np.sign(f) != y)
            f_adv = (X - epsilon * y[:, None] * np.sign(w)) @ w
            robust[i] += np.sum(np.sign(f_adv) != y)
            done += m
    return clean / n_test, robust / n_test


def _agree_3se(mc, closed, n_test):
    """MC and closed-form means over trials agree within 3 SE of the MC mean."""
    se = np.sqrt(np.sum(closed * (1 - closed) / n_test)) / len(closed)
    return bool(abs(np.mean(mc) - np.mean(closed)) <= 3 * se), float(se)


def standard_sample_complexity(d, c_const, n_values=(1, 2, 4, 8, 16), trials=20, seed=0, n_test=2000):
    """Clean error of the mean classifier against n."""
    if d < 2:
        raise ValueError("d must be at least 2")
    cfg = GaussianModelConfig.from_c(d, c_const, n=1, seed=seed)
    n_values, W = _mean_classifiers(cfg, n_values, trials, seed)
    closed = clean_error_closed(W, cfg.theta_star, cfg.sigma)            # (trials, len(n))
    rng = make_rng(seed, "test")
    mc = np.array([_mc_errors(W[:, j], cfg.theta_star, cfg.sigma, 0.0, n_test, rng)[0]
                   for j in range(len(n_values))]).T
    agree = [_agree_3se(mc[:, j], closed[:, j], n_test) for j in range(len(n_values))]
    mean_closed = closed.mean(axis=0)
    # the training-sample statistic <theta*, y x> = d + N(0, c^2 d^(3/2)) is negative w.p. Phi(-d^(1/4)/c)
    margin_stat = float(norm.cdf(-d ** 0.25 / c_const))
    table = {"n": n_values, "error_closed": mean_closed, "error_mc": mc.mean(axis=0),
             "mc_se": [a[1] for a in agree]}
    verdicts = {
        "mc_matches_closed_form": all(a[0] for a in agree),
        "error_nonincreasing": bool(np.all(np.diff(mean_closed) <= 1e-12)),
    }
    if n_values[0] == 1:
        verdicts["below_1pct_at_n1"] = bool(mean_closed[0] < 0.01)
    return ExperimentResult("standard_sample_complexity",
                            {"d": d, "c_const": c_const, "sigma": cfg.sigma, "n_values": n_values.tolist(),
                             "trials": trials, "n_test": n_test},
                            table, verdicts, [seed], {"margin_statistic_error": margin_stat})


def crossing_n(n_values, err, level=0.5):
    """First n where the error curve drops to ``level``, interpolated in log n."""
    n_values = np.asarray(n_values, dtype=float)
    err = np.asarray(err, dtype=float)
    below = np.flatnonzero(err <= level)
    if below.size == 0 or below[0] == 0:
        return float("nan")
    j = below[0]
    x0, x1 = np.log(n_values[j - 1]), np.log(n_values[j])
    e0, e1 = err[j - 1], err[j]
    return float(np.exp(x0 + (e0 - level) / (e0 - e1) * (x1 - x0)))


def robust_sample_complexity(d, c_const, epsilon, n_values=None, trials=20, seed=0, n_test=2000,
                             mc_points=3):
    """Robust (linf, exact worst case) error of the mean classifier against n.

    Monte Carlo is run at ``mc_points`` n-values spread over the grid; the
    closed form is evaluated everywhere and used for the 50% crossing.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if n_values is None:
        n_values = np.unique(np.round(np.logspace(0, np.log10(40 * np.sqrt(d)), 40)).astype(int))
    cfg = GaussianModelConfig.from_c(d, c_const, n=1, seed=seed)
    n_values, W = _mean_classifiers(cfg, n_values, trials, seed)
    rob = robust_error_closed(W, cfg.theta_star, cfg.sigma, epsilon)
    clean = clean_error_closed(W, cfg.theta_star, cfg.sigma)
    mean_rob = rob.mean(axis=0)
    rng = make_rng(seed, "test")
    mc_idx = np.unique(np.linspace(0, len(n_values) - 1, mc_points).round().astype(int))
    mc_rob = np.full(len(n_values), np.nan)
    agree = []
    for j in mc_idx:
        c_mc, r_mc = _mc_errors(W[:, j], cfg.theta_star, cfg.sigma, epsilon, n_test, rng)
        mc_rob[j] = r_mc.mean()
        agree.append(_agree_3se(r_mc, rob[:, j], n_test)[0])
        agree.append(_agree_3se(c_mc, clean[:, j], n_test)[0])
    n_cross = crossing_n(n_values, mean_rob)
    table = {"n": n_values, "robust_error_closed": mean_rob, "clean_error_closed": clean.mean(axis=0),
             "robust_error_mc": mc_rob}
    verdicts = {"mc_matches_closed_form": all(agree), "crossing_found": bool(np.isfinite(n_cross))}
    return ExperimentResult("robust_sample_complexity",
                            {"d": d, "c_const": c_const, "sigma": cfg.sigma, "epsilon": epsilon,
                             "n_values": n_values.tolist(), "trials": trials, "n_test": n_test},
                            table, verdicts, [seed], {"n_cross": n_cross})


def robust_crossing_scaling(d_values=(400, 1600, 6400), c_const=1.0, epsilon=1.0, trials=20, seed=0,
                            n_test=2000, slope_target=0.5, slope_tol=0.2):
    """Fit the log-log slope of the 50%-crossing n against d."""
    runs = [robust_sample_complexity(d, c_const, epsilon, trials=trials, seed=_seed_int(seed, "d", d),
                                     n_test=n_test) for d in d_values]
    n_cross = np.array([r.summary["n_cross"] for r in runs])
    finite = np.all(np.isfinite(n_cross))
    slope = float(np.polyfit(np.log(d_values), np.log(n_cross), 1)[0]) if finite else float("nan")
    table = {"d": list(d_values), "n_cross": n_cross, "sqrt_d": np.sqrt(d_values)}
    verdicts = {"crossings_found": bool(finite),
                "slope_within_tolerance": bool(finite and abs(slope - slope_target) <= slope_tol),
                "mc_matches_closed_form": all(r.verdicts["mc_matches_closed_form"] for r in runs)}
    return ExperimentResult("robust_crossing_scaling",
                            {"d_values": list(d_values), "c_const": c_const, "epsilon": epsilon,
                             "trials": trials, "n_test": n_test, "slope_target": slope_target,
                             "slope_tol": slope_tol},
                            table, verdicts, [seed], {"slope": slope, "runs": [r.manifest() for r in runs]})


# ---------------------------------------------------------------------------
# trade-off model

def tradeoff_experiment(d=10_000, n=100_000, seed=0, chunk=1000, p_flip=0.1, mean_scale=10.0):
    """Accuracy of the weak-feature average and the robust feature, clean and
    under the linf attack of size 2 mean_scale / sqrt(d)."""
    if d < 10:
        raise ValueError("d must be at least 10")
    eps = 2 * mean_scale / np.sqrt(d)
    w_avg = np.concatenate([[0.0], np.full(d, 1.0 / d)])
    w_rob = np.zeros(d + 1)
    w_rob[0] = 1.0
    preds = {"avg": LinearPredictor(w_avg), "robust": LinearPredictor(w_rob)}
    attack = AttackConfig(norm="linf", epsilon=eps, alpha=eps, steps=1, loss="logistic")
    hits = {f"{k}_{m}": 0 for k in preds for m in ("clean", "adv")}
    done, c = 0, 0
    while done < n:
        m = min(chunk, n - done)
        part = gen_tradeoff_model(TradeoffModelConfig(d=d, n=m, seed=_seed_int(seed, "chunk", c),
                                                      p_flip=p_flip, mean_scale=mean_scale))
        for k, p in preds.items():
            hits[f"{k}_clean"] += np.sum(np.sign(p.decision_function(part.X)) == part.Y)
            X_adv = fgsm(p, part.X, part.Y, attack)
            hits[f"{k}_adv"] += np.sum(np.sign(p.decision_function(X_adv)) == part.Y)
        done += m
        c += 1
    acc = {k: v / n for k, v in hits.items()}
    z = mean_scale
    # x0 is +-1, so the robust feature only survives budgets below 1
    closed = {"avg_clean": norm.cdf(z), "avg_adv": norm.cdf(-z), "robust_clean": 1 - p_flip,
              "robust_adv": (1 - p_flip) if eps < 1 else 0.0}
    se = {k: math.sqrt(max(closed[k] * (1 - closed[k]), 1.0 / n) / n) for k in closed}
    table = {"classifier": ["w_avg", "w_avg", "w_robust", "w_robust"],
             "setting": ["clean", "adversarial", "clean", "adversarial"],
             "accuracy": [acc["avg_clean"], acc["avg_adv"], acc["robust_clean"], acc["robust_adv"]],
             "closed_form": [closed["avg_clean"], closed["avg_adv"], closed["robust_clean"], closed["robust_adv"]]}
    verdicts = {
        "clean_avg_above_0.99": bool(acc["avg_clean"] > 0.99),
        "robust_avg_below_0.02": bool(acc["avg_adv"] < 0.02),
        "clean_robust_0.9": bool(abs(acc["robust_clean"] - 0.9) <= 0.01),
        "robust_robust_0.9": bool(abs(acc["robust_adv"] - 0.9) <= 0.01),
        "mc_matches_closed_form": all(abs(acc[k] - closed[k]) <= 3 * se[k] + 1.0 / n for k in closed),
    }
    return ExperimentResult("tradeoff", {"d": d, "n": n, "epsilon": eps, "p_flip": p_flip,
                                         "mean_scale": mean_scale, "chunk": chunk},
                            table, verdicts, [seed], {"accuracy": acc, "closed_form": closed})


# ---------------------------------------------------------------------------
# orthogonal equivariance

def random_orthogonal(d, rng):
    """Haar orthogonal matrix: QR of a Gaussian matrix with the signs of R's diagonal folded into Q."""
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s


def linear_gd(X, Y, eta, steps):
    """w <- w - eta X^T (X w - Y) from w = 0; rows of X are samples. Returns (steps + 1, d)."""
    w = np.zeros(X.shape[1])
    out = [w.copy()]
    for _ in range(steps):
        w = w - eta * (X.T @ (X @ w - Y))
        out.append(w.copy())
    return np.array(out)


def equivariance_check(d=20, n=15, eta=None, steps=200, seed=0, n_test=50, basis_d=64, basis_n=20):
    """Rotating the inputs rotates the whole GD trajectory; plus the basis-vector
    task, where predictions on unseen directions carry no label information."""
    rng = make_rng(seed, "equivariance")
    X = rng.standard_normal((n, d))
    Y = rng.standard_normal(n)
    if eta is None:
        eta = 1.0 / np.linalg.eigvalsh(X.T @ X)[-1]
    U = random_orthogonal(d, rng)
    W = linear_gd(X, Y, eta, steps)
    W_rot = linear_gd(X @ U.T, Y, eta, steps)
    dev = np.abs(W_rot - W @ U.T).max(axis=1)
    X_test = rng.standard_normal((n_test, d))
    pred_dev = float(np.abs((X_test @ U.T) @ W_rot[-1] - X_test @ W[-1]).max())
    W_id = linear_gd(X @ np.eye(d), Y, eta, steps)

    # basis-vector task: test on signed basis directions unused in training
    train = gen_basis_vector_task(basis_d, basis_n, seed)
    used = set(train.meta["basis_indices"])
    free = np.array([j for j in range(basis_d) if j not in used])
    trng = make_rng(seed, "basis-test")
    y_test = trng.choice(np.array([-1.0, 1.0]), size=free.size)
    X_orth = np.zeros((free.size, basis_d))
    X_orth[np.arange(free.size), free] = y_test
    # linear-kernel regression: the t -> infinity limit of the GD above
    alpha = np.linalg.solve(train.X @ train.X.T, train.Y)
    f_lin = (X_orth @ train.X.T) @ alpha
    # NTK regression: K(x, x_j) is one constant for every orthogonal pair, so
    # the prediction is the same number for every unseen direction
    ntk = fit(KernelSpec(), train)
    f_ntk = ntk.decision_function(X_orth)
    K_orth = gram(KernelSpec(), X_orth, train.X)
    table = {"step": np.arange(steps + 1), "max_abs_deviation": dev}
    verdicts = {
        "trajectory_equivariant": bool(dev.max() <= 1e-10),
        "rotated_predictions_equal": bool(pred_dev <= 1e-10),
        "identity_bitwise": bool(np.array_equal(W_id, W)),
        "linear_kernel_zero_on_orthogonal": bool(np.abs(f_lin).max() < 1e-8),
        "ntk_kernel_constant_on_orthogonal": bool(np.ptp(K_orth) <= 1e-12 * np.abs(K_orth).max()),
        "ntk_prediction_label_independent": bool(np.ptp(f_ntk) <= 1e-12 * max(np.abs(f_ntk).max(), 1e-300)),
    }
    return ExperimentResult("equivariance", {"d": d, "n": n, "eta": float(eta), "steps": steps,
                                             "basis_d": basis_d, "basis_n": basis_n},
                            table, verdicts, [seed],
                            {"max_deviation": float(dev.max()), "prediction_deviation": pred_dev,
                             "linear_kernel_max_abs_f": float(np.abs(f_lin).max()),
                             "ntk_constant_output": float(f_ntk[0]),
                             "ntk_orthogonal_accuracy": sign_accuracy(f_ntk, y_test)})


# ---------------------------------------------------------------------------
# coupon-collector CONV construction

@dataclass(frozen=True)
class ConvConstructionConfig:
    """Filters drawn from {+-1/k}^k with bias 1/k - 1; ``q`` defaults to
    ceil(2^(k+3) ln(2^k / delta)) and ``g_table`` to the parity of the window."""

    k: int
    q: int = None
    delta: float = 0.05
    g_table: tuple = None
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.k <= 10:
            raise ValueError("k must be in [1, 10] for exhaustive enumeration")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.q is not None and self.q < 1:
            raise ValueError("q must be positive")
        if self.g_table is not None and len(self.g_table) != 2 ** self.k:
            raise ValueError(f"g_table needs 2^k = {2 ** self.k} entries")

    @property
    def filters(self):
        if self.q is not None:
            return int(self.q)
        return coverage_filter_count(self.k, self.delta)

    def table(self):
        if self.g_table is not None:
            return [Fraction(v) for v in self.g_table]
        return [Fraction(int(np.prod(z))) for z in all_patterns(self.k)]

    def to_dict(self):
        d = asdict(self)
        d["q"] = self.filters
        return d


def coverage_filter_count(k, delta):
    return int(math.ceil(2 ** (k + 3) * math.log(2 ** k / delta)))


def all_patterns(k):
    """Every x in {+-1}^k, ordered by ``pattern_index``."""
    pats = np.array(list(itertools.product([1, -1], repeat=k)), dtype=int)
    assert np.array_equal(pattern_index(pats), np.arange(2 ** k))
    return pats


def preactivation(sign_row, x, k):
    """<w, x> + b exactly, for w = sign_row / k and b = 1/k - 1."""
    return Fraction(int(np.dot(sign_row, x)), k) + Fraction(1, k) - 1


def coupon_collector_conv(cfg: ConvConstructionConfig, trials=1000):
    k, q = cfg.k, cfg.filters
    pats = all_patterns(k)
    # (a) every filter sign pattern against every input
    expected = {Fraction(1 - 2 * h, k) for h in range(k + 1)}
    seen = set()
    single_positive = True
    for s in pats:
        vals = [preactivation(s, x, k) for x in pats]
        seen.update(vals)
        positive = [i for i, v in enumerate(vals) if v > 0]
        single_positive &= positive == [pattern_index(s)]
    values_ok = seen == expected

    # (b) coverage of all 2^k patterns by q random filters
    rng = make_rng(cfg.seed, "coupon")
    failures = 0
    first = None
    for t in range(trials):
        S = rng.choice(np.array([-1, 1]), size=(q, k))
        idx = pattern_index(S)
        covered = np.unique(idx).size == 2 ** k
        failures += not covered
        if t == 0:
            first = (S, idx)
    fail_rate = failures / trials

    # (c) g(x) = sum_z k relu(<w_z, x> + b) g(z), one filter per pattern
    g = cfg.table()
    S, idx = first
    rep = {}
    for row, i in zip(S, idx):
        rep.setdefault(int(i), row)
    recon_ok = len(rep) == 2 ** k
    if recon_ok:
        for x, gx in zip(pats, g):
            val = sum(k * max(preactivation(rep[i], x, k), Fraction(0)) * g[i] for i in range(2 ** k))
            recon_ok &= val == gx
    table = {"h": list(range(k + 1)), "preactivation": [str(Fraction(1 - 2 * h, k)) for h in range(k + 1)]}
    verdicts = {"value_set_exact": values_ok, "single_positive_iff_match": bool(single_positive),
                "coverage_failure_within_delta": bool(fail_rate <= cfg.delta),
                "reconstruction_exact": bool(recon_ok)}
    return ExperimentResult("coupon_collector_conv", {**cfg.to_dict(), "trials": trials},
                            table, verdicts, [cfg.seed],
                            {"failure_rate": fail_rate, "q": q,
                             "value_set": sorted(str(v) for v in seen)})
