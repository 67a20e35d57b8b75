"""Command-line entry point: ``ntklab <command> [--config PATH] [--seed N] [--out DIR]
[--threads N] [--<param> VALUE ...]``.

Exit codes: 0 success, 1 a scientific verdict failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, attack_dataset
from .data import (Dataset, GaussianModelConfig, TradeoffModelConfig, gen_basis_vector_task,
                   gen_gaussian_model, gen_quadratic_task, gen_tradeoff_model, load_idx_subset, make_rng)
from .distill import adv_distill, distill, export_support
from .dynamics import condition_report, halving_times, solve_linearized, trace_table
from .experiments import (ConvConstructionConfig, coupon_collector_conv, equivariance_check,
                          robust_crossing_scaling, robust_sample_complexity, standard_sample_complexity,
                          tradeoff_experiment)
from .features import feature_report
from .finite_net import width_scaling_experiment
from .io import (sha256_file, svg_line_plot, write_json, write_matrix_bin, write_matrix_csv,
                 write_table_csv)
from .kernel import KernelSpec, eigendecompose, gram
from .regression import accuracy, fit

log = logging.getLogger("ntklab")

REQUIRED = object()


class UsageError(Exception):
    pass


def _intlist(v):
    if isinstance(v, str):
        return [int(x) for x in v.split(",") if x]
    return [int(x) for x in v]


def _bool(v):
    if isinstance(v, bool):
        return v
    if str(v).lower() in ("1", "true", "yes"):
        return True
    if str(v).lower() in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt_str(v):
    return None if v is None else str(v)


DATA = {
    "dataset": (str, "gaussian"),
    "d": (int, 10),
    "n": (int, 100),
    "sigma": (float, 2.0),
    "n_test": (int, 500),
    "csv": (_opt_str, None),
    "test_csv": (_opt_str, None),
    "idx_images": (_opt_str, None),
    "idx_labels": (_opt_str, None),
    "class_a": (int, 0),
    "class_b": (int, 1),
    "n_per_class": (int, 50),
}
KERNEL = {"depth": (int, 1)}
ATTACK = {"norm": (str, "linf"), "epsilon": (float, 0.1), "alpha": (float, 0.025),
          "steps": (int, 10), "loss": (str, "logistic")}

SCHEMAS = {
    "kernel": {**DATA, **KERNEL, "binary": (_bool, True)},
    "fit": {**DATA, **KERNEL, "ridge": (float, 0.0)},
    "dynamics": {**DATA, **KERNEL, "n": (int, 30), "eta": (float, None), "t_max": (float, None),
                 "n_times": (int, 50)},
    "widthscan": {**DATA, "n": (int, 20), "d": (int, 8), "sigma": (float, 10.0),
                  "widths": (_intlist, [64, 256, 1024, 4096]), "seeds": (int, 5), "steps": (int, 50),
                  "eta": (float, None), "slope_target": (float, -0.5), "slope_tol": (float, 0.15)},
    "distill": {**DATA, **KERNEL, "n": (int, 400), "n_test": (int, 2000), "s": (int, 4),
                "init": (str, "subsample"), "lr": (float, 0.1), "iters": (int, 100),
                "learn_labels": (_bool, False), "final_ridge": (float, 0.0)},
    "advdistill": {**DATA, **KERNEL, **ATTACK, "n": (int, 400), "n_test": (int, 2000), "s": (int, 4),
                   "init": (str, "subsample"), "lr": (float, 0.1), "iters": (int, 100),
                   "learn_labels": (_bool, False), "final_ridge": (float, 0.0), "squared": (_bool, True)},
    "attack": {**DATA, **KERNEL, **ATTACK, "ridge": (float, 0.0), "method": (str, "pgd")},
    "features": {**DATA, **KERNEL, **ATTACK, "dataset": (str, "tradeoff"), "d": (int, 50),
                 "n": (int, 200), "epsilon": (float, None), "alpha": (float, None),
                 "max_features": (int, 10), "rho_threshold": (float, 0.05),
                 "gamma_threshold": (float, 0.0), "ridge": (float, 0.0)},
    "experiment": {"name": (str, REQUIRED), "d": (int, None), "n": (int, None),
                   "c_const": (float, None), "epsilon": (float, None), "n_values": (_intlist, None),
                   "d_values": (_intlist, None), "trials": (int, None), "n_test": (int, None),
                   "k": (int, 3), "q": (int, None), "delta": (float, 0.05), "steps": (int, 200),
                   "eta": (float, None)},
}
GLOBAL = {"seed": (int, 0), "out": (str, "out"), "threads": (int, None)}
EXPERIMENTS = ("standard", "robust", "scaling", "tradeoff", "equivariance", "coupon")


# ---------------------------------------------------------------------------
# config resolution

def resolve(command, file_cfg: dict, overrides: dict):
    """Merge a JSON config with flag overrides, strictly.

    The file may hold ``command``, the global keys, and a ``params`` block.
    """
    if command not in SCHEMAS:
        raise UsageError(f"unknown command {command!r}; choose from {sorted(SCHEMAS)}")
    file_cfg = dict(file_cfg or {})
    if "command" in file_cfg and file_cfg["command"] != command:
        raise UsageError(f"config is for command {file_cfg['command']!r}, not {command!r}")
    file_cfg.pop("command", None)
    params_in = file_cfg.pop("params", {}) or {}
    if not isinstance(params_in, dict):
        raise UsageError("'params' must be a JSON object")
    unknown = set(file_cfg) - set(GLOBAL)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    schema = SCHEMAS[command]
    unknown = set(params_in) - set(schema)
    if unknown:
        raise UsageError(f"unknown parameter(s) for {command}: {', '.join(sorted(unknown))}")

    resolved = {"command": command}
    for key, (conv, default) in GLOBAL.items():
        raw = overrides.get(key, file_cfg.get(key, default))
        resolved[key] = None if raw is None else conv(raw)
    params = {}
    for key, (conv, default) in schema.items():
        raw = overrides.get(f"p_{key}", params_in.get(key, default))
        if raw is REQUIRED:
            raise UsageError(f"missing required field '{key}' for {command}")
        try:
            params[key] = None if raw is None else conv(raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for '{key}': {exc}") from None
    resolved["params"] = params
    return resolved


def load_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


# ---------------------------------------------------------------------------
# datasets

def _sub_seed(seed, key):
    return int(make_rng(seed, key).integers(2 ** 62))


def build_dataset(p, seed, split="train") -> Dataset:
    """Training or test split from the dataset parameters; test draws use a derived seed."""
    kind = p["dataset"]
    n = p["n"] if split == "train" else p["n_test"]
    s = seed if split == "train" else _sub_seed(seed, "test")
    if kind == "gaussian":
        return gen_gaussian_model(GaussianModelConfig(d=p["d"], sigma=p["sigma"], n=n, seed=s))
    if kind == "tradeoff":
        return gen_tradeoff_model(TradeoffModelConfig(d=p["d"], n=n, seed=s))
    if kind == "basis":
        return gen_basis_vector_task(p["d"], n, s)
    if kind == "quadratic":
        return gen_quadratic_task(p["d"], n, s)
    if kind == "csv":
        path = p["csv"] if split == "train" else (p["test_csv"] or p["csv"])
        if path is None:
            raise UsageError("dataset 'csv' needs the 'csv' parameter")
        if not Path(path).exists():
            raise UsageError(f"missing file: {path}")
        return Dataset.from_csv(path)
    if kind == "idx":
        if not p["idx_images"] or not p["idx_labels"]:
            raise UsageError("dataset 'idx' needs 'idx_images' and 'idx_labels'")
        for f in (p["idx_images"], p["idx_labels"]):
            if not Path(f).exists():
                raise UsageError(f"missing file: {f}")
        return load_idx_subset(p["idx_images"], p["idx_labels"], p["class_a"], p["class_b"], p["n_per_class"])
    raise UsageError(f"unknown dataset {kind!r}")


def _attack_cfg(p, seed):
    return AttackConfig(norm=p["norm"], epsilon=p["epsilon"], alpha=p["alpha"], steps=p["steps"],
                        loss=p["loss"], seed=seed)


# ---------------------------------------------------------------------------
# commands: each returns (verdicts, summary) and writes files into ``out``

def cmd_kernel(p, seed, out, threads):
    data = build_dataset(p, seed)
    spec = KernelSpec(depth=p["depth"])
    K = gram(spec, data.X, threads=threads or 1)
    eig = eigendecompose(K)
    write_matrix_csv(out / "gram.csv", K)
    if p["binary"]:
        write_matrix_bin(out / "gram.bin", K)
    write_table_csv(out / "eigenvalues.csv", {"i": np.arange(1, eig.n + 1), "eigenvalue": eig.eigenvalues})
    data.write(out / "data.csv")
    rep = condition_report(eig)
    return {"symmetric": bool(np.array_equal(K, K.T)), "psd": bool(eig.lambda_min >= 0)}, rep


def cmd_fit(p, seed, out, threads):
    spec = KernelSpec(depth=p["depth"])
    train, test = build_dataset(p, seed), build_dataset(p, seed, "test")
    pred = fit(spec, train, p["ridge"])
    f = pred.decision_function(test.X)
    (out / "predictor.json").write_text(pred.to_json() + "\n")
    write_table_csv(out / "predictions.csv", {"y": test.Y, "f": f})
    summary = {}
    if test.is_classification:
        summary["test_accuracy"] = accuracy(pred, test)
        summary["train_accuracy"] = accuracy(pred, train)
    return {"train_interpolated": bool(p["ridge"] > 0 or
                                       np.allclose(pred.decision_function(train.X), train.Y, atol=1e-6))}, summary


def cmd_dynamics(p, seed, out, threads):
    data = build_dataset(p, seed)
    eig = eigendecompose(gram(KernelSpec(depth=p["depth"]), data.X))
    rep = condition_report(eig)
    eta = p["eta"] or 1.0 / eig.lambda_max
    t_max = p["t_max"] or 5.0 / (eta * eig.lambda_min)
    times = np.linspace(0.0, t_max, p["n_times"])
    trace = solve_linearized(eig, data.Y, eta, times)
    table = trace_table(trace)
    write_table_csv(out / "loss_curve.csv", table)
    write_table_csv(out / "halving_times.csv", {"eigenvalue": eig.eigenvalues,
                                                "halving_time": halving_times(eig, eta)})
    svg_line_plot(out / "loss_curve.svg", {"loss": (times[1:], table["loss"][1:])}, title="training loss",
                  xlabel="t", ylabel="loss", logy=True)
    y2 = float(data.Y @ data.Y)
    verdicts = {"t0_loss_equals_norm_y": bool(abs(table["loss"][0] - y2) <= 1e-12 * y2),
                "loss_nonincreasing": bool(np.all(np.diff(table["loss"]) <= 1e-12 * y2))}
    return verdicts, {**rep, "eta": eta, "t_max": t_max}


def cmd_widthscan(p, seed, out, threads):
    data = build_dataset(p, seed)
    spec = KernelSpec()
    eig = eigendecompose(gram(spec, data.X))
    eta = p["eta"] or 1.0 / (eig.lambda_min + eig.lambda_max)
    seeds = [_sub_seed(seed, f"net{i}") for i in range(p["seeds"])]
    table, slopes = width_scaling_experiment(p["widths"], data, eta, p["steps"], seeds, spec=spec)
    write_table_csv(out / "width_scaling.csv", table)
    svg_line_plot(out / "width_scaling.svg",
                  {k: (table["width"], table[k]) for k in ("displacement", "kernel_deviation")},
                  title="lazy-training scaling", xlabel="width", logx=True, logy=True)
    tgt, tol = p["slope_target"], p["slope_tol"]
    verdicts = {f"{k}_slope": bool(abs(slopes[k] - tgt) <= tol) for k in ("displacement", "kernel_deviation")}
    return verdicts, {"slopes": slopes, "eta": eta}


def _distill_common(p, seed, out, adversarial):
    spec = KernelSpec(depth=p["depth"])
    train, test = build_dataset(p, seed), build_dataset(p, seed, "test")
    attack = _attack_cfg(p, seed) if adversarial else None
    if adversarial:
        support, trace = adv_distill(spec, train, p["s"], attack, p["init"], p["lr"], p["iters"], seed,
                                     p["learn_labels"], squared=p["squared"])
    else:
        support, trace = distill(spec, train, p["s"], p["init"], p["lr"], p["iters"], seed, p["learn_labels"])
    pred = support.predictor(spec, p["final_ridge"])
    summary = {"test_accuracy": accuracy(pred, test)}
    if adversarial:
        summary["robust_accuracy"] = attack_dataset(pred, test, attack).robust_acc
    export_support(out, support, trace, spec, seed, attack, summary)
    svg_line_plot(out / "trace.svg", {"loss": (np.arange(len(trace)), trace.loss)}, title="KIP loss",
                  xlabel="iteration", ylabel="loss", logy=True)
    verdicts = {"best_not_worse_than_init": bool(min(trace.loss) <= trace.loss[0]) if trace.loss else True}
    return verdicts, summary


def cmd_distill(p, seed, out, threads):
    return _distill_common(p, seed, out, False)


def cmd_advdistill(p, seed, out, threads):
    return _distill_common(p, seed, out, True)


def cmd_attack(p, seed, out, threads):
    spec = KernelSpec(depth=p["depth"])
    train, test = build_dataset(p, seed), build_dataset(p, seed, "test")
    pred = fit(spec, train, p["ridge"])
    cfg = _attack_cfg(p, seed)
    res = attack_dataset(pred, test, cfg, method=p["method"])
    res.adversarial.write(out / "adversarial.csv")
    write_json(out / "attack.json", res.manifest())
    ord_ = np.inf if cfg.norm == "linf" else 2
    excursion = float(np.max(np.linalg.norm(res.adversarial.X - test.X, ord=ord_, axis=1)))
    return ({"budget_respected": bool(excursion <= cfg.epsilon + 1e-12),
             "robust_not_above_clean": bool(res.robust_acc <= res.clean_acc)},
            {"clean_acc": res.clean_acc, "robust_acc": res.robust_acc, "max_excursion": excursion})


def cmd_features(p, seed, out, threads):
    spec = KernelSpec(depth=p["depth"])
    train, test = build_dataset(p, seed), build_dataset(p, seed, "test")
    eps = p["epsilon"] if p["epsilon"] is not None else 20.0 / np.sqrt(train.d - 1 if p["dataset"] == "tradeoff"
                                                                        else train.d)
    alpha = p["alpha"] if p["alpha"] is not None else eps / 4
    cfg = AttackConfig(norm=p["norm"], epsilon=eps, alpha=alpha, steps=p["steps"], loss="margin", seed=seed)
    rep = feature_report(spec, train, test, cfg, p["rho_threshold"], p["gamma_threshold"],
                         max_features=p["max_features"], ridge=p["ridge"], out_dir=out)
    (out / "features.json").write_text(rep.to_json() + "\n")
    return {"classification_consistent": rep.consistent()}, rep.counts()


def _pick(p, key, default):
    return p[key] if p[key] is not None else default


def cmd_experiment(p, seed, out, threads):
    name = p["name"]
    if name not in EXPERIMENTS:
        raise UsageError(f"unknown experiment {name!r}; choose from {EXPERIMENTS}")
    plot = None
    if name == "standard":
        kw = {"n_values": p["n_values"]} if p["n_values"] else {}
        r = standard_sample_complexity(_pick(p, "d", 400), _pick(p, "c_const", 0.5), trials=_pick(p, "trials", 20),
                                       seed=seed, n_test=_pick(p, "n_test", 2000), **kw)
        plot = ("n", ["error_closed"], True, False)
    elif name == "robust":
        r = robust_sample_complexity(_pick(p, "d", 400), _pick(p, "c_const", 1.0), _pick(p, "epsilon", 1.0),
                                     n_values=p["n_values"], trials=_pick(p, "trials", 20), seed=seed,
                                     n_test=_pick(p, "n_test", 2000))
        plot = ("n", ["robust_error_closed", "clean_error_closed"], True, False)
    elif name == "scaling":
        r = robust_crossing_scaling(tuple(_pick(p, "d_values", [400, 1600, 6400])), _pick(p, "c_const", 1.0),
                                    _pick(p, "epsilon", 1.0), trials=_pick(p, "trials", 20), seed=seed,
                                    n_test=_pick(p, "n_test", 2000))
        plot = ("d", ["n_cross", "sqrt_d"], True, True)
    elif name == "tradeoff":
        r = tradeoff_experiment(_pick(p, "d", 10_000), _pick(p, "n", 100_000), seed)
    elif name == "equivariance":
        r = equivariance_check(_pick(p, "d", 20), _pick(p, "n", 15), p["eta"], p["steps"], seed)
        plot = ("step", ["max_abs_deviation"], False, False)
    else:
        r = coupon_collector_conv(ConvConstructionConfig(k=p["k"], q=p["q"], delta=p["delta"], seed=seed),
                                  trials=_pick(p, "trials", 1000))
    r.write(out, plot)
    return r.verdicts, r.summary


COMMANDS = {"kernel": cmd_kernel, "fit": cmd_fit, "dynamics": cmd_dynamics, "widthscan": cmd_widthscan,
            "distill": cmd_distill, "advdistill": cmd_advdistill, "attack": cmd_attack,
            "features": cmd_features, "experiment": cmd_experiment}


# ---------------------------------------------------------------------------
# manifest

def versions():
    import scipy
    import sklearn
    return {"ntklab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def write_manifest(out: Path, resolved, verdicts, summary):
    artifacts = {f.name: sha256_file(f) for f in sorted(out.iterdir())
                 if f.is_file() and f.name != "manifest.json"}
    manifest = {"config": resolved, "versions": versions(), "verdicts": verdicts,
                "passed": all(verdicts.values()), "summary": summary, "artifacts": artifacts}
    write_json(out / "manifest.json", manifest)
    return manifest


def verify_manifest(out_dir):
    """Re-hash every listed artifact; returns the names whose content changed or vanished."""
    out = Path(out_dir)
    path = out / "manifest.json"
    if not path.exists():
        raise UsageError(f"no manifest.json in {out}")
    manifest = json.loads(path.read_text())
    bad = []
    for name, digest in manifest["artifacts"].items():
        f = out / name
        if not f.exists() or sha256_file(f) != digest:
            bad.append(name)
    return bad


def run(resolved):
    out = Path(resolved["out"])
    out.mkdir(parents=True, exist_ok=True)
    threads = resolved["threads"]
    log.info("running %s -> %s", resolved["command"], out)
    fn = COMMANDS[resolved["command"]]
    if threads:
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=threads):
            verdicts, summary = fn(resolved["params"], resolved["seed"], out, threads)
    else:
        verdicts, summary = fn(resolved["params"], resolved["seed"], out, threads)
    manifest = write_manifest(out, resolved, verdicts, summary)
    for k, v in verdicts.items():
        log.info("verdict %s: %s", k, "PASS" if v else "FAIL")
    return 0 if manifest["passed"] else 1


# ---------------------------------------------------------------------------
# argument parsing

def _add_globals(sp):
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--seed", type=int, help="global seed (default 0)")
    sp.add_argument("--out", help="output directory (default ./out)")
    sp.add_argument("--threads", type=int, help="cap on BLAS and kernel worker threads")


def build_parser():
    parser = argparse.ArgumentParser(prog="ntklab", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        sp = sub.add_parser(name)
        _add_globals(sp)
        for key in schema:
            if name == "experiment" and key == "name":
                sp.add_argument("p_name", nargs="?", metavar="NAME",
                                help=f"one of {', '.join(EXPERIMENTS)}")
                continue
            sp.add_argument(f"--{key.replace('_', '-')}", dest=f"p_{key}", metavar=key.upper())
    v = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    v.add_argument("config")
    vf = sub.add_parser("verify", help="re-hash the artifacts listed in a run's manifest")
    vf.add_argument("out")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        if args.command == "validate":
            cfg = load_config(args.config)
            if "command" not in cfg:
                raise UsageError("missing required field 'command'")
            resolved = resolve(cfg["command"], cfg, {})
            if resolved["command"] == "experiment" and resolved["params"]["name"] not in EXPERIMENTS:
                raise UsageError(f"unknown experiment {resolved['params']['name']!r}")
            print(json.dumps(resolved, indent=2, sort_keys=True))
            return 0
        if args.command == "verify":
            bad = verify_manifest(args.out)
            for name in bad:
                print(f"MISMATCH {name}")
            print("ok" if not bad else f"{len(bad)} artifact(s) changed")
            return 0 if not bad else 1
        overrides = {k: v for k, v in vars(args).items()
                     if v is not None and (k.startswith("p_") or k in GLOBAL)}
        resolved = resolve(args.command, load_config(args.config), overrides)
        code = run(resolved)
        print(json.dumps({"command": args.command, "out": resolved["out"],
                          "passed": code == 0}, sort_keys=True))
        return code
    except UsageError as exc:
        print(f"ntklab: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"ntklab: error: {exc}", file=sys.stderr)
        return 2
