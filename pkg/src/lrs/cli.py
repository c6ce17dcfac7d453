"""Command-line entry points.

Subcommands: gen, fit, fit-rank1, fit-dp, adapt, eval, sweep.  Options come
from an optional JSON config file plus flags; flags win.  Exit codes:
0 success, 1 configuration/parse errors, 2 numerical failures.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import adapt as adapt_mod
from . import datagen, dp, evaluation, io
from .errors import ConfigError, DomainError, FormatError, InfeasibleSparsity, LrsError
from .model import ModelState, PrivacyConfig, SolverConfig
from .rank1 import fit_rank1
from .solver import fit_lrs


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}")


def _merge(section: dict, args, names):
    """Config section overridden by any flag the user actually passed."""
    out = dict(section)
    for name in names:
        v = getattr(args, name, None)
        if v is not None:
            out[name] = v
    return out


def _gen_config(params) -> datagen.GenConfig:
    required = ("d", "r", "t", "m", "k", "zeta", "seed")
    missing = [k for k in required if k not in params]
    if missing:
        raise ConfigError(f"gen config missing {missing}")
    return datagen.GenConfig(
        d=int(params["d"]),
        r=int(params["r"]),
        t=int(params["t"]),
        m=int(params["m"]),
        k=int(params["k"]),
        zeta=int(params["zeta"]),
        sigma=float(params.get("sigma", 0.0)),
        seed=int(params["seed"]),
        w_scale=float(params.get("w_scale", 1.0)),
    )


def _solver_config(params) -> SolverConfig:
    return SolverConfig(
        r=int(params.get("r", 1)),
        k=int(params.get("k", 0)),
        outer_iters=int(params.get("iters", 15)),
        eps=float(params.get("eps", 1e-6)),
        c1=float(params.get("c1", 0.25)),
        c3=float(params.get("c3", 0.5)),
        c4=float(params.get("c4", 0.5)),
        c5=float(params.get("c5", 0.5)),
        inner_cap=int(params.get("inner_cap", 50)),
        init_bound=None if params.get("init_bound") is None else float(params["init_bound"]),
        gamma0=None if params.get("gamma0") is None else float(params["gamma0"]),
        batching=str(params.get("batching", "reuse")),
        ridge_eps=float(params.get("ridge_eps", 0.0)),
        stop_tol=float(params.get("stop_tol", 1e-10)),
    )


def _make_truth(params):
    cfg = _gen_config(params)
    gt = datagen.gen_ground_truth(cfg)
    if params.get("w_constant") is not None:
        gt = datagen.with_shared_weights(gt, float(params["w_constant"]))
    return cfg, gt


def _initial_u(datasets, params, cfg):
    init = params.get("init", "mom")
    if init == "random":
        return None
    if init == "mom":
        return adapt_mod.mom_init(datasets, cfg.r)
    raise ConfigError(f"init must be 'mom' or 'random', got {init!r}")


def cmd_gen(args):
    config = _load_config(args.config)
    params = _merge(config.get("gen", {}), args,
                    ("d", "r", "t", "m", "k", "zeta", "sigma", "seed", "w_scale", "w_constant"))
    cfg, gt = _make_truth(params)
    datasets = datagen.gen_samples(gt, cfg.m, cfg.seed)
    meta = {"sigma": cfg.sigma, "seed": cfg.seed, "r": cfg.r, "k": cfg.k,
            "zeta": cfg.zeta, "w_scale": cfg.w_scale}
    io.write_dataset_bundle(args.out, datasets, meta, gt=None if args.no_truth else gt)
    print(f"wrote {cfg.t} tasks x {cfg.m} samples (d={cfg.d}) to {args.out}")
    return 0


def cmd_fit(args):
    config = _load_config(args.config)
    params = _merge(config.get("solver", {}), args,
                    ("r", "k", "iters", "eps", "c1", "c3", "c4", "c5", "inner_cap",
                     "init_bound", "gamma0", "batching", "ridge_eps", "stop_tol", "init", "seed"))
    datasets, meta, gt = io.read_dataset_bundle(args.data)
    if "r" not in params and "r" in meta:
        params["r"] = meta["r"]
    if "k" not in params and "k" in meta:
        params["k"] = meta["k"]
    cfg = _solver_config(params)
    init_u = _initial_u(datasets, params, cfg)
    state, report = fit_lrs(datasets, cfg, init_u=init_u, gt=gt,
                            init_seed=int(params.get("seed", 0)))
    os.makedirs(args.out, exist_ok=True)
    io.write_model(os.path.join(args.out, "model.json"), state, k=cfg.k)
    io.write_metrics_csv(os.path.join(args.out, "metrics.csv"), report.rows)
    last = report.rows[-1] if report.rows else {}
    print(f"fit: {len(report)} iterations, train mse {last.get('train_mse', math.nan):.6g}"
          + (f", subspace dist {last.get('subspace_dist'):.6g}" if gt is not None else ""))
    return 0


def cmd_fit_rank1(args):
    config = _load_config(args.config)
    params = _merge(config.get("solver", {}), args,
                    ("k", "iters", "c1", "c2", "c3", "gamma0", "tau0", "beta0"))
    datasets, meta, gt = io.read_dataset_bundle(args.data)
    if "k" not in params and "k" in meta:
        params["k"] = meta["k"]
    u, b, report = fit_rank1(
        datasets,
        k=int(params.get("k", 0)),
        iters=int(params.get("iters", 20)),
        c1=float(params.get("c1", 0.1)),
        c2=float(params.get("c2", 0.1)),
        c3=float(params.get("c3", 0.1)),
        gamma0=float(params.get("gamma0", 1.0)),
        tau0=float(params.get("tau0", 1.0)),
        beta0=float(params.get("beta0", 1.0)),
        gt=gt if args.oracle_schedule else None,
    )
    os.makedirs(args.out, exist_ok=True)
    norm = float(np.linalg.norm(u))
    if norm > 0:
        state = ModelState(u[:, None] / norm, np.full((b.shape[1], 1), norm), b)
    else:
        unit = np.zeros((u.shape[0], 1))
        unit[0, 0] = 1.0
        state = ModelState(unit, np.zeros((b.shape[1], 1)), b)
    io.write_model(os.path.join(args.out, "model.json"), state, k=int(params.get("k", 0)))
    io.write_metrics_csv(os.path.join(args.out, "metrics.csv"), report.rows)
    last = report.rows[-1] if report.rows else {}
    print(f"fit-rank1: {len(report)} iterations, train mse {last.get('train_mse', math.nan):.6g}")
    return 0


def _resolve_privacy(params, datasets, gt, iters):
    levels = [params.get(k) for k in ("a1", "a2", "a3", "aw")]
    if any(v is None for v in levels):
        mode = params.get("clip", "data")
        if mode == "gt":
            if gt is None:
                raise ConfigError("clip='gt' needs a bundle with truth.json")
            m = max(ds.m for ds in datasets)
            auto = dp.theory_clip_levels(gt, m, iters)
        elif mode == "data":
            auto = dp.empirical_clip_levels(datasets, q=float(params.get("clip_quantile", 0.999)))
        else:
            raise ConfigError(f"clip must be 'data' or 'gt', got {mode!r}")
        levels = [v if v is not None else a for v, a in zip(levels, auto)]
    epsilon = float(params.get("epsilon", 1.0))
    delta = float(params.get("delta", 1e-5))
    sigma = params.get("sigma_dp")
    sigma = dp.calibrate_noise(epsilon, delta) if sigma is None else float(sigma)
    return PrivacyConfig(epsilon, delta, sigma, *[float(v) for v in levels], planned_iters=iters)


def cmd_fit_dp(args):
    config = _load_config(args.config)
    params = _merge(config.get("solver", {}), args,
                    ("r", "k", "iters", "eps", "c1", "c3", "c4", "c5", "inner_cap",
                     "init_bound", "gamma0", "init", "seed"))
    privacy = _merge(config.get("privacy", {}), args,
                     ("epsilon", "delta", "sigma_dp", "a1", "a2", "a3", "aw",
                      "clip", "clip_quantile", "noise_seed"))
    datasets, meta, gt = io.read_dataset_bundle(args.data)
    if "r" not in params and "r" in meta:
        params["r"] = meta["r"]
    if "k" not in params and "k" in meta:
        params["k"] = meta["k"]
    cfg = _solver_config(params)
    pcfg = _resolve_privacy(privacy, datasets, gt, cfg.outer_iters)
    init_u = _initial_u(datasets, params, cfg)

    def on_release(row):
        print(f"release {int(row['iteration'])}: rho_total={row['rho_total']:.6g}, "
              f"epsilon@delta={row['epsilon_at_delta']:.6g}")

    state, report, ledger = dp.fit_private(
        datasets, cfg, pcfg, init_u=init_u, gt=gt,
        init_seed=int(params.get("seed", 0)),
        noise_seed=int(privacy.get("noise_seed", 0)),
        on_release=on_release,
    )
    os.makedirs(args.out, exist_ok=True)
    io.write_model(os.path.join(args.out, "model.json"), state, k=cfg.k,
                   ledger=ledger, ledger_delta=pcfg.delta)
    io.write_metrics_csv(os.path.join(args.out, "metrics.csv"), report.rows)
    with open(os.path.join(args.out, "ledger.json"), "w") as fh:
        json.dump(ledger.to_dict(pcfg.delta), fh, indent=2)
        fh.write("\n")
    print(f"fit-dp: rho_total={ledger.rho_total:.6g}, epsilon@{pcfg.delta:g}="
          f"{ledger.epsilon_at(pcfg.delta):.6g}")
    return 0


def cmd_adapt(args):
    state, _ = io.read_model(args.model)
    datasets, meta, gt = io.read_dataset_bundle(args.data)
    data = datasets[int(args.task)]
    w, b, gap = adapt_mod.adapt_new_task(
        data, state.u, k=int(args.k), iters=int(args.iters),
        rho=float(args.rho), w_norm=args.w_norm,
        gt=gt if gt is not None else None,
    )
    theta = state.u @ w + b
    out = {
        "w": w.tolist(),
        "b": [[int(i), float(v)] for i, v in zip(*[np.nonzero(b)[0], b[np.nonzero(b)[0]]])],
        "theta": theta.tolist(),
    }
    if not math.isnan(gap):
        out["population_gap"] = gap
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(out, fh)
            fh.write("\n")
    print(f"adapt: ||b||_0={int(np.count_nonzero(b))}"
          + (f", population gap {gap:.6g}" if not math.isnan(gap) else ""))
    return 0


def cmd_eval(args):
    state, doc = io.read_model(args.model)
    datasets, meta, gt = io.read_dataset_bundle(args.data)
    rows = [("rmse", evaluation.rmse(state, datasets))]
    if gt is not None:
        rec = evaluation.recovery_errors(state, gt)
        rows += [
            ("subspace_dist", rec.subspace_dist),
            ("max_b_err_inf", rec.max_b_err_inf),
            ("max_theta_err", rec.max_theta_err),
            ("support_precision", rec.support_precision),
            ("support_recall", rec.support_recall),
        ]
    if args.baselines:
        single = evaluation.baseline_single(datasets)
        full = evaluation.baseline_full_finetune(datasets)
        rows += [
            ("rmse_single_model", evaluation.rmse(single, datasets)),
            ("rmse_full_finetune", evaluation.rmse(full, datasets)),
        ]
    width = max(len(name) for name, _ in rows)
    for name, value in rows:
        print(f"{name:<{width}}  {value:.10g}")
    return 0


def _set_by_path(tree, dotted, value):
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def cmd_sweep(args):
    config = _load_config(args.config)
    sweep_cfg = config.get("sweep")
    if not sweep_cfg or "param" not in sweep_cfg or "values" not in sweep_cfg:
        raise ConfigError("sweep config needs a 'sweep' section with 'param' and 'values'")
    param = sweep_cfg["param"]
    values = sweep_cfg["values"]
    test_m = int(sweep_cfg.get("test_m", 200))
    test_seed = int(sweep_cfg.get("test_seed", 10_000_019))
    rows = []
    for value in values:
        run = json.loads(json.dumps(config))  # deep copy
        _set_by_path(run, param, value)
        gen_params = run.get("gen", {})
        cfg, gt = _make_truth(gen_params)
        datasets = datagen.gen_samples(gt, cfg.m, cfg.seed)
        test_sets = datagen.gen_samples(gt, test_m, test_seed)
        solver_cfg = _solver_config(run.get("solver", {}))
        init_u = _initial_u(datasets, run.get("solver", {}), solver_cfg)
        if param.startswith("privacy.") or "privacy" in run:
            pcfg = _resolve_privacy(run.get("privacy", {}), datasets, gt, solver_cfg.outer_iters)
            state, _, ledger = dp.fit_private(
                datasets, solver_cfg, pcfg, init_u=init_u, gt=gt,
                init_seed=int(run.get("solver", {}).get("seed", 0)),
                noise_seed=int(run.get("privacy", {}).get("noise_seed", 0)),
            )
            row = {"param": param, "value": value,
                   "rmse": evaluation.rmse(state, test_sets),
                   "rho_total": ledger.rho_total,
                   "epsilon_at_delta": ledger.epsilon_at(pcfg.delta)}
        else:
            state, _ = fit_lrs(datasets, solver_cfg, init_u=init_u, gt=gt,
                               init_seed=int(run.get("solver", {}).get("seed", 0)))
            row = {"param": param, "value": value,
                   "rmse": evaluation.rmse(state, test_sets)}
        if gt is not None:
            row["subspace_dist"] = evaluation.subspace_distance(state.u, gt.u_star)
        rows.append(row)
        print(f"{param}={value}: rmse={row['rmse']:.6g}")
    io.write_metrics_csv(args.out, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="lrs", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        p = sub.add_parser(name, **kw)
        p.set_defaults(func=fn)
        p.add_argument("--config", "-c", help="JSON config file")
        return p

    p = add("gen", cmd_gen, help="generate a synthetic dataset bundle")
    p.add_argument("--out", required=True)
    for flag, typ in (("d", int), ("r", int), ("t", int), ("m", int), ("k", int),
                      ("zeta", int), ("sigma", float), ("seed", int),
                      ("w-scale", float), ("w-constant", float)):
        p.add_argument(f"--{flag}", type=typ, dest=flag.replace("-", "_"))
    p.add_argument("--no-truth", action="store_true", help="omit truth.json")

    def solver_flags(p):
        for flag, typ in (("r", int), ("k", int), ("iters", int), ("eps", float),
                          ("c1", float), ("c3", float), ("c4", float), ("c5", float),
                          ("inner-cap", int), ("init-bound", float), ("gamma0", float),
                          ("ridge-eps", float), ("stop-tol", float), ("seed", int)):
            p.add_argument(f"--{flag}", type=typ, dest=flag.replace("-", "_"))
        p.add_argument("--batching", choices=["reuse", "split"])
        p.add_argument("--init", choices=["mom", "random"])

    p = add("fit", cmd_fit, help="fit the rank-r solver")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    solver_flags(p)

    p = add("fit-rank1", cmd_fit_rank1, help="fit the shared-vector + sparse model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    for flag in ("k", "iters"):
        p.add_argument(f"--{flag}", type=int)
    for flag in ("c1", "c2", "c3", "gamma0", "tau0", "beta0"):
        p.add_argument(f"--{flag}", type=float)
    p.add_argument("--oracle-schedule", action="store_true",
                   help="seed the threshold schedule from truth.json")

    p = add("fit-dp", cmd_fit_dp, help="fit with the differentially private representation update")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    solver_flags(p)
    for flag, typ in (("epsilon", float), ("delta", float), ("sigma-dp", float),
                      ("a1", float), ("a2", float), ("a3", float), ("aw", float),
                      ("clip-quantile", float), ("noise-seed", int)):
        p.add_argument(f"--{flag}", type=typ, dest=flag.replace("-", "_"))
    p.add_argument("--clip", choices=["data", "gt"])

    p = add("adapt", cmd_adapt, help="adapt a fitted representation to a new task")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", type=int, default=0)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--rho", type=float, default=0.0)
    p.add_argument("--w-norm", type=float, dest="w_norm")
    p.add_argument("--out")

    p = add("eval", cmd_eval, help="print metrics of a model on a bundle")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--baselines", action="store_true")

    p = add("sweep", cmd_sweep, help="grid sweep over one config parameter")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError, FormatError, InfeasibleSparsity) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except LrsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
