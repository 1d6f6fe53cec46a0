"""Command-line interface.

Subcommands::

    survflow generate  --config C --seed S --out data.csv
    survflow train     --config C --dataset data.csv --out model.ckpt [--checkpoint resume.ckpt]
    survflow eval      --checkpoint model.ckpt --dataset test.csv --out metrics.json
    survflow curves    --checkpoint model.ckpt --x 0.1,0.2,... --out curves.csv
    survflow sample    --checkpoint model.ckpt --x 0.1,0.2,... --m 1000 --out draws.csv
    survflow portfolio --config C [--checkpoint flow.ckpt] --out report.json

Progress and errors go to stderr as one JSON object per line.  The exit
code is 0 on success, 1 on a handled error and 2 on bad usage.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict

import numpy as np

from . import checkpoint, config, flow, metrics, training
from . import portfolio as pf
from .data import Dataset, ParseError, SyntheticSpec, calibrate_censoring, generate_synthetic
from .data import load_csv, split, write_csv
from .odeint import IntegrationError, SolverConfig


def log_event(**fields):
    sys.stderr.write(json.dumps(fields) + "\n")
    sys.stderr.flush()


def _config(args) -> config.RunConfig:
    return config.load(args.config) if args.config else config.RunConfig()


def _spec(cfg: config.RunConfig) -> SyntheticSpec:
    dc = cfg.data
    return SyntheticSpec(d=dc.d, n=dc.n, p=dc.p, beta_seed=dc.beta_seed,
                         censor_target=dc.censor_target)


def _parse_x(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise ValueError(f"--x must be comma-separated numbers: {exc}") from exc


def _write_json(path, obj):
    if path in (None, "-"):
        json.dump(obj, sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2)


def _splits(cfg: config.RunConfig, ds: Dataset, seed: int):
    return split(ds, cfg.data.train_fraction, np.random.default_rng([seed, 1]),
                 valid_fraction=cfg.data.valid_fraction)


# -- commands -----------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    ds = generate_synthetic(_spec(cfg), np.random.default_rng(args.seed), debug=args.debug)
    write_csv(ds, args.out, debug=args.debug)
    log_event(event="generate", n=len(ds), censoring_rate=ds.censoring_rate, out=args.out)
    return 0


def _train_core(cfg, train, valid, seed, resume_path=None, verbose=True, epochs=None):
    tcfg = cfg.train
    if resume_path:
        model0, _, state = checkpoint.load_full(resume_path)
        if state is None:
            raise ValueError(f"{resume_path} holds no optimizer state to resume from")
        # the stored model carries the best parameters; resume from the current ones
        model0 = model0.with_params(state.theta)
        state.stopped = False
    else:
        dyn = cfg.dynamics(train.n_features)
        model0 = training.init_model(dyn, train, seed=seed, eval_solver=cfg.eval.solver_config())
        state = None
    tcfg = training.TrainConfig(**{**asdict(tcfg), "seed": seed})
    return training.fit(train, valid, tcfg, model0, verbose=verbose, resume=state,
                        epoch_budget=epochs)


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = load_csv(args.dataset)
    train, valid, test = _splits(cfg, ds, args.seed)
    if len(valid) == 0:
        valid = train
    res = _train_core(cfg, train, valid, args.seed, args.checkpoint, epochs=args.epochs)
    meta = {"seed": args.seed, "epochs": res.epochs_run, "best_epoch": res.best_epoch,
            "final_train_loss": res.train_loss[-1] if res.train_loss else None,
            "best_valid_loss": res.state.best_valid, "dataset": args.dataset,
            "config": cfg.to_dict()}
    checkpoint.save(args.out, res.model, meta, res.state)
    metrics_path = args.metrics or args.out + ".metrics.json"
    _write_json(metrics_path, {"train_loss": res.train_loss, "valid_loss": res.valid_loss,
                               "best_epoch": res.best_epoch, "epochs": res.epochs_run,
                               "n_train": len(train), "n_valid": len(valid), "n_test": len(test),
                               "wall_time": res.wall_time})
    log_event(event="train_done", epochs=res.epochs_run, best_epoch=res.best_epoch,
              best_valid_loss=res.state.best_valid, out=args.out)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    model, _ = checkpoint.load(args.checkpoint)
    ds = load_csv(args.dataset)
    if args.split == "test":
        ds = _splits(cfg, ds, args.seed)[2]
    if len(ds) == 0:
        raise ValueError("evaluation set is empty")
    solver = cfg.eval.solver_config()
    t0 = time.perf_counter()
    risk = metrics.sampled_risk_scores(model, ds.X, cfg.eval.samples_per_record,
                                       np.random.default_rng(args.seed), cfg.eval.risk, solver)
    out = {
        "n": len(ds),
        "concordance": metrics.harrell_concordance(ds.time, ds.event, risk),
        "censored_nll": training.censored_nll(model, ds, solver=solver),
        "calibration": metrics.calibration_grid(model, ds, cfg.eval.calibration_points, solver),
        "samples_per_record": cfg.eval.samples_per_record,
        "risk": cfg.eval.risk,
        "seed": args.seed,
    }
    _write_json(args.out, out)
    log_event(event="eval_done", concordance=out["concordance"], nll=out["censored_nll"],
              wall_time=round(time.perf_counter() - t0, 3))
    return 0


def _grid(args, model) -> np.ndarray:
    if args.times:
        return np.array([float(v) for v in args.times.split(",")])
    lo, hi = np.exp(model.time_shift + model.time_scale * np.array([-4.0, 4.0]))
    return np.geomspace(lo, hi, args.points)


def cmd_curves(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    x = _parse_x(args.x)
    t = _grid(args, model)
    f, s, h = flow.curves(model, t, x)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "f", "S", "h"])
        for row in zip(t, f, s, h):
            w.writerow([repr(float(v)) for v in row])
    log_event(event="curves", points=len(t), out=args.out)
    return 0


def cmd_sample(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    x = _parse_x(args.x)
    draws = flow.sample(model, x, args.m, np.random.default_rng(args.seed))
    with open(args.out, "w") as fh:
        fh.write("t\n")
        fh.writelines(repr(float(v)) + "\n" for v in draws)
    log_event(event="sample", m=args.m, out=args.out)
    return 0


def cmd_portfolio(args) -> int:
    cfg = _config(args)
    pc = cfg.portfolio
    spec = _spec(cfg)
    spec.censor_scale = calibrate_censoring(spec, cfg.data.censor_target)
    universe = pf.make_universe(spec, pc.experiment, np.random.default_rng(pc.universe_seed))
    hist = Dataset(universe.history_time, universe.history_event, universe.history_X)
    if args.checkpoint:
        model, _ = checkpoint.load(args.checkpoint)
    else:
        train, _, valid = split(hist, 0.85, np.random.default_rng([args.seed, 2]))
        model = _train_core(cfg, train, valid, args.seed).model
        if args.save_flow:
            checkpoint.save(args.save_flow, model, {"seed": args.seed, "source": "portfolio history"})
    weib = pf.WeibullBaseline.fit(universe.history_time, universe.history_event,
                                  universe.history_labels, pc.experiment.n_classes)
    cands = {"weibull": (weib, "labels"),
             "flow": (pf.FlowDefaults(model, SolverConfig("rk4", fixed_steps=32)), "X")}
    truth = pf.TrueDefaults(spec)
    reps = []
    losses = {}
    for r in range(pc.repetitions):
        rep = pf.run_experiment(cands, truth, universe, pc.experiment,
                                np.random.default_rng([args.seed, 3, r]))
        row = {name: {k: v for k, v in m.items() if k != "weights"} for name, m in rep["models"].items()}
        reps.append({"repetition": r, "budget": rep["budget"], **row})
        if r == 0:
            losses = rep["realized_losses"]
        log_event(event="portfolio_rep", repetition=r,
                  **{f"{n}_realized_es": v["realized_es"] for n, v in rep["models"].items()})
    flow_wins = sum(x["flow"]["realized_es"] < x["weibull"]["realized_es"] for x in reps)
    report = {"horizon": universe.horizon, "alpha": pc.experiment.alpha,
              "weibull_classes": {"shape": weib.shapes.tolist(), "scale": weib.scales.tolist()},
              "repetitions": reps, "flow_wins": int(flow_wins), "seed": args.seed}
    _write_json(args.out, report)
    if args.losses:
        pf.write_losses_csv(losses, args.losses)
    log_event(event="portfolio_done", flow_wins=int(flow_wins), repetitions=pc.repetitions)
    return 0


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="survflow", description="Survival flows")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="RunConfig JSON file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output path")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads (computation is single-threaded; kept for reproducibility)")
        return p

    p = common(sub.add_parser("generate", help="write a synthetic dataset CSV"))
    p.add_argument("--debug", action="store_true", help="also write latent T and C columns")
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("train", help="fit a flow on a CSV dataset"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--metrics", help="loss-curve JSON path (default: OUT.metrics.json)")
    p.add_argument("--epochs", type=int, help="stop after this many epochs in this invocation")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="concordance, NLL and calibration"), out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("all", "test"), default="all",
                   help="evaluate every row or only the held-out split used by train")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("curves", help="density, survival and hazard on a grid"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--x", required=True, help="comma-separated covariates")
    p.add_argument("--times", help="comma-separated times (default: log-spaced grid)")
    p.add_argument("--points", type=int, default=200)
    p.set_defaults(func=cmd_curves)

    p = common(sub.add_parser("sample", help="draw event times for one covariate vector"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--x", required=True)
    p.add_argument("--m", type=int, default=1000)
    p.set_defaults(func=cmd_sample)

    p = common(sub.add_parser("portfolio", help="credit-insurance portfolio experiment"))
    p.add_argument("--checkpoint", help="flow trained on the universe history")
    p.add_argument("--save-flow", help="save the flow trained here")
    p.add_argument("--losses", help="CSV of realized losses for the first repetition")
    p.set_defaults(func=cmd_portfolio)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        log_event(event="error", error="--threads must be >= 1")
        return 2
    try:
        return args.func(args)
    except ParseError as exc:
        log_event(event="error", kind="ParseError", error=str(exc), row=exc.row, column=exc.column)
    except (config.ConfigError, checkpoint.CheckpointError, IntegrationError,
            training.Diverged, pf.Infeasible, pf.NotConverged, pf.Degenerate,
            ValueError, OSError) as exc:
        log_event(event="error", kind=type(exc).__name__, error=str(exc))
    return 1


if __name__ == "__main__":
    sys.exit(main())
