"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 training divergence,
4 evaluation error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import TASKS, ConfigError, RunConfig, format_config, load_config
from .evaluation import (EvaluationError, build_population, evaluate_regime, metric_rows,
                         prepare_regime, select_evidence, summarize_comparison, write_rows_csv)
from .params import load_checkpoint, save_checkpoint
from .plots import heatmap, line_plot
from .profile import write_embeddings_csv
from .tensor import EvidenceMask, FormatError, write_histories_csv, write_mask_csv, write_tensor
from .training import TrainingDivergence, init_params, train, write_metrics_log

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_EVAL = 0, 2, 3, 4


def _dtype(precision: int):
    return np.float64 if precision == 64 else np.float32


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    tcfg = cfg.train
    if getattr(args, "seed", None) is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if getattr(args, "precision", None) is not None:
        tcfg = replace(tcfg, precision=args.precision)
    return replace(cfg, train=tcfg)


def _population(cfg: RunConfig):
    return build_population(cfg.data.seed, cfg.data.n_users, cfg.data.n_test_users, cfg.model)


def _regimes(args, cfg: RunConfig) -> tuple:
    if getattr(args, "regime", None):
        return (args.regime,)
    return tuple(cfg.eval.regimes)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_store(args, cfg: RunConfig):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    try:
        return load_checkpoint(args.checkpoint).astype(_dtype(cfg.train.precision))
    except (OSError, FormatError) as exc:
        raise ConfigError(f"cannot read checkpoint: {exc}") from exc


def train_model(cfg: RunConfig, seed: int, log=None):
    pop = _population(cfg)
    tcfg = replace(cfg.train, seed=seed)
    store = init_params(cfg.model, seed, _dtype(tcfg.precision), tcfg.infonce_temperature)
    history = train(pop.train, store, cfg.model, tcfg, log=log)
    return pop, store, history


def evaluate_seed(cfg: RunConfig, pop, store, seed: int, regimes, policies) -> list[dict]:
    rows = []
    for tau in regimes:
        res = evaluate_regime(store, cfg.model, pop, tau, seed, policies,
                              cfg.eval.cutoffs, cfg.eval.n_relevant)
        rows += metric_rows(seed, res)
    return rows


# subcommands -------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _resolve(args)
    seed = cfg.data.seed if args.seed is None else args.seed
    pop = build_population(seed, cfg.data.n_users, cfg.data.n_test_users, cfg.model)
    out = _out(args, "data")
    tensors = out / "tensors"
    tensors.mkdir(exist_ok=True)
    xs = np.concatenate([pop.train.x, pop.test_x])
    for uid, x in enumerate(xs):
        write_tensor(tensors / f"user_{uid:04d}.stbt", x)
    hist = pop.train_histories + pop.test_histories
    write_histories_csv(out / "histories.csv", dict(enumerate(hist)))
    write_embeddings_csv(out / "embeddings.csv", pop.train.user_ids, pop.train.profiles)
    print(f"wrote {len(xs)} users to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out(args, "train")
    pop, store, history = train_model(cfg, cfg.train.seed, log=lambda r: print(
        f"epoch {r['epoch']}: loss {r['loss_total']:.6f} rec {r['loss_rec']:.6f} "
        f"nce {r['loss_infonce']:.6f}"))
    save_checkpoint(out / "checkpoint.stck", store)
    write_metrics_log(out / "train_metrics.csv", history)
    (out / "config.ini").write_text(format_config(cfg))
    if args.plot:
        (out / "loss.svg").write_text(line_plot(
            {"total": [r["loss_total"] for r in history], "rec": [r["loss_rec"] for r in history]},
            "training loss"))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    store = _load_store(args, cfg)
    pop = _population(cfg)
    rows = evaluate_seed(cfg, pop, store, cfg.train.seed, _regimes(args, cfg), ("adaptive",))
    out = _out(args, "eval")
    write_rows_csv(out / "eval_metrics.csv", rows)
    for r in rows:
        print(f"{r['regime']}: rmse {r['rmse']:.6f} mae {r['mae']:.6f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _resolve(args)
    seeds = (args.seed,) if args.seed is not None else tuple(cfg.eval.seeds)
    regimes = _regimes(args, cfg)
    rows = []
    for seed in seeds:
        if args.checkpoint:
            store, pop = _load_store(args, cfg), _population(cfg)
        else:
            pop, store, _ = train_model(cfg, seed)
        rows += evaluate_seed(cfg, pop, store, seed, regimes, cfg.eval.policies)
    out = _out(args, "compare")
    _write_report(out, rows, cfg, args.plot)
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _resolve(args)
    store = _load_store(args, cfg)
    pop = _population(cfg)
    out = _out(args, "samples")
    tau = args.regime or cfg.eval.regimes[0]
    traj_dir = out / "trajectory"
    on_step = None
    if args.trajectory:
        traj_dir.mkdir(exist_ok=True)

        def on_step(policy, t, state):
            write_tensor(traj_dir / f"step_{t:03d}.stbt", state[0])
    res = evaluate_regime(store, cfg.model, pop, tau, cfg.train.seed, ("adaptive",),
                          cfg.eval.cutoffs, cfg.eval.n_relevant, on_step=on_step)
    for uid, x in zip(pop.test_ids, res["adaptive"].samples):
        write_tensor(out / f"{tau}_user_{uid:04d}.stbt", x)
    print(f"wrote {len(pop.test_ids)} completions to {out}")
    return EXIT_OK


def cmd_export_masks(args) -> int:
    cfg = _resolve(args)
    store = _load_store(args, cfg)
    pop = _population(cfg)
    out = _out(args, "masks")
    for tau in _regimes(args, cfg):
        _, mf, _ = prepare_regime(store, cfg.model, pop, tau)
        p = mf.p.data.astype(np.float64)
        binary, weights = select_evidence("adaptive", p, mf.budget, mf.candidates, cfg.train.seed,
                                          pop.test_ids, tau)
        for b, uid in enumerate(pop.test_ids):
            n_cand = mf.n_candidates
            m = EvidenceMask(binary[b], weights[b] / n_cand, int(binary[b].sum()))
            write_mask_csv(out / f"{tau}_user_{uid:04d}.csv", m)
    print(f"wrote masks to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    return run_pipeline(args.config, args.out, plot=args.plot)


def _write_report(out: Path, rows: list[dict], cfg: RunConfig, plot: bool) -> None:
    write_rows_csv(out / "metrics.csv", rows)
    policies = cfg.eval.policies
    if "adaptive" in policies and "random-fixed" in policies:
        summary = summarize_comparison(rows)
        write_rows_csv(out / "comparison.csv", summary)
        for s in summary:
            print(f"{s['regime']:>5} {s['metric']}: random-fixed {s['baseline_mean']:.6f} "
                  f"adaptive {s['ours_mean']:.6f} delta {s['delta']:+.4f} "
                  f"({s['seeds_won']}/{s['n_seeds']} seeds)")
        if plot:
            regimes = sorted({s["regime"] for s in summary}, key=TASKS.index)
            grid = [[next(s["delta"] for s in summary if s["regime"] == r and s["metric"] == m)
                     for m in ("rmse", "mae")] for r in regimes]
            (out / "delta.svg").write_text(heatmap(grid, regimes, ("rmse", "mae"),
                                                   "relative delta vs random-fixed"))


def run_pipeline(config_path, out_dir=None, plot: bool = False) -> int:
    """generate -> train -> evaluate -> report; returns an exit code."""
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(out_dir) if out_dir else Path("runs") / Path(config_path).stem
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(Path(config_path).read_text())
    rows = []
    for seed in cfg.eval.seeds:
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(exist_ok=True)
        try:
            pop, store, history = train_model(cfg, seed)
        except TrainingDivergence as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        save_checkpoint(seed_dir / "checkpoint.stck", store)
        if history:
            write_metrics_log(seed_dir / "train_metrics.csv", history)
        try:
            rows += evaluate_seed(cfg, pop, store, seed, cfg.eval.regimes, cfg.eval.policies)
        except (EvaluationError, ValueError) as exc:
            print(f"evaluation failed: {exc}", file=sys.stderr)
            return EXIT_EVAL
    _write_report(out, rows, cfg, plot)
    return EXIT_OK


# argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="umask", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, checkpoint=False, regime=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--precision", type=int, choices=(32, 64), default=None)
        p.add_argument("--plot", action="store_true", help="also write SVG plots")
        if checkpoint:
            p.add_argument("--checkpoint", default=None)
        if regime:
            p.add_argument("--regime", choices=TASKS, default=None)
        p.set_defaults(func=fn)
        return p

    add("gen", cmd_gen, "generate the synthetic population")
    add("train", cmd_train, "train a model")
    add("eval", cmd_eval, "evaluate a checkpoint on held-out regions", checkpoint=True, regime=True)
    add("compare", cmd_compare, "adaptive versus static masking", checkpoint=True, regime=True)
    s = add("sample", cmd_sample, "write completed tensors", checkpoint=True, regime=True)
    s.add_argument("--trajectory", action="store_true", help="dump every reverse step of the first user")
    add("export-masks", cmd_export_masks, "write adaptive evidence masks as CSV", checkpoint=True, regime=True)
    r = sub.add_parser("run", help="full pipeline from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None)
    r.add_argument("--plot", action="store_true")
    r.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except EvaluationError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL


if __name__ == "__main__":
    sys.exit(main())
