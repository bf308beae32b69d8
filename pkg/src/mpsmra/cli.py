"""Command-line front end.

Exit codes: 0 success, 1 validation error (bad config, missing inputs),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import experiment as ex
from .config import METHODS, WORKERS_ENV, ConfigError, ExperimentConfig, load_config
from .forward import load_dataset, load_npz, load_statistics, save_dataset, save_npz, save_statistics
from .mps import ScoreModel, posterior_summary, save_batch, write_summary_csv
from .score_model import load_checkpoint, save_checkpoint, train
from .signal import relative_error

log = logging.getLogger("mpsmra")


class InputError(ValueError):
    """Missing or inconsistent command inputs (exit code 1)."""


def _cell_seed_info(cfg: ExperimentConfig, N: int, rep: int) -> dict:
    return {"N": N, "repetition": rep, "seed": ex.derive_seed(cfg.master_seed, "data", N, rep), "master_seed": cfg.master_seed}


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    N = args.N if args.N is not None else cfg.N_values[0]
    if N < 1 or args.rep < 0:
        raise InputError("N must be positive and rep non-negative")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc}") from exc
    x = ex.true_signal(cfg).values
    d, stats = ex.simulate_cell(cfg, x, N, args.rep, materialize=not args.stats_only)
    save_npz(out / "truth.npz", signal=x)
    save_statistics(stats, out / "stats.npz")
    if d is not None:
        save_dataset(d, out / "dataset.mra")
    (out / "cell.json").write_text(json.dumps(_cell_seed_info(cfg, N, args.rep), sort_keys=True) + "\n")
    print(f"wrote {'statistics' if args.stats_only else 'dataset and statistics'} for N={N}, rep={args.rep} to {out}")
    return 0


def cmd_train_prior(args) -> int:
    cfg = load_config(args.config)
    tcfg = cfg.train if args.steps is None else replace(cfg.train, steps=args.steps)
    out = Path(args.out or cfg.checkpoint or "artifacts/score.sck")
    ckpt = train(cfg.prior, tcfg, log_path=args.log or out.with_suffix(".csv"))
    save_checkpoint(ckpt, out)
    print(f"parameters: {ckpt.metadata['n_params']}")
    print(f"final loss: {ckpt.final_loss:.6f}")
    print(f"checkpoint: {out}")
    return 0


def _append_metric(path: Path, row: dict) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, ex.METRIC_FIELDS)
        if new:
            w.writeheader()
        w.writerow(row)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    data = Path(args.data)
    for name in ("stats.npz", "truth.npz", "cell.json"):
        if not (data / name).exists():
            raise InputError(f"{data} lacks {name}; run 'simulate' first")
    stats = load_statistics(data / "stats.npz")
    x = load_npz(data / "truth.npz")["signal"]
    cell = json.loads((data / "cell.json").read_text())
    N, rep = int(cell["N"]), int(cell["repetition"])
    seed = ex.derive_seed(cfg.master_seed, args.method, N, rep)
    out = Path(args.out or data)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    if args.method == "mps":
        ckpt_path = args.checkpoint or cfg.checkpoint
        if not ckpt_path or not Path(ckpt_path).exists():
            raise InputError("MPS needs a score checkpoint (--checkpoint or config 'checkpoint')")
        model = ScoreModel.from_checkpoint(load_checkpoint(ckpt_path, expected_L=stats.L))
        batch = ex.estimate_mps(model, stats, cfg, seed)
        est = batch.estimate
        save_batch(batch, out / "posterior_batch.pbs")
        if batch.J >= 2:
            write_summary_csv(posterior_summary(batch), out / "posterior_summary.csv")
    elif args.method == "em":
        if not (data / "dataset.mra").exists():
            raise InputError("EM needs the materialized dataset; rerun 'simulate' without --stats-only")
        est = ex.estimate_em(load_dataset(data / "dataset.mra"), cfg, seed)
    else:
        if stats.bispectrum is None:
            raise InputError("IPS needs a statistics file with the bispectrum")
        est = ex.estimate_ips(stats, cfg, seed)
    wall = time.perf_counter() - t0
    err = relative_error(est, x)
    save_npz(out / f"estimate_{args.method}.npz", signal=est)
    rec = ex.MetricRecord(args.method, N, rep, seed, err, wall)
    _append_metric(Path(args.metrics) if args.metrics else out / "metrics.csv", rec.row(cfg))
    print(f"{args.method}: relative error {err:.6g} ({wall:.1f} s)")
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    if args.checkpoint:
        cfg = replace(cfg, checkpoint=args.checkpoint)
    if "mps" in cfg.methods and (not cfg.checkpoint or not Path(cfg.checkpoint).exists()):
        raise InputError(f"MPS selected but checkpoint {cfg.checkpoint!r} does not exist")
    out = ex.run_experiment(cfg, args.out)
    rows = ex.read_metrics(out / "metrics.csv")
    print(ex.format_table(ex.aggregate(rows)))
    print(f"results in {out}")
    return 0


def cmd_summarize(args) -> int:
    path = Path(args.metrics)
    if not path.exists():
        raise InputError(f"{path} does not exist")
    try:
        rows = ex.read_metrics(path)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if not rows:
        log.warning("%s holds no metric rows", path)
        print(ex.format_table({}))
        return 0
    agg = ex.aggregate(rows)
    print(ex.format_table(agg))
    ex.write_aggregates(agg, Path(args.out) if args.out else path.parent)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpsmra", description="Posterior sampling and moment baselines for multi-reference alignment.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate one dataset and its statistics")
    s.add_argument("--config", required=True)
    s.add_argument("--N", type=int, help="observation count (default: first entry of N_values)")
    s.add_argument("--rep", type=int, default=0, help="repetition index for seed derivation")
    s.add_argument("--stats-only", action="store_true", help="stream statistics without writing the dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train-prior", help="train the score network on the configured prior")
    t.add_argument("--config", required=True)
    t.add_argument("--steps", type=int, help="override train.steps")
    t.add_argument("--out", help="checkpoint path (default: config 'checkpoint')")
    t.add_argument("--log", help="training log CSV (default: next to the checkpoint)")
    t.set_defaults(func=cmd_train_prior)

    r = sub.add_parser("run", help="run one estimator on a simulated cell")
    r.add_argument("--method", required=True, choices=METHODS)
    r.add_argument("--config", required=True)
    r.add_argument("--data", required=True, help="directory written by 'simulate'")
    r.add_argument("--checkpoint")
    r.add_argument("--out", help="output directory (default: --data)")
    r.add_argument("--metrics", help="metrics CSV to append to (default: <out>/metrics.csv)")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("experiment", help=f"full N x repetition sweep (pool width: workers or ${WORKERS_ENV})")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", help="override the config checkpoint path")
    e.add_argument("--out", help="output directory (default: config output_dir)")
    e.set_defaults(func=cmd_experiment)

    m = sub.add_parser("summarize", help="aggregate a metrics CSV into a table and XY series")
    m.add_argument("metrics")
    m.add_argument("--out", help="directory for aggregate files (default: next to the CSV)")
    m.set_defaults(func=cmd_summarize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
