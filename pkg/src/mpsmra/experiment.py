"""N-sweep experiments: seed derivation, per-cell method runs, metric files."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .baselines import em_estimate, ips_estimate
from .config import ExperimentConfig
from .forward import (
    MraDataset,
    SampleStatistics,
    compute_statistics,
    debias_bispectrum,
    debias_power_spectrum,
    generate_observations,
    save_npz,
    stream_statistics,
)
from .mps import PosteriorBatch, ScoreModel, run_posterior_batch
from .ncchi2 import LikelihoodContext
from .priors import TrueSignal, make_true_signal
from .score_model import load_checkpoint
from .signal import align_to, relative_error

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRIC_FIELDS = ["schema", "method", "N", "repetition", "seed", "master_seed", "sigma2", "L", "relative_error", "status", "message"]
TIMING_FIELDS = ["method", "N", "repetition", "wall_time"]


def derive_seed(master: int, tag: str, N: int, rep: int) -> int:
    """``sha256("master:tag:N:rep")`` folded to 63 bits."""
    digest = hashlib.sha256(f"{int(master)}:{tag}:{int(N)}:{int(rep)}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def true_signal(cfg: ExperimentConfig) -> TrueSignal:
    return make_true_signal(cfg.prior, np.random.default_rng(derive_seed(cfg.master_seed, "truth", 0, 0)))


@dataclass
class MetricRecord:
    method: str
    N: int
    repetition: int
    seed: int
    relative_error: float
    wall_time: float
    status: str = "ok"
    message: str = ""

    def __post_init__(self):
        if self.status == "ok" and not self.relative_error >= 0:
            raise ValueError("relative error must be >= 0")

    def row(self, cfg: ExperimentConfig) -> dict:
        err = repr(float(self.relative_error)) if self.status == "ok" else ""
        return {
            "schema": SCHEMA_VERSION,
            "method": self.method,
            "N": self.N,
            "repetition": self.repetition,
            "seed": self.seed,
            "master_seed": cfg.master_seed,
            "sigma2": repr(float(cfg.sigma2)),
            "L": cfg.L,
            "relative_error": err,
            "status": self.status,
            "message": self.message,
        }


def simulate_cell(cfg: ExperimentConfig, x: np.ndarray, N: int, rep: int, materialize: bool) -> tuple[MraDataset | None, SampleStatistics]:
    """One dataset per ``(N, rep)``, shared by every method."""
    seed = derive_seed(cfg.master_seed, "data", N, rep)
    rng = np.random.default_rng(seed)
    if materialize:
        d = generate_observations(x, N, cfg.sigma2, rng, seed=seed)
        return d, compute_statistics(d)
    return None, stream_statistics(x, N, cfg.sigma2, rng)


def estimate_mps(model: ScoreModel, stats: SampleStatistics, cfg: ExperimentConfig, seed: int) -> PosteriorBatch:
    mcfg = replace(cfg.mps, seed=seed)
    ctx = LikelihoodContext(stats.N, stats.sigma2)
    return run_posterior_batch(model, stats.power, ctx, mcfg, np.random.default_rng(seed))


def estimate_em(d: MraDataset, cfg: ExperimentConfig, seed: int) -> np.ndarray:
    return em_estimate(d, replace(cfg.em, seed=seed)).estimate


def estimate_ips(stats: SampleStatistics, cfg: ExperimentConfig, seed: int) -> np.ndarray:
    power = debias_power_spectrum(stats.power, stats.sigma2)
    bispec = debias_bispectrum(stats.bispectrum, stats.sigma2, stats.mean)
    return ips_estimate(stats.mean, power, bispec, stats.sigma2, replace(cfg.ips, seed=seed)).estimate


_MODEL_CACHE: dict[str, ScoreModel] = {}


def _load_model(path: str) -> ScoreModel:
    if path not in _MODEL_CACHE:
        _MODEL_CACHE[path] = ScoreModel.from_checkpoint(load_checkpoint(path))
    return _MODEL_CACHE[path]


def run_cell(cfg: ExperimentConfig, x: np.ndarray, N: int, rep: int) -> tuple[list[MetricRecord], dict[str, np.ndarray]]:
    """Run every configured method on the ``(N, rep)`` dataset; failures become error rows."""
    d, stats = simulate_cell(cfg, x, N, rep, materialize="em" in cfg.methods)
    records, estimates = [], {}
    for method in cfg.methods:
        seed = derive_seed(cfg.master_seed, method, N, rep)
        t0 = time.perf_counter()
        try:
            if method == "mps":
                est = estimate_mps(_load_model(cfg.checkpoint), stats, cfg, seed).estimate
            elif method == "em":
                est = estimate_em(d, cfg, seed)
            else:
                est = estimate_ips(stats, cfg, seed)
            err = relative_error(est, x)
            records.append(MetricRecord(method, N, rep, seed, err, time.perf_counter() - t0))
            estimates[method] = est
        except Exception as exc:  # a failed cell must not stop the sweep
            log.error("cell (%s, N=%d, rep=%d) failed: %s", method, N, rep, exc)
            log.debug("%s", traceback.format_exc())
            msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")
            records.append(MetricRecord(method, N, rep, seed, math.nan, time.perf_counter() - t0, "error", msg))
    return records, estimates


def _run_cell_star(args):
    return run_cell(*args)


def aggregate(rows: list[dict]) -> dict[tuple[str, int], tuple[float, float, int]]:
    """``(method, N) -> (mean, standard error, count)`` over successful rows."""
    groups: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        groups.setdefault((r["method"], int(r["N"])), []).append(float(r["relative_error"]))
    out = {}
    for key, vals in sorted(groups.items()):
        v = np.asarray(vals)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else math.nan
        out[key] = (float(v.mean()), se, len(v))
    return out


def write_aggregates(agg: dict, out_dir: Path) -> None:
    """``aggregate.csv`` plus one whitespace-separated XY file per method."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "aggregate.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["method", "N", "mean_relative_error", "standard_error", "count"])
        for (m, N), (mean, se, n) in agg.items():
            w.writerow([m, N, repr(mean), "" if math.isnan(se) else repr(se), n])
    for method in sorted({m for m, _ in agg}):
        lines = ["# N mean_relative_error standard_error"]
        for (m, N), (mean, se, _) in agg.items():
            if m == method:
                lines.append(f"{N} {mean!r} {se!r}")
        (out_dir / f"{method}.dat").write_text("\n".join(lines) + "\n")


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Full sweep; returns the output directory.

    Writes ``metrics.csv`` (deterministic given the master seed),
    ``timings.csv`` (wall times, which naturally vary between runs),
    ``aggregate.csv`` with per-method ``.dat`` series, and
    ``best_estimates.csv`` holding each method's lowest-error estimate at the
    largest N, aligned to the true signal.
    """
    if "mps" in cfg.methods:
        if not cfg.checkpoint or not Path(cfg.checkpoint).exists():
            raise FileNotFoundError(f"MPS needs a score checkpoint; {cfg.checkpoint!r} not found")
        load_checkpoint(cfg.checkpoint, expected_L=cfg.L)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = true_signal(cfg)
    x = truth.values
    save_npz(out / "truth.npz", signal=x, scale=np.float64(truth.scale))

    cells = [(N, rep) for N in cfg.N_values for rep in range(cfg.repetitions)]
    n_workers = min(cfg.n_workers, len(cells))
    all_rows: list[dict] = []
    best: dict[str, tuple[float, np.ndarray]] = {}
    N_max = max(cfg.N_values)

    with open(out / "metrics.csv", "w", newline="") as mf, open(out / "timings.csv", "w", newline="") as tf:
        mw = csv.DictWriter(mf, METRIC_FIELDS)
        tw = csv.DictWriter(tf, TIMING_FIELDS)
        mw.writeheader()
        tw.writeheader()

        def consume(N, rep, result):
            records, estimates = result
            for rec in records:
                row = rec.row(cfg)
                mw.writerow(row)
                tw.writerow({"method": rec.method, "N": N, "repetition": rep, "wall_time": f"{rec.wall_time:.3f}"})
                all_rows.append(row)
                if N == N_max and rec.status == "ok":
                    if rec.method not in best or rec.relative_error < best[rec.method][0]:
                        best[rec.method] = (rec.relative_error, estimates[rec.method])
            mf.flush()
            tf.flush()
            log.info("finished N=%d rep=%d", N, rep)

        if n_workers <= 1:
            for N, rep in cells:
                consume(N, rep, run_cell(cfg, x, N, rep))
        else:
            # results are consumed in submission order, so files match the serial run
            with ProcessPoolExecutor(n_workers) as pool:
                futures = [pool.submit(_run_cell_star, (cfg, x, N, rep)) for N, rep in cells]
                for (N, rep), fut in zip(cells, futures):
                    consume(N, rep, fut.result())

    write_aggregates(aggregate(all_rows), out)
    with open(out / "best_estimates.csv", "w", newline="") as f:
        methods = sorted(best)
        w = csv.writer(f)
        w.writerow(["index", "truth"] + methods)
        aligned = {m: align_to(best[m][1], x) for m in methods}
        for j in range(cfg.L):
            w.writerow([j, repr(float(x[j]))] + [repr(float(aligned[m][j])) for m in methods])
    return out


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV, reporting malformed rows by line number."""
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        return []
    rows = []
    reader = csv.DictReader(text.splitlines())
    missing = {"method", "N", "relative_error"} - set(reader.fieldnames or [])
    if missing:
        raise ValueError(f"{path}: header lacks columns {sorted(missing)}")
    problems = []
    for lineno, r in enumerate(reader, start=2):
        if None in r or any(v is None for v in r.values()):
            problems.append(f"line {lineno}: wrong number of fields")
            continue
        status = r.get("status") or "ok"
        try:
            int(r["N"])
            if status == "ok":
                e = float(r["relative_error"])
                if not e >= 0:
                    raise ValueError("negative or NaN relative error")
        except ValueError as exc:
            problems.append(f"line {lineno}: {exc}")
            continue
        r["status"] = status
        rows.append(r)
    if problems:
        raise ValueError(f"{path}: malformed rows\n" + "\n".join(problems))
    return rows


def format_table(agg: dict) -> str:
    methods = sorted({m for m, _ in agg})
    Ns = sorted({N for _, N in agg})
    head = f"{'N':>10} " + " ".join(f"{m:>24}" for m in methods)
    lines = [head]
    for N in Ns:
        cells = []
        for m in methods:
            if (m, N) in agg:
                mean, se, _ = agg[(m, N)]
                cells.append(f"{mean:.4f}" + ("" if math.isnan(se) else f" ± {se:.4f}"))
            else:
                cells.append("")
        lines.append(f"{N:>10} " + " ".join(f"{c:>24}" for c in cells))
    return "\n".join(lines)
