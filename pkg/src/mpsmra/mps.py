"""Moment-based posterior sampling.

Reverse-diffusion sampling from a score-model prior, steered by the gradient
of the sample power-spectrum likelihood, plus the medoid point estimate and
posterior summaries.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import ncchi2
from .ncchi2 import LikelihoodContext
from .score_model import DiffusionSchedule, ScoreCheckpoint, score_eval
from .signal import PowerSpectrum, aligned_distances, best_alignment, cyclic_shift

BATCH_MAGIC = b"PBS1"


class SamplerDiverged(RuntimeError):
    pass


@dataclass
class MpsConfig:
    """Sampler settings.

    ``discretization`` is ``"euler_maruyama"`` (steps of the variance
    increment) or ``"literal"`` (increment divided by ``dt``, Langevin-style
    noise ``sqrt(2 eps)``). ``guidance`` scales the likelihood term; 0 turns
    conditioning off. When the likelihood drift is stiff (large ``N``), each
    step integrates it in ``ceil(increment * curvature / substep_target)``
    sub-steps with the prior score held fixed.

    ``pt_law`` picks the law the diffused statistic is drawn from. With
    ``"consistent"`` it is centered on ``phat`` itself, so its mean matches the
    ``x_t`` likelihood (which already carries the observation noise) and the
    conditioning targets ``|F x|^2 = phat - sigma2``. ``"debiased"`` subtracts
    ``sigma2`` before diffusing, which counts the noise twice and steers toward
    ``phat - 2 sigma2``.

    ``final_noise=False`` skips the diffusion noise on the last step (the draw
    is still consumed, so everything before it is unchanged).
    """

    dt: float = 1e-3
    J: int = 64
    discretization: str = "euler_maruyama"
    noise_factor: float = 1.0
    seed: int = 0
    guidance: float = 1.0
    init_var: float | None = None
    substep_target: float = 0.5
    max_substeps: int = 2000
    large_order: float = ncchi2.LARGE_ORDER
    pt_law: str = "consistent"
    final_noise: bool = True

    def __post_init__(self):
        if not 0 < self.dt < 1:
            raise ValueError("dt must lie in (0, 1)")
        n = 1 / self.dt
        if abs(n - round(n)) > 1e-9 * n:
            raise ValueError(f"1/dt must be an integer, got {n}")
        if self.J < 1:
            raise ValueError("J must be >= 1")
        if self.discretization not in ("euler_maruyama", "literal"):
            raise ValueError(f"unknown discretization {self.discretization!r}")
        if self.pt_law not in ("consistent", "debiased"):
            raise ValueError(f"unknown pt_law {self.pt_law!r}")
        if self.noise_factor <= 0 or self.substep_target <= 0 or self.max_substeps < 1:
            raise ValueError("noise_factor, substep_target and max_substeps must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(1 / self.dt))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ScoreModel:
    """A centered-coordinate score function with its schedule and centering vector."""

    score: Callable[[np.ndarray, float], np.ndarray]
    prior_mean: np.ndarray
    schedule: DiffusionSchedule = field(default_factory=DiffusionSchedule)

    @property
    def L(self) -> int:
        return len(self.prior_mean)

    @classmethod
    def from_checkpoint(cls, ckpt: ScoreCheckpoint) -> "ScoreModel":
        net = ckpt.build_net()
        schedule = ckpt.schedule
        return cls(lambda x, t: score_eval(net, x, t, schedule), np.asarray(ckpt.prior_mean, dtype=float), schedule)


def _as_model(model) -> ScoreModel:
    return ScoreModel.from_checkpoint(model) if isinstance(model, ScoreCheckpoint) else model


def _chain_streams(rng: np.random.Generator, n: int) -> list[tuple[np.random.Generator, np.random.Generator]]:
    """Independent (diffusion noise, Monte Carlo) generator pairs per chain."""
    root = np.random.SeedSequence(int(rng.integers(2**63)))
    return [tuple(np.random.default_rng(s) for s in child.spawn(2)) for child in root.spawn(n)]


def _curvature(dl: np.ndarray, power: np.ndarray, N: int, v: float) -> np.ndarray:
    """Rough per-chain bound on the likelihood Hessian in signal space."""
    term1 = 2 * N * np.abs(dl) / v
    term2 = 4 * N * power / (2 * v * v + 4 * v * power)
    return np.max(term1 + term2, axis=-1)


def sample_chains(model, phat: PowerSpectrum | None, obs: LikelihoodContext | None, cfg: MpsConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Run ``n`` independent reverse-diffusion chains; returns ``n x L`` uncentered samples.

    ``phat=None`` (or ``cfg.guidance == 0``) samples the prior.
    """
    model = _as_model(model)
    L = model.L
    conditioned = phat is not None and cfg.guidance != 0
    if conditioned:
        if phat.L != L:
            raise ValueError(f"power spectrum has L={phat.L}, score model has L={L}")
        if obs is None:
            raise ValueError("conditioning needs observation metadata (N, sigma2)")
    sched = model.schedule
    streams = _chain_streams(rng, n)
    init_var = sched.sigma2(1.0) if cfg.init_var is None else cfg.init_var
    x = np.sqrt(init_var) * np.stack([s[0].standard_normal(L) for s in streams])
    mean = model.prior_mean

    for k in range(cfg.n_steps):
        t = 1.0 - k * cfg.dt
        dvar = float(sched.step_var(t, cfg.dt))
        s = np.asarray(model.score(x, t), dtype=float)
        cond = None
        if conditioned:
            var_t = float(sched.perturbation_var(t))
            law = ncchi2.build_pt_given_phat(phat, obs.sigma2 if cfg.pt_law == "debiased" else 0.0, var_t, obs.N)
            z = np.stack([np.atleast_1d(ncchi2.sample(law, s_[1], cfg.large_order)) for s_ in streams])
            ctx = ncchi2.build_pt_given_xt(x, obs.sigma2, var_t, obs.N)
            v = ctx.total_variance

            def cond_score(y, z=z, ctx=ctx):
                return cfg.guidance * ncchi2.conditional_score(z, y + mean, ctx, cfg.large_order)

            cond = cond_score

        if cfg.discretization == "literal":
            eps = dvar / cfg.dt
            drift = s if cond is None else s + cond(x)
            x = x + eps * drift + np.sqrt(2 * eps) * _noise(streams, L)
        else:
            if cond is None:
                x = x + dvar * s
            else:
                power = np.abs(np.fft.rfft(x + mean, axis=-1)) ** 2 / L
                params = ncchi2.component_params(power, obs.N, v, L)
                dl = ncchi2.dlogpdf_dlambda(params, z, cfg.large_order)
                kappa = float(np.max(_curvature(dl, power, obs.N, v))) * abs(cfg.guidance)
                m = int(min(cfg.max_substeps, max(1, math.ceil(dvar * kappa / cfg.substep_target))))
                h = dvar / m
                for _ in range(m):
                    x = x + h * (s + cond(x))
            xi = _noise(streams, L)
            if cfg.final_noise or k < cfg.n_steps - 1:
                x = x + np.sqrt(cfg.noise_factor * dvar) * xi
        if not np.all(np.isfinite(x)):
            raise SamplerDiverged(f"non-finite state at step {k} (t={t:.6f}); try a smaller dt")
    return x + mean


def _noise(streams, L: int) -> np.ndarray:
    return np.stack([s[0].standard_normal(L) for s in streams])


def mps_sample(model, phat: PowerSpectrum, obs: LikelihoodContext, cfg: MpsConfig, rng: np.random.Generator) -> np.ndarray:
    """One posterior sample of the signal given the sample power spectrum."""
    if obs.sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    return sample_chains(model, phat, obs, cfg, 1, rng)[0]


def select_medoid(samples) -> int:
    """Index minimizing the summed aligned distance to the batch; ties go to the smallest index."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("empty batch")
    totals = np.array([aligned_distances(samples, samples[k]).sum() for k in range(samples.shape[0])])
    best = totals.min()
    return int(np.flatnonzero(totals <= best + 1e-12 * max(1.0, best))[0])


@dataclass
class PosteriorBatch:
    samples: np.ndarray
    medoid_index: int
    shifts: np.ndarray
    config: dict = field(default_factory=dict)

    @property
    def J(self) -> int:
        return self.samples.shape[0]

    @property
    def L(self) -> int:
        return self.samples.shape[1]

    @property
    def estimate(self) -> np.ndarray:
        return self.samples[self.medoid_index]

    def aligned_samples(self) -> np.ndarray:
        return np.stack([cyclic_shift(x, p) for x, p in zip(self.samples, self.shifts)])


def make_batch(samples, config: dict | None = None) -> PosteriorBatch:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    k = select_medoid(samples)
    shifts = np.array([best_alignment(x, samples[k]) for x in samples], dtype=np.int64)
    return PosteriorBatch(samples, k, shifts, dict(config or {}))


def run_posterior_batch(model, phat: PowerSpectrum, obs: LikelihoodContext, cfg: MpsConfig, rng: np.random.Generator | None = None) -> PosteriorBatch:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    samples = sample_chains(model, phat, obs, cfg, cfg.J, rng)
    return make_batch(samples, cfg.to_dict())


def posterior_summary(batch: PosteriorBatch) -> dict[str, np.ndarray]:
    """Componentwise statistics of the medoid-aligned samples."""
    if batch.J < 2:
        raise ValueError("posterior summary needs at least two samples")
    aligned = batch.aligned_samples()
    q05, q50, q95 = np.quantile(aligned, [0.05, 0.5, 0.95], axis=0)
    return {
        "mean": aligned.mean(axis=0),
        "q05": q05,
        "q50": q50,
        "q95": q95,
        "variance": aligned.var(axis=0, ddof=1),
    }


def write_summary_csv(summary: dict[str, np.ndarray], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["mean", "q05", "q50", "q95", "variance"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["component"] + cols)
        for j in range(len(summary["mean"])):
            w.writerow([j] + [repr(float(summary[c][j])) for c in cols])


def save_batch(batch: PosteriorBatch, path) -> None:
    echo = json.dumps(batch.config, sort_keys=True).encode()
    out = bytearray(BATCH_MAGIC)
    out += struct.pack("<III", batch.L, batch.J, len(echo)) + echo
    out += np.asarray(batch.samples, dtype="<f8").tobytes()
    out += struct.pack("<q", batch.medoid_index)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))


def load_batch(path) -> PosteriorBatch:
    buf = Path(path).read_bytes()
    if buf[:4] != BATCH_MAGIC:
        raise ValueError(f"{path} is not a posterior batch file")
    try:
        L, J, n = struct.unpack_from("<III", buf, 4)
        pos = 16
        config = json.loads(buf[pos : pos + n].decode())
        pos += n
        samples = np.frombuffer(buf, dtype="<f8", count=J * L, offset=pos).reshape(J, L).astype(float)
        pos += 8 * J * L
        (medoid,) = struct.unpack_from("<q", buf, pos)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"corrupt posterior batch file {path}: {exc}") from exc
    shifts = np.array([best_alignment(x, samples[medoid]) for x in samples], dtype=np.int64)
    return PosteriorBatch(samples, int(medoid), shifts, config)
