"""Shift-equivariant score network, denoising score matching, and checkpoints.

The diffusion is variance exploding with ``sigma_t**2 = base**(2 t)``. The
forward perturbation at time ``t`` adds Gaussian noise of variance
``sigma_t**2 - sigma_0**2`` to a prior draw, so the reverse process ends on
the prior itself at ``t = 0``.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .priors import PriorSpec, prior_mean, sample_prior_batch

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SCK1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    base: float = 3.0

    def sigma2(self, t):
        return self.base ** (2 * np.asarray(t, dtype=float))

    def perturbation_var(self, t):
        """Variance added to a prior draw by time ``t``: ``sigma_t**2 - sigma_0**2``."""
        return np.expm1(2 * np.asarray(t, dtype=float) * math.log(self.base))

    def step_var(self, t, dt):
        """``sigma_t**2 - sigma_{t - dt}**2``."""
        return self.sigma2(t) - self.sigma2(np.asarray(t) - dt)


class ScoreNet(nn.Module):
    """Stack of circular 1-D convolutions with ReLU activations.

    Input channels are the signal and a constant channel holding the log of
    the perturbation variance; the last layer projects to one channel.
    """

    def __init__(self, L: int, channels: int = 16, kernel: int = 9, n_layers: int = 8):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("kernel width must be odd for symmetric circular padding")
        if n_layers < 2:
            raise ValueError("need at least two layers")
        self.L, self.channels, self.kernel, self.n_layers = L, channels, kernel, n_layers
        widths = [2] + [channels] * (n_layers - 1) + [1]
        self.convs = nn.ModuleList(
            nn.Conv1d(cin, cout, kernel, padding=kernel // 2, padding_mode="circular", dtype=torch.float32)
            for cin, cout in zip(widths[:-1], widths[1:])
        )

    def forward(self, x: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
        h = torch.stack([x, log_var[:, None].expand_as(x)], dim=1)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = torch.relu(h)
        return h[:, 0, :]

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def zero_(self) -> "ScoreNet":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return np.atleast_2d(x), x.ndim == 1


def score_eval(net: ScoreNet, x, t, schedule: DiffusionSchedule = DiffusionSchedule()) -> np.ndarray:
    """Score estimate at centered point(s) ``x`` and time ``t`` in (0, 1]."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0) or np.any(t_arr > 1):
        raise ValueError(f"t must lie in (0, 1], got {t}")
    xb, single = _as_batch(x)
    var = np.broadcast_to(schedule.perturbation_var(t_arr), (xb.shape[0],))
    with torch.no_grad():
        raw = net(torch.from_numpy(xb.astype(np.float32)), torch.from_numpy(np.log(var).astype(np.float32)))
    out = raw.numpy().astype(float) / np.sqrt(var)[:, None]
    return out[0] if single else out


def dsm_objective(net: ScoreNet, x0: torch.Tensor, var: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Differentiable DSM loss for fixed noise draws.

    ``var * |s + g / sqrt(var)|^2`` with ``s = net / sqrt(var)`` is just
    ``|net + g|^2``, which is what gets averaged here.
    """
    xt = x0 + torch.sqrt(var)[:, None] * g
    return (net(xt, torch.log(var)) + g).pow(2).sum(dim=1).mean()


def dsm_loss(
    score: ScoreNet | Callable,
    batch,
    rng: np.random.Generator,
    schedule: DiffusionSchedule = DiffusionSchedule(),
    t_min: float = 1e-3,
) -> float:
    """Denoising score-matching loss on a batch of centered prior draws.

    ``score`` is a :class:`ScoreNet` or any callable ``(x_noisy, t) -> score``
    over batches. Each term is weighted by the perturbation variance.
    """
    x0, _ = _as_batch(batch)
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t = rng.uniform(t_min, 1.0, size=x0.shape[0])
    g = rng.standard_normal(x0.shape)
    var = schedule.perturbation_var(t)
    xt = x0 + np.sqrt(var)[:, None] * g
    if isinstance(score, ScoreNet):
        s = score_eval(score, xt, t, schedule)
    else:
        s = np.asarray(score(xt, t), dtype=float)
    resid = s + g / np.sqrt(var)[:, None]
    return float(np.mean(var * np.sum(resid**2, axis=1)))


@dataclass
class TrainConfig:
    steps: int = 200_000
    batch_size: int = 128
    lr: float = 1e-3
    lr_schedule: str = "constant"  # or "cosine"
    seed: int = 0
    t_min: float = 1e-3
    loss_weighting: str = "variance"
    channels: int = 16
    kernel: int = 9
    n_layers: int = 8
    schedule_base: float = 3.0
    mean_samples: int = 10_000
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.mean_samples < 1 or self.log_every < 1:
            raise ValueError("training counts must be positive")
        if not 0 < self.t_min < 1:
            raise ValueError("t_min must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.loss_weighting != "variance":
            raise ValueError("only 'variance' loss weighting is supported")


@dataclass
class ScoreCheckpoint:
    L: int
    n_layers: int
    kernel: int
    channels: int
    schedule_base: float
    t_min: float
    prior_mean: np.ndarray
    seed: int
    steps: int
    final_loss: float
    layout: list[tuple[str, tuple[int, ...]]]
    weights: np.ndarray  # flat float32
    metadata: dict = field(default_factory=dict)

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.schedule_base)

    def build_net(self) -> ScoreNet:
        net = ScoreNet(self.L, self.channels, self.kernel, self.n_layers)
        state = {}
        offset = 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            state[name] = torch.from_numpy(self.weights[offset : offset + n].reshape(shape).copy())
            offset += n
        net.load_state_dict(state)
        return net

    @classmethod
    def from_net(cls, net: ScoreNet, schedule: DiffusionSchedule, t_min: float, mean, seed=0, steps=0, final_loss=float("nan"), metadata=None):
        state = net.state_dict()
        layout = [(k, tuple(v.shape)) for k, v in state.items()]
        flat = np.concatenate([v.detach().numpy().astype(np.float32).ravel() for v in state.values()])
        return cls(net.L, net.n_layers, net.kernel, net.channels, schedule.base, t_min, np.asarray(mean, dtype=float), int(seed), int(steps), float(final_loss), layout, flat, dict(metadata or {}))


def _sampler_mean(draw, n: int, rng) -> np.ndarray:
    total, done = 0.0, 0
    while done < n:
        m = min(4096, n - done)
        total = total + draw(m, rng).sum(axis=0)
        done += m
    return total / n


def train(
    spec: PriorSpec,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
    log_path=None,
    sampler: Callable[[int, np.random.Generator], np.ndarray] | None = None,
) -> ScoreCheckpoint:
    """Fit a score network to ``spec`` by denoising score matching.

    Deterministic given ``cfg.seed`` (``rng`` overrides the numpy stream).
    ``log_path`` receives a CSV of (step, loss, wall_time). ``sampler(n, rng)``
    replaces the prior draws, e.g. for toy distributions; ``spec.L`` still
    fixes the signal length.
    """
    draw = sampler if sampler is not None else (lambda n, g: sample_prior_batch(spec, n, g))
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    torch.manual_seed(cfg.seed)
    schedule = DiffusionSchedule(cfg.schedule_base)
    mean = prior_mean(spec, cfg.mean_samples, rng) if sampler is None else _sampler_mean(draw, cfg.mean_samples, rng)
    net = ScoreNet(spec.L, cfg.channels, cfg.kernel, cfg.n_layers)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    sched = None
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps)
    log.info("training score net: %d parameters, %d steps", net.n_params(), cfg.steps)

    rows = []
    running = None
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        x0 = draw(cfg.batch_size, rng) - mean
        t = rng.uniform(cfg.t_min, 1.0, size=cfg.batch_size)
        g = rng.standard_normal(x0.shape)
        var = torch.from_numpy(schedule.perturbation_var(t).astype(np.float32))
        loss = dsm_objective(net, torch.from_numpy(x0.astype(np.float32)), var, torch.from_numpy(g.astype(np.float32)))
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        val = float(loss.item())
        running = val if running is None else 0.99 * running + 0.01 * val
        if step % cfg.log_every == 0 or step == cfg.steps:
            rows.append((step, running, time.perf_counter() - t0))
            log.debug("step %d loss %.4f", step, running)

    if log_path is not None:
        write_training_log(rows, log_path)
    meta = {"prior": spec.to_dict(), "train": asdict(cfg), "n_params": net.n_params()}
    return ScoreCheckpoint.from_net(net, schedule, cfg.t_min, mean, cfg.seed, cfg.steps, running, meta)


def write_training_log(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("step,loss,wall_time\n")
        for step, loss, wall in rows:
            f.write(f"{step},{loss!r},{wall:.3f}\n")


# -- checkpoint file ------------------------------------------------------------
# little endian: magic, version, L, layers, kernel, channels, base, t_min,
# prior mean (L x f64), seed, steps, final loss, metadata json, layout table,
# flat f32 weights, crc32 of everything before it

def save_checkpoint(ckpt: ScoreCheckpoint, path) -> None:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<5I2d", CHECKPOINT_VERSION, ckpt.L, ckpt.n_layers, ckpt.kernel, ckpt.channels, ckpt.schedule_base, ckpt.t_min)
    out += np.asarray(ckpt.prior_mean, dtype="<f8").tobytes()
    out += struct.pack("<QQd", ckpt.seed, ckpt.steps, ckpt.final_loss)
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode()
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<I", len(ckpt.layout))
    for name, shape in ckpt.layout:
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<B", len(shape))
        out += struct.pack(f"<{len(shape)}I", *shape)
    w = np.asarray(ckpt.weights, dtype="<f4")
    out += struct.pack("<Q", w.size) + w.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint file is truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_L: int | None = None) -> ScoreCheckpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(buf) < 8 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a score checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(4)
    version, L, n_layers, kernel, channels, base, t_min = r.unpack("<5I2d")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    mean = np.frombuffer(r.take(8 * L), dtype="<f8").astype(float)
    seed, steps, final_loss = r.unpack("<QQd")
    (mlen,) = r.unpack("<I")
    try:
        metadata = json.loads(r.take(mlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    (n_entries,) = r.unpack("<I")
    layout = []
    for _ in range(n_entries):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        layout.append((name, tuple(r.unpack(f"<{ndim}I"))))
    (n_weights,) = r.unpack("<Q")
    weights = np.frombuffer(r.take(4 * n_weights), dtype="<f4").astype(np.float32)
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint payload")
    if zlib.crc32(buf[: r.pos - 4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch (file corrupt)")
    if sum(int(np.prod(s)) for _, s in layout) != n_weights:
        raise CheckpointError("layout table does not match weight count")
    if expected_L is not None and expected_L != L:
        raise CheckpointError(f"checkpoint was trained for L={L}, requested L={expected_L}")
    return ScoreCheckpoint(L, n_layers, kernel, channels, base, t_min, mean, seed, steps, final_loss, layout, weights, metadata)


def unconditional_sample(ckpt: ScoreCheckpoint, n: int, settings=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Prior samples from the reverse diffusion without conditioning (``n x L``)."""
    from .mps import MpsConfig, sample_chains

    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = settings or MpsConfig()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return sample_chains(ckpt, None, None, cfg, n, rng)
