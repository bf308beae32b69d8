"""Step and bell signal priors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .signal import cyclic_shift


@dataclass(frozen=True)
class PriorSpec:
    kind: Literal["step", "bell"]
    L: int
    poisson_rate: float = 10.0
    amp_range: tuple[float, float] = (0.0, 3.0)
    tau_dof: float = 10.0

    def __post_init__(self):
        if self.kind not in ("step", "bell"):
            raise ValueError(f"unknown prior kind {self.kind!r}; expected 'step' or 'bell'")
        if int(self.L) != self.L or self.L < 2:
            raise ValueError(f"L must be an integer >= 2, got {self.L}")
        lo, hi = self.amp_range
        if self.poisson_rate <= 0 or self.tau_dof <= 0 or not (0 <= lo < hi):
            raise ValueError("bell hyperparameters must be positive with a non-empty amplitude range")
        object.__setattr__(self, "amp_range", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["amp_range"] = list(self.amp_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        if "kind" not in d:
            raise ValueError("prior spec is missing 'kind'")
        if "L" not in d:
            raise ValueError("prior spec is missing 'L'")
        kw = dict(d)
        if "amp_range" in kw:
            kw["amp_range"] = tuple(kw["amp_range"])
        return cls(**kw)


def step_height(L: int) -> float:
    """Height of the canonical step so that its squared norm is ``L``."""
    return math.sqrt(L / math.ceil(L / 2))


def step_template(L: int) -> np.ndarray:
    u = np.zeros(L)
    u[: math.ceil(L / 2)] = step_height(L)
    return u


def sample_step_prior(L: int, rng: np.random.Generator) -> np.ndarray:
    return cyclic_shift(step_template(L), int(rng.integers(L)))


def _centered_offsets(L: int, centers: np.ndarray) -> np.ndarray:
    """``(l - c)`` wrapped to ``[-L/2, L/2)`` for every grid point and center."""
    d = np.arange(L)[None, :] - centers[:, None]
    return np.mod(d + L / 2, L) - L / 2


def sample_bell_prior(L: int, rng: np.random.Generator, spec: PriorSpec | None = None) -> np.ndarray:
    """Sum of ``K + 1`` circular Gaussian bumps, ``K ~ Poisson(rate)``."""
    spec = spec or PriorSpec("bell", L)
    K = int(rng.poisson(spec.poisson_rate))
    amps = rng.uniform(*spec.amp_range, size=K + 1)
    tau2 = rng.chisquare(spec.tau_dof, size=K + 1)
    centers = rng.uniform(0.0, L, size=K + 1)
    d = _centered_offsets(L, centers)
    bumps = amps[:, None] / np.sqrt(2 * np.pi * tau2[:, None]) * np.exp(-(d**2) / (2 * tau2[:, None]))
    return bumps.sum(axis=0)


def sample_prior(spec: PriorSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "step":
        return sample_step_prior(spec.L, rng)
    return sample_bell_prior(spec.L, rng, spec)


def sample_prior_batch(spec: PriorSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "step":
        # vectorized equivalent of n calls to sample_step_prior
        shifts = rng.integers(spec.L, size=n)
        idx = (np.arange(spec.L)[None, :] - shifts[:, None]) % spec.L
        return step_template(spec.L)[idx]
    return np.stack([sample_bell_prior(spec.L, rng, spec) for _ in range(n)])


def exact_step_mean(L: int) -> np.ndarray:
    return np.full(L, step_height(L) * math.ceil(L / 2) / L)


def prior_mean(spec: PriorSpec, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Empirical mean of ``n_samples`` prior draws."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    total = np.zeros(spec.L)
    done = 0
    while done < n_samples:
        m = min(4096, n_samples - done)
        total += sample_prior_batch(spec, m, rng).sum(axis=0)
        done += m
    return total / n_samples


@dataclass
class TrueSignal:
    values: np.ndarray
    scale: float
    metadata: dict = field(default_factory=dict)


def make_true_signal(spec: PriorSpec, rng: np.random.Generator) -> TrueSignal:
    """Draw one prior sample and rescale it to squared norm ``L``."""
    while True:
        x = sample_prior(spec, rng)
        sq = float(np.dot(x, x))
        if sq > 0:
            break
    scale = math.sqrt(spec.L / sq)
    if spec.kind == "step" and math.isclose(scale, 1.0, rel_tol=1e-12):
        scale = 1.0
    return TrueSignal(x * scale, scale, {"kind": spec.kind, "L": spec.L, "scale": scale})
