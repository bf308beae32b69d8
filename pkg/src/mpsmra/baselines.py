"""Frequentist baselines: expectation-maximization and iterative phase synchronization."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy.special import logsumexp

from .forward import Bispectrum, MraDataset
from .signal import PowerSpectrum, align_to, inverse_dft

log = logging.getLogger(__name__)


@dataclass
class EmConfig:
    max_iters: int = 10_000
    tol: float = 1e-5
    seed: int = 0
    chunk_size: int = 65_536

    def __post_init__(self):
        if self.max_iters < 1 or self.chunk_size < 1:
            raise ValueError("max_iters and chunk_size must be positive")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")


@dataclass
class EmResult:
    estimate: np.ndarray
    log_likelihood: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _em_sweep(Yh: np.ndarray, x: np.ndarray, sigma2: float, chunk: int) -> tuple[np.ndarray, float]:
    """One E-step + M-step in the Fourier domain.

    Returns the updated signal and the marginal log-likelihood at ``x``
    (up to the x-independent terms, added by the caller).
    """
    L = x.shape[0]
    xh = sfft.rfft(x)
    acc = np.zeros(Yh.shape[1], dtype=complex)
    lse_total = 0.0
    for start in range(0, Yh.shape[0], chunk):
        yh = Yh[start : start + chunk]
        corr = sfft.irfft(yh * np.conj(xh), n=L, axis=1) / sigma2  # <S^phi x, y_n> / sigma2
        lse = logsumexp(corr, axis=1, keepdims=True)
        lse_total += float(lse.sum())
        w = np.exp(corr - lse)
        acc += (yh * np.conj(sfft.rfft(w, axis=1))).sum(axis=0)
    return sfft.irfft(acc / Yh.shape[0], n=L), lse_total


def em_estimate(d: MraDataset, cfg: EmConfig = EmConfig(), init=None) -> EmResult:
    """Maximize the shift-marginalized likelihood by EM.

    Uses a seeded standard Gaussian start unless ``init`` is given. With
    ``sigma2 == 0`` the observations are aligned to the first one and averaged.
    """
    Y = d.observations
    N, L = Y.shape
    if d.sigma2 == 0:
        est = np.mean([align_to(y, Y[0]) for y in Y], axis=0)
        return EmResult(est, [], 0, True)
    x = np.random.default_rng(cfg.seed).standard_normal(L) if init is None else np.asarray(init, dtype=float).copy()
    sigma2 = d.sigma2
    Yh = sfft.rfft(Y, axis=1)
    const = -float(np.sum(Y * Y)) / (2 * sigma2) - N * np.log(L) - 0.5 * N * L * np.log(2 * np.pi * sigma2)

    res = EmResult(x)
    for it in range(1, cfg.max_iters + 1):
        x_new, lse = _em_sweep(Yh, x, sigma2, cfg.chunk_size)
        res.log_likelihood.append(const + lse - N * float(x @ x) / (2 * sigma2))
        change = np.linalg.norm(x_new - x) / max(np.linalg.norm(x), 1e-300)
        x = x_new
        res.iterations = it
        if change < cfg.tol:
            res.converged = True
            break
    res.estimate = x
    return res


def em_log_likelihood(d: MraDataset, x) -> float:
    """Marginal log-likelihood of the dataset under signal ``x``."""
    Y = d.observations
    N, L = Y.shape
    x = np.asarray(x, dtype=float)
    corr = sfft.irfft(sfft.rfft(Y, axis=1) * np.conj(sfft.rfft(x)), n=L, axis=1) / d.sigma2
    return float(
        logsumexp(corr, axis=1).sum()
        - np.sum(Y * Y) / (2 * d.sigma2)
        - N * (x @ x) / (2 * d.sigma2)
        - N * np.log(L)
        - 0.5 * N * L * np.log(2 * np.pi * d.sigma2)
    )


@dataclass
class IpsConfig:
    """``update="eigen"`` re-solves phase synchronization from the leading
    eigenvector of the current constraint matrix each iteration;
    ``update="power"`` takes a single normalized power step instead.
    Once every informative phase mismatch is below ``polish_below`` radians
    the eigen update switches to Gauss-Newton steps on the weighted phase
    residual (0 disables the switch)."""

    max_iters: int = 100
    tol: float = 1e-8
    seed: int = 0
    update: str = "eigen"
    polish_below: float = 0.5

    def __post_init__(self):
        if self.polish_below < 0:
            raise ValueError("polish_below must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if self.update not in ("eigen", "power"):
            raise ValueError(f"unknown IPS update {self.update!r}")


@dataclass
class IpsResult:
    estimate: np.ndarray
    phases: np.ndarray
    converged: bool
    iterations: int
    residuals: list[float] = field(default_factory=list)


_NEGLIGIBLE = 1e-9


def _sum_index(L: int) -> np.ndarray:
    k = np.arange(L)
    return (k[:, None] - k[None, :]) % L  # [k, l] -> k - l


def _symmetrize(v: np.ndarray) -> np.ndarray:
    L = v.shape[0]
    return 0.5 * (v + np.conj(v[(-np.arange(L)) % L]))


def _unit(v: np.ndarray) -> np.ndarray:
    mag = np.abs(v)
    return np.where(mag > 0, v / np.where(mag > 0, mag, 1.0), 1.0 + 0j)


def phase_residual(u: np.ndarray, bispec: np.ndarray) -> float:
    """Weighted squared violation of ``phi[l] + phi[k-l] - phi[k] = beta[l, k-l]``."""
    L = u.shape[0]
    km = _sum_index(L)
    ell = np.arange(L)[None, :]
    b = bispec[ell, km]  # [k, l] -> B[l, k - l]
    mismatch = np.angle(u[ell] * u[km] * np.conj(u[:, None]) * np.conj(b))
    return float(np.sum(np.abs(b) * mismatch**2))


def _mismatches(u: np.ndarray, B: np.ndarray):
    """Wrapped violations of the constraints away from the DC term (the others hold for any phases).

    Constraints with a vanishing bispectrum entry carry no phase information and are dropped.
    """
    L = u.shape[0]
    k, l = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    m = (k - l) % L
    mag = np.abs(B[l, m])
    keep = (k != 0) & (l != 0) & (m != 0) & (mag > _NEGLIGIBLE * mag.max(initial=0.0))
    k, l, m = k[keep], l[keep], m[keep]
    b = B[l, m]
    return k, l, m, b, np.angle(u[l] * u[m] * np.conj(u[k]) * np.conj(b))


def _gauss_newton_phases(u: np.ndarray, B: np.ndarray) -> np.ndarray:
    """One weighted least-squares step on the wrapped phase mismatches.

    Free variables are the phases of ``1..(L-1)//2``; their mirrors follow by
    conjugate symmetry and the Nyquist phase (even ``L``) stays put.
    """
    L = u.shape[0]
    k, l, m, b, r = _mismatches(u, B)
    sw = np.sqrt(np.abs(b))
    n_free = (L - 1) // 2
    col = np.full(L, -1)
    sign = np.zeros(L)
    col[1 : n_free + 1] = np.arange(n_free)
    sign[1 : n_free + 1] = 1
    col[L - n_free :] = np.arange(n_free)[::-1]
    sign[L - n_free :] = -1
    J = np.zeros((len(r), n_free))
    rows = np.arange(len(r))
    for idx, coef in ((l, 1.0), (m, 1.0), (k, -1.0)):
        ok = col[idx] >= 0
        np.add.at(J, (rows[ok], col[idx][ok]), coef * sign[idx][ok])
    delta = np.linalg.lstsq(sw[:, None] * J, -sw * r, rcond=None)[0]
    out = u.copy()
    out[1 : n_free + 1] *= np.exp(1j * delta)
    out[L - n_free :] = np.conj(out[1 : n_free + 1][::-1])
    return out


def _worst_mismatch(u: np.ndarray, B: np.ndarray) -> float:
    return float(np.max(np.abs(_mismatches(u, B)[4]), initial=0.0))


def ips_estimate(mean: float, power: PowerSpectrum, bispec: Bispectrum, sigma2: float = 0.0, cfg: IpsConfig = IpsConfig()) -> IpsResult:
    """Bispectrum inversion by iterative phase synchronization.

    ``power`` and ``bispec`` are expected to be debiased already; ``sigma2``
    is accepted for symmetry with the other estimators and not used again.
    """
    L = power.L
    B = np.asarray(bispec.mat, dtype=complex)
    if B.shape != (L, L):
        raise ValueError(f"bispectrum shape {B.shape} does not match L={L}")
    idx = np.minimum(np.arange(L), L - np.arange(L))
    mags = np.sqrt(power.comps[idx])
    dc = np.sqrt(L) * mean
    mags[0] = abs(dc)
    dc_sign = -1.0 if dc < 0 else 1.0
    # phases of vanishing components are arbitrary and never settle
    live = mags > _NEGLIGIBLE * mags.max(initial=0.0)

    km = _sum_index(L)
    ell = np.arange(L)[None, :]
    Bbar = np.conj(B[ell, km])  # [k, l] -> conj(B[l, k - l])
    # constraints touching the DC term hold for any phases; with a large mean
    # they dominate the eigenproblem and stall it
    informative = Bbar.copy()
    informative[0, :] = 0
    informative[:, 0] = 0
    informative[km == 0] = 0

    rng = np.random.default_rng(cfg.seed)
    u = _unit(_symmetrize(np.exp(2j * np.pi * rng.uniform(size=L))))
    u[0] = dc_sign

    residuals = [phase_residual(u, B)]
    best_u, best_r = u, residuals[0]
    converged = False
    near = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        # M[k, l] = conj(B[l, k - l]) u[k - l]; Hermitian for conjugate-symmetric u
        if cfg.update == "eigen" and near:
            new = _gauss_newton_phases(u, B)
        elif cfg.update == "eigen":
            M = informative * u[km]
            M = 0.5 * (M + M.conj().T)
            v = np.linalg.eigh(M)[1][:, -1]
            # v[0] = 0 here; fix the global phase so v is as conjugate
            # symmetric as possible, and the sign by agreement with u
            pair = np.sum(v * v[(-np.arange(L)) % L])
            v = v * np.exp(-0.5j * np.angle(pair))
            if np.real(np.vdot(u[1:], v[1:])) < 0:
                v = -v
            new = _unit(_symmetrize(v))
        else:
            v = (Bbar * u[km]) @ u
            new = _unit(_symmetrize(v))
        new[0] = dc_sign
        delta = float(np.max(np.abs(np.angle(new * np.conj(u)))[live], initial=0.0))
        u = new
        residuals.append(phase_residual(u, B))
        if cfg.update == "eigen":
            near = _worst_mismatch(u, B) < cfg.polish_below
        if residuals[-1] <= best_r:
            best_u, best_r = u, residuals[-1]
        if delta < cfg.tol:
            converged = True
            break
    if not converged:
        log.warning("IPS did not converge in %d iterations; returning the best iterate", cfg.max_iters)
        u = best_u
    est = inverse_dft(mags * u)
    return IpsResult(est, u, converged, it, residuals)


def write_diagnostics(objective, path) -> None:
    """Write an objective trajectory (EM log-likelihood or IPS residual) as ``iteration,objective`` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "objective"])
        for i, v in enumerate(objective):
            w.writerow([i, repr(float(v))])
