"""Cyclic-grid signal algebra.

Signals are plain 1-D float arrays of length ``L``; shifts act cyclically with
``(S x)[j] = x[j - 1 mod L]``, so that ``F S x[l] = exp(-2 pi i l / L) F x[l]``
under the unitary DFT ``F``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft


def n_components(L: int) -> int:
    """Number of non-redundant power-spectrum components, ``L // 2 + 1``."""
    return L // 2 + 1


def multiplicity(L: int) -> np.ndarray:
    """Multiplicities ``eta_l`` of the non-redundant spectral components."""
    eta = np.full(n_components(L), 2, dtype=np.int64)
    eta[0] = 1
    if L % 2 == 0:
        eta[-1] = 1
    return eta


@dataclass(frozen=True)
class PowerSpectrum:
    """Non-redundant half of a (sample) power spectrum.

    ``comps[l]`` holds the power at frequency ``l`` for ``l = 0 .. L // 2``;
    the mirrored components ``-l`` are implied by ``eta``.
    """

    comps: np.ndarray
    L: int

    def __post_init__(self):
        comps = np.asarray(self.comps, dtype=float)
        if self.L < 2:
            raise ValueError(f"grid size must be >= 2, got {self.L}")
        if comps.shape != (n_components(self.L),):
            raise ValueError(
                f"expected {n_components(self.L)} components for L={self.L}, got shape {comps.shape}"
            )
        if np.any(comps < 0) or not np.all(np.isfinite(comps)):
            raise ValueError("power spectrum components must be finite and non-negative")
        object.__setattr__(self, "comps", comps)

    @property
    def eta(self) -> np.ndarray:
        return multiplicity(self.L)

    def total_power(self) -> float:
        return float(np.dot(self.eta, self.comps))


def as_signal(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] < 2:
        raise ValueError(f"a signal is a 1-D array of length >= 2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("signal values must be finite")
    return x


def _check_same_length(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"length mismatch: {x.shape[-1]} vs {y.shape[-1]}")


def cyclic_shift(x, phi: int) -> np.ndarray:
    """Apply ``S**phi``: ``out[j] = x[(j - phi) mod L]``. Works along the last axis."""
    x = np.asarray(x)
    return np.roll(x, int(phi) % x.shape[-1], axis=-1)


def unitary_dft(x) -> np.ndarray:
    """Unitary DFT along the last axis (``1/sqrt(L)`` normalization)."""
    return sfft.fft(np.asarray(x), axis=-1, norm="ortho")


def inverse_dft(s, real: bool = True, tol: float = 1e-9) -> np.ndarray:
    """Inverse of :func:`unitary_dft`.

    With ``real=True`` the input must be conjugate-symmetric within ``tol``
    (relative to its largest coefficient); the real part is returned.
    """
    s = np.asarray(s, dtype=complex)
    if not real:
        return sfft.ifft(s, axis=-1, norm="ortho")
    L = s.shape[-1]
    mirrored = np.conj(s[..., (-np.arange(L)) % L])
    scale = max(1.0, float(np.max(np.abs(s), initial=0.0)))
    asym = float(np.max(np.abs(s - mirrored), initial=0.0))
    if asym > tol * scale:
        raise ValueError(f"spectrum is not conjugate-symmetric (max deviation {asym:.3g}); cannot return a real signal")
    return sfft.ifft(s, axis=-1, norm="ortho").real


def signal_power_spectrum(x) -> PowerSpectrum:
    x = as_signal(x)
    L = x.shape[0]
    coeffs = sfft.rfft(x, norm="ortho")
    return PowerSpectrum(np.abs(coeffs) ** 2, L)


def cross_correlation(x, y) -> np.ndarray:
    """``c[phi] = <S**phi x, y>`` for every shift ``phi``, via FFT."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    L = x.shape[-1]
    return sfft.irfft(np.conj(sfft.rfft(x, axis=-1)) * sfft.rfft(y, axis=-1), n=L, axis=-1)


def _squared_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=-1)[..., None] + np.sum(y * y, axis=-1)[..., None] - 2.0 * cross_correlation(x, y)
    return np.maximum(sq, 0.0)


def best_alignment(x, y) -> int:
    """Shift ``phi`` minimizing ``||S**phi x - y||``; ties go to the smallest ``phi``."""
    x = as_signal(x)
    y = as_signal(y)
    _check_same_length(x, y)
    sq = _squared_distances(x, y)
    # FFT roundoff can split exact ties; resolve near-ties by direct evaluation
    candidates = np.flatnonzero(sq <= sq.min() + 1e-9 * (1.0 + sq.min()))
    if candidates.size > 1:
        exact = [np.sum((cyclic_shift(x, p) - y) ** 2) for p in candidates]
        return int(candidates[int(np.argmin(exact))])
    return int(candidates[0])


def aligned_distance(x, y) -> float:
    """``min_phi ||S**phi x - y||_2``, computed in O(L log L)."""
    x = as_signal(x)
    y = as_signal(y)
    _check_same_length(x, y)
    phi = best_alignment(x, y)
    return float(np.linalg.norm(cyclic_shift(x, phi) - y))


def aligned_distances(xs, y) -> np.ndarray:
    """Vectorized aligned distance from every row of ``xs`` to ``y``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    y = np.asarray(y, dtype=float)
    _check_same_length(xs, y)
    L = y.shape[0]
    phi = np.argmin(_squared_distances(xs, y[None, :]), axis=-1)
    # direct norms at the chosen shifts; the FFT expansion loses precision near zero
    idx = (np.arange(L)[None, :] - phi[:, None]) % L
    return np.linalg.norm(np.take_along_axis(xs, idx, axis=1) - y, axis=1)


def align_to(x, reference) -> np.ndarray:
    """Return the cyclic shift of ``x`` closest to ``reference``."""
    return cyclic_shift(x, best_alignment(x, reference))


def relative_error(estimate, truth) -> float:
    truth = as_signal(truth)
    return aligned_distance(estimate, truth) / float(np.linalg.norm(truth))


def expand_weights(weights, L: int) -> np.ndarray:
    """Full-length weight vector from non-redundant weights (conjugate-symmetric expansion)."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape[-1] != n_components(L):
        raise ValueError(f"expected {n_components(L)} weights for L={L}, got {weights.shape[-1]}")
    idx = np.minimum(np.arange(L), L - np.arange(L))
    return weights[..., idx]


def power_spectrum_gradient(x, weights) -> np.ndarray:
    """Gradient in ``x`` of ``sum_l eta_l * weights[l] * |F x[l]|**2``.

    The sum runs over the full spectrum, so each non-redundant weight counts
    ``eta_l`` times; the result is ``2 Re(F^H (m * F x))``. Batched over
    leading axes of ``x`` and ``weights``.
    """
    x = np.asarray(x, dtype=float)
    L = x.shape[-1]
    weights = np.asarray(weights, dtype=float)
    if weights.shape[-1] != n_components(L):
        raise ValueError(f"expected {n_components(L)} weights for L={L}, got {weights.shape[-1]}")
    coeffs = sfft.rfft(x, axis=-1, norm="ortho")
    return 2.0 * sfft.irfft(weights * coeffs, n=L, axis=-1, norm="ortho")
