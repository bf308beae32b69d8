"""Scaled non-central chi-squared numerics and the power-spectrum likelihood.

A variate ``c * chi'2_alpha(lambda)`` is described by :class:`NcChi2Params`.
All functions broadcast over array-valued parameters.

Two evaluation regimes are used for the density and its derivative in the
non-centrality:

* ``alpha <= LARGE_ORDER``: the exact Bessel-function form, with
  ``log I_nu`` evaluated in log space (power series for tiny arguments,
  ``scipy.special.ive`` for small orders, the uniform asymptotic expansion
  for large orders), so nothing over- or underflows.
* ``alpha > LARGE_ORDER``: the saddlepoint approximation built from the
  closed-form cumulant generating function. Its log-density error is about
  ``1 / (6 alpha)``.

Sampling switches to a moment-matched Gaussian above ``LARGE_ORDER``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy import special

from .signal import PowerSpectrum, multiplicity, n_components, power_spectrum_gradient

LARGE_ORDER = 1e3
_DEBYE_MIN_ORDER = 50.0
_SERIES_MAX_ARG = 1e-3


@dataclass(frozen=True)
class NcChi2Params:
    order: np.ndarray | float
    noncentrality: np.ndarray | float
    scale: np.ndarray | float = 1.0

    def __post_init__(self):
        a = np.asarray(self.order, dtype=float)
        lam = np.asarray(self.noncentrality, dtype=float)
        c = np.asarray(self.scale, dtype=float)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(c))):
            raise ValueError("non-finite non-central chi2 parameters")
        if np.any(a <= 0) or np.any(lam < 0) or np.any(c <= 0):
            raise ValueError("need order > 0, noncentrality >= 0, scale > 0")
        object.__setattr__(self, "order", a)
        object.__setattr__(self, "noncentrality", lam)
        object.__setattr__(self, "scale", c)

    def mean(self) -> np.ndarray:
        return self.scale * (self.order + self.noncentrality)

    def variance(self) -> np.ndarray:
        return self.scale**2 * (2 * self.order + 4 * self.noncentrality)


# -- log-space modified Bessel function of the first kind ---------------------

def _debye_poly(p: np.ndarray, nu: np.ndarray) -> np.ndarray:
    p2 = p * p
    u1 = p * (3 - 5 * p2) / 24
    u2 = p2 * (81 - 462 * p2 + 385 * p2**2) / 1152
    u3 = p * p2 * (30375 - 369603 * p2 + 765765 * p2**2 - 425425 * p2**3) / 414720
    u4 = p2 * p2 * (4465125 - 94121676 * p2 + 349922430 * p2**2 - 446185740 * p2**3 + 185910725 * p2**4) / 39813120
    return 1 + u1 / nu + u2 / nu**2 + u3 / nu**3 + u4 / nu**4


def log_bessel_ive(nu, z) -> np.ndarray:
    """``log(I_nu(z) * exp(-z))`` for ``nu > -1`` and ``z > 0``."""
    nu, z = np.broadcast_arrays(np.asarray(nu, dtype=float), np.asarray(z, dtype=float))
    out = np.empty(nu.shape)

    debye = nu >= _DEBYE_MIN_ORDER
    series = ~debye & (z <= _SERIES_MAX_ARG)
    direct = ~debye & ~series

    if np.any(debye):
        n, x = nu[debye], z[debye]
        t = x / n
        sq = np.sqrt(1 + t * t)
        # nu * eta - z with eta = sq + log(t / (1 + sq)), arranged to avoid cancellation
        expo = n * (1 / (sq + t) + np.log(t / (1 + sq)))
        out[debye] = expo - 0.5 * np.log(2 * np.pi * n) - 0.5 * np.log(sq) + np.log(_debye_poly(1 / sq, n))
    if np.any(series):
        n, x = nu[series], z[series]
        q = x * x / 4
        poly = q / (n + 1) * (1 + q / (2 * (n + 2)) * (1 + q / (3 * (n + 3))))
        out[series] = n * np.log(x / 2) - special.gammaln(n + 1) + np.log1p(poly) - x
    if np.any(direct):
        out[direct] = np.log(special.ive(nu[direct], z[direct]))
    return out


# -- density -----------------------------------------------------------------

def _check_z(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if np.any(~np.isfinite(z)) or np.any(z <= 0):
        raise ValueError("non-central chi2 density needs finite z > 0")
    return z


def _exact_logpdf(a, lam, y):
    nu = a / 2 - 1
    central = lam == 0
    lam_s = np.where(central, 1.0, lam)
    s = np.sqrt(lam_s * y)
    nonc = (
        -np.log(2)
        - 0.5 * (np.sqrt(y) - np.sqrt(lam_s)) ** 2
        + 0.5 * nu * np.log(y / lam_s)
        + log_bessel_ive(nu, s)
    )
    cent = nu * np.log(y) - y / 2 - (a / 2) * np.log(2) - special.gammaln(a / 2)
    return np.where(central, cent, nonc)


def _saddle_point(a, lam, y):
    w = 2 * y / (a + np.sqrt(a * a + 4 * lam * y))  # w = 1 / (1 - 2 s_hat)
    s = 0.5 * (1 - 1 / w)
    k2 = 2 * a * w**2 + 4 * lam * w**3
    return w, s, k2


def _saddle_logpdf(a, lam, y):
    w, s, k2 = _saddle_point(a, lam, y)
    return 0.5 * a * np.log(w) + lam * s * w - s * y - 0.5 * np.log(2 * np.pi * k2)


def _regime(a, large_order):
    return a > large_order


def log_pdf(p: NcChi2Params, z, large_order: float = LARGE_ORDER) -> np.ndarray:
    """Log-density of ``c * chi'2_alpha(lambda)`` at ``z``."""
    z = _check_z(z)
    a, lam, c = np.broadcast_arrays(p.order, p.noncentrality, p.scale)
    a, lam, c, y = np.broadcast_arrays(a, lam, c, z / c)
    big = _regime(a, large_order)
    out = np.empty(a.shape)
    if np.any(~big):
        out[~big] = _exact_logpdf(a[~big], lam[~big], y[~big])
    if np.any(big):
        out[big] = _saddle_logpdf(a[big], lam[big], y[big])
    out = out - np.log(c)
    return out if out.ndim else float(out)


def dlogpdf_dlambda(p: NcChi2Params, z, large_order: float = LARGE_ORDER) -> np.ndarray:
    """Derivative of :func:`log_pdf` with respect to the non-centrality."""
    z = _check_z(z)
    a, lam, c = np.broadcast_arrays(p.order, p.noncentrality, p.scale)
    a, lam, c, y = np.broadcast_arrays(a, lam, c, z / c)
    big = _regime(a, large_order)
    out = np.empty(a.shape)

    ex = ~big
    if np.any(ex):
        aa, ll, yy = a[ex], lam[ex], y[ex]
        central = ll == 0
        ls = np.where(central, 1.0, ll)
        nu = aa / 2 - 1
        s = np.sqrt(ls * yy)
        ratio = np.exp(log_bessel_ive(nu + 1, s) - log_bessel_ive(nu, s))
        r = np.where(central, yy / aa, np.sqrt(yy / ls) * ratio)
        out[ex] = 0.5 * (r - 1)
    if np.any(big):
        aa, ll, yy = a[big], lam[big], y[big]
        w, s, k2 = _saddle_point(aa, ll, yy)
        dw = -(w**2) / (aa + 2 * ll * w)
        dk2 = (4 * aa * w + 12 * ll * w**2) * dw + 4 * w**3
        out[big] = s * w - 0.5 * dk2 / k2
    return out if out.ndim else float(out)


def sample(p: NcChi2Params, rng: np.random.Generator, large_order: float = LARGE_ORDER) -> np.ndarray:
    """Draw ``c * chi'2_alpha(lambda)``, one variate per broadcast parameter entry."""
    a, lam, c = np.broadcast_arrays(p.order, p.noncentrality, p.scale)
    shape = a.shape
    a, lam, c = a.ravel(), lam.ravel(), c.ravel()
    out = np.empty(a.shape)
    big = _regime(a, large_order)
    mid = ~big & (a >= 1)
    low = ~big & (a < 1)
    if np.any(mid):
        g = rng.standard_normal(np.count_nonzero(mid))
        rest = np.where(a[mid] > 1, a[mid] - 1, 1.0)
        chi = np.where(a[mid] > 1, rng.chisquare(rest), 0.0)
        out[mid] = chi + (g + np.sqrt(lam[mid])) ** 2
    if np.any(low):
        j = rng.poisson(lam[low] / 2)
        out[low] = rng.chisquare(a[low] + 2 * j)
    if np.any(big):
        m = a[big] + lam[big]
        sd = np.sqrt(2 * a[big] + 4 * lam[big])
        out[big] = np.maximum(m + sd * rng.standard_normal(np.count_nonzero(big)), 0.0)
    out = np.maximum(c * out, np.finfo(float).tiny)
    out = out.reshape(shape)
    return out if out.ndim else float(out)


# -- power-spectrum likelihood -------------------------------------------------

@dataclass(frozen=True)
class LikelihoodContext:
    """Conditioning metadata for the power-spectrum likelihood.

    ``variance_t`` is the extra diffusion variance on top of the observation
    noise (zero for the data likelihood itself).
    """

    N: int
    sigma2: float
    variance_t: float = 0.0
    L: int | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.sigma2 < 0 or self.variance_t < 0:
            raise ValueError("variances must be >= 0")

    @property
    def total_variance(self) -> float:
        return self.sigma2 + self.variance_t

    def eta(self, L: int) -> np.ndarray:
        return multiplicity(L)


def _comps(phat, L: int) -> np.ndarray:
    comps = phat.comps if isinstance(phat, PowerSpectrum) else np.asarray(phat, dtype=float)
    if comps.shape[-1] != n_components(L):
        raise ValueError(f"power spectrum has {comps.shape[-1]} components, signal needs {n_components(L)}")
    return comps


def component_params(signal_power, N: int, v: float, L: int) -> NcChi2Params:
    """Per-component law ``(v / (eta N)) chi'2_{eta N}((eta N / v) |F x|^2)``."""
    if v <= 0:
        raise ValueError("total variance must be > 0")
    a = multiplicity(L) * float(N)
    return NcChi2Params(np.broadcast_to(a, np.shape(signal_power)), a * np.asarray(signal_power) / v, v / a)


def _signal_power(x) -> np.ndarray:
    return np.abs(sfft.rfft(np.asarray(x, dtype=float), axis=-1, norm="ortho")) ** 2


def power_spectrum_log_likelihood(phat, x, ctx: LikelihoodContext, large_order: float = LARGE_ORDER):
    """``log p(phat | x)`` with independent non-redundant components."""
    x = np.asarray(x, dtype=float)
    L = x.shape[-1]
    z = _comps(phat, L)
    params = component_params(_signal_power(x), ctx.N, ctx.total_variance, L)
    return np.sum(log_pdf(params, z, large_order), axis=-1)


def conditional_score(phat_t, x_t, ctx: LikelihoodContext, large_order: float = LARGE_ORDER) -> np.ndarray:
    """Gradient in ``x_t`` of :func:`power_spectrum_log_likelihood`.

    Batched over leading axes of ``x_t`` / ``phat_t``.
    """
    x_t = np.asarray(x_t, dtype=float)
    L = x_t.shape[-1]
    z = _comps(phat_t, L)
    v = ctx.total_variance
    params = component_params(_signal_power(x_t), ctx.N, v, L)
    dl = dlogpdf_dlambda(params, z, large_order)
    # d lambda_l / d|F x_l|^2 = eta_l N / v; power_spectrum_gradient already counts eta_l
    return power_spectrum_gradient(x_t, (ctx.N / v) * dl)


def build_pt_given_phat(phat: PowerSpectrum, sigma2: float, sigma_t2: float, N: int) -> NcChi2Params:
    """Approximate law of the diffused statistic given the observed one."""
    if sigma_t2 <= 0:
        raise ValueError("sigma_t2 must be > 0")
    return component_params(np.maximum(phat.comps - sigma2, 0.0), N, sigma_t2, phat.L)


def build_pt_given_xt(x_t, sigma2: float, sigma_t2: float, N: int) -> LikelihoodContext:
    if sigma2 + sigma_t2 <= 0:
        raise ValueError("sigma2 + sigma_t2 must be > 0")
    return LikelihoodContext(N=N, sigma2=sigma2, variance_t=sigma_t2, L=np.shape(x_t)[-1])
