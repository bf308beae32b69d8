"""MRA observation model and shift-invariant sample moments.

Every statistic is computed from a canonical rotation of each observation
(its maximum moved to index 0), which makes the results bit-identical under
any per-observation cyclic shift, not merely equal up to roundoff.
"""

from __future__ import annotations

import io
import struct
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import fft as sfft

from .signal import PowerSpectrum, as_signal, n_components

CHUNK_SIZE = 8192


@dataclass
class MraDataset:
    observations: np.ndarray  # N x L
    sigma2: float
    true_shifts: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=float))
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")
        if not np.all(np.isfinite(self.observations)):
            raise ValueError("observations must be finite")
        if self.true_shifts is not None:
            self.true_shifts = np.asarray(self.true_shifts, dtype=np.int64)
            if self.true_shifts.shape != (self.N,):
                raise ValueError("true_shifts must have one entry per observation")
            if np.any((self.true_shifts < 0) | (self.true_shifts >= self.L)):
                raise ValueError("true_shifts must lie in [0, L)")

    @property
    def N(self) -> int:
        return self.observations.shape[0]

    @property
    def L(self) -> int:
        return self.observations.shape[1]


def iter_observation_chunks(
    x, N: int, sigma2: float, rng: np.random.Generator, chunk_size: int = CHUNK_SIZE
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(observations, shifts)`` blocks; concatenated they form one dataset.

    The draw order is fixed by ``chunk_size``, so streaming and materializing
    the same seed give identical observations.
    """
    x = as_signal(x)
    if N < 1:
        raise ValueError("N must be >= 1")
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    L = x.shape[0]
    sigma = np.sqrt(sigma2)
    grid = np.arange(L)
    done = 0
    while done < N:
        m = min(chunk_size, N - done)
        shifts = rng.integers(L, size=m)
        noise = rng.standard_normal((m, L))
        yield x[(grid[None, :] - shifts[:, None]) % L] + sigma * noise, shifts
        done += m


def generate_observations(x, N: int, sigma2: float, rng: np.random.Generator, seed: int | None = None) -> MraDataset:
    """``Y_n = S**Phi_n x + eps_n`` with uniform shifts and i.i.d. Gaussian noise."""
    blocks = list(iter_observation_chunks(x, N, sigma2, rng))
    obs = np.concatenate([b[0] for b in blocks])
    shifts = np.concatenate([b[1] for b in blocks])
    return MraDataset(obs, float(sigma2), shifts, seed)


def canonical_rotation(Y: np.ndarray) -> np.ndarray:
    """Rotate each row so it starts at its maximum.

    Rows with a repeated maximum use the lexicographically largest of the
    candidate rotations, so the result depends only on the row's orbit.
    """
    Y = np.atleast_2d(Y)
    n, L = Y.shape
    start = np.argmax(Y, axis=1)
    ties = np.flatnonzero(np.count_nonzero(Y == Y[np.arange(n), start][:, None], axis=1) > 1)
    for i in ties:
        row = Y[i]
        cands = np.flatnonzero(row == row.max())
        rots = [tuple(np.roll(row, -c)) for c in cands]
        start[i] = cands[max(range(len(cands)), key=lambda k: rots[k])]
    idx = (np.arange(L)[None, :] + start[:, None]) % L
    return np.take_along_axis(Y, idx, axis=1)


@dataclass
class Bispectrum:
    """``mat[k1, k2]`` estimates ``xh[k1] xh[k2] conj(xh[k1 + k2])``."""

    mat: np.ndarray

    @property
    def L(self) -> int:
        return self.mat.shape[0]


def population_bispectrum(x) -> Bispectrum:
    xh = sfft.fft(as_signal(x), norm="ortho")
    L = xh.shape[0]
    k = np.arange(L)
    return Bispectrum(xh[:, None] * xh[None, :] * np.conj(xh[(k[:, None] + k[None, :]) % L]))


@dataclass
class SampleStatistics:
    mean: float
    power: PowerSpectrum
    bispectrum: Bispectrum | None
    N: int
    sigma2: float

    @property
    def L(self) -> int:
        return self.power.L


class MomentAccumulator:
    """Streaming accumulation of the first three shift-invariant moments."""

    def __init__(self, L: int, bispectrum: bool = True):
        self.L = L
        self.n = 0
        self.total = 0.0
        self.power_sum = np.zeros(n_components(L))
        self.bispec_sum = np.zeros((L, L), dtype=complex) if bispectrum else None

    def update(self, Y) -> None:
        Y = canonical_rotation(np.asarray(Y, dtype=float))
        if Y.shape[1] != self.L:
            raise ValueError(f"expected rows of length {self.L}, got {Y.shape[1]}")
        self.n += Y.shape[0]
        self.total += float(Y.sum(axis=1).sum())
        half = sfft.rfft(Y, axis=1, norm="ortho")
        self.power_sum += (np.abs(half) ** 2).sum(axis=0)
        if self.bispec_sum is not None:
            full = sfft.fft(Y, axis=1, norm="ortho")
            for k1 in range(self.L):
                pair = full * np.conj(np.roll(full, -k1, axis=1))  # [n, k2] -> y[k2] conj(y[k1 + k2])
                self.bispec_sum[k1] += full[:, k1] @ pair

    def finalize(self, sigma2: float) -> SampleStatistics:
        if self.n == 0:
            raise ValueError("no observations accumulated")
        bis = None if self.bispec_sum is None else Bispectrum(self.bispec_sum / self.n)
        return SampleStatistics(
            mean=self.total / (self.n * self.L),
            power=PowerSpectrum(self.power_sum / self.n, self.L),
            bispectrum=bis,
            N=self.n,
            sigma2=float(sigma2),
        )


def compute_statistics(d: MraDataset, bispectrum: bool = True) -> SampleStatistics:
    acc = MomentAccumulator(d.L, bispectrum=bispectrum)
    for start in range(0, d.N, CHUNK_SIZE):
        acc.update(d.observations[start : start + CHUNK_SIZE])
    return acc.finalize(d.sigma2)


def stream_statistics(x, N: int, sigma2: float, rng: np.random.Generator, bispectrum: bool = True) -> SampleStatistics:
    """Statistics of a simulated dataset without materializing it."""
    x = as_signal(x)
    acc = MomentAccumulator(x.shape[0], bispectrum=bispectrum)
    for Y, _ in iter_observation_chunks(x, N, sigma2, rng):
        acc.update(Y)
    return acc.finalize(sigma2)


def sample_mean(d: MraDataset) -> float:
    return compute_statistics(d, bispectrum=False).mean


def sample_power_spectrum(d: MraDataset) -> PowerSpectrum:
    return compute_statistics(d, bispectrum=False).power


def sample_bispectrum(d: MraDataset) -> Bispectrum:
    return compute_statistics(d).bispectrum


def debias_power_spectrum(p: PowerSpectrum, sigma2: float) -> PowerSpectrum:
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    return PowerSpectrum(np.maximum(p.comps - sigma2, 0.0), p.L)


def debias_bispectrum(b: Bispectrum, sigma2: float, mean_est: float) -> Bispectrum:
    """Remove the Gaussian-noise bias ``sigma2 * xh[0]`` on the lines k1=0, k2=0, k1+k2=0."""
    L = b.L
    k = np.arange(L)
    lines = (k[:, None] == 0).astype(float) + (k[None, :] == 0) + ((k[:, None] + k[None, :]) % L == 0)
    return Bispectrum(b.mat - sigma2 * np.sqrt(L) * mean_est * lines)


# deterministic .npz files: fixed zip timestamps so reruns are byte-identical

def save_npz(path, **arrays) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, buf.getvalue())


def load_npz(path) -> dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as f:
            return {k: f[k] for k in f.files}
    except (zipfile.BadZipFile, ValueError, EOFError, OSError) as exc:
        raise ValueError(f"cannot read {path}: {exc}") from exc


DATASET_MAGIC = b"MRA1"
_DATASET_HEADER = struct.Struct("<4sIQdQB")


def save_dataset(d: MraDataset, path) -> None:
    """Little-endian binary: header, ``N*L`` f64 observations, optional ``N`` u32 shifts."""
    has_shifts = d.true_shifts is not None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_DATASET_HEADER.pack(DATASET_MAGIC, d.L, d.N, float(d.sigma2), int(d.seed or 0), int(has_shifts)))
        f.write(np.ascontiguousarray(d.observations, dtype="<f8").tobytes())
        if has_shifts:
            f.write(np.asarray(d.true_shifts, dtype="<u4").tobytes())


def load_dataset(path) -> MraDataset:
    buf = Path(path).read_bytes()
    if len(buf) < _DATASET_HEADER.size or buf[:4] != DATASET_MAGIC:
        raise ValueError(f"{path} is not a dataset file")
    _, L, N, sigma2, seed, has_shifts = _DATASET_HEADER.unpack_from(buf)
    expected = _DATASET_HEADER.size + 8 * N * L + (4 * N if has_shifts else 0)
    if len(buf) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(buf)} (truncated or corrupt)")
    pos = _DATASET_HEADER.size
    obs = np.frombuffer(buf, dtype="<f8", count=N * L, offset=pos).reshape(N, L).astype(float)
    shifts = None
    if has_shifts:
        shifts = np.frombuffer(buf, dtype="<u4", count=N, offset=pos + 8 * N * L).astype(np.int64)
    return MraDataset(obs, sigma2, shifts, seed)


def export_csv(d: MraDataset, path) -> None:
    """Plain-text export for small datasets: one observation per row, shift first if known."""
    cols = d.observations if d.true_shifts is None else np.column_stack([d.true_shifts, d.observations])
    fmt = ["%.17g"] * d.L if d.true_shifts is None else ["%d"] + ["%.17g"] * d.L
    np.savetxt(path, cols, fmt=fmt, delimiter=",")


def save_statistics(s: SampleStatistics, path) -> None:
    arrays = {
        "mean": np.float64(s.mean),
        "power": s.power.comps,
        "L": np.int64(s.L),
        "N": np.int64(s.N),
        "sigma2": np.float64(s.sigma2),
    }
    if s.bispectrum is not None:
        arrays["bispectrum"] = s.bispectrum.mat
    save_npz(path, **arrays)


def load_statistics(path) -> SampleStatistics:
    a = load_npz(path)
    missing = {"mean", "power", "L", "N", "sigma2"} - set(a)
    if missing:
        raise ValueError(f"{path} is not a statistics file (missing {sorted(missing)})")
    L = int(a["L"])
    return SampleStatistics(
        mean=float(a["mean"]),
        power=PowerSpectrum(a["power"], L),
        bispectrum=Bispectrum(a["bispectrum"]) if "bispectrum" in a else None,
        N=int(a["N"]),
        sigma2=float(a["sigma2"]),
    )
