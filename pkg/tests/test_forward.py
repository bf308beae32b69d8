import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpsmra.forward import (
    Bispectrum,
    MraDataset,
    canonical_rotation,
    compute_statistics,
    debias_bispectrum,
    debias_power_spectrum,
    export_csv,
    generate_observations,
    load_dataset,
    load_statistics,
    population_bispectrum,
    sample_bispectrum,
    sample_mean,
    sample_power_spectrum,
    save_dataset,
    save_statistics,
    stream_statistics,
)
from mpsmra.signal import PowerSpectrum, cyclic_shift, multiplicity, signal_power_spectrum, unitary_dft


def direct_bispectrum(Y):
    """Triple products summed observation by observation, straight from the definition."""
    Y = np.atleast_2d(Y)
    L = Y.shape[1]
    out = np.zeros((L, L), dtype=complex)
    for y in Y:
        yh = unitary_dft(y)
        for k1 in range(L):
            for k2 in range(L):
                out[k1, k2] += yh[k1] * yh[k2] * np.conj(yh[(k1 + k2) % L])
    return out / len(Y)


def test_noiseless_rows_are_shifts():
    x = np.random.default_rng(0).standard_normal(6)
    d = generate_observations(x, 3, 0.0, np.random.default_rng(1))
    for y, s in zip(d.observations, d.true_shifts):
        assert np.array_equal(y, cyclic_shift(x, s))


def test_noise_variance():
    d = generate_observations(np.zeros(5), 100_000, 1.0, np.random.default_rng(2))
    v = d.observations.var(axis=0, ddof=1)
    se = math.sqrt(2 / (d.N - 1))
    assert np.all(np.abs(v - 1) < 3 * se)


def test_shift_histogram_uniform():
    d = generate_observations(np.arange(8.0), 100_000, 0.5, np.random.default_rng(3))
    counts = np.bincount(d.true_shifts, minlength=8)
    se = math.sqrt(d.N * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - d.N / 8) < 3 * se)


def test_streaming_matches_materialized():
    x = np.random.default_rng(4).standard_normal(7)
    d = generate_observations(x, 20_000, 2.0, np.random.default_rng(5))
    a = compute_statistics(d)
    b = stream_statistics(x, 20_000, 2.0, np.random.default_rng(5))
    assert a.mean == b.mean
    assert np.array_equal(a.power.comps, b.power.comps)
    assert np.array_equal(a.bispectrum.mat, b.bispectrum.mat)


def test_sample_mean_cases():
    x = np.random.default_rng(6).standard_normal(9)
    d = MraDataset(x[None, :], 0.0)
    assert abs(sample_mean(d) - x.mean()) < 1e-15
    assert sample_mean(MraDataset(np.full((3, 4), 2.5), 0.0)) == 2.5
    x = np.random.default_rng(7).standard_normal(10)
    x += 0.7 - x.mean()
    d = generate_observations(x, 100_000, 4.0, np.random.default_rng(8))
    se = math.sqrt(4.0 / (d.N * d.L))
    assert abs(sample_mean(d) - 0.7) < 3 * se


def test_power_spectrum_single_clean_observation():
    x = np.random.default_rng(9).standard_normal(8)
    d = MraDataset(x[None, :], 0.0)
    assert np.allclose(sample_power_spectrum(d).comps, signal_power_spectrum(x).comps, atol=1e-12)


def test_power_spectrum_mean_matches_model():
    x = np.random.default_rng(10).standard_normal(8)
    target = signal_power_spectrum(x).comps + 1.0
    eta = multiplicity(8)
    N, reps = 2 * 10**5, 60
    P = np.stack([stream_statistics(x, N, 1.0, np.random.default_rng(100 + r), bispectrum=False).power.comps for r in range(reps)])
    sd = np.sqrt((2 + 4 * signal_power_spectrum(x).comps) / (eta * N))
    assert np.all(np.abs(P.mean(axis=0) - target) < 5 * sd / math.sqrt(reps))


def test_bispectrum_constant_signal():
    b = sample_bispectrum(MraDataset(np.ones((1, 4)), 0.0)).mat
    assert abs(b[0, 0] - 8) < 1e-12
    mask = np.ones((4, 4), bool)
    mask[0, 0] = False
    assert np.allclose(b[mask], 0, atol=1e-12)


def test_bispectrum_matches_direct_products():
    x = np.random.default_rng(11).standard_normal(7)
    b = sample_bispectrum(MraDataset(x[None, :], 0.0)).mat
    assert np.max(np.abs(b - direct_bispectrum(x))) < 1e-12
    assert np.max(np.abs(population_bispectrum(x).mat - direct_bispectrum(x))) < 1e-12
    Y = np.random.default_rng(12).standard_normal((30, 6))
    assert np.max(np.abs(sample_bispectrum(MraDataset(Y, 1.0)).mat - direct_bispectrum(Y))) < 1e-12


def test_population_bispectrum_symmetric():
    b = population_bispectrum(np.random.default_rng(13).standard_normal(11)).mat
    assert np.allclose(b, b.T, atol=1e-13)


def test_debias_power_spectrum():
    p = PowerSpectrum(np.array([5.0, 3.0, 1.0]), 4)
    assert np.array_equal(debias_power_spectrum(p, 2.0).comps, [3, 1, 0])
    assert np.array_equal(debias_power_spectrum(p, 0.0).comps, p.comps)
    with pytest.raises(ValueError):
        debias_power_spectrum(p, -1.0)


def test_debiased_power_spectrum_monte_carlo():
    x = np.random.default_rng(14).standard_normal(9)
    d = generate_observations(x, 100_000, 1.5, np.random.default_rng(15))
    p = debias_power_spectrum(sample_power_spectrum(d), 1.5).comps
    truth = signal_power_spectrum(x).comps
    sd = np.sqrt((2 * 1.5**2 + 4 * 1.5 * truth) / (multiplicity(9) * d.N))
    assert np.all(np.abs(p - truth) < 5 * sd)


def test_debias_bispectrum_support():
    rng = np.random.default_rng(16)
    m = rng.standard_normal((7, 7)) + 1j * rng.standard_normal((7, 7))
    b = Bispectrum(m)
    assert np.array_equal(debias_bispectrum(b, 0.0, 0.3).mat, m)
    out = debias_bispectrum(b, 2.0, 0.3).mat
    assert out[3, 2] == m[3, 2]
    k = np.arange(7)
    lines = (k[:, None] == 0) | (k[None, :] == 0) | ((k[:, None] + k[None, :]) % 7 == 0)
    assert np.array_equal(out[~lines], m[~lines])
    # k1 = k2 = 0 lies on all three lines
    assert np.isclose(out[0, 0], m[0, 0] - 3 * 2.0 * math.sqrt(7) * 0.3)


def test_debiased_bispectrum_monte_carlo():
    """Oracle for the bias model: debiased sample bispectrum vs. the population bispectrum."""
    L, sigma2, N = 7, 1.0, 500_000
    x = np.random.default_rng(17).standard_normal(L) + 0.5
    rng = np.random.default_rng(18)
    d = generate_observations(x, N, sigma2, rng)
    stats = compute_statistics(d)
    b = debias_bispectrum(stats.bispectrum, sigma2, stats.mean).mat
    truth = population_bispectrum(x).mat
    # per-entry standard errors from the per-observation triple products
    yh = unitary_dft(d.observations[:50_000])
    k = np.arange(L)
    sd = np.zeros((L, L))
    for k1 in range(L):
        t = yh[:, k1, None] * yh * np.conj(yh[:, (k1 + k) % L])
        sd[k1] = np.sqrt(t.real.var(axis=0) + t.imag.var(axis=0))
    se = sd / math.sqrt(N)
    assert np.all(np.abs(b - truth) < 5 * se)


def test_noise_only_debiased_statistics_vanish():
    L, N = 6, 200_000
    d = generate_observations(np.zeros(L), N, 1.0, np.random.default_rng(19))
    s = compute_statistics(d)
    p = s.power.comps - 1.0
    assert np.all(np.abs(p) < 5 * np.sqrt(2 / (multiplicity(L) * N)))
    b = debias_bispectrum(s.bispectrum, 1.0, s.mean).mat
    assert np.max(np.abs(b)) < 5 * math.sqrt(6 / N)


def test_dataset_round_trip(tmp_path):
    d = generate_observations(np.random.default_rng(20).standard_normal(5), 40, 0.3, np.random.default_rng(21), seed=21)
    save_dataset(d, tmp_path / "d.mra")
    e = load_dataset(tmp_path / "d.mra")
    assert np.array_equal(d.observations, e.observations)
    assert np.array_equal(d.true_shifts, e.true_shifts)
    assert (e.sigma2, e.seed) == (0.3, 21)
    raw = (tmp_path / "d.mra").read_bytes()
    assert raw[:4] == b"MRA1"
    (tmp_path / "bad.mra").write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "bad.mra")
    save_dataset(e, tmp_path / "again.mra")
    assert (tmp_path / "again.mra").read_bytes() == raw


def test_dataset_without_shifts(tmp_path):
    d = MraDataset(np.eye(3), 1.0)
    save_dataset(d, tmp_path / "d.mra")
    e = load_dataset(tmp_path / "d.mra")
    assert e.true_shifts is None and np.array_equal(e.observations, np.eye(3))


def test_csv_export(tmp_path):
    d = generate_observations(np.arange(4.0), 5, 0.1, np.random.default_rng(22))
    export_csv(d, tmp_path / "d.csv")
    back = np.loadtxt(tmp_path / "d.csv", delimiter=",")
    assert np.array_equal(back[:, 0].astype(int), d.true_shifts)
    assert np.array_equal(back[:, 1:], d.observations)


def test_statistics_round_trip(tmp_path):
    x = np.random.default_rng(23).standard_normal(6)
    s = stream_statistics(x, 1000, 1.0, np.random.default_rng(24))
    save_statistics(s, tmp_path / "s.npz")
    first = (tmp_path / "s.npz").read_bytes()
    t = load_statistics(tmp_path / "s.npz")
    assert t.mean == s.mean and t.N == s.N and t.sigma2 == s.sigma2
    assert np.array_equal(t.power.comps, s.power.comps)
    assert np.array_equal(t.bispectrum.mat, s.bispectrum.mat)
    save_statistics(t, tmp_path / "s2.npz")
    assert (tmp_path / "s2.npz").read_bytes() == first


def test_dataset_validation():
    with pytest.raises(ValueError):
        MraDataset(np.ones((2, 3)), -1.0)
    with pytest.raises(ValueError):
        MraDataset(np.ones((2, 3)), 1.0, np.array([0, 3]))
    with pytest.raises(ValueError):
        generate_observations(np.ones(3), 0, 1.0, np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12).flatmap(lambda L: st.tuples(arrays(np.float64, (5, L), elements=st.integers(-3, 3).map(float)), arrays(np.int64, 5, elements=st.integers(0, 100)))))
def test_statistics_bit_identical_under_per_row_shifts(case):
    Y, shifts = case
    shifted = np.stack([cyclic_shift(y, s) for y, s in zip(Y, shifts)])
    a = compute_statistics(MraDataset(Y, 1.0))
    b = compute_statistics(MraDataset(shifted, 1.0))
    assert a.mean == b.mean
    assert np.array_equal(a.power.comps, b.power.comps)
    assert np.array_equal(a.bispectrum.mat, b.bispectrum.mat)


@given(arrays(np.float64, (4, 9), elements=st.floats(-5, 5, allow_nan=False)), st.integers(0, 8))
def test_canonical_rotation_depends_only_on_orbit(Y, s):
    assert np.array_equal(canonical_rotation(Y), canonical_rotation(np.roll(Y, s, axis=1)))
