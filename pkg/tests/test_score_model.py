import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from mpsmra.priors import PriorSpec
from mpsmra.score_model import (
    CheckpointError,
    DiffusionSchedule,
    ScoreCheckpoint,
    ScoreNet,
    TrainConfig,
    TrainingDiverged,
    dsm_loss,
    dsm_objective,
    load_checkpoint,
    save_checkpoint,
    score_eval,
    train,
    unconditional_sample,
)
from mpsmra.signal import cyclic_shift

SCHED = DiffusionSchedule()


def random_net(L, seed, **kw):
    torch.manual_seed(seed)
    return ScoreNet(L, **kw)


def gaussian_floor(L, v, t_min=1e-3):
    """Irreducible DSM loss for a N(0, v I) prior: L * E_t[v / (v + var_t)], t ~ U[t_min, 1]."""
    f = lambda t: v / (v + float(SCHED.perturbation_var(t)))
    return L * integrate.quad(f, t_min, 1)[0] / (1 - t_min)


def test_schedule_endpoints():
    assert SCHED.sigma2(0.0) == 1.0
    assert SCHED.sigma2(1.0) == 9.0
    assert SCHED.perturbation_var(0.0) == 0.0
    t = np.linspace(0, 1, 101)
    assert np.all(np.diff(SCHED.sigma2(t)) > 0)
    assert np.isclose(SCHED.step_var(1.0, 0.5), 9 - 3)


def test_parameter_count_reported():
    assert ScoreNet(41, channels=4, kernel=9).n_params() == 1001
    net = ScoreNet(41)
    assert net.n_params() == sum(p.numel() for p in net.parameters())


def test_net_rejects_even_kernel():
    with pytest.raises(ValueError):
        ScoreNet(8, kernel=4)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 48), st.integers(0, 100), st.integers(0, 2**16), st.floats(1e-3, 1.0))
def test_score_shift_equivariance_bit_exact(L, phi, seed, t):
    net = random_net(L, seed, channels=4, kernel=5)
    x = np.random.default_rng(seed).standard_normal((3, L))
    a = score_eval(net, cyclic_shift(x, phi), t)
    b = cyclic_shift(score_eval(net, x, t), phi)
    assert np.array_equal(a, b)


def test_zero_net_zero_score():
    net = ScoreNet(10).zero_()
    assert np.all(score_eval(net, np.random.default_rng(0).standard_normal((4, 10)), 0.3) == 0)


def test_score_eval_time_range():
    net = ScoreNet(6, channels=2)
    with pytest.raises(ValueError):
        score_eval(net, np.zeros(6), 0.0)
    with pytest.raises(ValueError):
        score_eval(net, np.zeros(6), 1.5)
    assert score_eval(net, np.zeros(6), 1.0).shape == (6,)


def test_dsm_zero_net_loss_is_L():
    L = 9
    batch = np.random.default_rng(1).standard_normal((100_000, L))
    loss = dsm_loss(ScoreNet(L, channels=2).zero_(), batch, np.random.default_rng(2))
    # var * |g / sqrt(var)|^2 = |g|^2, chi2_L: mean L, sd sqrt(2L)
    assert abs(loss - L) < 3 * math.sqrt(2 * L / 100_000)


def test_dsm_oracle_reaches_floor():
    L, v, n = 6, 2.0, 200_000
    rng = np.random.default_rng(3)
    batch = math.sqrt(v) * rng.standard_normal((n, L))
    oracle = lambda x, t: -x / (v + SCHED.perturbation_var(t))[:, None]
    losses = [dsm_loss(oracle, batch[i : i + 1000], rng) for i in range(0, n, 1000)]
    se = np.std(losses, ddof=1) / math.sqrt(len(losses))
    assert abs(np.mean(losses) - gaussian_floor(L, v)) < 3 * se


def test_dsm_empty_batch():
    with pytest.raises(ValueError):
        dsm_loss(ScoreNet(4, channels=2), np.zeros((0, 4)), np.random.default_rng(0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16))
def test_dsm_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    net = random_net(7, seed, channels=3, kernel=3)
    assert dsm_loss(net, rng.standard_normal((16, 7)), rng) >= 0


def test_dsm_gradient_finite_differences():
    L = 5
    net = random_net(L, 4, channels=3, kernel=3, n_layers=2).double()
    rng = np.random.default_rng(5)
    x0 = torch.from_numpy(rng.standard_normal((8, L)))
    var = torch.from_numpy(SCHED.perturbation_var(rng.uniform(0.01, 1, 8)))
    g = torch.from_numpy(rng.standard_normal((8, L)))
    loss = dsm_objective(net, x0, var, g)
    grads = torch.autograd.grad(loss, list(net.parameters()))
    analytic = torch.cat([gr.ravel() for gr in grads]).numpy()
    fd = []
    h = 1e-6
    with torch.no_grad():
        for p in net.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = dsm_objective(net, x0, var, g).item()
                flat[i] = old - h
                down = dsm_objective(net, x0, var, g).item()
                flat[i] = old
                fd.append((up - down) / (2 * h))
    fd = np.array(fd)
    assert np.linalg.norm(analytic - fd) / np.linalg.norm(fd) < 1e-4


def test_train_smoke_decreases_loss(tmp_path):
    cfg = TrainConfig(steps=500, seed=0, mean_samples=2000, log_every=50)
    ckpt = train(PriorSpec("step", 16), cfg, log_path=tmp_path / "log.csv")
    rows = np.loadtxt(tmp_path / "log.csv", delimiter=",", skiprows=1)
    assert rows[-1, 0] == 500
    assert rows[-1, 1] < rows[0, 1]
    assert ckpt.final_loss == pytest.approx(rows[-1, 1])
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "step,loss,wall_time"


def test_train_deterministic(tmp_path):
    cfg = TrainConfig(steps=30, seed=7, mean_samples=500, channels=4)
    for name in ("a", "b"):
        save_checkpoint(train(PriorSpec("step", 12), cfg), tmp_path / f"{name}.sck")
    assert (tmp_path / "a.sck").read_bytes() == (tmp_path / "b.sck").read_bytes()


def test_train_divergence_detected():
    bad = lambda n, rng: np.full((n, 6), np.nan)
    with pytest.raises(TrainingDiverged):
        train(PriorSpec("step", 6), TrainConfig(steps=5, mean_samples=10, channels=2), sampler=bad)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="linear")
    with pytest.raises(ValueError):
        TrainConfig(t_min=0)


def test_trained_gaussian_score_matches_analytic():
    L, v = 8, 1.0
    sampler = lambda n, rng: math.sqrt(v) * rng.standard_normal((n, L))
    cfg = TrainConfig(steps=3000, seed=1, mean_samples=20_000, lr_schedule="cosine")
    ckpt = train(PriorSpec("step", L), cfg, sampler=sampler)
    net = ckpt.build_net()
    assert ckpt.final_loss < 1.05 * gaussian_floor(L, v)
    rng = np.random.default_rng(6)
    # probe where the perturbed marginal puts its mass; the loss weights the
    # score by the perturbation variance, so very small t is barely constrained
    for t in [0.1, 0.5, 1.0]:
        x = math.sqrt(v + SCHED.perturbation_var(t)) * rng.standard_normal((500, L))
        ref = -x / (v + SCHED.perturbation_var(t))
        got = score_eval(net, x, t, ckpt.schedule)
        err = np.linalg.norm(got - ref, axis=1) / np.linalg.norm(ref, axis=1)
        assert np.median(err) < 0.1


def _small_ckpt(L=10, seed=0):
    net = random_net(L, seed, channels=3, kernel=3)
    return ScoreCheckpoint.from_net(net, SCHED, 1e-3, np.linspace(0, 1, L), seed=seed, steps=12, final_loss=1.5, metadata={"note": "x"})


def test_checkpoint_round_trip(tmp_path):
    ck = _small_ckpt()
    save_checkpoint(ck, tmp_path / "c.sck")
    back = load_checkpoint(tmp_path / "c.sck")
    assert back.layout == ck.layout and back.metadata == ck.metadata
    assert np.array_equal(back.weights, ck.weights) and np.array_equal(back.prior_mean, ck.prior_mean)
    x = np.random.default_rng(7).standard_normal((5, 10))
    assert np.array_equal(score_eval(ck.build_net(), x, 0.4), score_eval(back.build_net(), x, 0.4))
    save_checkpoint(back, tmp_path / "d.sck")
    assert (tmp_path / "c.sck").read_bytes() == (tmp_path / "d.sck").read_bytes()
    assert (tmp_path / "c.sck").read_bytes()[:4] == b"SCK1"


def test_checkpoint_errors(tmp_path):
    ck = _small_ckpt()
    save_checkpoint(ck, tmp_path / "c.sck")
    raw = (tmp_path / "c.sck").read_bytes()
    (tmp_path / "trunc.sck").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc.sck")
    flipped = bytearray(raw)
    flipped[-20] ^= 0xFF
    (tmp_path / "flip.sck").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "flip.sck")
    versioned = bytearray(raw)
    versioned[4] = 99
    (tmp_path / "ver.sck").write_bytes(bytes(versioned))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ver.sck")
    with pytest.raises(CheckpointError, match="L=10"):
        load_checkpoint(tmp_path / "c.sck", expected_L=16)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.sck")


def test_unconditional_sample_requires_positive_n():
    with pytest.raises(ValueError):
        unconditional_sample(_small_ckpt(), 0)


def test_unconditional_sample_adds_prior_mean():
    ck = _small_ckpt()
    ck.weights[:] = 0
    from mpsmra.mps import MpsConfig

    out = unconditional_sample(ck, 3, MpsConfig(dt=0.5), np.random.default_rng(8))
    assert out.shape == (3, 10)
    # zero score: output is pure diffusion noise around the stored mean, so the
    # mean over many chains approaches the stored prior mean
    many = unconditional_sample(ck, 4000, MpsConfig(dt=0.5), np.random.default_rng(9))
    sd = math.sqrt(9.0 + 8.0) / math.sqrt(4000)
    assert np.all(np.abs(many.mean(axis=0) - ck.prior_mean) < 4 * sd)
