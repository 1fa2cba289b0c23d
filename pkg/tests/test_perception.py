from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from oracles import finite_difference_check, relu_margin
from scipy import integrate, stats

from wpnav.environment import Pose, Sensors, SensorConfig
from wpnav.errors import (EmptyInput, InsufficientFreeSpace, MalformedInput, NonFiniteInput,
                          ShapeMismatch, UntrainedEncoder)
from wpnav.grid import OccupancyGrid
from wpnav.nncore import Parameter
from wpnav.perception import (MEAN_MU, SAMPLE_Z, SweepDataset, TwinVae, VaeBranch, collect_dataset,
                              dataset_inputs, kl_divergence, mean_loss, reparameterize,
                              train_twin_vae, train_vae, vae_loss)

CORRIDOR_ITERS = 5000


def kl_quadrature(mu, logvar):
    """KL(N(mu, diag exp(logvar)) || N(0, I)) by integrating each factor numerically."""
    total = 0.0
    for m, lv in zip(mu, logvar):
        s = math.exp(0.5 * lv)
        p = stats.norm(m, s)

        def integrand(x):
            return p.pdf(x) * (p.logpdf(x) - stats.norm.logpdf(x))

        val, _ = integrate.quad(integrand, m - 40 * s, m + 40 * s, epsabs=1e-13, epsrel=1e-12, limit=200)
        total += val
    return total


# -- dataset --------------------------------------------------------------------

def test_collect_hundred_poses(rooms_map):
    ds = collect_dataset(rooms_map, 100, np.random.default_rng(0))
    assert len(ds) == 3600
    assert ds.depth.min() > 0.0 and ds.depth.max() <= 1.0
    assert set(np.unique(ds.patch)) <= {0, 1}


def test_collect_is_deterministic(corridor_map):
    a = collect_dataset(corridor_map, 20, np.random.default_rng(7)).to_bytes()
    b = collect_dataset(corridor_map, 20, np.random.default_rng(7)).to_bytes()
    assert a == b


def test_collect_sweeps_all_headings(corridor_map):
    sensors = Sensors()
    ds = collect_dataset(corridor_map, 3, np.random.default_rng(1), sensors)
    depth = ds.depth.reshape(3, 36, -1)
    assert not np.allclose(depth[:, 0], depth[:, 18])


def test_collect_needs_free_cells():
    cells = np.ones((4, 4), dtype=bool)
    cells[1, 1] = False
    g = OccupancyGrid(cells, inflation_radius=0.0)
    with pytest.raises(InsufficientFreeSpace):
        collect_dataset(g, 2, np.random.default_rng(0))


def test_dataset_round_trip(corridor_map):
    ds = collect_dataset(corridor_map, 4, np.random.default_rng(2))
    back = SweepDataset.from_bytes(ds.to_bytes())
    assert np.array_equal(back.depth, ds.depth)
    assert np.array_equal(back.patch, ds.patch)
    assert back.max_range == ds.max_range
    with pytest.raises(MalformedInput):
        SweepDataset.from_bytes(ds.to_bytes()[:-3])
    with pytest.raises(MalformedInput):
        SweepDataset.from_bytes(b"XXXX" + ds.to_bytes()[4:])


# -- KL -------------------------------------------------------------------------

def test_kl_examples():
    assert kl_divergence(np.zeros(4), np.zeros(4)).item() == 0.0
    assert kl_divergence(np.array([1.0]), np.array([0.0])).item() == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_quadrature():
    rng = np.random.default_rng(3)
    for _ in range(5):
        mu = rng.normal(0, 1.5, 8)
        logvar = rng.normal(0, 1.0, 8)
        assert kl_divergence(mu, logvar).item() == pytest.approx(kl_quadrature(mu, logvar), abs=1e-6)


@given(arrays(np.float64, 6, elements=st.floats(-20, 20)), arrays(np.float64, 6, elements=st.floats(-20, 20)))
@example(np.zeros(6), np.full(6, 1e-86))  # exp(lv) - 1 - lv cancels below zero
def test_kl_nonnegative(mu, logvar):
    assert kl_divergence(mu, logvar).item() >= 0.0


@given(st.integers(0, 5), st.floats(1e-3, 5.0), st.booleans())
def test_kl_zero_only_at_standard_normal(i, size, which):
    mu, logvar = np.zeros(6), np.zeros(6)
    (mu if which else logvar)[i] = size
    assert kl_divergence(mu, logvar).item() > 1e-12


def test_kl_rejects_bad_input():
    with pytest.raises(NonFiniteInput):
        kl_divergence(np.array([np.nan]), np.array([0.0]))
    with pytest.raises(ShapeMismatch):
        kl_divergence(np.zeros(2), np.zeros(3))


# -- reparameterize ---------------------------------------------------------------

def test_reparameterize_examples():
    mu = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(reparameterize(mu, np.array([1.0, -2.0, 0.5]), np.zeros(3)).data, mu)
    n = np.array([0.5, 0.1, -0.7])
    assert np.allclose(reparameterize(mu, np.zeros(3), n).data, mu + n, atol=1e-15)
    with pytest.raises(ShapeMismatch):
        reparameterize(mu, np.zeros(2), n)


def test_reparameterize_moments():
    N = 100_000
    mu = np.array([0.5, -2.0, 0.0, 3.0])
    logvar = np.array([0.0, -1.0, 1.5, 0.3])
    noise = np.random.default_rng(11).standard_normal((N, 4))
    z = reparameterize(np.broadcast_to(mu, (N, 4)), np.broadcast_to(logvar, (N, 4)), noise).data
    sigma = np.exp(0.5 * logvar)
    assert np.all(np.abs(z.mean(axis=0) - mu) < 3 * sigma / math.sqrt(N))
    assert np.all(np.abs(z.var(axis=0) / np.exp(logvar) - 1.0) < 0.05)


def test_reparameterize_is_differentiable():
    mu = Parameter(np.array([0.2, -0.4]))
    lv = Parameter(np.array([0.1, 0.3]))
    noise = np.array([1.5, -0.5])
    reparameterize(mu, lv, noise).sum().backward()
    assert np.allclose(mu.grad, 1.0)
    assert np.allclose(lv.grad, 0.5 * np.exp(0.5 * lv.data) * noise)


# -- loss ------------------------------------------------------------------------

def test_vae_loss_examples():
    x = np.array([0.2, 0.4, 0.9])
    assert vae_loss(x, x.copy(), np.zeros(2), np.zeros(2)).item() == 0.0
    r = x.copy()
    r[1] += 1.0
    assert vae_loss(x, r, np.zeros(2), np.zeros(2)).item() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ShapeMismatch):
        vae_loss(x, r[:2], np.zeros(2), np.zeros(2))


def test_vae_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    branch = VaeBranch(6, 3, rng, "t", hidden=(8, 5))
    x = rng.random((4, 6))
    noise = rng.standard_normal((4, 3))
    # keep every ReLU input well away from its kink so differences are smooth
    m_enc, stats_out = relu_margin(branch.encoder.layers, x)
    z = stats_out[:, :3] + np.exp(0.5 * stats_out[:, 3:]) * noise
    m_dec, _ = relu_margin(branch.decoder.layers, z)
    assert min(m_enc, m_dec) > 1e-3
    params = branch.parameters()
    branch.zero_grad()
    branch.loss(x, noise, beta=0.7).backward()
    err = finite_difference_check(lambda: branch.loss(x, noise, beta=0.7).item(), params)
    assert err <= 1e-4


def test_branch_shapes_and_output_range():
    rng = np.random.default_rng(0)
    b = VaeBranch(20, 4, rng, "t")
    x = rng.random((5, 20))
    mu, logvar = b.encode_stats(x)
    assert mu.shape == logvar.shape == (5, 4)
    assert b.encoder.layers[-1].weight.shape[1] == 8
    recon, _, _ = b(x, np.zeros((5, 4)))
    assert recon.shape == (5, 20)
    assert np.all((recon.data > 0) & (recon.data < 1))


# -- training ---------------------------------------------------------------------

def test_constant_dataset_is_memorized():
    rng = np.random.default_rng(0)
    sample = rng.random(12)
    data = np.tile(sample, (32, 1))
    branch = VaeBranch(12, 2, np.random.default_rng(1), "t", hidden=(32, 16))
    train_vae(data, branch, np.random.default_rng(2), batch=16, iterations=1500, lr=3e-3)
    with np.errstate(all="raise"):
        mu, logvar = branch.encode_stats(data[:1])
        recon = branch.decoder(mu).data
    assert float(np.sum((recon - data[:1]) ** 2)) < 1e-3
    assert np.isfinite(kl_divergence(mu.data, logvar.data).item())


def test_train_vae_rejects_empty():
    branch = VaeBranch(4, 2, np.random.default_rng(0), "t")
    with pytest.raises(EmptyInput):
        train_vae(np.empty((0, 4)), branch, np.random.default_rng(0))


@pytest.fixture(scope="session")
def corridor_training(corridor_map):
    ds = collect_dataset(corridor_map, 200, np.random.default_rng(0))
    untrained = TwinVae(seed=0)
    vae = TwinVae(seed=0)
    curves = train_twin_vae(ds, vae, seed=0, iterations=CORRIDOR_ITERS)
    return SimpleNamespace(dataset=ds, untrained=untrained, vae=vae, curves=curves)


@pytest.mark.parametrize("branch", ["depth", "patch"])
def test_corridor_loss_moving_average_non_increasing(corridor_training, branch):
    curve = np.asarray(corridor_training.curves[branch])
    ma = np.convolve(curve, np.ones(100) / 100, mode="valid")
    rises = np.flatnonzero(np.diff(ma) > 0)
    assert rises.size == 0, (f"{rises.size} of {ma.size - 1} moving-average steps increase; "
                             f"first at iteration {rises[0] + 100}")


@pytest.mark.parametrize("branch", ["depth", "patch"])
def test_corridor_training_beats_untrained_fivefold(corridor_training, branch):
    depth_in, patch_in = dataset_inputs(corridor_training.dataset)
    data = depth_in if branch == "depth" else patch_in
    before = mean_loss(data, getattr(corridor_training.untrained, branch))
    after = mean_loss(data, getattr(corridor_training.vae, branch))
    assert after * 5.0 <= before, f"untrained {before:.3f}, trained {after:.3f}, ratio {before / after:.2f}"


# -- encoding --------------------------------------------------------------------

def obs_at(grid, x, y, k):
    s = Sensors()
    pose = Pose(x, y, k)
    return SimpleNamespace(depth_scan=s.depth(pose, grid), patch=s.patch(pose, grid))


def test_mean_mu_is_deterministic(corridor_map):
    vae = TwinVae(seed=3)
    vae.trained = True
    o = obs_at(corridor_map, 0.85, 0.55, 0)
    a, b = vae.encode(o, MEAN_MU), vae.encode(o, MEAN_MU)
    assert np.array_equal(a.vector(), b.vector())
    assert a.vector().shape == (32,) and np.all(np.isfinite(a.vector()))
    assert a.mode == MEAN_MU


def test_sample_z_is_seeded_and_centered_on_mu(corridor_map):
    vae = TwinVae(seed=3)
    vae.trained = True
    o = obs_at(corridor_map, 0.85, 0.55, 4)
    mu = vae.encode(o, MEAN_MU).vector()
    a = vae.encode(o, SAMPLE_Z, np.random.default_rng(0)).vector()
    b = vae.encode(o, SAMPLE_Z, np.random.default_rng(1)).vector()
    assert not np.array_equal(a, b)
    assert np.array_equal(a, vae.encode(o, SAMPLE_Z, np.random.default_rng(0)).vector())
    d, p = vae.normalize(np.tile(o.depth_scan, (10_000, 1)), np.tile(o.patch, (10_000, 1, 1)))
    draws = vae.encode_normalized(d, p, SAMPLE_Z, np.random.default_rng(2))
    assert np.linalg.norm(draws.mean(axis=0) - mu) <= 0.02 * np.linalg.norm(mu)


def test_untrained_encoder_refuses_unless_flagged(corridor_map):
    vae = TwinVae()
    o = obs_at(corridor_map, 0.85, 0.55, 0)
    with pytest.raises(UntrainedEncoder):
        vae.encode(o, MEAN_MU)
    assert vae.encode(o, MEAN_MU, allow_untrained=True).vector().shape == (32,)


def test_wide_latent_accepted(corridor_map):
    vae = TwinVae(n_z=128)
    vae.trained = True
    o = obs_at(corridor_map, 0.85, 0.55, 0)
    e = vae.encode(o, SAMPLE_Z, np.random.default_rng(0))
    assert e.z_depth.shape == e.z_patch.shape == (128,)
    assert vae.latent_dim == 256


def test_vae_checkpoint_round_trip():
    vae = TwinVae(SensorConfig(), n_z=8, hidden=(32, 16), seed=4)
    vae.trained = True
    back = TwinVae.from_bytes(vae.to_bytes())
    assert back.checksum() == vae.checksum()
    assert back.trained and back.n_z == 8 and back.hidden == (32, 16)
    assert set(vae.state_dict()) == {k for k in vae.state_dict() if k.startswith(("vae.depth.", "vae.patch."))}
