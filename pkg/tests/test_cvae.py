import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multibackmap import tensor as T
from multibackmap.coarsen import CGMapping, apply_mapping_array
from multibackmap.core import Conformation, Ensemble, random_rotation
from multibackmap.cvae import (
    APPENDIX_LABELS,
    CvaeModel,
    LatentGaussian,
    StepHyperparams,
    batch_loss,
    decode,
    decode_tensor,
    encode,
    kl_divergence,
    prior,
    reconstruction_loss,
    reparameterize,
    sample_fine,
    step_elbo_loss,
)
from multibackmap.tensor import DiffTensor, gradient_check
from multibackmap.train import TrainConfig, fit_step_model

from conftest import chain_topology

HP = StepHyperparams(n_features=8, latent_dim=3, cg_cutoff=8.0, fg_cutoff=3.0, enc_depth=1, prior_depth=1, dec_depth=1)


def _toy(n=10, n_coarse=3, seed=0, hp=HP):
    top = chain_topology(n)
    a = np.repeat(np.arange(n_coarse), int(math.ceil(n / n_coarse)))[:n]
    m = CGMapping(a, np.ones(n), n_coarse)
    return top, m, CvaeModel.create(top, m, hp, seed=seed)


def _frame(n=10, seed=0):
    rng = np.random.default_rng(seed)
    steps = rng.normal(size=(n, 3))
    steps *= 1.5 / np.linalg.norm(steps, axis=1, keepdims=True)
    return np.cumsum(steps, axis=0)


def _randomize(model, scale=0.3, seed=1):
    """Give the zero-initialized heads nonzero values so outputs depend on everything."""
    rng = np.random.default_rng(seed)
    for k, p in model.params.items():
        if not np.any(p.values):
            p.values = rng.uniform(-scale, scale, size=p.shape)
    return model


def _rigid(x, seed):
    rng = np.random.default_rng(seed)
    return x @ random_rotation(rng).T + rng.normal(size=3) * 10


# ------------------------------------------------------------------ encoder/prior


def test_encode_rotation_invariant():
    top, m, model = _toy()
    _randomize(model)
    xf = _frame()
    xc = apply_mapping_array(xf, m)
    q1 = encode(xf, xc, m, model)
    R, t = random_rotation(np.random.default_rng(5)), np.array([1.0, -2.0, 3.0])
    q2 = encode(xf @ R.T + t, xc @ R.T + t, m, model)
    np.testing.assert_allclose(q1.mean.values, q2.mean.values, atol=1e-6)
    np.testing.assert_allclose(q1.log_var.values, q2.log_var.values, atol=1e-6)


def test_encode_wrong_mapping():
    top, m, model = _toy()
    bad = CGMapping(np.array([0, 0, 1, 1, 2, 2, 2, 2, 2]), np.ones(9), 3)
    with pytest.raises(ValueError, match="level mismatch"):
        encode(_frame(9), np.zeros((3, 3)), bad, model)


# frozen after the gradient checks below passed
ENCODE_SNAPSHOT = [-0.12438541, -0.27264825, -0.15658717, 0.48499868, 0.60120551, 0.73211872]
PRIOR_SNAPSHOT = [
    -0.10812013, -0.16877304, -0.15235763, -0.21895639, -0.14109176,
    0.28299374, 0.31270388, 0.25849571, 0.28697504, 0.24555338,
]


def test_encode_snapshot():
    top, m, model = _toy(seed=42)
    xf = _frame(seed=7)
    q = encode(xf, apply_mapping_array(xf, m), m, model)
    got = np.round(np.concatenate([q.mean.values[:, 0], q.log_var.values[:, 0]]), 8)
    np.testing.assert_allclose(got, ENCODE_SNAPSHOT, atol=1e-7)


def test_prior_snapshot():
    top, m, model = _toy(n=10, n_coarse=5, seed=42)
    xc = apply_mapping_array(_frame(seed=8), m)
    p = prior(xc, model)
    got = np.round(np.concatenate([p.mean.values[:, 0], p.log_var.values[:, 0]]), 8)
    np.testing.assert_allclose(got, PRIOR_SNAPSHOT, atol=1e-7)


def test_prior_rotation_invariant():
    top, m, model = _toy()
    _randomize(model)
    xc = apply_mapping_array(_frame(), m)
    a, b = prior(xc, model), prior(_rigid(xc, 3), model)
    np.testing.assert_allclose(a.mean.values, b.mean.values, atol=1e-6)
    np.testing.assert_allclose(a.log_var.values, b.log_var.values, atol=1e-6)


def test_prior_single_bead():
    top = chain_topology(4)
    m = CGMapping(np.zeros(4, dtype=int), np.ones(4), 1)
    model = CvaeModel.create(top, m, HP)
    p = prior(Conformation(np.array([[1.0, 2.0, 3.0]]), 1), model)
    assert p.shape == (1, HP.latent_dim)
    assert np.all(np.isfinite(p.mean.values)) and np.all(np.isfinite(p.log_var.values))


# ---------------------------------------------------------------- reparameterize


def test_reparameterize_zero_variance():
    d = LatentGaussian(np.full((2, 3), 0.7), np.full((2, 3), -1e6))
    z = reparameterize(d, seed=1)
    np.testing.assert_allclose(z.values, 0.7, atol=1e-4)


def test_reparameterize_monte_carlo_mean():
    d = LatentGaussian(np.zeros((10_000, 1)), np.zeros((10_000, 1)))
    z = reparameterize(d, seed=3).values
    assert abs(z.mean()) < 4 / math.sqrt(10_000)


def test_reparameterize_deterministic_and_differentiable():
    mean = DiffTensor(np.ones((2, 2)), requires_grad=True)
    lv = DiffTensor(np.zeros((2, 2)), requires_grad=True)
    d = LatentGaussian(mean, lv)
    z1, z2 = reparameterize(d, 9, 4), reparameterize(d, 9, 4)
    np.testing.assert_array_equal(z1.values, z2.values)
    assert not np.array_equal(z1.values, reparameterize(d, 9, 5).values)
    T.backward(T.tsum(z1))
    np.testing.assert_allclose(mean.grad, 1.0)
    assert lv.grad is not None


# ------------------------------------------------------------------------ decoder


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_decode_equivariant(seed):
    top, m, model = _toy()
    _randomize(model, seed=seed)
    xc = apply_mapping_array(_frame(seed=seed), m)
    z = np.random.default_rng(seed).normal(size=(3, HP.latent_dim))
    rng = np.random.default_rng(seed + 1)
    R, t = random_rotation(rng), rng.normal(size=3) * 10
    lhs = decode(xc @ R.T + t, z, m, model).coords
    rhs = decode(xc, z, m, model).coords @ R.T + t
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_decode_single_bead_at_bead_position():
    top = chain_topology(4)
    m = CGMapping(np.zeros(4, dtype=int), np.ones(4), 1)
    model = CvaeModel.create(top, m, HP)
    out = decode(np.array([[1.0, -2.0, 0.5]]), np.zeros((1, HP.latent_dim)), m, model)
    np.testing.assert_allclose(out.coords, np.tile([1.0, -2.0, 0.5], (4, 1)))
    assert out.level == 0


def test_decode_dimension_mismatch():
    top, m, model = _toy()
    with pytest.raises(ValueError):
        decode(np.zeros((3, 3)), np.zeros((2, HP.latent_dim)), m, model)
    with pytest.raises(ValueError, match="level mismatch"):
        decode(np.zeros((4, 3)), np.zeros((4, HP.latent_dim)), m, model)


def test_training_beats_untrained_on_rigid_fragment():
    top = chain_topology(4)
    m = CGMapping(np.array([0, 0, 1, 1]), np.ones(4), 2)
    base = np.array([[0.0, 0, 0], [1.5, 0, 0], [2.0, 1.4, 0], [3.4, 1.6, 0.6]])
    frames = np.stack([_rigid(base, s) for s in range(20)])
    ens = Ensemble.from_array(top, frames)
    hp = StepHyperparams(n_features=8, latent_dim=2, cg_cutoff=6.0, fg_cutoff=3.0, beta=0.001)
    model = CvaeModel.create(top, m, hp, seed=0)
    xc = apply_mapping_array(frames, m)

    def err(mod):
        out = sample_fine(mod, xc, list(range(20)), seed=0)
        return np.sqrt(((out - frames) ** 2).sum(-1).mean())

    before = err(model)
    fit_step_model(ens.subset(range(16)), ens.subset(range(16, 20)), m, model, TrainConfig(epochs=30, batch_size=4, learning_rate=5e-3))
    assert err(model) < before


# ----------------------------------------------------------------------------- KL


def _gauss(mu, var):
    return LatentGaussian(np.array([[mu]]), np.array([[math.log(var)]]))


def test_kl_examples():
    assert float(kl_divergence(_gauss(0.3, 2.0), _gauss(0.3, 2.0)).values) == 0.0
    assert float(kl_divergence(_gauss(1.0, 1.0), _gauss(0.0, 1.0)).values) == pytest.approx(0.5, abs=1e-12)
    expect = 0.5 * (4 + 0 - 1 - math.log(4))
    assert float(kl_divergence(_gauss(0.0, 4.0), _gauss(0.0, 1.0)).values) == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(0.8069, abs=1e-4)


def test_kl_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        kl_divergence(LatentGaussian(np.zeros((2, 1)), np.zeros((2, 1))), LatentGaussian(np.zeros((3, 1)), np.zeros((3, 1))))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    q = LatentGaussian(rng.normal(size=(3, 4)), rng.uniform(-3, 3, size=(3, 4)))
    p = LatentGaussian(rng.normal(size=(3, 4)), rng.uniform(-3, 3, size=(3, 4)))
    assert float(kl_divergence(q, p).values) >= 0.0


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_kl_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    mq, mp = rng.normal(size=2), rng.normal(size=2)
    lq, lp = rng.uniform(-1, 1, size=2), rng.uniform(-1, 1, size=2)
    closed = float(kl_divergence(LatentGaussian(mq[None], lq[None]), LatentGaussian(mp[None], lp[None])).values)
    n = 100_000
    z = mq + np.exp(lq / 2) * rng.standard_normal((n, 2))

    def logpdf(z, m, lv):
        return (-0.5 * (np.log(2 * np.pi) + lv + (z - m) ** 2 / np.exp(lv))).sum(-1)

    samples = logpdf(z, mq, lq) - logpdf(z, mp, lp)
    se = samples.std() / math.sqrt(n)
    assert abs(samples.mean() - closed) <= 3 * se + 1e-12


# ------------------------------------------------------------------ reconstruction


def test_recon_identical_is_zero():
    x = _frame()
    assert float(reconstruction_loss(x, x, chain_topology(10).bond_array(), 3.0).values) == 0.0


def test_recon_translation():
    x = _frame()
    val = float(reconstruction_loss(x, x + [3.0, 4.0, 0.0], chain_topology(10).bond_array(), 0.0).values)
    assert val == pytest.approx(25.0, abs=1e-12)


def test_recon_stretched_bond():
    # 11 colinear atoms, 10 bonds; move the tail so only bond (4, 5) stretches
    x = np.zeros((11, 3))
    x[:, 0] = 1.5 * np.arange(11)
    x_hat = x.copy()
    x_hat[5:, 0] += 0.5
    bonds = np.array([[i, i + 1] for i in range(10)])
    msd = 6 * 0.25 / 11
    got = float(reconstruction_loss(x, x_hat, bonds, 2.0).values)
    assert got == pytest.approx(msd + 2 * 0.25 / 10, abs=1e-12)


def test_recon_count_mismatch():
    with pytest.raises(ValueError, match="count mismatch"):
        reconstruction_loss(np.zeros((3, 3)), np.zeros((4, 3)), np.zeros((0, 2)), 1.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), gamma=st.floats(0, 10))
def test_recon_nonnegative(seed, gamma):
    rng = np.random.default_rng(seed)
    assert float(reconstruction_loss(rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), chain_topology(6).bond_array(), gamma).values) >= 0.0


# ------------------------------------------------------------------------ ELBO


def test_beta_zero_is_reconstruction_only():
    top, m, model = _toy()
    _randomize(model)
    xf = _frame()
    loss, comps = step_elbo_loss(xf, apply_mapping_array(xf, m), m, model, beta=0.0, gamma=1.0, seed=0)
    assert float(loss.values) == pytest.approx(comps["recon"], abs=1e-12)
    assert comps["kl"] > 0


def test_loss_recomposes_from_components():
    top, m, model = _toy(seed=5)
    _randomize(model, seed=6)
    xf = _frame(seed=2)
    xc = apply_mapping_array(xf, m)
    beta, gamma, seed, key = 0.3, 2.0, 11, 4
    loss, _ = step_elbo_loss(xf, xc, m, model, beta, gamma, seed, key)
    q = encode(xf, xc, m, model)
    z = reparameterize(q, seed, key)
    x_hat = decode_tensor(xc, z, m, model)
    recon = reconstruction_loss(xf, x_hat, top.bond_array(), gamma)
    kl = kl_divergence(q, prior(xc, model))
    assert float(loss.values) == pytest.approx(float(recon.values) + beta * float(kl.values), abs=1e-10)


def test_loss_rigid_motion_invariant():
    top, m, model = _toy()
    _randomize(model)
    xf = _frame()
    moved = _rigid(xf, 8)
    a, _ = step_elbo_loss(xf, apply_mapping_array(xf, m), m, model, 0.1, 1.0, 0)
    b, _ = step_elbo_loss(moved, apply_mapping_array(moved, m), m, model, 0.1, 1.0, 0)
    assert abs(float(a.values) - float(b.values)) <= 1e-6


def test_loss_gradient_wrt_coordinates():
    top, m, model = _toy()
    _randomize(model, scale=0.2)
    xf = DiffTensor(_frame())
    assert gradient_check(lambda t: step_elbo_loss(t, None, m, model, 0.1, 1.0, 0)[0], xf) <= 1e-4


@pytest.mark.parametrize("name", ["enc.mean.w", "prior.logvar.b", "dec.coef.w", "dec.ref0.x.w", "enc.fine0.filter1.w", "dec.cg0.transform.w"])
def test_loss_gradient_wrt_parameters(name):
    top, m, model = _toy()
    _randomize(model, scale=0.2)
    xf = _frame()
    xc = apply_mapping_array(xf, m)
    p = model.params[name]
    original = p.values.copy()

    def loss_value():
        return step_elbo_loss(xf, xc, m, model, 0.1, 1.0, 0)[0]

    model.params.zero_grad()
    T.backward(loss_value())
    analytic = p.grad.copy()
    eps = 1e-5
    numeric = np.zeros_like(original)
    for k in range(original.size):
        shifted = original.copy()
        shifted.flat[k] += eps
        p.values = shifted
        plus = float(loss_value().values)
        shifted.flat[k] -= 2 * eps
        p.values = shifted
        minus = float(loss_value().values)
        numeric.flat[k] = (plus - minus) / (2 * eps)
    p.values = original
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    assert rel.max() <= 1e-4


def test_batch_loss_is_mean_of_frame_losses():
    top, m, model = _toy()
    _randomize(model)
    xf = np.stack([_frame(seed=s) for s in range(3)])
    xc = apply_mapping_array(xf, m)
    parts = batch_loss(model, xf, xc, [5, 6, 7], seed=2)
    single = [float(step_elbo_loss(xf[i], xc[i], m, model, HP.beta, HP.gamma, 2, 5 + i)[0].values) for i in range(3)]
    assert float(parts.loss.values) == pytest.approx(np.mean(single), abs=1e-10)


# -------------------------------------------------------------- config / checkpoints


def test_beta_from_table_accepted():
    hp = StepHyperparams.from_dict({"Regularization strength β": 0.002, "Factor": 0.210})
    assert hp.beta == 0.002 and hp.factor == 0.210


def test_hyperparameter_validation():
    with pytest.raises(ValueError):
        StepHyperparams(factor=1.5)
    with pytest.raises(ValueError, match="unknown"):
        StepHyperparams.from_dict({"dropout": 0.1})
    assert set(APPENDIX_LABELS.values()) <= set(StepHyperparams().to_dict())


def test_model_checkpoint_roundtrip(tmp_path):
    top, m, model = _toy()
    _randomize(model)
    model.save(tmp_path / "m.npz")
    back = CvaeModel.load(tmp_path / "m.npz")
    assert back.params.checksum() == model.params.checksum()
    assert back.hp == model.hp
    xc = apply_mapping_array(_frame(), m)
    np.testing.assert_array_equal(sample_fine(back, xc, [0], 1), sample_fine(model, xc, [0], 1))


def test_sampling_reproducible_per_key():
    top, m, model = _toy()
    _randomize(model)
    xc = np.stack([apply_mapping_array(_frame(seed=s), m) for s in range(2)])
    a = sample_fine(model, xc, [0, 1], seed=4)
    b = sample_fine(model, xc[1:], [1], seed=4)
    np.testing.assert_allclose(a[1], b[0], atol=1e-12)
