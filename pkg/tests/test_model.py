import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentmatch.autodiff import ShapeError, Tape
from latentmatch.model import (
    BnState,
    Hyperparams,
    UntrainedModelError,
    ae_forward,
    ae_loss,
    critic_loss,
    critic_terms,
    decode,
    encode,
    generate,
    hinge_disc_loss,
    latent_bn,
    latent_disc_loss,
    latent_gen_loss,
    make_interpolants,
    reconstruct,
)
from latentmatch.nn import Layer, Mlp, mlp_apply

from conftest import constant_net, linear, small_bundle, with_nets

B = 6


def hinge(real, fake) -> float:
    tape = Tape(np.float64)
    col = lambda v: tape.constant(np.asarray(v, dtype=np.float64)[:, None])  # noqa: E731
    return hinge_disc_loss(col(real), col(fake)).item()


# --------------------------------------------------------------------------
# critic objective


def test_critic_loss_zero_at_exact_targets():
    # linear critic d(x) = x on 1-D data: choose inputs hitting every target
    b = with_nets(small_bundle(data_dim=1), critic=linear([[1.0]]))
    lam, gamma = b.hp.lam, b.hp.gamma
    mu = np.linspace(0, 0.5, B)
    x = np.zeros((B, 1))
    x_hat = np.full((B, 1), lam / (1 - gamma))
    x_mu = (mu + lam)[:, None]
    assert critic_loss(x, x_hat, x_mu, mu, b, Tape(np.float64)).item() == pytest.approx(0, abs=1e-15)


def test_critic_loss_hand_value():
    b = with_nets(small_bundle(data_dim=1, lam=0.2), critic=constant_net(1, 0.0))
    x = np.random.default_rng(0).standard_normal((B, 1))
    mu = np.full(B, 0.3)
    terms = critic_terms(x, x, x, mu, b, Tape(np.float64))
    np.testing.assert_allclose([t.item() for t in terms], [0.0, 0.04, 0.25], atol=1e-12)
    assert critic_loss(x, x, x, mu, b, Tape(np.float64)).item() == pytest.approx(0.29, abs=1e-12)


def test_gamma_one_ignores_reconstruction(rng):
    b = small_bundle(data_dim=3, gamma=1.0)
    x = rng.standard_normal((B, 3))
    mu = rng.uniform(0, 0.5, B)
    _, mix_a, _ = critic_terms(x, rng.standard_normal((B, 3)), x, mu, b, Tape(np.float64))
    _, mix_b, _ = critic_terms(x, rng.standard_normal((B, 3)), x, mu, b, Tape(np.float64))
    expected = np.mean((mlp_apply(b.critic, x, np.float64) - b.hp.lam) ** 2)
    assert mix_a.item() == pytest.approx(expected, abs=1e-12)
    assert mix_b.item() == pytest.approx(expected, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_critic_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    b = small_bundle(seed=seed % 50)
    x, x_hat, x_mu = (rng.standard_normal((B, 3)) for _ in range(3))
    assert critic_loss(x, x_hat, x_mu, rng.uniform(0, 0.5, B), b, Tape(np.float64)).item() >= 0


def test_critic_input_shapes_checked(rng):
    b = small_bundle()
    with pytest.raises(ShapeError):
        critic_loss(np.zeros((B, 3)), np.zeros((B, 2)), np.zeros((B, 3)), np.zeros(B), b)
    with pytest.raises(ShapeError):
        critic_loss(np.zeros((B, 3)), np.zeros((B, 3)), np.zeros((B, 3)), np.zeros(B + 1), b)


# --------------------------------------------------------------------------
# autoencoder objective


def perfect_autoencoder(x, **hp):
    """E = identity, G undoes this batch's normalization, d = 0."""
    x = np.asarray(x, dtype=np.float64)
    base = small_bundle(data_dim=x.shape[1], **hp)
    m, v = x.mean(axis=0), x.var(axis=0)
    enc = linear(np.eye(x.shape[1]))
    dec = Mlp([Layer(np.diag(np.sqrt(v + base.hp.bn_eps)), m.copy(), "identity")])
    return with_nets(base, encoder=enc, decoder=dec, critic=constant_net(x.shape[1], 0.0))


def test_perfect_autoencoder_has_zero_loss(rng):
    x = rng.standard_normal((B, 2))
    b = perfect_autoencoder(x)
    mu = rng.uniform(0, 0.5, B)
    assert ae_loss(x, mu, b, Tape(np.float64)).item() == pytest.approx(0, abs=1e-12)


def test_ae_loss_without_regularizers_is_mse(rng):
    b = small_bundle(omega1=0.0, omega2=0.0)
    x = rng.standard_normal((B, 3))
    mu = rng.uniform(0, 0.5, B)
    fwd = ae_forward(x, mu, b, Tape(np.float64))
    assert fwd.loss.item() == fwd.mse.item()
    np.testing.assert_allclose(fwd.mse.item(), np.mean((x - fwd.x_hat.data) ** 2), rtol=1e-12)


def test_ae_loss_with_constant_critic(rng):
    c = 0.7
    base = small_bundle(omega1=0.3, omega2=0.5)
    b = with_nets(base, critic=constant_net(3, c))
    x = rng.standard_normal((B, 3))
    mu = rng.uniform(0, 0.5, B)
    fwd = ae_forward(x, mu, b, Tape(np.float64))
    assert fwd.loss.item() == pytest.approx(fwd.mse.item() + (0.3 + 0.5) * c**2, abs=1e-12)


def test_mu_out_of_range_rejected():
    b = small_bundle()
    with pytest.raises(ValueError):
        ae_loss(np.zeros((B, 3)), np.full(B, 0.6), b)
    with pytest.raises(ValueError):
        make_interpolants(np.zeros((B, 3)), np.zeros((B, 3)), b, np.full(B, -0.1))


# --------------------------------------------------------------------------
# latent adversarial losses


def test_hinge_saturated_fixture():
    assert hinge([1, 1, 1], [-1, -1, -1]) == 0.0


def test_hinge_zero_scores():
    assert hinge([0, 0], [0, 0]) == 2.0


def test_hinge_hand_value():
    assert hinge([0.5, 2.0], [-2.0, 0.3]) == pytest.approx(0.9, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 5, elements=st.floats(-10, 10)),
    arrays(np.float64, 5, elements=st.floats(-10, 10)),
)
def test_hinge_non_negative(real, fake):
    assert hinge(real, fake) >= 0


@pytest.mark.parametrize("c", [0.0, 5.0])
def test_generator_loss_constant_disc(c, rng):
    b = with_nets(small_bundle(), latent_disc=constant_net(2, c))
    assert latent_gen_loss(rng.standard_normal((B, 2)), b, Tape(np.float64)).item() == -c


def test_generator_loss_is_negated_mean_score(rng):
    for seed in range(5):
        b = small_bundle(seed=seed)
        z = rng.standard_normal((B, 2))
        fake = mlp_apply(b.latent_gen, z, np.float64)
        expected = -np.mean(mlp_apply(b.latent_disc, fake, np.float64))
        assert latent_gen_loss(z, b, Tape(np.float64)).item() == pytest.approx(expected, abs=1e-12)


def test_latent_disc_loss_uses_running_statistics(rng):
    b = small_bundle()
    x = rng.standard_normal((B, 3))
    b.bn.running_mean[:] = [0.1, -0.2]
    b.bn.running_var[:] = [2.0, 0.5]
    before = b.bn.copy()
    latent_disc_loss(x, rng.standard_normal((B, 2)), b, Tape(np.float64))
    assert np.array_equal(before.running_mean, b.bn.running_mean)
    assert before.updates == b.bn.updates


# --------------------------------------------------------------------------
# latent batch normalization


def test_bn_hand_example():
    state = BnState.fresh(1, eps=0.0)
    out = latent_bn(Tape(np.float64).constant([[1.0], [3.0]]), state)
    np.testing.assert_allclose(out.data, [[-1.0], [1.0]])


def test_bn_on_normalized_batch():
    z = np.array([[-1.0, 1.0], [1.0, -1.0]])
    state = BnState.fresh(2, eps=1e-5)
    out = latent_bn(Tape(np.float64).constant(z), state)
    np.testing.assert_allclose(out.data, z / np.sqrt(1 + 1e-5), rtol=1e-15)
    np.testing.assert_allclose(out.data, z, atol=1e-5)


def test_bn_running_statistics_update():
    state = BnState.fresh(1, momentum=0.99)
    latent_bn(Tape(np.float64).constant([[1.0], [3.0]]), state)
    np.testing.assert_allclose(state.running_mean, [0.99 * 0 + 0.01 * 2])
    np.testing.assert_allclose(state.running_var, [0.99 * 1 + 0.01 * 1])
    assert state.updates == 1


def test_bn_needs_two_rows():
    with pytest.raises(ShapeError):
        latent_bn(Tape().constant(np.ones((1, 2))), BnState.fresh(2))


@settings(max_examples=60, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.floats(0.75, 10.0),
    st.floats(-50, 50),
    st.sampled_from([np.float32, np.float64]),
)
def test_bn_output_moments(seed, spread, shift, dtype):
    # the output variance is exactly v / (v + eps); it sits within 1e-5 of
    # 1 / (1 + eps) whenever the batch variance v is at least 1/2
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((256, 2))
    z = shift + (z - z.mean(axis=0)) / z.std(axis=0) * spread  # batch std exactly spread
    eps = 1e-5
    out = latent_bn(Tape(dtype).constant(z), BnState.fresh(2, eps=eps)).data.astype(np.float64)
    m = out.mean(axis=0)
    v_out = np.mean((out - m) ** 2, axis=0)
    v_in = np.asarray(z, dtype=dtype).astype(np.float64).var(axis=0)
    assert np.all(np.abs(m) < 1e-6)
    assert np.all(np.abs(v_out - 1 / (1 + eps)) < 1e-5)
    np.testing.assert_allclose(v_out, v_in / (v_in + eps), rtol=1e-6)


# --------------------------------------------------------------------------
# interpolants


def test_interpolant_endpoint_is_reconstruction(rng):
    b = small_bundle()
    x1, x2 = rng.standard_normal((B, 3)), rng.standard_normal((B, 3))
    x_mu = make_interpolants(x1, x2, b, np.zeros(B), Tape(np.float64), training=False)
    np.testing.assert_allclose(x_mu.data, reconstruct(x2, b, np.float64), atol=1e-14)


def test_interpolant_of_equal_endpoints(rng):
    b = small_bundle()
    x = rng.standard_normal((B, 3))
    x_mu = make_interpolants(x, x, b, np.full(B, 0.5), Tape(np.float64), training=True)
    tape = Tape(np.float64)
    recon = decode(b, encode(b, tape.constant(x), training=True))
    np.testing.assert_allclose(x_mu.data, recon.data, atol=1e-14)


def test_interpolant_latent_is_affine_combination(rng):
    b = small_bundle()
    x1, x2 = rng.standard_normal((B, 3)), rng.standard_normal((B, 3))
    mu = rng.uniform(0, 0.5, B)
    tape = Tape(np.float64)
    z1 = encode(b, tape.constant(x1), training=False).data
    z2 = encode(b, tape.constant(x2), training=False).data
    mixed = mu[:, None] * z1 + (1 - mu[:, None]) * z2
    expected = decode(b, tape.constant(mixed)).data
    got = make_interpolants(x1, x2, b, mu, Tape(np.float64), training=False).data
    np.testing.assert_allclose(got, expected, atol=1e-14)


# --------------------------------------------------------------------------
# generation and reconstruction


def test_generate_requires_trained_bn():
    with pytest.raises(UntrainedModelError, match="stage A"):
        generate(4, small_bundle(), seed=0)


def test_generate_determinism_and_empty():
    b = small_bundle()
    b.bn.updates = 1
    assert np.array_equal(generate(5, b, seed=3), generate(5, b, seed=3))
    assert generate(0, b, seed=3).shape == (0, 3)


def test_generate_uses_averaged_generator(rng):
    b = small_bundle()
    b.bn.updates = 1
    plain = generate(5, b, seed=1)
    b.latent_gen_avg = b.latent_gen.copy()
    for p in b.latent_gen_avg.parameters().values():
        p *= 0.5
    assert not np.array_equal(generate(5, b, seed=1), plain)


def test_constant_decoder_reconstructs_constant(rng):
    base = small_bundle()
    dec = Mlp([Layer(np.zeros((2, 3)), np.array([1.0, 2.0, 3.0]), "identity")])
    b = with_nets(base, decoder=dec)
    out = reconstruct(rng.standard_normal((10, 3)), b, np.float64)
    np.testing.assert_array_equal(out, np.tile([1.0, 2.0, 3.0], (10, 1)))


def test_reconstruct_shape_checked():
    with pytest.raises(ShapeError):
        reconstruct(np.zeros((4, 2)), small_bundle())
    assert reconstruct(np.zeros((0, 3)), small_bundle()).shape == (0, 3)


def test_hyperparams_validated():
    with pytest.raises(ValueError):
        Hyperparams(dz=0)
    with pytest.raises(ValueError):
        Hyperparams(lam=0.0)
    with pytest.raises(ValueError):
        Hyperparams(omega1=-1.0)
