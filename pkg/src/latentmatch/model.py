"""Regularized autoencoder with latent batch norm, and the latent-mapping GAN.

Networks in a :class:`ModelBundle`:

* ``encoder`` E: data -> latent
* ``decoder`` G: normalized latent -> data
* ``critic`` d: data -> scalar, predicts the interpolation coefficient
* ``latent_gen`` g: prior sample -> normalized latent
* ``latent_disc`` D: normalized latent -> scalar hinge score

The latent path is ``x -> E(x) -> BN -> G``; BN has no learned scale or
shift.  Interpolants mix two normalized codes row by row,
``zhat_mu = mu * zhat_1 + (1 - mu) * zhat_2``, and decode the mixture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .data import sample_prior
from .nn import Mlp, init_mlp, mlp_forward


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class Hyperparams:
    lam: float = 0.2
    gamma: float = 0.2
    omega1: float = 0.5
    omega2: float = 0.5
    dz: int = 2
    batch_size: int = 256
    mu_max: float = 0.5
    use_bn: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99

    def __post_init__(self):
        if not 0 < self.lam < 1:
            raise ValueError(f"lambda must lie in (0, 1), got {self.lam}")
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.omega1 < 0 or self.omega2 < 0:
            raise ValueError("regularizer weights must be non-negative")
        if self.dz <= 0 or self.batch_size <= 0:
            raise ValueError("latent dimension and batch size must be positive")


@dataclass
class BnState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.99
    eps: float = 1e-5
    # number of batch-stat updates; 0 means the running statistics are unset
    updates: int = 0

    @classmethod
    def fresh(cls, dz, momentum=0.99, eps=1e-5, dtype=np.float32):
        return cls(np.zeros(dz, dtype=dtype), np.ones(dz, dtype=dtype), momentum, eps)

    def copy(self):
        return BnState(
            self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps, self.updates
        )


@dataclass
class ModelBundle:
    encoder: Mlp
    decoder: Mlp
    critic: Mlp
    latent_gen: Mlp
    latent_disc: Mlp
    bn: BnState
    hp: Hyperparams = field(default_factory=Hyperparams)
    # running average of g's weights; sampling uses it when present
    latent_gen_avg: Mlp | None = None

    def __post_init__(self):
        dz, dx = self.hp.dz, self.decoder.out_dim
        checks = {
            "encoder output": self.encoder.out_dim,
            "decoder input": self.decoder.in_dim,
            "latent_gen output": self.latent_gen.out_dim,
            "latent_disc input": self.latent_disc.in_dim,
        }
        for what, dim in checks.items():
            if dim != dz:
                raise ShapeError(f"{what} has dimension {dim}, latent dimension is {dz}")
        if self.latent_gen_avg is not None and self.latent_gen_avg.dims != self.latent_gen.dims:
            raise ShapeError("averaged latent generator must have the same layout as latent_gen")
        if self.encoder.in_dim != dx or self.critic.in_dim != dx:
            raise ShapeError(
                f"encoder input {self.encoder.in_dim} / critic input {self.critic.in_dim}"
                f" must equal data dimension {dx}"
            )

    @property
    def data_dim(self) -> int:
        return self.decoder.out_dim

    @property
    def sampler(self) -> Mlp:
        return self.latent_gen if self.latent_gen_avg is None else self.latent_gen_avg

    def networks(self) -> dict[str, Mlp]:
        return {
            "E": self.encoder,
            "G": self.decoder,
            "d": self.critic,
            "g": self.latent_gen,
            "D": self.latent_disc,
        }

    def copy(self) -> "ModelBundle":
        return ModelBundle(
            self.encoder.copy(),
            self.decoder.copy(),
            self.critic.copy(),
            self.latent_gen.copy(),
            self.latent_disc.copy(),
            self.bn.copy(),
            self.hp,
            None if self.latent_gen_avg is None else self.latent_gen_avg.copy(),
        )


def build_bundle(
    data_dim: int,
    hp: Hyperparams | None = None,
    width: int = 256,
    depth: int = 4,
    seed: int = 0,
    decoder_activation: str = "identity",
    dtype=np.float32,
) -> ModelBundle:
    """Fresh bundle of five ``depth``-layer leaky-ReLU MLPs."""
    hp = hp or Hyperparams()
    hidden = [width] * (depth - 1)

    def acts(last):
        return ["leaky_relu"] * (depth - 1) + [last]

    dz = hp.dz
    return ModelBundle(
        encoder=init_mlp([data_dim, *hidden, dz], acts("identity"), seed * 10 + 1, dtype),
        decoder=init_mlp([dz, *hidden, data_dim], acts(decoder_activation), seed * 10 + 2, dtype),
        critic=init_mlp([data_dim, *hidden, 1], acts("identity"), seed * 10 + 3, dtype),
        latent_gen=init_mlp([dz, *hidden, dz], acts("identity"), seed * 10 + 4, dtype),
        latent_disc=init_mlp([dz, *hidden, 1], acts("identity"), seed * 10 + 5, dtype),
        bn=BnState.fresh(dz, hp.bn_momentum, hp.bn_eps, dtype),
        hp=hp,
    )


# --------------------------------------------------------------------------
# latent path


def latent_bn(z: Tensor, state: BnState, training: bool = True) -> Tensor:
    """Normalize latent codes without a learned affine map.

    In training mode the batch's own mean and population variance are used
    and the running statistics are updated; otherwise the stored running
    statistics are applied.
    """
    if training:
        if z.data.ndim != 2 or z.shape[0] < 2:
            raise ShapeError(f"batch-stat normalization needs at least 2 rows, got shape {z.shape}")
        zd = z.data
        m = zd.mean(axis=0)
        v = np.mean((zd - m) ** 2, axis=0)
        rho = state.momentum
        state.running_mean = (rho * state.running_mean + (1 - rho) * m).astype(
            state.running_mean.dtype
        )
        state.running_var = (rho * state.running_var + (1 - rho) * v).astype(
            state.running_var.dtype
        )
        state.updates += 1
        return ad.batch_norm(z, state.eps)
    return ad.normalize(z, state.running_mean, state.running_var, state.eps)


def encode(bundle: ModelBundle, x: Tensor, training: bool = True, trainable: bool = True) -> Tensor:
    """Normalized latent code ``BN(E(x))`` (plain ``E(x)`` when BN is ablated)."""
    z = mlp_forward(bundle.encoder, x, trainable)
    if not bundle.hp.use_bn:
        return z
    return latent_bn(z, bundle.bn, training)


def decode(bundle: ModelBundle, zhat: Tensor, trainable: bool = True) -> Tensor:
    return mlp_forward(bundle.decoder, zhat, trainable)


def _check_mu(mu, rows, mu_max):
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (rows,):
        raise ShapeError(f"mu must have shape ({rows},), got {mu.shape}")
    if np.any(mu < 0) or np.any(mu > mu_max):
        raise ValueError(f"mu entries must lie in [0, {mu_max}], got range [{mu.min()}, {mu.max()}]")
    return mu


def interpolate_latents(z1: Tensor, z2: Tensor, mu) -> Tensor:
    return ad.lerp(z1, z2, mu)


def make_interpolants(
    x1, x2, bundle: ModelBundle, mu, tape: Tape | None = None, training: bool = True, trainable: bool = False
) -> Tensor:
    """Decoded latent interpolants ``G(mu * zhat(x1) + (1 - mu) * zhat(x2))``."""
    tape = Tape() if tape is None else tape
    mu = _check_mu(mu, np.shape(x1)[0], bundle.hp.mu_max)
    z1 = encode(bundle, tape.constant(x1), training, trainable)
    z2 = encode(bundle, tape.constant(x2), training, trainable)
    return decode(bundle, interpolate_latents(z1, z2, mu), trainable)


def sample_mu(rng: np.random.Generator, rows: int, mu_max: float = 0.5) -> np.ndarray:
    return rng.uniform(0.0, mu_max, size=rows)


# --------------------------------------------------------------------------
# losses


def _const(tape, x):
    return x if isinstance(x, Tensor) else tape.constant(x)


def critic_terms(
    x, x_hat, x_mu, mu, bundle: ModelBundle, tape: Tape, trainable: bool = True
) -> tuple[Tensor, Tensor, Tensor]:
    """The three squared residuals of the critic objective, batch-averaged."""
    hp = bundle.hp
    x, x_hat, x_mu = (_const(tape, a) for a in (x, x_hat, x_mu))
    for a in (x_hat, x_mu):
        if a.shape != x.shape:
            raise ShapeError(f"critic inputs disagree: {x.shape} vs {a.shape}")
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape != (x.shape[0],):
        raise ShapeError(f"mu must have shape ({x.shape[0]},), got {mu.shape}")
    d = bundle.critic
    real = ad.mean(ad.square(mlp_forward(d, x, trainable)))
    mix = ad.lerp(x, x_hat, np.full(x.shape[0], hp.gamma))
    mix_term = ad.mean(ad.square(ad.add_scalar(mlp_forward(d, mix, trainable), -hp.lam)))
    target = tape.constant((mu + hp.lam)[:, None])
    interp_term = ad.mean(ad.square(ad.sub(mlp_forward(d, x_mu, trainable), target)))
    return real, mix_term, interp_term


def critic_loss(x, x_hat, x_mu, mu, bundle: ModelBundle, tape: Tape | None = None) -> Tensor:
    """Critic objective.

    ``mean d(x)^2 + mean (d(gamma x + (1-gamma) x_hat) - lam)^2
    + mean (d(x_mu) - mu - lam)^2``.  The reconstructions and interpolants
    enter as constants, so only the critic's parameters get gradients.
    """
    tape = Tape() if tape is None else tape
    real, mix, interp = critic_terms(x, x_hat, x_mu, mu, bundle, tape)
    return ad.add(ad.add(real, mix), interp)


@dataclass
class AeForward:
    mse: Tensor
    zhat: Tensor
    x_hat: Tensor
    x_mu: Tensor
    loss: Tensor | None = None


def autoencoder_paths(x, mu, bundle: ModelBundle, tape: Tape, trainable: bool = True) -> AeForward:
    """Reconstructions and interpolants of one batch, without the critic terms.

    Pairs are formed by reversing the batch, so the normalized codes are
    computed once and the interpolation partner of row i is row B-1-i.
    """
    xt = _const(tape, x)
    mu = _check_mu(mu, xt.shape[0], bundle.hp.mu_max)
    zhat = encode(bundle, xt, training=True, trainable=trainable)
    x_hat = decode(bundle, zhat, trainable)
    partner = ad.take_rows(zhat, np.arange(xt.shape[0])[::-1])
    x_mu = decode(bundle, interpolate_latents(zhat, partner, mu), trainable)
    mse = ad.mean(ad.square(ad.sub(xt, x_hat)))
    return AeForward(mse, zhat, x_hat, x_mu)


def add_critic_regularizers(fwd: AeForward, bundle: ModelBundle) -> Tensor:
    """Complete the autoencoder objective with the frozen critic's penalties."""
    hp = bundle.hp
    interp_reg = ad.mean(ad.square(mlp_forward(bundle.critic, fwd.x_mu, trainable=False)))
    recon_reg = ad.mean(ad.square(mlp_forward(bundle.critic, fwd.x_hat, trainable=False)))
    fwd.loss = ad.add(fwd.mse, ad.add(ad.scale(interp_reg, hp.omega1), ad.scale(recon_reg, hp.omega2)))
    return fwd.loss


def ae_forward(x, mu, bundle: ModelBundle, tape: Tape | None = None, trainable: bool = True) -> AeForward:
    tape = Tape() if tape is None else tape
    fwd = autoencoder_paths(x, mu, bundle, tape, trainable)
    add_critic_regularizers(fwd, bundle)
    return fwd


def ae_loss(x, mu, bundle: ModelBundle, tape: Tape | None = None) -> Tensor:
    """``mean |x - G(BN(E(x)))|^2 + w1 mean d(x_mu)^2 + w2 mean d(x_hat)^2``.

    The reconstruction term averages over samples and coordinates.
    """
    return ae_forward(x, mu, bundle, tape).loss


def hinge_disc_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    real = ad.mean(ad.relu(ad.add_scalar(ad.scale(real_scores, -1.0), 1.0)))
    fake = ad.mean(ad.relu(ad.add_scalar(fake_scores, 1.0)))
    return ad.add(real, fake)


def embed(x, bundle: ModelBundle, dtype=np.float32) -> np.ndarray:
    """Normalized embedding with running statistics (no gradients, no updates)."""
    tape = Tape(dtype)
    return encode(bundle, tape.constant(x), training=False, trainable=False).numpy()


def latent_disc_loss_from_embeddings(real, z, bundle: ModelBundle, tape: Tape, train_disc=True, train_gen=False):
    fake = mlp_forward(bundle.latent_gen, _const(tape, z), trainable=train_gen)
    real_scores = mlp_forward(bundle.latent_disc, _const(tape, real), trainable=train_disc)
    fake_scores = mlp_forward(bundle.latent_disc, fake, trainable=train_disc)
    return hinge_disc_loss(real_scores, fake_scores)


def latent_disc_loss(x_batch, z_batch, bundle: ModelBundle, tape: Tape | None = None) -> Tensor:
    """Hinge loss ``E relu(1 - D(BN(E(x)))) + E relu(1 + D(g(z)))``; grads reach D only."""
    tape = Tape() if tape is None else tape
    real = embed(x_batch, bundle, tape.dtype)
    return latent_disc_loss_from_embeddings(real, z_batch, bundle, tape)


def latent_gen_loss(z_batch, bundle: ModelBundle, tape: Tape | None = None) -> Tensor:
    """``E[-D(g(z))]``; grads reach g only."""
    tape = Tape() if tape is None else tape
    fake = mlp_forward(bundle.latent_gen, _const(tape, z_batch), trainable=True)
    scores = mlp_forward(bundle.latent_disc, fake, trainable=False)
    return ad.scale(ad.mean(scores), -1.0)


# --------------------------------------------------------------------------
# evaluation


def generate(n: int, bundle: ModelBundle, seed: int, dtype=np.float32) -> np.ndarray:
    """``G(g(z))`` for ``n`` prior draws; requires a stage-A-trained bundle."""
    if bundle.hp.use_bn and bundle.bn.updates == 0:
        raise UntrainedModelError(
            "latent BN running statistics were never updated; train the autoencoder"
            " (stage A) or load a trained checkpoint before generating"
        )
    if n == 0:
        return np.empty((0, bundle.data_dim), dtype=dtype)
    z = sample_prior(n, bundle.hp.dz, seed)
    tape = Tape(dtype)
    latent = mlp_forward(bundle.sampler, tape.constant(z), trainable=False)
    return decode(bundle, latent, trainable=False).numpy()


def generate_latents(n: int, bundle: ModelBundle, seed: int, dtype=np.float32) -> np.ndarray:
    z = sample_prior(n, bundle.hp.dz, seed)
    tape = Tape(dtype)
    return mlp_forward(bundle.sampler, tape.constant(z), trainable=False).numpy()


def reconstruct(x, bundle: ModelBundle, dtype=np.float32) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != bundle.data_dim:
        raise ShapeError(f"expected (n, {bundle.data_dim}) input, got {x.shape}")
    if x.shape[0] == 0:
        return np.empty((0, bundle.data_dim), dtype=dtype)
    tape = Tape(dtype)
    zhat = encode(bundle, tape.constant(x), training=False, trainable=False)
    return decode(bundle, zhat, trainable=False).numpy()


def decode_latents(zhat, bundle: ModelBundle, dtype=np.float32) -> np.ndarray:
    tape = Tape(dtype)
    return decode(bundle, tape.constant(zhat), trainable=False).numpy()
