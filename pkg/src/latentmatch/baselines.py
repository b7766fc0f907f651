"""Plain autoencoder and VAE baselines, plus the posterior-collapse probes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .data import BatchIterator, sample_prior
from .model import ModelBundle, encode, decode
from .nn import AdamState, Mlp, adam_step, gather_grads, init_mlp, mlp_forward

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass
class VaeBundle:
    encoder: Mlp  # outputs [mu | log sigma^2], width 2 * dz
    decoder: Mlp
    beta: float = 1.0

    @property
    def dz(self) -> int:
        return self.encoder.out_dim // 2

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"enc.{k}": v for k, v in self.encoder.parameters().items()}
        params.update({f"dec.{k}": v for k, v in self.decoder.parameters().items()})
        return params


def build_vae(data_dim, dz=2, width=256, depth=4, beta=1.0, seed=0, dtype=np.float32) -> VaeBundle:
    hidden = [width] * (depth - 1)
    acts = ["leaky_relu"] * (depth - 1) + ["identity"]
    enc = init_mlp([data_dim, *hidden, 2 * dz], acts, seed * 10 + 6, dtype)
    dec = init_mlp([dz, *hidden, data_dim], acts, seed * 10 + 7, dtype)
    return VaeBundle(enc, dec, beta)


def kl_diag_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """Per-sample ``KL(N(mu, diag exp(logvar)) || N(0, I))``, shape (B,)."""
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(logvar.data))):
        raise NonFiniteError("KL inputs contain NaN or Inf")
    inner = ad.sub(ad.add(ad.square(mu), ad.exp(logvar)), ad.add_scalar(logvar, 1.0))
    return ad.scale(ad.sum(inner, axis=1), 0.5)


def vae_posterior(x: Tensor, bundle: VaeBundle, trainable: bool = True) -> tuple[Tensor, Tensor]:
    h = mlp_forward(bundle.encoder, x, trainable)
    dz = bundle.dz
    mu = ad.columns(h, 0, dz)
    logvar = ad.clip(ad.columns(h, dz, 2 * dz), LOGVAR_MIN, LOGVAR_MAX)
    return mu, logvar


def vae_loss(x, bundle: VaeBundle, seed=None, tape: Tape | None = None, noise=None, beta=None) -> Tensor:
    """Negative ELBO with unit-variance Gaussian likelihood.

    ``mean |x - G(mu + sigma * eps)|^2 + beta * mean KL``; the noise comes
    from ``seed`` unless an explicit ``noise`` array is supplied.
    """
    tape = Tape() if tape is None else tape
    beta = bundle.beta if beta is None else beta
    xt = x if isinstance(x, Tensor) else tape.constant(x)
    mu, logvar = vae_posterior(xt, bundle)
    if noise is None:
        noise = sample_prior(xt.shape[0], bundle.dz, seed)
    std = ad.exp(ad.scale(logvar, 0.5))
    z = ad.add(mu, ad.mul(std, tape.constant(noise)))
    recon = mlp_forward(bundle.decoder, z)
    mse = ad.mean(ad.square(ad.sub(xt, recon)))
    kl = ad.mean(kl_diag_gaussian(mu, logvar))
    return ad.add(mse, ad.scale(kl, beta))


def vae_encode(x, bundle: VaeBundle, dtype=np.float32):
    tape = Tape(dtype)
    mu, logvar = vae_posterior(tape.constant(x), bundle, trainable=False)
    return mu.numpy(), logvar.numpy()


def vae_reconstruct(x, bundle: VaeBundle, dtype=np.float32) -> np.ndarray:
    """Decode the posterior means."""
    mu, _ = vae_encode(x, bundle, dtype)
    tape = Tape(dtype)
    return mlp_forward(bundle.decoder, tape.constant(mu), trainable=False).numpy()


def vae_generate(n, bundle: VaeBundle, seed, dtype=np.float32) -> np.ndarray:
    z = sample_prior(n, bundle.dz, seed)
    tape = Tape(dtype)
    return mlp_forward(bundle.decoder, tape.constant(z), trainable=False).numpy()


def per_sample_kl(x, bundle: VaeBundle) -> np.ndarray:
    mu, logvar = vae_encode(x, bundle, np.float64)
    return 0.5 * np.sum(mu**2 + np.exp(logvar) - 1 - logvar, axis=1)


def train_vae(
    data: np.ndarray,
    bundle: VaeBundle,
    steps: int,
    batch_size: int = 256,
    lr: float = 1e-3,
    beta1: float = 0.9,
    seed: int = 0,
    dtype=np.float32,
) -> list[float]:
    """Adam on the negative ELBO; returns the loss per step."""
    batches = BatchIterator(data.astype(dtype), batch_size, seed)
    params = bundle.parameters()
    opt = AdamState(lr=lr, beta1=beta1)
    losses = []
    for step in range(steps):
        tape = Tape(dtype)
        noise = np.random.default_rng([seed, 7, step]).standard_normal((batch_size, bundle.dz))
        loss = vae_loss(batches.batch(step), bundle, tape=tape, noise=noise)
        grads = gather_grads(tape, ad.backward(tape, loss), params)
        adam_step(params, grads, opt)
        losses.append(loss.item())
    return losses


def train_plain_ae(
    data: np.ndarray,
    bundle: ModelBundle,
    steps: int,
    batch_size: int = 256,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    seed: int = 0,
    dtype=np.float32,
) -> list[float]:
    """Reconstruction-only training of E and G through latent BN.

    Uses the same batch schedule as the regularized stage, so with the
    regularizers off the two produce the same trajectory.
    """
    batches = BatchIterator(data.astype(dtype), batch_size, seed)
    params = {f"E.{k}": v for k, v in bundle.encoder.parameters().items()}
    params.update({f"G.{k}": v for k, v in bundle.decoder.parameters().items()})
    opt = AdamState(lr=lr, beta1=beta1, beta2=beta2)
    losses = []
    for step in range(steps):
        tape = Tape(dtype)
        x = tape.constant(batches.batch(step))
        x_hat = decode(bundle, encode(bundle, x, training=True))
        loss = ad.mean(ad.square(ad.sub(x, x_hat)))
        grads = gather_grads(tape, ad.backward(tape, loss), params)
        adam_step(params, grads, opt)
        losses.append(loss.item())
    return losses


# --------------------------------------------------------------------------
# probes


@dataclass
class ProbeRow:
    beta: float
    max_kl: float
    mean_kl: float
    mse: float
    failed: bool = False


def kl_blowup_probe(
    data: np.ndarray,
    betas,
    steps: int = 3000,
    seed: int = 0,
    width: int = 64,
    depth: int = 3,
    batch_size: int = 128,
    lr: float = 1e-3,
) -> list[ProbeRow]:
    """Train one 1-D-latent VAE per beta and report the KL/reconstruction trade-off.

    ``max_kl`` is the largest per-sample KL over ``data``; ``mse`` decodes
    posterior means.  A run that diverges is reported with ``failed=True``
    and NaN metrics; the remaining betas still run.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    rows = []
    for beta in betas:
        bundle = build_vae(data.shape[1], dz=1, width=width, depth=depth, beta=beta, seed=seed)
        try:
            train_vae(data, bundle, steps, batch_size, lr, seed=seed)
            kl = per_sample_kl(data, bundle)
            mse = float(np.mean((vae_reconstruct(data, bundle, np.float64) - data) ** 2))
            rows.append(ProbeRow(float(beta), float(kl.max()), float(kl.mean()), mse))
        except NonFiniteError:
            rows.append(ProbeRow(float(beta), float("nan"), float("nan"), float("nan"), True))
    return rows


def probe_rows_to_csv(rows: list[ProbeRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["beta", "max_kl", "mean_kl", "mse"])
    for r in rows:
        w.writerow([repr(r.beta), repr(r.max_kl), repr(r.mean_kl), repr(r.mse)])
    return out.getvalue()


def collapsed_posterior_probe(data, steps=500, seed=0, width=64, depth=3, batch_size=128):
    """Train a VAE decoder whose encoder is pinned to the prior N(0, I).

    Returns ``(cross_input_variance, mse)``: the variance of reconstructions
    across distinct inputs under shared noise, and the reconstruction MSE.
    With the encoder pinned the decoder never sees anything about ``x``.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    dz = 1
    dec = init_mlp([dz] + [width] * (depth - 1) + [data.shape[1]], "leaky_relu", seed * 10 + 8)
    params = dec.parameters()
    opt = AdamState(lr=1e-3)
    batches = BatchIterator(data.astype(np.float32), batch_size, seed)

    def posterior(x_rows):
        # the pinned encoder: mean 0, log-variance 0 for every input
        return np.zeros((x_rows, dz)), np.zeros((x_rows, dz))

    for step in range(steps):
        tape = Tape(np.float32)
        x = batches.batch(step)
        mu, logvar = posterior(x.shape[0])
        eps = np.random.default_rng([seed, 8, step]).standard_normal((x.shape[0], dz))
        z = tape.constant(mu + np.exp(0.5 * logvar) * eps)
        loss = ad.mean(ad.square(ad.sub(tape.constant(x), mlp_forward(dec, z))))
        adam_step(params, gather_grads(tape, ad.backward(tape, loss), params), opt)

    eps = np.random.default_rng([seed, 9]).standard_normal((1, dz))
    mu, logvar = posterior(data.shape[0])
    z = mu + np.exp(0.5 * logvar) * eps  # one noise draw shared by every input
    tape = Tape(np.float64)
    recon = mlp_forward(dec, tape.constant(z), trainable=False).numpy()
    cross_var = float(np.max(np.var(recon, axis=0)))
    mse = float(np.mean((recon - data) ** 2))
    return cross_var, mse
