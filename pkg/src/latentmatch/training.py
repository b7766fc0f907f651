"""Two-stage training: regularized autoencoder, then latent-mapping GAN.

Stage A alternates critic updates (L_dis) and autoencoder updates (L_ae)
with latent BN in batch-statistics mode.  Stage B freezes E, G and d,
embeds the training set once with the BN running statistics, and trains the
latent generator g against the hinge discriminator D (``disc_ratio`` D
updates per g update).  Sampling uses an exponential moving average of g's
weights, which damps the oscillation a 1:1 hinge game shows on 2-D latents.

Randomness is addressed by counters rather than carried as state: the batch
at index k comes from ``BatchIterator`` and the interpolation coefficients
or prior draws at step k from ``default_rng([seed, stage, k])``.  A resumed
run therefore replays exactly what an uninterrupted one would have done.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .data import BatchIterator, DatasetSpec, load_dataset, sample_prior
from .metrics import MetricReport, latent_moments, mse_metric, sliced_w2, trustworthiness_continuity
from .model import (
    BnState,
    Hyperparams,
    ModelBundle,
    add_critic_regularizers,
    autoencoder_paths,
    build_bundle,
    critic_loss,
    decode,
    decode_latents,
    embed,
    encode,
    generate,
    generate_latents,
    latent_disc_loss_from_embeddings,
    latent_gen_loss,
    reconstruct,
    sample_mu,
)
from .nn import AdamState, adam_step, average_into, clip_grads, gather_grads

log = logging.getLogger(__name__)

STAGE_A, STAGE_B = 1, 2


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    hp: Hyperparams = field(default_factory=Hyperparams)
    width: int = 256
    depth: int = 4
    decoder_activation: str = "identity"
    ae_lr: float = 1e-3
    ae_beta1: float = 0.9
    adv_lr: float = 2e-4
    adv_beta1: float = 0.5
    beta2: float = 0.999
    stage_a_steps: int = 4000
    stage_b_steps: int = 4000
    critic_ratio: int = 1
    disc_ratio: int = 3
    g_average: float = 0.999
    train_critic: bool = True
    grad_clip: float = 0.0
    eval_interval: int = 500
    heldout_n: int = 2000
    eval_k: int = 10
    eval_n: int = 1000
    n_proj: int = 128
    seed: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.stage_a_steps < 0 or self.stage_b_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.critic_ratio < 1 or self.disc_ratio < 1:
            raise ValueError("update ratios must be at least 1")
        if not 0.0 <= self.g_average < 1.0:
            raise ValueError(f"g_average must lie in [0, 1), got {self.g_average}")
        if self.eval_interval <= 0:
            raise ValueError("eval interval must be positive")


@dataclass
class RunLog:
    records: list[tuple[int, str, float]] = field(default_factory=list)
    reports: list[tuple[int, MetricReport]] = field(default_factory=list)
    failed: bool = False

    def log(self, step: int, key: str, value: float):
        if self.records and step < self.records[-1][0]:
            raise ValueError(f"step {step} logged after step {self.records[-1][0]}")
        value = float(value)
        if not math.isfinite(value):
            self.failed = True
        self.records.append((step, key, value))

    def series(self, key: str) -> list[float]:
        return [v for _, k, v in self.records if k == key]

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["step", "key", "value"])
        for step, key, value in self.records:
            w.writerow([step, key, repr(value)])
        return out.getvalue()


def heldout_spec(spec: DatasetSpec, n: int) -> DatasetSpec:
    return replace(spec, n=n, seed=spec.seed + 1000)


class Trainer:
    """Owns a bundle, its optimizer states and the step counters."""

    def __init__(self, config: TrainConfig, bundle: ModelBundle | None = None, data=None):
        self.config = config
        self.data = np.asarray(load_dataset(config.data) if data is None else data, dtype=np.float32)
        if bundle is None:
            bundle = build_bundle(
                self.data.shape[1],
                config.hp,
                config.width,
                config.depth,
                config.seed,
                config.decoder_activation,
            )
        self.bundle = bundle
        c = config
        self.opt = {
            "ae": AdamState(lr=c.ae_lr, beta1=c.ae_beta1, beta2=c.beta2),
            "d": AdamState(lr=c.adv_lr, beta1=c.adv_beta1, beta2=c.beta2),
            "g": AdamState(lr=c.adv_lr, beta1=c.adv_beta1, beta2=c.beta2),
            "D": AdamState(lr=c.adv_lr, beta1=c.adv_beta1, beta2=c.beta2),
        }
        self.step_a = 0
        self.step_b = 0
        self.runlog = RunLog()
        self.batches_a = BatchIterator(self.data, c.hp.batch_size, c.seed)
        self._embeddings: np.ndarray | None = None
        self._batches_b: BatchIterator | None = None

    # ------------------------------------------------------------------ params

    def param_groups(self) -> dict[str, dict[str, np.ndarray]]:
        b = self.bundle
        ae = {f"E.{k}": v for k, v in b.encoder.parameters().items()}
        ae.update({f"G.{k}": v for k, v in b.decoder.parameters().items()})
        return {
            "ae": ae,
            "d": {f"d.{k}": v for k, v in b.critic.parameters().items()},
            "g": {f"g.{k}": v for k, v in b.latent_gen.parameters().items()},
            "D": {f"D.{k}": v for k, v in b.latent_disc.parameters().items()},
        }

    def _update(self, group: str, tape: Tape, loss):
        params = self.param_groups()[group]
        grads = gather_grads(tape, ad.backward(tape, loss), params)
        if self.config.grad_clip > 0:
            grads = clip_grads(grads, self.config.grad_clip)
        adam_step(params, grads, self.opt[group])

    def _check(self, step, key, value):
        self.runlog.log(step, key, value)
        if not math.isfinite(value):
            raise NonFiniteError(f"{key} became non-finite at step {step}")

    # ------------------------------------------------------------------ stage A

    def stage_a_step(self):
        c, b, k = self.config, self.bundle, self.step_a
        x = self.batches_a.batch(k)
        rng = np.random.default_rng([c.seed, STAGE_A, k])
        mu = sample_mu(rng, x.shape[0], c.hp.mu_max)

        tape = Tape(np.float32)
        fwd = autoencoder_paths(x, mu, b, tape)
        if c.train_critic:
            # E and G are untouched by critic updates, so this batch's
            # reconstructions and interpolants serve as the critic's constants
            x_hat, x_mu = fwd.x_hat.numpy(), fwd.x_mu.numpy()
            for _ in range(c.critic_ratio):
                critic_tape = Tape(np.float32)
                loss_dis = critic_loss(x, x_hat, x_mu, mu, b, critic_tape)
                self._update("d", critic_tape, loss_dis)
            self._check(k, "a.loss_dis", loss_dis.item())

        add_critic_regularizers(fwd, b)
        self._update("ae", tape, fwd.loss)
        self._check(k, "a.loss_ae", fwd.loss.item())
        self._check(k, "a.mse", fwd.mse.item())
        if b.hp.use_bn:
            zhat = fwd.zhat.data.astype(np.float64)
            m = zhat.mean(axis=0)
            v = np.mean((zhat - m) ** 2, axis=0)
            self.runlog.log(k, "a.bn_mean_absmax", float(np.max(np.abs(m))))
            self.runlog.log(k, "a.bn_var_dev", float(np.max(np.abs(v - 1 / (1 + b.bn.eps)))))
            # the output variance is v_in / (v_in + eps), so this explains any deviation
            bn_node = next(n for n in tape.nodes if n.kind == "batch_norm")
            z_in = tape.nodes[bn_node.inputs[0]].value.astype(np.float64)
            self.runlog.log(k, "a.bn_input_var_min", float(np.min(np.var(z_in, axis=0))))
        self.step_a += 1

    # ------------------------------------------------------------------ stage B

    @property
    def embeddings(self) -> np.ndarray:
        if self._embeddings is None:
            self._embeddings = embed(self.data, self.bundle)
        return self._embeddings

    def latent_gap(self, n: int = 2000, seed: int | None = None) -> float:
        """Sliced W2 between g(z) and an embedding sample of the same size."""
        c = self.config
        seed = c.seed if seed is None else seed
        emb = self.embeddings
        n = min(n, emb.shape[0])
        idx = np.random.default_rng([seed, 3]).choice(emb.shape[0], n, replace=False)
        fake = generate_latents(n, self.bundle, seed + 17)
        return sliced_w2(fake, emb[idx], c.n_proj, seed)

    def stage_b_step(self):
        c, b, k = self.config, self.bundle, self.step_b
        global_step = c.stage_a_steps + k
        if self._batches_b is None:
            self._batches_b = BatchIterator(self.embeddings, c.hp.batch_size, c.seed + 1)
        batches = self._batches_b
        rng = np.random.default_rng([c.seed, STAGE_B, k])
        for r in range(c.disc_ratio):
            real = batches.batch(k * c.disc_ratio + r)
            z = rng.standard_normal((real.shape[0], c.hp.dz))
            tape = Tape(np.float32)
            loss_d = latent_disc_loss_from_embeddings(real, z, b, tape)
            self._update("D", tape, loss_d)
        self._check(global_step, "b.loss_D", loss_d.item())

        z = rng.standard_normal((c.hp.batch_size, c.hp.dz))
        tape = Tape(np.float32)
        loss_g = latent_gen_loss(z, b, tape)
        if c.g_average > 0 and b.latent_gen_avg is None:
            b.latent_gen_avg = b.latent_gen.copy()
        self._update("g", tape, loss_g)
        if c.g_average > 0:
            average_into(b.latent_gen_avg, b.latent_gen, c.g_average)
        self._check(global_step, "b.loss_g", loss_g.item())
        self.step_b += 1

    # ------------------------------------------------------------------ driving

    def train_stage_a(self, steps: int | None = None):
        stop = self.config.stage_a_steps if steps is None else self.step_a + steps
        stop = min(stop, self.config.stage_a_steps)
        while self.step_a < stop:
            self._guarded(self.stage_a_step)
            if self.step_a % self.config.eval_interval == 0:
                self._periodic_checkpoint()

    def train_stage_b(self, steps: int | None = None):
        c = self.config
        if self.step_a < c.stage_a_steps:
            raise RuntimeError("stage B requires a completed stage A")
        stop = c.stage_b_steps if steps is None else self.step_b + steps
        stop = min(stop, c.stage_b_steps)
        if self.step_b == 0 and stop > 0:
            self.runlog.log(c.stage_a_steps, "b.sw2_latent", self.latent_gap())
        while self.step_b < stop:
            self._guarded(self.stage_b_step)
            if self.step_b % c.eval_interval == 0:
                self.runlog.log(c.stage_a_steps + self.step_b, "b.sw2_latent", self.latent_gap())
                self._periodic_checkpoint()

    def _guarded(self, fn):
        try:
            fn()
        except NonFiniteError as exc:
            self.runlog.failed = True
            where = self.config.checkpoint_path or "no checkpoint path configured"
            raise TrainingDiverged(f"{exc}; last good checkpoint: {where}") from exc

    def _periodic_checkpoint(self):
        if self.config.checkpoint_path:
            self.save(self.config.checkpoint_path)

    # ------------------------------------------------------------------ evaluation

    def evaluate(self, heldout: np.ndarray | None = None) -> MetricReport:
        c, b = self.config, self.bundle
        if heldout is None:
            heldout = load_dataset(heldout_spec(c.data, c.heldout_n))
        heldout = np.asarray(heldout, dtype=np.float64)
        n = heldout.shape[0]
        recon = reconstruct(heldout, b)
        emb = embed(heldout, b)
        gen = generate(n, b, c.seed + 101)
        fake_latent = generate_latents(n, b, c.seed + 101)
        m = min(c.eval_n, n)
        trust, cont = trustworthiness_continuity(heldout[:m], emb[:m], c.eval_k)
        mean_norm, var_dev = latent_moments(emb)
        values = {
            "mse": mse_metric(heldout, recon),
            "sw2_data": sliced_w2(gen, heldout, c.n_proj, c.seed),
            "sw2_latent": sliced_w2(fake_latent, emb, c.n_proj, c.seed),
            "sw2_interp": interpolation_gap(heldout, b, c.seed, c.n_proj),
            "trustworthiness": trust,
            "continuity": cont,
            "latent_mean_norm": mean_norm,
            "latent_var_dev": var_dev,
        }
        counts = {"heldout": n, "neighborhood": m, "projections": c.n_proj}
        return MetricReport(values, counts, c.seed)

    # ------------------------------------------------------------------ persistence

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = {}
        for group, params in self.param_groups().items():
            tensors.update(params)
            opt = self.opt[group]
            for name in params:
                if name in opt.m:
                    tensors[f"adam.{group}.m.{name}"] = opt.m[name]
                    tensors[f"adam.{group}.v.{name}"] = opt.v[name]
        if self.bundle.latent_gen_avg is not None:
            for name, p in self.bundle.latent_gen_avg.parameters().items():
                tensors[f"gavg.{name}"] = p
        tensors["bn.running_mean"] = self.bundle.bn.running_mean
        tensors["bn.running_var"] = self.bundle.bn.running_var
        return tensors

    def state_meta(self) -> dict[str, str]:
        meta = {
            "step_a": str(self.step_a),
            "step_b": str(self.step_b),
            "bn_updates": str(self.bundle.bn.updates),
            "rng": f"counter seed={self.config.seed} stage_a={self.step_a} stage_b={self.step_b}",
        }
        for group, opt in self.opt.items():
            meta[f"adam.{group}.t"] = str(opt.t)
        return meta

    def save(self, path, config_echo: dict[str, str] | None = None):
        meta = self.state_meta()
        for key, value in (config_echo or {}).items():
            meta[f"config.{key}"] = value
        save_checkpoint(path, self.state_tensors(), meta)

    def load_state(self, tensors: dict[str, np.ndarray], meta: dict[str, str]):
        for group, params in self.param_groups().items():
            opt = self.opt[group]
            for name, p in params.items():
                if name not in tensors:
                    raise KeyError(f"checkpoint lacks parameter {name}")
                if tensors[name].shape != p.shape:
                    raise ValueError(f"{name}: checkpoint shape {tensors[name].shape}, model {p.shape}")
                p[...] = tensors[name]
                mk, vk = f"adam.{group}.m.{name}", f"adam.{group}.v.{name}"
                if mk in tensors:
                    opt.m[name] = tensors[mk].astype(p.dtype).copy()
                    opt.v[name] = tensors[vk].astype(p.dtype).copy()
            opt.t = int(meta.get(f"adam.{group}.t", 0))
        avg = None
        if any(k.startswith("gavg.") for k in tensors):
            avg = self.bundle.latent_gen.copy()
            for name, p in avg.parameters().items():
                p[...] = tensors[f"gavg.{name}"]
        self.bundle.latent_gen_avg = avg
        bn = self.bundle.bn
        bn.running_mean = tensors["bn.running_mean"].astype(bn.running_mean.dtype).copy()
        bn.running_var = tensors["bn.running_var"].astype(bn.running_var.dtype).copy()
        bn.updates = int(meta.get("bn_updates", 0))
        self.step_a = int(meta.get("step_a", 0))
        self.step_b = int(meta.get("step_b", 0))
        self._embeddings = None
        self._batches_b = None

    def load(self, path):
        tensors, meta = load_checkpoint(path)
        self.load_state(tensors, meta)
        return meta


def interpolation_gap(data, bundle: ModelBundle, seed: int = 0, n_proj: int = 128) -> float:
    """Sliced W2 between decoded latent midpoints of random pairs and the data."""
    emb = embed(data, bundle)
    partner = np.random.default_rng([seed, 5]).permutation(emb.shape[0])
    mid = 0.5 * emb + 0.5 * emb[partner]
    return sliced_w2(decode_latents(mid, bundle), data, n_proj, seed)


def train_stage_a(config: TrainConfig, bundle: ModelBundle | None = None, data=None) -> Trainer:
    trainer = Trainer(config, bundle, data)
    trainer.train_stage_a()
    return trainer


def train_stage_b(trainer: Trainer) -> Trainer:
    trainer.train_stage_b()
    return trainer


def run_experiment(config: TrainConfig, trainer: Trainer | None = None) -> tuple[RunLog, Trainer, MetricReport]:
    """Stage A, stage B, then a final metric report on held-out data."""
    trainer = trainer or Trainer(config)
    log.info("stage A: %d steps", config.stage_a_steps)
    trainer.train_stage_a()
    log.info("stage B: %d steps", config.stage_b_steps)
    trainer.train_stage_b()
    report = trainer.evaluate()
    trainer.runlog.reports.append((config.stage_a_steps + config.stage_b_steps, report))
    return trainer.runlog, trainer, report
