"""Finite-difference verification of every primitive and every training loss.

Both the ``probe gradcheck`` command and the test-suite call into here.
Inputs are drawn away from the kinks of relu/leaky_relu/clip so central
differences never straddle a non-differentiable point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import PRIMITIVES, Tape, backward, grad_check

TOL = {np.dtype(np.float32): 1e-4, np.dtype(np.float64): 1e-7}


@dataclass
class CheckRow:
    name: str
    dtype: str
    cases: int
    max_error: float

    @property
    def tolerance(self) -> float:
        return TOL[np.dtype(self.dtype)]

    @property
    def ok(self) -> bool:
        return self.max_error < self.tolerance


def _away_from_zero(rng, shape, margin=0.05):
    u = rng.uniform(-1.5, 1.5, size=shape)
    return np.sign(u) * (margin + np.abs(u))


def _matrix(rng, shape):
    return rng.standard_normal(shape)


def primitive_case(kind: str, rng: np.random.Generator):
    """Inputs and attributes for one random instance of ``kind``."""
    B, n = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    if kind in ("add", "sub", "mul"):
        return [_matrix(rng, (B, n)), _matrix(rng, (B, n))], {}
    if kind == "matmul":
        k = int(rng.integers(1, 4))
        return [_matrix(rng, (B, k)), _matrix(rng, (k, n))], {}
    if kind == "add_bias":
        return [_matrix(rng, (B, n)), _matrix(rng, (n,))], {}
    if kind in ("scale", "add_scalar"):
        return [_matrix(rng, (B, n))], {"c": float(rng.normal())}
    if kind in ("relu", "leaky_relu"):
        attrs = {"slope": 0.2} if kind == "leaky_relu" else {}
        return [_away_from_zero(rng, (B, n))], attrs
    if kind == "clip":
        x = rng.uniform(-1.5, 1.5, size=(B, n))
        # keep every entry at least 0.05 away from the clip bounds
        x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, x + 0.1, x)
        return [x], {"lo": -0.5, "hi": 0.5}
    if kind == "log":
        return [rng.uniform(0.5, 2.0, size=(B, n))], {}
    if kind in ("exp", "tanh", "sigmoid", "square", "sq_norm"):
        return [rng.uniform(-2.0, 2.0, size=(B, n))], {}
    if kind in ("mean", "sum", "var"):
        axis = [None, 0, 1][int(rng.integers(0, 3))]
        return [_matrix(rng, (B, n + 1))], {"axis": axis}
    if kind == "lerp":
        return [_matrix(rng, (B, n)), _matrix(rng, (B, n))], {"weight": rng.uniform(0, 1, size=B)}
    if kind == "take_rows":
        return [_matrix(rng, (B, n))], {"index": rng.integers(0, B, size=B + 1)}
    if kind == "columns":
        start = int(rng.integers(0, n + 1))
        return [_matrix(rng, (B, n + 2))], {"start": start, "stop": start + 1}
    if kind == "batch_norm":
        return [rng.normal(0.5, 2.0, size=(B + 2, n))], {"eps": 1e-5}
    if kind == "normalize":
        return [_matrix(rng, (B, n))], {
            "mean": rng.normal(size=n),
            "var": rng.uniform(0.5, 2.0, size=n),
            "eps": 1e-5,
        }
    raise KeyError(f"no random case generator for primitive {kind!r}")


def check_primitive(kind: str, dtype=np.float64, cases: int = 100, seed: int = 0, step: float = 1e-5) -> CheckRow:
    """Worst relative error over ``cases`` random instances and every input."""
    rng = np.random.default_rng([seed, sum(map(ord, kind))])
    worst = 0.0
    for _ in range(cases):
        inputs, attrs = primitive_case(kind, rng)
        out_shape = PRIMITIVES[kind].forward(*inputs, **attrs).shape
        weights = rng.standard_normal(out_shape)
        for i in range(len(inputs)):

            def f(tape, x, i=i):
                args = [tape.constant(a) for a in inputs]
                args[i] = x
                y = tape.apply(kind, tuple(args), **attrs)
                return ad.sum(ad.mul(y, tape.constant(weights)))

            res = grad_check(f, inputs[i], step, analytic_dtype=dtype)
            worst = max(worst, res.max_error)
    return CheckRow(kind, np.dtype(dtype).name, cases, worst)


def check_all_primitives(cases: int = 100, seed: int = 0) -> list[CheckRow]:
    rows = []
    for kind in sorted(PRIMITIVES):
        for dtype in (np.float32, np.float64):
            rows.append(check_primitive(kind, dtype, cases, seed))
    return rows


# --------------------------------------------------------------------------
# losses on tiny networks


def grad_check_params(loss_fn, params: dict[str, np.ndarray], step=1e-5, analytic_dtype=np.float64, coords=None):
    """Like :func:`grad_check`, but over named float64 parameter arrays in place.

    ``loss_fn(tape)`` must watch the arrays in ``params`` as variables.
    ``coords`` is a list of ``(name, flat_index)`` pairs to compare.
    """
    tape = Tape(analytic_dtype, check_finite=False)
    loss = loss_fn(tape)
    grads = backward(tape, loss)
    analytic = {}
    for name, p in params.items():
        leaf = tape.leaf_of(p)
        analytic[name] = np.zeros(p.shape) if leaf is None else grads[leaf.id].astype(np.float64)
    if coords is None:
        coords = [(name, i) for name, p in params.items() for i in range(p.size)]

    def value():
        return float(loss_fn(Tape(np.float64, check_finite=False)).data)

    worst = 0.0
    for name, i in coords:
        flat = params[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        up = value()
        flat[i] = orig - step
        down = value()
        flat[i] = orig
        numeric = (up - down) / (2 * step)
        a = analytic[name].reshape(-1)[i]
        if not (np.isfinite(a) and np.isfinite(numeric)):
            return float("inf")
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def _tiny_bundle(seed):
    from .model import Hyperparams, build_bundle

    hp = Hyperparams(dz=2, batch_size=6)
    return build_bundle(3, hp, width=8, depth=3, seed=seed, dtype=np.float64)


def loss_case(name: str, rng: np.random.Generator):
    """``(loss_fn, params)`` for one random instance of a training loss."""
    from . import model as mc
    from .baselines import build_vae, vae_loss

    seed = int(rng.integers(0, 2**31))
    B = 6
    x = rng.uniform(-1, 1, size=(B, 3))
    mu = rng.uniform(0, 0.5, size=B)
    if name == "vae":
        vae = build_vae(3, dz=2, width=8, depth=3, beta=float(rng.uniform(0.1, 2)), seed=seed, dtype=np.float64)
        noise = rng.standard_normal((B, 2))
        return (lambda tape: vae_loss(x, vae, tape=tape, noise=noise)), vae.parameters()

    b = _tiny_bundle(seed)
    if name == "critic":
        x_hat = x + 0.1 * rng.standard_normal(x.shape)
        x_mu = rng.uniform(-1, 1, size=x.shape)
        params = {f"d.{k}": v for k, v in b.critic.parameters().items()}
        return (lambda tape: mc.critic_loss(x, x_hat, x_mu, mu, b, tape)), params
    if name == "ae":
        params = {f"E.{k}": v for k, v in b.encoder.parameters().items()}
        params.update({f"G.{k}": v for k, v in b.decoder.parameters().items()})
        return (lambda tape: mc.ae_loss(x, mu, b, tape)), params
    z = rng.standard_normal((B, 2))
    if name == "latent_disc":
        real = rng.standard_normal((B, 2))
        params = {f"D.{k}": v for k, v in b.latent_disc.parameters().items()}
        return (lambda tape: mc.latent_disc_loss_from_embeddings(real, z, b, tape)), params
    if name == "latent_gen":
        params = {f"g.{k}": v for k, v in b.latent_gen.parameters().items()}
        return (lambda tape: mc.latent_gen_loss(z, b, tape)), params
    raise KeyError(f"unknown loss {name!r}")


def kink_distance(tape: Tape) -> float:
    """Smallest distance from any relu/leaky_relu/clip input to its kink."""
    dist = np.inf
    for node in tape.nodes:
        if node.kind in ("relu", "leaky_relu"):
            a = tape.nodes[node.inputs[0]].value
            dist = min(dist, float(np.min(np.abs(a))))
        elif node.kind == "clip":
            a = tape.nodes[node.inputs[0]].value
            lo, hi = node.attrs["lo"], node.attrs["hi"]
            dist = min(dist, float(np.min(np.minimum(np.abs(a - lo), np.abs(a - hi)))))
    return dist


def smooth_loss_case(name: str, rng: np.random.Generator, margin: float = 1e-3):
    """A :func:`loss_case` whose evaluation point sits ``margin`` away from every kink."""
    while True:
        loss_fn, params = loss_case(name, rng)
        tape = Tape(np.float64, check_finite=False)
        loss_fn(tape)
        if kink_distance(tape) > margin:
            return loss_fn, params


LOSSES = ("critic", "ae", "latent_disc", "latent_gen", "vae")


def check_loss(name: str, dtype=np.float64, cases: int = 100, seed: int = 0, coords_per_case: int = 12) -> CheckRow:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(cases):
        loss_fn, params = smooth_loss_case(name, rng)
        every = [(k, i) for k, p in params.items() for i in range(p.size)]
        pick = rng.choice(len(every), size=min(coords_per_case, len(every)), replace=False)
        coords = [every[j] for j in pick]
        worst = max(worst, grad_check_params(loss_fn, params, analytic_dtype=dtype, coords=coords))
    return CheckRow(f"loss:{name}", np.dtype(dtype).name, cases, worst)


def check_all_losses(cases: int = 100, seed: int = 0) -> list[CheckRow]:
    return [check_loss(n, dt, cases, seed) for n in LOSSES for dt in (np.float32, np.float64)]
