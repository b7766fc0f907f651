import struct

import numpy as np
import pytest

from latentmatch.model import Hyperparams, ModelBundle, build_bundle
from latentmatch.nn import Layer, Mlp


def linear(weight, bias=None, activation="identity", dtype=np.float64) -> Mlp:
    """Single-layer network with the given weights (a fixture building block)."""
    w = np.atleast_2d(np.asarray(weight, dtype=dtype))
    b = np.zeros(w.shape[1], dtype=dtype) if bias is None else np.asarray(bias, dtype=dtype)
    return Mlp([Layer(w, b, activation)])


def constant_net(in_dim, value, dtype=np.float64) -> Mlp:
    """Network that outputs ``value`` for every input."""
    return linear(np.zeros((in_dim, 1)), [value], dtype=dtype)


def small_bundle(data_dim=3, seed=0, dtype=np.float64, **hp) -> ModelBundle:
    params = {"dz": 2, "batch_size": 8}
    params.update(hp)
    return build_bundle(data_dim, Hyperparams(**params), width=8, depth=3, seed=seed, dtype=dtype)


def with_nets(bundle: ModelBundle, **nets) -> ModelBundle:
    """Copy of ``bundle`` with some networks swapped for fixtures."""
    fields = {
        "encoder": bundle.encoder,
        "decoder": bundle.decoder,
        "critic": bundle.critic,
        "latent_gen": bundle.latent_gen,
        "latent_disc": bundle.latent_disc,
    }
    fields.update(nets)
    return ModelBundle(bn=bundle.bn, hp=bundle.hp, **fields)


def write_idx(array: np.ndarray) -> bytes:
    """Test-only IDX writer (unsigned bytes, big-endian dimensions)."""
    array = np.asarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.tobytes(order="C")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --------------------------------------------------------------------------
# acceptance verdict lines, repeated in the terminal summary

VERDICTS: list[str] = []


def record_verdict(line: str):
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
