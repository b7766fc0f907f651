import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from conftest import write_idx
from latentmatch.data import (
    BatchIterator,
    DatasetSpec,
    IdxFormatError,
    IdxMagicError,
    IdxRankError,
    IdxTruncatedError,
    load_dataset,
    load_idx,
    minibatches,
    parse_idx,
    sample_gaussian_mixture,
    sample_prior,
    sample_swiss_roll,
    swiss_roll_from_uniform,
)


# --------------------------------------------------------------------------
# swiss roll


def test_roll_endpoints():
    np.testing.assert_allclose(swiss_roll_from_uniform([0.0]), [[0.0, -1 / 3]], atol=1e-15)
    # t = 4.5 pi: cos t = 0 and sin t = sin(pi / 2) = +1
    np.testing.assert_allclose(swiss_roll_from_uniform([1.0]), [[0.0, 1.0]], atol=1e-15)


def test_roll_radius_scan():
    pts = sample_swiss_roll(5000, "2d", seed=0)
    r = np.linalg.norm(pts, axis=1)
    assert r.min() >= 1 / 3 - 1e-12 and r.max() <= 1 + 1e-12


def test_roll_points_lie_on_the_curve():
    pts = sample_swiss_roll(2000, "3d", seed=3)
    flat = pts[:, [0, 2]]
    t = np.linalg.norm(flat, axis=1) * 4.5 * np.pi
    u = (t / (1.5 * np.pi) - 1) / 2
    rebuilt = swiss_roll_from_uniform(u, pts[:, 1])
    np.testing.assert_allclose(rebuilt, pts, atol=1e-6)


def test_roll_3d_heights_in_range():
    pts = sample_swiss_roll(1000, "3d", seed=1)
    assert pts.shape == (1000, 3)
    assert pts[:, 1].min() >= -1 and pts[:, 1].max() <= 1
    assert np.all(np.abs(pts) <= 1)


def test_roll_deterministic_and_noise():
    a = sample_swiss_roll(100, seed=4)
    assert np.array_equal(a, sample_swiss_roll(100, seed=4))
    noisy = sample_swiss_roll(100, noise=0.1, seed=4)
    assert not np.array_equal(a, noisy)


@pytest.mark.parametrize("n,variant", [(0, "3d"), (10, "4d")])
def test_roll_rejects_bad_args(n, variant):
    with pytest.raises(ValueError):
        sample_swiss_roll(n, variant)


# --------------------------------------------------------------------------
# prior and mixture


def test_prior_deterministic_and_moments():
    z = sample_prior(10000, 2, seed=0)
    assert np.array_equal(z, sample_prior(10000, 2, seed=0))
    assert np.all(np.abs(z.mean(axis=0)) < 0.05)
    assert np.all(np.abs(z.var(axis=0) - 1) < 0.05)
    assert sample_prior(0, 2, seed=0).shape == (0, 2)


def test_mixture_frequencies_within_three_sigma():
    weights = np.array([0.2, 0.5, 0.3])
    means = [[0, 0], [3, 0], [0, 3]]
    n = 20000
    _, labels = sample_gaussian_mixture(n, means, weights, 0.1, seed=0, return_labels=True)
    counts = np.bincount(labels, minlength=3)
    sigma = np.sqrt(n * weights * (1 - weights))
    assert np.all(np.abs(counts - n * weights) < 3 * sigma)
    # and a chi-square goodness of fit does not reject
    assert stats.chisquare(counts, n * weights).pvalue > 0.001


def test_dataset_spec_validation():
    with pytest.raises(ValueError):
        DatasetSpec(kind="moons")
    with pytest.raises(ValueError):
        DatasetSpec(n=0)
    with pytest.raises(ValueError):
        DatasetSpec(noise=-0.1)


def test_normalized_dataset_has_unit_moments():
    x = load_dataset(DatasetSpec(n=3000, normalize=True))
    np.testing.assert_allclose(x.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(x.std(axis=0), 1, atol=1e-12)


# --------------------------------------------------------------------------
# IDX


def test_idx_hand_example():
    buf = bytes([0, 0, 8, 3]) + struct.pack(">3I", 2, 2, 2) + bytes([0, 255, 51, 102, 1, 2, 3, 4])
    x = parse_idx(buf)
    assert x.shape == (2, 4)
    np.testing.assert_array_equal(x * 255, [[0, 255, 51, 102], [1, 2, 3, 4]])


def test_idx_truncated_payload_names_counts():
    buf = write_idx(np.zeros((2, 2, 2)))[:-1]
    with pytest.raises(IdxTruncatedError, match="expected 8 bytes, found 7") as info:
        parse_idx(buf)
    assert info.value.offset == len(buf)


@pytest.mark.parametrize(
    "buf,error,offset",
    [
        (bytes([1, 0, 8, 1, 0, 0, 0, 0]), IdxMagicError, 0),
        (bytes([0, 0, 0x0D, 1, 0, 0, 0, 0]), IdxMagicError, 2),
        (bytes([0, 0, 8, 2, 0, 0, 0, 1, 0, 0, 0, 1, 7]), IdxRankError, 3),
        (bytes([0, 0, 8, 3, 0, 0]), IdxTruncatedError, 6),
        (bytes([0, 0]), IdxMagicError, 0),
    ],
)
def test_idx_errors_are_distinct(buf, error, offset):
    with pytest.raises(error) as info:
        parse_idx(buf)
    assert info.value.offset == offset


def test_idx_trailing_bytes_rejected():
    with pytest.raises(IdxFormatError, match="trailing"):
        parse_idx(write_idx(np.zeros(3)) + b"\x00")


@settings(max_examples=40, deadline=None)
@given(
    st.one_of(
        arrays(np.uint8, st.tuples(st.integers(1, 6))),
        arrays(np.uint8, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5))),
    )
)
def test_idx_round_trip(array):
    x = parse_idx(write_idx(array))
    np.testing.assert_array_equal(np.rint(x * 255).astype(np.uint8), array.reshape(array.shape[0], -1))


def test_load_idx_from_file(tmp_path):
    path = tmp_path / "images.idx"
    path.write_bytes(write_idx(np.arange(24).reshape(2, 3, 4)))
    assert load_idx(path).shape == (2, 12)
    spec = DatasetSpec(kind="idx-file", n=1, path=str(path))
    assert load_dataset(spec).shape == (1, 12)


# --------------------------------------------------------------------------
# batching


def test_batches_cover_all_indices():
    it = BatchIterator(np.arange(10)[:, None], 5, seed=0)
    batches = list(minibatches(it))
    assert len(batches) == 2
    assert sorted(np.concatenate(batches).ravel()) == list(range(10))


def test_drop_last():
    it = BatchIterator(np.arange(10)[:, None], 4, seed=0)
    batches = list(it.epoch_batches(0))
    assert len(batches) == 2
    assert len(set(np.concatenate(batches).ravel())) == 8


def test_epochs_are_distinct_permutations():
    it = BatchIterator(np.arange(20)[:, None], 5, seed=3)
    e0 = np.concatenate(list(it)).ravel()
    e1 = np.concatenate(list(it)).ravel()
    assert sorted(e0) == sorted(e1) == list(range(20))
    assert not np.array_equal(e0, e1)


def test_batches_are_addressable():
    it = BatchIterator(np.arange(20)[:, None], 5, seed=3)
    epoch1 = list(it.epoch_batches(1))
    assert np.array_equal(it.batch(6), epoch1[2])


def test_batch_larger_than_dataset_rejected():
    with pytest.raises(ValueError):
        BatchIterator(np.zeros((3, 1)), 4)
