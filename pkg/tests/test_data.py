import gzip
import struct

import numpy as np
import pytest

from fssd.data import (
    GAUSSIAN_SIGMAS,
    IMPULSE_PROBS,
    CorruptionSpec,
    DataFormatError,
    LabeledDataset,
    blob_means,
    corrupt,
    export_csv,
    gen_blobs,
    gen_ood_ring,
    load_idx,
    make_pair,
    read_csv_inputs,
    read_idx_images,
    read_idx_labels,
    uniform_noise_batch,
    write_idx,
)


def reference_idx_reader(path):
    """Independent reader following the published IDX layout byte by byte."""
    with open(path, "rb") as fh:
        zero1, zero2, dtype, ndim = fh.read(4)
        assert (zero1, zero2, dtype) == (0, 0, 0x08)
        dims = [int.from_bytes(fh.read(4), "big") for _ in range(ndim)]
        body = fh.read()
    return np.array(list(body), dtype=np.uint8).reshape(dims)


@pytest.fixture
def idx_files(tmp_path, rng):
    images = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    images[0, 0, 0], images[0, 0, 1] = 255, 0
    labels = np.array([3, 1, 4, 1, 5], dtype=np.uint8)
    write_idx(tmp_path / "img", images)
    write_idx(tmp_path / "lbl", labels)
    return tmp_path / "img", tmp_path / "lbl", images, labels


def test_idx_magic_words_are_big_endian(idx_files):
    img, lbl, images, labels = idx_files
    assert struct.unpack(">I", img.read_bytes()[:4])[0] == 2051
    assert struct.unpack(">I", lbl.read_bytes()[:4])[0] == 2049
    assert struct.unpack(">III", img.read_bytes()[4:16]) == (5, 4, 3)
    np.testing.assert_array_equal(read_idx_images(img), reference_idx_reader(img))
    np.testing.assert_array_equal(read_idx_labels(lbl), reference_idx_reader(lbl))


def test_load_idx_scales_and_adds_channel(idx_files):
    img, lbl, images, labels = idx_files
    ds = load_idx(img, lbl)
    assert ds.inputs.shape == (5, 1, 4, 3)
    assert ds.inputs[0, 0, 0, 0] == 1.0 and ds.inputs[0, 0, 0, 1] == 0.0
    np.testing.assert_array_equal(ds.inputs[:, 0], images / 255.0)
    np.testing.assert_array_equal(ds.labels, labels)
    assert len(load_idx(img, lbl, limit=2)) == 2


def test_idx_errors_carry_offsets(tmp_path, idx_files):
    img, lbl, images, labels = idx_files
    with pytest.raises(DataFormatError, match="magic number 2049 at offset 0, expected 2051"):
        read_idx_images(lbl)
    write_idx(tmp_path / "short_lbl", labels[:3])
    with pytest.raises(DataFormatError, match="offset 4"):
        load_idx(img, tmp_path / "short_lbl")
    (tmp_path / "trunc").write_bytes(img.read_bytes()[:-5])
    with pytest.raises(DataFormatError, match="from offset 16"):
        read_idx_images(tmp_path / "trunc")


def test_blobs_zero_spread_and_determinism():
    means = blob_means(3, 5, 0.2, seed=1)
    ds = gen_blobs(50, means, 0.0, seed=2)
    np.testing.assert_array_equal(ds.inputs, means[ds.labels])
    a, b = gen_blobs(30, means, 0.1, 5), gen_blobs(30, means, 0.1, 5)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_blob_class_means_within_five_standard_errors():
    means = np.array([[0.4, 0.6], [0.6, 0.4]])
    ds = gen_blobs(4000, means, 0.05, seed=3)
    for c in range(2):
        rows = ds.inputs[ds.labels == c]
        assert np.all(np.abs(rows.mean(axis=0) - means[c]) < 5 * 0.05 / np.sqrt(len(rows)))


def test_antipodal_means_mirror_through_centre():
    means = blob_means(4, 6, 0.2, seed=0, antipodal=True)
    np.testing.assert_allclose(means[1], 1 - means[0])
    np.testing.assert_allclose(means[3], 1 - means[2])
    np.testing.assert_allclose(means.mean(axis=0), 0.5)


def test_ring_radius():
    ds = gen_ood_ring(100, 0.3, seed=0, dim=4)
    np.testing.assert_allclose(np.linalg.norm(ds.inputs - 0.5, axis=1), 0.3)


def test_uniform_noise():
    batch = uniform_noise_batch(10000, (1,), seed=4)
    assert batch.shape == (10000, 1)
    assert batch.min() >= 0 and batch.max() <= 1
    assert abs(batch.mean() - 0.5) <= 0.015
    np.testing.assert_array_equal(uniform_noise_batch(5, (2, 3), 9), uniform_noise_batch(5, (2, 3), 9))
    with pytest.raises(ValueError):
        uniform_noise_batch(0, (1,), 0)


def test_ladders_match_declared_values():
    assert GAUSSIAN_SIGMAS[1:] == (0.02, 0.05, 0.1, 0.2, 0.3)
    assert IMPULSE_PROBS[1:] == (0.01, 0.03, 0.07, 0.12, 0.2)
    assert CorruptionSpec("impulse", 3).severity == 0.07


def test_corruption_examples(rng):
    x = rng.random((4, 1, 28, 28))
    for kind in ("gaussian", "impulse"):
        np.testing.assert_array_equal(corrupt(x, CorruptionSpec(kind, 0), 1), x)
        for level in range(6):
            out = corrupt(x, CorruptionSpec(kind, level), level)
            assert out.min() >= 0 and out.max() <= 1
    flat = np.full((1, 1, 28, 28), 0.5)
    noisy = corrupt(flat, CorruptionSpec("gaussian", 3), seed=0)
    assert abs(noisy.var() / 0.1 ** 2 - 1) < 0.1


def test_impulse_saturation(rng):
    spec = CorruptionSpec("impulse", 5, ladder=(0, 0.2, 0.4, 0.6, 0.8, 1.0))
    out = corrupt(rng.random((100, 100)), spec, seed=0)
    assert set(np.unique(out)) <= {0.0, 1.0}
    assert abs(out.mean() - 0.5) < 5 * 0.005  # 0/1 each with probability 1/2


def test_custom_ladder_validation():
    assert CorruptionSpec("gaussian", 2, ladder=[0, 1, 2, 3, 4, 5]).severity == 2.0
    for bad in ((0.1, 1, 2, 3, 4, 5), (0, 1, 2), (0, 0.5, 0.5, 0.5, 0.5, 1.5)):
        with pytest.raises(ValueError):
            CorruptionSpec("impulse", 1, ladder=bad)


def test_corruption_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec("blur", 1)
    with pytest.raises(ValueError):
        CorruptionSpec("gaussian", 6)


def test_make_pair(rng):
    a = LabeledDataset(rng.random((2500, 3)), np.zeros(2500, dtype=int), "a")
    b = LabeledDataset(rng.random((2200, 3)), np.zeros(2200, dtype=int), "b")
    pair = make_pair(a, b, n_val=1000, seed=0)
    assert len(pair.val_in) == len(pair.val_ood) == 1000
    assert len(pair.val_in) + len(pair.in_dist_test) == 2500
    assert len(pair.val_ood) + len(pair.ood_test) == 2200
    assert not np.intersect1d(pair.index["val_in"], pair.index["test_in"]).size
    assert not np.intersect1d(pair.index["val_ood"], pair.index["test_ood"]).size
    again = make_pair(a, b, n_val=1000, seed=0)
    for k in pair.index:
        np.testing.assert_array_equal(pair.index[k], again.index[k])
    with pytest.raises(ValueError, match="need at least"):
        make_pair(a, b, n_val=1200, seed=0)


def test_overlapping_pair_rejected(rng):
    a = LabeledDataset(rng.random((20, 2)), np.zeros(20, dtype=int))
    pair = make_pair(a, a, n_val=5, seed=0)
    pair.index["test_in"] = np.r_[pair.index["test_in"], pair.index["val_in"][:1]]
    with pytest.raises(ValueError, match="both validation and test"):
        pair.check_disjoint()


def test_dataset_validation():
    with pytest.raises(ValueError, match="labels"):
        LabeledDataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        LabeledDataset(np.full((1, 2), 1.5), np.zeros(1))


def test_csv_export_round_trip(tmp_path, rng):
    ds = LabeledDataset(rng.random((4, 3)), np.array([0, 1, 2, 1]))
    export_csv(ds, tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "label,x0,x1,x2"
    np.testing.assert_array_equal(read_csv_inputs(tmp_path / "d.csv"), ds.inputs)


def test_gzipped_idx_is_read(tmp_path, rng):
    images = rng.integers(0, 256, (3, 4, 5)).astype(np.uint8)
    write_idx(tmp_path / "x", images)
    with gzip.open(tmp_path / "x.gz", "wb") as fh:
        fh.write((tmp_path / "x").read_bytes())
    np.testing.assert_array_equal(read_idx_images(tmp_path / "x.gz"), images)
