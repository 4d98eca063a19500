import numpy as np
import pytest

from pqpack.datasets import (
    GENERATORS,
    IdxFormatError,
    LabeledDataset,
    load_idx_dataset,
    make_glyph_digits,
    make_shapes,
    make_spirals,
    make_textures,
    read_idx_images,
    write_idx_images,
    write_idx_labels,
)


@pytest.mark.parametrize("name", sorted(GENERATORS))
def test_generators_are_deterministic(name):
    gen = GENERATORS[name]
    a = gen(64, seed=3)
    b = gen(64, seed=3)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.y, b.y)
    c = gen(64, seed=4)
    assert not np.array_equal(a.x, c.x)


@pytest.mark.parametrize("gen,shape,classes", [
    (make_spirals, (2,), 3),
    (make_glyph_digits, (2, 8, 8), 10),
    (make_textures, (1, 16, 16), 8),
    (make_shapes, (2, 8, 8), 4),
])
def test_generator_shapes_and_labels(gen, shape, classes):
    ds = gen(50, seed=0)
    assert ds.x.shape == (50, *shape)
    assert ds.x.dtype == np.float32
    assert ds.num_classes == classes
    assert ds.y.min() >= 0 and ds.y.max() < classes


def test_split_is_disjoint_and_seeded():
    ds = make_spirals(100, seed=1)
    tr, te = ds.split(0.1, seed=5)
    assert len(tr) + len(te) == 100
    assert len(te) == 10
    tr2, te2 = ds.split(0.1, seed=5)
    assert np.array_equal(te.x, te2.x)
    # every test row differs from every train row (generated points are
    # continuous, collisions have probability zero)
    for row in te.x:
        assert not (np.abs(tr.x - row).max(axis=1) < 1e-12).any()


def test_mismatched_lengths_rejected():
    with pytest.raises(ValueError, match="labels"):
        LabeledDataset(np.zeros((3, 2), np.float32), np.zeros(4, np.int64), 2)


def test_idx_round_trip(tmp_path, rng):
    images = rng.integers(0, 255, (100, 9, 7)).astype(np.uint8)
    labels = rng.integers(0, 5, 100).astype(np.uint8)
    ip, lp = tmp_path / "img.idx3", tmp_path / "lab.idx1"
    write_idx_images(ip, images)
    write_idx_labels(lp, labels)
    assert np.array_equal(read_idx_images(ip), images)
    ds = load_idx_dataset(ip, lp)
    assert ds.x.shape == (100, 1, 9, 7)
    assert ds.x.dtype == np.float32
    assert float(ds.x.max()) <= 1.0
    assert np.array_equal(ds.y, labels.astype(np.int64))
    assert ds.y.max() < ds.num_classes


def test_idx_truncated_file_names_byte_counts(tmp_path, rng):
    images = rng.integers(0, 255, (10, 4, 4)).astype(np.uint8)
    path = tmp_path / "img.idx3"
    write_idx_images(path, images)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) - 5])
    with pytest.raises(IdxFormatError, match=r"expected 176 bytes.*got 171"):
        read_idx_images(path)


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "bad.idx"
    path.write_bytes(b"\x00\x00\x09\x03" + b"\x00" * 12)
    with pytest.raises(IdxFormatError, match="magic"):
        read_idx_images(path)


def test_idx_label_image_count_mismatch(tmp_path, rng):
    ip, lp = tmp_path / "img.idx3", tmp_path / "lab.idx1"
    write_idx_images(ip, rng.integers(0, 255, (5, 2, 2)).astype(np.uint8))
    write_idx_labels(lp, rng.integers(0, 3, 6).astype(np.uint8))
    with pytest.raises(IdxFormatError, match="5 images but 6 labels"):
        load_idx_dataset(ip, lp)
