import gzip
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoot.data import (
    ConsistencyError,
    Dataset,
    IDXFormatError,
    PlantedSpec,
    batch_iter,
    generate_planted,
    load_idx,
    load_split,
    read_idx,
    save_split,
    write_idx,
)
from smoot.evaluation import top_n_accuracy
from smoot.models import LinearModel
from smoot.training import TrainConfig, train

MNIST = Path(__file__).resolve().parents[1] / "data" / "mnist"


def _idx_bytes(magic, dims, body):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(body)


def test_one_pixel_fixture_scales_to_one(tmp_path):
    (tmp_path / "i").write_bytes(_idx_bytes(0x803, (1, 1, 1), [255]))
    (tmp_path / "l").write_bytes(_idx_bytes(0x801, (1,), [7]))
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (1, 1, 1, 1) and ds.images[0, 0, 0, 0] == 1.0
    assert ds.labels.tolist() == [7]


def test_labels_with_image_magic_rejected(tmp_path):
    (tmp_path / "i").write_bytes(_idx_bytes(0x803, (1, 1, 1), [0]))
    (tmp_path / "l").write_bytes(_idx_bytes(0x803, (1,), [0]))
    with pytest.raises(IDXFormatError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_count_mismatch(tmp_path):
    (tmp_path / "i").write_bytes(_idx_bytes(0x803, (2, 1, 1), [0, 1]))
    (tmp_path / "l").write_bytes(_idx_bytes(0x801, (1,), [0]))
    with pytest.raises(ConsistencyError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_truncated_body(tmp_path):
    (tmp_path / "i").write_bytes(_idx_bytes(0x803, (2, 2, 2), [0, 1, 2]))
    with pytest.raises(OSError):
        read_idx(tmp_path / "i")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6), st.booleans(), st.integers(0, 2**32 - 1))
def test_idx_round_trip(n, h, w, gz, seed):
    import tempfile

    arr = np.random.default_rng(seed).integers(0, 256, (n, h, w), dtype=np.uint8)
    with tempfile.TemporaryDirectory() as d:
        p = Path(d) / ("a.gz" if gz else "a")
        write_idx(p, arr)
        assert (p.read_bytes()[:2] == b"\x1f\x8b") == gz
        np.testing.assert_array_equal(read_idx(p, 0x803), arr)


def test_gzip_is_reproducible(tmp_path):
    arr = np.arange(12, dtype=np.uint8).reshape(1, 3, 4)
    write_idx(tmp_path / "a.gz", arr)
    first = (tmp_path / "a.gz").read_bytes()
    write_idx(tmp_path / "a.gz", arr)
    assert first == (tmp_path / "a.gz").read_bytes()
    assert gzip.decompress(first)[:4] == b"\x00\x00\x08\x03"


@pytest.mark.skipif(not (MNIST / "t10k-images-idx3-ubyte.gz").exists(), reason="MNIST files absent")
def test_official_mnist_test_split():
    ds = load_split(MNIST, "test")
    assert ds.images.shape == (10000, 1, 28, 28)
    assert ds.images.dtype == np.float32
    assert 0.0 <= ds.images.min() and ds.images.max() == 1.0
    assert np.bincount(ds.labels).tolist() == [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]


# ---------------------------------------------------------------------------
# planted data
# ---------------------------------------------------------------------------

def test_planted_noise_zero_is_exact():
    ds = generate_planted(PlantedSpec(noise=0.0), 12)
    assert np.all(ds.images[ds.masks] == 1.0)
    assert np.all(ds.images[~ds.masks] == 0.0)


def test_planted_is_reproducible():
    a = generate_planted(PlantedSpec(), 20, seed=3)
    b = generate_planted(PlantedSpec(), 20, seed=3)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tolist() == b.labels.tolist()


def test_planted_patch_position_follows_label():
    spec = PlantedSpec(image_size=10, patch_size=2, n_classes=3, locations=[(0, 0), (4, 4), (8, 8)], noise=0.3)
    ds = generate_planted(spec, 9)
    for m, y in zip(ds.masks, ds.labels):
        r, c = spec.locations[y]
        assert m[0, r:r + 2, c:c + 2].all() and m.sum() == 4


def test_planted_patch_out_of_bounds():
    with pytest.raises(ValueError):
        PlantedSpec(image_size=8, patch_size=4, n_classes=1, locations=[(5, 0)])


def test_planted_linear_model_learns():
    spec = PlantedSpec(image_size=8, patch_size=2, n_classes=4)
    ds = generate_planted(spec, 200)
    model = LinearModel(ds.images.shape[1:], 4, seed=0)
    steps = []
    train(ds, TrainConfig(method="traditional", epochs=10, batch_size=40, n=3, optimizer="sgd", tau=0.5),
          model=model, step_callback=lambda *a: steps.append(1))
    assert len(steps) == 50
    assert top_n_accuracy(model, ds) == 100.0


def test_save_split_round_trip(tmp_path):
    ds = generate_planted(PlantedSpec(noise=0.0), 8)
    save_split(tmp_path, ds, "train")
    back = load_split(tmp_path, "train", n_classes=4)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.masks, ds.masks)
    assert back.labels.tolist() == ds.labels.tolist()


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def _toy(n):
    return Dataset(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), np.arange(n) % 3, ids=np.arange(n) + 100)


def test_single_batch_identity():
    ds = _toy(7)
    (ids, x, y), = list(batch_iter(ds, 7))
    assert ids.tolist() == ds.ids.tolist() and x.tobytes() == ds.images.tobytes()


def test_no_shuffle_keeps_order():
    ids = np.concatenate([b[0] for b in batch_iter(_toy(10), 3)])
    assert ids.tolist() == list(range(100, 110))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 50), st.integers(0, 1000))
def test_shuffled_batches_partition(n, bs, seed):
    ds = _toy(n)
    batches = list(batch_iter(ds, bs, shuffle=True, seed=seed))
    ids = np.concatenate([b[0] for b in batches])
    assert sorted(ids.tolist()) == ds.ids.tolist()
    assert all(len(b[0]) == bs for b in batches[:-1])
    for i, x, _ in batches:
        np.testing.assert_array_equal(x[:, 0, 0, 0], i - 100)
