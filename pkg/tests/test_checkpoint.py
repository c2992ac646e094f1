import struct

import numpy as np
import pytest

from smoot.checkpoint import CheckpointFormatError, read_checkpoint, read_mask_state, write_checkpoint, write_mask_state
from smoot.models import MnistCNN


def test_round_trip_is_bit_exact(tmp_path):
    m = MnistCNN(seed=7)
    write_checkpoint(tmp_path / "c.smot", m.state_dict())
    back = read_checkpoint(tmp_path / "c.smot")
    assert list(back) == list(m.params)
    for k, p in m.params.items():
        assert back[k].dtype == np.float32 and back[k].tobytes() == p.data.tobytes()


def test_rebuild_model_from_state(tmp_path):
    m = MnistCNN(image_size=12, n_classes=4, conv1=3, conv2=5, hidden=7, seed=1, pool=2)
    write_checkpoint(tmp_path / "c.smot", m.state_dict())
    m2 = MnistCNN.from_state(read_checkpoint(tmp_path / "c.smot"), image_size=12)
    assert m2.pool == 2
    x = np.random.default_rng(0).random((2, 1, 12, 12)).astype(np.float32)
    from smoot.tensor import Tensor

    assert m2.forward(Tensor(x)).data.tobytes() == m.forward(Tensor(x)).data.tobytes()


def test_version_mismatch(tmp_path):
    write_checkpoint(tmp_path / "c.smot", {"a": np.zeros(2)})
    raw = bytearray((tmp_path / "c.smot").read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    (tmp_path / "c.smot").write_bytes(bytes(raw))
    with pytest.raises(CheckpointFormatError, match="version"):
        read_checkpoint(tmp_path / "c.smot")


def test_bad_magic(tmp_path):
    (tmp_path / "c.smot").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointFormatError):
        read_checkpoint(tmp_path / "c.smot")


def test_truncated(tmp_path):
    write_checkpoint(tmp_path / "c.smot", {"a": np.ones((3, 3))})
    raw = (tmp_path / "c.smot").read_bytes()
    (tmp_path / "c.smot").write_bytes(raw[:-5])
    with pytest.raises(CheckpointFormatError):
        read_checkpoint(tmp_path / "c.smot")


def test_mask_state_csv(tmp_path):
    write_mask_state(tmp_path / "k.csv", [(0, 392), (5, 156)])
    assert (tmp_path / "k.csv").read_text() == "sample_id,k\n0,392\n5,156\n"
    assert read_mask_state(tmp_path / "k.csv") == {0: 392, 5: 156}


def test_rebuild_infers_no_pool(tmp_path):
    m = MnistCNN(image_size=10, n_classes=3, conv1=2, conv2=3, hidden=4, pool=1)
    assert MnistCNN.from_state(m.state_dict(), image_size=10).pool == 1
    assert MnistCNN.from_state(m.state_dict()).input_shape == (1, 10, 10)
    with pytest.raises(ValueError):
        MnistCNN.from_state(m.state_dict(), image_size=11)
