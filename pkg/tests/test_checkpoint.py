import numpy as np
import pytest
import torch

from sdpc.checkpoint import (
    Checkpoint,
    load_checkpoint,
    read_container,
    save_checkpoint,
    write_container,
)
from sdpc.data import fit_whitening
from sdpc.errors import DataError
from sdpc.learn import build_network


def make_checkpoint():
    net = build_network([(4, 3, 5, 5), (6, 4, 3, 3)], [2, 1], [0.4, 1.2], k_fb=0.5, seed=3)
    imgs = np.random.default_rng(0).standard_normal((4, 3, 12, 12))
    white = fit_whitening(imgs, patch_size=3, max_patches=500)
    return Checkpoint(net, epoch=7, seed=11, losses={"layer1.reconstruction_loss": 0.1},
                      whitening=white, meta={"dataset": "stl10"})


def test_container_header_layout(tmp_path):
    path = tmp_path / "c.sdpc"
    write_container(path, {"a": 1, "b": 0.1}, {"t": np.arange(6.0).reshape(2, 3)})
    raw = path.read_bytes()
    assert raw[:4] == b"SDPC"
    assert int.from_bytes(raw[4:8], "little") == 1
    n = int.from_bytes(raw[8:12], "little")
    assert raw[12:12 + n].decode() == "a=1\nb=0.1\ntensors=t\n"
    assert raw[12 + n:12 + n + 12] == (2).to_bytes(4, "little") + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    config, tensors = read_container(path)
    assert config["b"] == "0.1"
    np.testing.assert_array_equal(tensors["t"], np.arange(6.0).reshape(2, 3))
    assert tensors["t"].dtype == np.float32


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    ckpt = make_checkpoint()
    a, b = tmp_path / "a.sdpc", tmp_path / "b.sdpc"
    save_checkpoint(a, ckpt)
    loaded = load_checkpoint(a)
    save_checkpoint(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    assert loaded.epoch == 7 and loaded.seed == 11
    assert loaded.meta == {"dataset": "stl10"}
    assert loaded.losses == {"layer1.reconstruction_loss": 0.1}
    assert loaded.net.k_fb == 0.5 and loaded.net.layers[1].lam == 1.2
    assert loaded.net.layers[0].dictionary.stride == (2, 2)
    for d0, d1 in zip(ckpt.net.dictionaries, loaded.net.dictionaries):
        assert torch.equal(d0.atoms, d1.atoms)
    assert loaded.whitening.patch_size == 3 and loaded.whitening.channels == 3
    np.testing.assert_allclose(loaded.whitening.matrix, ckpt.whitening.matrix, rtol=1e-6)


def test_checkpoint_without_whitening(tmp_path):
    ckpt = make_checkpoint()
    ckpt.whitening = None
    save_checkpoint(tmp_path / "c", ckpt)
    assert load_checkpoint(tmp_path / "c").whitening is None


def test_malformed_files_raise(tmp_path):
    bad = tmp_path / "bad"
    bad.write_bytes(b"NOPE")
    with pytest.raises(DataError):
        read_container(bad)
    good = tmp_path / "good"
    save_checkpoint(good, make_checkpoint())
    truncated = tmp_path / "trunc"
    truncated.write_bytes(good.read_bytes()[:-10])
    with pytest.raises(DataError, match="truncated"):
        load_checkpoint(truncated)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "missing")


def test_invalid_names_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_container(tmp_path / "x", {}, {"a,b": np.zeros(1)})
    with pytest.raises(ValueError):
        write_container(tmp_path / "x", {"k": "two\nlines"}, {})
