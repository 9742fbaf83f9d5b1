import numpy as np
import pytest

from flowcast.errors import CheckpointError, ConfigHashMismatch
from flowcast.nn import (
    Adam, Tensor, config_hash, load_checkpoint, save_checkpoint,
)


def make_params(rng):
    return {
        "w_e": Tensor(rng.normal(size=(16, 8)), requires_grad=True),
        "blocks.0.wq": Tensor(rng.normal(size=(8, 8)).astype(np.float32),
                              requires_grad=True),
        "bias": Tensor(np.zeros(8), requires_grad=True),
    }


def test_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = make_params(rng)
    config = {"layers": 2, "width": 8, "name": "demo"}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, config, rng_seed=42, extra={"epoch": 3})

    ckpt = load_checkpoint(path)
    assert set(ckpt.params) == set(params)
    for name, tensor in params.items():
        assert ckpt.params[name].data.dtype == tensor.data.dtype
        assert np.array_equal(ckpt.params[name].data, tensor.data)
    assert ckpt.config == config
    assert ckpt.rng_seed == 42
    assert ckpt.extra == {"epoch": 3}
    assert ckpt.config_hash == config_hash(config)


def test_save_is_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    params = make_params(rng)
    config = {"width": 8}
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    save_checkpoint(a, params, config)
    save_checkpoint(b, params, config)
    assert a.read_bytes() == b.read_bytes()


def test_config_hash_is_key_order_independent():
    assert config_hash({"a": 1, "b": [2, 3]}) == config_hash({"b": [2, 3], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_expected_config_mismatch(tmp_path):
    params = {"w": Tensor(np.ones(3), requires_grad=True)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, {"width": 8})
    load_checkpoint(path, expected_config={"width": 8})  # same config is fine
    with pytest.raises(ConfigHashMismatch):
        load_checkpoint(path, expected_config={"width": 16})


def test_optimizer_state_roundtrip(tmp_path):
    w = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(4):
        opt.zero_grad()
        (w ** 2.0).sum().backward()
        opt.step()

    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"w": w}, {"lr": 0.1}, optimizer_state=opt.state_dict())
    ckpt = load_checkpoint(path)

    w2 = ckpt.params["w"]
    opt2 = Adam({"w": w2}, lr=0.1)
    opt2.load_state_dict(ckpt.optimizer_state)

    # both copies take the same next step
    for o, p in ((opt, w), (opt2, w2)):
        o.zero_grad()
        (p ** 2.0).sum().backward()
        o.step()
    assert np.array_equal(w.data, w2.data)


def test_truncated_file_rejected(tmp_path):
    params = {"w": Tensor(np.ones(100), requires_grad=True)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, {})
    blob = path.read_bytes()
    path.write_bytes(blob[:-40])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_corrupted_header_rejected(tmp_path):
    params = {"w": Tensor(np.ones(4), requires_grad=True)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, {"width": 4})
    blob = bytearray(path.read_bytes())
    # flip a byte inside the json header region
    blob[24] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")
