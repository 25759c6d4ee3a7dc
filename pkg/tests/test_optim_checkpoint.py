import math

import numpy as np
import pytest

from fusedlm.checkpoint import MAGIC, file_digest, load_arrays, save_arrays
from fusedlm.errors import CheckpointError
from fusedlm.numcore import Tensor
from fusedlm.optim import OptimizerState, adamw_step, clip_grad_norm, cosine_lr


def test_adamw_matches_scalar_recurrence():
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.99, 1e-8, 0.1
    p = Tensor(np.array([0.5]), requires_grad=True)
    state = OptimizerState()
    theta, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate([0.3, -1.2, 0.05, 2.0, -0.7], start=1):
        adamw_step({"p": p}, {"p": np.array([g])}, state, lr, b1, b2, eps, wd)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta * (1 - lr * wd) - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert p.data[0] == pytest.approx(theta, abs=1e-15)
    assert state.step == 5


def test_adamw_skips_params_without_grad():
    a, b = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    adamw_step({"a": a, "b": b}, {"a": np.ones(2)}, OptimizerState(), 0.1, weight_decay=0.5)
    assert np.all(b.data == 1.0) and np.all(a.data < 1.0)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 3e-4) == pytest.approx(3e-4)
    assert cosine_lr(50, 100, 3e-4) == pytest.approx(1.5e-4)
    assert cosine_lr(100, 100, 3e-4) == pytest.approx(0.0, abs=1e-20)
    lrs = [cosine_lr(s, 100, 1.0) for s in range(101)]
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1.0)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    small = {"a": np.array([0.1])}
    clip_grad_norm(small, 1.0)
    assert small["a"][0] == 0.1


def test_checkpoint_roundtrip(tmp_path, rng):
    arrays = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5)}
    path = tmp_path / "x.ckpt"
    save_arrays(path, "specialist", {"d": 1}, arrays, {"note": "hi"})
    header, back = load_arrays(path)
    assert header["kind"] == "specialist" and header["meta"] == {"note": "hi"}
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    assert path.read_bytes()[:8] == MAGIC
    digest = file_digest(path)
    save_arrays(path, "specialist", {"d": 1}, arrays, {"note": "hi"})
    assert file_digest(path) == digest
    assert not (tmp_path / "x.ckpt.tmp").exists()


def test_checkpoint_detects_corruption(tmp_path):
    path = tmp_path / "x.ckpt"
    save_arrays(path, "k", {}, {"a": np.arange(10.0)})
    raw = bytearray(path.read_bytes())
    raw[-40] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_arrays(path)
    path.write_bytes(b"not a checkpoint at all, really not one" * 2)
    with pytest.raises(CheckpointError):
        load_arrays(path)
    with pytest.raises(CheckpointError):
        load_arrays(tmp_path / "missing.ckpt")


def test_adamw_first_step_is_signed_lr(rng):
    g = rng.normal(size=6)
    p = Tensor(np.zeros(6), requires_grad=True)
    adamw_step({"p": p}, {"p": g}, OptimizerState(), 0.01, eps=1e-8)
    np.testing.assert_allclose(p.data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adamw_weight_decay_only_shrinks():
    p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
    adamw_step({"p": p}, {"p": np.zeros(2)}, OptimizerState(), 0.1, weight_decay=0.5)
    np.testing.assert_allclose(p.data, [2.0 * 0.95, -4.0 * 0.95], rtol=1e-15)
