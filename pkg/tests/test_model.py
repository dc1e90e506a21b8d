import struct

import numpy as np
import pytest

from gearcnn import model as M
from gearcnn import ndcore as nd
from gearcnn.exceptions import FormatError, ShapeError, UsageError


@pytest.fixture(scope="module")
def params():
    return M.init_params(42)


def frames(n, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 3, 200)).astype(np.float32)


def test_parameter_count(params):
    assert M.parameter_count(params) == 29_285
    assert params["conv1_w"].size == 9_216
    assert params["fc_w"].size + params["fc_b"].size == 165
    conv = sum(params[n].size for n in M.CONV_LAYERS)
    bn = sum(params[f"{b}.{f}"].size for b in M.BN_LAYERS for f in ("gamma", "beta"))
    assert (conv, bn) == (9216 + 12288 + 3072 + 4096, 448)


def test_biased_variant_would_count_29509():
    arch = M.DEFAULT_ARCH
    conv_biases = arch.conv1_filters + 3 * arch.res_filters
    assert 29_285 + conv_biases == 29_509


def test_init_deterministic_and_he_scaled():
    a, b = M.init_params(7), M.init_params(7)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert M.init_params(8)["conv1_w"].tobytes() != a["conv1_w"].tobytes()
    assert np.sqrt(2 / 72) == pytest.approx(0.1667, abs=1e-4)
    assert a["conv1_w"].std() == pytest.approx(np.sqrt(2 / 72), rel=0.05)
    for bn in M.BN_LAYERS:
        assert np.all(a[f"{bn}.gamma"] == 1.0) and np.all(a[f"{bn}.beta"] == 0.0)
        assert np.all(a[f"{bn}.running_var"] == 1.0) and np.all(a[f"{bn}.running_mean"] == 0.0)
    assert np.all(a["fc_b"] == 0)


def test_shape_chain():
    chain = M.DEFAULT_ARCH.shape_chain()
    assert chain["conv1"] == (128, 89)
    assert chain["maxpool"] == (128, 29)
    assert chain["residual"] == (32, 29)
    assert chain["gap"] == (32,)
    assert chain["logits"] == (5,)


def test_forward_shapes(params):
    p = M.copy_params(params)
    logits, cache = M.forward(p, frames(32), train=True)
    assert logits.shape == (32, 5)
    assert cache["pool"][0].shape == (32, 128, 29)
    assert cache["gap"] == (32, 32, 29)
    logits, cache = M.forward(params, frames(4), train=False)
    assert logits.shape == (4, 5) and cache is None


def test_forward_rejects_bad_frames(params):
    with pytest.raises(ShapeError):
        M.forward(params, np.zeros((2, 2, 200), np.float32))
    with pytest.raises(ShapeError):
        M.forward(params, np.zeros((2, 3, 199), np.float32))


def test_eval_forward_is_pure(params):
    x = frames(8)
    before = {k: v.copy() for k, v in params.items()}
    a, _ = M.forward(params, x)
    b, _ = M.forward(params, x)
    assert a.tobytes() == b.tobytes()
    assert all(before[k].tobytes() == params[k].tobytes() for k in params)


def test_train_forward_updates_running_stats():
    p = M.init_params(1)
    M.forward(p, frames(4), train=True)
    assert not np.all(p["bn1.running_mean"] == 0)


def test_predict_tie_break_and_partitioning(params):
    probs = np.array([[0.2] * 5, [0.01, 0.9, 0.03, 0.03, 0.03]])
    assert list(probs.argmax(axis=1)) == [0, 1]
    x = frames(50, seed=3)
    labels, probs = M.predict(params, x)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    for bs in (1, 7, 50):
        np.testing.assert_array_equal(M.predict(params, x, batch_size=bs)[0], labels)


def test_full_model_gradients_tiny_config():
    errors = [M.grad_check_model(seed) for seed in range(20)]
    assert max(errors) < 1e-3, errors


def test_tiny_config_dimensions():
    arch = M.Architecture.tiny()
    assert arch.conv1_filters == 8 and arch.length == 20
    p = M.init_params(0, arch, np.float64)
    logits, _ = M.forward(p, np.zeros((2, 3, 20)), arch=arch)
    assert logits.shape == (2, 5)


def test_duplicate_sample_has_identical_dlogits(params):
    p = M.copy_params(params)
    x = frames(4)
    x[3] = x[1]
    logits, cache = M.forward(p, x, train=True)
    _, _, dlogits = nd.softmax_xent(logits, np.array([0, 2, 4, 2]))
    np.testing.assert_array_equal(dlogits[1], dlogits[3])
    loss, grads = M.loss_and_grads(p, cache, logits, np.array([0, 2, 4, 2]))
    assert np.isfinite(loss)
    assert list(grads) == M.trainable_names(p)
    assert all(grads[k].shape == p[k].shape for k in grads)


def test_zero_gamma_blocks_conv1_gradient():
    p = M.init_params(3)
    p["bn1.gamma"][:] = 0
    logits, cache = M.forward(p, frames(4), train=True)
    _, grads = M.loss_and_grads(p, cache, logits, np.array([0, 1, 2, 3]))
    assert np.abs(grads["conv1_w"]).max() < 1e-12
    assert np.abs(grads["fc_b"]).max() > 0


def test_loss_and_grads_usage_errors(params):
    p = M.copy_params(params)
    logits, cache = M.forward(p, frames(2), train=True)
    with pytest.raises(UsageError):
        M.loss_and_grads(p, None, logits, [0, 1])
    with pytest.raises(UsageError):
        M.loss_and_grads(p, cache, logits.copy(), [0, 1])
    with pytest.raises(UsageError):
        M.loss_and_grads(p, cache, logits, [0, 1, 2])
    M.loss_and_grads(p, cache, logits, [0, 1])
    with pytest.raises(UsageError):
        M.loss_and_grads(p, cache, logits, [0, 1])


# --------------------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, params):
    path = tmp_path / "m.vck"
    opt = {"m": {"fc_b": np.arange(5, dtype=np.float32)}, "v": {"fc_b": np.ones(5, np.float32)}, "t": 17}
    M.save_checkpoint(path, params, opt)
    loaded, lopt = M.load_checkpoint(path)
    assert list(loaded) == list(params)
    assert all(loaded[k].tobytes() == params[k].tobytes() for k in params)
    assert lopt["t"] == 17 and lopt["m"]["fc_b"].tobytes() == opt["m"]["fc_b"].tobytes()
    x = frames(6)
    assert M.forward(loaded, x)[0].tobytes() == M.forward(params, x)[0].tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "one.vck"
    M.save_checkpoint(path, {"fc_b": np.array([1.5, -2.0], np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == b"VCK1"
    assert struct.unpack("<HH", raw[4:8]) == (1, 1)
    assert struct.unpack("<H", raw[8:10]) == (4,)
    assert raw[10:14] == b"fc_b"
    assert raw[14] == 1 and struct.unpack("<I", raw[15:19]) == (2,)
    assert np.frombuffer(raw[19:], "<f4").tolist() == [1.5, -2.0]


def test_checkpoint_without_optimizer(tmp_path, params):
    M.save_checkpoint(tmp_path / "p.vck", params)
    assert M.load_checkpoint(tmp_path / "p.vck")[1] is None


def test_checkpoint_corruption(tmp_path, params):
    path = tmp_path / "m.vck"
    M.save_checkpoint(path, params)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError) as exc:
        M.load_checkpoint(path)
    assert exc.value.offset == 0
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError, match="truncated") as exc:
        M.load_checkpoint(path)
    assert exc.value.offset is not None
    path.write_bytes(raw[:4] + struct.pack("<HH", 2, 0))
    with pytest.raises(FormatError, match="version"):
        M.load_checkpoint(path)
