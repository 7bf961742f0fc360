import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedleak import autodiff as ad
from fedleak import unet
from fedleak.autodiff import Tensor


def test_default_param_count_by_hand():
    # (cin*9 + 1) * cout per 3x3 conv, decoder convs see the concatenated skip
    convs = [(1, 8), (8, 8), (8, 16), (16, 16), (16, 32), (32, 32), (48, 16), (16, 16), (24, 8), (8, 8)]
    expected = sum((cin * 9 + 1) * cout for cin, cout in convs) + (8 + 1)
    assert expected == 29617
    assert unet.param_count(unet.UNetConfig()) == expected


def test_config_rejects_indivisible_size():
    with pytest.raises(ValueError, match="divisible"):
        unet.UNetConfig(image_size=30, depth=2)


def test_init_is_deterministic_and_bounded():
    arch = unet.UNetConfig()
    a, b = unet.init_weights(arch, 3), unet.init_weights(arch, 3)
    assert a.equals(b)
    assert not a.equals(unet.init_weights(arch, 4))
    for name, cin, cout, k in arch.layers():
        bound = np.sqrt(6.0 / (cin * k * k))
        assert np.abs(a[f"{name}.weight"]).max() <= bound
        assert not a[f"{name}.bias"].any()


def test_weights_are_read_only():
    w = unet.init_weights(unet.UNetConfig(), 0)
    with pytest.raises(ValueError):
        w["head.bias"][0] = 1.0


def test_forward_range_and_zero_weights():
    arch = unet.UNetConfig()
    img = np.random.default_rng(0).random((32, 32))
    out = unet.forward(unet.init_weights(arch, 0), img).data
    assert out.shape == (32, 32)
    assert ((out > 0) & (out < 1)).all()
    zero = unet.forward(unet.zero_weights(arch), img).data
    assert (zero == 0.5).all()


def test_forward_is_bit_identical_across_runs():
    arch = unet.UNetConfig()
    w = unet.init_weights(arch, 1)
    img = np.random.default_rng(1).random((32, 32))
    assert np.array_equal(unet.forward(w, img).data, unet.forward(w, img).data)


@pytest.mark.parametrize("size,depth,base", [(16, 1, 4), (16, 2, 2), (32, 3, 2)])
def test_forward_preserves_shape(size, depth, base):
    arch = unet.UNetConfig(size, depth, base)
    x = np.random.default_rng(0).random((2, size, size))
    assert unet.forward(unet.init_weights(arch, 0), x).shape == (2, size, size)


def test_forward_rejects_wrong_size():
    with pytest.raises(ad.ShapeError, match="forward"):
        unet.forward(unet.init_weights(unet.UNetConfig(), 0), np.zeros((16, 16)))


def test_seg_loss_examples():
    t = np.ones((4, 4))
    assert unet.seg_loss(Tensor(t), t).item() == 0.0
    assert unet.seg_loss(Tensor(np.full((4, 4), 0.5)), t).item() == 0.25


def test_seg_loss_matches_double_loop():
    rng = np.random.default_rng(5)
    p, t = rng.random((7, 9)), (rng.random((7, 9)) > 0.5).astype(float)
    acc = 0.0
    for i in range(7):
        for j in range(9):
            acc += (p[i, j] - t[i, j]) ** 2
    assert unet.seg_loss(Tensor(p), t).item() == pytest.approx(acc / 63, rel=0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_seg_loss_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    t = (rng.random((5, 5)) > 0.5).astype(float)
    p = rng.random((5, 5))
    assert unet.seg_loss(Tensor(p), t).item() > 0
    assert unet.seg_loss(Tensor(t), t).item() == 0


def test_weight_file_round_trip(tmp_path):
    for arch in (unet.UNetConfig(), unet.LinearConfig(), unet.ToyConvConfig()):
        w = unet.init_weights(arch, 2)
        unet.save_weights(w, tmp_path / "w.bin")
        back = unet.load_weights(tmp_path / "w.bin")
        assert back.arch == arch and back.equals(w)
        assert list(back) == list(w)


def test_weight_file_layout(tmp_path):
    import json
    import struct

    w = unet.init_weights(unet.ToyConvConfig(), 0)
    path = tmp_path / "w.bin"
    unet.save_weights(w, path)
    raw = path.read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen])
    payload = raw[8 + hlen :]
    for entry in header["tensors"]:
        arr = np.frombuffer(payload, "<f8", count=entry["nbytes"] // 8, offset=entry["offset"])
        np.testing.assert_array_equal(arr.reshape(entry["shape"]), w[entry["name"]])


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"\x00" * 4)
    with pytest.raises(ValueError, match="bad.bin"):
        unet.load_weights(p)
    good = tmp_path / "good.bin"
    unet.save_weights(unet.init_weights(unet.ToyConvConfig(), 0), good)
    p.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        unet.load_weights(p)


def test_loss_and_grads_match_finite_diff_on_toy():
    arch = unet.ToyConvConfig()
    w = unet.init_weights(arch, 0)
    rng = np.random.default_rng(0)
    x, y = rng.random((2, 6, 6)), (rng.random((2, 6, 6)) > 0.5).astype(float)
    _, g = unet.loss_and_grads(w, x, y)

    def f(a):
        return unet.loss_and_grads(w.replace({"conv1.weight": a}), x, y)[0]

    fd = ad.finite_diff(f, w["conv1.weight"], 1e-6)
    np.testing.assert_allclose(g["conv1.weight"], fd, rtol=1e-5, atol=1e-10)
