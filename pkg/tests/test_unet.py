import numpy as np
import pytest

from cephreg import tensor as T
from cephreg.heatmap import Frame
from cephreg.loss import heatmap_loss
from cephreg.tensor import ShapeError, Tape, Tensor
from cephreg.unet import UNet, UNetConfig, build_unet, load_checkpoint, unet_forward

SMALL = UNetConfig(depth=2, base_channels=4, out_channels=20)


def closed_form_params(depth, base, k, cin, cout):
    total = 0
    c = cin
    for lvl in range(depth):
        w = base * 2 ** lvl
        total += (c * k * k + 1) * w + (w * k * k + 1) * w
        c = w
    b = base * 2 ** depth
    total += (c * k * k + 1) * b + (b * k * k + 1) * b
    for lvl in reversed(range(depth)):
        w = base * 2 ** lvl
        total += ((b + w) * k * k + 1) * w + (w * k * k + 1) * w
        b = w
    return total + (base + 1) * cout


def test_parameter_count_closed_form():
    m = build_unet(SMALL)
    assert m.num_parameters() == closed_form_params(2, 4, 3, 1, 20) == 7560
    assert len(set(m.params)) == len(m.params)


def test_same_seed_same_bytes():
    a, b = build_unet(SMALL, seed=3), build_unet(SMALL, seed=3)
    c = build_unet(SMALL, seed=4)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


def test_forward_shape_and_softmax():
    m = build_unet(SMALL)
    x = np.random.default_rng(0).normal(size=(1, 16, 24)).astype(np.float32)
    out = unet_forward(m, x, Frame.GLOBAL)
    assert out.shape == (20, 16, 24) and out.frame == Frame.GLOBAL
    assert np.max(np.abs(out.channels.sum(axis=0) - 1)) < 1e-6
    # fresh model: close to uniform
    assert out.channels.min() >= 0.02 and out.channels.max() <= 0.10


def test_indivisible_input_diagnostic():
    m = build_unet(SMALL)
    with pytest.raises(ShapeError, match=r"divisible by 4; pad by \(2, 1\)"):
        m(Tensor(np.zeros((1, 1, 14, 15), np.float32)))


def test_forward_padded_matches_size():
    m = build_unet(SMALL)
    y = m.forward_padded(Tensor(np.random.default_rng(1).normal(size=(2, 1, 13, 10)).astype(np.float32)))
    assert y.shape == (2, 20, 13, 10)


def test_config_validation():
    for bad in (dict(depth=0), dict(kernel_size=2), dict(out_channels=1), dict(base_channels=0)):
        with pytest.raises(ValueError):
            UNetConfig(**bad)


def test_every_parameter_receives_gradient():
    rng = np.random.default_rng(2)
    m = build_unet(SMALL, dtype=np.float64)
    target = rng.dirichlet(np.ones(20), size=(16, 16)).transpose(2, 0, 1)
    with Tape() as tape:
        loss = heatmap_loss(m(Tensor(rng.normal(size=(1, 16, 16)))), target)
    tape.backward(loss)
    for name, p in m.params.items():
        assert p.grad is not None and np.linalg.norm(p.grad) > 0, name


def test_save_load_bitwise(tmp_path):
    m = build_unet(SMALL, seed=5)
    opt = T.Adam(m.parameters())
    for p in m.parameters():
        p.grad = np.ones_like(p.data)
    opt.step()
    m.save(tmp_path / "m.ckpt", opt, extra={"note": "x"})
    m2, arrays, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert m2.config == m.config and meta["adam"]["t"] == 1 and meta["extra"] == {"note": "x"}
    x = Tensor(np.random.default_rng(3).normal(size=(1, 8, 8)).astype(np.float32))
    assert m(x).data.tobytes() == m2(x).data.tobytes()
    assert any(k.startswith("adam.m.") for k in arrays)
    assert UNet.load(tmp_path / "m.ckpt").num_parameters() == m.num_parameters()
