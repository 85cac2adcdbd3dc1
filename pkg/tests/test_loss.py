import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cephreg import tensor as T
from cephreg.loss import LossConfig, heatmap_loss, heatmap_loss_logits
from cephreg.tensor import NumericError, ShapeError, Tape, Tensor

from oracles import central_fd, loss_loop, rel_err


def px(v):
    return np.array(v, dtype=np.float64).reshape(1, 1, 1)


def random_stack(rng, c=20, h=8, w=8):
    pred = rng.dirichlet(np.ones(c), size=(h, w)).transpose(2, 0, 1)
    target = rng.uniform(size=(c, h, w)) * (rng.uniform(size=(c, h, w)) < 0.3)
    return pred, target


def test_perfect_prediction_is_zero():
    # only the 1e-7 clamp keeps this from being exactly 0
    assert 0 <= heatmap_loss(Tensor(px(1.0)), px(1.0)).item() < 1e-7
    assert heatmap_loss(Tensor(px(1.0)), px(1.0), LossConfig(clamp_eps=1e-300)).item() == 0.0


def test_hand_values():
    bce_only = LossConfig(focal_weight=0.0)
    focal_only = LossConfig(bce_weight=0.0)
    # each printed term is rounded to 6 decimals, so their printed sum carries +-1e-6
    assert abs(heatmap_loss(Tensor(px(0.5)), px(1.0), bce_only).item() - 0.346574) <= 5e-7
    assert abs(heatmap_loss(Tensor(px(0.5)), px(1.0), focal_only).item() - 0.021661) <= 5e-7
    assert abs(heatmap_loss(Tensor(px(0.5)), px(1.0)).item() - 0.368235) <= 1e-6
    assert abs(heatmap_loss(Tensor(px(0.1)), px(0.0)).item() - 1.317e-4) <= 5e-8


def test_matches_pixel_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p, t = random_stack(rng)
        assert abs(heatmap_loss(Tensor(p), t).item() - loss_loop(p, t)) < 1e-10


def test_batch_divides_by_n_only():
    rng = np.random.default_rng(1)
    p, t = random_stack(rng, 3, 4, 4)
    pb, tb = np.stack([p, p]), np.stack([t, t])
    assert abs(heatmap_loss(Tensor(pb), tb).item() - heatmap_loss(Tensor(p), t).item()) < 1e-12


def test_gate_switches_at_threshold():
    cfg = LossConfig()
    at = heatmap_loss(Tensor(px(0.3)), px(0.01), cfg).item()
    above = heatmap_loss(Tensor(px(0.3)), px(0.0100001), cfg).item()
    assert abs(at - loss_loop(px(0.3), px(0.01))) < 1e-15
    # at the gate value the focal term uses 1 - p (background form)
    assert abs(at - (-(0.5 * 0.01 * np.log(0.3) + 0.5 * 0.25 * 0.3 ** 2 * np.log(0.7)))) < 1e-15
    assert abs(above - loss_loop(px(0.3), px(0.0100001))) < 1e-15


def test_monotone_at_target_pixel():
    vals = [heatmap_loss(Tensor(px(p)), px(1.0)).item() for p in np.linspace(0.05, 0.999, 40)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_nonnegative(seed):
    p, t = random_stack(np.random.default_rng(seed), 4, 3, 3)
    assert heatmap_loss(Tensor(p), t).item() >= 0


def test_gradient_fd():
    rng = np.random.default_rng(2)
    p, t = random_stack(rng, 3, 3, 3)
    p = np.clip(p, 0.05, 0.95)
    leaf = Tensor(p.copy(), requires_grad=True)
    with Tape() as tape:
        loss = heatmap_loss(leaf, t)
    tape.backward(loss)
    for idx in np.ndindex(p.shape):
        num = central_fd(lambda: heatmap_loss(Tensor(p), t).item(), p, idx)
        assert rel_err(leaf.grad[idx], num) < 1e-4


def test_logit_form_equals_probability_form():
    rng = np.random.default_rng(3)
    logits = rng.normal(scale=2, size=(2, 5, 6, 6))
    _, t = random_stack(rng, 5, 6, 6)
    t = np.stack([t, t[::-1]])
    for cfg in (LossConfig(), LossConfig(full_bce=True), LossConfig(gamma=0.5, alpha_t=1.0)):
        a = heatmap_loss(T.channel_softmax(Tensor(logits)), t, cfg).item()
        b = heatmap_loss_logits(Tensor(logits), t, cfg).item()
        assert abs(a - b) < 1e-10 * max(1, abs(a))


def test_logit_form_gradient_fd():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(4, 3, 3))
    _, t = random_stack(rng, 4, 3, 3)
    leaf = Tensor(z.copy(), requires_grad=True)
    with Tape() as tape:
        loss = heatmap_loss_logits(leaf, t)
    tape.backward(loss)
    for idx in np.ndindex(z.shape):
        num = central_fd(lambda: heatmap_loss_logits(Tensor(z), t).item(), z, idx)
        assert rel_err(leaf.grad[idx], num) < 1e-4


def test_logit_form_keeps_gradient_when_saturated():
    z = np.zeros((2, 1, 1))
    z[1] = 40.0            # landmark channel 0 has p ~ 4e-18, far below the clamp
    t = np.zeros((2, 1, 1))
    t[0] = 1.0
    leaf = Tensor(z.copy(), requires_grad=True)
    with Tape() as tape:
        loss = heatmap_loss_logits(leaf, t)
    tape.backward(loss)
    assert leaf.grad[0, 0, 0] < -0.1


def test_focal_start_epoch_gate():
    p, t = random_stack(np.random.default_rng(5), 3, 4, 4)
    cfg = LossConfig(focal_start_epoch=60)
    bce_only = heatmap_loss(Tensor(p), t, LossConfig(focal_weight=0)).item()
    assert heatmap_loss(Tensor(p), t, cfg, epoch=10).item() == bce_only
    assert heatmap_loss(Tensor(p), t, cfg, epoch=60).item() == heatmap_loss(Tensor(p), t).item()


def test_errors():
    with pytest.raises(ShapeError):
        heatmap_loss(Tensor(np.full((2, 3, 3), 0.5)), np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        heatmap_loss(Tensor(px(0.5)), px(1.0), batch_size=0)
    with pytest.raises(NumericError):
        heatmap_loss(Tensor(px(np.nan)), px(1.0))
    for bad in (dict(gamma=-1), dict(alpha_t=0), dict(alpha_t=1.5), dict(target_gate=1.0)):
        with pytest.raises(ValueError):
            LossConfig(**bad)
