import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cathtrack import tensor as T
from cathtrack.flow import (
    FlowConfig, FlowNet, correlation_volume, crop_for_flow, embed_flow, endpoint_error, flow_loss,
    lookup, upsample_flow, warp_point,
)
from cathtrack.synth import MotionModel, generate_sequence, make_flow_training_pair, uniform_flow
from cathtrack.tensor import GradTape, Tensor
from cathtrack.tensor.gradcheck import check_gradients
from cathtrack.tensor.optim import SGD


def _loop_corr(a, b, scale=True):
    # a, b: D×H×W
    d, h, w = a.shape
    out = np.zeros((h, w, h, w))
    for i in range(h):
        for j in range(w):
            for k in range(h):
                for l in range(w):
                    out[i, j, k, l] = sum(a[c, i, j] * b[c, k, l] for c in range(d))
    return out / math.sqrt(d) if scale else out


def test_correlation_matches_loop_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for trial in range(60):
        h, w, d = rng.integers(1, 7), rng.integers(1, 7), rng.integers(1, 5)
        a, b = rng.normal(size=(d, h, w)), rng.normal(size=(d, h, w))
        c0 = correlation_volume(a[None], b[None], levels=1)[0].data[0].reshape(h, w, h, w)
        assert np.abs(c0 - _loop_corr(a, b)).max() < 1e-12


def test_correlation_constant_and_orthogonal_features():
    c = correlation_volume(np.ones((1, 2, 4, 4)), np.ones((1, 2, 4, 4)), levels=1)[0].data
    assert np.allclose(c, math.sqrt(2), atol=1e-15)
    a = np.zeros((1, 2, 2, 2))
    b = np.zeros((1, 2, 2, 2))
    a[0, 0, 0, 0] = 1.0
    b[0, 1, 1, 1] = 1.0
    c = correlation_volume(a, b, levels=1)[0].data[0].reshape(2, 2, 2, 2)
    assert c[0, 0, 1, 1] == 0.0


def test_correlation_unscaled_toggle_and_dim_mismatch():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 2, 2))
    c = correlation_volume(a[None], b[None], levels=1, scale=False)[0].data[0].reshape(2, 2, 2, 2)
    assert np.abs(c - _loop_corr(a, b, scale=False)).max() < 1e-12
    with pytest.raises(ValueError):
        correlation_volume(np.zeros((1, 3, 4, 4)), np.zeros((1, 2, 4, 4)))


def test_pyramid_shapes():
    pyr = correlation_volume(np.ones((1, 4, 16, 24)), np.ones((1, 4, 16, 24)), levels=4)
    assert len(pyr) == 4
    for i, c in enumerate(pyr):
        assert c.shape == (1, 16 * 24, 16 // 2 ** i, 24 // 2 ** i)


def _features(seed=0, d=3, h=6, w=6):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(1, d, h, w)), rng.normal(size=(1, d, h, w))


def test_lookup_zero_flow_center_is_self_correlation():
    a, _ = _features()
    pyr = correlation_volume(a, a, levels=4)
    r = 3
    out = lookup(pyr, np.zeros((1, 2, 6, 6)), r).data
    assert out.shape == (1, 4 * 49, 6, 6)
    center = r * (2 * r + 1) + r
    self_corr = (a[0] ** 2).sum(axis=0) / math.sqrt(3)
    assert np.allclose(out[0, center], self_corr, atol=1e-12)


def test_lookup_integer_flow_shifts_window():
    a, b = _features(1)
    pyr = correlation_volume(a, b, levels=1)
    r = 2
    zero = lookup(pyr, np.zeros((1, 2, 6, 6)), r).data[0].reshape(5, 5, 6, 6)
    f = np.zeros((1, 2, 6, 6))
    f[0, 0] = 1.0
    one = lookup(pyr, f, r).data[0].reshape(5, 5, 6, 6)
    # window column dx under flow 1 equals column dx+1 under zero flow
    assert np.allclose(one[:, :-1], zero[:, 1:], atol=1e-12)


def test_lookup_fractional_flow_is_bilinear_average():
    a, b = _features(2)
    pyr = correlation_volume(a, b, levels=1)
    c0 = pyr[0].data[0].reshape(6, 6, 6, 6)
    f = np.zeros((1, 2, 6, 6))
    f[0, 0] = 0.5
    out = lookup(pyr, f, 1).data[0].reshape(3, 3, 6, 6)
    i, j = 2, 3
    # center sample of pixel (i, j): halfway between target cells (i, j) and (i, j+1)
    assert abs(out[1, 1, i, j] - 0.5 * (c0[i, j, i, j] + c0[i, j, i, j + 1])) < 1e-12


def test_lookup_out_of_bounds_is_zero():
    a, b = _features(3, h=2, w=2)
    pyr = correlation_volume(a, b, levels=1)
    f = np.full((1, 2, 2, 2), 10.0)
    assert np.all(lookup(pyr, f, 1).data == 0.0)


# -- network --------------------------------------------------------------------------

def tiny_flow(**kw):
    base = dict(stride=4, dim=8, blocks=2, levels=2, radius=1, iters=2, hidden=8)
    base.update(kw)
    return FlowConfig(**base)


def test_refine_flow_additive_and_initial_zero():
    net = FlowNet(tiny_flow(iters=3), seed=0)
    rng = np.random.default_rng(0)
    field, history = net(rng.random((1, 16, 16)), rng.random((1, 16, 16)))
    assert field.iters == 3
    total = np.zeros_like(field.flow)
    for delta, f in zip(field.deltas, history):
        total = total + delta
        assert np.array_equal(f.data, total)
    assert np.array_equal(field.flow, sum(field.deltas))


def test_refine_flow_rejects_zero_iterations():
    net = FlowNet(tiny_flow())
    with pytest.raises(ValueError):
        net(np.zeros((16, 16)), np.zeros((16, 16)), iters=0)


def test_flow_loss_gradients():
    # one iteration: the lookup grid is the fixed zero-flow grid, so the stop-gradient
    # on lookup positions does not separate tape and finite differences
    net = FlowNet(tiny_flow(iters=1), seed=1)
    rng = np.random.default_rng(2)
    # zero biases on constant background put relu pre-activations exactly on the kink
    for name, p in net.named_parameters():
        if name.endswith("bias"):
            p.data = rng.normal(0.0, 0.1, p.shape)
    m = (rng.random((2, 16, 16)) > 0.6).astype(float)
    m2 = np.roll(m, 1, axis=2)
    target = np.stack([uniform_flow((16, 16), 1, 0)] * 2)

    def loss():
        _, hist = net(m, m2)
        return flow_loss(hist, target, m, 4)

    assert check_gradients(loss, net.parameters(), h=1e-6, max_probes=4, seed=0) < 1e-3


def test_flow_loss_strictly_decreases_on_fixed_batch():
    rec = generate_sequence(3, 2, "fluoro", MotionModel.still(), size=64, noise=False)
    m = rec.frames[0].mask_gt
    pairs = [make_flow_training_pair(m, uniform_flow(m.shape, du, dv)) for du, dv in ((2, 1), (-1, 2))]
    a = np.stack([p[0] for p in pairs])
    b = np.stack([p[1] for p in pairs])
    tgt = np.stack([p[2] for p in pairs])
    net = FlowNet(tiny_flow(), seed=0)
    opt = SGD(net.parameters(), lr=2e-4, momentum=0.0)
    losses = []
    for _ in range(100):
        net.zero_grad()
        with GradTape() as tape:
            _, hist = net(a, b)
            loss = flow_loss(hist, tgt, a, 4)
        tape.backward(loss)
        opt.step()
        losses.append(loss.item())
    assert all(y < x for x, y in zip(losses, losses[1:]))


# -- warping and cropping ---------------------------------------------------------------------

def test_warp_point_zero_and_uniform_flow():
    assert warp_point((5.25, 7.5), np.zeros((2, 16, 16))).point == (5.25, 7.5)
    assert warp_point((5.0, 7.0), uniform_flow((16, 16), 2, 3)).point == (7.0, 10.0)


def test_warp_point_fractional_location_matches_hand_bilinear():
    f = np.zeros((2, 4, 4))
    f[0] = np.arange(16.0).reshape(4, 4)
    f[1] = np.arange(16.0).reshape(4, 4).T
    p = (1.25, 2.5)
    # hand interpolation between columns 1,2 and rows 2,3
    du = 0.75 * 0.5 * f[0, 2, 1] + 0.25 * 0.5 * f[0, 2, 2] + 0.75 * 0.5 * f[0, 3, 1] + 0.25 * 0.5 * f[0, 3, 2]
    dv = 0.75 * 0.5 * f[1, 2, 1] + 0.25 * 0.5 * f[1, 2, 2] + 0.75 * 0.5 * f[1, 3, 1] + 0.25 * 0.5 * f[1, 3, 2]
    got = warp_point(p, f).point
    assert abs(got[0] - (p[0] + du)) < 1e-12 and abs(got[1] - (p[1] + dv)) < 1e-12


def test_warp_point_clamps_and_renders_heatmap():
    res = warp_point((14.0, 1.0), uniform_flow((16, 16), 5, -4), shape=(16, 16), heatmap_size=16)
    assert res.clamped and res.point == (15.0, 0.0)
    assert res.heatmap[0, 15] == 1.0


def test_upsample_flow_scales_magnitude():
    f = np.ones((2, 4, 4)) * 0.5
    up = upsample_flow(f, 4)
    assert up.shape == (2, 16, 16)
    assert np.allclose(up, 2.0)


def test_crop_full_masks_is_identity():
    m = np.ones((64, 64))
    c = crop_for_flow(m, m)
    assert c.offset == (0, 0) and c.prev.shape == (64, 64) and not c.full


def test_crop_single_blob():
    m = np.zeros((128, 128))
    m[40:50, 70:75] = 1.0
    c = crop_for_flow(m, np.zeros_like(m), margin=16, multiple=32)
    # rows 24..65 -> 0..96; cols 54..90 -> 32..96
    assert c.offset == (32, 0)
    assert c.prev.shape == (96, 64)


def test_crop_empty_masks_flagged():
    c = crop_for_flow(np.zeros((32, 32)), np.zeros((32, 32)))
    assert c.full and c.offset == (0, 0)
    with pytest.raises(ValueError):
        crop_for_flow(np.zeros((32, 32)), np.zeros((32, 16)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 40), st.integers(0, 40), st.floats(-3, 3), st.floats(-3, 3),
       st.floats(0, 1), st.floats(0, 1))
def test_warp_crop_round_trip(r, c, du, dv, fu, fv):
    m = np.zeros((96, 96))
    m[r + 20:r + 30, c + 20:c + 26] = 1.0
    crop = crop_for_flow(m, m)
    ch, cw = crop.prev.shape
    rng = np.random.default_rng(r * 97 + c)
    local = np.stack([np.full((ch, cw), du), np.full((ch, cw), dv)]) + rng.normal(0, 0.5, (2, ch, cw))
    full = embed_flow(local, crop.offset, m.shape)
    tip = (c + 22 + fu, r + 25 + fv)
    a = warp_point(tip, full).point
    local_tip = (tip[0] - crop.offset[0], tip[1] - crop.offset[1])
    b = warp_point(local_tip, local).point
    assert abs(a[0] - (b[0] + crop.offset[0])) < 1e-9
    assert abs(a[1] - (b[1] + crop.offset[1])) < 1e-9


def test_endpoint_error():
    t = uniform_flow((4, 4), 3, 4)
    assert endpoint_error(np.zeros((2, 4, 4)), t, np.ones((4, 4))) == 5.0
    assert endpoint_error(np.zeros((2, 4, 4)), t, np.zeros((4, 4))) == 0.0
