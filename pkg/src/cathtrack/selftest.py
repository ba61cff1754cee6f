"""Built-in oracle and gradient suite, runnable without pytest.

Each check returns ``(ok, detail)``; :func:`run` prints one line per check
and returns the number of failures.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import tensor as T
from .flow import FlowConfig, FlowNet, correlation_volume, crop_for_flow, embed_flow, flow_loss, warp_point
from .fusion import Refiner, fuse_score, refine_loss
from .localizer import Localizer, LocalizerConfig, LossWeights, attention, spatial_loss
from .losses import bce, bce_logits, dice
from .metrics import EvalConfig, SequenceResult, evaluate
from .synth import make_flow_training_pair, uniform_flow
from .tensor import Tensor
from .tensor.gradcheck import check_gradients

GRAD_TOL = 1e-3


def _rand(rng, *shape, positive=False):
    x = rng.normal(size=shape)
    return Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)


def op_cases(rng) -> list:
    """``(name, build)``; ``build()`` returns ``(params, scalar-loss closure)``."""
    cases = []

    def binary(fn, positive=False):
        def build():
            a, b = _rand(rng, 3, 4, positive=positive), _rand(rng, 4, positive=positive)
            proj = rng.normal(size=(3, 4))
            return [a, b], lambda: (fn(a, b) * proj).sum()
        return build

    def unary(fn, positive=False, away_from_zero=False):
        def build():
            a = _rand(rng, 4, 5, positive=positive)
            if away_from_zero:
                a.data = a.data + np.sign(a.data) * 0.1
            proj = rng.normal(size=(4, 5))
            return [a], lambda: (fn(a) * proj).sum()
        return build

    def shaped(shape_in, shape_out, fn):
        def build():
            x = _rand(rng, *shape_in)
            proj = rng.normal(size=shape_out)
            return [x], lambda: (fn(x) * proj).sum()
        return build

    def matmul():
        a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
        proj = rng.normal(size=(2, 3, 5))
        return [a, b], lambda: (T.matmul(a, b) * proj).sum()

    def layer_norm():
        a, g, b = _rand(rng, 3, 5), _rand(rng, 5), _rand(rng, 5)
        proj = rng.normal(size=(3, 5))
        return [a, g, b], lambda: (T.layer_norm(a, g, b) * proj).sum()

    def conv():
        x, w, b = _rand(rng, 2, 2, 6, 5), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
        proj = rng.normal(size=(2, 3, 3, 3))
        return [x, w, b], lambda: (T.conv2d(x, w, b, stride=2, padding=1) * proj).sum()

    def concat():
        a, b = _rand(rng, 2, 3), _rand(rng, 2, 2)
        proj = rng.normal(size=(5, 2))
        return [a, b], lambda: (T.concat([a, b], axis=1).reshape(5, 2) * proj).sum()

    def bilinear():
        img = _rand(rng, 2, 5, 5)
        u, v = rng.uniform(-0.5, 4.5, size=(2, 7)), rng.uniform(-0.5, 4.5, size=(2, 7))
        proj = rng.normal(size=(2, 7))
        return [img], lambda: (T.bilinear_sample(img, u, v) * proj).sum()

    cases += [("add", binary(T.add)), ("sub", binary(T.sub)), ("mul", binary(T.mul)),
              ("div", binary(T.div, positive=True)),
              ("sigmoid", unary(T.sigmoid)), ("softplus", unary(T.softplus)),
              ("relu", unary(T.relu, away_from_zero=True)), ("tanh", unary(T.tanh)),
              ("exp", unary(T.exp)), ("log", unary(T.log, positive=True)),
              ("sqrt", unary(T.sqrt, positive=True)), ("pow", unary(lambda a: a ** 3)),
              ("matmul", matmul), ("softmax_rows", shaped((3, 6), (3, 6), T.softmax_rows)),
              ("layer_norm", layer_norm), ("conv2d", conv),
              ("avg_pool", shaped((2, 6, 6), (2, 3, 3), lambda x: T.avg_pool(x, 2))),
              ("concat_reshape", concat), ("getitem", shaped((4, 6), (2, 3), lambda x: x[1:3, ::2])),
              ("bilinear_sample", bilinear),
              ("resize_bilinear", shaped((2, 3, 4), (2, 6, 8), lambda x: T.resize_bilinear(x, 6, 8))),
              ("upsample_nearest", shaped((2, 3, 3), (2, 6, 6), lambda x: T.upsample_nearest(x, 2))),
              ("mean", shaped((3, 4), (4,), lambda x: x.mean(axis=0)))]
    return cases


def _random_biases(module, rng):
    # zero biases on constant inputs sit exactly on relu kinks
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data = rng.normal(0.0, 0.1, p.shape)


def loss_cases() -> list:
    """Composite losses at tiny configs, as ``(name, build)``."""

    def localizer_loss():
        cfg = LocalizerConfig(search_size=32, template_size=16, channels=(8, 8, 8, 8), stride=8, d_model=8,
                              heads=2, enc_layers=1, dec_layers=1, fcn_widths=(8,) * 6)
        m = Localizer(cfg, seed=0)
        rng = np.random.default_rng(0)
        s = rng.random((2, 32, 32))
        ts = [rng.random((2, 16, 16)), rng.random((2, 16, 16))]
        masks = [(rng.random((32, 32)) > 0.7).astype(float), None]
        return m.parameters(), lambda: spatial_loss(m(s, ts), [(10.0, 12.5), (20.0, 5.0)], masks, LossWeights())

    def tip_terms():
        rng = np.random.default_rng(1)
        z = _rand(rng, 2, 6, 6)
        t = rng.random((2, 6, 6))
        return [z], lambda: bce(t, T.sigmoid(z)) + bce_logits(t, z) + dice(t, T.sigmoid(z))

    def flow_l1():
        cfg = FlowConfig(stride=4, dim=8, blocks=2, levels=2, radius=1, iters=1, hidden=8)
        net = FlowNet(cfg, seed=1)
        rng = np.random.default_rng(2)
        _random_biases(net, rng)
        m = (rng.random((2, 16, 16)) > 0.6).astype(float)
        m2 = np.roll(m, 1, axis=2)
        target = np.stack([uniform_flow((16, 16), 1, 0)] * 2)

        def fn():
            _, hist = net(m, m2)
            return flow_loss(hist, target, m, cfg.stride)
        return net.parameters(), fn

    def refinement():
        ref = Refiner(seed=0, width=4)
        rng = np.random.default_rng(1)
        _random_biases(ref, rng)
        s = rng.random((2, 12, 12)) * 3
        return ref.parameters(), lambda: refine_loss(ref(s), [(3.0, 4.5), (8.0, 8.0)])

    def score_fusion():
        rng = np.random.default_rng(3)
        xs = Tensor(rng.random((6, 6)), requires_grad=True)
        xf = Tensor(rng.random((6, 6)), requires_grad=True)
        ms = Tensor(rng.uniform(0.05, 0.95, (6, 6)), requires_grad=True)
        w = rng.normal(size=(6, 6))
        return [xs, xf, ms], lambda: (fuse_score(xs, xf, ms) * w).sum()

    return [("spatial_loss", localizer_loss), ("bce_dice_terms", tip_terms), ("flow_l1", flow_l1),
            ("refine_loss", refinement), ("fuse_score", score_fusion)]


def check_gradient_suite(points: int = 3) -> tuple:
    worst, names = 0.0, []
    for point in range(points):
        for name, build in op_cases(np.random.default_rng(1000 + point)):
            params, fn = build()
            err = check_gradients(fn, params, h=1e-5)
            worst = max(worst, err)
            if err >= GRAD_TOL:
                names.append(f"{name}@{point}")
    for name, build in loss_cases():
        params, fn = build()
        err = check_gradients(fn, params, h=1e-6, max_probes=4, seed=0)
        worst = max(worst, err)
        if err >= GRAD_TOL:
            names.append(name)
    return not names, f"max rel err {worst:.2e}" + (f"; failing {names}" if names else "")


# -- oracles ----------------------------------------------------------------------------------

def loop_correlation(a, b, scale=True):
    d, h, w = a.shape
    out = np.zeros((h, w, h, w))
    for i in range(h):
        for j in range(w):
            for k in range(h):
                for l in range(w):
                    acc = 0.0
                    for c in range(d):
                        acc += a[c, i, j] * b[c, k, l]
                    out[i, j, k, l] = acc
    return out / math.sqrt(d) if scale else out


def check_correlation(n: int = 50) -> tuple:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(n):
        h, w, d = (int(x) for x in (rng.integers(1, 7), rng.integers(1, 7), rng.integers(1, 5)))
        a, b = rng.normal(size=(d, h, w)), rng.normal(size=(d, h, w))
        c0 = correlation_volume(a[None], b[None], levels=1)[0].data[0].reshape(h, w, h, w)
        worst = max(worst, float(np.abs(c0 - loop_correlation(a, b)).max()))
    shapes_ok = True
    pyr = correlation_volume(np.ones((1, 4, 16, 24)), np.ones((1, 4, 16, 24)), levels=4)
    for i, c in enumerate(pyr):
        shapes_ok &= c.shape == (1, 16 * 24, 16 >> i, 24 >> i)
    return worst < 1e-12 and shapes_ok and len(pyr) == 4, f"max abs err {worst:.1e}, pyramid shapes {shapes_ok}"


def direct_attention(q, k, v):
    s = q @ k.T / math.sqrt(q.shape[1])
    e = np.exp(s - s.max(axis=1, keepdims=True))
    w = e / e.sum(axis=1, keepdims=True)
    return w @ v, w


def check_attention() -> tuple:
    cfg = LocalizerConfig(search_size=16, template_size=8, channels=(8, 8, 8, 8), stride=8, d_model=4,
                          heads=1, enc_layers=1, dec_layers=1, fcn_widths=(8,) * 6)
    m = Localizer(cfg, seed=2)
    rng = np.random.default_rng(3)
    s = m.encode(rng.random((1, 16, 16)))
    t1, t2 = m.encode(rng.random((1, 8, 8))), m.encode(rng.random((1, 8, 8)))
    _, weights = m.fuse(s, [t1, t2])
    x = T.concat([m._tokens(s, m.search_pos), m._tokens(t1, m.template_pos[0]),
                  m._tokens(t2, m.template_pos[1])], axis=1).data[0]
    at = m.enc_layers[0].attn
    q = x @ at.wq.weight.data + at.wq.bias.data
    k = x @ at.wk.weight.data + at.wk.bias.data
    v = x @ at.wv.weight.data + at.wv.bias.data
    _, ref_w = direct_attention(q, k, v)
    err = float(np.abs(weights[0].data[0, 0] - ref_w).max())
    out, w = attention(Tensor(q), Tensor(k), Tensor(v))
    err = max(err, float(np.abs(out.data - direct_attention(q, k, v)[0]).max()))
    rows = max(float(np.abs(wl.data.sum(axis=-1) - 1).max()) for wl in weights)
    return err < 1e-10 and rows < 1e-9, f"weight err {err:.1e}, row-sum err {rows:.1e}"


def loop_fuse(xs, xf, ms, alpha, cutoff=0.5):
    out = np.zeros_like(xs)
    for i in range(xs.shape[0]):
        for j in range(xs.shape[1]):
            tot = xs[i, j] + xf[i, j]
            out[i, j] = (alpha + ms[i, j]) * tot if ms[i, j] > cutoff else tot
    return out


def check_fusion() -> tuple:
    fixture = fuse_score(np.array([[0.8]]), np.array([[0.6]]), np.array([[1.0]]), alpha=0.5).data[0, 0]
    worst = abs(fixture - 2.1)
    rng = np.random.default_rng(5)
    for alpha in (0.25, 0.5, 1.0):
        xs, xf, ms = rng.random((9, 7)), rng.random((9, 7)), rng.random((9, 7))
        ms[0, 0], ms[0, 1] = 0.5, 0.5000001
        worst = max(worst, float(np.abs(fuse_score(xs, xf, ms, alpha).data - loop_fuse(xs, xf, ms, alpha)).max()))
    return worst < 1e-12, f"fixture {float(fixture)!r}, max abs err {worst:.1e}"


def check_flow_identities() -> tuple:
    rng = np.random.default_rng(7)
    m = np.zeros((64, 64))
    m[20:40, 18:30] = 1.0
    _, warped, _ = make_flow_training_pair(m, np.zeros((2, 64, 64)))
    identity = np.array_equal(warped, m)
    shift_ok = True
    for du, dv in [(1, 0), (0, 2), (-3, 1), (2, -2)]:
        pt = tuple(rng.uniform(10, 50, 2))
        res = warp_point(pt, uniform_flow((64, 64), du, dv)).point
        shift_ok &= res == (pt[0] + du, pt[1] + dv)
        _, w2, _ = make_flow_training_pair(m, uniform_flow((64, 64), du, dv))
        shift_ok &= np.array_equal(w2, np.roll(np.roll(m, dv, axis=0), du, axis=1))
    crop = crop_for_flow(m, m)
    ch, cw = crop.prev.shape
    local = rng.normal(0, 1.0, (2, ch, cw))
    full = embed_flow(local, crop.offset, m.shape)
    tip = (23.3, 31.7)
    a = warp_point(tip, full).point
    b = warp_point((tip[0] - crop.offset[0], tip[1] - crop.offset[1]), local).point
    crop_err = max(abs(a[0] - b[0] - crop.offset[0]), abs(a[1] - b[1] - crop.offset[1]))
    ok = identity and shift_ok and crop_err < 1e-9
    return ok, f"zero-flow identity {identity}, integer shifts exact {shift_ok}, crop err {crop_err:.1e}"


def check_metrics() -> tuple:
    gt = np.array([[10.0, 20.0], [30.5, 40.25], [0.0, 0.0]])
    same = evaluate([SequenceResult("a", "fluoro", gt, gt)]).groups["All"]
    rep = evaluate([SequenceResult("a", "fluoro", gt + [3.0, 4.0], gt)], EvalConfig(0.308))
    d = rep.distances["All"]
    ok = same.median == same.mean == same.std == 0.0 and np.all(d == 5 * 0.308)
    return bool(ok), f"offset (3,4) -> {float(d[0])!r} mm"


CHECKS = [("gradients", check_gradient_suite), ("correlation", check_correlation),
          ("attention", check_attention), ("score_fusion", check_fusion),
          ("flow_identities", check_flow_identities), ("metrics", check_metrics)]


def run(out=print, timings: bool = False) -> int:
    """Run every check; returns the failure count."""
    failures = 0
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed invariant
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failures += not ok
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        if timings:
            line += f" ({time.perf_counter() - t0:.1f}s)"
        out(line)
    return failures
