import numpy as np
import pytest

from cathtrack import train as train_mod
from cathtrack.data import make_dataset
from cathtrack.flow import FlowConfig, FlowNet
from cathtrack.model import TrackerConfig
from cathtrack.tensor import Tensor
from cathtrack.train import (
    FlowTrainConfig, TrainConfig, TrainingError, train_end2end, train_flow, write_curve,
)

from tiny import tiny_loc


def tiny_flow():
    return FlowNet(FlowConfig(stride=4, dim=8, blocks=2, levels=4, radius=1, iters=2, hidden=8), seed=0)


TRK = TrackerConfig(refine_width=4)


@pytest.fixture(scope="module")
def records():
    return make_dataset(0, 8, n_frames=6, size=64)


def _cfg(**kw):
    base = dict(steps=3, batch_size=2, optimizer="adam", learning_rate=1e-3, jitter=2.0)
    base.update(kw)
    return TrainConfig(**base)


def _weights(models):
    out = []
    for m in models.values():
        out += [p.data.copy() for p in m.localizer.parameters() + m.refiner.parameters()]
    return out


@pytest.mark.parametrize("opt", ["sgd", "adam"])
def test_zero_learning_rate_leaves_weights(records, opt):
    cfg = _cfg(learning_rate=0.0, optimizer=opt, also_without_flow=True)
    ref, _ = train_end2end(_cfg(steps=0, also_without_flow=True), tiny_loc(), tiny_flow(), TRK, records)
    got, curve = train_end2end(cfg, tiny_loc(), tiny_flow(), TRK, records)
    assert len(curve) == 3
    assert all(np.array_equal(a, b) for a, b in zip(_weights(ref), _weights(got)))


def test_same_seed_same_curve(records):
    a = train_end2end(_cfg(), tiny_loc(), tiny_flow(), TRK, records)[1]
    b = train_end2end(_cfg(), tiny_loc(), tiny_flow(), TRK, records)[1]
    assert a == b
    c = train_end2end(_cfg(seed=1), tiny_loc(), tiny_flow(), TRK, records)[1]
    assert a != c


def test_sibling_heads_share_one_localizer_run(records):
    both, curve = train_end2end(_cfg(also_without_flow=True), tiny_loc(), tiny_flow(), TRK, records)
    assert both["flow"].localizer is both["noflow"].localizer
    assert both["flow"].flow is not None and both["noflow"].flow is None
    alone, curve2 = train_end2end(_cfg(), tiny_loc(), tiny_flow(), TRK, records)
    # the refinement input is detached: the localizer trajectory ignores the extra head
    assert [r["spatial"] for r in curve] == [r["spatial"] for r in curve2]


def test_toggles_reach_the_models(records):
    models, _ = train_end2end(_cfg(flow=False, multitask=False, multi_templates=False), tiny_loc(), None,
                              TRK, records)
    m = models["noflow"]
    assert m.toggles == {"multitask": False, "flow": False, "multi_templates": False}
    assert m.n_templates == 1
    assert all(not p.data.any() for p in m.localizer.mask_head.parameters())


def test_errors(records, monkeypatch):
    with pytest.raises(ValueError):
        TrainConfig(phase="pretrain")
    with pytest.raises(TrainingError):
        train_end2end(_cfg(), tiny_loc(), None, TRK, records)
    calls = {"n": 0}
    real = train_mod.spatial_loss

    def poisoned(*a, **k):
        calls["n"] += 1
        loss = real(*a, **k)
        if calls["n"] == 3:
            return loss * Tensor(np.array(np.inf))
        return loss

    monkeypatch.setattr(train_mod, "spatial_loss", poisoned)
    with pytest.raises(TrainingError, match="step 2"):
        train_end2end(_cfg(steps=5), tiny_loc(), tiny_flow(), TRK, records)


def test_tiny_training_progress(records):
    """200 steps on 8 sequences: the mean loss over the last 20 steps is 20% below the first 20."""
    cfg = _cfg(steps=200, batch_size=4, learning_rate=3e-3)
    _, curve = train_end2end(cfg, tiny_loc(), tiny_flow(), TRK, records)
    first = np.mean([r["total"] for r in curve[:20]])
    last = np.mean([r["total"] for r in curve[-20:]])
    assert last < 0.8 * first


def test_flow_training_seeded_and_decreasing():
    fc = FlowConfig(stride=4, dim=8, blocks=2, levels=3, radius=2, iters=2, hidden=8)
    cfg = FlowTrainConfig(steps=30, batch_size=4, crop=32, n_sequences=2, image_size=64, learning_rate=3e-3)
    _, a = train_flow(cfg, fc)
    _, b = train_flow(cfg, fc)
    assert a == b
    assert np.mean(a[-10:]) < np.mean(a[:5])


def test_curve_csv(tmp_path):
    p = write_curve(tmp_path / "c.csv", [{"step": 0, "total": 0.1}, {"step": 1, "total": 0.2}])
    assert p.read_text().splitlines() == ["step,total", "0,0.1", "1,0.2"]
