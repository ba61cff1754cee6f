import struct

import numpy as np
import pytest

from cathtrack.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from cathtrack.flow import FlowConfig
from cathtrack.localizer import LocalizerConfig
from cathtrack.model import TrackerConfig, TrackerModel
from cathtrack.train import load_flow, save_flow
from cathtrack.flow import FlowNet


def tiny(use_flow=True):
    loc = LocalizerConfig(search_size=32, template_size=16, channels=(8, 8, 8, 8), stride=8, d_model=8,
                          heads=2, enc_layers=1, dec_layers=1, fcn_widths=(8,) * 6)
    flow = FlowConfig(stride=4, dim=8, blocks=2, levels=2, radius=1, iters=2, hidden=8)
    return TrackerModel(loc, TrackerConfig(use_flow=use_flow, update_interval=float("inf"), refine_width=4),
                        flow, seed=3)


def test_raw_round_trip(tmp_path):
    arrs = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5), "c": np.zeros((0, 2))}
    p = save_checkpoint(tmp_path / "x.ckpt", {"k": [1, 2], "s": "v"}, {"sec": arrs})
    cfg, secs = load_checkpoint(p)
    assert cfg == {"k": [1, 2], "s": "v"}
    for k, v in arrs.items():
        assert secs["sec"][k].shape == v.shape and np.array_equal(secs["sec"][k], v)


def test_model_round_trip_is_bitwise(tmp_path):
    m = tiny()
    p = m.save(tmp_path / "m.ckpt", {"note": "x"})
    m2 = TrackerModel.load(p)
    for a, b in ((m.localizer, m2.localizer), (m.refiner, m2.refiner), (m.flow, m2.flow)):
        sa, sb = a.state_dict(), b.state_dict()
        assert list(sa) == list(sb) and all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert m2.tracker_config.update_interval == float("inf")
    assert m2.config_dict() == m.config_dict()
    # saving twice gives identical bytes
    assert p.read_bytes() == m2.save(tmp_path / "m2.ckpt", {"note": "x"}).read_bytes()


def test_no_flow_model_has_no_flow_section(tmp_path):
    p = tiny(use_flow=False).save(tmp_path / "n.ckpt")
    _, secs = load_checkpoint(p)
    assert set(secs) == {"localizer", "refine"}
    assert TrackerModel.load(p).flow is None


def test_flow_checkpoint_round_trip(tmp_path):
    net = FlowNet(FlowConfig(stride=4, dim=8, blocks=2, levels=2, radius=1, iters=2, hidden=8), seed=5)
    back = load_flow(save_flow(tmp_path / "f.ckpt", net, {"steps": 1}))
    assert back.config == net.config
    assert all(np.array_equal(a, b) for a, b in zip(net.state_dict().values(), back.state_dict().values()))
    with pytest.raises(CheckpointError):
        load_flow(tiny(use_flow=False).save(tmp_path / "n.ckpt"))


def test_corruption_is_detected(tmp_path):
    p = tiny().save(tmp_path / "m.ckpt")
    raw = p.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)
    bad.write_bytes(MAGIC + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(bad)


def test_missing_or_misshaped_tensor_is_rejected(tmp_path):
    m = tiny()
    cfg = m.config_dict()
    sections = {"localizer": m.localizer.state_dict(), "refine": m.refiner.state_dict()}
    p = save_checkpoint(tmp_path / "noflow.ckpt", cfg, sections)
    with pytest.raises(CheckpointError, match="flow"):
        TrackerModel.load(p)
    ref = dict(m.refiner.state_dict())
    key = next(iter(ref))
    ref[key] = np.zeros((1,))
    p = save_checkpoint(tmp_path / "shape.ckpt", cfg, {**sections, "refine": ref, "flow": m.flow.state_dict()})
    with pytest.raises(Exception):
        TrackerModel.load(p)
