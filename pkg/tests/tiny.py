"""Small model builders shared by the unit tests."""

from cathtrack.flow import FlowConfig
from cathtrack.localizer import LocalizerConfig
from cathtrack.model import TrackerConfig, TrackerModel


def tiny_loc(**over):
    base = dict(search_size=32, template_size=16, channels=(8, 8, 8, 8), stride=8, d_model=8, heads=2,
                enc_layers=1, dec_layers=1, fcn_widths=(8,) * 6)
    return LocalizerConfig(**{**base, **over})


def tiny_model(use_flow=True, multi=True, interval=5, mask_on=False, seed=0, multitask=True):
    flow = FlowConfig(stride=4, dim=8, blocks=2, levels=4, radius=1, iters=2, hidden=8)
    trk = TrackerConfig(use_flow=use_flow, multi_templates=multi, update_interval=interval, refine_width=4)
    m = TrackerModel(tiny_loc(multitask=multitask), trk, flow, seed=seed)
    if mask_on:
        # push the body-mask head above the cutoff so the flow path runs
        m.localizer.mask_head.up[-1].bias.data[:] = 4.0
    return m
