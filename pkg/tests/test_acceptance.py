"""Acceptance gate: one PASS/FAIL line per criterion.

Criteria 6-8 and part of 10 need the desk-scale checkpoints built by
``tests/desk.py`` (about an hour on one core the first time; reused
afterwards while the recipe is unchanged).
"""

import io
import time

import numpy as np
import pytest

from cathtrack import selftest
from cathtrack.ablation import held_out_set, track_and_score
from cathtrack.data import make_dataset
from cathtrack.metrics import EvalConfig, SequenceResult, evaluate, format_all_row, table_columns
from cathtrack.tracker import track_sequence
from cathtrack.train import TrainConfig, desk_localizer_config, evaluate_flow, flow_eval_pairs, train_end2end

import desk

# tolerances
GRAD_REL = 1e-3
GRAD_SECONDS = 120
FLOW_STEPS_MAX = 500
FLOW_EPE_PX = 1.0
FLOW_SECONDS = 600
E2E_SECONDS = 1800
TRACK_MEDIAN_PX = 2.0
DEVICES_MEDIAN_PX = 4.0
N_SEQUENCES = 20
SPACING = 0.308

RESULTS = {}
pytestmark = pytest.mark.slow


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok


@pytest.fixture(scope="module")
def artifacts():
    return desk.build()


@pytest.fixture(scope="module")
def trained(artifacts):
    return desk.models(artifacts)


@pytest.fixture(scope="module")
def held_out():
    return {sc: held_out_set(desk.SEED, N_SEQUENCES, scenarios=(sc,)) for sc in ("fluoro", "angio", "devices")}


@pytest.fixture(scope="module")
def scores(trained, held_out):
    cfg = EvalConfig(pixel_spacing_mm=1.0)     # pixels; converted where reported
    cache = {}

    def get(row, sc):
        if (row, sc) not in cache:
            cache[row, sc] = track_and_score(trained[row], held_out[sc], cfg)
        return cache[row, sc]
    return get


def test_c01_gradient_suite():
    t0 = time.perf_counter()
    ok, detail = selftest.check_gradient_suite()
    secs = time.perf_counter() - t0
    assert report(1, ok and secs < GRAD_SECONDS, f"{detail} (< {GRAD_REL:g}), {secs:.1f}s (< {GRAD_SECONDS}s)")


def test_c02_correlation_oracle():
    ok, detail = selftest.check_correlation(n=50)
    assert report(2, ok, f"50 instances <= 6x6x4: {detail} (< 1e-12)")


def test_c03_attention_oracle():
    ok, detail = selftest.check_attention()
    assert report(3, ok, f"d=4, 2 templates: {detail} (< 1e-10, < 1e-9)")


def test_c04_score_fusion():
    ok, detail = selftest.check_fusion()
    assert report(4, ok, f"{detail} (< 1e-12, fixture 2.1)")


def test_c05_flow_identities():
    ok, detail = selftest.check_flow_identities()
    assert report(5, ok, detail)


def test_c06_synthetic_flow_training(artifacts):
    steps = artifacts["settings"]["flow_train"]["steps"]
    secs = artifacts["flow_seconds"]
    epe = evaluate_flow(desk.flow_net(), flow_eval_pairs(desk.SEED, n=50))
    ok = epe < FLOW_EPE_PX and secs < FLOW_SECONDS and steps <= FLOW_STEPS_MAX
    assert report(6, ok, f"{steps} steps, {secs:.0f}s (< {FLOW_SECONDS}s), held-out mean EPE {epe:.3f} px "
                         f"(< {FLOW_EPE_PX})")


FULL = (True, True, True)


def test_c07_end_to_end_tracking(artifacts, scores):
    secs = artifacts["flow_seconds"] + artifacts["train_seconds"]["row_111.ckpt"]
    clean = scores(FULL, "fluoro").groups["All"].median
    dev = scores(FULL, "devices").groups["All"].median
    ok = secs <= E2E_SECONDS and clean < TRACK_MEDIAN_PX and dev < DEVICES_MEDIAN_PX
    assert report(7, ok, f"training {secs / 60:.1f} min (<= 30), median error zero-occlusion {clean:.2f} px "
                         f"({clean * SPACING:.2f} mm, < {TRACK_MEDIAN_PX}), devices {dev:.2f} px "
                         f"(< {DEVICES_MEDIAN_PX}) over {N_SEQUENCES} sequences each")


def test_c08_ablation_trend(scores):
    flow_on = scores((True, True, False), "devices").groups["All"].median
    flow_off = scores((True, False, False), "devices").groups["All"].median
    multi = scores(FULL, "angio").groups["All"].median
    single = scores((True, True, False), "angio").groups["All"].median
    ok = flow_on <= flow_off and multi <= single
    assert report(8, ok, f"devices median flow on {flow_on:.2f} vs off {flow_off:.2f} px; angio median "
                         f"multi-template {multi:.2f} vs single {single:.2f} px")


def test_c09_metric_fidelity():
    gt = np.array([[10.0, 20.0], [33.0, 41.0], [0.0, 0.0]])
    rep = evaluate([SequenceResult("s", "fluoro", gt + [3.0, 4.0], gt)], EvalConfig(pixel_spacing_mm=SPACING))
    exact = bool(np.all(rep.distances["All"] == 1.540))
    layout = table_columns()[-3:] == ["All_median", "All_mean", "All_std"] and all(
        f"{s}_{k}" in table_columns() for s in ("Fluoro", "Angio", "Devices") for k in ("median", "mean"))
    # five distances with median 1.08, mean 1.63 and std 1.70
    fixed = [0.2, 0.6, 1.08]
    s1 = 5 * 1.63 - sum(fixed)
    s2 = 5 * (1.70 ** 2 + 1.63 ** 2) - sum(x * x for x in fixed)
    disc = np.sqrt(s1 * s1 - 2 * (s1 * s1 - s2))
    d = np.array(fixed + [(s1 - disc) / 2, (s1 + disc) / 2])
    row = format_all_row(evaluate([SequenceResult("s", "fluoro", np.c_[d, np.zeros(5)], np.zeros((5, 2)))],
                                  EvalConfig(pixel_spacing_mm=1.0)))
    ok = exact and layout and row == "median 1.08 / mean 1.63 / std 1.70"
    assert report(9, ok, f"offset (3,4) -> {float(rep.distances['All'][0])!r} mm each, layout ok {layout}, "
                         f"fixture renders '{row}'")


def test_c10_determinism(trained, held_out):
    def selftest_text():
        buf = io.StringIO()
        selftest.run(out=lambda s: buf.write(s + "\n"))
        return buf.getvalue()

    same_selftest = selftest_text() == selftest_text()
    records = make_dataset(desk.SEED, 4, n_frames=12)
    loc = desk_localizer_config()
    cfg = TrainConfig(steps=10, optimizer="adam", learning_rate=1e-3, seed=desk.SEED, also_without_flow=True)
    flow = desk.flow_net()

    def train_once():
        models, curve = train_end2end(cfg, loc, flow, records=records)
        weights = [p.data.tobytes() for m in models.values()
                   for p in m.localizer.parameters() + m.refiner.parameters()]
        return curve, weights

    c1, w1 = train_once()
    c2, w2 = train_once()
    same_train = c1 == c2 and w1 == w2
    rec = held_out["devices"][0]
    rows = lambda: [r.row()[:-1] for r in track_sequence(trained[FULL], rec)]   # drop wall-clock column
    same_track = rows() == rows()
    ok = same_selftest and same_train and same_track
    assert report(10, ok, f"selftest output identical {same_selftest}, training curve+weights identical "
                          f"{same_train}, tracking records identical {same_track}")


def test_zz_summary():
    print("\nacceptance summary")
    for n in sorted(RESULTS):
        print(RESULTS[n])
