import csv

import numpy as np
import pytest

from cathtrack.ablation import (
    ABLATION_ROWS, AblationError, ablate, check_rows, config_diff, held_out_set, row_label, track_and_score,
    write_ablation_csv,
)
from cathtrack.metrics import EvalConfig, table_columns
from cathtrack.synth import generate_sequence

from tiny import tiny_model


def row_models():
    return {row: tiny_model(use_flow=row[1], multi=row[2], multitask=row[0]) for row in ABLATION_ROWS}


def test_config_diff_dotted_keys():
    a = {"x": 1, "n": {"p": 1, "q": 2}}
    b = {"x": 1, "n": {"p": 1, "q": 3}, "y": 0}
    assert config_diff(a, b) == ["n.q", "y"]
    assert config_diff(a, a) == []


def test_rows_toggle_only_what_they_name():
    models = row_models()
    check_rows(models)
    assert [tuple(m.toggles.values()) for m in models.values()] == ABLATION_ROWS


def test_row_with_wrong_toggles_rejected():
    models = row_models()
    models[(True, True, True)] = tiny_model(use_flow=True, multi=False)
    with pytest.raises(AblationError, match="toggles"):
        check_rows(models)


def test_rows_differing_elsewhere_rejected():
    models = row_models()
    models[(True, True, True)] = tiny_model(interval=7)
    with pytest.raises(AblationError, match="update_interval"):
        check_rows(models)


def test_flow_settings_ignored_when_a_row_has_no_flow():
    models = row_models()
    models[(True, False, False)].flow_config.iters = 9
    check_rows(models)


def test_missing_checkpoint(tmp_path):
    models = {r: tmp_path / f"{i}.ckpt" for i, r in enumerate(ABLATION_ROWS)}
    with pytest.raises(AblationError, match="missing checkpoint"):
        ablate(models, [])
    del models[ABLATION_ROWS[0]]
    with pytest.raises(AblationError, match="rows"):
        ablate(models, [])


def test_all_off_row_has_no_flow_and_neutral_mask():
    m = row_models()[(False, False, False)]
    assert m.flow is None and m.n_templates == 1
    frozen = {id(p) for p in m.localizer.mask_head.parameters()}
    assert not any(id(p) in frozen for p in m.localizer.trainable_parameters())
    assert all(not p.data.any() for p in m.localizer.mask_head.parameters())


def test_held_out_is_disjoint_and_reproducible():
    a = held_out_set(0, 2, n_frames=3, size=64, scenarios=("fluoro",))
    b = held_out_set(0, 2, n_frames=3, size=64, scenarios=("fluoro",))
    assert np.array_equal(a[1].frames[2].image, b[1].frames[2].image)
    assert not np.array_equal(a[0].frames[0].image, a[1].frames[0].image)
    train_like = generate_sequence(0, 3, "fluoro", size=64)
    assert not np.array_equal(a[0].frames[0].image, train_like.frames[0].image)


def test_ablate_end_to_end_table(tmp_path):
    records = held_out_set(0, 1, n_frames=3, size=64)
    reports = ablate(row_models(), records, EvalConfig())
    assert list(reports) == ABLATION_ROWS
    for rep in reports.values():
        assert rep.groups["All"].n == 3 * 2        # frame 0 is the annotation, not scored
    path = write_ablation_csv(tmp_path / "ab.csv", reports)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["multitask", "flow", "multi_templates"] + table_columns()
    assert rows[1][:3] == ["0", "0", "0"] and rows[4][:3] == ["1", "1", "1"]
    assert row_label((True, False, True)) == "multitask=on flow=off multi_templates=on"


def test_parallel_scoring_matches_serial():
    records = held_out_set(1, 1, n_frames=3, size=64, scenarios=("fluoro", "devices"))
    m = tiny_model()
    a = track_and_score(m, records, workers=1)
    b = track_and_score(m, records, workers=2)
    assert np.array_equal(a.distances["All"], b.distances["All"])
