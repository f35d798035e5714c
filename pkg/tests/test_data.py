import numpy as np
import pytest

from hybridest.data import (CSV_COLUMNS, DataError, DataInclusionPolicy, Dataset, IceEvent, Reason, SubjectRecord,
                            VisitSchedule, analysis_view, deviation_visit, read_csv, validate, write_csv)
from hybridest.simulate import calibrate_preset, simulate
from conftest import make_dataset


def _one_subject_with_ice():
    vals = [[0.1, 0.2, 0.3, 0.4], [0.5, 0.6, 0.7, 0.8]]
    return make_dataset(vals, [0, 1], [7.0, 8.0], onset=[2, -1], reasons=["AE", None])


def test_on_treatment_view_masks_post_ice_visits():
    ds = _one_subject_with_ice()
    v = analysis_view(ds, DataInclusionPolicy.ON_TREATMENT_ONLY)
    np.testing.assert_array_equal(np.isnan(v.values[0]), [False, False, True, True])
    np.testing.assert_array_equal(v.values[1], ds.values[1])
    a = analysis_view(ds, "all_available")
    np.testing.assert_array_equal(a.values, ds.values)


def test_dataset_is_immutable():
    ds = _one_subject_with_ice()
    with pytest.raises(ValueError):
        ds.values[0, 0] = 1.0
    with pytest.raises(Exception):
        ds.arm = np.zeros(2)


def test_duplicate_id_violation():
    ds = _one_subject_with_ice().replace(ids=("S01", "S01"))
    rep = validate(ds)
    assert rep.rules() == ["duplicate_id"]
    assert rep.violations[0].subject_id == "S01"


def test_post_ice_monotonicity_violation():
    ds = _one_subject_with_ice()
    post = np.array([[False, True, False, False], [False] * 4])
    rep = validate(ds.replace(post_ice=post))
    assert "post_ice_monotone" in rep.rules()


@pytest.mark.parametrize("change,rule", [
    (dict(post_ice=np.array([[False] * 4, [False, False, True, True]])), "post_ice_without_ice"),
    (dict(ice_onset=np.array([9, -1])), "onset_range"),
    (dict(ice_reason=("nausea", None)), "reason"),
    (dict(arm=np.array([1, 1])), "arm"),
    (dict(baseline=np.array([np.nan, 1.0])), "baseline"),
    (dict(schedule=VisitSchedule((4.0, 4.0, 8.0, 12.0))), "schedule"),
])
def test_each_rule_fires(change, rule):
    assert rule in validate(_one_subject_with_ice().replace(**change)).rules()


def test_post_ice_flag_before_onset():
    ds = _one_subject_with_ice().replace(post_ice=np.array([[True, True, True, True], [False] * 4]))
    assert "post_ice_before_onset" in validate(ds).rules()


def test_invalid_dataset_has_no_analysis_view():
    ds = _one_subject_with_ice().replace(ids=("a", "a"))
    with pytest.raises(DataError):
        analysis_view(ds, "on_treatment_only")


def test_simulated_presets_validate():
    for name in ("award1_like", "imagine3_like", "j2r_correct"):
        ds, _ = simulate(calibrate_preset(name, master_seed=4))
        assert validate(ds).ok


def test_deviation_visit():
    vals = np.array([[0.1, np.nan, 0.3, np.nan], [0.1, 0.2, np.nan, np.nan], [np.nan] * 4])
    ds = make_dataset(vals, [0, 1, 1], onset=[-1, 1, -1], reasons=[None, "LoE", None])
    np.testing.assert_array_equal(deviation_visit(ds), [3, 1, 0])


def test_csv_roundtrip(tmp_path):
    ds, _ = simulate(calibrate_preset("award1_like", master_seed=2, intermittent_missing=0.05))
    p = tmp_path / "d.csv"
    write_csv(ds, p)
    back = read_csv(p)
    np.testing.assert_array_equal(back.values, ds.values)
    np.testing.assert_array_equal(back.post_ice, ds.post_ice)
    np.testing.assert_array_equal(back.ice_onset, ds.ice_onset)
    assert back.ice_reason == ds.ice_reason and back.ids == ds.ids
    np.testing.assert_array_equal(back.baseline, ds.baseline)
    assert p.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)


def _csv(tmp_path, rows):
    p = tmp_path / "x.csv"
    p.write_text(",".join(CSV_COLUMNS) + "\n" + "\n".join(rows) + "\n")
    return p


@pytest.mark.parametrize("row,msg", [
    ("S1,zz,1,4,8.0,0.1,0,,,0,0", "line 2: invalid arm"),
    ("S1,0,0,4,8.0,0.1,0,,,0,0", "line 2: visit"),
    ("S1,0,1,4,8.0,abc,0,,,0,0", "line 2: invalid value"),
    ("S1,0,1,4,8.0,0.1,0,1,,0,0", "line 2: ice_visit and ice_reason"),
    ("S1,0,1,4,8.0,0.1,0,1,headache,0,0", "line 2: invalid ice_reason"),
    ("S1,0,1,4,8.0,0.1,2,,,0,0", "line 2: invalid post_ice"),
])
def test_read_csv_errors_name_the_line(tmp_path, row, msg):
    with pytest.raises(DataError, match=msg):
        read_csv(_csv(tmp_path, [row]))


def test_read_csv_inconsistent_subject_and_duplicates(tmp_path):
    with pytest.raises(DataError, match="line 3: subject S1 has inconsistent"):
        read_csv(_csv(tmp_path, ["S1,0,1,4,8.0,0.1,0,,,0,0", "S1,1,2,8,8.0,0.1,0,,,0,0"]))
    with pytest.raises(DataError, match="line 3: duplicate"):
        read_csv(_csv(tmp_path, ["S1,0,1,4,8.0,0.1,0,,,0,0", "S1,0,1,4,8.0,0.1,0,,,0,0"]))
    with pytest.raises(DataError, match="line 1"):
        p = tmp_path / "h.csv"
        p.write_text("subject_id,arm\n")
        read_csv(p)


def test_absent_rows_are_missing(tmp_path):
    ds = read_csv(_csv(tmp_path, ["S1,0,1,4,8.0,0.1,0,,,0,0", "S2,1,1,4,8.0,0.3,0,,,0,0",
                                  "S2,1,2,8,8.0,0.4,0,,,0,0"]))
    assert ds.n_visits == 2 and np.isnan(ds.values[0, 1])


def test_record_view_roundtrip():
    ds = _one_subject_with_ice()
    recs = ds.subjects()
    assert isinstance(recs[0], SubjectRecord)
    assert recs[0].ice == IceEvent(2, Reason.AE, False, False)
    back = Dataset.from_subjects(ds.schedule, recs)
    np.testing.assert_array_equal(back.values, ds.values)
    np.testing.assert_array_equal(back.post_ice, ds.post_ice)
