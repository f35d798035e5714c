import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridest.data import DataError, IceEvent, Reason
from hybridest.ice import Category, classify, classify_dataset, summarize
from hybridest.simulate import ScenarioConfig, calibrate_preset, simulate
from conftest import make_dataset


@pytest.mark.parametrize("reason,pae,eff,cat", [
    ("AE", False, False, 1),
    ("death", False, False, 1),
    ("rescue_medication", False, False, 2),
    ("LoE", True, False, 2),
    ("subject_decision", False, False, 3),
    ("subject_decision", True, True, 1),
    ("investigator_decision", False, True, 2),
    ("lost_to_followup", False, False, 3),
    ("protocol_admin", True, False, 1),
])
def test_category_rules(reason, pae, eff, cat):
    assert classify(IceEvent(1, Reason(reason), pae, eff)) == Category(cat)


@given(st.sampled_from(list(Reason)), st.booleans(), st.booleans(), st.integers(0, 5))
def test_classification_ignores_onset(reason, pae, eff, k):
    e = IceEvent(k, reason, pae, eff)
    assert classify(e) == classify(IceEvent(0, reason, pae, eff))


def test_summary_percentages_one_decimal():
    n = 141
    reasons = ["AE"] * 9 + ["rescue_medication"] * 23 + ["lost_to_followup"] * 4 + [None] * (n - 36)
    onset = [1 if r else -1 for r in reasons]
    ds = classify_dataset(make_dataset(np.zeros((n + 2, 2)), [0] * n + [1, 1], onset=onset + [-1, -1],
                                       reasons=reasons + [None, None]))
    tab = summarize(ds, arm_labels={0: "Placebo"})
    txt = tab.to_text()
    assert "9 (6.4%)" in txt and "23 (16.3%)" in txt and "36 (25.5%)" in txt
    assert "Placebo (N=141)" in txt
    row = tab.rows[1]
    assert row.any_ice == 0 and row.counts == (0, 0, 0)
    assert "1,Arm 1,2,cat1,0,0.0" in tab.to_csv()


def test_summary_requires_classification_and_nonempty_arms():
    ds = make_dataset(np.zeros((2, 2)), [0, 1], onset=[0, -1], reasons=["AE", None])
    with pytest.raises(DataError):
        summarize(ds)
    with pytest.raises(DataError):
        summarize(classify_dataset(ds), arms=[0, 1, 2])


def test_award1_table_has_three_category_rows_per_arm():
    ds, _ = simulate(calibrate_preset("award1_like", master_seed=1))
    tab = summarize(ds)
    assert len(tab.rows) == 3
    assert [name for name, _ in tab.lines()] == ["Patients with ICEs", "Category 1", "Category 2", "Category 3"]


def test_realized_cat1_rate_matches_hazard():
    T = 4
    p = 0.10
    h = 1 - (1 - p) ** (1 / T)
    cfg = ScenarioConfig(n_per_arm=(3000, 3000), cat1_hazard=(h, h), cat3_hazard=(0.0, 0.0), cat2_threshold=None,
                         master_seed=3)
    ds, _ = simulate(cfg)
    for a in (0, 1):
        rate = np.mean(ds.category[ds.arm == a] == 1)
        assert abs(rate - p) < 3 * np.sqrt(p * (1 - p) / 3000)
