from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from scipy import stats

from hybridest.estimands import EstimandSpec, estimate, true_defacto, true_hybrid, true_theoretic
from hybridest.simulate import (PRESETS, ConfigError, ScenarioConfig, _all_noise, calibrate_preset,
                                population_hybrid, simulate, subject_noise)


def test_no_hazards_gives_complete_data():
    cfg = ScenarioConfig(cat1_hazard=(0.0, 0.0), cat3_hazard=(0.0, 0.0), cat2_threshold=None)
    ds, tr = simulate(cfg)
    assert not ds.has_ice.any() and not np.isnan(ds.values).any()
    np.testing.assert_array_equal(ds.values, tr.y[np.arange(tr.n), tr.arm])


def test_consistency_with_potential_outcomes():
    ds, tr = simulate(calibrate_preset("award1_like", master_seed=3))
    idx = np.arange(tr.n)
    own = tr.y[idx, tr.arm]
    no_ice = ~ds.has_ice
    np.testing.assert_array_equal(ds.values[no_ice], own[no_ice])
    pre = ~ds.post_ice
    np.testing.assert_array_equal(ds.values[pre], own[pre])
    obs_post = ds.post_ice & ~np.isnan(ds.values)
    np.testing.assert_array_equal(ds.values[obs_post], tr.policy[idx, tr.arm][obs_post])
    np.testing.assert_array_equal(ds.ice_onset, tr.onset[idx, tr.arm])
    np.testing.assert_array_equal(ds.category, tr.category[idx, tr.arm])
    assert set(np.unique(tr.s)) <= {0, 1}
    np.testing.assert_array_equal(tr.s, (tr.category == 1).astype(int))


def test_seed_determinism():
    cfg = calibrate_preset("imagine3_like", master_seed=7)
    (a, ta), (b, tb) = simulate(cfg), simulate(cfg)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(ta.policy, tb.policy)
    assert a.ice_reason == b.ice_reason
    c, _ = simulate(cfg.replace(master_seed=8))
    assert not np.array_equal(np.nan_to_num(c.values), np.nan_to_num(a.values))


def _noise(args):
    return subject_noise(*args)


def test_parallel_subject_generation_equals_sequential():
    Z, U = _all_noise(5, 40, 4)
    with ProcessPoolExecutor(2) as ex:
        parts = list(ex.map(_noise, [(5, i, 4) for i in range(40)]))
    np.testing.assert_array_equal(np.stack([p[0] for p in parts]), Z)
    np.testing.assert_array_equal(np.stack([p[1] for p in parts]), U)


def _median_split_pvalue(cfg, seeds):
    tab = np.zeros((2, 2))
    for seed in seeds:
        _, tr = simulate(cfg.replace(master_seed=seed))
        d = tr.y[:, 1, -1] - tr.y[:, 0, -1]
        hi = d > np.median(d)
        s = tr.s[:, 1] == 1
        tab += [[np.sum(hi & s), np.sum(hi & ~s)], [np.sum(~hi & s), np.sum(~hi & ~s)]]
    return stats.chi2_contingency(tab)[1]


def test_principal_ignorability_switch():
    cfg = ScenarioConfig(n_per_arm=(500, 500), effect_sd=0.5, cat1_hazard=(0.05, 0.05), cat2_threshold=None)
    # 30 independent 5%-level tests on pooled replications: the rejection count should look Binomial(30, 0.05)
    ps = np.array([_median_split_pvalue(cfg, range(100 + 5 * j, 105 + 5 * j)) for j in range(30)])
    assert np.sum(ps < 0.05) <= 6                      # P(Binomial(30, .05) >= 7) < 1e-3
    assert stats.kstest(ps, "uniform").pvalue > 1e-3
    dep = cfg.replace(principal_ignorability=False, cat1_frailty=1.0)
    assert _median_split_pvalue(dep, range(100, 105)) < 1e-6


def test_null_scenario_oracles_are_zero():
    vals = []
    for r in range(20):
        _, tr = simulate(calibrate_preset("null", master_seed=r, effect_sd=0.3))
        vals.append([true_theoretic(tr), true_defacto(tr), true_hybrid(tr, 0.0)])
    vals = np.array(vals)
    mcse = vals.std(axis=0, ddof=1) / np.sqrt(len(vals))
    assert np.all(np.abs(vals.mean(axis=0)) <= 3 * mcse + 1e-12)


def test_imagine3_category1_rates():
    cfg = calibrate_preset("imagine3_like")
    assert cfg.nim == 0.4
    ds, _ = simulate(cfg)
    for a, target in ((0, 0.053), (1, 0.106)):
        n = np.sum(ds.arm == a)
        rate = np.mean(ds.category[ds.arm == a] == 1)
        assert abs(rate - target) < 3 * np.sqrt(target * (1 - target) / n)


def test_award1_placebo_rescue_rate():
    cfg = calibrate_preset("award1_like")
    big = cfg.replace(n_per_arm=tuple(10 * n for n in cfg.n_per_arm), master_seed=9)
    ds, _ = simulate(big)
    n = np.sum(ds.arm == 0)
    rate = np.mean(ds.category[ds.arm == 0] == 2)
    assert abs(rate - 0.163) < 3 * np.sqrt(0.163 * 0.837 / n)


def test_every_preset_validates():
    from hybridest.data import validate
    for name in PRESETS:
        ds, _ = simulate(calibrate_preset(name, master_seed=1))
        assert validate(ds).ok, name


@pytest.mark.parametrize("kw", [
    dict(cat1_hazard=(1.2, 0.0)),
    dict(cat1_hazard=(0.1,)),
    dict(cov=((1.0, 2.0, 0, 0), (2.0, 1.0, 0, 0), (0, 0, 1.0, 0), (0, 0, 0, 1.0))),
    dict(rescue_pull=1.5),
    dict(n_per_arm=(10,)),
    dict(weeks=(4.0, 4.0, 8.0, 12.0)),
    dict(retrieval=(0.1, 0.2)),
])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        simulate(ScenarioConfig(**kw))


def test_unknown_preset():
    with pytest.raises(KeyError):
        calibrate_preset("award2_like")


def test_config_digest_and_replace():
    a = calibrate_preset("award1_like")
    assert a.digest() == calibrate_preset("award1_like").digest()
    assert a.replace(master_seed=1).digest() != a.digest()
    assert a.to_dict()["n_per_arm"] == [141, 280, 279]


def test_truth_rows():
    _, tr = simulate(ScenarioConfig(n_per_arm=(3, 3)))
    rows = tr.to_rows()
    assert rows[0][:4] == ["subject_id", "assigned_arm", "y_T_0", "s_0"]
    assert len(rows) == 7


def test_population_hybrid_matches_sample_value():
    cfg = calibrate_preset("j2r_correct")
    pop = population_hybrid(cfg, 0.0, n_mc=100_000)
    _, tr = simulate(cfg.replace(n_per_arm=(20000, 20000), master_seed=3))
    assert true_hybrid(tr) == pytest.approx(pop, abs=0.02)


def test_defacto_unbiased_when_j2r_is_correct():
    errs = []
    for r in range(200):
        ds, tr = simulate(calibrate_preset("j2r_correct", master_seed=10_000 + r, n_per_arm=(200, 200)))
        errs.append(estimate(ds, EstimandSpec("defacto"), m=10, seed=r).difference(1).value - true_defacto(tr))
    errs = np.array(errs)
    assert abs(errs.mean()) < 3 * errs.std(ddof=1) / np.sqrt(len(errs))
