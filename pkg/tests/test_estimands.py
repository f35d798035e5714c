import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridest.estimands import (EstimandKind, EstimandSpec, PipelineError, estimate, hybrid_plug_in,
                                 naive_decomposition, plug_in_mu_hat, run_all, true_defacto, true_hybrid,
                                 true_hybrid_pointwise, true_theoretic)
from hybridest.ice import classify_dataset
from hybridest.simulate import TruthBundle, calibrate_preset, simulate
from conftest import make_dataset, random_complete
from oracles import six_subject_bundle


def _bundle(rng, n=50, p=0.3):
    y0 = rng.normal(size=n)
    y1 = y0 + rng.normal(-0.5, 1.0, n)
    return TruthBundle.from_endpoint(y0, y1, (rng.random(n) < p).astype(int))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 2))
def test_two_forms_of_the_hybrid_estimand_agree(seed, p, delta):
    tr = _bundle(np.random.default_rng(seed), p=p)
    if tr.s[:, 1].all():
        assert true_hybrid(tr, delta) == delta
    assert abs(true_hybrid(tr, delta) - true_hybrid_pointwise(tr, delta)) <= 1e-12


def test_boundary_values():
    rng = np.random.default_rng(0)
    y0, y1 = rng.normal(size=10), rng.normal(size=10)
    none = TruthBundle.from_endpoint(y0, y1, np.zeros(10))
    assert true_hybrid(none) == pytest.approx(np.mean(y1 - y0), abs=1e-15)
    assert naive_decomposition(none) == pytest.approx(true_hybrid(none), abs=1e-15)
    assert true_hybrid(TruthBundle.from_endpoint(y0, y1, np.ones(10)), 0.4) == 0.4
    with pytest.raises(ValueError):
        true_hybrid(TruthBundle.from_endpoint(y0, y1, np.ones(10)), None)


def test_conditional_effect_example():
    # E[Y(1)-Y(0) | S=0] = -1, Pr(S=1) = 0.2, delta = 0 -> -0.8
    y0 = np.zeros(5)
    y1 = np.array([-1.0, -1.0, -1.0, -1.0, 7.0])
    tr = TruthBundle.from_endpoint(y0, y1, [0, 0, 0, 0, 1])
    assert true_hybrid(tr, 0.0) == pytest.approx(-0.8, abs=1e-15)


def test_six_subject_bundle_separates_the_decomposition():
    tr = TruthBundle.from_endpoint(*six_subject_bundle())
    assert true_hybrid(tr, 0.0) == pytest.approx(-1.0 / 3.0, abs=1e-12)
    assert naive_decomposition(tr, 0.0) == pytest.approx(-2.0 / 3.0, abs=1e-12)
    assert naive_decomposition(tr, 0.0) != true_hybrid(tr, 0.0)


def test_decomposition_unbiased_under_independence():
    rng = np.random.default_rng(1)
    gaps = np.array([naive_decomposition(b, 0.3) - true_hybrid(b, 0.3) for b in (_bundle(rng) for _ in range(400))])
    assert abs(gaps.mean()) < 4 * gaps.std(ddof=1) / np.sqrt(len(gaps))


def test_delta_slope_is_category1_share():
    tr = _bundle(np.random.default_rng(2), n=200)
    v = [true_hybrid(tr, d) for d in (0.0, 0.2, 0.4)]
    p = tr.s[:, 1].mean()
    assert v[1] - v[0] == pytest.approx(0.2 * p, abs=1e-12)
    assert v[2] - v[1] == pytest.approx(0.2 * p, abs=1e-12)


def test_oracles_coincide_without_ices_and_hybrid_is_a_mixture():
    rng = np.random.default_rng(3)
    y0, y1 = rng.normal(size=30), rng.normal(size=30) - 1
    tr = TruthBundle.from_endpoint(y0, y1, np.zeros(30))
    assert true_theoretic(tr) == true_defacto(tr) == pytest.approx(true_hybrid(tr))
    tr = TruthBundle.from_endpoint(y0, y1, (rng.random(30) < 0.4).astype(int))
    s = tr.s[:, 1].astype(bool)
    cond = np.mean(y1[~s] - y0[~s])
    for d in (0.0, 0.4):
        assert min(cond, d) - 1e-12 <= true_hybrid(tr, d) <= max(cond, d) + 1e-12


def test_heavy_placebo_rescue_attenuates_defacto():
    ds, tr = simulate(calibrate_preset("award1_like", master_seed=5, n_per_arm=(2000, 2000, 2000)))
    assert abs(true_defacto(tr)) < abs(true_theoretic(tr))


# ------------------------------------------------------------------ pipeline

def _complete_trial(seed=0):
    rng = np.random.default_rng(seed)
    Y, arm, b = random_complete(rng, n_per_arm=60, T=3)
    return make_dataset(Y, arm, b)


def test_no_ices_pipelines_agree():
    ds = _complete_trial()
    res = run_all(ds, m=5, seed=1)
    th, hy, df = (res[k].difference(1) for k in EstimandKind)
    assert hy.value == th.value and hy.se == th.se
    assert df.value == pytest.approx(th.value, abs=1e-12)


def test_theoretic_is_direct_mmrm():
    from hybridest.mmrm import fit
    ds = _complete_trial(1)
    r = estimate(ds, EstimandSpec("theoretic"))
    c = fit(ds).contrast(1, 0)
    assert (r.difference(1).value, r.difference(1).se, r.difference(1).ci_low) == (c.value, c.se, c.ci_low)


@pytest.fixture(scope="module")
def sim_trial():
    return simulate(calibrate_preset("j2r_correct", master_seed=11, n_per_arm=(150, 150)))


def test_estimate_is_bit_reproducible(sim_trial):
    ds, _ = sim_trial
    for k in ("defacto", "hybrid"):
        a = estimate(ds, EstimandSpec(k, 0.2), m=6, seed=3).to_dict()
        b = estimate(ds, EstimandSpec(k, 0.2), m=6, seed=3).to_dict()
        c = estimate(ds, EstimandSpec(k, 0.2), m=6, seed=3, workers=2).to_dict()
        assert a == b == c
        assert a["provenance"]["master_seed"] == 3


def test_pipeline_errors(sim_trial):
    ds, _ = sim_trial
    with pytest.raises(PipelineError, match="seed"):
        estimate(ds, EstimandSpec("hybrid"), m=5)
    with pytest.raises(PipelineError, match="classify"):
        estimate(ds.replace(category=np.zeros(ds.n_subjects, int)), EstimandSpec("hybrid"), m=5, seed=1)
    with pytest.raises(PipelineError, match="validate"):
        estimate(ds.replace(ids=("x",) * ds.n_subjects), EstimandSpec("theoretic"))
    with pytest.raises(ValueError):
        EstimandSpec("hybrid", delta=-0.1)
    with pytest.raises(ValueError):
        EstimandSpec("sideways")


def test_hybrid_nim_moves_estimate_up(sim_trial):
    ds, _ = sim_trial
    a = estimate(ds, EstimandSpec("hybrid", 0.0), m=5, seed=2).difference(1).value
    b = estimate(ds, EstimandSpec("hybrid", 0.4), m=5, seed=2).difference(1).value
    share = np.mean(ds.category[ds.arm == 1] == 1)
    assert b - a == pytest.approx(0.4 * share, abs=0.03)


def test_result_serialization(sim_trial):
    ds, _ = sim_trial
    d = estimate(ds, EstimandSpec("hybrid", 0.4), m=3, seed=1).to_dict()
    assert set(d) == {"estimand", "visit", "arm_means", "differences", "provenance", "diagnostics"}
    assert d["estimand"]["strategies"] == {"1": "null_j2r", "2": "hypothetical_mar", "3": "hypothetical_mar"}
    assert "1-0" in d["differences"] and d["provenance"]["m"] == 3


# ------------------------------------------------------------------- plug-in

def test_plug_in_reduces_to_mean_difference():
    ds = _complete_trial(2)
    s1 = np.zeros(ds.n_subjects)
    t = ds.values[:, -1]
    expect = t[ds.arm == 1].mean() - t[ds.arm == 0].mean()
    assert plug_in_mu_hat([ds.values], s1, ds.arm) == pytest.approx(expect, abs=1e-14)
    with pytest.raises(ValueError):
        plug_in_mu_hat([ds.values], np.full(ds.n_subjects, np.nan), ds.arm)


def test_plug_in_all_category1_is_near_zero():
    # every experimental subject leaves after visit 1; the J2R model is fitted on the
    # unmasked data because the masked data carry no later experimental-arm information
    from hybridest.imputation import ImputationRule, Selector, impute
    from hybridest.mmrm import fit
    rng = np.random.default_rng(4)
    vals = []
    for r in range(12):
        Y, arm, b = random_complete(rng, n_per_arm=100, effect=-1.0)
        model = fit(make_dataset(Y, arm, b))
        onset = np.where(arm == 1, 1, -1)
        reasons = ["AE" if k >= 0 else None for k in onset]
        Y[arm == 1, 1:] = np.nan
        ds = classify_dataset(make_dataset(Y, arm, b, onset=onset, reasons=reasons))
        imp = impute(ds, [ImputationRule("J2R", Selector(arms=(1,)))], model, m=10, master_seed=r)
        vals.append(plug_in_mu_hat(imp.completed, (ds.category == 1).astype(float), ds.arm, 0.0))
    vals = np.array(vals)
    assert abs(vals.mean()) < 3 * vals.std(ddof=1) / np.sqrt(len(vals))


def test_plug_in_agrees_with_pipeline():
    ds, _ = simulate(calibrate_preset("j2r_correct", master_seed=21, baseline_coef=0.0))
    pipe = estimate(ds, EstimandSpec("hybrid"), m=40, seed=5).difference(1).value
    plug, _ = hybrid_plug_in(ds, 0.0, m=40, seed=5)
    assert abs(plug - pipe) <= 0.02
