"""Estimand definitions, estimation pipelines and potential-outcome oracles.

Three estimands for the treatment difference at the analysis visit:

* theoretic: every subject as if they completed the assigned treatment;
  post-ICE data set to missing, MMRM under MAR.
* de facto: outcomes regardless of ICEs; all available data, missing
  experimental-arm cells imputed by jump-to-reference (plus the NIM for
  non-inferiority), control-arm cells under MAR, MMRM on each completed
  dataset and Rubin pooling.
* hybrid: a "null" effect for Category-1 (safety) ICEs and completion
  for the rest; post-ICE data set to missing, Category-1 cells imputed by
  jump-to-reference (plus the NIM), everything else left to the MMRM's MAR
  likelihood, then Rubin pooling.

The framework presumes a fairly acute treatment effect (onset and offset
within a few weeks); that clinical precondition is not checked here.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import __version__
from .data import DataError, DataInclusionPolicy, Dataset, analysis_view, validate
from .imputation import ImputationKind, ImputationRule, Selector, impute
from .mmrm import MmrmError, MmrmFit, MmrmModelSpec, fit as fit_mmrm
from .pooling import pool
from .simulate import TruthBundle


class EstimandKind(str, enum.Enum):
    THEORETIC = "theoretic"
    DEFACTO = "defacto"
    HYBRID = "hybrid"


class Strategy(str, enum.Enum):
    NULL_J2R = "null_j2r"
    HYPOTHETICAL_MAR = "hypothetical_mar"
    TREATMENT_POLICY = "treatment_policy"


HYBRID_STRATEGIES = {1: Strategy.NULL_J2R, 2: Strategy.HYPOTHETICAL_MAR, 3: Strategy.HYPOTHETICAL_MAR}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"{stage}: {err}")
        self.stage = stage
        self.__cause__ = err


@dataclass(frozen=True)
class EstimandSpec:
    kind: EstimandKind
    delta: float = 0.0
    smaller_is_better: bool = True
    analysis_visit: int | None = None
    alpha: float = 0.05
    strategies: dict = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EstimandKind(self.kind))
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        strat = self.strategies
        if strat is None:
            if self.kind is EstimandKind.HYBRID:
                strat = HYBRID_STRATEGIES
            elif self.kind is EstimandKind.THEORETIC:
                strat = {c: Strategy.HYPOTHETICAL_MAR for c in (1, 2, 3)}
            else:
                strat = {c: Strategy.TREATMENT_POLICY for c in (1, 2, 3)}
        strat = {int(k): Strategy(v) for k, v in strat.items()}
        if set(strat) != {1, 2, 3}:
            raise ValueError("strategy map must cover categories 1, 2 and 3")
        object.__setattr__(self, "strategies", strat)

    @property
    def non_inferiority(self) -> bool:
        return self.delta > 0

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "delta": self.delta, "smaller_is_better": self.smaller_is_better,
                "analysis_visit": self.analysis_visit, "alpha": self.alpha,
                "strategies": {str(k): v.value for k, v in sorted(self.strategies.items())}}


@dataclass(frozen=True)
class ArmMean:
    value: float
    se: float


@dataclass(frozen=True)
class Difference:
    value: float
    se: float
    ci_low: float
    ci_high: float
    df: float
    p_value: float
    W: float | None = None
    B: float | None = None


@dataclass(frozen=True, eq=False)
class EstimandResult:
    spec: EstimandSpec
    visit: int
    arm_means: dict
    differences: dict
    provenance: dict
    diagnostics: dict = field(default_factory=dict)

    def difference(self, arm: int = 1) -> Difference:
        return self.differences[arm]

    def to_dict(self) -> dict:
        return {
            "estimand": self.spec.to_dict(),
            "visit": self.visit,
            "arm_means": {str(a): {"mean": m.value, "se": m.se} for a, m in self.arm_means.items()},
            "differences": {f"{a}-0": {"mean": d.value, "se": d.se, "ci_low": d.ci_low, "ci_high": d.ci_high,
                                       "df": d.df, "p_value": d.p_value, "W": d.W, "B": d.B}
                            for a, d in self.differences.items()},
            "provenance": self.provenance,
            "diagnostics": self.diagnostics,
        }


# ---------------------------------------------------------------- oracles

def _t(truth: TruthBundle, visit):
    return truth.n_visits - 1 if visit is None else visit - 1


def true_theoretic(truth: TruthBundle, arm: int = 1, visit: int | None = None) -> float:
    t = _t(truth, visit)
    return float(np.mean(truth.y[:, arm, t] - truth.y[:, 0, t]))


def true_defacto(truth: TruthBundle, arm: int = 1, visit: int | None = None) -> float:
    if truth.policy is None:
        raise ValueError("truth bundle has no policy trajectories")
    t = _t(truth, visit)
    return float(np.mean(truth.policy[:, arm, t] - truth.policy[:, 0, t]))


def true_hybrid(truth: TruthBundle, delta: float | None = 0.0, arm: int = 1, visit: int | None = None) -> float:
    """Conditional-expectation form: E[Y(1)-Y(0) | S(1)=0] Pr(S(1)=0) + delta Pr(S(1)=1)."""
    t = _t(truth, visit)
    s = truth.s[:, arm].astype(bool)
    p1 = float(np.mean(s))
    if p1 == 1.0:
        if delta is None:
            raise ValueError("Pr(S=0) is zero: the estimand equals delta, which is unspecified")
        return float(delta)
    d = truth.y[~s, arm, t] - truth.y[~s, 0, t]
    return float(np.mean(d)) * (1.0 - p1) + (0.0 if delta is None else delta) * p1


def true_hybrid_pointwise(truth: TruthBundle, delta: float = 0.0, arm: int = 1, visit: int | None = None) -> float:
    """Per-subject form: mean of (Y(1)-Y(0))(1-S(1)) + delta S(1)."""
    t = _t(truth, visit)
    s = truth.s[:, arm]
    return float(np.mean((truth.y[:, arm, t] - truth.y[:, 0, t]) * (1 - s) + delta * s))


def naive_decomposition(truth: TruthBundle, delta: float = 0.0, arm: int = 1, visit: int | None = None) -> float:
    """{Pr(S=0) E[Y(1)] + Pr(S=1)(delta + E[Y(0)])} - E[Y(0)]; not the hybrid estimand in general."""
    t = _t(truth, visit)
    p1 = float(np.mean(truth.s[:, arm]))
    e1 = float(np.mean(truth.y[:, arm, t]))
    e0 = float(np.mean(truth.y[:, 0, t]))
    return (1.0 - p1) * e1 + p1 * (delta + e0) - e0


# --------------------------------------------------------------- pipeline

def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    for a in (ds.arm, ds.baseline, np.nan_to_num(ds.values, nan=1e300), ds.post_ice, ds.ice_onset, ds.category):
        h.update(np.ascontiguousarray(a).tobytes())
    h.update(json.dumps([ds.ids, ds.ice_reason, ds.schedule.weeks]).encode())
    return h.hexdigest()[:16]


def _p_value(value, se, df, delta, smaller_is_better):
    if smaller_is_better:
        return float(stats.t.cdf((value - delta) / se, df))
    return float(stats.t.sf((value + delta) / se, df))


def _direct(f: MmrmFit, spec: EstimandSpec, visit: int, arms) -> tuple[dict, dict]:
    means = {a: ArmMean(*_ls(f, a, visit)) for a in arms}
    diffs = {}
    for a in arms[1:]:
        c = f.contrast(a, 0, visit, spec.alpha)
        diffs[a] = Difference(c.value, c.se, c.ci_low, c.ci_high, c.df,
                              _p_value(c.value, c.se, c.df, spec.delta, spec.smaller_is_better))
    return means, diffs


def _ls(f, a, visit):
    e = f.ls_mean_change(a, visit)
    return e.value, e.se


def _rules(spec: EstimandSpec, ds: Dataset) -> list[ImputationRule]:
    exp = tuple(a for a in ds.arms if a != 0)
    if spec.delta > 0:
        j2r = dict(kind=ImputationKind.J2R_PLUS_NIM, nim=spec.delta)
    else:
        j2r = dict(kind=ImputationKind.J2R)
    if spec.kind is EstimandKind.DEFACTO:
        return [ImputationRule(applies_to=Selector(arms=exp), **j2r),
                ImputationRule(ImputationKind.MAR_OWN_ARM, Selector(arms=(0,)))]
    null_cats = tuple(c for c, s in sorted(spec.strategies.items()) if s is Strategy.NULL_J2R)
    return [ImputationRule(applies_to=Selector(arms=exp, categories=null_cats), **j2r),
            ImputationRule(ImputationKind.MAR_OWN_ARM, Selector(arms=(0,), categories=null_cats))]


def _fit_one(args):
    values, ds, arms, mspec, start, visit = args
    f = fit_mmrm(ds.with_values(values), mspec, arms=arms, start=start)
    lsm = [_ls(f, a, visit) for a in arms]
    con = [f.contrast(a, 0, visit) for a in arms[1:]]
    return lsm, [(c.value, c.se) for c in con], f.df, f.converged


def estimate(ds: Dataset, spec: EstimandSpec, m: int = 100, seed: int | None = None, *,
             mmrm_spec: MmrmModelSpec = MmrmModelSpec(), workers: int | None = None) -> EstimandResult:
    """Run the estimation pipeline matching ``spec.kind``."""
    rep = validate(ds)
    if not rep.ok:
        v = rep.violations[0]
        raise PipelineError("validate", DataError(f"{v.rule}: {v.detail}"))
    if np.any(ds.has_ice & (ds.category == 0)):
        raise PipelineError("classify", DataError("ICEs present without categories; classify first"))
    visit = spec.analysis_visit or ds.schedule.analysis_visit
    arms = ds.arms
    prov = {"version": __version__, "dataset": dataset_digest(ds), "estimand": spec.to_dict(),
            "mmrm": {"per_arm_cov": mmrm_spec.per_arm_cov}}

    ontrt = analysis_view(ds, DataInclusionPolicy.ON_TREATMENT_ONLY)
    try:
        base_fit = fit_mmrm(ontrt, mmrm_spec, arms=arms)
    except MmrmError as e:
        raise PipelineError("mmrm (on-treatment data)", e) from e

    if spec.kind is EstimandKind.THEORETIC:
        means, diffs = _direct(base_fit, spec, visit, arms)
        prov.update(pipeline="on-treatment data, MMRM under MAR", view=DataInclusionPolicy.ON_TREATMENT_ONLY.value)
        return EstimandResult(spec, visit, means, diffs, prov,
                              {"converged": base_fit.converged, "n_iterations": base_fit.n_iterations})

    if seed is None:
        raise PipelineError("configure", ValueError("multiple imputation needs an explicit seed"))
    if spec.kind is EstimandKind.DEFACTO:
        target = analysis_view(ds, DataInclusionPolicy.ALL_AVAILABLE)
        prov.update(pipeline="all available data, J2R MI for experimental arms, MAR MI for control, MMRM per imputation, Rubin pooling",
                    view=DataInclusionPolicy.ALL_AVAILABLE.value)
    else:
        target = ontrt
        prov.update(pipeline="on-treatment data, J2R MI for Category-1 cells, MMRM with MAR for the rest, Rubin pooling",
                    view=DataInclusionPolicy.ON_TREATMENT_ONLY.value)
    rules = _rules(spec, target)
    prov.update(rules=[r.describe() for r in rules], m=m, master_seed=int(seed),
                imputation_model="MMRM on on-treatment data")
    try:
        imp = impute(target, rules, base_fit, m, seed, require_complete=spec.kind is EstimandKind.DEFACTO)
    except Exception as e:  # noqa: BLE001
        raise PipelineError("imputation", e) from e
    if not imp.targeted.any():
        prov["note"] = "no targeted cells; multiple imputation skipped"
        if spec.kind is EstimandKind.HYBRID or not np.isnan(target.values).any():
            f = base_fit if spec.kind is EstimandKind.HYBRID else fit_mmrm(target, mmrm_spec, arms=arms)
            means, diffs = _direct(f, spec, visit, arms)
            return EstimandResult(spec, visit, means, diffs, prov, {"converged": f.converged})

    start = base_fit.theta if spec.kind is EstimandKind.HYBRID else None
    jobs = [(imp.completed[i], target, arms, mmrm_spec, start, visit) for i in range(m)]
    try:
        if workers and workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                outs = list(ex.map(_fit_one, jobs, chunksize=max(1, m // (4 * workers))))
        else:
            outs = [_fit_one(j) for j in jobs]
    except MmrmError as e:
        raise PipelineError("mmrm (per imputation)", e) from e
    df_com = outs[0][2]
    means = {}
    for j, a in enumerate(arms):
        vals = [o[0][j][0] for o in outs]
        ses = [o[0][j][1] for o in outs]
        pe = pool(vals, ses, df_com, spec.alpha)
        means[a] = ArmMean(pe.q_bar, pe.se)
    diffs = {}
    for j, a in enumerate(arms[1:]):
        pe = pool([o[1][j][0] for o in outs], [o[1][j][1] for o in outs], df_com, spec.alpha,
                  spec.delta, spec.smaller_is_better)
        diffs[a] = Difference(pe.q_bar, pe.se, pe.ci_low, pe.ci_high, pe.df, pe.p_value, pe.W, pe.B)
    diag = {"all_converged": all(o[3] for o in outs), "n_targeted_cells": int(imp.targeted.sum())}
    return EstimandResult(spec, visit, means, diffs, prov, diag)


# ---------------------------------------------------------------- plug-in

def plug_in_mu_hat(completed, s1, arm_of, delta: float = 0.0, arm: int = 1, visit: int | None = None) -> float:
    """Arm-mean plug-in estimator of the hybrid estimand, averaged over completed datasets.

    ``completed`` holds (n, T) value arrays (or Datasets) in which Category-1
    experimental subjects carry their control-condition predictions; ``s1``
    is the Category-1 indicator per subject (NaN = unclassified).
    """
    s1 = np.asarray(s1, float)
    arm_of = np.asarray(arm_of)
    exp = arm_of == arm
    if np.any(np.isnan(s1[exp])):
        raise ValueError("classification missing for an experimental subject")
    out = []
    for y in completed:
        y = np.asarray(getattr(y, "values", y), float)
        t = y.shape[1] - 1 if visit is None else visit - 1
        yt = y[:, t]
        if np.any(np.isnan(yt[exp | (arm_of == 0)])):
            raise ValueError("completed dataset has missing values at the analysis visit")
        s = s1[exp]
        out.append(float(np.mean((1 - s) * yt[exp] + s * (yt[exp] + delta)) - np.mean(yt[arm_of == 0])))
    return float(np.mean(out))


def hybrid_plug_in(ds: Dataset, delta: float = 0.0, m: int = 100, seed: int = 0, arm: int = 1,
                   mmrm_spec: MmrmModelSpec = MmrmModelSpec()) -> tuple[float, list[float]]:
    """Plug-in estimate with Category-1 experimental subjects imputed by J2R and
    every other missing cell under MAR.  Returns (mean, per-imputation values)."""
    ontrt = analysis_view(ds, DataInclusionPolicy.ON_TREATMENT_ONLY)
    f = fit_mmrm(ontrt, mmrm_spec)
    exp = tuple(a for a in ds.arms if a != 0)
    cat1_exp = Selector(arms=exp, categories=(1,))
    rules = [ImputationRule(ImputationKind.J2R, cat1_exp),
             ImputationRule(ImputationKind.MAR_OWN_ARM, _Complement(cat1_exp))]
    imp = impute(ontrt, rules, f, m, seed, require_complete=True)
    s1 = np.where(ds.has_ice & (ds.category == 0), np.nan, (ds.category == 1).astype(float))
    per = [plug_in_mu_hat([y], s1, ds.arm, delta, arm) for y in imp.completed]
    return float(np.mean(per)), per


@dataclass(frozen=True)
class _Complement:
    inner: Selector

    def __call__(self, ds):
        return ~self.inner(ds)

    def describe(self):
        return f"not ({self.inner.describe()})"


def run_all(ds: Dataset, delta: float = 0.0, m: int = 100, seed: int = 0, **kw) -> dict:
    """Theoretic, de facto and hybrid results on one dataset."""
    sib = ds.smaller_is_better
    return {k: estimate(ds, EstimandSpec(k, delta, sib), m, seed, **kw) for k in EstimandKind}


def mc_se(x) -> float:
    x = np.asarray(x, float)
    return float(np.std(x, ddof=1) / math.sqrt(len(x)))
