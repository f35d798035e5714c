"""Multiple imputation under MAR, jump-to-reference (optionally NIM-shifted)
and return-to-baseline rules.

Every imputation gets its own generator derived from the master seed and
its index, so imputations can run in any order or in parallel and produce
the same completed datasets.
"""
from __future__ import annotations

import csv
import enum
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import DataError, Dataset, dataset_rows, CSV_COLUMNS, deviation_visit
from .mmrm import MmrmError, MmrmFit, theta_to_cov

COND_LIMIT = 1e12


class ImputationError(RuntimeError):
    pass


class ImputationKind(str, enum.Enum):
    MAR_OWN_ARM = "MAR_OwnArm"
    J2R = "J2R"
    J2R_PLUS_NIM = "J2R_PlusNim"
    RETURN_TO_BASELINE = "ReturnToBaseline"


@dataclass(frozen=True)
class Selector:
    """Subject predicate: arm membership and/or ICE category membership."""

    arms: tuple | None = None
    categories: tuple | None = None
    exclude_arms: tuple = ()

    def __call__(self, ds: Dataset) -> np.ndarray:
        m = np.ones(ds.n_subjects, bool)
        if self.arms is not None:
            m &= np.isin(ds.arm, self.arms)
        if self.exclude_arms:
            m &= ~np.isin(ds.arm, self.exclude_arms)
        if self.categories is not None:
            m &= np.isin(ds.category, self.categories)
        return m

    def describe(self) -> str:
        parts = []
        if self.arms is not None:
            parts.append(f"arm in {list(self.arms)}")
        if self.exclude_arms:
            parts.append(f"arm not in {list(self.exclude_arms)}")
        if self.categories is not None:
            parts.append(f"category in {list(self.categories)}")
        return " and ".join(parts) or "all subjects"


@dataclass(frozen=True)
class ImputationRule:
    kind: ImputationKind
    applies_to: Callable[[Dataset], np.ndarray] = Selector()
    reference_arm: int = 0
    nim: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ImputationKind(self.kind))
        if self.nim < 0:
            raise ValueError("nim must be >= 0")
        if self.nim > 0 and self.kind is not ImputationKind.J2R_PLUS_NIM:
            raise ValueError("nim is only used by J2R_PlusNim rules")

    def describe(self) -> dict:
        who = self.applies_to.describe() if hasattr(self.applies_to, "describe") else repr(self.applies_to)
        d = {"kind": self.kind.value, "applies_to": who}
        if self.kind in (ImputationKind.J2R, ImputationKind.J2R_PLUS_NIM):
            d["reference_arm"] = self.reference_arm
        if self.kind is ImputationKind.J2R_PLUS_NIM:
            d["nim"] = self.nim
        return d


@dataclass(frozen=True)
class ParameterDraw:
    beta: np.ndarray
    sigmas: tuple


@dataclass(frozen=True, eq=False)
class ImputedSet:
    base: Dataset
    completed: np.ndarray          # (m, n, T)
    targeted: np.ndarray           # (n, T) cells filled by imputation
    master_seed: int
    per_imputation_seeds: tuple
    parameter_draws: tuple
    rules: tuple

    @property
    def m(self) -> int:
        return self.completed.shape[0]

    def dataset(self, i: int) -> Dataset:
        return self.base.with_values(self.completed[i])

    def datasets(self):
        for i in range(self.m):
            yield self.dataset(i)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("imputation_index",) + CSV_COLUMNS)
            for i, d in enumerate(self.datasets(), start=1):
                for row in dataset_rows(d):
                    w.writerow([str(i)] + row)


# ---------------------------------------------------------------- seeding

def derive_seeds(master_seed: int, m: int) -> list[int]:
    children = np.random.SeedSequence(master_seed).spawn(m)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ------------------------------------------------------------- primitives

def draw_parameters(fit: MmrmFit, seed) -> ParameterDraw:
    """Draw (beta, Sigma) from the asymptotic normal around the REML fit."""
    rng = _rng(seed)
    try:
        Lb = np.linalg.cholesky(fit.vcov_beta)
    except np.linalg.LinAlgError:
        raise ImputationError("vcov_beta is not positive definite") from None
    beta = fit.beta + Lb @ rng.standard_normal(len(fit.beta))
    try:
        Lt = np.linalg.cholesky(fit.theta_cov)
    except (np.linalg.LinAlgError, MmrmError):
        raise ImputationError("covariance-parameter information is not positive definite") from None
    theta = fit.theta + Lt @ rng.standard_normal(len(fit.theta))
    T = fit.n_visits
    m = T * (T + 1) // 2
    sigmas = tuple(theta_to_cov(theta[g * m:(g + 1) * m], T) for g in range(len(theta) // m))
    return ParameterDraw(beta, sigmas)


def _conditional(Sigma, obs, tgt):
    """Regression matrix and Cholesky factor of the conditional law of tgt given obs."""
    S_mm = Sigma[np.ix_(tgt, tgt)]
    if len(obs) == 0:
        return None, np.linalg.cholesky(S_mm)
    S_oo = Sigma[np.ix_(obs, obs)]
    if np.linalg.cond(S_oo) > COND_LIMIT:
        raise ImputationError("Sigma_OO is numerically singular")
    try:
        c = np.linalg.cholesky(S_oo)
    except np.linalg.LinAlgError:
        raise ImputationError("Sigma_OO is not positive definite") from None
    S_mo = Sigma[np.ix_(tgt, obs)]
    tmp = np.linalg.solve(c, S_mo.T)          # c^-1 S_om
    coef = np.linalg.solve(c.T, tmp).T        # S_mo S_oo^-1
    cov = S_mm - tmp.T @ tmp
    cov = 0.5 * (cov + cov.T)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(cov)
        chol = U * np.sqrt(np.clip(w, 0.0, None))
    return coef, chol


def conditional_moments(mu, Sigma, y, targets=None):
    """Conditional mean and covariance of the target cells given the observed ones."""
    y = np.asarray(y, float)
    mu = np.asarray(mu, float)
    obs = np.flatnonzero(~np.isnan(y))
    tgt = np.flatnonzero(np.isnan(y) if targets is None else np.asarray(targets) & np.isnan(y))
    S_mm = Sigma[np.ix_(tgt, tgt)]
    if len(obs) == 0:
        return tgt, mu[tgt], S_mm
    S_oo = Sigma[np.ix_(obs, obs)]
    S_mo = Sigma[np.ix_(tgt, obs)]
    K = np.linalg.solve(S_oo, S_mo.T).T
    return tgt, mu[tgt] + K @ (y[obs] - mu[obs]), S_mm - K @ S_mo.T


def _draw_block(Y, MU, Sigma, obs, tgt, rng):
    coef, chol = _conditional(Sigma, obs, tgt)
    mean = MU[:, tgt]
    if coef is not None:
        mean = mean + (Y[:, obs] - MU[:, obs]) @ coef.T
    z = rng.standard_normal((len(Y), len(tgt)))
    return mean + z @ chol.T


def conditional_impute(y, mu_star, Sigma_star, seed, targets=None) -> np.ndarray:
    """Fill the missing (or targeted) cells of one subject's outcome vector.

    Draws from the conditional normal of the missing cells given the
    observed ones under N(mu_star, Sigma_star).
    """
    y = np.asarray(y, float)
    obs = np.flatnonzero(~np.isnan(y))
    miss = np.isnan(y) if targets is None else (np.asarray(targets, bool) & np.isnan(y))
    tgt = np.flatnonzero(miss)
    out = y.copy()
    if len(tgt):
        out[tgt] = _draw_block(y[None, :], np.asarray(mu_star, float)[None, :],
                               np.asarray(Sigma_star, float), obs, tgt, _rng(seed))[0]
    return out


def j2r_covariance(Sigma_own, Sigma_ref, k: int) -> np.ndarray:
    """Joint covariance whose first k visits follow the own arm and whose
    later visits have the reference arm's conditional law given the first k."""
    T = Sigma_own.shape[0]
    if k <= 0:
        return np.array(Sigma_ref, float)
    if k >= T:
        return np.array(Sigma_own, float)
    a11 = Sigma_own[:k, :k]
    r11, r12, r22 = Sigma_ref[:k, :k], Sigma_ref[:k, k:], Sigma_ref[k:, k:]
    R = np.linalg.solve(r11, r12)             # r11^-1 r12
    out = np.empty((T, T))
    out[:k, :k] = a11
    out[k:, :k] = R.T @ a11
    out[:k, k:] = out[k:, :k].T
    out[k:, k:] = r22 - R.T @ (r11 - a11) @ R
    return 0.5 * (out + out.T)


def build_j2r_profile(fit: MmrmFit, draw: ParameterDraw | None, arm: int, baseline, k: int,
                      reference_arm: int = 0):
    """Mean profile(s) and covariance for J2R with deviation after visit ``k``.

    ``baseline`` may be a scalar or an array; the mean has one row per value.
    """
    if reference_arm not in fit.arms:
        raise ImputationError(f"reference arm {reference_arm} absent from fit")
    beta = None if draw is None else draw.beta
    sig = None if draw is None else draw.sigmas
    own = fit.mean_profile(arm, baseline, beta)
    ref = fit.mean_profile(reference_arm, baseline, beta)
    T = fit.n_visits
    k = int(min(max(k, 0), T))
    mu = np.concatenate([own[:, :k], ref[:, k:]], axis=1)
    Sigma = j2r_covariance(fit.sigma_for(arm, sig), fit.sigma_for(reference_arm, sig), k)
    if np.ndim(baseline) == 0:
        mu = mu[0]
    return mu, Sigma


def apply_nim_shift(values, delta: float, smaller_is_better: bool = True, mask=None):
    """Worsen imputed values by the non-inferiority margin.

    Only cells selected by ``mask`` (default: all) are shifted.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    v = np.array(values, float, copy=True)
    shift = delta if smaller_is_better else -delta
    if mask is None:
        return v + shift
    v[np.asarray(mask, bool)] += shift
    return v


# ------------------------------------------------------------- dispatcher

def _rule_masks(ds: Dataset, rules: Sequence[ImputationRule]):
    masks = [np.asarray(r.applies_to(ds), bool) for r in rules]
    if masks:
        count = np.sum(masks, axis=0)
        if np.any(count > 1):
            i = int(np.argmax(count > 1))
            raise ImputationError(f"overlapping imputation rules for subject {ds.ids[i]}")
    return masks


def _impute_one(ds: Dataset, fit: MmrmFit, rules, masks, dev, seed) -> tuple[np.ndarray, ParameterDraw]:
    rng = np.random.default_rng(seed)
    draw = draw_parameters(fit, rng)
    Y = np.array(ds.values, float)
    obs_all = ~np.isnan(Y)
    T = ds.n_visits
    vidx = np.arange(T)
    for rule, mask in zip(rules, masks):
        sel = np.flatnonzero(mask & ~obs_all.all(axis=1))
        if len(sel) == 0:
            continue
        kind = rule.kind
        jump = kind in (ImputationKind.J2R, ImputationKind.J2R_PLUS_NIM, ImputationKind.RETURN_TO_BASELINE)
        k_sel = dev[sel] if jump else np.full(len(sel), T)
        codes = (obs_all[sel] @ (1 << vidx)).astype(np.int64)
        keys = np.stack([ds.arm[sel], k_sel, codes], axis=1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        for g, (arm, k, code) in enumerate(uniq):
            rows = sel[inv == g]
            obs = np.flatnonzero((code >> vidx) & 1)
            tgt = np.flatnonzero(~((code >> vidx) & 1).astype(bool))
            base = ds.baseline[rows]
            if kind is ImputationKind.MAR_OWN_ARM:
                mu = fit.mean_profile(int(arm), base, draw.beta)
                Sigma = fit.sigma_for(int(arm), draw.sigmas)
            elif kind is ImputationKind.RETURN_TO_BASELINE:
                mu = fit.mean_profile(int(arm), base, draw.beta)
                mu[:, k:] = base[:, None] if not ds.values_are_change else 0.0
                Sigma = fit.sigma_for(int(arm), draw.sigmas)
            else:
                mu, Sigma = build_j2r_profile(fit, draw, int(arm), base, int(k), rule.reference_arm)
            vals = _draw_block(Y[rows], mu, Sigma, obs, tgt, rng)
            if kind is ImputationKind.J2R_PLUS_NIM and rule.nim:
                vals = apply_nim_shift(vals, rule.nim, ds.smaller_is_better, mask=np.broadcast_to(tgt >= k, vals.shape))
            Y[np.ix_(rows, tgt)] = vals
    return Y, draw


def _worker(args):
    return _impute_one(*args)


def impute(ds: Dataset, rules: Sequence[ImputationRule], fit: MmrmFit, m: int = 100, master_seed: int = 0,
           *, per_imputation_seeds: Sequence[int] | None = None, require_complete: bool = False,
           workers: int | None = None) -> ImputedSet:
    """Produce ``m`` completed copies of ``ds``.

    Targeted cells are the missing cells of subjects selected by a rule.
    With ``require_complete`` every missing cell must be targeted.
    """
    if m < 2:
        raise ValueError("m must be >= 2")
    rules = tuple(rules)
    for r in rules:
        if r.kind in (ImputationKind.J2R, ImputationKind.J2R_PLUS_NIM) and r.reference_arm not in fit.arms:
            raise ImputationError(f"reference arm {r.reference_arm} absent")
        if r.kind is ImputationKind.J2R_PLUS_NIM and r.nim > 0 and not isinstance(ds.smaller_is_better, bool):
            raise DataError("NIM shift needs a declared smaller_is_better direction")
    masks = _rule_masks(ds, rules)
    missing = np.isnan(ds.values)
    covered = np.zeros(ds.n_subjects, bool)
    for mk in masks:
        covered |= mk
    targeted = missing & covered[:, None]
    if require_complete and np.any(missing & ~targeted):
        i = int(np.argmax((missing & ~targeted).any(axis=1)))
        raise ImputationError(f"missing cells of subject {ds.ids[i]} are not covered by any rule")
    seeds = list(per_imputation_seeds) if per_imputation_seeds is not None else derive_seeds(master_seed, m)
    if len(seeds) != m:
        raise ValueError("need one seed per imputation")
    dev = deviation_visit(ds)
    fit.theta_cov  # computed once before any worker copies the fit
    jobs = [(ds, fit, rules, masks, dev, s) for s in seeds]
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_worker, jobs))
    else:
        results = [_impute_one(*j) for j in jobs]
    completed = np.stack([r[0] for r in results])
    completed.setflags(write=False)
    return ImputedSet(ds, completed, targeted, int(master_seed), tuple(seeds),
                      tuple(r[1] for r in results), rules)
