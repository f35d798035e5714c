"""Monte-Carlo validation: simulate R trials, run the pipelines, compare each
estimate with its matching potential-outcome oracle.

Replication r uses data seed and imputation seed derived from the master
seed and r only, so sequential and parallel runs give identical reports.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimands import EstimandKind, EstimandSpec, estimate, true_defacto, true_hybrid, true_theoretic
from .simulate import ScenarioConfig, simulate

ORACLES = {
    EstimandKind.THEORETIC: lambda tr, d, a: true_theoretic(tr, a),
    EstimandKind.DEFACTO: lambda tr, d, a: true_defacto(tr, a),
    EstimandKind.HYBRID: lambda tr, d, a: true_hybrid(tr, d, a),
}

FIELDS = ("estimate", "se", "ci_low", "ci_high", "p_value", "truth")


@dataclass(frozen=True)
class ValidationSettings:
    config: ScenarioConfig
    replications: int = 200
    m: int = 100
    master_seed: int = 0
    delta: float = 0.0
    kinds: tuple = tuple(EstimandKind)
    alpha: float = 0.05
    min_replications: int = 50

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(EstimandKind(k) for k in self.kinds))
        if self.replications < self.min_replications:
            raise ValueError(f"replications must be >= {self.min_replications}")
        if self.m < 2:
            raise ValueError("m must be >= 2")


def replication_seeds(master_seed: int, r: int) -> tuple[int, int]:
    """(data seed, imputation seed) of replication r."""
    s = np.random.SeedSequence(master_seed, spawn_key=(r,)).generate_state(2, np.uint64)
    return int(s[0]), int(s[1])


def run_replication(args) -> np.ndarray:
    """One replication -> array (kinds, experimental arms, FIELDS)."""
    st, r = args
    data_seed, imp_seed = replication_seeds(st.master_seed, r)
    ds, truth = simulate(st.config.replace(master_seed=data_seed))
    exp = ds.arms[1:]
    out = np.empty((len(st.kinds), len(exp), len(FIELDS)))
    for i, k in enumerate(st.kinds):
        res = estimate(ds, EstimandSpec(k, st.delta, ds.smaller_is_better, alpha=st.alpha), st.m, imp_seed)
        for j, a in enumerate(exp):
            d = res.difference(a)
            out[i, j] = (d.value, d.se, d.ci_low, d.ci_high, d.p_value, ORACLES[k](truth, st.delta, a))
    return out


@dataclass(frozen=True, eq=False)
class ValidationReport:
    settings: ValidationSettings
    raw: np.ndarray                      # (R, kinds, arms, FIELDS)
    summary: list = field(default_factory=list)

    def to_dict(self) -> dict:
        st = self.settings
        return {"replications": st.replications, "m": st.m, "master_seed": st.master_seed, "delta": st.delta,
                "alpha": st.alpha, "config": st.config.to_dict(), "config_digest": st.config.digest(),
                "summary": self.summary}

    def to_text(self) -> str:
        st = self.settings
        head = (f"Validation: R={st.replications}, M={st.m}, delta={st.delta}, seed={st.master_seed}, "
                f"config {st.config.digest()}\n")
        cols = ["estimand", "arm", "mean est", "mean truth", "bias", "MC SE", "coverage", "reject H0"]
        rows = [[s["estimand"], str(s["arm"]), f"{s['mean_estimate']:.4f}", f"{s['mean_truth']:.4f}",
                 f"{s['bias']:.4f}", f"{s['bias_mcse']:.4f}", f"{s['coverage']:.3f}", f"{s['reject_rate']:.3f}"]
                for s in self.summary]
        w = [max(len(x) for x in col) for col in zip(cols, *rows)]
        line = lambda r: "  ".join(c.rjust(k) for c, k in zip(r, w))  # noqa: E731
        return head + "\n".join([line(cols), "  ".join("-" * k for k in w)] + [line(r) for r in rows]) + "\n"


def summarize_raw(st: ValidationSettings, raw: np.ndarray) -> list[dict]:
    R = raw.shape[0]
    out = []
    for i, k in enumerate(st.kinds):
        for j in range(raw.shape[2]):
            x = raw[:, i, j, :]
            err = x[:, 0] - x[:, 5]
            cover = (x[:, 2] <= x[:, 5]) & (x[:, 5] <= x[:, 3])
            rej = x[:, 4] < st.alpha / 2
            out.append({
                "estimand": k.value, "arm": j + 1,
                "mean_estimate": float(x[:, 0].mean()), "mean_truth": float(x[:, 5].mean()),
                "bias": float(err.mean()), "bias_mcse": float(err.std(ddof=1) / math.sqrt(R)),
                "empirical_se": float(x[:, 0].std(ddof=1)), "mean_model_se": float(x[:, 1].mean()),
                "coverage": float(cover.mean()), "coverage_mcse": float(math.sqrt(cover.mean() * (1 - cover.mean()) / R)),
                "reject_rate": float(rej.mean()),
            })
    return out


def run_validation(st: ValidationSettings, workers: int | None = None) -> ValidationReport:
    jobs = [(st, r) for r in range(st.replications)]
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(run_replication, jobs))
    else:
        parts = [run_replication(j) for j in jobs]
    raw = np.stack(parts)
    return ValidationReport(st, raw, summarize_raw(st, raw))


__all__ = ["ValidationSettings", "ValidationReport", "run_validation", "run_replication", "replication_seeds"]
