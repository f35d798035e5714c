"""Rubin's rules with the Barnard-Rubin small-sample degrees of freedom."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class PooledEstimate:
    q_bar: float
    W: float
    B: float
    T_var: float
    df: float
    ci_low: float
    ci_high: float
    p_value: float
    m: int

    @property
    def se(self) -> float:
        return math.sqrt(self.T_var)

    @property
    def value(self) -> float:
        return self.q_bar


def barnard_rubin_df(m: int, W: float, B: float, complete_df: float) -> float:
    T_var = W + (1.0 + 1.0 / m) * B
    lam = (1.0 + 1.0 / m) * B / T_var if T_var > 0 else 0.0
    lam2 = lam * lam
    nu_old = math.inf if lam2 == 0.0 else (m - 1) / lam2
    if math.isinf(complete_df):
        return nu_old
    nu_obs = (complete_df + 1.0) / (complete_df + 3.0) * complete_df * (1.0 - lam)
    if math.isinf(nu_old):
        return nu_obs
    return 1.0 / (1.0 / nu_old + 1.0 / nu_obs)


def pool(values: Sequence[float], ses: Sequence[float], complete_df: float | Sequence[float] = math.inf,
         alpha: float = 0.05, delta: float = 0.0, smaller_is_better: bool = True) -> PooledEstimate:
    """Combine M per-imputation estimates.

    The p-value is one-sided for H0: mu = delta against mu < delta when
    smaller is better (mu > -delta otherwise).
    """
    q = np.asarray(values, float)
    se = np.asarray(ses, float)
    m = len(q)
    if m < 2:
        raise ValueError("pooling needs at least 2 imputations")
    if se.shape != q.shape:
        raise ValueError("values and ses must have the same length")
    if np.any(se <= 0) or not np.all(np.isfinite(se)):
        raise ValueError("all standard errors must be positive")
    nu_com = float(np.mean(complete_df))
    q_bar = float(np.mean(q))
    W = float(np.mean(se**2))
    B = float(np.var(q, ddof=1))
    T_var = W + (1.0 + 1.0 / m) * B
    df = barnard_rubin_df(m, W, B, nu_com)
    s = math.sqrt(T_var)
    h = float(stats.t.ppf(1.0 - alpha / 2.0, df)) * s
    if smaller_is_better:
        p = float(stats.t.cdf((q_bar - delta) / s, df))
    else:
        p = float(stats.t.sf((q_bar + delta) / s, df))
    return PooledEstimate(q_bar, W, B, T_var, df, q_bar - h, q_bar + h, p, m)
