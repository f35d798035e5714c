"""REML fit of the mixed model for repeated measures (MMRM).

Mean model: one intercept, one effect per experimental arm and one
baseline slope for every post-baseline visit (the cell-means form of
treatment + visit + treatment*visit + baseline + baseline*visit).  Baseline
is centred at the dataset mean so LS-means are intercept + arm effect.

Within-subject covariance is unstructured, shared across arms or one per
arm, parameterised by log-Cholesky factors.  The fixed effects are
profiled out, and only the observed visits of each subject enter the
likelihood (valid under MAR).

Subjects sharing a covariance group and an observed-visit pattern are
processed together: with the design ``I_T (x) x_i'`` every pattern adds
``kron(W_p, X_p'X_p)`` to the GLS normal matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg, stats

from .data import Dataset

LOG2PI = math.log(2.0 * math.pi)


class MmrmError(RuntimeError):
    """Numerical failure while fitting."""


class SingularFitError(MmrmError):
    pass


class RankDeficientError(MmrmError):
    def __init__(self, column: str):
        super().__init__(f"design is rank deficient: column {column!r} is aliased")
        self.column = column


class ConvergenceError(MmrmError):
    def __init__(self, msg: str, fit: "MmrmFit"):
        super().__init__(msg)
        self.fit = fit


@dataclass(frozen=True)
class MmrmModelSpec:
    per_arm_cov: bool = False
    max_iter: int = 200
    ftol: float = 1e-8   # relative change in the restricted log-likelihood
    gtol: float = 1e-6   # gradient norm


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float
    ci_low: float = math.nan
    ci_high: float = math.nan
    df: float = math.nan


# ------------------------------------------------------------ log-Cholesky

def tril_index(T: int):
    return np.tril_indices(T)


def chol_to_theta(L: np.ndarray) -> np.ndarray:
    T = L.shape[0]
    r, c = np.tril_indices(T)
    th = L[r, c].copy()
    d = r == c
    th[d] = np.log(th[d])
    return th


def theta_to_chol(theta: np.ndarray, T: int) -> np.ndarray:
    r, c = np.tril_indices(T)
    L = np.zeros((T, T))
    vals = np.array(theta, dtype=float)
    d = r == c
    vals[d] = np.exp(vals[d])
    L[r, c] = vals
    return L


def theta_to_cov(theta: np.ndarray, T: int) -> np.ndarray:
    L = theta_to_chol(theta, T)
    return L @ L.T


def cov_to_theta(S: np.ndarray) -> np.ndarray:
    return chol_to_theta(np.linalg.cholesky(S))


# ------------------------------------------------------------------ model

@dataclass
class _Pattern:
    group: int
    obs: np.ndarray        # visit indices observed
    ix: tuple              # np.ix_(obs, obs)
    n: int
    XtX: np.ndarray        # (q, q)
    YtX: np.ndarray        # (|O|, q)
    YtY: np.ndarray        # (|O|, |O|)


class MmrmProblem:
    """Data-side state for REML evaluation; built once per dataset."""

    def __init__(self, ds: Dataset, spec: MmrmModelSpec = MmrmModelSpec(), arms=None):
        self.spec = spec
        self.T = T = ds.n_visits
        self.arms = sorted(ds.arms if arms is None else arms)
        if len(self.arms) < 2:
            raise MmrmError("MMRM needs at least two arms")
        if self.arms[0] != 0:
            raise MmrmError("reference arm 0 is absent")
        y = np.asarray(ds.values, float)
        obs = ~np.isnan(y)
        keep = obs.any(axis=1)
        self.center = float(np.mean(ds.baseline))
        arm = np.asarray(ds.arm)[keep]
        base = np.asarray(ds.baseline)[keep] - self.center
        y, obs = y[keep], obs[keep]
        n = len(arm)
        K = len(self.arms) - 1
        X = np.zeros((n, K + 2))
        X[:, 0] = 1.0
        for k, a in enumerate(self.arms[1:], start=1):
            X[:, k] = arm == a
        X[:, -1] = base
        self.col_names = ["intercept"] + [f"arm{a}" for a in self.arms[1:]] + ["baseline"]
        self.q = q = X.shape[1]
        self.p = T * q
        self.beta_names = [f"{c}:visit{t + 1}" for t in range(T) for c in self.col_names]
        self.values_are_change = ds.values_are_change
        self.n_subjects = n
        self.n_obs = int(obs.sum())
        self._check_rank(X, obs)
        self.df = float(n - np.linalg.matrix_rank(X))
        self.X, self.y, self.obs, self.arm = X, y, obs, arm
        self.n_groups = len(self.arms) if spec.per_arm_cov else 1
        grp = np.searchsorted(self.arms, arm) if spec.per_arm_cov else np.zeros(n, int)
        self.group = grp
        codes = obs @ (1 << np.arange(T)) + grp * (1 << T)
        self.patterns: list[_Pattern] = []
        for code in np.unique(codes):
            idx = np.flatnonzero(codes == code)
            o = np.flatnonzero(obs[idx[0]])
            Xp, Yp = X[idx], y[np.ix_(idx, o)]
            self.patterns.append(_Pattern(int(grp[idx[0]]), o, np.ix_(o, o), len(idx),
                                          Xp.T @ Xp, Yp.T @ Xp, Yp.T @ Yp))
        self.n_theta_group = T * (T + 1) // 2
        self.n_theta = self.n_theta_group * self.n_groups

    def _check_rank(self, X, obs):
        for t in range(self.T):
            Xt = X[obs[:, t]]
            rank = 0
            for j in range(X.shape[1]):
                r = np.linalg.matrix_rank(Xt[:, : j + 1]) if len(Xt) else 0
                if r == rank:
                    raise RankDeficientError(f"{self.col_names[j]}:visit{t + 1}")
                rank = r

    # ---------------------------------------------------------------- REML
    def sigmas(self, theta) -> list[np.ndarray]:
        m = self.n_theta_group
        return [theta_to_cov(theta[g * m:(g + 1) * m], self.T) for g in range(self.n_groups)]

    def evaluate(self, theta, grad: bool = True):
        """Restricted log-likelihood, its gradient in theta, and the GLS beta."""
        T, q, p = self.T, self.q, self.p
        m = self.n_theta_group
        Ls = [theta_to_chol(theta[g * m:(g + 1) * m], T) for g in range(self.n_groups)]
        Ss = [L @ L.T for L in Ls]
        A4 = np.zeros((T, q, T, q))
        b = np.zeros((T, q))
        logdet_v = 0.0
        cache = []
        for pat in self.patterns:
            V = Ss[pat.group][pat.ix]
            try:
                cV = linalg.cho_factor(V, lower=True, check_finite=False)
            except linalg.LinAlgError:
                raise SingularFitError("covariance not positive definite") from None
            Vinv = linalg.cho_solve(cV, np.eye(len(pat.obs)), check_finite=False)
            logdet_v += pat.n * 2.0 * np.sum(np.log(np.diag(cV[0])))
            W = np.zeros((T, T))
            W[pat.ix] = Vinv
            A4 += W[:, None, :, None] * pat.XtX[None, :, None, :]
            b[pat.obs] += Vinv @ pat.YtX
            cache.append(Vinv)
        A = A4.reshape(p, p)
        try:
            cA = linalg.cho_factor(A, lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise SingularFitError("GLS normal matrix is singular") from None
        beta = linalg.cho_solve(cA, b.ravel(), check_finite=False)
        B = beta.reshape(T, q)
        logdet_a = 2.0 * np.sum(np.log(np.diag(cA[0])))
        quad = 0.0
        grads = [np.zeros((T, T)) for _ in range(self.n_groups)] if grad else None
        if grad:
            Ainv4 = linalg.cho_solve(cA, np.eye(p), check_finite=False).reshape(T, q, T, q)
        for pat, Vinv in zip(self.patterns, cache):
            Bo = B[pat.obs]
            cross = pat.YtX @ Bo.T
            RtR = pat.YtY - cross - cross.T + Bo @ pat.XtX @ Bo.T
            quad += np.sum(Vinv * RtR)
            if grad:
                C = np.tensordot(Ainv4, pat.XtX, axes=([1, 3], [0, 1]))[pat.ix]
                G = pat.n * Vinv - Vinv @ (C + RtR) @ Vinv
                grads[pat.group][pat.ix] -= 0.5 * G
        ll = -0.5 * (logdet_v + logdet_a + quad + (self.n_obs - p) * LOG2PI)
        if not grad:
            return ll, None, beta, cA
        r, c = np.tril_indices(T)
        d = r == c
        g_theta = []
        for L, G in zip(Ls, grads):
            G = 0.5 * (G + G.T)
            gt = (2.0 * G @ L)[r, c]
            gt[d] *= L[r[d], c[d]]
            g_theta.append(gt)
        return ll, np.concatenate(g_theta), beta, cA

    def loglik(self, theta) -> float:
        return self.evaluate(theta, grad=False)[0]

    def gradient(self, theta) -> np.ndarray:
        return self.evaluate(theta, grad=True)[1]

    # -------------------------------------------------------------- start
    def start_theta(self) -> np.ndarray:
        """Per-visit OLS residuals, pairwise-deletion covariance, SPD floor."""
        T, q = self.T, self.q
        resid = np.full(self.y.shape, np.nan)
        for t in range(T):
            m = self.obs[:, t]
            coef, *_ = np.linalg.lstsq(self.X[m], self.y[m, t], rcond=None)
            resid[m, t] = self.y[m, t] - self.X[m] @ coef
        thetas = []
        for g in range(self.n_groups):
            sel = self.group == g
            R = np.nan_to_num(resid[sel])
            O = self.obs[sel].astype(float)
            cnt = O.T @ O
            S = (R.T @ R) / np.maximum(cnt - q, 1.0)
            S = 0.5 * (S + S.T)
            w, U = np.linalg.eigh(S)
            tr = float(np.trace(S))
            scale = float(np.mean(self.y[self.obs] ** 2)) or 1.0
            if not np.isfinite(tr) or tr <= 1e-12 * T * scale:
                raise SingularFitError("residual covariance is zero; Sigma cannot be positive definite")
            w = np.maximum(w, 1e-6 * tr / T)
            S = (U * w) @ U.T
            try:
                thetas.append(cov_to_theta(0.5 * (S + S.T)))
            except np.linalg.LinAlgError:
                raise SingularFitError("starting covariance not positive definite") from None
        return np.concatenate(thetas)


# -------------------------------------------------------------------- fit

@dataclass(frozen=True, eq=False)
class MmrmFit:
    beta: np.ndarray
    sigmas: tuple
    vcov_beta: np.ndarray
    theta: np.ndarray
    reml_loglik: float
    converged: bool
    n_iterations: int
    df: float
    arms: tuple
    center: float
    n_visits: int
    beta_names: tuple
    values_are_change: bool = True
    per_arm_cov: bool = False
    loglik_trace: tuple = ()
    problem: MmrmProblem = field(default=None, repr=False)

    @property
    def Sigma(self) -> np.ndarray:
        return self.sigmas[0]

    @property
    def q(self) -> int:
        return len(self.beta) // self.n_visits

    def beta_matrix(self, beta=None) -> np.ndarray:
        return (self.beta if beta is None else beta).reshape(self.n_visits, self.q)

    def sigma_for(self, arm: int, sigmas=None) -> np.ndarray:
        sigmas = self.sigmas if sigmas is None else sigmas
        return sigmas[self.arms.index(arm)] if self.per_arm_cov else sigmas[0]

    def _arm_col(self, arm: int) -> int:
        if arm not in self.arms:
            raise KeyError(f"arm {arm} not in fit (arms {list(self.arms)})")
        return self.arms.index(arm)  # 0 for reference, k for k-th experimental arm

    def mean_profile(self, arm: int, baseline, beta=None) -> np.ndarray:
        """Model mean (analysis scale) for ``arm`` at each visit, one row per baseline value."""
        B = self.beta_matrix(beta)
        k = self._arm_col(arm)
        base = np.atleast_1d(np.asarray(baseline, float)) - self.center
        mu = B[:, 0][None, :] + base[:, None] * B[:, -1][None, :]
        if k:
            mu = mu + B[:, k][None, :]
        return mu

    def _lsmean_vector(self, arm: int, visit: int) -> np.ndarray:
        if not 1 <= visit <= self.n_visits:
            raise ValueError(f"visit {visit} outside schedule 1..{self.n_visits}")
        k = self._arm_col(arm)
        c = np.zeros(len(self.beta))
        t = visit - 1
        c[t * self.q] = 1.0
        if k:
            c[t * self.q + k] = 1.0
        return c

    def ls_mean_change(self, arm: int, visit: int | None = None) -> Estimate:
        visit = self.n_visits if visit is None else visit
        c = self._lsmean_vector(arm, visit)
        val = float(c @ self.beta)
        if not self.values_are_change:
            val -= self.center
        return Estimate(val, float(math.sqrt(max(c @ self.vcov_beta @ c, 0.0))))

    def contrast(self, arm_a: int, arm_b: int, visit: int | None = None, alpha: float = 0.05) -> Estimate:
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        visit = self.n_visits if visit is None else visit
        c = self._lsmean_vector(arm_a, visit) - self._lsmean_vector(arm_b, visit)
        val = float(c @ self.beta)
        se = float(math.sqrt(max(c @ self.vcov_beta @ c, 0.0)))
        h = stats.t.ppf(1.0 - alpha / 2.0, self.df) * se
        return Estimate(val, se, float(val - h), float(val + h), float(self.df))

    @cached_property
    def theta_cov(self) -> np.ndarray:
        """Asymptotic covariance of the log-Cholesky parameters (inverse observed information)."""
        if self.problem is None:
            raise MmrmError("fit does not carry its problem; refit to get theta_cov")
        H = numerical_hessian(self.problem.gradient, self.theta)
        info = -0.5 * (H + H.T)
        try:
            return np.linalg.inv(info)
        except np.linalg.LinAlgError:
            raise SingularFitError("information matrix of covariance parameters is singular") from None

    def to_dict(self) -> dict:
        return {
            "beta": {n: float(b) for n, b in zip(self.beta_names, self.beta)},
            "se_beta": {n: float(math.sqrt(v)) for n, v in zip(self.beta_names, np.diag(self.vcov_beta))},
            "sigma": [s.tolist() for s in self.sigmas],
            "reml_loglik": float(self.reml_loglik),
            "converged": bool(self.converged),
            "n_iterations": int(self.n_iterations),
            "df": float(self.df),
            "arms": list(self.arms),
            "baseline_center": float(self.center),
        }


def numerical_hessian(grad_fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    n = len(x)
    H = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        H[:, k] = (grad_fn(x + e) - grad_fn(x - e)) / (2.0 * h)
    return 0.5 * (H + H.T)


def _make_fit(prob: MmrmProblem, theta, ll, beta, cA, converged, it, trace) -> MmrmFit:
    vcov = linalg.cho_solve(cA, np.eye(prob.p), check_finite=False)
    return MmrmFit(
        beta=beta, sigmas=tuple(prob.sigmas(theta)), vcov_beta=0.5 * (vcov + vcov.T),
        theta=np.array(theta), reml_loglik=float(ll), converged=converged, n_iterations=it,
        df=prob.df, arms=tuple(prob.arms), center=prob.center, n_visits=prob.T,
        beta_names=tuple(prob.beta_names), values_are_change=prob.values_are_change,
        per_arm_cov=prob.spec.per_arm_cov, loglik_trace=tuple(trace), problem=prob,
    )


def fit(ds: Dataset, spec: MmrmModelSpec = MmrmModelSpec(), *, arms=None, start=None) -> MmrmFit:
    """Maximise the restricted likelihood with BFGS and a backtracking line search."""
    prob = MmrmProblem(ds, spec, arms)
    theta = prob.start_theta() if start is None else np.array(start, float)
    return _optimize(prob, theta)


def _optimize(prob: MmrmProblem, theta: np.ndarray) -> MmrmFit:
    spec = prob.spec
    ll, g, beta, cA = prob.evaluate(theta)
    trace = [ll]
    n = len(theta)
    Hinv = np.eye(n) / max(prob.n_subjects, 1)
    rel = 0.0
    it = 0
    while True:
        gnorm = float(np.linalg.norm(g))
        if gnorm < spec.gtol and rel < spec.ftol:
            return _make_fit(prob, theta, ll, beta, cA, True, it, trace)
        if it >= spec.max_iter:
            last = _make_fit(prob, theta, ll, beta, cA, False, it, trace)
            raise ConvergenceError(f"REML did not converge in {it} iterations (|grad|={gnorm:.3g})", last)
        it += 1
        d = Hinv @ g  # ascent direction for ll
        slope = float(g @ d)
        if slope <= 0:
            Hinv = np.eye(n) / max(prob.n_subjects, 1)
            d = Hinv @ g
            slope = float(g @ d)
        step = 1.0
        slack = 1e-12 * (1.0 + abs(ll))
        while True:
            cand = theta + step * d
            try:
                ll_new, g_new, beta_new, cA_new = prob.evaluate(cand)
                ok = np.isfinite(ll_new) and ll_new >= ll + 1e-4 * step * slope - slack
            except MmrmError:
                ok = False
            if ok:
                break
            step *= 0.5
            if step < 1e-12:
                last = _make_fit(prob, theta, ll, beta, cA, False, it, trace)
                raise ConvergenceError("line search failed", last)
        s = cand - theta
        yv = g - g_new  # gradient of -ll changes by -(g_new - g)
        sy = float(s @ yv)
        if sy > 1e-14:
            rho = 1.0 / sy
            I = np.eye(n)
            Hinv = (I - rho * np.outer(s, yv)) @ Hinv @ (I - rho * np.outer(yv, s)) + rho * np.outer(s, s)
        rel = abs(ll_new - ll) / max(abs(ll_new), 1.0)
        theta, ll, g, beta, cA = cand, ll_new, g_new, beta_new, cA_new
        trace.append(ll)


def refit(fit_: MmrmFit, ds: Dataset, start_from_fit: bool = True) -> MmrmFit:
    spec = fit_.problem.spec if fit_.problem is not None else MmrmModelSpec(per_arm_cov=fit_.per_arm_cov)
    return fit(ds, spec, arms=list(fit_.arms), start=fit_.theta if start_from_fit else None)


def ls_mean_change(fit_: MmrmFit, arm: int, visit: int | None = None) -> Estimate:
    return fit_.ls_mean_change(arm, visit)


def contrast(fit_: MmrmFit, arm_a: int, arm_b: int, visit: int | None = None, alpha: float = 0.05) -> Estimate:
    return fit_.contrast(arm_a, arm_b, visit, alpha)
