"""Potential-outcome simulator for longitudinal trials with ICEs.

Each subject has a baseline, a residual vector shared by all arms and an
individual treatment-effect deviation, giving completion outcomes
``Y_t(z)`` for every arm.  ICE processes are generated under every arm
with common random numbers, so ``S(z)`` (Category-1 indicator) and the
policy (observed-world) trajectories ``Y*_t(z)`` exist for all arms.  The
returned :class:`~hybridest.data.Dataset` is the projection on the
assigned arm.

All structure here is synthetic; presets only aim at published marginal
proportions and arm means.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Reason, VisitSchedule
from .ice import classify_dataset


class ConfigError(ValueError):
    pass


def _tup(x):
    return tuple(_tup(v) for v in x) if isinstance(x, (list, tuple, np.ndarray)) else x


@dataclass(frozen=True)
class ScenarioConfig:
    n_per_arm: tuple = (200, 200)
    weeks: tuple = (4.0, 8.0, 12.0, 16.0)
    mean_change: tuple = ((-0.2, -0.3, -0.4, -0.4), (-0.5, -0.8, -1.0, -1.1))
    cov: tuple = ((0.36, 0.25, 0.20, 0.18), (0.25, 0.49, 0.35, 0.30),
                  (0.20, 0.35, 0.56, 0.42), (0.18, 0.30, 0.42, 0.64))
    baseline_mean: float = 8.0
    baseline_sd: float = 0.8
    baseline_coef: float = -0.2          # slope of change on centred baseline
    effect_sd: float = 0.0               # sd of individual treatment-effect deviation
    cat1_hazard: tuple = (0.02, 0.02)    # per arm, per visit interval
    cat3_hazard: tuple = (0.01, 0.01)
    cat2_threshold: float | None = 0.6   # latent change worse than this triggers Cat2
    cat2_prob: float = 1.0               # chance a trigger leads to an ICE
    principal_ignorability: bool = True
    cat1_frailty: float = 1.0            # log-hazard per sd of effect deviation when not ignorable
    rescue_pull: float = 1.0             # off-treatment speed toward the reference profile
    rescue_effect: float = -1.0          # shift of post-Cat2 (rescue) trajectories
    cat1_drift: float = 0.0              # extra offset after Cat1 relative to reference
    retrieval: tuple = (0.2, 0.9, 0.1)   # P(post-ICE data collected) for Cat1, Cat2, Cat3
    intermittent_missing: float = 0.0
    death_fraction: float = 0.0
    smaller_is_better: bool = True
    nim: float = 0.0
    arm_labels: tuple = ()
    master_seed: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, np.ndarray)):
                object.__setattr__(self, f.name, _tup(v))
        object.__setattr__(self, "weeks", tuple(float(w) for w in self.weeks))

    @property
    def n_arms(self) -> int:
        return len(self.n_per_arm)

    @property
    def n_visits(self) -> int:
        return len(self.weeks)

    def hazard(self, which: str, arm: int) -> np.ndarray:
        h = getattr(self, which)[arm]
        return np.broadcast_to(np.asarray(h, float), (self.n_visits,))

    def validate(self) -> None:
        A, T = self.n_arms, self.n_visits
        if A < 2 or any(int(n) < 1 for n in self.n_per_arm):
            raise ConfigError("need at least two arms with n >= 1")
        if len(self.mean_change) != A or any(len(m) != T for m in self.mean_change):
            raise ConfigError("mean_change needs one T-vector per arm")
        for name in ("cat1_hazard", "cat3_hazard"):
            if len(getattr(self, name)) != A:
                raise ConfigError(f"{name} needs one entry per arm")
            for a in range(A):
                h = self.hazard(name, a)
                if np.any(h < 0) or np.any(h > 1):
                    raise ConfigError(f"{name} must lie in [0, 1]")
        S = np.asarray(self.cov, float)
        if S.shape != (T, T) or not np.allclose(S, S.T):
            raise ConfigError("cov must be a symmetric T x T matrix")
        if np.linalg.eigvalsh(S).min() <= 0:
            raise ConfigError("cov must be positive definite")
        for name in ("rescue_pull", "cat2_prob", "intermittent_missing", "death_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if len(self.retrieval) != 3 or any(not 0 <= r <= 1 for r in self.retrieval):
            raise ConfigError("retrieval needs three probabilities in [0, 1]")
        if self.baseline_sd < 0 or self.effect_sd < 0:
            raise ConfigError("standard deviations must be >= 0")
        if any(b <= a for a, b in zip(self.weeks, self.weeks[1:])):
            raise ConfigError("weeks must be strictly increasing")

    def replace(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class TruthBundle:
    """Full potential outcomes; arrays indexed (subject, arm[, visit])."""

    arm: np.ndarray
    baseline: np.ndarray
    y: np.ndarray            # completion outcomes Y_t(z)
    s: np.ndarray            # Category-1 indicators S(z)
    onset: np.ndarray        # ICE onset under each arm (-1 none)
    category: np.ndarray     # governing ICE category under each arm (0 none)
    policy: np.ndarray       # observed-world trajectories Y*_t(z)
    ids: tuple = ()

    @property
    def n(self) -> int:
        return len(self.arm)

    @property
    def n_arms(self) -> int:
        return self.y.shape[1]

    @property
    def n_visits(self) -> int:
        return self.y.shape[2]

    @classmethod
    def from_endpoint(cls, y0, y1, s1, policy0=None, policy1=None) -> "TruthBundle":
        """Two-arm bundle with a single visit, for hand-built examples."""
        y0, y1, s1 = (np.asarray(v, float) for v in (y0, y1, s1))
        n = len(y0)
        y = np.stack([y0, y1], axis=1)[:, :, None]
        p0 = y0 if policy0 is None else np.asarray(policy0, float)
        p1 = y1 if policy1 is None else np.asarray(policy1, float)
        s = np.stack([np.zeros(n), s1], axis=1).astype(int)
        return cls(arm=np.zeros(n, int), baseline=np.zeros(n), y=y, s=s,
                   onset=np.where(s == 1, 0, -1), category=np.where(s == 1, 1, 0),
                   policy=np.stack([p0, p1], axis=1)[:, :, None])

    def to_rows(self, visit: int | None = None):
        t = self.n_visits - 1 if visit is None else visit - 1
        head = ["subject_id", "assigned_arm"]
        for z in range(self.n_arms):
            head += [f"y_T_{z}", f"s_{z}", f"category_{z}", f"onset_{z}", f"policy_T_{z}"]
        rows = [head]
        for i in range(self.n):
            r = [self.ids[i] if self.ids else str(i), str(int(self.arm[i]))]
            for z in range(self.n_arms):
                r += [repr(float(self.y[i, z, t])), str(int(self.s[i, z])), str(int(self.category[i, z])),
                      str(int(self.onset[i, z])), repr(float(self.policy[i, z, t]))]
            rows.append(r)
        return rows


# ------------------------------------------------------------------ noise

def _n_draws(T: int) -> tuple[int, int]:
    # normals: baseline, effect deviation, T residuals; uniforms: 3T ICE, T intermittent, 4 misc
    return 2 + T, 4 * T + 4


def subject_noise(master_seed: int, index: int, T: int):
    """Random inputs of one subject; depends only on (master_seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(index,)))
    nn, nu = _n_draws(T)
    return rng.standard_normal(nn), rng.random(nu)


def _all_noise(master_seed: int, n: int, T: int):
    nn, nu = _n_draws(T)
    Z = np.empty((n, nn))
    U = np.empty((n, nu))
    for i in range(n):
        Z[i], U[i] = subject_noise(master_seed, i, T)
    return Z, U


# --------------------------------------------------------------- simulate

def _reasons(cat: int, u: float, death_fraction: float):
    """Reason code and review flags consistent with the category."""
    if cat == 1:
        if u < death_fraction:
            return Reason.DEATH, False, False
        v = (u - death_fraction) / max(1.0 - death_fraction, 1e-12)
        return (Reason.AE, False, False) if v < 0.8 else (Reason.SUBJECT, True, False)
    if cat == 2:
        if u < 0.6:
            return Reason.RESCUE, False, False
        return (Reason.LOE, False, False) if u < 0.85 else (Reason.INVESTIGATOR, False, True)
    if u < 0.4:
        return Reason.SUBJECT, False, False
    if u < 0.7:
        return Reason.LOST, False, False
    return (Reason.ADMIN, False, False) if u < 0.9 else (Reason.OTHER, False, False)


def simulate(config: ScenarioConfig):
    """Generate one trial: (observed Dataset, TruthBundle)."""
    config.validate()
    A, T = config.n_arms, config.n_visits
    sizes = [int(n) for n in config.n_per_arm]
    n = sum(sizes)
    arm = np.repeat(np.arange(A), sizes)
    Z, U = _all_noise(config.master_seed, n, T)

    baseline = config.baseline_mean + config.baseline_sd * Z[:, 0]
    u_eff = Z[:, 1]
    eps = Z[:, 2:] @ np.linalg.cholesky(np.asarray(config.cov, float)).T
    mu = np.asarray(config.mean_change, float)                      # (A, T)
    ramp = np.arange(1, T + 1) / T
    common = config.baseline_coef * (baseline - config.baseline_mean)[:, None] + eps
    y = mu[None, :, :] + common[:, None, :]
    y[:, 1:, :] += (config.effect_sd * u_eff[:, None] * ramp[None, :])[:, None, :]

    U1, U2, U3 = U[:, :T], U[:, T:2 * T], U[:, 2 * T:3 * T]
    U_int = U[:, 3 * T:4 * T]
    u_ret, u_reason = U[:, 4 * T], U[:, 4 * T + 1]

    sign = 1.0 if config.smaller_is_better else -1.0
    onset = np.full((n, A), -1)
    category = np.zeros((n, A), int)
    policy = y.copy()
    for z in range(A):
        h1 = np.broadcast_to(config.hazard("cat1_hazard", z), (n, T)).copy()
        if not config.principal_ignorability and config.cat1_frailty:
            f = config.cat1_frailty
            h1 = np.minimum(h1 * np.exp(f * u_eff - 0.5 * f * f)[:, None], 1.0)
        h3 = config.hazard("cat3_hazard", z)
        ev1 = U1 < h1
        ev3 = U3 < h3[None, :]
        ev2 = np.zeros((n, T), bool)
        if config.cat2_threshold is not None:
            # trigger seen at visit k (1..T-1) -> ICE after visit k
            worse = sign * (y[:, z, : T - 1] - config.cat2_threshold) > 0
            ev2[:, 1:] = worse & (U2[:, 1:] < config.cat2_prob)
        any_ev = ev1 | ev2 | ev3
        has = any_ev.any(axis=1)
        k = np.where(has, np.argmax(any_ev, axis=1), -1)
        rows = np.flatnonzero(has)
        kk = k[rows]
        cat = np.where(ev1[rows, kk], 1, np.where(ev2[rows, kk], 2, 3))
        onset[rows, z] = kk
        category[rows, z] = cat
        vis = np.arange(1, T + 1)
        since = vis[None, :] - kk[:, None]                          # visits since ICE
        after = since > 0
        pull = 1.0 - (1.0 - config.rescue_pull) ** np.maximum(since, 0)
        y_own, y_ref = y[rows, z, :], y[rows, 0, :]
        off = y_own + pull * (y_ref - y_own)
        traj = np.where((cat == 2)[:, None], y_own + config.rescue_effect,
                        off + np.where((cat == 1)[:, None], config.cat1_drift, 0.0))
        policy[rows, z, :] = np.where(after, traj, y_own)
    s = (category == 1).astype(int)

    # observed-world projection on the assigned arm
    idx = np.arange(n)
    values = policy[idx, arm, :].copy()
    on = onset[idx, arm]
    cat_a = category[idx, arm]
    vis = np.arange(1, T + 1)
    post = (on[:, None] >= 0) & (vis[None, :] > on[:, None])
    reasons: list[str | None] = [None] * n
    pae = np.zeros(n, bool)
    eff = np.zeros(n, bool)
    retrieved = np.zeros(n, bool)
    for i in np.flatnonzero(on >= 0):
        r, pa, ef = _reasons(int(cat_a[i]), float(u_reason[i]), config.death_fraction)
        reasons[i], pae[i], eff[i] = r.value, pa, ef
        retrieved[i] = r is not Reason.DEATH and u_ret[i] < config.retrieval[cat_a[i] - 1]
    values[post & ~retrieved[:, None]] = np.nan
    if config.intermittent_missing > 0:
        gap = (U_int < config.intermittent_missing) & ~post
        gap &= ~((cat_a == 2)[:, None] & (vis[None, :] == on[:, None]))  # keep the Cat2 trigger visit
        values[gap] = np.nan

    width = max(4, len(str(n)))
    ids = tuple(f"S{i + 1:0{width}d}" for i in range(n))
    ds = Dataset(
        schedule=VisitSchedule(config.weeks), ids=ids, arm=arm, baseline=baseline, values=values,
        post_ice=post, ice_onset=on, ice_reason=tuple(reasons), persistent_ae=pae,
        efficacy_deteriorated=eff, endpoint_name="change", smaller_is_better=config.smaller_is_better,
        values_are_change=True,
    )
    ds = classify_dataset(ds)
    truth = TruthBundle(arm=arm, baseline=baseline, y=y, s=s, onset=onset, category=category,
                        policy=policy, ids=ids)
    return ds, truth


# ---------------------------------------------------------------- presets

def _ar_cov(sds, rho):
    sds = np.asarray(sds, float)
    T = len(sds)
    R = rho ** np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    return _tup(np.round(np.outer(sds, sds) * R, 6))


def _profile(final, frac=(0.55, 0.85, 0.95, 1.0)):
    return tuple(round(final * f, 6) for f in frac)


def _per_visit(total, T=4):
    return round(1.0 - (1.0 - total) ** (1.0 / T), 6)


PRESETS = {
    # Three arms (placebo, 0.75 mg, 1.5 mg), 26 weeks.  Arm sizes, ICE
    # proportions and theoretic arm means follow the published tables:
    # Cat1 6.4/6.4/5.4 %, Cat2 16.3/3.6/1.4 %, Cat3 2.8/1.8/2.9 %;
    # means -0.41/-1.26/-1.51.  Rescue after Cat2 is mostly observed and
    # moves the placebo de facto mean to about -0.64.
    "award1_like": dict(
        n_per_arm=(141, 280, 279),
        weeks=(4.0, 13.0, 18.0, 26.0),
        mean_change=(_profile(-0.41), _profile(-1.26), _profile(-1.51)),
        cov=_ar_cov((0.65, 0.75, 0.8, 0.85), 0.7),
        baseline_mean=8.1, baseline_sd=0.9, baseline_coef=-0.25,
        cat1_hazard=(0.01717, 0.01693, 0.01321),
        cat3_hazard=(0.00874, 0.00476, 0.00736),
        cat2_threshold=0.64, cat2_prob=0.8,
        rescue_pull=1.0, rescue_effect=-1.5,
        retrieval=(0.2, 0.9, 0.1),
        arm_labels=("Placebo", "Dulaglutide 0.75 mg", "Dulaglutide 1.5 mg"),
    ),
    # Two arms (glargine, peglispro), 52 weeks, non-inferiority margin 0.4.
    # Cat1 5.3/10.6 %, Cat2 1.8/2.3 %, Cat3 10.9/10.4 %; means -0.24/-0.46.
    "imagine3_like": dict(
        n_per_arm=(449, 663),
        weeks=(12.0, 26.0, 39.0, 52.0),
        mean_change=(_profile(-0.24), _profile(-0.46)),
        cov=_ar_cov((0.7, 0.75, 0.8, 0.82), 0.7),
        baseline_mean=7.9, baseline_sd=0.9, baseline_coef=-0.3,
        cat1_hazard=(0.01429, 0.02926),
        cat3_hazard=(0.02987, 0.02979),
        cat2_threshold=1.672, cat2_prob=0.7,
        rescue_pull=1.0, rescue_effect=-0.3,
        retrieval=(0.3, 0.3, 0.3),
        nim=0.4,
        arm_labels=("Insulin Glargine", "Insulin Peglispro"),
    ),
    # Two arms, 400 per arm, J2R correctly specified: off-treatment paths
    # jump to the reference profile, rescued data always observed,
    # Category 1 independent of outcomes.
    "j2r_correct": dict(
        n_per_arm=(400, 400),
        weeks=(4.0, 8.0, 12.0, 16.0),
        mean_change=(_profile(-0.3), _profile(-1.0)),
        cov=_ar_cov((0.6, 0.7, 0.75, 0.8), 0.7),
        cat1_hazard=(0.025, 0.025),
        cat3_hazard=(0.015, 0.015),
        cat2_threshold=0.8, cat2_prob=0.8,
        rescue_pull=1.0, rescue_effect=-1.0,
        retrieval=(0.3, 1.0, 0.3),
    ),
    # Identical arms: every estimand is 0 when delta = 0.
    "null": dict(
        n_per_arm=(200, 200),
        mean_change=(_profile(-0.5), _profile(-0.5)),
        cov=_ar_cov((0.6, 0.7, 0.75, 0.8), 0.7),
        cat1_hazard=(0.02, 0.02), cat3_hazard=(0.015, 0.015),
        cat2_threshold=0.8, rescue_effect=0.0, retrieval=(0.0, 0.0, 0.0),
    ),
    # Missing data only through MAR (Cat2 trigger) and MCAR (Cat3) dropout.
    "mar_only": dict(
        n_per_arm=(300, 300),
        mean_change=(_profile(-0.3), _profile(-0.9)),
        cov=_ar_cov((0.6, 0.7, 0.75, 0.8), 0.7),
        cat1_hazard=(0.0, 0.0), cat3_hazard=(0.02, 0.02),
        cat2_threshold=0.6, retrieval=(0.0, 0.0, 0.0),
    ),
}


def calibrate_preset(name: str, **overrides) -> ScenarioConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = ScenarioConfig(**{**PRESETS[name], **overrides})
    cfg.validate()
    return cfg


def population_hybrid(config: ScenarioConfig, delta: float, arm: int = 1, n_mc: int = 200_000,
                      seed: int = 12345) -> float:
    """Large-sample value of the hybrid estimand for a scenario (Monte Carlo)."""
    big = config.replace(n_per_arm=tuple([n_mc // config.n_arms] * config.n_arms), master_seed=seed,
                         intermittent_missing=0.0)
    _, truth = simulate(big)
    t = truth.n_visits - 1
    d = truth.y[:, arm, t] - truth.y[:, 0, t]
    s = truth.s[:, arm]
    return float(np.mean(d * (1 - s) + delta * s))
