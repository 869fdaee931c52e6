"""Cross-fitted DML estimators for (differences of) balanced group average
treatment effects.

The balanced estimators use nested two-level cross-fitting: outcome and
treatment-propensity models are fit on the complement of each outer fold and
turned into a doubly robust pseudo-outcome on the held-out fold; within each
outer fold, inner folds cross-fit the regression of the pseudo-outcome on
(moderator, balancing variables) and the moderator propensity, and the
orthogonal score is evaluated on the inner held-out fold. Point estimates
are fold-size-weighted means of fold score means, which equals the grand
mean of the per-unit scores; variances come from the centered scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Union

import numpy as np

from .data import (
    DataError,
    Dataset,
    EffectEstimate,
    EffectKind,
    EffectTarget,
    EstimationError,
    FoldPlan,
    make_fold_plan,
    make_single_level_folds,
)
from .learners import ForestConfig, TuningGrid, fit_probability_forest, fit_regression_forest, tune_forest
from .scores import (
    NuisanceFits,
    cbgate_score,
    normalize_truncate_weights,
    pseudo_outcome,
    raw_weights,
    second_stage_score,
    single_group_score,
)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _default_outcome_cfgs() -> dict[int, ForestConfig]:
    # deeper forest for the (typically more heterogeneous) treated response
    return {1: ForestConfig(max_depth=20, min_leaf=5),
            0: ForestConfig(max_depth=3, min_leaf=5)}


@dataclass(frozen=True)
class DmlConfig:
    """Estimator configuration: fold counts and per-nuisance forests.

    ``outcome`` maps treatment level to the forest used for that level's
    outcome regression (a bare ForestConfig applies to every level);
    ``effect_curve`` is the second-stage regression of the pseudo-outcome on
    (moderator, balancing variables); ``group_prob`` the moderator
    propensity on the balancing variables.
    """

    k: int = 2
    j: int = 2
    outcome: Union[ForestConfig, Mapping[int, ForestConfig]] = field(
        default_factory=_default_outcome_cfgs)
    treat_prob: ForestConfig = ForestConfig(max_depth=5, min_leaf=10)
    effect_curve: Union[ForestConfig, Mapping[int, ForestConfig]] = ForestConfig(
        max_depth=2, min_leaf=10)
    group_prob: ForestConfig = ForestConfig(max_depth=2, min_leaf=50)
    # fit the pseudo-outcome regression separately per moderator level on the
    # level's own subsample (features: balancing variables only); the joint
    # alternative regresses on (moderator, balancing variables) in one forest
    second_stage_per_level: bool = True
    # worker threads for tree fitting; predictions are identical for any value
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.k < 2 or self.j < 2:
            raise DataError("fold counts must be at least 2")

    def outcome_cfg(self, level: int) -> ForestConfig:
        if isinstance(self.outcome, ForestConfig):
            return self.outcome
        return self.outcome.get(level, ForestConfig())

    def effect_curve_cfg(self, level: int) -> ForestConfig:
        if isinstance(self.effect_curve, ForestConfig):
            return self.effect_curve
        return self.effect_curve.get(level, ForestConfig(max_depth=2, min_leaf=10))

    def with_trees(self, n_trees: int) -> "DmlConfig":
        """Copy with every forest resized (convenience for runtime budgets)."""
        def resize(cfg):
            if isinstance(cfg, ForestConfig):
                return replace(cfg, n_trees=n_trees)
            return {lev: replace(c, n_trees=n_trees) for lev, c in cfg.items()}

        return replace(
            self,
            outcome=resize(self.outcome),
            treat_prob=replace(self.treat_prob, n_trees=n_trees),
            effect_curve=resize(self.effect_curve),
            group_prob=replace(self.group_prob, n_trees=n_trees),
        )


@dataclass(frozen=True)
class OracleNuisances:
    """True nuisance functions for simulation settings.

    When passed to an estimator the forest fits are skipped entirely. With
    ``raw_ratio`` (default) the indicator/propensity ratios are used
    unnormalized, which keeps oracle runs exactly unbiased.
    """

    outcome_mean: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    treat_prob: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    group_prob: Optional[Callable[[int, np.ndarray], np.ndarray]] = None
    effect_mean: Optional[Callable[[int, np.ndarray], np.ndarray]] = None
    cell_prob: Optional[Callable[[int, int, np.ndarray], np.ndarray]] = None
    raw_ratio: bool = True


def _weights(labels, level, probs, oracle: Optional[OracleNuisances]) -> np.ndarray:
    if oracle is not None and oracle.raw_ratio:
        return raw_weights(labels, level, probs)
    return normalize_truncate_weights(labels, level, probs).values


def _shrink_leaf(cfg: ForestConfig, rows: int) -> ForestConfig:
    # group/cell subsets can undercut a tuned leaf size; clamp instead of failing
    cap = max(1, rows // 2)
    if cfg.min_leaf > cap:
        return replace(cfg, min_leaf=cap)
    return cfg


def _fit_reg(features, targets, cfg, where: str, n_jobs: int = 1):
    try:
        return fit_regression_forest(features, targets, _shrink_leaf(cfg, len(targets)),
                                     n_jobs=n_jobs)
    except DataError as exc:
        raise EstimationError(f"{where}: {exc}", n_jobs=cfg.threads) from exc


def _fit_prob(features, labels, cfg, n_levels, where: str, n_jobs: int = 1):
    try:
        return fit_probability_forest(features, labels, _shrink_leaf(cfg, len(labels)),
                                      n_levels, n_jobs=n_jobs)
    except DataError as exc:
        raise EstimationError(f"{where}: {exc}", n_jobs=cfg.threads) from exc


def _seed_stream(seed: int):
    rng = np.random.default_rng(seed)
    while True:
        yield int(rng.integers(2**31))


# ---------------------------------------------------------------------------
# Nested two-level engine (pseudo-outcome + second stage)
# ---------------------------------------------------------------------------

def _first_stage_delta(data: Dataset, l: int, m: int, cfg: DmlConfig,
                       plan: FoldPlan, oracle: Optional[OracleNuisances],
                       seeds) -> np.ndarray:
    """Cross-fitted doubly robust pseudo-outcome for the contrast (l, m)."""
    zx = np.column_stack([data.z, data.x])
    delta = np.empty(data.n)
    for kf in range(plan.k):
        ev = plan.outer_mask(kf)
        tr = ~ev
        mu = {}
        pi = {}
        if oracle is not None:
            for lev in (l, m):
                mu[lev] = oracle.outcome_mean(lev, data.z[ev], data.x[ev])
                pi[lev] = oracle.treat_prob(lev, data.z[ev], data.x[ev])
        else:
            for lev in (l, m):
                sub = tr & (data.d == lev)
                if not np.any(sub):
                    raise EstimationError(
                        f"no training unit with treatment level {lev} in outer fold {kf}")
                forest = _fit_reg(
                    zx[sub], data.y[sub],
                    replace(cfg.outcome_cfg(lev), seed=next(seeds)),
                    f"outcome regression (level {lev}, outer fold {kf})", n_jobs=cfg.threads)
                mu[lev] = forest.predict(zx[ev])
            prob = _fit_prob(
                zx[tr], data.d[tr], replace(cfg.treat_prob, seed=next(seeds)),
                data.n_treat_levels, f"treatment propensity (outer fold {kf})", n_jobs=cfg.threads)
            probs_ev = prob.predict(zx[ev])
            pi = {lev: probs_ev[:, lev] for lev in (l, m)}
        try:
            w_l = _weights(data.d[ev], l, pi[l], oracle)
            w_m = _weights(data.d[ev], m, pi[m], oracle)
        except DataError as exc:
            raise EstimationError(f"outer fold {kf}: {exc}") from exc
        delta[ev] = pseudo_outcome(data.y[ev], mu[l], mu[m], w_l, w_m)
    return delta


def _second_stage(data: Dataset, delta: np.ndarray, cfg: DmlConfig,
                  plan: FoldPlan, oracle: Optional[OracleNuisances], seeds,
                  groups: tuple[int, ...]):
    """Cross-fit the pseudo-outcome regression and moderator propensity.

    Returns per-unit predictions ``g[grp]`` and normalized weights
    ``wz[grp]`` for each requested moderator level, all evaluated on the
    unit's own inner held-out fold.
    """
    w_mat = data.w
    zw = np.column_stack([data.z, w_mat])
    g = {grp: np.empty(data.n) for grp in groups}
    wz = {grp: np.empty(data.n) for grp in groups}
    for kf in range(plan.k):
        for jf in range(plan.j):
            iev = plan.inner_mask(kf, jf)
            itr = plan.outer_mask(kf) & ~iev
            for grp in groups:
                if not np.any(data.z[iev] == grp):
                    raise EstimationError(
                        f"moderator level {grp} absent in inner fold (k={kf}, j={jf})")
                if not np.any(data.z[itr] == grp):
                    raise EstimationError(
                        f"moderator level {grp} absent in inner training fold (k={kf}, j={jf})")
            if oracle is not None:
                g_pred = {grp: oracle.effect_mean(grp, w_mat[iev]) for grp in groups}
                lam = {grp: oracle.group_prob(grp, w_mat[iev]) for grp in groups}
            elif cfg.second_stage_per_level:
                g_pred = {}
                for grp in groups:
                    sub = itr & (data.z == grp)
                    forest = _fit_reg(
                        w_mat[sub], delta[sub],
                        replace(cfg.effect_curve_cfg(grp), seed=next(seeds)),
                        f"pseudo-outcome regression (level {grp}, k={kf}, j={jf})", n_jobs=cfg.threads)
                    g_pred[grp] = forest.predict(w_mat[iev])
                prob = _fit_prob(
                    w_mat[itr], data.z[itr], replace(cfg.group_prob, seed=next(seeds)),
                    data.n_mod_levels, f"moderator propensity (k={kf}, j={jf})", n_jobs=cfg.threads)
                lam_mat = prob.predict(w_mat[iev])
                lam = {grp: lam_mat[:, grp] for grp in groups}
            else:
                forest = _fit_reg(
                    zw[itr], delta[itr],
                    replace(cfg.effect_curve_cfg(groups[0]), seed=next(seeds)),
                    f"pseudo-outcome regression (k={kf}, j={jf})", n_jobs=cfg.threads)
                g_pred = {}
                for grp in groups:
                    at_grp = np.column_stack(
                        [np.full(int(iev.sum()), grp, dtype=float), w_mat[iev]])
                    g_pred[grp] = forest.predict(at_grp)
                prob = _fit_prob(
                    w_mat[itr], data.z[itr], replace(cfg.group_prob, seed=next(seeds)),
                    data.n_mod_levels, f"moderator propensity (k={kf}, j={jf})", n_jobs=cfg.threads)
                lam_mat = prob.predict(w_mat[iev])
                lam = {grp: lam_mat[:, grp] for grp in groups}
            for grp in groups:
                g[grp][iev] = g_pred[grp]
                try:
                    wz[grp][iev] = _weights(data.z[iev], grp, lam[grp], oracle)
                except DataError as exc:
                    raise EstimationError(f"inner fold (k={kf}, j={jf}): {exc}") from exc
    return g, wz


def _nested_engine(data: Dataset, target: EffectTarget, cfg: DmlConfig,
                   plan: Optional[FoldPlan], oracle: Optional[OracleNuisances],
                   groups: tuple[int, ...]):
    target.validate_against(data)
    l, m = target.treat_contrast
    plan = plan or make_fold_plan(data.n, cfg.k, cfg.j, cfg.seed)
    seeds = _seed_stream(cfg.seed)
    delta = _first_stage_delta(data, l, m, cfg, plan, oracle, seeds)
    g, wz = _second_stage(data, delta, cfg, plan, oracle, seeds, groups)
    return delta, g, wz


def estimate_delta_bgate(data: Dataset, target: EffectTarget, cfg: DmlConfig,
                         plan: Optional[FoldPlan] = None,
                         oracle: Optional[OracleNuisances] = None) -> EffectEstimate:
    """Balanced difference of group average effects (group u minus group v)."""
    if target.kind is not EffectKind.DELTA_BGATE:
        raise DataError("target kind must be DELTA_BGATE")
    u, v = target.group_contrast
    delta, g, wz = _nested_engine(data, target, cfg, plan, oracle, (u, v))
    phi = second_stage_score(delta, g[u], g[v], wz[u], wz[v])
    coef = float(phi.mean())
    return EffectEstimate.from_scores(target, coef, phi - coef)


def estimate_bgate(data: Dataset, target: EffectTarget, cfg: DmlConfig,
                   plan: Optional[FoldPlan] = None,
                   oracle: Optional[OracleNuisances] = None) -> EffectEstimate:
    """Balanced group average effect for a single moderator level."""
    if target.kind is not EffectKind.BGATE:
        raise DataError("target kind must be BGATE")
    grp = target.group
    delta, g, wz = _nested_engine(data, target, cfg, plan, oracle, (grp,))
    phi = single_group_score(delta, g[grp], wz[grp])
    coef = float(phi.mean())
    return EffectEstimate.from_scores(target, coef, phi - coef)


# ---------------------------------------------------------------------------
# Group-wise AIPW (ATE / GATE / delta GATE)
# ---------------------------------------------------------------------------

def _aipw_scores(data: Dataset, l: int, m: int, k: int, seed: int,
                 cfg: DmlConfig, oracle: Optional[OracleNuisances]) -> np.ndarray:
    """Per-unit cross-fitted AIPW score for the contrast (l, m)."""
    if data.n < 2 * k:
        raise EstimationError(f"sample of {data.n} too small for {k}-fold cross-fitting")
    fold_of = make_single_level_folds(data.n, k, seed)
    seeds = _seed_stream(seed)
    zx = np.column_stack([data.z, data.x])
    phi = np.empty(data.n)
    for kf in range(k):
        ev = fold_of == kf
        tr = ~ev
        mu = {}
        pi = {}
        if oracle is not None:
            for lev in (l, m):
                mu[lev] = oracle.outcome_mean(lev, data.z[ev], data.x[ev])
                pi[lev] = oracle.treat_prob(lev, data.z[ev], data.x[ev])
        else:
            for lev in (l, m):
                sub = tr & (data.d == lev)
                if not np.any(sub):
                    raise EstimationError(
                        f"no training unit with treatment level {lev} in fold {kf}")
                forest = _fit_reg(
                    zx[sub], data.y[sub],
                    replace(cfg.outcome_cfg(lev), seed=next(seeds)),
                    f"outcome regression (level {lev}, fold {kf})", n_jobs=cfg.threads)
                mu[lev] = forest.predict(zx[ev])
            prob = _fit_prob(
                zx[tr], data.d[tr], replace(cfg.treat_prob, seed=next(seeds)),
                data.n_treat_levels, f"treatment propensity (fold {kf})", n_jobs=cfg.threads)
            probs_ev = prob.predict(zx[ev])
            pi = {lev: probs_ev[:, lev] for lev in (l, m)}
        try:
            w_l = _weights(data.d[ev], l, pi[l], oracle)
            w_m = _weights(data.d[ev], m, pi[m], oracle)
        except DataError as exc:
            raise EstimationError(f"fold {kf}: {exc}") from exc
        phi[ev] = pseudo_outcome(data.y[ev], mu[l], mu[m], w_l, w_m)
    return phi


def estimate_ate(data: Dataset, target: EffectTarget, cfg: DmlConfig,
                 oracle: Optional[OracleNuisances] = None) -> EffectEstimate:
    """Average treatment effect by cross-fitted AIPW."""
    if target.kind is not EffectKind.ATE:
        raise DataError("target kind must be ATE")
    target.validate_against(data)
    l, m = target.treat_contrast
    phi = _aipw_scores(data, l, m, cfg.k, cfg.seed, cfg, oracle)
    coef = float(phi.mean())
    return EffectEstimate.from_scores(target, coef, phi - coef)


def estimate_gate(data: Dataset, target: EffectTarget, cfg: DmlConfig,
                  oracle: Optional[OracleNuisances] = None) -> EffectEstimate:
    """Group average treatment effect: AIPW within the moderator group."""
    if target.kind is not EffectKind.GATE:
        raise DataError("target kind must be GATE")
    target.validate_against(data)
    l, m = target.treat_contrast
    sub = data.subset(data.z == target.group)
    if sub.n == 0:
        raise EstimationError(f"moderator group {target.group} is empty")
    phi = _aipw_scores(sub, l, m, cfg.k, cfg.seed, cfg, oracle)
    coef = float(phi.mean())
    return EffectEstimate.from_scores(target, coef, phi - coef)


def estimate_delta_gate(data: Dataset, target: EffectTarget, cfg: DmlConfig,
                        oracle: Optional[OracleNuisances] = None) -> EffectEstimate:
    """Difference of group average effects, estimated group by group.

    The effect is estimated by separate cross-fitted AIPW within each
    moderator group; the variance is the sum of the group variances. The
    stored score vector stacks the group influence contributions so that
    ``se**2 == mean(scores**2)/n`` reproduces that sum.
    """
    if target.kind is not EffectKind.DELTA_GATE:
        raise DataError("target kind must be DELTA_GATE")
    target.validate_against(data)
    l, m = target.treat_contrast
    u, v = target.group_contrast
    used = (data.z == u) | (data.z == v)
    coef = 0.0
    n_used = int(used.sum())
    psi = np.empty(n_used)
    z_used = data.z[used]
    for grp, sign in ((u, 1.0), (v, -1.0)):
        sub = data.subset(data.z == grp)
        if sub.n == 0:
            raise EstimationError(f"moderator group {grp} is empty")
        phi = _aipw_scores(sub, l, m, cfg.k, cfg.seed + grp, cfg, oracle)
        theta = float(phi.mean())
        coef += sign * theta
        psi[z_used == grp] = sign * (n_used / sub.n) * (phi - theta)
    target_est = EffectEstimate.from_scores(target, coef, psi)
    return target_est


# ---------------------------------------------------------------------------
# Interaction contrast with unconfounded moderator (delta CBGATE)
# ---------------------------------------------------------------------------

def estimate_delta_cbgate(data: Dataset, target: EffectTarget, cfg: DmlConfig,
                          version: str = "joint",
                          oracle: Optional[OracleNuisances] = None) -> EffectEstimate:
    """Fully balanced interaction contrast (group u minus group v).

    Uses single-level K-fold cross-fitting with per-(treatment, moderator)
    cell outcome regressions. ``version="joint"`` fits the joint cell
    probability P(D=d, Z=z | X) with one multi-class forest;
    ``version="product"`` fits P(D=d | X, Z) and P(Z=z | X) separately and
    multiplies.
    """
    if target.kind is not EffectKind.DELTA_CBGATE:
        raise DataError("target kind must be DELTA_CBGATE")
    if version not in ("joint", "product"):
        raise DataError(f"unknown propensity version {version!r}")
    target.validate_against(data)
    l, m = target.treat_contrast
    u, v = target.group_contrast
    # the four-cell score evaluates its "v" group with positive sign; map the
    # requested (u, v) so the estimate is group-u contrast minus group-v contrast
    cells = [(dd, zz) for dd in (l, m) for zz in (u, v)]
    n_cells = data.n_treat_levels * data.n_mod_levels

    def cell_code(dd: np.ndarray, zz: np.ndarray) -> np.ndarray:
        return np.asarray(dd) * data.n_mod_levels + np.asarray(zz)

    if data.n < 2 * cfg.k:
        raise EstimationError("sample too small for cross-fitting")
    fold_of = make_single_level_folds(data.n, cfg.k, cfg.seed)
    seeds = _seed_stream(cfg.seed)
    phi = np.empty(data.n)
    for kf in range(cfg.k):
        ev = fold_of == kf
        tr = ~ev
        n_ev = int(ev.sum())
        mu = {}
        omega = {}
        if oracle is not None:
            for dd, zz in cells:
                mu[(dd, zz)] = oracle.outcome_mean(
                    dd, np.full(n_ev, zz), data.x[ev])
                omega[(dd, zz)] = oracle.cell_prob(dd, zz, data.x[ev])
        else:
            for dd, zz in cells:
                sub = tr & (data.d == dd) & (data.z == zz)
                if not np.any(sub):
                    raise EstimationError(
                        f"cell (d={dd}, z={zz}) empty in training fold {kf}")
                forest = _fit_reg(
                    data.x[sub], data.y[sub],
                    replace(cfg.outcome_cfg(dd), seed=next(seeds)),
                    f"cell outcome regression (d={dd}, z={zz}, fold {kf})", n_jobs=cfg.threads)
                mu[(dd, zz)] = forest.predict(data.x[ev])
            if version == "joint":
                labels = cell_code(data.d[tr], data.z[tr])
                prob = _fit_prob(
                    data.x[tr], labels, replace(cfg.treat_prob, seed=next(seeds)),
                    n_cells, f"joint cell propensity (fold {kf})", n_jobs=cfg.threads)
                proba = prob.predict(data.x[ev])
                for dd, zz in cells:
                    omega[(dd, zz)] = proba[:, int(cell_code(dd, zz))]
            else:
                zx = np.column_stack([data.z, data.x])
                pi_f = _fit_prob(
                    zx[tr], data.d[tr], replace(cfg.treat_prob, seed=next(seeds)),
                    data.n_treat_levels, f"treatment propensity (fold {kf})", n_jobs=cfg.threads)
                lam_f = _fit_prob(
                    data.x[tr], data.z[tr], replace(cfg.group_prob, seed=next(seeds)),
                    data.n_mod_levels, f"moderator propensity (fold {kf})", n_jobs=cfg.threads)
                lam_ev = lam_f.predict(data.x[ev])
                for dd, zz in cells:
                    at_z = np.column_stack([np.full(n_ev, zz, dtype=float), data.x[ev]])
                    omega[(dd, zz)] = pi_f.predict(at_z)[:, dd] * lam_ev[:, zz]
        w = {}
        code_ev = cell_code(data.d[ev], data.z[ev])
        for dd, zz in cells:
            try:
                w[(dd, zz)] = _weights(code_ev, int(cell_code(dd, zz)),
                                       omega[(dd, zz)], oracle)
            except DataError as exc:
                raise EstimationError(
                    f"cell (d={dd}, z={zz}) empty in evaluation fold {kf}") from exc
        phi[ev] = cbgate_score(data.y[ev], mu, w, l, m, u=v, v=u)
    coef = float(phi.mean())
    return EffectEstimate.from_scores(target, coef, phi - coef)


# ---------------------------------------------------------------------------
# Decomposition of the group-effect difference
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Decomposition:
    """Split of a group-effect difference into direct and compositional parts.

    ``delta_gate == delta_bgate + comp1 - comp2`` holds exactly because all
    four quantities are plug-in functionals of the same cross-fitted
    effect-curve surfaces.
    """

    delta_gate: float
    delta_bgate: float
    comp1: float
    comp2: float

    @property
    def residual(self) -> float:
        return self.delta_gate - (self.delta_bgate + self.comp1 - self.comp2)


def decompose_delta_gate(data: Dataset, target: EffectTarget, cfg: DmlConfig,
                         plan: Optional[FoldPlan] = None,
                         oracle: Optional[OracleNuisances] = None) -> Decomposition:
    """Decompose the group-effect difference on shared plug-in surfaces.

    Group shares are sample shares within the two contrasted groups; the
    outer balancing expectation runs over the pooled two-group sample.
    """
    if target.kind not in (EffectKind.DELTA_GATE, EffectKind.DELTA_BGATE):
        raise DataError("decomposition target must be a delta effect")
    work = EffectTarget(kind=EffectKind.DELTA_BGATE,
                        treat_contrast=target.treat_contrast,
                        group_contrast=target.group_contrast)
    u, v = target.group_contrast
    delta, g, _wz = _nested_engine(data, work, cfg, plan, oracle, (u, v))
    used = (data.z == u) | (data.z == v)
    g_u = g[u][used]
    g_v = g[v][used]
    in_u = data.z[used] == u
    p_u = float(in_u.mean())
    p_v = 1.0 - p_u
    delta_bgate = float(np.mean(g_u - g_v))
    delta_gate = float(np.mean(g_u[in_u]) - np.mean(g_v[~in_u]))
    comp1 = (p_v / p_u) * float(np.mean(g_u) - np.mean(g_u[~in_u]))
    comp2 = (p_u / p_v) * float(np.mean(g_v) - np.mean(g_v[in_u]))
    return Decomposition(delta_gate=delta_gate, delta_bgate=delta_bgate,
                         comp1=comp1, comp2=comp2)


# ---------------------------------------------------------------------------
# Cross-fitted nuisance surfaces for diagnostics
# ---------------------------------------------------------------------------

def cross_fitted_nuisances(data: Dataset, target: EffectTarget, cfg: DmlConfig,
                           plan: Optional[FoldPlan] = None) -> NuisanceFits:
    """Fit and evaluate every nuisance out-of-fold, one column per level.

    Intended for diagnostics (e.g. feeding the propensity columns to
    check_overlap) rather than estimation; the estimators refit internally.
    """
    target.validate_against(data)
    plan = plan or make_fold_plan(data.n, cfg.k, cfg.j, cfg.seed)
    seeds = _seed_stream(cfg.seed)
    zx = np.column_stack([data.z, data.x])
    w_mat = data.w
    n_d, n_z = data.n_treat_levels, data.n_mod_levels
    outcome_means = np.empty((data.n, n_d))
    treat_probs = np.empty((data.n, n_d))
    group_probs = np.empty((data.n, n_z))
    effect_means = np.empty((data.n, n_z))

    l, m = target.treat_contrast
    for kf in range(plan.k):
        ev = plan.outer_mask(kf)
        tr = ~ev
        for lev in range(n_d):
            sub = tr & (data.d == lev)
            if not np.any(sub):
                raise EstimationError(
                    f"no training unit with treatment level {lev} in outer fold {kf}")
            forest = _fit_reg(zx[sub], data.y[sub],
                              replace(cfg.outcome_cfg(lev), seed=next(seeds)),
                              f"outcome regression (level {lev}, outer fold {kf})", n_jobs=cfg.threads)
            outcome_means[ev, lev] = forest.predict(zx[ev])
        prob = _fit_prob(zx[tr], data.d[tr], replace(cfg.treat_prob, seed=next(seeds)),
                         n_d, f"treatment propensity (outer fold {kf})", n_jobs=cfg.threads)
        treat_probs[ev] = prob.predict(zx[ev])

    delta = _first_stage_delta(data, l, m, cfg, plan, None, _seed_stream(cfg.seed))
    zw = np.column_stack([data.z, w_mat])
    for kf in range(plan.k):
        for jf in range(plan.j):
            iev = plan.inner_mask(kf, jf)
            itr = plan.outer_mask(kf) & ~iev
            if cfg.second_stage_per_level:
                for grp in range(n_z):
                    sub = itr & (data.z == grp)
                    if not np.any(sub):
                        raise EstimationError(
                            f"moderator level {grp} absent in inner training fold "
                            f"(k={kf}, j={jf})")
                    forest = _fit_reg(w_mat[sub], delta[sub],
                                      replace(cfg.effect_curve_cfg(grp), seed=next(seeds)),
                                      f"pseudo-outcome regression (level {grp})", n_jobs=cfg.threads)
                    effect_means[iev, grp] = forest.predict(w_mat[iev])
            else:
                forest = _fit_reg(zw[itr], delta[itr],
                                  replace(cfg.effect_curve_cfg(0), seed=next(seeds)),
                                  "pseudo-outcome regression", n_jobs=cfg.threads)
                for grp in range(n_z):
                    at_grp = np.column_stack(
                        [np.full(int(iev.sum()), grp, dtype=float), w_mat[iev]])
                    effect_means[iev, grp] = forest.predict(at_grp)
            prob = _fit_prob(w_mat[itr], data.z[itr],
                             replace(cfg.group_prob, seed=next(seeds)), n_z,
                             f"moderator propensity (k={kf}, j={jf})", n_jobs=cfg.threads)
            group_probs[iev] = prob.predict(w_mat[iev])
    return NuisanceFits(outcome_means=outcome_means, treat_probs=treat_probs,
                        group_probs=group_probs, effect_means=effect_means)


# ---------------------------------------------------------------------------
# Nuisance tuning on a dataset
# ---------------------------------------------------------------------------

def tune_nuisance(data: Dataset, role: str, grid: TuningGrid, seed: int,
                  n_trees: int = 1000,
                  treat_contrast: tuple[int, int] = (1, 0)) -> ForestConfig:
    """Grid-tune one nuisance forest on a dataset.

    Roles: ``mu:<level>`` outcome regression at a treatment level; ``pi``
    treatment propensity; ``g`` pseudo-outcome regression on (moderator,
    balancing variables); ``lambda`` moderator propensity on the balancing
    variables. The ``g`` role first builds a cross-fitted pseudo-outcome
    with the default first-stage forests.
    """
    zx = np.column_stack([data.z, data.x])
    if role.startswith("mu:"):
        level = int(role.split(":", 1)[1])
        mask = data.d == level
        if not np.any(mask):
            raise DataError(f"no unit at treatment level {level}")
        return tune_forest(zx[mask], data.y[mask], "regression", grid, seed, n_trees)
    if role == "pi":
        return tune_forest(zx, data.d, "probability", grid, seed, n_trees)
    if role == "lambda":
        if not data.w_cols:
            raise DataError("no balancing columns designated; cannot tune lambda")
        return tune_forest(data.w, data.z, "probability", grid, seed, n_trees)
    if role == "g":
        if not data.w_cols:
            raise DataError("no balancing columns designated; cannot tune g")
        l, m = treat_contrast
        cfg = DmlConfig(seed=seed)
        plan = make_fold_plan(data.n, cfg.k, cfg.j, seed)
        delta = _first_stage_delta(data, l, m, cfg, plan, None, _seed_stream(seed))
        zw = np.column_stack([data.z, data.w])
        return tune_forest(zw, delta, "regression", grid, seed, n_trees)
    raise DataError(f"unknown tuning role {role!r}")
