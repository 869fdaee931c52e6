"""Monte Carlo laboratory: data-generating process, ground truths,
replication runner and performance measures.

The shipped DGP draws ten covariates (two uniform, eight normal, all with
mean 0.5 and standard deviation sqrt(1/12)), a moderator whose probability
is a beta-CDF transform of the product of the first two covariates, a
treatment whose probability is a beta-CDF transform of a covariate/
moderator average, and outcomes from highly non-linear response surfaces
with unit normal noise. Latent truths (response surfaces, propensities,
both potential outcomes) ride along with every sample so oracle tests and
truth computations need no re-derivation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.special import betainc

from .data import DataError, Dataset, EffectKind, EffectTarget, EstimationError
from .dml import DmlConfig, OracleNuisances, estimate_ate, estimate_bgate, estimate_delta_bgate, \
    estimate_delta_cbgate, estimate_delta_gate, estimate_gate
from .learners import ForestConfig
from .reweight import estimate_delta_bgate_reweighted
from .riesz import RieszNetConfig, estimate_auto_dml_delta_bgate, stage1_config, stage2_config

COVERAGE_Z = 1.96


def beta_cdf_2_4(x: np.ndarray) -> np.ndarray:
    """Regularized incomplete beta with shape (2, 4) on [0, 1]."""
    return betainc(2.0, 4.0, np.clip(x, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Data-generating process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DgpSample:
    """A generated sample plus its latent truths.

    ``mu_treat_by_z`` has one column per moderator level; ``tau_by_z``
    stacks the conditional effect surfaces the same way. SUTVA holds by
    construction: ``data.y`` equals the potential outcome selected by the
    realized treatment.
    """

    data: Dataset
    mu_control: np.ndarray
    mu_treat_by_z: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    p_mod: np.ndarray
    p_treat: np.ndarray
    tau_by_z: np.ndarray


class PaperDgp:
    """The shipped simulation design (binary treatment, binary moderator)."""

    n_covariates = 10

    def response_control(self, x: np.ndarray) -> np.ndarray:
        return (np.sin(np.pi * x[:, 0] * x[:, 1]) + (x[:, 2] - 0.5) ** 2
                + 0.1 * x[:, 3] + 0.3 * x[:, 5])

    def effect(self, x: np.ndarray, z: int) -> np.ndarray:
        if z == 1:
            return (np.sin(4.9 * x[:, 0]) + np.sin(2.0 * x[:, 1])
                    + 0.7 * x[:, 2] ** 4 + 0.4 * x[:, 5] + 0.2)
        return (np.sin(1.4 * x[:, 0]) + np.sin(6.0 * x[:, 1])
                + 0.6 * x[:, 2] ** 2 + 0.3 * x[:, 5])

    def moderator_prob(self, x: np.ndarray) -> np.ndarray:
        return 0.1 + 0.8 * beta_cdf_2_4(x[:, 0] * x[:, 1])

    def treatment_prob(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        avg = (x[:, 0] + x[:, 1] + x[:, 2] + x[:, 5] + z) / 5.0
        return 0.2 + 0.6 * beta_cdf_2_4(avg)

    def generate(self, n: int, seed: int, balance_cols: tuple[int, ...] = ()) -> DgpSample:
        if n < 1:
            raise DataError("need n >= 1")
        rng = np.random.default_rng(seed)
        p = self.n_covariates
        x = np.empty((n, p))
        x[:, 0] = rng.uniform(0.0, 1.0, n)
        x[:, 1] = rng.uniform(0.0, 1.0, n)
        x[:, 2:] = rng.normal(0.5, math.sqrt(1.0 / 12.0), size=(n, p - 2))
        p_mod = self.moderator_prob(x)
        z = (rng.uniform(size=n) < p_mod).astype(int)
        p_treat = self.treatment_prob(x, z)
        d = (rng.uniform(size=n) < p_treat).astype(int)
        mu0 = self.response_control(x)
        tau = np.column_stack([self.effect(x, 0), self.effect(x, 1)])
        mu1 = mu0[:, None] + tau
        y0 = mu0 + rng.normal(size=n)
        y1 = mu1[np.arange(n), z] + rng.normal(size=n)
        y = np.where(d == 1, y1, y0)
        data = Dataset(y=y, d=d, z=z, x=x, w_cols=tuple(balance_cols))
        return DgpSample(data=data, mu_control=mu0, mu_treat_by_z=mu1,
                         y0=y0, y1=y1, p_mod=p_mod, p_treat=p_treat, tau_by_z=tau)


PAPER_DGP = PaperDgp()


# ---------------------------------------------------------------------------
# Ground truths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TruthEstimate:
    value: float
    mc_se: float


def _binned_group_means(w: np.ndarray, tau: np.ndarray, in_group: np.ndarray,
                        n_bins: int) -> np.ndarray:
    """E[tau | group, W] via equal-count bins of the pooled W, evaluated as a
    per-bin group mean; returns the per-unit fitted value."""
    order = np.argsort(w, kind="stable")
    bin_of = np.empty(len(w), dtype=int)
    bin_of[order] = np.minimum((np.arange(len(w)) * n_bins) // len(w), n_bins - 1)
    sums = np.bincount(bin_of[in_group], weights=tau[in_group], minlength=n_bins)
    cnts = np.bincount(bin_of[in_group], minlength=n_bins)
    if np.any(cnts == 0):
        raise DataError("empty truth bin; lower n_bins or raise n_truth")
    return (sums / cnts)[bin_of]


def true_effect(target: EffectTarget, n_truth: int = 1_000_000, seed: int = 971,
                dgp: PaperDgp = PAPER_DGP, balance_cols: tuple[int, ...] = (),
                n_bins: int = 200, n_shards: int = 10) -> TruthEstimate:
    """Plug-in truth from the latent effect surfaces on a large sample.

    Group-difference truths average the conditional effect surfaces; the
    balanced variants regress the surfaces on the balancing variable with a
    fine equal-count binning and average the group contrast over the pooled
    balancing distribution. The Monte-Carlo SE comes from disjoint shards.
    """
    if n_truth < 10**5:
        raise DataError("truth sample must have at least 1e5 rows")
    shard_vals = []
    per = n_truth // n_shards
    bins = max(10, min(n_bins, per // 500))  # keep every within-group bin populated
    for s in range(n_shards):
        sample = dgp.generate(per, seed + 7919 * s, balance_cols=balance_cols)
        shard_vals.append(_truth_on_sample(target, sample, bins))
    vals = np.asarray(shard_vals)
    return TruthEstimate(value=float(vals.mean()),
                         mc_se=float(vals.std(ddof=1) / math.sqrt(n_shards)))


def _truth_on_sample(target: EffectTarget, sample: DgpSample, n_bins: int) -> float:
    data = sample.data
    tau = sample.tau_by_z
    kind = target.kind
    u, v = target.group_contrast
    if kind is EffectKind.ATE:
        own = tau[np.arange(data.n), data.z]
        return float(own.mean())
    if kind is EffectKind.GATE:
        g = target.group
        return float(tau[data.z == g, g].mean())
    if kind is EffectKind.DELTA_GATE:
        return float(tau[data.z == u, u].mean() - tau[data.z == v, v].mean())
    if kind is EffectKind.DELTA_CBGATE:
        return float((tau[:, u] - tau[:, v]).mean())
    if kind in (EffectKind.BGATE, EffectKind.DELTA_BGATE):
        if len(data.w_cols) != 1:
            raise DataError("truth computation supports exactly one balancing column")
        w = data.w[:, 0]
        def balanced(group: int) -> float:
            fitted = _binned_group_means(w, tau[:, group], data.z == group, n_bins)
            return float(fitted.mean())
        if kind is EffectKind.BGATE:
            return balanced(target.group)
        return balanced(u) - balanced(v)
    raise DataError(f"no truth rule for {kind}")


# ---------------------------------------------------------------------------
# Performance measures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerformanceReport:
    """Replication-study summaries (population 1/R moment conventions)."""

    bias: float
    abs_bias: float
    std: float
    rmse: float
    skew: float
    ex_kurt: float
    bias_se: float
    coverage_95: float
    replications: int
    truth: float
    n_failures: int = 0

    def to_dict(self) -> dict:
        return {
            "bias": self.bias, "abs_bias": self.abs_bias, "std": self.std,
            "rmse": self.rmse, "skew": self.skew, "ex_kurt": self.ex_kurt,
            "bias_se": self.bias_se, "coverage_95": self.coverage_95,
            "replications": self.replications, "truth": self.truth,
            "n_failures": self.n_failures,
        }


def performance_measures(estimates: np.ndarray, ses: np.ndarray, truth: float,
                         n_failures: int = 0) -> PerformanceReport:
    """Bias, spread, shape and inference quality of a replication study.

    All moments use the population (1/R) convention, so
    rmse**2 == bias**2 + std**2 holds exactly. Coverage counts nominal 95%
    intervals (z = 1.96) that contain the truth.
    """
    est = np.asarray(estimates, dtype=float)
    ses = np.asarray(ses, dtype=float)
    if est.shape != ses.shape or est.ndim != 1 or len(est) < 2:
        raise DataError("need matched estimate/se vectors with at least 2 entries")
    r = len(est)
    mean = est.mean()
    centered = est - mean
    std = math.sqrt(float(np.mean(centered**2)))
    bias = float(mean - truth)
    rmse = math.sqrt(float(np.mean((est - truth) ** 2)))
    if std > 0:
        skew = float(np.mean((centered / std) ** 3))
        ex_kurt = float(np.mean((centered / std) ** 4) - 3.0)
    else:
        skew = 0.0
        ex_kurt = 0.0
    bias_se = float(ses.mean() - std)
    lo = est - COVERAGE_Z * ses
    hi = est + COVERAGE_Z * ses
    coverage = float(np.mean((truth >= lo) & (truth <= hi)))
    return PerformanceReport(bias=bias, abs_bias=float(np.mean(np.abs(est - truth))),
                             std=std, rmse=rmse, skew=skew, ex_kurt=ex_kurt,
                             bias_se=bias_se, coverage_95=coverage,
                             replications=r, truth=truth, n_failures=n_failures)


# ---------------------------------------------------------------------------
# Replication studies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorSpec:
    """Which estimator to run in a study and how it is configured."""

    kind: str  # "dml", "autodml", "reweight"
    dml: DmlConfig = DmlConfig()
    stage1: RieszNetConfig = field(default_factory=stage1_config)
    stage2: RieszNetConfig = field(default_factory=stage2_config)

    def run(self, data: Dataset, target: EffectTarget, seed: int,
            oracle: Optional[OracleNuisances] = None):
        cfg = replace(self.dml, seed=seed)
        if self.kind == "dml":
            runner = {
                EffectKind.ATE: estimate_ate,
                EffectKind.GATE: estimate_gate,
                EffectKind.BGATE: estimate_bgate,
                EffectKind.DELTA_GATE: estimate_delta_gate,
                EffectKind.DELTA_BGATE: estimate_delta_bgate,
                EffectKind.DELTA_CBGATE: estimate_delta_cbgate,
            }
            return runner[target.kind](data, target, cfg, oracle=oracle)
        if self.kind == "autodml":
            if target.kind is not EffectKind.DELTA_BGATE:
                raise DataError("autodml studies support the balanced group contrast only")
            return estimate_auto_dml_delta_bgate(
                data, target, self.stage1, self.stage2,
                k=cfg.k, j=cfg.j, seed=seed)
        if self.kind == "reweight":
            if target.kind is not EffectKind.DELTA_BGATE:
                raise DataError("reweight studies support the balanced group contrast only")
            return estimate_delta_bgate_reweighted(data, target, cfg, oracle=oracle)
        raise DataError(f"unknown estimator kind {self.kind!r}")


@dataclass(frozen=True)
class RawResult:
    rep: int
    seed: int
    coef: float
    se: float


@dataclass(frozen=True)
class StudyResult:
    report: PerformanceReport
    raw: list[RawResult]
    failures: list[tuple[int, str]]
    truth: TruthEstimate


def _one_rep(spec: EstimatorSpec, target: EffectTarget, n: int, seed: int,
             balance_cols: tuple[int, ...], dgp: PaperDgp,
             oracle_factory) -> RawResult:
    sample = dgp.generate(n, seed, balance_cols=balance_cols)
    oracle = oracle_factory(sample) if oracle_factory is not None else None
    est = spec.run(sample.data, target, seed=seed, oracle=oracle)
    return RawResult(rep=-1, seed=seed, coef=est.coef, se=est.se)


def run_study(spec: EstimatorSpec, target: EffectTarget, n: int, reps: int,
              base_seed: int, balance_cols: tuple[int, ...] = (),
              dgp: PaperDgp = PAPER_DGP, truth: Optional[TruthEstimate] = None,
              n_truth: int = 1_000_000, n_workers: int = 1,
              oracle_factory: Optional[Callable[[DgpSample], OracleNuisances]] = None,
              ) -> StudyResult:
    """Run a replication study and score it against the simulated truth.

    Replication r uses seed ``base_seed + r``. Estimator failures are
    recorded with their message and excluded from the report (never
    silently dropped). ``n_workers > 1`` distributes replications over
    processes; results are aggregated in replication order either way.
    """
    if reps < 2:
        raise DataError("need at least 2 replications")
    if truth is None:
        truth = true_effect(target, n_truth=n_truth, seed=base_seed + 10**6, dgp=dgp,
                            balance_cols=balance_cols)
    seeds = [base_seed + r for r in range(reps)]
    results: list[Optional[RawResult]] = [None] * reps
    failures: list[tuple[int, str]] = []

    if n_workers <= 1:
        for r, seed in enumerate(seeds):
            try:
                raw = _one_rep(spec, target, n, seed, balance_cols, dgp, oracle_factory)
                results[r] = RawResult(rep=r, seed=seed, coef=raw.coef, se=raw.se)
            except Exception as exc:  # noqa: BLE001 - failures are data, not bugs
                failures.append((r, f"{type(exc).__name__}: {exc}"))
    else:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=n_workers,
                                    initializer=_limit_worker_threads) as pool:
            futures = {
                pool.submit(_one_rep, spec, target, n, seed, balance_cols, dgp,
                            oracle_factory): r
                for r, seed in enumerate(seeds)
            }
            for fut in cf.as_completed(futures):
                r = futures[fut]
                try:
                    raw = fut.result()
                    results[r] = RawResult(rep=r, seed=seeds[r], coef=raw.coef, se=raw.se)
                except Exception as exc:  # noqa: BLE001
                    failures.append((r, f"{type(exc).__name__}: {exc}"))

    done = [res for res in results if res is not None]
    if len(done) < 2:
        raise EstimationError(
            f"only {len(done)} replications succeeded; failures: {failures[:3]}")
    report = performance_measures(np.array([r.coef for r in done]),
                                  np.array([r.se for r in done]),
                                  truth.value, n_failures=len(failures))
    return StudyResult(report=report, raw=done, failures=sorted(failures), truth=truth)


def _limit_worker_threads():
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except Exception:
        pass


# ---------------------------------------------------------------------------
# Tuned forest settings for the shipped DGP
# ---------------------------------------------------------------------------

_TUNED: dict[tuple[str, int], dict[str, tuple[int, int]]] = {
    # (max_depth, min_leaf) per nuisance, per simulation target and N
    ("delta-bgate-x0", 1250): {"mu1": (20, 5), "mu0": (2, 5), "pi": (10, 10),
                               "g1": (2, 5), "g0": (2, 50), "lambda": (2, 50)},
    ("delta-bgate-x0", 2500): {"mu1": (20, 5), "mu0": (3, 5), "pi": (5, 10),
                               "g1": (2, 10), "g0": (2, 50), "lambda": (2, 50)},
    ("delta-bgate-x0", 5000): {"mu1": (10, 5), "mu0": (3, 5), "pi": (10, 20),
                               "g1": (2, 5), "g0": (2, 50), "lambda": (2, 50)},
    ("delta-bgate-x0", 10000): {"mu1": (10, 5), "mu0": (5, 5), "pi": (10, 15),
                                "g1": (2, 5), "g0": (2, 50), "lambda": (2, 50)},
    ("delta-bgate-x2", 1250): {"mu1": (20, 5), "mu0": (2, 5), "pi": (10, 10),
                               "g1": (2, 5), "g0": (2, 50), "lambda": (2, 50)},
    ("delta-bgate-x2", 2500): {"mu1": (20, 5), "mu0": (3, 5), "pi": (5, 10),
                               "g1": (2, 5), "g0": (2, 5), "lambda": (2, 50)},
    ("delta-bgate-x2", 5000): {"mu1": (10, 5), "mu0": (3, 5), "pi": (10, 20),
                               "g1": (2, 5), "g0": (2, 5), "lambda": (2, 5)},
    ("delta-bgate-x2", 10000): {"mu1": (10, 5), "mu0": (5, 5), "pi": (10, 15),
                                "g1": (2, 5), "g0": (2, 5), "lambda": (2, 50)},
    ("delta-gate", 1250): {"mu1": (20, 5), "mu0": (2, 30), "pi": (10, 10)},
    ("delta-gate", 2500): {"mu1": (20, 5), "mu0": (2, 50), "pi": (5, 10)},
    ("delta-gate", 5000): {"mu1": (10, 5), "mu0": (3, 50), "pi": (10, 30)},
    ("delta-gate", 10000): {"mu1": (10, 10), "mu0": (3, 5), "pi": (10, 50)},
}

SIM_EFFECTS = ("delta-bgate-x0", "delta-bgate-x2", "delta-gate")


def sim_target(effect: str) -> tuple[EffectTarget, tuple[int, ...]]:
    """Effect target and balancing columns for a named simulation effect."""
    if effect == "delta-bgate-x0":
        return EffectTarget(kind=EffectKind.DELTA_BGATE), (0,)
    if effect == "delta-bgate-x2":
        return EffectTarget(kind=EffectKind.DELTA_BGATE), (2,)
    if effect == "delta-gate":
        return EffectTarget(kind=EffectKind.DELTA_GATE), ()
    raise DataError(f"unknown simulation effect {effect!r}; choose from {SIM_EFFECTS}")


def tuned_dml_config(effect: str, n: int, n_trees: int = 1000, seed: int = 0) -> DmlConfig:
    """DmlConfig with grid-tuned depth/leaf settings for a simulation effect.

    Falls back to the nearest tabulated sample size.
    """
    sizes = sorted({key[1] for key in _TUNED})
    nearest = min(sizes, key=lambda s: abs(s - n))
    cells = _TUNED.get((effect, n), _TUNED.get((effect, nearest)))
    if cells is None:
        raise DataError(f"no tuned settings for effect {effect!r}")

    def fc(cell: tuple[int, int]) -> ForestConfig:
        depth, leaf = cell
        return ForestConfig(n_trees=n_trees, max_depth=depth, min_leaf=leaf)

    kwargs = dict(
        outcome={1: fc(cells["mu1"]), 0: fc(cells["mu0"])},
        treat_prob=fc(cells["pi"]),
        seed=seed,
    )
    if "g1" in cells:
        kwargs["effect_curve"] = {1: fc(cells["g1"]), 0: fc(cells["g0"])}
        kwargs["group_prob"] = fc(cells["lambda"])
    return DmlConfig(**kwargs)
