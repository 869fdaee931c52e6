import math
from dataclasses import dataclass

import numpy as np
import pytest

from bgate.data import DataError, EffectEstimate, EffectKind, EffectTarget
from bgate.simlab import (
    PAPER_DGP,
    PaperDgp,
    TruthEstimate,
    beta_cdf_2_4,
    performance_measures,
    run_study,
    sim_target,
    true_effect,
    tuned_dml_config,
)

DELTA_B = EffectTarget(kind=EffectKind.DELTA_BGATE)


# ---------------------------------------------------------------------------
# data generation
# ---------------------------------------------------------------------------

def test_generated_probability_ranges():
    sample = PAPER_DGP.generate(5000, seed=1)
    assert sample.p_mod.min() >= 0.1 and sample.p_mod.max() <= 0.9
    assert sample.p_treat.min() >= 0.2 and sample.p_treat.max() <= 0.8


def test_generated_covariate_moments():
    n = 40_000
    sample = PAPER_DGP.generate(n, seed=2)
    sd = math.sqrt(1 / 12)
    for col in range(2, 10):
        assert abs(sample.data.x[:, col].mean() - 0.5) < 3 * sd / math.sqrt(n)
    for col in range(2):
        assert abs(sample.data.x[:, col].mean() - 0.5) < 3 * sd / math.sqrt(n)


def test_generate_deterministic_and_seed_sensitive():
    a = PAPER_DGP.generate(500, seed=3)
    b = PAPER_DGP.generate(500, seed=3)
    c = PAPER_DGP.generate(500, seed=4)
    assert np.array_equal(a.data.y, b.data.y)
    assert np.array_equal(a.data.x, b.data.x)
    assert not np.array_equal(a.data.y, c.data.y)


def test_observed_outcome_matches_selected_potential():
    sample = PAPER_DGP.generate(1000, seed=5)
    expected = np.where(sample.data.d == 1, sample.y1, sample.y0)
    assert np.array_equal(sample.data.y, expected)


def test_beta_cdf_closed_form_cross_check():
    # shape (2, 4): the regularized incomplete beta equals the binomial tail
    # polynomial 10x^2(1-x)^3 + 10x^3(1-x)^2 + 5x^4(1-x) + x^5
    x = np.linspace(0, 1, 101)
    poly = (10 * x**2 * (1 - x) ** 3 + 10 * x**3 * (1 - x) ** 2
            + 5 * x**4 * (1 - x) + x**5)
    assert np.max(np.abs(beta_cdf_2_4(x) - poly)) < 1e-12


# ---------------------------------------------------------------------------
# truths
# ---------------------------------------------------------------------------

class ConstantEffectDgp(PaperDgp):
    """Same design with a flat conditional effect surface."""

    def __init__(self, value):
        self.value = value

    def effect(self, x, z):
        return np.full(x.shape[0], self.value)


def test_true_effect_degenerate_design():
    dgp = ConstantEffectDgp(1.25)
    ate = true_effect(EffectTarget(kind=EffectKind.ATE), n_truth=10**5, seed=1, dgp=dgp)
    gate = true_effect(EffectTarget(kind=EffectKind.GATE, group=1), n_truth=10**5,
                       seed=1, dgp=dgp)
    bgate = true_effect(EffectTarget(kind=EffectKind.BGATE, group=0), n_truth=10**5,
                        seed=1, dgp=dgp, balance_cols=(0,))
    for t in (ate, gate, bgate):
        assert t.value == pytest.approx(1.25, abs=1e-9)
    for kind in (EffectKind.DELTA_GATE, EffectKind.DELTA_BGATE, EffectKind.DELTA_CBGATE):
        t = true_effect(EffectTarget(kind=kind), n_truth=10**5, seed=1, dgp=dgp,
                        balance_cols=(0,))
        assert t.value == pytest.approx(0.0, abs=1e-9)


def test_truth_balanced_x2_equals_group_difference():
    tgt_x2, bal_x2 = sim_target("delta-bgate-x2")
    tgt_g, _ = sim_target("delta-gate")
    t_x2 = true_effect(tgt_x2, n_truth=2 * 10**5, seed=11, balance_cols=bal_x2)
    t_g = true_effect(tgt_g, n_truth=2 * 10**5, seed=12)
    combined = math.hypot(t_x2.mc_se, t_g.mc_se)
    assert abs(t_x2.value - t_g.value) < 3 * combined


def test_truth_balanced_x0_differs_from_group_difference():
    tgt_x0, bal_x0 = sim_target("delta-bgate-x0")
    tgt_g, _ = sim_target("delta-gate")
    t_x0 = true_effect(tgt_x0, n_truth=2 * 10**5, seed=13, balance_cols=bal_x0)
    t_g = true_effect(tgt_g, n_truth=2 * 10**5, seed=14)
    combined = math.hypot(t_x0.mc_se, t_g.mc_se)
    assert abs(t_x0.value - t_g.value) > 5 * combined


def test_truth_stability_across_disjoint_seeds():
    tgt, bal = sim_target("delta-bgate-x0")
    a = true_effect(tgt, n_truth=10**6, seed=100, balance_cols=bal)
    b = true_effect(tgt, n_truth=10**6, seed=23_456, balance_cols=bal)
    assert abs(a.value - b.value) < 3 * math.hypot(a.mc_se, b.mc_se)


def test_truth_requires_large_sample():
    with pytest.raises(DataError):
        true_effect(DELTA_B, n_truth=10**4, seed=1, balance_cols=(0,))


# ---------------------------------------------------------------------------
# performance measures
# ---------------------------------------------------------------------------

def test_performance_constant_estimates_at_truth():
    rep = performance_measures(np.full(20, 2.0), np.full(20, 1.0), truth=2.0)
    assert rep.bias == 0.0 and rep.std == 0.0 and rep.rmse == 0.0
    assert rep.coverage_95 == 1.0


def test_performance_hand_example_population_convention():
    rep = performance_measures(np.array([0.0, 2.0]), np.array([1.0, 1.0]), truth=1.0)
    assert rep.bias == pytest.approx(0.0)
    assert rep.rmse == pytest.approx(1.0)
    assert rep.std == pytest.approx(1.0)
    assert rep.abs_bias == pytest.approx(1.0)


def test_performance_symmetric_estimates_zero_skew():
    est = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    rep = performance_measures(est, np.ones(5), truth=0.0)
    assert abs(rep.skew) < 1e-12


def test_performance_rmse_identity():
    rng = np.random.default_rng(8)
    for _ in range(10):
        est = rng.normal(size=50)
        rep = performance_measures(est, np.abs(rng.normal(size=50)) + 0.1,
                                   truth=float(rng.normal()))
        assert rep.rmse**2 == pytest.approx(rep.bias**2 + rep.std**2, abs=1e-9)


# ---------------------------------------------------------------------------
# study runner
# ---------------------------------------------------------------------------

@dataclass
class StubSpec:
    """Estimator stand-in returning truth plus optional noise."""

    truth: float
    sigma: float = 0.0
    fail_every: int = 0

    def run(self, data, target, seed, oracle=None):
        if self.fail_every and seed % self.fail_every == 0:
            raise RuntimeError(f"synthetic failure at seed {seed}")
        rng = np.random.default_rng(seed)
        coef = self.truth + self.sigma * rng.normal()
        se = self.sigma if self.sigma > 0 else 1.0
        return EffectEstimate.from_scores(target, coef,
                                          np.full(data.n, se * math.sqrt(data.n)))


def test_run_study_exact_stub():
    truth = TruthEstimate(value=0.42, mc_se=0.0)
    res = run_study(StubSpec(truth=0.42), DELTA_B, n=50, reps=10, base_seed=1,
                    balance_cols=(0,), truth=truth)
    assert res.report.bias == pytest.approx(0.0, abs=1e-12)
    assert res.report.coverage_95 == 1.0


def test_run_study_noisy_stub_coverage_near_nominal():
    truth = TruthEstimate(value=0.0, mc_se=0.0)
    reps = 2000
    res = run_study(StubSpec(truth=0.0, sigma=0.3), DELTA_B, n=20, reps=reps,
                    base_seed=7, balance_cols=(0,), truth=truth)
    se_binom = math.sqrt(0.95 * 0.05 / reps)
    assert abs(res.report.coverage_95 - 0.95) < 3 * se_binom


def test_run_study_records_failures():
    truth = TruthEstimate(value=0.0, mc_se=0.0)
    res = run_study(StubSpec(truth=0.0, sigma=0.1, fail_every=3), DELTA_B, n=20,
                    reps=9, base_seed=1, balance_cols=(0,), truth=truth)
    assert res.report.n_failures == len(res.failures) > 0
    assert res.report.replications + res.report.n_failures == 9
    assert all("synthetic failure" in msg for _, msg in res.failures)


def test_run_study_rejects_single_rep():
    with pytest.raises(DataError):
        run_study(StubSpec(truth=0.0), DELTA_B, n=20, reps=1, base_seed=0,
                  truth=TruthEstimate(0.0, 0.0))


def test_run_study_worker_pool_matches_serial():
    truth = TruthEstimate(value=0.1, mc_se=0.0)
    serial = run_study(StubSpec(truth=0.1, sigma=0.2), DELTA_B, n=20, reps=8,
                       base_seed=3, balance_cols=(0,), truth=truth, n_workers=1)
    pooled = run_study(StubSpec(truth=0.1, sigma=0.2), DELTA_B, n=20, reps=8,
                       base_seed=3, balance_cols=(0,), truth=truth, n_workers=2)
    assert [r.coef for r in serial.raw] == [r.coef for r in pooled.raw]
    assert serial.report.to_dict() == pooled.report.to_dict()


def test_tuned_config_covers_all_effects():
    for effect in ("delta-bgate-x0", "delta-bgate-x2", "delta-gate"):
        for n in (1250, 2500, 5000, 10000, 3000):
            cfg = tuned_dml_config(effect, n, n_trees=100)
            assert cfg.treat_prob.n_trees == 100
    with pytest.raises(DataError):
        sim_target("unknown-effect")
