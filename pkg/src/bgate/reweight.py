"""Matching-based reweighting: rebuild the sample so the balancing variables
are identically distributed across the two moderator groups, then estimate
the plain group-effect difference on the rebuilt sample.

Every observation is duplicated once per moderator level; each duplicate is
replaced by its nearest neighbor (Mahalanobis distance on the balancing
variables, squared difference in one dimension) among the original rows of
the assigned level. Matching is with replacement; exact distance ties go to
the lowest donor row index. Because donor rows can appear several times,
the variance of any downstream estimator is rescaled by the weighted-mean
factor sum(a_i^2) derived from the duplicate counts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import (
    DataError,
    Dataset,
    EffectEstimate,
    EffectKind,
    EffectTarget,
    EstimationError,
    WeightedSample,
    save_csv,
)
from .dml import DmlConfig, OracleNuisances, estimate_delta_gate


@dataclass(frozen=True)
class MatchPlan:
    """Bookkeeping of the duplicate-and-match step.

    Row r of the expanded sample was copied from ``source_row[r]`` of the
    original data, assigned moderator level ``assigned_level[r]``, and
    replaced by original row ``donor_row[r]`` at distance ``distance[r]``.
    """

    source_row: np.ndarray
    assigned_level: np.ndarray
    donor_row: np.ndarray
    distance: np.ndarray


def mahalanobis_distance(a: np.ndarray, b: np.ndarray, cov_inv: np.ndarray) -> float:
    """(a-b)' cov_inv (a-b) for vectors, plain squared difference in 1-D."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise DataError("point dimension mismatch")
    diff = a - b
    if a.shape[0] == 1:
        return float(diff[0] ** 2)
    cov_inv = np.asarray(cov_inv, dtype=float)
    if cov_inv.shape != (a.shape[0], a.shape[0]):
        raise DataError("inverse covariance dimension mismatch")
    return float(diff @ cov_inv @ diff)


def _distance_rows(points: np.ndarray, query: np.ndarray, cov_inv: Optional[np.ndarray]) -> np.ndarray:
    """Distances from one query row to many candidate rows (vectorized)."""
    diff = points - query
    if points.shape[1] == 1:
        return diff[:, 0] ** 2
    return np.einsum("ij,jk,ik->i", diff, cov_inv, diff)


def rebalance(data: Dataset) -> tuple[Dataset, WeightedSample, MatchPlan]:
    """Duplicate every row across both moderator levels and match.

    Requires a binary moderator and nonempty balancing set. Returns the
    2N-row balanced dataset (full records copied from the matched donors),
    the duplicate-count summary of donor usage for variance adjustment, and
    the match plan.
    """
    if data.n_mod_levels != 2:
        raise DataError("rebalancing is defined for a binary moderator")
    if not data.w_cols:
        raise DataError("no balancing columns designated")
    for lev in (0, 1):
        if not np.any(data.z == lev):
            raise EstimationError(f"moderator stratum {lev} is empty")
    w = data.w
    n, dim = w.shape
    cov_inv = None
    if dim > 1:
        cov = np.cov(w, rowvar=False)
        cov_inv = np.linalg.pinv(cov)

    source = np.concatenate([np.arange(n), np.arange(n)])
    assigned = np.concatenate([np.ones(n, dtype=int), np.zeros(n, dtype=int)])
    donor = np.empty(2 * n, dtype=int)
    dist = np.empty(2 * n)
    stratum_rows = {lev: np.flatnonzero(data.z == lev) for lev in (0, 1)}
    for r in range(2 * n):
        candidates = stratum_rows[assigned[r]]
        d_r = _distance_rows(w[candidates], w[source[r]], cov_inv)
        pick = int(np.argmin(d_r))  # argmin takes the first (lowest) index on ties
        donor[r] = candidates[pick]
        dist[r] = d_r[pick]

    balanced = data.subset(donor)
    used, counts = np.unique(donor, return_counts=True)
    sample = WeightedSample(base=data.subset(used), counts=counts - 1)
    plan = MatchPlan(source_row=source, assigned_level=assigned,
                     donor_row=donor, distance=dist)
    return balanced, sample, plan


def weighted_variance_factor(counts: np.ndarray) -> float:
    """sum(a_i^2) for weights a_i = (1 + s_i) / sum(1 + s); equals 1/Q when
    every duplicate count is equal.

    Computed as an exact integer ratio before the single division, so small
    cases come out exact (e.g. counts [1, 0, 1] give 9/25 = 0.36).
    """
    counts = np.asarray(counts)
    if counts.ndim != 1 or len(counts) < 1:
        raise DataError("counts must be a nonempty vector")
    if np.any(counts < 0) or np.any(counts != np.floor(counts)):
        raise DataError("counts must be nonnegative integers")
    multips = counts.astype(np.int64) + 1
    num = int(np.sum(multips**2))
    den = int(np.sum(multips)) ** 2
    return num / den


def estimate_delta_bgate_reweighted(data: Dataset, target: EffectTarget,
                                    cfg: DmlConfig,
                                    oracle: Optional[OracleNuisances] = None,
                                    ) -> EffectEstimate:
    """Balanced group contrast via rebalancing plus the plain group-difference
    estimator, with duplicate-aware standard errors.

    The i.i.d.-form variance from the balanced 2N-row sample is rescaled by
    2N * sum(a_i^2) so repeated donor rows do not deflate the uncertainty.
    """
    if target.kind is not EffectKind.DELTA_BGATE:
        raise DataError("target kind must be DELTA_BGATE")
    if set(target.group_contrast) != {0, 1}:
        raise DataError("rebalancing supports the binary moderator contrast only")
    target.validate_against(data)
    balanced, sample, _plan = rebalance(data)
    gate_target = EffectTarget(kind=EffectKind.DELTA_GATE,
                               treat_contrast=target.treat_contrast,
                               group_contrast=target.group_contrast)
    base = estimate_delta_gate(balanced, gate_target, cfg, oracle=oracle)
    inflation = balanced.n * weighted_variance_factor(sample.counts)
    scores = base.scores * np.sqrt(inflation)
    return EffectEstimate.from_scores(target, base.coef, scores)


def save_balanced_csv(balanced: Dataset, plan: MatchPlan, path: str) -> None:
    """Export a rebalanced sample with source-row and weight columns.

    ``weight`` is the donor-usage weight (1+s)/sum(1+s) of the row's donor.
    """
    donor = plan.donor_row
    _, inverse, counts = np.unique(donor, return_inverse=True, return_counts=True)
    weights = counts[inverse] / len(donor)
    # per-donor weight split across its appearances: each balanced row stands
    # for one appearance, so the row weight is 1/len and the donor weight is
    # counts/len; export the donor weight for variance bookkeeping
    save_csv(balanced, path, extra={"source_row": donor.astype(float),
                                    "weight": weights})
