"""Orthogonal score ingredients.

Builds the doubly robust pseudo-outcome, the second-stage scores for
balanced group contrasts, the fully-interacted four-cell score used when
the moderator itself is treated as unconfounded, and the propensity-weight
normalization pipeline that replaces every indicator/propensity ratio.

All functions are pure and operate on aligned numpy vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .data import DataError

PROPENSITY_FLOOR = 1e-4
WEIGHT_CAP = 0.05


@dataclass(frozen=True)
class NuisanceFits:
    """Per-unit nuisance predictions, one column per level.

    outcome_means[i, d]  : E[Y | D=d, Z=z_i, X=x_i]
    treat_probs[i, d]    : P(D=d | Z=z_i, X=x_i), rows sum to one
    group_probs[i, z]    : P(Z=z | W=w_i), rows sum to one
    effect_means[i, z]   : E[pseudo-outcome | Z=z, W=w_i]
    """

    outcome_means: np.ndarray
    treat_probs: np.ndarray
    group_probs: np.ndarray
    effect_means: np.ndarray


@dataclass(frozen=True)
class NormalizedWeights:
    """Output of the weight pipeline.

    ``values`` replace the indicator/propensity ratio and sum to the sample
    size; ``capped`` is the intermediate normalized vector after the 5% cap
    (each entry <= 0.05), kept for diagnostics.
    """

    values: np.ndarray
    capped: np.ndarray


def normalize_truncate_weights(labels: np.ndarray, level: int,
                               propensities: np.ndarray) -> NormalizedWeights:
    """Normalized, truncated inverse-propensity weights for one level.

    Four stages: floor the propensity at 1e-4; form the raw weight
    I(label==level)/propensity; normalize to sum one; cap each weight at
    0.05 of the total; renormalize to sum one and scale by the sample size.
    Units not at ``level`` get weight exactly zero.
    """
    labels = np.asarray(labels)
    prop = np.asarray(propensities, dtype=float)
    if labels.shape != prop.shape:
        raise DataError("labels/propensities length mismatch")
    n = labels.shape[0]
    if n < 1:
        raise DataError("empty weight input")
    floored = np.maximum(prop, PROPENSITY_FLOOR)
    raw = (labels == level) / floored
    total = raw.sum()
    if total == 0:
        raise DataError(f"no unit at level {level}; raw weights all zero")
    normalized = raw / total
    capped = np.minimum(normalized, WEIGHT_CAP)
    values = capped / capped.sum() * n
    return NormalizedWeights(values=values, capped=capped)


def raw_weights(labels: np.ndarray, level: int, propensities: np.ndarray) -> np.ndarray:
    """Unnormalized indicator/propensity ratio (oracle-test form)."""
    labels = np.asarray(labels)
    prop = np.asarray(propensities, dtype=float)
    return (labels == level) / prop


def pseudo_outcome(y: np.ndarray, mu_l: np.ndarray, mu_m: np.ndarray,
                   w_l: np.ndarray, w_m: np.ndarray) -> np.ndarray:
    """Doubly robust per-unit effect proxy for the treatment contrast (l, m).

    delta_i = mu_l - mu_m + w_l*(y - mu_l) - w_m*(y - mu_m), where w_l/w_m
    are the (normalized) inverse-propensity factors that already embed the
    treatment indicators.
    """
    arrays = [np.asarray(a, dtype=float) for a in (y, mu_l, mu_m, w_l, w_m)]
    if len({a.shape for a in arrays}) != 1:
        raise DataError("pseudo_outcome inputs must share one length")
    y, mu_l, mu_m, w_l, w_m = arrays
    return mu_l - mu_m + w_l * (y - mu_l) - w_m * (y - mu_m)


def second_stage_score(delta: np.ndarray, g_u: np.ndarray, g_v: np.ndarray,
                       w_u: np.ndarray, w_v: np.ndarray) -> np.ndarray:
    """Orthogonal score for the balanced contrast of groups u minus v.

    phi_i = g_u - g_v + w_u*(delta - g_u) - w_v*(delta - g_v); its mean over
    an evaluation fold is the fold's contribution to the balanced group
    contrast.
    """
    arrays = [np.asarray(a, dtype=float) for a in (delta, g_u, g_v, w_u, w_v)]
    if len({a.shape for a in arrays}) != 1:
        raise DataError("second_stage_score inputs must share one length")
    delta, g_u, g_v, w_u, w_v = arrays
    return g_u - g_v + w_u * (delta - g_u) - w_v * (delta - g_v)


def single_group_score(delta: np.ndarray, g_z: np.ndarray, w_z: np.ndarray) -> np.ndarray:
    """Score for a single balanced group average: g_z + w_z*(delta - g_z)."""
    delta = np.asarray(delta, dtype=float)
    g_z = np.asarray(g_z, dtype=float)
    w_z = np.asarray(w_z, dtype=float)
    return g_z + w_z * (delta - g_z)


def cbgate_score(y: np.ndarray, mu: Mapping[tuple[int, int], np.ndarray],
                 w: Mapping[tuple[int, int], np.ndarray],
                 l: int, m: int, u: int, v: int) -> np.ndarray:
    """Four-cell doubly robust score for the interaction contrast.

    phi_i = mu[l,v] - mu[m,v] - mu[l,u] + mu[m,u]
            + w[l,v]*(y - mu[l,v]) - w[m,v]*(y - mu[m,v])
            - w[l,u]*(y - mu[l,u]) + w[m,u]*(y - mu[m,u])

    ``mu[(d, z)]`` are per-unit outcome regressions for the cell, ``w[(d,z)]``
    the per-cell (normalized) joint-propensity weights embedding the cell
    indicator. Its mean estimates the group-v effect contrast minus the
    group-u effect contrast.
    """
    y = np.asarray(y, dtype=float)
    cells = [(l, v), (m, v), (l, u), (m, u)]
    for cell in cells:
        if cell not in mu or cell not in w:
            raise DataError(f"missing nuisance for cell (d={cell[0]}, z={cell[1]})")
    sign = {(l, v): 1.0, (m, v): -1.0, (l, u): -1.0, (m, u): 1.0}
    phi = np.zeros_like(y)
    for cell in cells:
        mu_c = np.asarray(mu[cell], dtype=float)
        w_c = np.asarray(w[cell], dtype=float)
        phi += sign[cell] * (mu_c + w_c * (y - mu_c))
    return phi


# ---------------------------------------------------------------------------
# Numerical orthogonality check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OrthogonalityResult:
    """Finite-perturbation diagnostics of a moment condition.

    ``slope`` is the central-difference derivative of the mean score at
    r = 0 (smallest grid pair), ``curvature`` the second difference from the
    largest pair; ``means`` maps each evaluated r to the mean score.
    """

    slope: float
    curvature: float
    means: dict[float, float]


def orthogonality_check(score_mean: Callable[[Mapping[str, np.ndarray]], float],
                        nuisances: Mapping[str, np.ndarray],
                        direction: Mapping[str, np.ndarray],
                        r_grid: tuple[float, ...] = (-0.1, -0.05, 0.05, 0.1),
                        ) -> OrthogonalityResult:
    """Slope of the mean score under nuisance perturbation eta + r * direction.

    ``score_mean`` maps a nuisance dictionary to the population mean of the
    score; ``direction`` perturbs the listed keys (missing keys stay fixed).
    A Neyman-orthogonal score has slope zero at r = 0 up to higher-order
    terms; the quadratic curvature is reported alongside.
    """
    rs = sorted({float(r) for r in r_grid})
    if any(r == 0 for r in rs):
        raise DataError("r grid must exclude 0 (it is evaluated automatically)")
    for r in rs:
        if -r not in rs:
            raise DataError("r grid must be symmetric around 0")

    def perturbed(r: float) -> dict[str, np.ndarray]:
        eta = dict(nuisances)
        for key, delta in direction.items():
            eta[key] = np.asarray(eta[key], dtype=float) + r * np.asarray(delta, dtype=float)
        return eta

    means = {0.0: float(score_mean(dict(nuisances)))}
    for r in rs:
        means[r] = float(score_mean(perturbed(r)))

    pos = [r for r in rs if r > 0]
    r_small, r_big = min(pos), max(pos)
    slope = (means[r_small] - means[-r_small]) / (2.0 * r_small)
    curvature = (means[r_big] + means[-r_big] - 2.0 * means[0.0]) / r_big**2
    return OrthogonalityResult(slope=slope, curvature=curvature, means=means)
