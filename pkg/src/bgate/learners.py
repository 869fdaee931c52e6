"""Nuisance-function learners: regression and probability forests plus a
grid-search tuner.

The forests are CART ensembles (variance-reduction splits for regression,
Gini splits for classification) provided by scikit-learn, wrapped behind a
small config/predictor interface so estimator code never touches sklearn
directly. Probability predictions are tree-averaged leaf class frequencies
mapped onto the full level set.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from sklearn.ensemble import RandomForestClassifier, RandomForestRegressor

from .data import DataError, _assign_folds


@dataclass(frozen=True)
class ForestConfig:
    """Random-forest hyperparameters.

    ``features_per_split=None`` uses ceil(p/3) for regression and
    ceil(sqrt(p)) for classification.
    """

    n_trees: int = 1000
    max_depth: int = 20
    min_leaf: int = 5
    features_per_split: Optional[int] = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise DataError("forest parameters must be positive")

    def to_json(self) -> str:
        return json.dumps({
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "features_per_split": self.features_per_split,
            "bootstrap": self.bootstrap,
            "seed": self.seed,
        })

    @staticmethod
    def from_json(text: str) -> "ForestConfig":
        return ForestConfig(**json.loads(text))


def _resolve_features(cfg: ForestConfig, p: int, mode: str) -> int:
    if cfg.features_per_split is not None:
        if cfg.features_per_split > p:
            raise DataError(f"features_per_split={cfg.features_per_split} exceeds p={p}")
        return cfg.features_per_split
    if mode == "regression":
        return max(1, math.ceil(p / 3))
    return max(1, math.ceil(math.sqrt(p)))


class Predictor:
    """Fitted nuisance model with a uniform prediction surface.

    mode "regression": ``predict(X) -> (n,)`` tree-averaged leaf means.
    mode "probability": ``predict(X) -> (n, n_levels)`` class probabilities
    summing to one, columns indexed by level code.
    """

    def __init__(self, model, mode: str, n_features: int, n_levels: int = 0,
                 constant: Optional[np.ndarray] = None):
        self._model = model
        self.mode = mode
        self.n_features = n_features
        self.n_levels = n_levels
        self._constant = constant

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.ndim != 2 or features.shape[1] != self.n_features:
            raise DataError(
                f"predictor expects {self.n_features} features, got shape {features.shape}"
            )
        n = features.shape[0]
        if self._constant is not None:
            if self.mode == "regression":
                return np.full(n, float(self._constant))
            return np.tile(self._constant, (n, 1))
        if self.mode == "regression":
            return self._model.predict(features)
        proba = self._model.predict_proba(features)
        out = np.zeros((n, self.n_levels))
        for col, cls in enumerate(self._model.classes_):
            out[:, int(cls)] = proba[:, col]
        return out


def fit_regression_forest(features: np.ndarray, targets: np.ndarray,
                          cfg: ForestConfig, n_jobs: int = 1) -> Predictor:
    """Fit a regression forest; prediction is the tree average of leaf means.

    Zero-column feature matrices (empty balancing sets) yield a constant
    predictor at the target mean, as does fully degenerate input.
    """
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if features.shape[0] != targets.shape[0]:
        raise DataError("features/targets row mismatch")
    if features.shape[0] < 2 * cfg.min_leaf:
        raise DataError(f"need at least {2 * cfg.min_leaf} rows for min_leaf={cfg.min_leaf}")
    p = features.shape[1]
    if p == 0:
        return Predictor(None, "regression", 0, constant=np.asarray(targets.mean()))
    model = RandomForestRegressor(
        n_estimators=cfg.n_trees,
        max_depth=cfg.max_depth,
        min_samples_leaf=cfg.min_leaf,
        max_features=_resolve_features(cfg, p, "regression"),
        bootstrap=cfg.bootstrap,
        random_state=cfg.seed,
        n_jobs=n_jobs,
    )
    model.fit(features, targets)
    model.set_params(n_jobs=1)  # parallel predict sums in completion order
    return Predictor(model, "regression", p)


def fit_probability_forest(features: np.ndarray, labels: np.ndarray,
                           cfg: ForestConfig, n_levels: Optional[int] = None,
                           n_jobs: int = 1) -> Predictor:
    """Fit a classification forest returning per-level probabilities.

    ``n_levels`` fixes the output width when some level is absent from this
    training subset (its probability column is zero).
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if features.shape[0] != labels.shape[0]:
        raise DataError("features/labels row mismatch")
    present = np.unique(labels)
    if len(present) < 2:
        raise DataError("labels have a single level; cannot fit a probability forest")
    n_levels = n_levels if n_levels is not None else int(labels.max()) + 1
    p = features.shape[1]
    if p == 0:
        shares = np.bincount(labels, minlength=n_levels) / len(labels)
        return Predictor(None, "probability", 0, n_levels, constant=shares)
    model = RandomForestClassifier(
        n_estimators=cfg.n_trees,
        max_depth=cfg.max_depth,
        min_samples_leaf=cfg.min_leaf,
        max_features=_resolve_features(cfg, p, "probability"),
        bootstrap=cfg.bootstrap,
        criterion="gini",
        random_state=cfg.seed,
        n_jobs=n_jobs,
    )
    model.fit(features, labels)
    model.set_params(n_jobs=1)  # parallel predict sums in completion order
    return Predictor(model, "probability", p, n_levels)


# ---------------------------------------------------------------------------
# Hyperparameter tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TuningGrid:
    """Grid-search space over tree depth and minimum leaf size.

    Each draw runs one ``folds``-fold cross validation with a fresh random
    split; the winning cell per draw is the one with minimal CV loss (MSE
    for regression targets, Brier score for labels); the final choice is the
    modal winner across draws.
    """

    depths: tuple[int, ...] = (2, 3, 5, 10, 20)
    leaves: tuple[int, ...] = (5, 10, 15, 20, 30, 50)
    folds: int = 2
    draws: int = 20

    def __post_init__(self):
        if not self.depths or not self.leaves:
            raise DataError("tuning grid must be nonempty")
        if self.folds < 2 or self.draws < 1:
            raise DataError("need folds >= 2 and draws >= 1")


def _cv_loss(features, target, cfg: ForestConfig, mode: str, fold_of: np.ndarray) -> float:
    losses = []
    n_levels = int(np.max(target)) + 1 if mode == "probability" else 0
    for f in range(fold_of.max() + 1):
        fit_mask = fold_of != f
        if mode == "regression":
            pred = fit_regression_forest(features[fit_mask], target[fit_mask], cfg)
            resid = target[~fit_mask] - pred.predict(features[~fit_mask])
            losses.append(float(np.mean(resid**2)))
        else:
            pred = fit_probability_forest(features[fit_mask], target[fit_mask], cfg, n_levels)
            proba = pred.predict(features[~fit_mask])
            onehot = np.zeros_like(proba)
            onehot[np.arange(proba.shape[0]), target[~fit_mask]] = 1.0
            losses.append(float(np.mean(np.sum((proba - onehot) ** 2, axis=1))))
    return float(np.mean(losses))


def _pick_min(cells: list[tuple[int, int]], losses: list[float]) -> tuple[int, int]:
    # ties: smaller depth first, then larger min_leaf
    best = min(zip(losses, [c[0] for c in cells], [-c[1] for c in cells], cells))
    return best[3]


def modal_cell(winners: list[tuple[int, int]]) -> tuple[int, int]:
    """Most frequent (depth, leaf) cell; ties broken by smaller depth then
    larger min_leaf."""
    counts = Counter(winners)
    best = min(((-cnt, cell[0], -cell[1], cell) for cell, cnt in counts.items()))
    return best[3]


def tune_forest(features: np.ndarray, target: np.ndarray, mode: str,
                grid: TuningGrid, seed: int, n_trees: int = 1000,
                base: Optional[ForestConfig] = None) -> ForestConfig:
    """Pick (max_depth, min_leaf) by repeated cross validation.

    mode is "regression" or "probability"; ``base`` carries the remaining
    forest settings. Deterministic for a fixed seed.
    """
    features = np.asarray(features, dtype=float)
    target = np.asarray(target)
    n = features.shape[0]
    if n < 2 * grid.folds:
        raise DataError("dataset too small for the tuning folds")
    base = base or ForestConfig(n_trees=n_trees)
    rng = np.random.default_rng(seed)
    cells = [(depth, leaf) for depth in grid.depths for leaf in grid.leaves]
    winners = []
    for _ in range(grid.draws):
        fold_of = _assign_folds(n, grid.folds, rng)
        losses = []
        for depth, leaf in cells:
            cfg = replace(base, n_trees=n_trees, max_depth=depth, min_leaf=leaf,
                          seed=int(rng.integers(2**31)))
            losses.append(_cv_loss(features, target, cfg, mode, fold_of))
        winners.append(_pick_min(cells, losses))
    depth, leaf = modal_cell(winners)
    return replace(base, n_trees=n_trees, max_depth=depth, min_leaf=leaf)
