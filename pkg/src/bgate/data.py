"""Core data model: observational datasets, nested fold plans, effect targets
and estimate containers shared by all estimators.

Conventions
-----------
Treatment and moderator are stored as contiguous integer codes 0..L-1.
Multi-valued variables are supported; every effect is a pairwise contrast
between two explicit levels. Balancing variables are designated columns of
the covariate matrix.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm


class DataError(ValueError):
    """Raised when input data violates the data-model contract."""


class EstimationError(RuntimeError):
    """Raised when estimation fails on valid inputs (e.g. an empty fold cell)."""


# ---------------------------------------------------------------------------
# Effect targets
# ---------------------------------------------------------------------------

class EffectKind(enum.Enum):
    ATE = "ate"
    GATE = "gate"
    BGATE = "bgate"
    DELTA_GATE = "delta-gate"
    DELTA_BGATE = "delta-bgate"
    DELTA_CBGATE = "delta-cbgate"


_DELTA_KINDS = {EffectKind.DELTA_GATE, EffectKind.DELTA_BGATE, EffectKind.DELTA_CBGATE}
_SINGLE_GROUP_KINDS = {EffectKind.GATE, EffectKind.BGATE}


@dataclass(frozen=True)
class EffectTarget:
    """Which effect to estimate.

    Parameters
    ----------
    kind : EffectKind
    treat_contrast : (l, m)
        Treatment levels compared (effect of l versus m).
    group_contrast : (u, v)
        Moderator levels compared for delta effects (group u minus group v).
    group : int
        Single moderator level for GATE/BGATE.
    """

    kind: EffectKind
    treat_contrast: tuple[int, int] = (1, 0)
    group_contrast: tuple[int, int] = (1, 0)
    group: int = 0

    def __post_init__(self):
        l, m = self.treat_contrast
        if l == m:
            raise DataError("treatment contrast levels must differ")
        if self.kind in _DELTA_KINDS:
            u, v = self.group_contrast
            if u == v:
                raise DataError("moderator contrast levels must differ")

    def validate_against(self, data: "Dataset") -> None:
        l, m = self.treat_contrast
        for lev in (l, m):
            if not 0 <= lev <= data.n_treat_levels - 1:
                raise DataError(f"treatment level {lev} not present in data")
        if self.kind in _DELTA_KINDS:
            for lev in self.group_contrast:
                if not 0 <= lev <= data.n_mod_levels - 1:
                    raise DataError(f"moderator level {lev} not present in data")
        if self.kind in _SINGLE_GROUP_KINDS:
            if not 0 <= self.group <= data.n_mod_levels - 1:
                raise DataError(f"moderator level {self.group} not present in data")

    def label(self) -> str:
        l, m = self.treat_contrast
        if self.kind is EffectKind.ATE:
            return f"ate[{l}-{m}]"
        if self.kind in _SINGLE_GROUP_KINDS:
            return f"{self.kind.value}[{l}-{m}|z={self.group}]"
        u, v = self.group_contrast
        return f"{self.kind.value}[{l}-{m}|z={u}-z={v}]"


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Observational sample (y, d, z, x) with designated balancing columns.

    Attributes
    ----------
    y : (n,) float array, outcome.
    d : (n,) int array, treatment codes 0..m, every level present.
    z : (n,) int array, moderator codes 0..v, every level present.
    x : (n, p) float array, covariates.
    w_cols : tuple of column indices into x marking the balancing variables.
    treat_levels, mod_levels : original level values before re-coding
        (sorted ascending); identity mapping when constructed directly.
    """

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray
    w_cols: tuple[int, ...] = ()
    x_names: tuple[str, ...] = ()
    treat_levels: tuple[float, ...] = ()
    mod_levels: tuple[float, ...] = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        d = np.asarray(self.d)
        z = np.asarray(self.z)
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 2:
            raise DataError("covariates must be a 2-d matrix")
        n = y.shape[0]
        if n < 1:
            raise DataError("dataset is empty")
        if not (d.shape[0] == z.shape[0] == x.shape[0] == n):
            raise DataError("y, d, z, x must share the same number of rows")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise DataError("non-finite value in outcome or covariates")
        for name, arr in (("treatment", d), ("moderator", z)):
            if np.any(arr != np.floor(arr)):
                raise DataError(f"{name} must be integer coded")
            arr = arr.astype(int)
            levels = np.unique(arr)
            if levels[0] != 0 or not np.array_equal(levels, np.arange(len(levels))):
                raise DataError(
                    f"{name} levels must be contiguous codes 0..{len(levels) - 1} "
                    f"with every level present (got {levels.tolist()})"
                )
        d = d.astype(int)
        z = z.astype(int)
        p = x.shape[1]
        if len(set(self.w_cols)) != len(self.w_cols):
            raise DataError("duplicate balancing column")
        for c in self.w_cols:
            if not 0 <= c < p:
                raise DataError(f"balancing column {c} out of range for p={p}")
        names = self.x_names or tuple(f"x{i}" for i in range(p))
        if len(names) != p:
            raise DataError("x_names length does not match covariate count")
        for arr in (y, d, z, x):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w_cols", tuple(int(c) for c in self.w_cols))
        object.__setattr__(self, "x_names", names)
        if not self.treat_levels:
            object.__setattr__(self, "treat_levels", tuple(range(int(d.max()) + 1)))
        if not self.mod_levels:
            object.__setattr__(self, "mod_levels", tuple(range(int(z.max()) + 1)))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def n_treat_levels(self) -> int:
        return int(self.d.max()) + 1

    @property
    def n_mod_levels(self) -> int:
        return int(self.z.max()) + 1

    @property
    def w(self) -> np.ndarray:
        """Balancing-variable matrix (n, len(w_cols)); may have zero columns."""
        return self.x[:, list(self.w_cols)]

    def subset(self, idx: np.ndarray) -> "Dataset":
        """Row subset keeping codes and column metadata.

        Bypasses the every-level-present invariant: fold subsets may drop a
        level, callers that care must check explicitly.
        """
        idx = np.asarray(idx)
        out = object.__new__(Dataset)
        object.__setattr__(out, "y", self.y[idx])
        object.__setattr__(out, "d", self.d[idx])
        object.__setattr__(out, "z", self.z[idx])
        object.__setattr__(out, "x", self.x[idx])
        object.__setattr__(out, "w_cols", self.w_cols)
        object.__setattr__(out, "x_names", self.x_names)
        object.__setattr__(out, "treat_levels", self.treat_levels)
        object.__setattr__(out, "mod_levels", self.mod_levels)
        return out


# ---------------------------------------------------------------------------
# Fold plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    """Two-level cross-fitting assignment.

    ``outer[i]`` is the outer fold id (0..k-1) of unit i, ``inner[i]`` the
    inner fold id (0..j-1), meaningful within the unit's outer fold.
    """

    outer: np.ndarray
    inner: np.ndarray
    k: int
    j: int

    def outer_mask(self, fold: int) -> np.ndarray:
        return self.outer == fold

    def inner_mask(self, outer_fold: int, inner_fold: int) -> np.ndarray:
        return (self.outer == outer_fold) & (self.inner == inner_fold)


def _block_sizes(n: int, k: int) -> list[int]:
    # remainder units go to the earliest folds
    base, extra = divmod(n, k)
    return [base + 1 if f < extra else base for f in range(k)]


def _assign_folds(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per position: random permutation, contiguous blocks."""
    perm = rng.permutation(n)
    fold_of = np.empty(n, dtype=int)
    start = 0
    for f, size in enumerate(_block_sizes(n, k)):
        fold_of[perm[start:start + size]] = f
        start += size
    return fold_of


def make_fold_plan(n: int, k: int, j: int, seed: int) -> FoldPlan:
    """Random nested fold assignment: K outer folds, J inner folds per outer fold.

    Units are randomly permuted and split into contiguous blocks; when the
    count does not divide evenly the extra units go to the first folds.
    Deterministic for a fixed seed.
    """
    if k < 2 or j < 2:
        raise DataError("fold counts must be at least 2")
    if n < k * j:
        raise DataError(f"n={n} too small for {k}x{j} folds (an inner fold would be empty)")
    rng = np.random.default_rng(seed)
    outer = _assign_folds(n, k, rng)
    inner = np.empty(n, dtype=int)
    for f in range(k):
        members = np.flatnonzero(outer == f)
        inner[members] = _assign_folds(len(members), j, rng)
    return FoldPlan(outer=outer, inner=inner, k=k, j=j)


def make_single_level_folds(n: int, k: int, seed: int) -> np.ndarray:
    """Outer-only fold assignment with the same remainder rule."""
    if k < 2:
        raise DataError("fold count must be at least 2")
    if n < k:
        raise DataError(f"n={n} too small for {k} folds")
    rng = np.random.default_rng(seed)
    return _assign_folds(n, k, rng)


# ---------------------------------------------------------------------------
# Estimates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EffectEstimate:
    """Point estimate with orthogonal-score-based inference.

    ``scores`` holds the per-observation score values centered at ``coef``
    (mean zero); the standard error satisfies
    ``se**2 == mean(scores**2) / n``.
    """

    target: EffectTarget
    coef: float
    se: float
    p_value: float
    n: int
    scores: np.ndarray = field(repr=False)

    @staticmethod
    def from_scores(target: EffectTarget, coef: float, scores: np.ndarray) -> "EffectEstimate":
        scores = np.asarray(scores, dtype=float)
        n = scores.shape[0]
        se = math.sqrt(float(np.mean(scores**2)) / n)
        if se > 0:
            p = 2.0 * float(norm.sf(abs(coef) / se))
        else:
            p = 1.0 if coef == 0 else 0.0
        return EffectEstimate(target=target, coef=float(coef), se=se, p_value=p, n=n, scores=scores)

    def confidence_interval(self, level: float = 0.95) -> tuple[float, float]:
        zq = norm.ppf(0.5 + level / 2.0)
        return self.coef - zq * self.se, self.coef + zq * self.se

    def to_dict(self) -> dict:
        return {
            "target": self.target.label(),
            "coef": self.coef,
            "se": self.se,
            "p_value": self.p_value,
            "n": self.n,
        }

    def csv_row(self) -> list:
        return [self.target.label(), self.coef, self.se, self.p_value, self.n]


@dataclass(frozen=True)
class WeightedSample:
    """Duplicate-count description of a resampled dataset.

    ``counts[i]`` is the duplicate count s_i of unique unit i, so unit i
    appears 1 + s_i times and carries weight (1+s_i) / sum(1+s).
    """

    base: Dataset
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or len(counts) < 1:
            raise DataError("duplicate counts must be a nonempty vector")
        if np.any(counts < 0) or np.any(counts != np.floor(counts)):
            raise DataError("duplicate counts must be nonnegative integers")
        object.__setattr__(self, "counts", counts.astype(int))

    @property
    def q(self) -> int:
        return len(self.counts)

    def weights(self) -> np.ndarray:
        w = 1.0 + self.counts
        return w / w.sum()


# ---------------------------------------------------------------------------
# Overlap diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OverlapReport:
    floor: float
    min: float
    max: float
    n_below: int
    n_above: int

    @property
    def n_violations(self) -> int:
        return self.n_below + self.n_above

    def __str__(self) -> str:
        return (
            f"propensity range [{self.min:.6f}, {self.max:.6f}], "
            f"{self.n_violations} outside [{self.floor}, {1 - self.floor}] "
            f"({self.n_below} below, {self.n_above} above)"
        )


def check_overlap(propensities: np.ndarray, floor: float) -> OverlapReport:
    """Report how far estimated propensities stray toward 0 or 1.

    Diagnostic only; inputs are never modified.
    """
    p = np.asarray(propensities, dtype=float)
    if np.any(p < 0) or np.any(p > 1):
        raise DataError("propensities must lie in [0, 1]")
    return OverlapReport(
        floor=float(floor),
        min=float(p.min()),
        max=float(p.max()),
        n_below=int(np.sum(p < floor)),
        n_above=int(np.sum(p > 1 - floor)),
    )


# ---------------------------------------------------------------------------
# CSV input / output
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ColumnRoles:
    """Maps CSV header names onto data-model roles.

    ``covariates=None`` means every column other than outcome/treatment/
    moderator is a covariate. ``balance`` must name a subset of covariates.
    """

    outcome: str
    treatment: str
    moderator: str
    covariates: Optional[Sequence[str]] = None
    balance: Sequence[str] = ()


def _recode(values: np.ndarray, name: str) -> tuple[np.ndarray, tuple[float, ...]]:
    for i, val in enumerate(values):
        if val != math.floor(val):
            raise DataError(f"{name} value {val} at row {i + 1} is not an integer level")
    levels = tuple(sorted(set(values.tolist())))
    if len(levels) < 2:
        raise DataError(f"{name} has a single level")
    lookup = {lv: code for code, lv in enumerate(levels)}
    return np.array([lookup[v] for v in values], dtype=int), levels


def load_csv(path: str, roles: ColumnRoles) -> Dataset:
    """Load a UTF-8, header-row, ``.``-decimal CSV as a Dataset.

    Treatment and moderator levels are re-coded to contiguous integers in
    sorted original order; the mapping is retained on the Dataset
    (``treat_levels`` / ``mod_levels``). Every malformed cell is reported
    with its row and column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")

    col_idx = {name: i for i, name in enumerate(header)}
    for role, name in (("outcome", roles.outcome), ("treatment", roles.treatment),
                       ("moderator", roles.moderator)):
        if name not in col_idx:
            raise DataError(f"missing column '{name}' (role: {role})")
    special = {roles.outcome, roles.treatment, roles.moderator}
    if roles.covariates is None:
        cov_names = [c for c in header if c not in special]
    else:
        cov_names = list(roles.covariates)
        for name in cov_names:
            if name not in col_idx:
                raise DataError(f"missing column '{name}' (role: covariate)")
    for name in roles.balance:
        if name not in cov_names:
            raise DataError(f"balance column '{name}' is not a covariate column")

    def parse(row_i: int, col_name: str, raw: str) -> float:
        try:
            val = float(raw)
        except ValueError:
            raise DataError(
                f"non-numeric cell at row {row_i + 1}, column '{col_name}': {raw!r}"
            ) from None
        if not math.isfinite(val):
            raise DataError(f"non-finite value at row {row_i + 1}, column '{col_name}'")
        return val

    n = len(rows)
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"row {i + 1} has {len(row)} cells, expected {len(header)}")
    y = np.array([parse(i, roles.outcome, rows[i][col_idx[roles.outcome]]) for i in range(n)])
    d_raw = np.array([parse(i, roles.treatment, rows[i][col_idx[roles.treatment]]) for i in range(n)])
    z_raw = np.array([parse(i, roles.moderator, rows[i][col_idx[roles.moderator]]) for i in range(n)])
    x = np.empty((n, len(cov_names)))
    for jcol, name in enumerate(cov_names):
        src = col_idx[name]
        for i in range(n):
            x[i, jcol] = parse(i, name, rows[i][src])

    d, treat_levels = _recode(d_raw, "treatment")
    z, mod_levels = _recode(z_raw, "moderator")
    w_cols = tuple(cov_names.index(b) for b in roles.balance)
    return Dataset(y=y, d=d, z=z, x=x, w_cols=w_cols, x_names=tuple(cov_names),
                   treat_levels=treat_levels, mod_levels=mod_levels)


def save_csv(data: Dataset, path: str, extra: Optional[dict] = None) -> None:
    """Write a Dataset using the same schema load_csv reads.

    Floats are written with shortest round-trip precision so a save/load
    cycle preserves values bit-exactly. ``extra`` maps column name to a
    vector appended after the standard columns.
    """
    extra = extra or {}
    header = ["y", "d", "z", *data.x_names, *extra.keys()]
    treat_levels = data.treat_levels
    mod_levels = data.mod_levels
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(data.n):
            row = [repr(float(data.y[i])),
                   repr(float(treat_levels[data.d[i]])),
                   repr(float(mod_levels[data.z[i]]))]
            row.extend(repr(float(v)) for v in data.x[i])
            row.extend(repr(float(np.asarray(vec)[i])) for vec in extra.values())
            writer.writerow(row)
