"""Automatic debiasing with a jointly trained regression/representer network.

A small feedforward net maps level-free features through a shared ELU layer
into two regression heads (one per contrast level, each with an ELU hidden
layer and linear output) and two linear representer outputs. Training
minimizes

    REG + lambda1 * RR + lambda2 * TMLE

where REG is the squared error of the observed-level regression head, RR is
the representer objective  E[a(obs)^2 - 2*(a(1,.) - a(0,.))]  whose
population minimizer is the signed inverse-propensity representer of the
level-contrast functional, and TMLE adds a scalar epsilon-corrected
residual term. Gradients are computed analytically (plain backprop in
numpy); optimization is full-batch Adam with early stopping on a
validation split.

The same network is used twice for the balanced group contrast: once on
(moderator, covariates) with the treatment as the contrast level, then on
the balancing variables with the moderator as the contrast level and the
first-stage pseudo-outcome as the regression target.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

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
)


class TrainingDivergence(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class RieszNetConfig:
    """Architecture and training hyperparameters for one estimation stage."""

    common_units: int = 200
    head_units: int = 100
    learning_rate: float = 1e-4
    patience: int = 10
    min_delta: float = 1e-4
    max_epochs: int = 600
    lambda1: float = 0.1
    lambda2: float = 1.0
    folds: int = 2
    seed: int = 0
    validation_fraction: float = 0.2

    def __post_init__(self):
        positive = (self.common_units, self.head_units, self.learning_rate,
                    self.patience, self.min_delta, self.max_epochs,
                    self.lambda1, self.lambda2, self.folds)
        if any(p <= 0 for p in positive):
            raise DataError("network hyperparameters must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise DataError("validation_fraction must lie in (0, 1)")


def stage1_config(**overrides) -> RieszNetConfig:
    """Default first-stage configuration."""
    return RieszNetConfig(**overrides)


def stage2_config(**overrides) -> RieszNetConfig:
    """Default second-stage configuration (larger net, longer patience)."""
    base = dict(common_units=600, head_units=300, patience=70, max_epochs=1800)
    base.update(overrides)
    return RieszNetConfig(**base)


def _elu(x: np.ndarray) -> np.ndarray:
    # clip the negative branch before exponentiating: np.where evaluates both
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


class RieszNet:
    """Shared-representation network with two regression heads, two linear
    representer outputs and a free scalar epsilon.

    Parameters live in one flat float64 vector; ``blocks`` names the views
    (shared layer, per-level head layers, per-level representer maps,
    epsilon) in a fixed order so gradients and serialization are stable.
    """

    def __init__(self, n_features: int, cfg: RieszNetConfig, seed: Optional[int] = None):
        if n_features < 1:
            raise DataError("network needs at least one input feature")
        self.n_features = n_features
        self.cfg = cfg
        c, h = cfg.common_units, cfg.head_units
        self.blocks: list[tuple[str, tuple[int, ...]]] = [("W0", (n_features, c)), ("b0", (c,))]
        for lev in (0, 1):
            self.blocks += [(f"W1_{lev}", (c, h)), (f"b1_{lev}", (h,)),
                            (f"W2_{lev}", (h,)), (f"b2_{lev}", ())]
        for lev in (0, 1):
            self.blocks += [(f"Wr_{lev}", (c,)), (f"br_{lev}", ())]
        self.blocks += [("eps", ())]
        self.size = sum(int(np.prod(shape)) for _, shape in self.blocks)
        self.params = np.zeros(self.size)
        self._offsets = {}
        pos = 0
        for name, shape in self.blocks:
            width = int(np.prod(shape))
            self._offsets[name] = (pos, shape)
            pos += width
        self._init_params(cfg.seed if seed is None else seed)

    def _init_params(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        fan_in_of = {"W0": self.n_features, "b0": self.n_features}
        for lev in (0, 1):
            fan_in_of[f"W1_{lev}"] = fan_in_of[f"b1_{lev}"] = self.cfg.common_units
            fan_in_of[f"W2_{lev}"] = fan_in_of[f"b2_{lev}"] = self.cfg.head_units
            fan_in_of[f"Wr_{lev}"] = fan_in_of[f"br_{lev}"] = self.cfg.common_units
        for name, shape in self.blocks:
            if name == "eps":
                continue  # epsilon starts at zero
            bound = 1.0 / math.sqrt(fan_in_of[name])
            self.block(name)[...] = rng.uniform(-bound, bound, size=shape)

    def block(self, name: str) -> np.ndarray:
        pos, shape = self._offsets[name]
        width = int(np.prod(shape))
        return self.params[pos:pos + width].reshape(shape)

    def copy(self) -> "RieszNet":
        out = RieszNet.__new__(RieszNet)
        out.n_features = self.n_features
        out.cfg = self.cfg
        out.blocks = self.blocks
        out.size = self.size
        out._offsets = self._offsets
        out.params = self.params.copy()
        return out

    # -- forward ------------------------------------------------------------

    def _representation(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a0 = features @ self.block("W0") + self.block("b0")
        return a0, _elu(a0)

    def _head(self, rep: np.ndarray, level: int) -> tuple[np.ndarray, np.ndarray]:
        a1 = rep @ self.block(f"W1_{level}") + self.block(f"b1_{level}")
        hidden = _elu(a1)
        pred = hidden @ self.block(f"W2_{level}") + self.block(f"b2_{level}")
        return a1, pred

    def _riesz(self, rep: np.ndarray, level: int) -> np.ndarray:
        return rep @ self.block(f"Wr_{level}") + self.block(f"br_{level}")

    def outputs(self, features: np.ndarray) -> dict[str, np.ndarray]:
        """All four outputs: regression and representer at both levels."""
        features = self._check(features)
        _, rep = self._representation(features)
        out = {}
        for lev in (0, 1):
            _, out[f"mu{lev}"] = self._head(rep, lev)
            out[f"alpha{lev}"] = self._riesz(rep, lev)
        return out

    def _check(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.ndim != 2 or features.shape[1] != self.n_features:
            raise DataError(
                f"network expects {self.n_features} features, got shape {features.shape}")
        return features

    # -- serialization --------------------------------------------------------

    def to_json(self) -> str:
        layers = [self.n_features, self.cfg.common_units, self.cfg.head_units]
        return json.dumps({"layers": layers, "params": self.params.tolist()})

    @staticmethod
    def from_json(text: str, cfg: RieszNetConfig) -> "RieszNet":
        payload = json.loads(text)
        n_features, common, head = payload["layers"]
        if (common, head) != (cfg.common_units, cfg.head_units):
            raise DataError("layer sizes in JSON do not match the configuration")
        net = RieszNet(n_features, cfg)
        params = np.asarray(payload["params"], dtype=float)
        if params.shape != net.params.shape:
            raise DataError("parameter count mismatch")
        net.params = params
        return net


def forward(net: RieszNet, features: np.ndarray, at_level: int) -> tuple[np.ndarray, np.ndarray]:
    """Regression-head prediction and representer value at a hypothetical level."""
    if at_level not in (0, 1):
        raise DataError("at_level must be 0 or 1")
    out = net.outputs(features)
    return out[f"mu{at_level}"], out[f"alpha{at_level}"]


# ---------------------------------------------------------------------------
# Loss and gradient
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossParts:
    total: float
    reg: float
    rr: float
    tmle: float


def loss(net: RieszNet, features: np.ndarray, y: np.ndarray,
         obs_level: np.ndarray) -> LossParts:
    """Decomposed training objective on a batch.

    ``obs_level`` holds 0/1 per row selecting which head/representer output
    is the observed one.
    """
    parts, _ = _loss_impl(net, features, y, obs_level, want_grad=False)
    return parts


def loss_gradient(net: RieszNet, features: np.ndarray, y: np.ndarray,
                  obs_level: np.ndarray) -> tuple[LossParts, np.ndarray]:
    """Loss plus the analytic gradient of the total w.r.t. every parameter."""
    return _loss_impl(net, features, y, obs_level, want_grad=True)


def _loss_impl(net: RieszNet, features, y, obs_level, want_grad: bool):
    features = net._check(features)
    y = np.asarray(y, dtype=float)
    obs = np.asarray(obs_level).astype(int)
    n = features.shape[0]
    if n == 0:
        raise DataError("empty batch")
    if y.shape[0] != n or obs.shape[0] != n:
        raise DataError("batch arrays must share one length")
    if np.any((obs != 0) & (obs != 1)):
        raise DataError("obs_level must be coded 0/1")
    lam1, lam2 = net.cfg.lambda1, net.cfg.lambda2
    eps = float(net.block("eps"))

    a0 = features @ net.block("W0") + net.block("b0")
    rep = _elu(a0)
    a1 = {}
    hidden = {}
    mu = {}
    alpha = {}
    for lev in (0, 1):
        a1[lev] = rep @ net.block(f"W1_{lev}") + net.block(f"b1_{lev}")
        hidden[lev] = _elu(a1[lev])
        mu[lev] = hidden[lev] @ net.block(f"W2_{lev}") + net.block(f"b2_{lev}")
        alpha[lev] = rep @ net.block(f"Wr_{lev}") + net.block(f"br_{lev}")

    is1 = obs == 1
    mu_obs = np.where(is1, mu[1], mu[0])
    alpha_obs = np.where(is1, alpha[1], alpha[0])
    resid = y - mu_obs
    resid_tmle = resid - eps * alpha_obs
    contrast = alpha[1] - alpha[0]

    reg = float(np.mean(resid**2))
    rr = float(np.mean(alpha_obs**2 - 2.0 * contrast))
    tmle = float(np.mean(resid_tmle**2))
    total = reg + lam1 * rr + lam2 * tmle
    parts = LossParts(total=total, reg=reg, rr=rr, tmle=tmle)
    if not want_grad:
        return parts, None

    grad = np.zeros_like(net.params)

    def gblock(name):
        pos, shape = net._offsets[name]
        width = int(np.prod(shape))
        return grad[pos:pos + width].reshape(shape)

    d_mu_obs = (-2.0 * resid - lam2 * 2.0 * resid_tmle) / n
    d_alpha_obs = (lam1 * 2.0 * alpha_obs - lam2 * 2.0 * eps * resid_tmle) / n
    d_eps = float(np.sum(-2.0 * alpha_obs * resid_tmle) * lam2 / n)
    gblock("eps")[...] = d_eps

    d_rep = np.zeros_like(rep)
    for lev in (0, 1):
        sel = is1 if lev == 1 else ~is1
        g_mu = np.where(sel, d_mu_obs, 0.0)
        # representer gradient: observed-square part plus the contrast part
        g_alpha = np.where(sel, d_alpha_obs, 0.0)
        g_alpha = g_alpha + (-2.0 if lev == 1 else 2.0) * lam1 / n

        gblock(f"W2_{lev}")[...] = hidden[lev].T @ g_mu
        gblock(f"b2_{lev}")[...] = g_mu.sum()
        d_hidden = g_mu[:, None] * net.block(f"W2_{lev}")[None, :]
        d_a1 = d_hidden * _elu_grad(a1[lev])
        gblock(f"W1_{lev}")[...] = rep.T @ d_a1
        gblock(f"b1_{lev}")[...] = d_a1.sum(axis=0)
        d_rep += d_a1 @ net.block(f"W1_{lev}").T

        gblock(f"Wr_{lev}")[...] = rep.T @ g_alpha
        gblock(f"br_{lev}")[...] = g_alpha.sum()
        d_rep += g_alpha[:, None] * net.block(f"Wr_{lev}")[None, :]

    d_a0 = d_rep * _elu_grad(a0)
    gblock("W0")[...] = features.T @ d_a0
    gblock("b0")[...] = d_a0.sum(axis=0)
    return parts, grad


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainHistory:
    train_total: list[float] = field(default_factory=list)
    val_total: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf


def train(net: RieszNet, features: np.ndarray, y: np.ndarray,
          obs_level: np.ndarray, seed: Optional[int] = None) -> tuple[RieszNet, TrainHistory]:
    """Full-batch Adam with validation-based early stopping.

    A fixed fraction of the rows is held out for validation; training stops
    once the validation total loss has not improved by at least ``min_delta``
    for ``patience`` consecutive epochs, and the parameters at the best
    validation loss seen are returned.
    """
    cfg = net.cfg
    features = net._check(features)
    y = np.asarray(y, dtype=float)
    obs = np.asarray(obs_level).astype(int)
    n = features.shape[0]
    if n < 10:
        raise DataError("need at least 10 rows to train")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.validation_fraction * n)))
    val_idx = perm[:n_val]
    tr_idx = perm[n_val:]
    x_tr, y_tr, o_tr = features[tr_idx], y[tr_idx], obs[tr_idx]
    x_val, y_val, o_val = features[val_idx], y[val_idx], obs[val_idx]

    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(net.params)
    v = np.zeros_like(net.params)
    history = TrainHistory()
    best_params = net.params.copy()
    best_for_patience = math.inf
    wait = 0
    for epoch in range(cfg.max_epochs):
        parts, grad = loss_gradient(net, x_tr, y_tr, o_tr)
        if not math.isfinite(parts.total):
            raise TrainingDivergence(
                f"non-finite training loss at epoch {epoch}: {parts}")
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad**2
        m_hat = m / (1 - beta1**(epoch + 1))
        v_hat = v / (1 - beta2**(epoch + 1))
        net.params -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + adam_eps)

        val_parts = loss(net, x_val, y_val, o_val)
        if not math.isfinite(val_parts.total):
            raise TrainingDivergence(
                f"non-finite validation loss at epoch {epoch}")
        history.train_total.append(parts.total)
        history.val_total.append(val_parts.total)
        if val_parts.total < history.best_val:
            history.best_val = val_parts.total
            history.best_epoch = epoch
            best_params = net.params.copy()
        if val_parts.total < best_for_patience - cfg.min_delta:
            best_for_patience = val_parts.total
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    best = net.copy()
    best.params = best_params
    return best, history


# ---------------------------------------------------------------------------
# Balanced group contrast estimator
# ---------------------------------------------------------------------------

def estimate_auto_dml_delta_bgate(data: Dataset, target: EffectTarget,
                                  stage1: Optional[RieszNetConfig] = None,
                                  stage2: Optional[RieszNetConfig] = None,
                                  k: int = 2, j: int = 2, seed: int = 0,
                                  plan: Optional[FoldPlan] = None) -> EffectEstimate:
    """Balanced group contrast via learned representers in both stages.

    Stage 1 trains one net per outer training fold on (moderator,
    covariates) and builds the pseudo-outcome on the held-out fold; stage 2
    trains nets on the balancing variables within each outer fold's inner
    training folds, with the moderator as the contrast level and the
    pseudo-outcome as the regression target. Aggregation and standard
    errors mirror the cross-fitted DML estimator.
    """
    if target.kind is not EffectKind.DELTA_BGATE:
        raise DataError("target kind must be DELTA_BGATE")
    target.validate_against(data)
    stage1 = stage1 or stage1_config()
    stage2 = stage2 or stage2_config()
    l, m = target.treat_contrast
    u, v = target.group_contrast
    if np.any((data.z != u) & (data.z != v)):
        raise DataError("every unit must belong to one of the contrast groups")
    plan = plan or make_fold_plan(data.n, k, j, seed)
    seeds = np.random.default_rng(seed)

    zx = np.column_stack([data.z, data.x])
    w_mat = data.w
    if w_mat.shape[1] == 0:
        raise DataError("balancing variables required (designate w_cols)")
    delta = np.empty(data.n)
    phi = np.empty(data.n)

    for kf in range(plan.k):
        ev = plan.outer_mask(kf)
        tr = ~ev
        fit_mask = tr & ((data.d == l) | (data.d == m))
        if not np.any(fit_mask & (data.d == l)) or not np.any(fit_mask & (data.d == m)):
            raise EstimationError(
                f"treatment contrast level missing in outer training fold {kf}")
        net1 = RieszNet(zx.shape[1], stage1, seed=int(seeds.integers(2**31)))
        net1, _ = train(net1, zx[fit_mask], data.y[fit_mask],
                        (data.d[fit_mask] == l).astype(int),
                        seed=int(seeds.integers(2**31)))
        out = net1.outputs(zx[ev])
        mu_l, mu_m = out["mu1"], out["mu0"]
        d_ev = data.d[ev]
        alpha_obs = np.where(d_ev == l, out["alpha1"],
                             np.where(d_ev == m, out["alpha0"], 0.0))
        mu_obs = np.where(d_ev == l, mu_l, mu_m)
        delta[ev] = mu_l - mu_m + alpha_obs * (data.y[ev] - mu_obs)

        for jf in range(plan.j):
            iev = plan.inner_mask(kf, jf)
            itr = plan.outer_mask(kf) & ~iev
            for grp in (u, v):
                if not np.any(data.z[itr] == grp) or not np.any(data.z[iev] == grp):
                    raise EstimationError(
                        f"moderator level {grp} absent in inner fold (k={kf}, j={jf})")
            net2 = RieszNet(w_mat.shape[1], stage2, seed=int(seeds.integers(2**31)))
            net2, _ = train(net2, w_mat[itr], delta[itr],
                            (data.z[itr] == u).astype(int),
                            seed=int(seeds.integers(2**31)))
            out2 = net2.outputs(w_mat[iev])
            g_u, g_v = out2["mu1"], out2["mu0"]
            z_ev = data.z[iev]
            alpha_z = np.where(z_ev == u, out2["alpha1"], out2["alpha0"])
            g_obs = np.where(z_ev == u, g_u, g_v)
            phi[iev] = g_u - g_v + alpha_z * (delta[iev] - g_obs)

    coef = float(phi.mean())
    return EffectEstimate.from_scores(target, coef, phi - coef)


class EstimationError(RuntimeError):
    """Estimation failure (kept import-free of the forest estimator module)."""
