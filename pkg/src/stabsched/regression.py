"""Boundary-aware regression of the stability index onto augmented decisions.

Two fit flavors share one convex-QP backend: the hard form constrains the
surrogate to classify the below-limit and well-above-limit regions exactly,
the smooth form replaces the region split with Gaussian objective weights and
sigmoid-gated big-M soft constraints so the optimum is differentiable in the
labels.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .network import GridModel, batch_gscr_labels, is_connected
from .qp import QpInfeasibleError, solve_qp

logger = logging.getLogger(__name__)

STRICT_MARGIN = 1e-6   # stand-in for the strict inequality on the unstable side


class InfeasibleFitError(RuntimeError):
    """The constrained regression has no feasible coefficient vector."""


class DegenerateObjectiveError(ValueError):
    """No samples fall in the boundary band, so the hard objective vanishes."""


class DataInseparableError(RuntimeError):
    """No band width up to the label range makes the hard fit feasible."""


def augment(flags, wind: float) -> np.ndarray:
    """Augmented decision [1 | flags | wind | flags * wind]."""
    flags = np.asarray(flags, dtype=float)
    return np.concatenate([[1.0], flags, [float(wind)], flags * float(wind)])


def augment_matrix(flags: np.ndarray, wind: np.ndarray) -> np.ndarray:
    flags = np.asarray(flags, dtype=float)
    wind = np.asarray(wind, dtype=float)
    ones = np.ones((len(wind), 1))
    return np.hstack([ones, flags, wind[:, None], flags * wind[:, None]])


def feature_names(source_names) -> tuple[str, ...]:
    return ("const", *[f"x_{s}" for s in source_names], "wind",
            *[f"xw_{s}" for s in source_names])


def validate_augmented(X: np.ndarray, n_sources: int):
    X = np.asarray(X, dtype=float)
    k = 2 + 2 * n_sources
    if X.ndim != 2 or X.shape[1] != k:
        raise ValueError(f"augmented decisions must have {k} columns")
    if not np.all(X[:, 0] == 1.0):
        raise ValueError("first augmented entry must be exactly 1")
    flags = X[:, 1:1 + n_sources]
    if not np.all((flags == 0.0) | (flags == 1.0)):
        raise ValueError("flag entries must be 0 or 1")
    wind = X[:, 1 + n_sources]
    if not np.array_equal(X[:, 2 + n_sources:], flags * wind[:, None]):
        raise ValueError("product entries must equal flag * wind exactly")
    return X


@dataclass(frozen=True)
class TrainingSample:
    x: np.ndarray
    g: float


@dataclass(frozen=True)
class Dataset:
    """Design matrix plus the decision structure that produced it."""

    X: np.ndarray                    # (S, k) augmented decisions
    g: np.ndarray                    # (S,) index labels
    flags: np.ndarray                # (S, n_src) commitment flags
    wind: np.ndarray                 # (S,) total wind, per-unit
    source_names: tuple[str, ...]
    skipped: tuple[str, ...] = ()

    @property
    def samples(self) -> list[TrainingSample]:
        return [TrainingSample(x=self.X[i], g=float(self.g[i])) for i in range(len(self.g))]

    @property
    def names(self) -> tuple[str, ...]:
        return feature_names(self.source_names)

    def __len__(self):
        return len(self.g)

    def with_labels(self, g: np.ndarray) -> "Dataset":
        g = np.asarray(g, dtype=float)
        if g.shape != self.g.shape:
            raise ValueError("label vector shape mismatch")
        return replace(self, g=g)


def wind_levels(n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Midpoints of n equal subintervals of [lo, hi]."""
    if n < 2:
        raise ValueError("need at least 2 wind levels")
    edges = np.linspace(lo, hi, n + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def generate_dataset(grid: GridModel, n_wind: int, policy="all",
                     wind_range=None) -> Dataset:
    """One labeled sample per (commitment combination, wind level).

    Labels are evaluated at the grid's current (nominal) reactances.
    Configurations whose committed sources and inverter buses are not
    connected are skipped with a logged reason.
    """
    n_src = len(grid.sources)
    if policy == "all":
        combos = list(itertools.product((0, 1), repeat=n_src))
    else:
        combos = [tuple(int(v) for v in c) for c in policy]
    if wind_range is None:
        wind_range = (0.0, float(len(grid.gfl_ibrs)))
    levels = wind_levels(n_wind, *wind_range)

    kept, skipped = [], []
    for combo in combos:
        if not is_connected(grid.with_commitments(combo).with_wind(levels[0])):
            reason = f"combination {combo} skipped: committed sources and GFL buses not connected"
            logger.info(reason)
            skipped.append(reason)
            continue
        kept.append(combo)
    flags = np.array([c for c in kept for _ in levels], dtype=int)
    wind = np.array([w for _ in kept for w in levels])
    labels = batch_gscr_labels(grid, flags, wind)
    return Dataset(X=augment_matrix(flags, wind), g=labels, flags=flags, wind=wind,
                   source_names=grid.source_names, skipped=tuple(skipped))


@dataclass(frozen=True)
class RegionPartition:
    """Index split: below limit / boundary band / safely above."""

    omega1: np.ndarray
    omega2: np.ndarray
    omega3: np.ndarray
    g_lim: float
    nu: float


def partition(g: np.ndarray, g_lim: float, nu: float) -> RegionPartition:
    if nu <= 0:
        raise ValueError("band width nu must be positive")
    g = np.asarray(g, dtype=float)
    idx = np.arange(len(g))
    omega1 = idx[g < g_lim]
    omega2 = idx[(g >= g_lim) & (g < g_lim + nu)]
    omega3 = idx[g >= g_lim + nu]
    return RegionPartition(omega1=omega1, omega2=omega2, omega3=omega3,
                           g_lim=g_lim, nu=nu)


def default_spatial_scale(nu: float) -> float:
    # exp(-(nu/2)^2 / (2 s^2)) = 0.5  =>  s = nu / (2 sqrt(2 ln 2))
    return nu / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class SmoothRegressionConfig:
    g_lim: float
    nu: float
    spatial_scale: float | None = None   # s; boundary-weight-0.5 rule when None
    steepness: float = 0.5               # r
    big_m: float | None = None           # 10 * max|g| when None

    def resolve(self, g) -> "SmoothRegressionConfig":
        s = self.spatial_scale if self.spatial_scale is not None else default_spatial_scale(self.nu)
        m = self.big_m if self.big_m is not None else 10.0 * float(np.max(np.abs(g)))
        return replace(self, spatial_scale=s, big_m=m)

    def to_dict(self) -> dict:
        return {"g_lim": self.g_lim, "nu": self.nu, "spatial_scale": self.spatial_scale,
                "steepness": self.steepness, "big_m": self.big_m, "kind": "smooth"}


def gaussian_weight(g, cfg: SmoothRegressionConfig):
    """Objective weight, peaking at the band center g_lim + nu/2."""
    s = cfg.spatial_scale if cfg.spatial_scale is not None else default_spatial_scale(cfg.nu)
    if s <= 0:
        raise ValueError("spatial scale must be positive")
    center = cfg.g_lim + 0.5 * cfg.nu
    return np.exp(-((np.asarray(g, dtype=float) - center) ** 2) / (2.0 * s**2))


def sigmoid_gamma(x, r: float = 0.5):
    """Region gate 1 / (1 + exp(-2 r x)); slope r/2 at the origin."""
    return expit(2.0 * r * np.asarray(x, dtype=float))


@dataclass(frozen=True)
class ConstraintLayout:
    """Row bookkeeping for a fit's inequality system.

    `family[m]` is "upper" for rows bounding the surrogate from above
    (unstable side) and "lower" for rows bounding it from below;
    `sample[m]` maps row m to its data point.
    """

    family: tuple[str, ...]
    sample: tuple[int, ...]

    def __len__(self):
        return len(self.family)


@dataclass(frozen=True)
class CoefficientFit:
    coefficients: np.ndarray
    active_set: tuple[int, ...]
    multipliers: np.ndarray
    objective: float
    layout: ConstraintLayout
    config: dict
    kkt_residual: float
    feature_mask: np.ndarray | None = None   # pruning support; None = all kept

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coefficients

    def to_dict(self) -> dict:
        return {
            "coefficients": self.coefficients.tolist(),
            "active_set": list(self.active_set),
            "multipliers": self.multipliers.tolist(),
            "objective": self.objective,
            "config": self.config,
            "kkt_residual": self.kkt_residual,
        }


def fit_from_dict(data: dict, layout: ConstraintLayout | None = None) -> CoefficientFit:
    return CoefficientFit(
        coefficients=np.array(data["coefficients"]),
        active_set=tuple(data["active_set"]),
        multipliers=np.array(data["multipliers"]),
        objective=float(data["objective"]),
        layout=layout if layout is not None else ConstraintLayout((), ()),
        config=dict(data["config"]),
        kkt_residual=float(data["kkt_residual"]),
    )


def smooth_qp_terms(X, g, cfg: SmoothRegressionConfig):
    """(H, f, A, b, weights) of the smooth fit as an inequality-form QP.

    Rows 0..S-1 gate the upper bound (unstable side), rows S..2S-1 the lower
    bound, one pair per sample.
    """
    X = np.asarray(X, dtype=float)
    g = np.asarray(g, dtype=float)
    w = gaussian_weight(g, cfg)
    H = 2.0 * (X.T * w) @ X
    f = -2.0 * X.T @ (w * g)
    gate_up = sigmoid_gamma(g - cfg.g_lim, cfg.steepness)
    gate_lo = sigmoid_gamma(cfg.g_lim + cfg.nu - g, cfg.steepness)
    A = np.vstack([X, -X])
    b = np.concatenate([cfg.g_lim + cfg.big_m * gate_up,
                        cfg.big_m * gate_lo - cfg.g_lim])
    return H, f, A, b, w


def fit_smooth(X, g, cfg: SmoothRegressionConfig) -> CoefficientFit:
    """Gaussian-weighted constrained fit; returns coefficients with KKT data."""
    cfg = cfg.resolve(g)
    H, f, A, b, w = smooth_qp_terms(X, g, cfg)
    x0 = np.zeros(X.shape[1])
    x0[0] = cfg.g_lim                       # always strictly feasible for the gated rows
    try:
        res = solve_qp(H, f, A, b, x0=x0)
    except QpInfeasibleError as exc:
        raise InfeasibleFitError(
            f"soft-constrained fit infeasible (rows {exc.certificate}); raise big_m"
        ) from exc
    layout = ConstraintLayout(family=("upper",) * len(g) + ("lower",) * len(g),
                              sample=tuple(range(len(g))) * 2)
    resid = np.asarray(g) - X @ res.x
    objective = float(np.sum(w * resid**2))
    kkt = float(np.linalg.norm(H @ res.x + f + A.T @ res.multipliers, ord=np.inf))
    return CoefficientFit(coefficients=res.x, active_set=res.active_set,
                          multipliers=res.multipliers, objective=objective,
                          layout=layout, config=cfg.to_dict(), kkt_residual=kkt)


def fit_hard(X, g, part: RegionPartition,
             strict_margin: float = STRICT_MARGIN) -> CoefficientFit:
    """Band-only least squares with exact region-classification constraints."""
    X = np.asarray(X, dtype=float)
    g = np.asarray(g, dtype=float)
    if len(part.omega2) == 0:
        raise DegenerateObjectiveError("no samples in the boundary band; enlarge nu")
    X2, g2 = X[part.omega2], g[part.omega2]
    H = 2.0 * X2.T @ X2
    f = -2.0 * X2.T @ g2
    A = np.vstack([X[part.omega1], -X[part.omega3]])
    b = np.concatenate([np.full(len(part.omega1), part.g_lim - strict_margin),
                        np.full(len(part.omega3), -part.g_lim)])
    try:
        res = solve_qp(H, f, A, b)
    except QpInfeasibleError as exc:
        raise InfeasibleFitError(
            f"hard fit infeasible at nu={part.nu} (rows {exc.certificate}); enlarge nu"
        ) from exc
    layout = ConstraintLayout(
        family=("upper",) * len(part.omega1) + ("lower",) * len(part.omega3),
        sample=tuple(int(i) for i in part.omega1) + tuple(int(i) for i in part.omega3))
    resid = g2 - X2 @ res.x
    kkt = float(np.linalg.norm(H @ res.x + f + A.T @ res.multipliers, ord=np.inf))
    config = {"g_lim": part.g_lim, "nu": part.nu, "strict_margin": strict_margin,
              "kind": "hard"}
    return CoefficientFit(coefficients=res.x, active_set=res.active_set,
                          multipliers=res.multipliers, objective=float(np.sum(resid**2)),
                          layout=layout, config=config, kkt_residual=kkt)


def choose_nu(X, g, g_lim: float, strict_margin: float = STRICT_MARGIN) -> float:
    """Smallest band width on a doubling grid for which the hard fit is feasible."""
    g = np.asarray(g, dtype=float)
    if not (g.min() < g_lim <= g.max()):
        raise ValueError("labels must span both sides of the limit")
    label_range = float(g.max() - g.min())
    nu0 = 0.01 * label_range
    grid = []
    nu = nu0
    while nu < label_range:
        grid.append(nu)
        nu *= 2.0
    grid.append(label_range)
    for nu in grid:
        part = partition(g, g_lim, nu)
        if len(part.omega2) == 0:
            continue
        try:
            fit_hard(X, g, part, strict_margin)
            return nu
        except InfeasibleFitError:
            continue
    raise DataInseparableError(
        f"hard fit infeasible even at nu = label range ({label_range:.4g})")


# ---------------------------------------------------------------------------
# Estimator-style wrappers.
# ---------------------------------------------------------------------------

class SmoothBoundaryRegression(RegressorMixin, BaseEstimator):
    """Differentiable boundary-aware linear surrogate of a stability index.

    Parameters mirror the smooth fit configuration; `prune=True` runs a second
    pass dropping coefficients at least one order of magnitude below the
    median and refitting on the survivors (dropped entries stay exactly zero).
    """

    def __init__(self, g_lim=1.0, nu=0.1, spatial_scale=None, steepness=0.5,
                 big_m=None, prune=False, prune_ratio=0.1):
        self.g_lim = g_lim
        self.nu = nu
        self.spatial_scale = spatial_scale
        self.steepness = steepness
        self.big_m = big_m
        self.prune = prune
        self.prune_ratio = prune_ratio

    def _config(self):
        return SmoothRegressionConfig(g_lim=self.g_lim, nu=self.nu,
                                      spatial_scale=self.spatial_scale,
                                      steepness=self.steepness, big_m=self.big_m)

    def fit(self, X, g):
        X = np.asarray(X, dtype=float)
        g = np.asarray(g, dtype=float).ravel()
        if X.shape[0] != len(g):
            raise ValueError("X and g disagree on the sample count")
        if not np.all(np.isfinite(g)):
            raise ValueError("labels must be finite")
        fit = fit_smooth(X, g, self._config())
        if self.prune:
            fit = prune_refit(X, g, self._config(), fit, self.prune_ratio)
        self.fit_ = fit
        self.coef_ = fit.coefficients
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        if not hasattr(self, "coef_"):
            raise NotFittedError("call fit before predict")
        X = np.asarray(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError("feature count changed between fit and predict")
        return X @ self.coef_

    def stable_mask(self, X):
        """Surrogate classification against the fitted limit."""
        return self.predict(X) >= self.g_lim


class HardBoundaryRegression(RegressorMixin, BaseEstimator):
    """Region-partitioned surrogate with exact conservative classification."""

    def __init__(self, g_lim=1.0, nu=0.1, strict_margin=STRICT_MARGIN):
        self.g_lim = g_lim
        self.nu = nu
        self.strict_margin = strict_margin

    def fit(self, X, g):
        X = np.asarray(X, dtype=float)
        g = np.asarray(g, dtype=float).ravel()
        part = partition(g, self.g_lim, self.nu)
        self.fit_ = fit_hard(X, g, part, self.strict_margin)
        self.coef_ = self.fit_.coefficients
        self.partition_ = part
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        if not hasattr(self, "coef_"):
            raise NotFittedError("call fit before predict")
        return np.asarray(X, dtype=float) @ self.coef_


def prune_refit(X, g, cfg: SmoothRegressionConfig, fit: CoefficientFit,
                ratio: float) -> CoefficientFit:
    """Drop insignificant coefficients and refit on the surviving columns."""
    coef = fit.coefficients
    floor = ratio * float(np.median(np.abs(coef[np.abs(coef) > 0])))
    mask = np.abs(coef) >= floor
    if mask.all():
        return fit
    sub = fit_smooth(np.asarray(X, dtype=float)[:, mask], g, cfg)
    full = np.zeros(len(coef))
    full[mask] = sub.coefficients
    return replace(sub, coefficients=full, feature_mask=mask)


# ---------------------------------------------------------------------------
# Persistence.
# ---------------------------------------------------------------------------

def dataset_to_csv(dataset: Dataset, path):
    names = dataset.names
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join([*names, "g"]) + "\n")
        for i in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.X[i]] + [repr(float(dataset.g[i]))]
            fh.write(",".join(row) + "\n")


def dataset_from_csv(path, source_names) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [list(map(float, line.strip().split(","))) for line in fh if line.strip()]
    expected = list(feature_names(source_names)) + ["g"]
    if header != expected:
        raise ValueError(f"dataset columns {header} do not match {expected}")
    data = np.array(rows)
    X, g = data[:, :-1], data[:, -1]
    n_src = len(source_names)
    flags = X[:, 1:1 + n_src].astype(int)
    wind = X[:, 1 + n_src]
    validate_augmented(X, n_src)
    return Dataset(X=X, g=g, flags=flags, wind=wind, source_names=tuple(source_names))


def save_fit(fit: CoefficientFit, path, extra: dict | None = None):
    payload = fit.to_dict()
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
