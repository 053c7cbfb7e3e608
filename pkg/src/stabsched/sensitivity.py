"""Analytic Jacobian of the fitted coefficients with respect to uncertain
reactances, and moment propagation through it.

The chain has two links: eigenvalue perturbation gives d(index)/d(reactance)
per sample, and perturbation of the regression KKT system gives
d(coefficients)/d(label) per sample. Moments of the reactances then propagate
to coefficient moments by the first-order covariance rule with an optional
second-order mean correction.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .network import (
    GFL_POWER_FLOOR,
    GridModel,
    build_admittance,
    d_Ydd_dXg,
    evaluate_gscr,
    gscr_index,
    kron_reduce,
)
from .pipeline import CoefficientMap
from .regression import CoefficientFit, gaussian_weight, sigmoid_gamma, SmoothRegressionConfig

logger = logging.getLogger(__name__)

EIG_GAP_FLOOR = 1e-8
STRICT_COMPLEMENTARITY = 1e-8


@dataclass(frozen=True)
class UncertainParameterSpec:
    """Independent uncertain source reactances described by mean and variance."""

    names: tuple[str, ...]
    mean: np.ndarray
    variance: np.ndarray
    covariance: np.ndarray | None = None   # optional full override

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "variance", np.asarray(self.variance, dtype=float))
        if np.any(self.variance < 0):
            raise ValueError("variances must be nonnegative")
        if len(self.names) != len(self.mean) or len(self.mean) != len(self.variance):
            raise ValueError("names, mean and variance must have equal length")
        if self.covariance is not None:
            cov = np.asarray(self.covariance, dtype=float)
            if cov.shape != (len(self.mean),) * 2:
                raise ValueError("covariance shape mismatch")
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError("covariance must be symmetric")
            object.__setattr__(self, "covariance", cov)

    @classmethod
    def from_cv(cls, grid: GridModel, cv: float, names=None) -> "UncertainParameterSpec":
        all_names = grid.source_names
        if names is None:
            names = all_names
        react = grid.source_reactances()
        mean = np.array([react[all_names.index(n)] for n in names])
        return cls(names=tuple(names), mean=mean, variance=(cv * mean) ** 2)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def cov_matrix(self) -> np.ndarray:
        return self.covariance if self.covariance is not None else np.diag(self.variance)


@dataclass(frozen=True)
class CoefficientJacobian:
    dK_dg: np.ndarray                 # (k, |Omega|)
    dlambda_dg: np.ndarray            # (|active|, |Omega|)
    active_rows: tuple[int, ...]
    fallback_columns: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MomentEstimate:
    mu: np.ndarray
    sigma: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "meta": self.meta}


def moments_from_dict(data: dict) -> MomentEstimate:
    return MomentEstimate(mu=np.array(data["mu"]), sigma=np.array(data["sigma"]),
                          meta=dict(data.get("meta", {})))


# ---------------------------------------------------------------------------
# Index sensitivity: eigenvalue perturbation through the Kron reduction.
# ---------------------------------------------------------------------------

def dg_dp(grid: GridModel, source_index: int) -> float:
    """d(index)/d(reactance) for one committed source on a passive bus.

    Falls back to a central finite difference when the smallest eigenvalue is
    nearly degenerate.
    """
    src = grid.sources[source_index]
    if not src.committed:
        return 0.0
    adm = build_admittance(grid)
    reduced = kron_reduce(adm)
    units = [u for u in grid.gfl_ibrs if u.power > GFL_POWER_FLOOR]
    ev = gscr_index(reduced, [(u.voltage, u.power) for u in units])

    vals = np.sort(np.linalg.eigvals(ev.scaled_matrix).real)
    if len(vals) > 1 and vals[1] - vals[0] < EIG_GAP_FLOOR:
        warnings.warn("near-degenerate smallest eigenvalue; using finite difference")
        return _dg_dp_fd(grid, source_index)

    deriv = d_Ydd_dXg(grid, source_index)
    y = adm.matrix
    ret, pas = list(adm.retained), list(adm.passive)
    y_rp = y[np.ix_(ret, pas)]
    y_pp = y[np.ix_(pas, pas)]
    scale = np.array([u.voltage**2 / u.power for u in units])
    # Differentiating the Schur complement Y_rr - Y_rp Y_pp^-1 Y_pr gives
    # dY'_red/dX = +diag(V^2/P) Y_rp Y_pp^-1 (dY_pp) Y_pp^-1 Y_pr, rank one
    # here since dY_pp has a single diagonal entry.
    left = scipy.linalg.solve(y_pp.T, y_rp.T).T[:, deriv.index]     # Y_rp Y_pp^-1 e_i
    right = scipy.linalg.solve(y_pp, y[np.ix_(pas, ret)])[deriv.index, :]
    d_scaled = deriv.value * np.outer(scale * left, right)
    return float(ev.left @ d_scaled @ ev.right)


def _dg_dp_fd(grid: GridModel, source_index: int, rel_step: float = 1e-6) -> float:
    react = grid.source_reactances()
    h = rel_step * react[source_index]
    up, dn = react.copy(), react.copy()
    up[source_index] += h
    dn[source_index] -= h
    g_up = evaluate_gscr(grid.with_reactances(up))
    g_dn = evaluate_gscr(grid.with_reactances(dn))
    return (g_up - g_dn) / (2.0 * h)


def index_sensitivity(cmap: CoefficientMap, p=None) -> np.ndarray:
    """Per-sample d(index)/d(reactance) matrix, shape (|Omega|, n_params)."""
    react = cmap.reactances(p) if p is not None else cmap.grid.source_reactances()
    grid = cmap.grid.with_reactances(react)
    out = np.zeros((len(cmap.wind), cmap.n_params))
    combos, inverse = np.unique(cmap.flags, axis=0, return_inverse=True)
    for c, combo in enumerate(combos):
        rows = np.flatnonzero(inverse == c)
        for j, src_idx in enumerate(cmap.param_index):
            if not combo[src_idx]:
                continue
            for i in rows:
                sample_grid = grid.with_commitments(combo).with_wind(cmap.wind[i])
                out[i, j] = dg_dp(sample_grid, src_idx)
    return out


# ---------------------------------------------------------------------------
# KKT perturbation of the smooth regression optimum.
# ---------------------------------------------------------------------------

class ActiveSetDegeneracyError(RuntimeError):
    """Active constraint gradients are rank deficient or weakly active."""


@dataclass(frozen=True)
class KktPerturbation:
    A: np.ndarray                     # (k, k) Hessian of the Lagrangian
    B: np.ndarray                     # (k, |active|) active-constraint gradients d beta/d K
    c: np.ndarray                     # (k, |Omega|) cross second derivatives of the objective
    d: np.ndarray                     # (|active|, |Omega|) d beta/d g, nonzero at own sample
    active_rows: tuple[int, ...]


def assemble_kkt_perturbation(fit: CoefficientFit, X, g,
                              cfg: SmoothRegressionConfig) -> KktPerturbation:
    """Blocks of the perturbed stationarity/activity system for the smooth fit.

    The constraints are linear in the coefficients, so the Lagrangian Hessian
    reduces to the weighted normal matrix and the curvature of the constraint
    rows vanishes.
    """
    X = np.asarray(X, dtype=float)
    g = np.asarray(g, dtype=float)
    resid = X @ fit.coefficients - g            # K^T X - g (zeros at pruned columns)
    if fit.feature_mask is not None:
        X = X[:, fit.feature_mask]              # the fit's KKT lives in the kept space
    cfg = cfg.resolve(g)
    s = cfg.spatial_scale
    r = cfg.steepness
    center = cfg.g_lim + 0.5 * cfg.nu
    w = gaussian_weight(g, cfg)

    active = tuple(m for m in fit.active_set
                   if fit.multipliers[m] > STRICT_COMPLEMENTARITY)
    if len(active) < len(fit.active_set):
        weak = set(fit.active_set) - set(active)
        raise ActiveSetDegeneracyError(
            f"weakly active rows {sorted(weak)} violate strict complementarity")

    A = 2.0 * (X.T * w) @ X
    # d2C / dK_k dg_w, re-derived from the weighted objective (the printed form
    # misses a factor of 2 on the curvature term; finite differences confirm).
    c = -X.T * (w * (2.0 + 2.0 * resid * (g - center) / s**2))

    cols, d_rows = [], []
    for m in active:
        fam = fit.layout.family[m]
        idx = fit.layout.sample[m]
        x_row = X[idx]
        d_m = np.zeros(len(g))
        if fam == "upper":
            # beta = g_lim + M*gamma(g - g_lim) - K^T X >= 0
            cols.append(-x_row)
            d_m[idx] = cfg.big_m * _sigmoid_slope(g[idx] - cfg.g_lim, r)
        else:
            # beta = K^T X + M*gamma(g_lim + nu - g) - g_lim >= 0
            cols.append(x_row)
            d_m[idx] = -cfg.big_m * _sigmoid_slope(cfg.g_lim + cfg.nu - g[idx], r)
        d_rows.append(d_m)
    B = np.array(cols).T if cols else np.zeros((X.shape[1], 0))
    d = np.array(d_rows) if d_rows else np.zeros((0, len(g)))

    if B.shape[1] and np.linalg.matrix_rank(B, tol=1e-10) < B.shape[1]:
        raise ActiveSetDegeneracyError("active constraint gradients are rank deficient")
    return KktPerturbation(A=A, B=B, c=c, d=d, active_rows=active)


def _sigmoid_slope(x, r):
    gam = sigmoid_gamma(x, r)
    return 2.0 * r * gam * (1.0 - gam)


def dK_dg(fit: CoefficientFit, X, g, cfg: SmoothRegressionConfig,
          cmap: CoefficientMap | None = None) -> CoefficientJacobian:
    """Sensitivity of the fitted coefficients to every label.

    Solves, per sample, the symmetric system
        [ A  -B ] [dK/dg    ]   [-c]
        [-B'  0 ] [dlam/dg  ] = [ d ]
    enforcing stationarity and persistence of the active set. A singular
    system (or degenerate active set) falls back to retrain differences,
    which requires `cmap` for the refits.
    """
    X = np.asarray(X, dtype=float)
    g = np.asarray(g, dtype=float)
    try:
        blocks = assemble_kkt_perturbation(fit, X, g, cfg)
        k, na = blocks.A.shape[0], blocks.B.shape[1]
        kkt = np.block([[blocks.A, -blocks.B],
                        [-blocks.B.T, np.zeros((na, na))]])
        rhs = np.vstack([-blocks.c, blocks.d])
        sol = np.linalg.solve(kkt, rhs)
        dk = sol[:k]
        if fit.feature_mask is not None:        # embed pruned coordinates as zeros
            full = np.zeros((X.shape[1], len(g)))
            full[fit.feature_mask] = dk
            dk = full
        return CoefficientJacobian(dK_dg=dk, dlambda_dg=sol[k:],
                                   active_rows=blocks.active_rows)
    except (ActiveSetDegeneracyError, np.linalg.LinAlgError) as exc:
        logger.warning("KKT perturbation unavailable (%s); retrain fallback", exc)
        if cmap is None:
            raise
        jac = retrain_dK_dg(cmap, g)
        return CoefficientJacobian(dK_dg=jac, dlambda_dg=np.zeros((0, len(g))),
                                   active_rows=(), fallback_columns=tuple(range(len(g))),
                                   meta={"fallback": str(exc)})


def retrain_dK_dg(cmap: CoefficientMap, g, h: float = 1e-5,
                  columns=None) -> np.ndarray:
    """Central retrain difference of the fit with respect to each label."""
    g = np.asarray(g, dtype=float)
    cols = range(len(g)) if columns is None else columns
    out = np.zeros((cmap.X.shape[1], len(g)))
    for i in cols:
        up, dn = g.copy(), g.copy()
        up[i] += h
        dn[i] -= h
        out[:, i] = (cmap.fit_labels(up).coefficients
                     - cmap.fit_labels(dn).coefficients) / (2.0 * h)
    return out


def grad_f(jacobian: CoefficientJacobian | np.ndarray, index_sens: np.ndarray) -> np.ndarray:
    """Chain rule: (k x |Omega|) label sensitivity times (|Omega| x p) index sensitivity."""
    dkdg = jacobian.dK_dg if isinstance(jacobian, CoefficientJacobian) else np.asarray(jacobian)
    return dkdg @ np.asarray(index_sens, dtype=float)


# ---------------------------------------------------------------------------
# Second derivatives and moment propagation.
# ---------------------------------------------------------------------------

def hessian_diag_f(cmap: CoefficientMap, mu_p=None, rel_step: float = 1e-3):
    """Diagonal second derivatives of the end-to-end map by central differences.

    An active-set flip among the three stencil evaluations downgrades the
    entry to a one-sided stencil and flags it.
    """
    mu_p = cmap.nominal if mu_p is None else np.asarray(mu_p, dtype=float)
    base_fit = cmap.fit(mu_p)
    f0 = base_fit.coefficients
    base_active = base_fit.active_set
    k = len(f0)
    out = np.zeros((k, cmap.n_params))
    flagged = []
    for j in range(cmap.n_params):
        h = rel_step * mu_p[j]
        up_p, dn_p = mu_p.copy(), mu_p.copy()
        up_p[j] += h
        dn_p[j] -= h
        fit_up, fit_dn = cmap.fit(up_p), cmap.fit(dn_p)
        up_ok = fit_up.active_set == base_active
        dn_ok = fit_dn.active_set == base_active
        if up_ok and dn_ok:
            out[:, j] = (fit_up.coefficients - 2.0 * f0 + fit_dn.coefficients) / h**2
            continue
        flagged.append(cmap.param_names[j])
        if up_ok:
            far = cmap.coefficients(_shift(mu_p, j, 2.0 * h))
            out[:, j] = (f0 - 2.0 * fit_up.coefficients + far) / h**2
        elif dn_ok:
            far = cmap.coefficients(_shift(mu_p, j, -2.0 * h))
            out[:, j] = (f0 - 2.0 * fit_dn.coefficients + far) / h**2
        else:
            out[:, j] = (fit_up.coefficients - 2.0 * f0 + fit_dn.coefficients) / h**2
    return out, tuple(flagged)


def _shift(p, j, delta):
    q = p.copy()
    q[j] += delta
    return q


def propagate_moments(grad: np.ndarray, hessian_diag: np.ndarray,
                      spec: UncertainParameterSpec, f_mu: np.ndarray,
                      mean_correction: str = "half") -> MomentEstimate:
    """Coefficient moments from parameter moments.

    mean: f(mu) + 1/2 * sum_p d2f/dp^2 * var_p   (the "literal" mode drops the
    1/2, reproducing the printed propagation rule verbatim for comparison);
    covariance: grad * Sigma_p * grad^T, assembled as an outer square so it is
    positive semidefinite by construction.
    """
    grad = np.asarray(grad, dtype=float)
    f_mu = np.asarray(f_mu, dtype=float)
    if mean_correction not in ("half", "literal", "none"):
        raise ValueError("mean_correction must be 'half', 'literal' or 'none'")
    factor = {"half": 0.5, "literal": 1.0, "none": 0.0}[mean_correction]
    mu = f_mu + factor * np.asarray(hessian_diag) @ spec.variance
    if spec.covariance is None:
        w = grad * spec.sigma[None, :]
        sigma = w @ w.T
    else:
        vals, vecs = np.linalg.eigh(spec.cov_matrix())
        root = vecs * np.sqrt(np.clip(vals, 0.0, None))[None, :]
        w = grad @ root
        sigma = w @ w.T
    sigma = 0.5 * (sigma + sigma.T)
    return MomentEstimate(mu=mu, sigma=sigma,
                          meta={"mean_correction": mean_correction})


def analytic_moments(cmap: CoefficientMap, spec: UncertainParameterSpec,
                     mean_correction: str = "half",
                     hessian_rel_step: float = 1e-3) -> MomentEstimate:
    """Full analytic pipeline at the parameter mean."""
    if tuple(spec.names) != cmap.param_names:
        raise ValueError("parameter spec does not match the map's uncertain sources")
    mu_p = spec.mean
    labels = cmap.labels(mu_p)
    fit = cmap.fit_labels(labels)
    jac = dK_dg(fit, cmap.X, labels, cmap.config, cmap=cmap)
    sens = index_sensitivity(cmap, mu_p)
    grad = grad_f(jac, sens)
    hess, flagged = hessian_diag_f(cmap, mu_p, hessian_rel_step)
    est = propagate_moments(grad, hess, spec, fit.coefficients, mean_correction)
    meta = dict(est.meta)
    meta.update({"hessian_rel_step": hessian_rel_step,
                 "hessian_flagged": list(flagged),
                 "kkt_fallback_columns": list(jac.fallback_columns)})
    return MomentEstimate(mu=est.mu, sigma=est.sigma, meta=meta)
