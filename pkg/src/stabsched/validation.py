"""Brute-force oracles and experiment drivers: retraining Monte Carlo for the
coefficient moments, error tables against the analytic propagation, variation
sweeps, schedule violation sampling and the fixed-margin baseline.
"""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .network import GridModel
from .pipeline import CoefficientMap
from .scheduler import (
    DeterministicStability,
    Schedule,
    UcInstance,
    build_uc,
    evaluate_schedule,
    solve_uc,
)
from .sensitivity import MomentEstimate, UncertainParameterSpec, analytic_moments

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class McConfig:
    samples: int = 15_000
    seed: int = 0
    family: str = "gaussian"
    cv_list: tuple[float, ...] = (0.05, 0.10, 0.15, 0.20)
    trace_points: int = 200
    n_jobs: int = 1

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("need at least one sample")
        if any(cv <= 0 for cv in self.cv_list):
            raise ValueError("variation coefficients must be positive")
        if self.family != "gaussian":
            raise ValueError("only gaussian parameter sampling is implemented")


@dataclass(frozen=True)
class McResult:
    mu: np.ndarray
    sigma: np.ndarray
    trace_n: np.ndarray              # sample counts of the running-mean checkpoints
    trace_mu: np.ndarray             # (n_checkpoints, k)
    coefficients: np.ndarray         # (n_effective, k) raw draws
    n_samples: int
    n_dropped: int

    @property
    def n_effective(self) -> int:
        return self.n_samples - self.n_dropped

    def running_mean(self, n: int) -> np.ndarray:
        return self.coefficients[:n].mean(axis=0)


def draw_parameters(spec: UncertainParameterSpec, rng) -> np.ndarray:
    """One joint draw; Gaussian truncated to positive reactances."""
    for _ in range(1000):
        p = rng.normal(spec.mean, spec.sigma)
        if np.all(p > 0):
            return p
    raise RuntimeError("could not draw positive reactances; variance too large")


def _mc_chunk(cmap: CoefficientMap, spec: UncertainParameterSpec, seed: int,
              indices) -> list:
    out = []
    for i in indices:
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        p = draw_parameters(spec, rng)
        try:
            out.append((i, cmap.coefficients(p)))
        except Exception as exc:   # noqa: BLE001 - a failed refit is data, not a bug
            logger.warning("sample %d dropped: %s", i, exc)
            out.append((i, None))
    return out


def mc_moments(cmap: CoefficientMap, spec: UncertainParameterSpec,
               cfg: McConfig) -> McResult:
    """Sample mean/covariance of the coefficients by per-draw relabel + refit.

    Per-draw RNG streams derive from (seed, index), so the result does not
    depend on the worker count; aggregation runs in index order.
    """
    if tuple(spec.names) != cmap.param_names:
        raise ValueError("parameter spec does not match the map's uncertain sources")
    n = cfg.samples
    indices = list(range(n))
    if cfg.n_jobs > 1:
        chunks = [indices[i::cfg.n_jobs] for i in range(cfg.n_jobs)]
        with ProcessPoolExecutor(max_workers=cfg.n_jobs) as pool:
            parts = pool.map(_mc_chunk, itertools.repeat(cmap), itertools.repeat(spec),
                             itertools.repeat(cfg.seed), chunks)
        results = sorted(item for part in parts for item in part)
    else:
        results = _mc_chunk(cmap, spec, cfg.seed, indices)

    draws = [k for _, k in results if k is not None]
    dropped = n - len(draws)
    if dropped > 0.01 * n:
        raise RuntimeError(f"{dropped}/{n} Monte Carlo refits failed; report invalid")
    coeffs = np.array(draws)
    mu = coeffs.mean(axis=0)
    sigma = np.cov(coeffs, rowvar=False) if len(coeffs) > 1 else np.zeros((coeffs.shape[1],) * 2)
    sigma = np.atleast_2d(sigma)

    cum = np.cumsum(coeffs, axis=0) / np.arange(1, len(coeffs) + 1)[:, None]
    step = max(1, len(coeffs) // cfg.trace_points)
    marks = np.unique(np.concatenate([np.arange(step, len(coeffs) + 1, step),
                                      [len(coeffs)]]))
    return McResult(mu=mu, sigma=sigma, trace_n=marks, trace_mu=cum[marks - 1],
                    coefficients=coeffs, n_samples=n, n_dropped=dropped)


class UndefinedMapeError(ValueError):
    """Every coefficient was excluded from the percentage comparison."""


@dataclass(frozen=True)
class MapeReport:
    e_mu: np.ndarray                 # signed % error per coefficient (nan when excluded)
    e_sigma2: np.ndarray
    mape_mu: float
    mape_sigma2: float
    excluded: tuple[int, ...]

    def rows(self, analytic: MomentEstimate, mc: McResult):
        k = len(self.e_mu)
        for i in range(k):
            yield {"coefficient": i, "mu_analytic": float(analytic.mu[i]),
                   "mu_mc": float(mc.mu[i]), "e_mu_pct": float(self.e_mu[i]),
                   "var_analytic": float(analytic.sigma[i, i]),
                   "var_mc": float(mc.sigma[i, i]),
                   "e_var_pct": float(self.e_sigma2[i])}


def mape(analytic: MomentEstimate, mc: McResult, floor: float = 1e-9) -> MapeReport:
    """Signed percentage errors against the Monte Carlo reference, and their
    mean absolute values. Coefficients whose reference magnitude sits below
    the floor are excluded per quantity and listed."""
    mu_a, mu_m = np.asarray(analytic.mu), np.asarray(mc.mu)
    var_a, var_m = np.diag(analytic.sigma), np.diag(mc.sigma)
    if mu_a.shape != mu_m.shape:
        raise ValueError("moment dimensions differ")
    keep_mu = np.abs(mu_m) >= floor
    keep_s2 = np.abs(var_m) >= floor
    if not np.any(keep_mu) and not np.any(keep_s2):
        raise UndefinedMapeError("all coefficients below the comparison floor")
    e_mu = np.where(keep_mu, (mu_a - mu_m) / np.where(keep_mu, mu_m, 1.0) * 100.0, np.nan)
    e_s2 = np.where(keep_s2, (var_a - var_m) / np.where(keep_s2, var_m, 1.0) * 100.0, np.nan)
    excluded = np.flatnonzero(~keep_mu | ~keep_s2)
    return MapeReport(e_mu=e_mu, e_sigma2=e_s2,
                      mape_mu=float(np.nanmean(np.abs(e_mu))) if keep_mu.any() else float("nan"),
                      mape_sigma2=float(np.nanmean(np.abs(e_s2))) if keep_s2.any() else float("nan"),
                      excluded=tuple(int(i) for i in excluded))


@dataclass(frozen=True)
class CvSweepRow:
    cv: float
    mape_mu: float
    mape_sigma2: float


def cv_sweep(cmap: CoefficientMap, cfg: McConfig, cvs=None,
             mean_correction: str = "half") -> list[CvSweepRow]:
    """Analytic-vs-MC error table over coefficients of variation."""
    cvs = cfg.cv_list if cvs is None else tuple(cvs)
    rows = []
    mu_p = cmap.nominal
    for cv in cvs:
        spec = UncertainParameterSpec(names=cmap.param_names, mean=mu_p,
                                      variance=(cv * mu_p) ** 2)
        ana = analytic_moments(cmap, spec, mean_correction=mean_correction)
        mc = mc_moments(cmap, spec, cfg)
        rep = mape(ana, mc)
        rows.append(CvSweepRow(cv=cv, mape_mu=rep.mape_mu, mape_sigma2=rep.mape_sigma2))
    return rows


def sampled_violation_rate(schedule: Schedule, grid: GridModel,
                           spec: UncertainParameterSpec, g_lim: float,
                           draws: int, seed: int, scenario: int = 0) -> float:
    """Mean per-step violation frequency over sampled true reactances."""
    rates = []
    names = grid.source_names
    idx = [names.index(n) for n in spec.names]
    for i in range(draws):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        p = draw_parameters(spec, rng)
        react = grid.source_reactances()
        react[idx] = p
        rates.append(evaluate_schedule(schedule, grid, react, g_lim, scenario).rate)
    return float(np.mean(rates))


@dataclass(frozen=True)
class FixedMarginRow:
    margin_pct: float
    cost: float
    violation_rate: float


@dataclass(frozen=True)
class FixedMarginReport:
    rows: tuple[FixedMarginRow, ...]
    zero_violation_margin: float | None
    zero_violation_cost: float | None
    dro_cost: float | None = None


def fixed_margin_baseline(instance: UcInstance, mu_k: np.ndarray, g_lim: float,
                          grid: GridModel, spec: UncertainParameterSpec,
                          margins, eval_draws: int = 200, seed: int = 0,
                          dro_cost: float | None = None) -> FixedMarginReport:
    """Deterministic scheduling with an inflated limit, margin by margin.

    Violations are judged against the original limit under sampled reactances;
    the report identifies the smallest margin with zero violations.
    """
    rows = []
    for margin in margins:
        if margin < 0:
            raise ValueError("margins must be nonnegative")
        lifted = g_lim * (1.0 + margin / 100.0)
        problem = build_uc(instance, DeterministicStability(mu_k, lifted))
        schedule = solve_uc(problem)
        rate = sampled_violation_rate(schedule, grid, spec, g_lim, eval_draws, seed)
        rows.append(FixedMarginRow(margin_pct=float(margin), cost=schedule.cost,
                                   violation_rate=rate))
    zero = next((r for r in rows if r.violation_rate == 0.0), None)
    return FixedMarginReport(rows=tuple(rows),
                             zero_violation_margin=zero.margin_pct if zero else None,
                             zero_violation_cost=zero.cost if zero else None,
                             dro_cost=dro_cost)


def enumerate_uc(problem, binary_feasibility_check: bool = True):
    """Exhaustive oracle: best objective over every commitment pattern.

    Only meant for tiny instances; each pattern is priced by the same node
    relaxation with all binaries fixed.
    """
    model = problem.model()
    inst = problem.instance
    n, T = problem.n_units, problem.horizon
    best_cost, best_pattern = np.inf, None
    for bits in itertools.product((0.0, 1.0), repeat=n * T):
        pattern = np.array(bits).reshape(n, T)
        if binary_feasibility_check and not _pattern_feasible(inst, pattern):
            continue
        model.lb.value = pattern
        model.ub.value = pattern
        model.problem.solve(solver="CLARABEL")
        if model.problem.status in ("infeasible", "infeasible_inaccurate"):
            continue
        if model.problem.value is not None and model.problem.value < best_cost - 1e-12:
            best_cost = float(model.problem.value)
            best_pattern = pattern.astype(int)
    return best_cost, best_pattern


def _pattern_feasible(inst: UcInstance, pattern) -> bool:
    """Min-up/min-down screen on a fixed commitment pattern."""
    T = pattern.shape[1]
    for gidx, unit in enumerate(inst.units):
        x = np.concatenate([[unit.initially_on], pattern[gidx]])
        up = np.clip(np.diff(x), 0, 1)
        dn = np.clip(-np.diff(x), 0, 1)
        for t in range(T):
            lo = max(0, t - unit.min_up + 1)
            if unit.min_up > 1 and up[lo:t + 1].sum() > pattern[gidx, t] + 1e-9:
                return False
            lo = max(0, t - unit.min_down + 1)
            if unit.min_down > 1 and dn[lo:t + 1].sum() > 1 - pattern[gidx, t] + 1e-9:
                return False
    return True
