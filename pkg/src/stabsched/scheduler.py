"""Unit commitment under three stability modes: unconstrained, deterministic
linear surrogate, and distributionally robust second-order cone.

The mixed-binary convex program is solved exactly by best-first branch and
bound on the commitment variables; node relaxations (linear or SOC) go to an
interior-point conic solver through a parameterized model, so only the
variable bounds change between nodes.
"""
from __future__ import annotations

import heapq
import json
import logging
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .chance import SocStabilityConstraint
from .network import GridModel, evaluate_gscr, is_connected

logger = logging.getLogger(__name__)

INTEGRALITY_TOL = 1e-5
DEFAULT_RAMP_FRAC = 0.6


class UcInfeasibleError(RuntimeError):
    """The commitment problem has no feasible schedule."""


@dataclass(frozen=True)
class UnitParams:
    """Thermal-unit style parameters; costs in k-currency/h, k-currency and
    currency/MWh to match the usual tabulations."""

    name: str
    bus: int
    p_min: float
    p_max: float
    no_load_cost: float              # k/h while committed
    marginal_cost: float             # per MWh
    startup_cost: float = 0.0        # k per start
    startup_time: float = 0.0        # carried, not enforced
    min_up: int = 0
    min_down: int = 0
    ramp_frac: float = DEFAULT_RAMP_FRAC
    kind: str = "sg"                 # "sg" or "gfm"
    inertia: float = 0.0             # carried, not enforced
    initially_on: int = 0
    initial_power: float = 0.0


@dataclass(frozen=True)
class Scenario:
    probability: float
    demand: np.ndarray
    wind_available: np.ndarray


@dataclass(frozen=True)
class UcInstance:
    demand: np.ndarray               # MW per step (base scenario)
    wind_available: np.ndarray       # MW per step
    units: tuple[UnitParams, ...]
    shed_cost: float                 # per MWh
    base_power: float                # MVA
    wind_capacity: float             # MW
    dt: float = 1.0
    load_damping: float = 0.0        # carried, not enforced
    scenarios: tuple[Scenario, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "demand", np.asarray(self.demand, dtype=float))
        object.__setattr__(self, "wind_available", np.asarray(self.wind_available, dtype=float))
        if len(self.demand) < 1:
            raise ValueError("horizon must have at least one step")
        if np.any(self.demand < 0) or np.any(self.wind_available < 0):
            raise ValueError("demand and wind profiles must be nonnegative")
        if len(self.wind_available) != len(self.demand):
            raise ValueError("profiles disagree on the horizon length")

    @property
    def horizon(self) -> int:
        return len(self.demand)

    def scenario_list(self) -> tuple[Scenario, ...]:
        if self.scenarios:
            return self.scenarios
        return (Scenario(1.0, self.demand, self.wind_available),)


@dataclass(frozen=True)
class DeterministicStability:
    coefficients: np.ndarray
    g_lim: float


@dataclass(frozen=True)
class StabilityPayload:
    """Canonical per-step stability row; `soc` degenerates to `linear` when
    the covariance has no positive factors."""

    kind: str                        # "none" | "linear" | "soc"
    mu: np.ndarray | None = None
    g_lim: float = 0.0
    k: float = 1.0
    factor_rows: np.ndarray | None = None
    eta: float | None = None


def _payload(stability) -> StabilityPayload:
    if stability is None or stability == "none":
        return StabilityPayload(kind="none")
    if isinstance(stability, DeterministicStability):
        return StabilityPayload(kind="linear", mu=np.asarray(stability.coefficients, float),
                                g_lim=float(stability.g_lim))
    if isinstance(stability, SocStabilityConstraint):
        rows = stability.factor_rows
        if rows.shape[0] == 0:
            return StabilityPayload(kind="linear", mu=stability.mu, g_lim=stability.g_lim)
        return StabilityPayload(kind="soc", mu=stability.mu, g_lim=stability.g_lim,
                                k=stability.k, factor_rows=rows, eta=stability.eta)
    raise TypeError(f"unsupported stability mode {stability!r}")


class UcProblem:
    """Mixed-binary convex commitment problem with a parameterized relaxation."""

    def __init__(self, instance: UcInstance, stability: StabilityPayload):
        self.instance = instance
        self.stability = stability
        self.n_units = len(instance.units)
        self.horizon = instance.horizon
        self._model = None
        if stability.kind != "none":
            k_expected = 2 + 2 * self.n_units
            if len(stability.mu) != k_expected:
                raise ValueError(
                    f"stability coefficients have length {len(stability.mu)}, "
                    f"expected {k_expected} for {self.n_units} units")
        total_cap = sum(u.p_max for u in instance.units)
        for scen in instance.scenario_list():
            need = np.asarray(scen.demand) - np.minimum(scen.wind_available,
                                                        instance.wind_capacity)
            if np.any(need > total_cap + 1e-9):
                logger.info("demand exceeds firm capacity at some steps; "
                            "load shedding will cover the gap")

    # -- model ------------------------------------------------------------

    def model(self):
        if self._model is None:
            self._model = _build_model(self.instance, self.stability)
        return self._model


@dataclass
class _Model:
    problem: cp.Problem
    xb: cp.Variable
    u: cp.Variable
    v: cp.Variable
    dispatch: list
    wind: list
    shed: list
    products: list
    lb: cp.Parameter
    ub: cp.Parameter


def _build_model(inst: UcInstance, stab: StabilityPayload) -> _Model:
    units = inst.units
    n, T = len(units), inst.horizon
    scens = inst.scenario_list()
    sb = inst.base_power
    wcap_pu = inst.wind_capacity / sb

    xb = cp.Variable((n, T), name="commit")
    u = cp.Variable((n, T), nonneg=True, name="startup")
    v = cp.Variable((n, T), nonneg=True, name="shutdown")
    lb = cp.Parameter((n, T), name="lb")
    ub = cp.Parameter((n, T), name="ub")

    p_min = np.array([g.p_min for g in units])
    p_max = np.array([g.p_max for g in units])
    ramp = np.array([g.ramp_frac * g.p_max for g in units])
    su = np.maximum(p_min, ramp)
    x0 = np.array([g.initially_on for g in units], dtype=float)
    p0 = np.array([g.initial_power * g.initially_on for g in units])

    # u/v tied to x so they are exactly the start/stop indicators at binary x
    cons = [xb >= lb, xb <= ub, u <= xb, v <= 1 - xb]
    cons.append(xb[:, 0] - x0 == u[:, 0] - v[:, 0])
    if T > 1:
        cons.append(xb[:, 1:] - xb[:, :-1] == u[:, 1:] - v[:, 1:])
    for gidx, unit in enumerate(units):
        for t in range(T):
            if unit.min_up > 1:
                lo = max(0, t - unit.min_up + 1)
                cons.append(cp.sum(u[gidx, lo:t + 1]) <= xb[gidx, t])
            if unit.min_down > 1:
                lo = max(0, t - unit.min_down + 1)
                cons.append(cp.sum(v[gidx, lo:t + 1]) <= 1 - xb[gidx, t])

    dispatch, wind, shed, products = [], [], [], []
    op_cost = 0
    for scen in scens:
        P = cp.Variable((n, T), nonneg=True)
        W = cp.Variable(T, nonneg=True)
        S = cp.Variable(T, nonneg=True)
        Z = cp.Variable((n, T), nonneg=True)
        dispatch.append(P)
        wind.append(W)
        shed.append(S)
        products.append(Z)

        cons += [
            P >= cp.multiply(p_min[:, None], xb),
            P <= cp.multiply(p_max[:, None], xb),
            cp.sum(P, axis=0) + W + S == scen.demand,
            W <= np.minimum(scen.wind_available, inst.wind_capacity),
            S <= scen.demand,
        ]
        # ramping, with startup/shutdown headroom
        cons.append(P[:, 0] - p0 <= cp.multiply(ramp, x0) + cp.multiply(su, u[:, 0]))
        cons.append(p0 - P[:, 0] <= cp.multiply(ramp, xb[:, 0]) + cp.multiply(su, v[:, 0]))
        if T > 1:
            cons.append(P[:, 1:] - P[:, :-1]
                        <= cp.multiply(ramp[:, None], xb[:, :-1])
                        + cp.multiply(su[:, None], u[:, 1:]))
            cons.append(P[:, :-1] - P[:, 1:]
                        <= cp.multiply(ramp[:, None], xb[:, 1:])
                        + cp.multiply(su[:, None], v[:, 1:]))
        # exact product linearization z = x * (W / S_B)
        w_pu = W / sb
        cons += [
            Z <= wcap_pu * xb,
            Z <= cp.vstack([w_pu] * n),
            Z >= cp.vstack([w_pu] * n) - wcap_pu * (1 - xb),
        ]
        if stab.kind != "none":
            mu = stab.mu
            for t in range(T):
                lin = (mu[0] + mu[1:1 + n] @ xb[:, t] + mu[1 + n] * w_pu[t]
                       + mu[2 + n:] @ Z[:, t])
                if stab.kind == "linear":
                    cons.append(lin >= stab.g_lim)
                else:
                    vec = cp.hstack([1.0, xb[:, t], cp.reshape(w_pu[t], (1,), order="C"),
                                     Z[:, t]])
                    cons.append(cp.SOC((lin - stab.g_lim) / stab.k,
                                       stab.factor_rows @ vec))
        op_cost += scen.probability * (
            inst.dt * cp.sum(cp.multiply(np.array([g.marginal_cost for g in units])[:, None],
                                         P)) / 1000.0
            + inst.dt * inst.shed_cost * cp.sum(S) / 1000.0
        )
    commit_cost = (inst.dt * cp.sum(cp.multiply(
        np.array([g.no_load_cost for g in units])[:, None], xb))
        + cp.sum(cp.multiply(np.array([g.startup_cost for g in units])[:, None], u)))
    problem = cp.Problem(cp.Minimize(commit_cost + op_cost), cons)
    return _Model(problem=problem, xb=xb, u=u, v=v, dispatch=dispatch, wind=wind,
                  shed=shed, products=products, lb=lb, ub=ub)


def build_uc(instance: UcInstance, stability=None) -> UcProblem:
    """Problem description for the requested stability mode.

    `stability` is None (unconstrained), a DeterministicStability, or a
    SocStabilityConstraint; a degenerate covariance reduces the robust mode to
    the deterministic row exactly.
    """
    return UcProblem(instance, _payload(stability))


@dataclass(frozen=True)
class Schedule:
    commitment: np.ndarray           # (n_units, T) binary
    startup: np.ndarray              # (n_units, T)
    dispatch: np.ndarray             # (n_scen, n_units, T) MW
    wind: np.ndarray                 # (n_scen, T) MW
    shed: np.ndarray                 # (n_scen, T) MW
    cost: float                      # expected total, k-currency
    margins: np.ndarray              # (n_scen, T) stability margin (nan for mode none)
    mode: str
    bound: float                     # root relaxation value
    nodes: int
    gap: float
    gap_flagged: bool = False
    base_power: float = 100.0
    dt: float = 1.0
    unit_names: tuple[str, ...] = ()

    @property
    def cost_per_hour(self) -> float:
        return self.cost / (self.dispatch.shape[2] * self.dt)

    def augmented_decisions(self, scenario: int = 0) -> np.ndarray:
        """(T, k) augmented decision per step, from solved values."""
        w_pu = self.wind[scenario] / self.base_power
        flags = self.commitment.astype(float)
        T = flags.shape[1]
        ones = np.ones((T, 1))
        return np.hstack([ones, flags.T, w_pu[:, None], (flags * w_pu[None, :]).T])


def solve_uc(problem: UcProblem, node_limit: int = 1_000_000,
             rel_gap: float = 1e-6) -> Schedule:
    """Global optimum by best-first branch and bound on the commitments."""
    model = problem.model()
    n, T = problem.n_units, problem.horizon
    shape = (n, T)

    def solve_node(lo, hi):
        model.lb.value = lo
        model.ub.value = hi
        try:
            model.problem.solve(solver=cp.CLARABEL)
        except cp.error.SolverError as exc:
            raise RuntimeError(f"conic node solve failed: {exc}") from exc
        status = model.problem.status
        if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return None
        if model.problem.value is None:
            raise RuntimeError(f"node solver returned status {status}")
        return float(model.problem.value), model.xb.value.copy()

    root = solve_node(np.zeros(shape), np.ones(shape))
    if root is None:
        raise UcInfeasibleError("root relaxation infeasible; check the binary-linked "
                                "constraints and initial conditions")
    root_bound = root[0]

    incumbent = None
    incumbent_cost = np.inf
    seq = 0
    heap = [(root_bound, seq, np.zeros(shape), np.ones(shape), root)]
    nodes = 1
    flagged = False

    def tol():
        if not np.isfinite(incumbent_cost):
            return 0.0
        return rel_gap * max(1.0, abs(incumbent_cost))

    while heap:
        bound, _, lo, hi, sol = heapq.heappop(heap)
        if bound >= incumbent_cost - tol():
            continue
        if sol is None:
            sol = solve_node(lo, hi)
            nodes += 1
            if sol is None or sol[0] >= incumbent_cost - tol():
                continue
        value, xb_val = sol
        free = hi > lo
        frac = np.where(free, np.minimum(xb_val - 0.0, 1.0 - xb_val), 0.0)
        frac = np.clip(frac, 0.0, None)
        if frac.max() <= INTEGRALITY_TOL:
            pattern = np.round(xb_val).astype(float)
            fixed = solve_node(pattern, pattern)
            nodes += 1
            if fixed is not None and fixed[0] < incumbent_cost - tol():
                incumbent_cost = fixed[0]
                incumbent = (pattern.astype(int), _extract(model, problem))
            continue
        flat = int(np.argmax(frac))
        gi, ti = np.unravel_index(flat, shape)
        for val in (0.0, 1.0):
            lo2, hi2 = lo.copy(), hi.copy()
            lo2[gi, ti] = val
            hi2[gi, ti] = val
            child = solve_node(lo2, hi2)
            nodes += 1
            if child is None or child[0] >= incumbent_cost - tol():
                continue
            seq += 1
            heapq.heappush(heap, (child[0], seq, lo2, hi2, child))
        if nodes >= node_limit:
            flagged = True
            logger.warning("node limit reached; returning incumbent with gap")
            break

    if incumbent is None:
        if flagged:
            raise UcInfeasibleError(f"node limit {node_limit} reached before any "
                                    "integral schedule was found")
        raise UcInfeasibleError("no integral schedule exists")
    pattern, extracted = incumbent
    best_bound = min((h[0] for h in heap), default=incumbent_cost)
    gap = max(0.0, incumbent_cost - best_bound) if flagged else 0.0
    return _assemble_schedule(problem, pattern, extracted, incumbent_cost,
                              root_bound, nodes, gap, flagged)


def _extract(model: _Model, problem: UcProblem):
    return {
        "u": model.u.value.copy(),
        "dispatch": np.array([P.value for P in model.dispatch]),
        "wind": np.array([W.value for W in model.wind]),
        "shed": np.array([S.value for S in model.shed]),
        "products": np.array([Z.value for Z in model.products]),
    }


def _assemble_schedule(problem: UcProblem, pattern, extracted, cost, bound,
                       nodes, gap, flagged) -> Schedule:
    inst = problem.instance
    stab = problem.stability
    commitment = pattern.astype(int)
    startup = np.clip(np.round(extracted["u"]), 0, 1).astype(int)
    wind = np.clip(extracted["wind"], 0.0, None)
    dispatch = np.clip(extracted["dispatch"], 0.0, None)
    shed = np.clip(extracted["shed"], 0.0, None)
    n_scen, T = wind.shape

    margins = np.full((n_scen, T), np.nan)
    if stab.kind != "none":
        for s in range(n_scen):
            w_pu = wind[s] / inst.base_power
            for t in range(T):
                x = np.concatenate([[1.0], commitment[:, t], [w_pu[t]],
                                    commitment[:, t] * w_pu[t]])
                lin = float(stab.mu @ x)
                if stab.kind == "linear":
                    margins[s, t] = lin - stab.g_lim
                else:
                    lhs = float(np.linalg.norm(stab.factor_rows @ x))
                    margins[s, t] = (lin - stab.g_lim) / stab.k - lhs
    return Schedule(commitment=commitment, startup=startup, dispatch=dispatch,
                    wind=wind, shed=shed, cost=float(cost), margins=margins,
                    mode=stab.kind, bound=float(bound), nodes=nodes, gap=float(gap),
                    gap_flagged=flagged, base_power=inst.base_power, dt=inst.dt,
                    unit_names=tuple(u.name for u in inst.units))


@dataclass(frozen=True)
class StabilityAudit:
    values: np.ndarray
    violated: np.ndarray
    reasons: tuple[str, ...]
    rate: float


def evaluate_schedule(schedule: Schedule, grid: GridModel, reactances,
                      g_lim: float, scenario: int = 0) -> StabilityAudit:
    """True index per step under the given reactances; violation when it
    falls below the limit (or the step configuration is disconnected)."""
    T = schedule.commitment.shape[1]
    values = np.zeros(T)
    violated = np.zeros(T, dtype=bool)
    reasons = []
    configured = grid.with_reactances(reactances)
    for t in range(T):
        flags = schedule.commitment[:, t]
        w_pu = schedule.wind[scenario, t] / schedule.base_power
        step_grid = configured.with_commitments(flags).with_wind(w_pu)
        if not is_connected(step_grid):
            values[t] = np.nan
            violated[t] = True
            reasons.append(f"step {t}: committed sources and GFL buses disconnected")
            continue
        values[t] = evaluate_gscr(step_grid)
        violated[t] = values[t] < g_lim
    return StabilityAudit(values=values, violated=violated, reasons=tuple(reasons),
                          rate=float(np.mean(violated)))


# ---------------------------------------------------------------------------
# Instance files.
# ---------------------------------------------------------------------------

def instance_from_dict(data: dict) -> UcInstance:
    units = tuple(UnitParams(
        name=u["name"], bus=int(u["bus"]), p_min=float(u["p_min_mw"]),
        p_max=float(u["p_max_mw"]), no_load_cost=float(u["no_load_cost"]),
        marginal_cost=float(u["marginal_cost"]),
        startup_cost=float(u.get("startup_cost", 0.0)),
        startup_time=float(u.get("startup_time_h", 0.0)),
        min_up=int(u.get("min_up_h", 0)), min_down=int(u.get("min_down_h", 0)),
        ramp_frac=float(u.get("ramp_frac_per_h", DEFAULT_RAMP_FRAC)),
        kind=u.get("kind", "sg"), inertia=float(u.get("inertia_s", 0.0)),
        initially_on=int(u.get("initially_on", 0)),
        initial_power=float(u.get("initial_power_mw", 0.0)),
    ) for u in data["units"])
    scenarios = tuple(Scenario(probability=float(s["probability"]),
                               demand=np.asarray(s["demand_mw"], dtype=float),
                               wind_available=np.asarray(s["wind_available_mw"], dtype=float))
                      for s in data.get("scenarios", []))
    return UcInstance(
        demand=np.asarray(data["demand_mw"], dtype=float),
        wind_available=np.asarray(data["wind_available_mw"], dtype=float),
        units=units, shed_cost=float(data["shed_cost_per_mwh"]),
        base_power=float(data["base_power_mva"]),
        wind_capacity=float(data["wind_capacity_mw"]),
        dt=float(data.get("dt_h", 1.0)),
        load_damping=float(data.get("load_damping", 0.0)),
        scenarios=scenarios,
    )


def load_instance(path) -> UcInstance:
    with open(path, "r", encoding="utf-8") as fh:
        return instance_from_dict(json.load(fh))
