"""Lossless network model: admittance assembly, Kron reduction and the
grid-strength index (smallest eigenvalue of the power-scaled reduced
admittance matrix), plus its derivatives with respect to source reactances.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

# GFL units below this per-unit output are excluded from the retained bus set
# (the V^2/P scaling diverges as P -> 0).
GFL_POWER_FLOOR = 1e-6


class InvalidModelError(ValueError):
    """Grid data violates a structural invariant (non-positive reactance, ...)."""


class ReductionSingularError(RuntimeError):
    """The passive block of the admittance matrix is numerically singular."""

    def __init__(self, buses):
        self.buses = tuple(buses)
        super().__init__(
            "singular passive block while eliminating buses; offending buses: "
            f"{sorted(self.buses)}"
        )


class InvalidOperatingPointError(ValueError):
    """A retained inverter has non-positive output power."""


class UnsupportedPlacementError(ValueError):
    """Reactance derivative requested for a source on a retained bus."""


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    reactance: float


@dataclass(frozen=True)
class Source:
    """A synchronous generator or grid-forming inverter behind a reactance."""

    bus: int
    reactance: float
    committed: int = 1
    name: str = ""


@dataclass(frozen=True)
class GflUnit:
    """Grid-following inverter: terminal voltage and dispatched active power."""

    bus: int
    voltage: float = 1.0
    power: float = 0.0


@dataclass(frozen=True)
class GridModel:
    """Immutable per-evaluation snapshot of the network.

    Commitment flags and inverter powers are evaluation state; topology and
    reactances are structural.
    """

    buses: tuple[int, ...]
    branches: tuple[Branch, ...]
    sgs: tuple[Source, ...]
    gfm_ibrs: tuple[Source, ...]
    gfl_ibrs: tuple[GflUnit, ...]

    def __post_init__(self):
        if len(set(self.buses)) != len(self.buses):
            raise InvalidModelError("duplicate bus ids")
        bus_set = set(self.buses)
        for br in self.branches:
            if br.reactance <= 0:
                raise InvalidModelError(f"branch {br.from_bus}-{br.to_bus}: reactance must be > 0")
            if br.from_bus not in bus_set or br.to_bus not in bus_set:
                raise InvalidModelError(f"branch {br.from_bus}-{br.to_bus}: unknown bus")
        for src in self.sgs + self.gfm_ibrs:
            if src.reactance <= 0:
                raise InvalidModelError(f"source at bus {src.bus}: reactance must be > 0")
            if src.bus not in bus_set:
                raise InvalidModelError(f"source at unknown bus {src.bus}")
            if src.committed not in (0, 1):
                raise InvalidModelError("commitment flag must be 0 or 1")
        gfl_buses = [u.bus for u in self.gfl_ibrs]
        if len(set(gfl_buses)) != len(gfl_buses):
            raise InvalidModelError("grid-following buses must be distinct")
        for u in self.gfl_ibrs:
            if u.bus not in bus_set:
                raise InvalidModelError(f"grid-following unit at unknown bus {u.bus}")

    @property
    def sources(self) -> tuple[Source, ...]:
        """Commitable sources in canonical order: SGs first, then GFM units."""
        return self.sgs + self.gfm_ibrs

    @property
    def source_names(self) -> tuple[str, ...]:
        return tuple(s.name or f"{kind}{s.bus}"
                     for kind, group in (("sg", self.sgs), ("gfm", self.gfm_ibrs))
                     for s in group)

    def with_commitments(self, flags) -> "GridModel":
        flags = [int(f) for f in flags]
        if len(flags) != len(self.sources):
            raise InvalidModelError("one commitment flag per source required")
        n_sg = len(self.sgs)
        sgs = tuple(replace(s, committed=flags[i]) for i, s in enumerate(self.sgs))
        gfms = tuple(replace(s, committed=flags[n_sg + i]) for i, s in enumerate(self.gfm_ibrs))
        return replace(self, sgs=sgs, gfm_ibrs=gfms)

    def with_reactances(self, reactances) -> "GridModel":
        reactances = np.asarray(reactances, dtype=float)
        if reactances.shape != (len(self.sources),):
            raise InvalidModelError("one reactance per source required")
        n_sg = len(self.sgs)
        sgs = tuple(replace(s, reactance=float(reactances[i])) for i, s in enumerate(self.sgs))
        gfms = tuple(replace(s, reactance=float(reactances[n_sg + i]))
                     for i, s in enumerate(self.gfm_ibrs))
        return replace(self, sgs=sgs, gfm_ibrs=gfms)

    def with_wind(self, total_power: float) -> "GridModel":
        """Split a total per-unit wind output equally across GFL units."""
        if not self.gfl_ibrs:
            raise InvalidModelError("no grid-following units to dispatch")
        share = float(total_power) / len(self.gfl_ibrs)
        gfl = tuple(replace(u, power=share) for u in self.gfl_ibrs)
        return replace(self, gfl_ibrs=gfl)

    def source_reactances(self) -> np.ndarray:
        return np.array([s.reactance for s in self.sources])


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense susceptance matrix with the retained/passive bus partition."""

    matrix: np.ndarray               # |B| x |B|, branch Laplacian + source diagonals
    buses: tuple[int, ...]
    retained: tuple[int, ...]        # positions of active GFL buses in `buses`
    passive: tuple[int, ...]         # complement positions


@dataclass(frozen=True)
class ReducedAdmittance:
    matrix: np.ndarray               # |C_L| x |C_L| Schur complement
    buses: tuple[int, ...]           # retained bus ids, in partition order


@dataclass(frozen=True)
class GscrEvaluation:
    value: float                     # smallest eigenvalue of the scaled matrix
    left: np.ndarray                 # left eigenvector, normalized w^T v = 1
    right: np.ndarray
    scaled_matrix: np.ndarray


@dataclass(frozen=True)
class DiagonalDerivative:
    """Single-entry diagonal derivative of the passive admittance block."""

    index: int                       # position within the passive block
    value: float
    size: int

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.size, self.size))
        out[self.index, self.index] = self.value
        return out


def active_gfl(grid: GridModel) -> tuple[GflUnit, ...]:
    """GFL units retained for evaluation (output above the power floor)."""
    return tuple(u for u in grid.gfl_ibrs if u.power > GFL_POWER_FLOOR)


def _component(grid: GridModel, seeds) -> set:
    adjacency = {b: set() for b in grid.buses}
    for br in grid.branches:
        adjacency[br.from_bus].add(br.to_bus)
        adjacency[br.to_bus].add(br.from_bus)
    seen = set(seeds)
    stack = list(seeds)
    while stack:
        for nxt in adjacency[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def is_connected(grid: GridModel) -> bool:
    """True when committed sources and active GFL buses share one branch component."""
    touched = [s.bus for s in grid.sources if s.committed] + [u.bus for u in active_gfl(grid)]
    if len(touched) <= 1:
        return True
    seen = _component(grid, touched[:1])
    return all(b in seen for b in touched)


def restrict_to_gfl_component(grid: GridModel) -> GridModel:
    """Drop buses outside the component reachable from the GFL buses.

    Floating islands carry no injections seen by the retained buses, and
    keeping them would make the passive block singular.
    """
    seeds = [u.bus for u in grid.gfl_ibrs]
    if not seeds:
        return grid
    keep = _component(grid, seeds)
    if len(keep) == len(grid.buses):
        return grid
    return GridModel(
        buses=tuple(b for b in grid.buses if b in keep),
        branches=tuple(br for br in grid.branches if br.from_bus in keep),
        sgs=tuple(s for s in grid.sgs if s.bus in keep),
        gfm_ibrs=tuple(s for s in grid.gfm_ibrs if s.bus in keep),
        gfl_ibrs=grid.gfl_ibrs,
    )


def build_admittance(grid: GridModel) -> AdmittanceMatrix:
    """Assemble the branch susceptance Laplacian plus committed-source diagonals.

    Parallel branches are summed. The partition retains GFL buses whose power
    exceeds the floor; everything else is passive.
    """
    n = len(grid.buses)
    pos = {b: i for i, b in enumerate(grid.buses)}
    y = np.zeros((n, n))
    for br in grid.branches:
        if br.reactance <= 0:
            raise InvalidModelError(f"branch {br.from_bus}-{br.to_bus}: reactance must be > 0")
        b = 1.0 / br.reactance
        i, j = pos[br.from_bus], pos[br.to_bus]
        y[i, i] += b
        y[j, j] += b
        y[i, j] -= b
        y[j, i] -= b
    for src in grid.sources:
        if src.reactance <= 0:
            raise InvalidModelError(f"source at bus {src.bus}: reactance must be > 0")
        y[pos[src.bus], pos[src.bus]] += src.committed / src.reactance
    retained = tuple(pos[u.bus] for u in active_gfl(grid))
    passive = tuple(i for i in range(n) if i not in set(retained))
    return AdmittanceMatrix(matrix=y, buses=grid.buses, retained=retained, passive=passive)


def kron_reduce(adm: AdmittanceMatrix) -> ReducedAdmittance:
    """Schur complement of the passive block onto the retained buses."""
    y = adm.matrix
    ret = list(adm.retained)
    pas = list(adm.passive)
    retained_buses = tuple(adm.buses[i] for i in ret)
    if not pas:
        return ReducedAdmittance(matrix=y.copy(), buses=retained_buses)
    y_rr = y[np.ix_(ret, ret)]
    y_rp = y[np.ix_(ret, pas)]
    y_pp = y[np.ix_(pas, pas)]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(y_pp, check_finite=False)
    pivots = np.abs(np.diag(lu))
    scale = max(pivots.max(), 1.0)
    if pivots.min() < 1e-10 * scale:
        raise ReductionSingularError(_singular_buses(y_pp, [adm.buses[i] for i in pas]))
    z = scipy.linalg.lu_solve((lu, piv), y[np.ix_(pas, ret)], check_finite=False)
    reduced = y_rr - y_rp @ z
    return ReducedAdmittance(matrix=reduced, buses=retained_buses)


def _singular_buses(y_pp, bus_ids):
    # Buses dominating the near-null direction of the passive block.
    _, _, vt = np.linalg.svd(y_pp)
    direction = np.abs(vt[-1])
    mask = direction > 0.1 * direction.max()
    return [b for b, m in zip(bus_ids, mask) if m]


def gscr_index(reduced: ReducedAdmittance, gfl) -> GscrEvaluation:
    """Smallest eigenvalue of diag(V^2/P) * Y_red with its eigenvector pair.

    `gfl` lists (voltage, power) for the retained units, in reduction order.
    """
    volt = np.array([float(v) for v, _ in gfl])
    power = np.array([float(p) for _, p in gfl])
    if np.any(power <= 0):
        raise InvalidOperatingPointError("retained grid-following units need P > 0")
    if len(gfl) != reduced.matrix.shape[0]:
        raise InvalidOperatingPointError("one (V, P) pair per retained bus required")
    scaled = (volt**2 / power)[:, None] * reduced.matrix
    vals, lefts, rights = scipy.linalg.eig(scaled, left=True, right=True)
    k = int(np.argmin(vals.real))
    lam = vals[k]
    if abs(lam.imag) > 1e-8 * max(1.0, abs(lam.real)):
        warnings.warn(f"smallest eigenvalue has imaginary part {lam.imag:.3e}")
    v = np.real_if_close(rights[:, k], tol=1e6).real
    w = np.real_if_close(lefts[:, k], tol=1e6).real
    # Deterministic orientation, then bi-orthonormal scaling w^T v = 1.
    lead = np.argmax(np.abs(v) > 1e-12 * np.abs(v).max()) if v.size else 0
    if v[lead] < 0:
        v = -v
        w = -w
    v = v / np.linalg.norm(v)
    w = w / float(w @ v)
    return GscrEvaluation(value=float(lam.real), left=w, right=v, scaled_matrix=scaled)


def evaluate_gscr(grid: GridModel) -> float:
    """Index value for a configured grid; +inf when no GFL unit is active."""
    units = active_gfl(grid)
    if not units:
        return float("inf")
    reduced = kron_reduce(build_admittance(restrict_to_gfl_component(grid)))
    return gscr_index(reduced, [(u.voltage, u.power) for u in units]).value


def d_Ydd_dXg(grid: GridModel, source_index: int) -> DiagonalDerivative:
    """Derivative of the passive admittance block w.r.t. one source reactance.

    The committed source contributes x_g / X_g on its diagonal, hence the
    single entry -x_g / X_g^2.
    """
    src = grid.sources[source_index]
    adm = build_admittance(grid)
    passive_buses = [adm.buses[i] for i in adm.passive]
    if src.bus not in passive_buses:
        raise UnsupportedPlacementError(
            f"source at bus {src.bus} sits on a retained bus; derivative assumes passive placement"
        )
    idx = passive_buses.index(src.bus)
    value = -src.committed / src.reactance**2
    return DiagonalDerivative(index=idx, value=value, size=len(passive_buses))


# ---------------------------------------------------------------------------
# Batched evaluation used by dataset generation and Monte Carlo relabeling.
# ---------------------------------------------------------------------------

def batch_gscr_labels(grid: GridModel, flags: np.ndarray, wind: np.ndarray,
                      reactances: np.ndarray | None = None) -> np.ndarray:
    """Index values for many (commitment, total wind) pairs at fixed reactances.

    Exploits that only the passive diagonal depends on commitments and that the
    scaled matrix is similar to a symmetric one, so a stacked symmetric
    eigensolver labels every sample at once. Agrees with `gscr_index` sample by
    sample (the scaled matrix is similar to diag(V/sqrt(P)) Y_red diag(V/sqrt(P))).
    """
    flags = np.asarray(flags, dtype=int)
    wind = np.asarray(wind, dtype=float)
    if reactances is not None:
        grid = grid.with_reactances(reactances)
    pruned = restrict_to_gfl_component(grid)
    if len(pruned.sources) != len(grid.sources):
        kept_buses = set(pruned.buses)
        cols = [i for i, s in enumerate(grid.sources) if s.bus in kept_buses]
        flags = flags[:, cols]
        grid = pruned
    units = grid.gfl_ibrs
    if not units:
        raise InvalidModelError("batched labeling requires grid-following units")
    volt = np.array([u.voltage for u in units])
    n_gfl = len(units)

    base = grid.with_commitments(np.zeros(len(grid.sources), dtype=int)).with_wind(1.0)
    adm0 = build_admittance(base)
    ret, pas = list(adm0.retained), list(adm0.passive)
    y = adm0.matrix
    y_rr = y[np.ix_(ret, ret)]
    y_rp = y[np.ix_(ret, pas)]
    y_pr = y[np.ix_(pas, ret)]
    y_pp0 = y[np.ix_(pas, pas)]
    pas_buses = [adm0.buses[i] for i in pas]
    src_pos = np.array([pas_buses.index(s.bus) for s in grid.sources])
    src_b = np.array([1.0 / s.reactance for s in grid.sources])

    combos, inverse = np.unique(flags, axis=0, return_inverse=True)
    y_pp = np.broadcast_to(y_pp0, (len(combos),) + y_pp0.shape).copy()
    for c, combo in enumerate(combos):
        for j, on in enumerate(combo):
            if on:
                y_pp[c, src_pos[j], src_pos[j]] += src_b[j]
    z = np.linalg.solve(y_pp, np.broadcast_to(y_pr, (len(combos),) + y_pr.shape))
    reduced = y_rr[None, :, :] - y_rp[None, :, :] @ z        # (n_combo, m, m)

    labels = np.full(len(flags), np.inf)
    live = wind / n_gfl > GFL_POWER_FLOOR
    if np.any(live):
        power = wind[live] / n_gfl                           # equal split
        scale = volt[None, :] / np.sqrt(power)[:, None]      # (S_live, m)
        sym = reduced[inverse[live]] * scale[:, :, None] * scale[:, None, :]
        labels[live] = np.linalg.eigvalsh(sym)[:, 0]
    return labels


# ---------------------------------------------------------------------------
# File ingestion.
# ---------------------------------------------------------------------------

def grid_from_dict(data: dict) -> GridModel:
    """Network from the structured layout; commitments default to on, GFL power to 0."""
    branches = tuple(Branch(int(b["from"]), int(b["to"]), float(b["x"]))
                     for b in data.get("branches", []))
    sgs = tuple(Source(int(s["bus"]), float(s["Xg"]), 1, s.get("name", f"sg{s['bus']}"))
                for s in data.get("sgs", []))
    gfms = tuple(Source(int(s["bus"]), float(s["Xg"]), 1, s.get("name", f"gfm{s['bus']}"))
                 for s in data.get("gfm", []))
    gfl = tuple(GflUnit(int(u["bus"]), float(u.get("V", 1.0)), 0.0)
                for u in data.get("gfl", []))
    return GridModel(buses=tuple(int(b) for b in data["buses"]), branches=branches,
                     sgs=sgs, gfm_ibrs=gfms, gfl_ibrs=gfl)


def load_grid(path) -> GridModel:
    with open(path, "r", encoding="utf-8") as fh:
        return grid_from_dict(json.load(fh))
