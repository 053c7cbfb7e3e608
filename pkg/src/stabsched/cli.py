"""Command-line pipeline: dataset generation, fitting, moment propagation,
Monte Carlo validation, scheduling and the experiment sweeps.

Every artifact embeds sha256 hashes of the files it was derived from;
downstream commands re-hash those inputs and refuse to run on stale chains
(exit code 3). Invalid inputs exit with code 2, naming the offending path.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .chance import SocStabilityConstraint, constraint_from_dict, equivalent_limit, save_constraint
from .network import load_grid
from .pipeline import CoefficientMap
from .regression import (
    SmoothRegressionConfig,
    choose_nu,
    dataset_from_csv,
    dataset_to_csv,
    fit_smooth,
    generate_dataset,
    partition,
    prune_refit,
    save_fit,
)
from .scheduler import (
    DeterministicStability,
    build_uc,
    evaluate_schedule,
    load_instance,
    solve_uc,
)
from .sensitivity import UncertainParameterSpec, analytic_moments, moments_from_dict
from .validation import (
    McConfig,
    cv_sweep,
    draw_parameters,
    fixed_margin_baseline,
    mape,
    mc_moments,
    sampled_violation_rate,
)

EXIT_OK = 0
EXIT_INVALID_INPUT = 2
EXIT_STALE_ARTIFACT = 3


class CliError(Exception):
    def __init__(self, message, code=EXIT_INVALID_INPUT):
        super().__init__(message)
        self.code = code


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _check_lineage(artifact: dict, base: Path, artifact_name: str):
    for rel, digest in artifact.get("lineage", {}).items():
        src = base / rel
        if not src.exists():
            raise CliError(f"lineage input of {artifact_name} missing: {src}")
        if sha256_file(src) != digest:
            raise CliError(f"stale artifact {artifact_name}: input {src} changed since it was written",
                           code=EXIT_STALE_ARTIFACT)


def _write_json(path: Path, payload: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")


def _write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


class Workspace:
    """Configuration plus resolved paths and loaded inputs."""

    def __init__(self, args):
        cfg_path = _require(Path(args.config), "config file")
        with open(cfg_path, "r", encoding="utf-8") as fh:
            self.cfg = json.load(fh)
        self.base = cfg_path.parent
        if args.seed is not None:
            self.cfg["seed"] = args.seed
        if args.threads is not None:
            self.cfg["threads"] = args.threads
        if args.eta is not None:
            self.cfg["eta"] = args.eta
        if getattr(args, "mode", None) is not None:
            self.cfg["mode"] = args.mode
        eta = float(self.cfg.get("eta", 0.8))
        if not 0.0 < eta < 1.0:
            raise CliError(f"eta must lie in (0, 1), got {eta}")
        self.out = self.base / self.cfg.get("output_dir", "out")
        self.out.mkdir(parents=True, exist_ok=True)

    # -- inputs ----------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.cfg.get("seed", 0))

    @property
    def threads(self) -> int:
        return int(self.cfg.get("threads", 1))

    @property
    def eta(self) -> float:
        return float(self.cfg.get("eta", 0.8))

    @property
    def g_lim(self) -> float:
        return float(self.cfg["g_lim"])

    def network_path(self) -> Path:
        return _require(self.base / self.cfg["network"], "network file")

    def instance_path(self) -> Path:
        return _require(self.base / self.cfg["instance"], "instance file")

    def grid(self):
        return load_grid(self.network_path())

    def instance(self):
        return load_instance(self.instance_path())

    def parameter_spec(self, grid, cv=None) -> UncertainParameterSpec:
        unc = self.cfg.get("uncertainty", {})
        names = tuple(unc.get("sources", grid.source_names))
        if cv is None and "sigma" in unc:
            react = grid.source_reactances()
            all_names = grid.source_names
            mean = np.array([react[all_names.index(n)] for n in names])
            return UncertainParameterSpec(names=names, mean=mean,
                                          variance=np.asarray(unc["sigma"], dtype=float) ** 2)
        cv = float(unc.get("cv", 0.05)) if cv is None else cv
        return UncertainParameterSpec.from_cv(grid, cv, names)

    def mc_config(self, samples=None) -> McConfig:
        mc = self.cfg.get("mc", {})
        return McConfig(samples=int(samples if samples is not None else mc.get("samples", 2000)),
                        seed=self.seed,
                        cv_list=tuple(float(c) for c in mc.get("cv_list", (0.05, 0.1, 0.15, 0.2))),
                        n_jobs=self.threads)

    def eval_draws(self) -> int:
        return int(self.cfg.get("mc", {}).get("eval_draws", 300))

    # -- artifacts ---------------------------------------------------------

    def dataset_path(self) -> Path:
        return self.out / "dataset.csv"

    def fit_path(self) -> Path:
        return self.out / "fit.json"

    def moments_path(self) -> Path:
        return self.out / "moments.json"

    def constraint_path(self) -> Path:
        return self.out / "constraint.json"

    def load_dataset(self, grid):
        path = _require(self.dataset_path(), "dataset artifact (run gen-data)")
        return dataset_from_csv(path, grid.source_names)

    def load_artifact(self, path: Path, what: str) -> dict:
        _require(path, what)
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        _check_lineage(payload, self.base, path.name)
        return payload

    def lineage(self, *paths: Path) -> dict:
        out = {}
        for p in paths:
            try:
                key = str(p.relative_to(self.base))
            except ValueError:
                key = str(p)
            out[key] = sha256_file(p)
        return out

    def coefficient_map(self, grid, dataset, nu) -> CoefficientMap:
        reg = self.cfg.get("regression", {})
        cfg = SmoothRegressionConfig(g_lim=self.g_lim, nu=nu,
                                     spatial_scale=reg.get("spatial_scale"),
                                     steepness=float(reg.get("steepness", 0.5)),
                                     big_m=reg.get("big_m"))
        spec_names = tuple(self.cfg.get("uncertainty", {}).get("sources", grid.source_names))
        return CoefficientMap.from_dataset(grid, dataset, cfg, uncertain=spec_names)

    def resolved_nu(self, dataset) -> float:
        nu = self.cfg.get("regression", {}).get("nu")
        if nu is not None:
            return float(nu)
        return choose_nu(dataset.X, dataset.g, self.g_lim)


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------

def cmd_gen_data(ws: Workspace, args) -> int:
    grid = ws.grid()
    n_wind = int(ws.cfg.get("regression", {}).get("wind_levels", 8))
    wind_cap = ws.cfg.get("wind_capacity_pu")
    if wind_cap is None and "instance" in ws.cfg and (ws.base / ws.cfg["instance"]).exists():
        inst = ws.instance()
        wind_cap = inst.wind_capacity / inst.base_power
    dataset = generate_dataset(grid, n_wind,
                               wind_range=(0.0, float(wind_cap)) if wind_cap else None)
    dataset_to_csv(dataset, ws.dataset_path())
    nu = ws.resolved_nu(dataset)
    part = partition(dataset.g, ws.g_lim, nu)
    print(f"wrote {ws.dataset_path()} ({len(dataset)} samples, "
          f"{len(dataset.skipped)} skipped)")
    print(f"class balance at nu={nu:.6g}: |Omega1|={len(part.omega1)} "
          f"|Omega2|={len(part.omega2)} |Omega3|={len(part.omega3)}")
    return EXIT_OK


def cmd_fit(ws: Workspace, args) -> int:
    grid = ws.grid()
    dataset = ws.load_dataset(grid)
    nu = ws.resolved_nu(dataset)
    cfg = SmoothRegressionConfig(g_lim=ws.g_lim, nu=nu,
                                 spatial_scale=ws.cfg.get("regression", {}).get("spatial_scale"),
                                 steepness=float(ws.cfg.get("regression", {}).get("steepness", 0.5)),
                                 big_m=ws.cfg.get("regression", {}).get("big_m")).resolve(dataset.g)
    fit = fit_smooth(dataset.X, dataset.g, cfg)
    if ws.cfg.get("regression", {}).get("prune", False):
        fit = prune_refit(dataset.X, dataset.g, cfg, fit, 0.1)
    save_fit(fit, ws.fit_path(), extra={
        "source_names": list(grid.source_names),
        "feature_names": list(dataset.names),
        "lineage": ws.lineage(ws.dataset_path(), ws.network_path()),
    })
    print(f"wrote {ws.fit_path()} (objective {fit.objective:.6g}, "
          f"{len(fit.active_set)} active rows)")
    return EXIT_OK


def cmd_propagate(ws: Workspace, args) -> int:
    grid = ws.grid()
    if ws.cfg.get("regression", {}).get("prune", False):
        raise CliError("moment propagation works on the full augmented design; "
                       "disable regression.prune for the propagate step")
    fit_payload = ws.load_artifact(ws.fit_path(), "fit artifact (run fit)")
    dataset = ws.load_dataset(grid)
    nu = float(fit_payload["config"]["nu"])
    cmap = ws.coefficient_map(grid, dataset, nu)
    spec = ws.parameter_spec(grid)
    moments = analytic_moments(cmap, spec,
                               mean_correction=ws.cfg.get("mean_correction", "half"))
    payload = moments.to_dict()
    payload["parameter_names"] = list(spec.names)
    payload["lineage"] = ws.lineage(ws.dataset_path(), ws.fit_path())
    _write_json(ws.moments_path(), payload)
    constraint = SocStabilityConstraint.from_moments(moments, ws.g_lim, ws.eta)
    save_constraint(constraint, ws.constraint_path(), extra={
        "source_names": list(grid.source_names),
        "lineage": ws.lineage(ws.dataset_path(), ws.fit_path(), ws.moments_path()),
    })
    print(f"wrote {ws.moments_path()} and {ws.constraint_path()} "
          f"(eta={ws.eta}, {len(constraint.tau)} spectral factors)")
    return EXIT_OK


def cmd_validate_mc(ws: Workspace, args) -> int:
    grid = ws.grid()
    dataset = ws.load_dataset(grid)
    moments_payload = ws.load_artifact(ws.moments_path(), "moments artifact (run propagate)")
    analytic = moments_from_dict(moments_payload)
    fit_payload = ws.load_artifact(ws.fit_path(), "fit artifact")
    cmap = ws.coefficient_map(grid, dataset, float(fit_payload["config"]["nu"]))
    spec = ws.parameter_spec(grid)
    cfg = ws.mc_config(samples=args.samples)
    mc = mc_moments(cmap, spec, cfg)
    report = mape(analytic, mc)
    _write_csv(ws.out / "validate_mc.csv",
               ["coefficient", "mu_analytic", "mu_mc", "e_mu_pct",
                "var_analytic", "var_mc", "e_var_pct"],
               ([r["coefficient"], r["mu_analytic"], r["mu_mc"], r["e_mu_pct"],
                 r["var_analytic"], r["var_mc"], r["e_var_pct"]]
                for r in report.rows(analytic, mc)))
    _write_csv(ws.out / "convergence.csv",
               ["n"] + [f"mu_{i}" for i in range(len(analytic.mu))],
               ([int(n)] + [float(v) for v in mu]
                for n, mu in zip(mc.trace_n, mc.trace_mu)))
    _write_json(ws.out / "validate_mc.json", {
        "mape_mu_pct": report.mape_mu,
        "mape_sigma2_pct": report.mape_sigma2,
        "excluded_coefficients": list(report.excluded),
        "n_samples": mc.n_samples,
        "n_dropped": mc.n_dropped,
        "lineage": ws.lineage(ws.dataset_path(), ws.fit_path(), ws.moments_path()),
    })
    print(f"MC validation (N={mc.n_samples}): MAPE_mu={report.mape_mu:.3f}% "
          f"MAPE_sigma2={report.mape_sigma2:.3f}% ({mc.n_dropped} dropped)")
    return EXIT_OK


def cmd_cv_sweep(ws: Workspace, args) -> int:
    grid = ws.grid()
    dataset = ws.load_dataset(grid)
    fit_payload = ws.load_artifact(ws.fit_path(), "fit artifact")
    cmap = ws.coefficient_map(grid, dataset, float(fit_payload["config"]["nu"]))
    cfg = ws.mc_config(samples=args.samples)
    rows = cv_sweep(cmap, cfg)
    _write_csv(ws.out / "cv_sweep.csv", ["cv_pct", "mape_mu_pct", "mape_sigma2_pct"],
               ([r.cv * 100.0, r.mape_mu, r.mape_sigma2] for r in rows))
    for r in rows:
        print(f"CV {r.cv * 100:5.1f}%  MAPE_mu {r.mape_mu:7.3f}%  "
              f"MAPE_sigma2 {r.mape_sigma2:7.3f}%")
    return EXIT_OK


def _stability_from_mode(ws: Workspace, mode: str):
    if mode == "none":
        return None, None
    payload = ws.load_artifact(ws.constraint_path(), "constraint artifact (run propagate)")
    constraint = constraint_from_dict(payload)
    if mode == "det":
        return DeterministicStability(constraint.mu, constraint.g_lim), constraint
    if mode == "dro":
        return constraint, constraint
    raise CliError(f"unknown stability mode {mode!r}")


def cmd_schedule(ws: Workspace, args) -> int:
    mode = ws.cfg.get("mode", "dro")
    grid = ws.grid()
    instance = ws.instance()
    stability, constraint = _stability_from_mode(ws, mode)
    schedule = solve_uc(build_uc(instance, stability))
    spec = ws.parameter_spec(grid)
    rate = sampled_violation_rate(schedule, grid, spec, ws.g_lim,
                                  draws=ws.eval_draws(), seed=ws.seed)
    if constraint is not None:
        g_lim_eq = equivalent_limit(constraint, schedule.augmented_decisions())
    else:
        g_lim_eq = None

    names = schedule.unit_names
    header = (["step"] + [f"x_{n}" for n in names] + [f"p_{n}_mw" for n in names]
              + ["wind_mw", "shed_mw", "margin"])
    rows = []
    T = schedule.commitment.shape[1]
    for t in range(T):
        rows.append([t]
                    + [int(v) for v in schedule.commitment[:, t]]
                    + [float(v) for v in schedule.dispatch[0, :, t]]
                    + [float(schedule.wind[0, t]), float(schedule.shed[0, t]),
                       float(schedule.margins[0, t])])
    _write_csv(ws.out / "schedule.csv", header, rows)
    lineage_paths = [ws.instance_path(), ws.network_path()]
    if mode != "none":
        lineage_paths.append(ws.constraint_path())
    _write_json(ws.out / "schedule.json", {
        "mode": mode,
        "cost": schedule.cost,
        "cost_per_hour": schedule.cost_per_hour,
        "violation_rate": rate,
        "g_lim_eq": g_lim_eq,
        "nodes": schedule.nodes,
        "gap": schedule.gap,
        "gap_flagged": schedule.gap_flagged,
        "eval_draws": ws.eval_draws(),
        "lineage": ws.lineage(*lineage_paths),
    })
    print(f"mode={mode}: cost {schedule.cost:.4f} (per hour {schedule.cost_per_hour:.4f}), "
          f"violation rate {rate:.4f}, g_lim_eq "
          f"{'n/a' if g_lim_eq is None else f'{g_lim_eq:.4f}'}")
    return EXIT_OK


def cmd_evaluate(ws: Workspace, args) -> int:
    grid = ws.grid()
    sched_json = ws.load_artifact(ws.out / "schedule.json", "schedule artifact (run schedule)")
    csv_path = _require(ws.out / "schedule.csv", "schedule table")
    commitments, wind = _read_schedule_csv(csv_path, grid.source_names)
    spec = ws.parameter_spec(grid)
    T = commitments.shape[1]

    from .scheduler import Schedule  # lightweight reconstruction for evaluation
    schedule = Schedule(commitment=commitments, startup=np.zeros_like(commitments),
                        dispatch=np.zeros((1, commitments.shape[0], T)),
                        wind=wind[None, :], shed=np.zeros((1, T)), cost=float(sched_json["cost"]),
                        margins=np.full((1, T), np.nan), mode=sched_json["mode"],
                        bound=0.0, nodes=0, gap=0.0,
                        base_power=ws.instance().base_power, unit_names=grid.source_names)
    nominal = evaluate_schedule(schedule, grid, grid.source_reactances(), ws.g_lim)
    draws = ws.eval_draws()
    freq = np.zeros(T)
    names = grid.source_names
    idx = [names.index(n) for n in spec.names]
    for i in range(draws):
        rng = np.random.default_rng(np.random.SeedSequence((ws.seed, i)))
        p = draw_parameters(spec, rng)
        react = grid.source_reactances()
        react[idx] = p
        freq += evaluate_schedule(schedule, grid, react, ws.g_lim).violated
    freq /= draws
    _write_csv(ws.out / "evaluate.csv",
               ["step", "g_nominal", "violated_nominal", "violation_freq"],
               ([t, float(nominal.values[t]), int(nominal.violated[t]), float(freq[t])]
                for t in range(T)))
    _write_json(ws.out / "evaluate.json", {
        "violation_rate_nominal": nominal.rate,
        "violation_rate_sampled": float(freq.mean()),
        "draws": draws,
        "lineage": ws.lineage(ws.out / "schedule.csv", ws.network_path()),
    })
    print(f"nominal violation rate {nominal.rate:.4f}; "
          f"sampled ({draws} draws) {freq.mean():.4f}")
    return EXIT_OK


def _read_schedule_csv(path: Path, unit_names):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    flag_cols = [header.index(f"x_{n}") for n in unit_names]
    wind_col = header.index("wind_mw")
    commitments = np.array([[int(r[c]) for r in rows] for c in flag_cols])
    wind = np.array([float(r[wind_col]) for r in rows])
    return commitments, wind


def cmd_margin_baseline(ws: Workspace, args) -> int:
    grid = ws.grid()
    instance = ws.instance()
    payload = ws.load_artifact(ws.constraint_path(), "constraint artifact (run propagate)")
    constraint = constraint_from_dict(payload)
    spec = ws.parameter_spec(grid)
    dro_cost = None
    sched_path = ws.out / "schedule.json"
    if sched_path.exists():
        with open(sched_path, "r", encoding="utf-8") as fh:
            sched_json = json.load(fh)
        if sched_json.get("mode") == "dro":
            dro_cost = float(sched_json["cost"])
    if dro_cost is None:
        dro_cost = solve_uc(build_uc(instance, constraint)).cost
    report = fixed_margin_baseline(instance, constraint.mu, ws.g_lim, grid, spec,
                                   margins=ws.cfg.get("margins", [0, 5, 10, 15, 20, 25]),
                                   eval_draws=ws.eval_draws(), seed=ws.seed,
                                   dro_cost=dro_cost)
    _write_csv(ws.out / "margin_baseline.csv",
               ["margin_pct", "cost", "violation_rate"],
               ([r.margin_pct, r.cost, r.violation_rate] for r in report.rows))
    _write_json(ws.out / "margin_baseline.json", {
        "zero_violation_margin_pct": report.zero_violation_margin,
        "zero_violation_cost": report.zero_violation_cost,
        "dro_cost": report.dro_cost,
        "lineage": ws.lineage(ws.instance_path(), ws.network_path(), ws.constraint_path()),
    })
    for r in report.rows:
        print(f"margin {r.margin_pct:5.1f}%  cost {r.cost:10.4f}  "
              f"violation {r.violation_rate:.4f}")
    if report.zero_violation_margin is not None:
        print(f"smallest zero-violation margin {report.zero_violation_margin}% "
              f"costs {report.zero_violation_cost:.4f} vs robust cost {report.dro_cost:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stabsched",
                                     description=__doc__.splitlines()[0])
    parser.add_argument("--config", required=True, help="pipeline configuration JSON")
    parser.add_argument("--seed", type=int, default=None, help="root random seed override")
    parser.add_argument("--threads", type=int, default=None, help="worker cap override")
    parser.add_argument("--eta", type=float, default=None, help="confidence level override")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", help="generate and label the training dataset")
    sub.add_parser("fit", help="fit the smooth boundary surrogate")
    sub.add_parser("propagate", help="propagate parameter moments to coefficient moments")
    p = sub.add_parser("validate-mc", help="retraining Monte Carlo vs analytic moments")
    p.add_argument("--samples", type=int, default=None)
    p = sub.add_parser("cv-sweep", help="error table over coefficients of variation")
    p.add_argument("--samples", type=int, default=None)
    p = sub.add_parser("schedule", help="solve the commitment problem")
    p.add_argument("--mode", choices=["none", "det", "dro"], default=None)
    sub.add_parser("evaluate", help="true-index audit of an existing schedule")
    sub.add_parser("margin-baseline", help="fixed-margin operating strategy sweep")
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit": cmd_fit,
    "propagate": cmd_propagate,
    "validate-mc": cmd_validate_mc,
    "cv-sweep": cmd_cv_sweep,
    "schedule": cmd_schedule,
    "evaluate": cmd_evaluate,
    "margin-baseline": cmd_margin_baseline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ws = Workspace(args)
        return _COMMANDS[args.command](ws, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
