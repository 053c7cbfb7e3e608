"""Acceptance gate: every criterion at its stated tolerance, one line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the PASS lines.
"""
import math
import time

import numpy as np

from stabsched.chance import SocStabilityConstraint, evaluate_soc, k_eta
from stabsched.network import evaluate_gscr
from stabsched.qp import solve_qp
from stabsched.regression import fit_hard, generate_dataset, partition
from stabsched.scheduler import (
    DeterministicStability,
    UcInstance,
    UnitParams,
    build_uc,
    solve_uc,
)
from stabsched.sensitivity import (
    UncertainParameterSpec,
    analytic_moments,
    dK_dg,
    dg_dp,
)
from stabsched.validation import (
    McConfig,
    cv_sweep,
    enumerate_uc,
    fixed_margin_baseline,
    mape,
    mc_moments,
    sampled_violation_rate,
)

from test_qp import enumerate_qp

G_LIM = 2.5


def report(name, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_criterion_1_delta_method_fidelity(desk_map, spec_cv5, analytic_cv5):
    """Analytic moments vs 15,000-sample retraining Monte Carlo at CV = 5%."""
    assert desk_map.n_params >= 3
    start = time.time()
    mc = mc_moments(desk_map, spec_cv5, McConfig(samples=15_000, seed=0))
    rep = mape(analytic_cv5, mc)
    elapsed = time.time() - start
    # running-mean convergence: the 10k estimate sits within 1% of the final
    drift = np.abs((mc.running_mean(10_000) - mc.mu) / mc.mu).max()
    ok = rep.mape_mu <= 10.0 and rep.mape_sigma2 <= 12.0 and drift <= 0.01
    report("criterion 1 (moment fidelity)", ok,
           f"MAPE_mu {rep.mape_mu:.3f}% (<=10), MAPE_sigma2 {rep.mape_sigma2:.3f}% "
           f"(<=12), 10k-vs-15k mean drift {100 * drift:.3f}% (<=1), N=15000, {elapsed:.0f}s")


def test_criterion_2_cv_degradation_trend(desk_map):
    """Mean error nondecreasing over variation coefficients 5..20%."""
    start = time.time()
    rows = cv_sweep(desk_map, McConfig(samples=2000, seed=0),
                    cvs=(0.05, 0.10, 0.15, 0.20))
    elapsed = time.time() - start
    mus = [r.mape_mu for r in rows]
    ok = all(b >= a - 1e-12 for a, b in zip(mus, mus[1:]))
    report("criterion 2 (variation trend)", ok,
           "MAPE_mu " + " -> ".join(f"{m:.2f}%" for m in mus) + f", {elapsed:.0f}s")


def test_criterion_3_gradient_oracles(desk_grid, desk_map, desk_fit, rng):
    """Index derivative vs central differences; coefficient sensitivity vs retrain."""
    start = time.time()
    worst_dg = 0.0
    checked = 0
    while checked < 100:
        flags = rng.integers(0, 2, 4)
        if flags.sum() == 0:
            continue
        live = np.flatnonzero(flags)
        j = int(live[rng.integers(0, len(live))])
        grid = desk_grid.with_commitments(flags).with_wind(float(rng.uniform(0.1, 1.6)))
        analytic = dg_dp(grid, j)
        react = grid.source_reactances()
        h = 1e-6 * react[j]
        up, dn = react.copy(), react.copy()
        up[j] += h
        dn[j] -= h
        numeric = (evaluate_gscr(grid.with_reactances(up))
                   - evaluate_gscr(grid.with_reactances(dn))) / (2 * h)
        worst_dg = max(worst_dg, abs(analytic - numeric) / max(abs(numeric), 1e-12))
        checked += 1

    labels = desk_map.labels()
    jac = dK_dg(desk_fit, desk_map.X, labels, desk_map.config, cmap=desk_map)
    scale = np.linalg.norm(jac.dK_dg, axis=0).max()
    worst_dk = 0.0
    h = 1e-5
    for i in rng.choice(len(labels), 25, replace=False):
        up, dn = labels.copy(), labels.copy()
        up[i] += h
        dn[i] -= h
        fit_up, fit_dn = desk_map.fit_labels(up), desk_map.fit_labels(dn)
        if (fit_up.active_set != desk_fit.active_set
                or fit_dn.active_set != desk_fit.active_set):
            continue
        numeric = (fit_up.coefficients - fit_dn.coefficients) / (2 * h)
        err = np.linalg.norm(jac.dK_dg[:, i] - numeric)
        worst_dk = max(worst_dk, err / max(np.linalg.norm(numeric), 1e-3 * scale))
    elapsed = time.time() - start
    ok = worst_dg <= 1e-5 and worst_dk <= 1e-3
    report("criterion 3 (gradient oracles)", ok,
           f"index-derivative rel {worst_dg:.2e} (<=1e-5), "
           f"coefficient-sensitivity rel {worst_dk:.2e} (<=1e-3), {elapsed:.0f}s")


def test_criterion_4_qp_kkt_correctness(rng, desk_map, desk_fit, desk_dataset):
    """Solver vs exhaustive active-set enumeration; KKT residuals of real fits."""
    worst = 0.0
    for _ in range(50):
        n, m = 5, 8
        root = rng.normal(size=(n, n))
        H = root @ root.T + np.eye(n)
        f = rng.normal(size=n)
        A = rng.normal(size=(m, n))
        slack = rng.uniform(0.1, 1.0, size=m) * rng.choice([0.0, 1.0], size=m, p=[0.3, 0.7])
        b = A @ rng.normal(size=n) + slack
        res = solve_qp(H, f, A, b)
        worst = max(worst, abs(res.objective - enumerate_qp(H, f, A, b)))

    residuals = [desk_fit.kkt_residual]
    part = partition(desk_dataset.g, G_LIM, 1.0)
    residuals.append(fit_hard(desk_dataset.X, desk_dataset.g, part).kkt_residual)
    ok = worst <= 1e-7 and max(residuals) <= 1e-7
    report("criterion 4 (QP correctness)", ok,
           f"enumeration gap {worst:.2e} (<=1e-7) over 50 problems, "
           f"fit KKT residual {max(residuals):.2e} (<=1e-7)")


def test_criterion_5_hard_fit_conservative(desk_grid, desk_dataset):
    """No misclassification outside the boundary band, on every dataset built."""
    datasets = [desk_dataset,
                generate_dataset(desk_grid, n_wind=5, wind_range=(0.0, 1.6)),
                generate_dataset(desk_grid, n_wind=3, wind_range=(0.2, 1.2))]
    bad = 0
    for ds in datasets:
        for nu in (0.6, 1.0, 2.0):
            part = partition(ds.g, G_LIM, nu)
            if len(part.omega2) == 0:
                continue
            fit = fit_hard(ds.X, ds.g, part)
            pred = ds.X @ fit.coefficients
            bad += int(np.sum(pred[part.omega1] >= G_LIM))
            bad += int(np.sum(pred[part.omega3] < G_LIM - 1e-9))
    report("criterion 5 (conservative hard fit)", bad == 0,
           f"{bad} misclassified samples outside the band (must be 0)")


def test_criterion_6_soc_distributional_guarantee(analytic_cv5, desk_dataset, rng):
    """Accepted points violate the true linear rule with frequency <= 1 - eta."""
    eta = 0.8
    start = time.time()
    con = SocStabilityConstraint.from_moments(analytic_cv5, G_LIM, eta)
    accepted = [x for x in desk_dataset.X if evaluate_soc(con, x).satisfied]
    assert accepted
    vals, vecs = np.linalg.eigh(analytic_cv5.sigma)
    root = vecs * np.sqrt(np.clip(vals, 0, None))[None, :]
    n = 50_000
    worst = 0.0
    families = {
        "gaussian": rng.normal(size=(n, len(con.mu))),
        "uniform": rng.uniform(-math.sqrt(3), math.sqrt(3), size=(n, len(con.mu))),
        "two-point": rng.choice([-1.0, 1.0], size=(n, len(con.mu))),
    }
    for name, eps in families.items():
        draws = analytic_cv5.mu[None, :] + eps @ root.T
        for x in accepted:
            freq = float(np.mean(draws @ x < G_LIM))
            sig = math.sqrt(max(freq * (1 - freq), 1e-12) / n)
            margin = (1 - eta) + 3 * sig
            worst = max(worst, freq - margin)
    elapsed = time.time() - start
    report("criterion 6 (robust guarantee)", worst <= 0.0,
           f"worst excess violation {worst:.4f} (<=0) over 3 families x "
           f"{len(accepted)} accepted points, {elapsed:.0f}s")


def _tiny_instance():
    units = (
        UnitParams(name="sg1", bus=1, p_min=10, p_max=80, no_load_cost=4.5,
                   marginal_cost=47.0, startup_cost=10.0, min_up=2, min_down=1),
        UnitParams(name="sg2", bus=2, p_min=10, p_max=60, no_load_cost=3.0,
                   marginal_cost=60.0, startup_cost=5.0, min_up=2, min_down=1),
        UnitParams(name="sg3", bus=3, p_min=5, p_max=50, no_load_cost=3.0,
                   marginal_cost=200.0),
    )
    return UcInstance(demand=np.array([60.0, 80.0, 70.0, 75.0]),
                      wind_available=np.array([30.0, 40.0, 20.0, 35.0]),
                      units=units, shed_cost=3000.0, base_power=100.0,
                      wind_capacity=160.0)


def test_criterion_7_uc_exactness():
    """Branch and bound equals exhaustive enumeration; zero covariance is
    bitwise identical to the deterministic mode."""
    start = time.time()
    inst = _tiny_instance()
    k = 2 + 2 * len(inst.units)
    mu = np.concatenate([[0.5], np.full(3, 1.2), [0.9], np.full(3, -0.15)])
    root = np.linspace(0.02, 0.06, k)
    sigma = np.outer(root, root) + np.diag(np.full(k, 1e-4))
    from stabsched.chance import spectral_factorize

    tau, q = spectral_factorize(sigma)
    det = DeterministicStability(mu, 1.4)
    dro = SocStabilityConstraint(mu=mu, tau=tau, q=q, g_lim=1.4, eta=0.8, k=k_eta(0.8))
    gaps = []
    for stability in (None, det, dro):
        problem = build_uc(inst, stability)
        sched = solve_uc(problem)
        reference, _ = enumerate_uc(problem)
        gaps.append(abs(sched.cost - reference))
    zero = SocStabilityConstraint(mu=mu, tau=np.zeros(0), q=np.zeros((0, k)),
                                  g_lim=1.4, eta=0.8, k=k_eta(0.8))
    a = solve_uc(build_uc(inst, det))
    b = solve_uc(build_uc(inst, zero))
    bitwise = (np.array_equal(a.commitment, b.commitment) and a.cost == b.cost
               and np.array_equal(a.dispatch, b.dispatch))
    elapsed = time.time() - start
    ok = max(gaps) <= 1e-5 and bitwise
    report("criterion 7 (commitment exactness)", ok,
           f"enumeration gaps {['%.2e' % g for g in gaps]} across modes, "
           f"zero-covariance bitwise match {bitwise}, {elapsed:.0f}s")


def test_criterion_8_case_study_trends(desk_grid, desk_map, desk_instance):
    """Cost ordering, violation-rate separation and the fixed-margin comparison."""
    start = time.time()
    eta = 0.8
    spec = UncertainParameterSpec.from_cv(desk_grid, 0.10)
    moments = analytic_moments(desk_map, spec)
    con = SocStabilityConstraint.from_moments(moments, G_LIM, eta)
    det = DeterministicStability(moments.mu, G_LIM)

    schedules, rates = {}, {}
    for case, stability in (("I", None), ("II", det), ("III", con)):
        schedules[case] = solve_uc(build_uc(desk_instance, stability))
        rates[case] = sampled_violation_rate(schedules[case], desk_grid, spec, G_LIM,
                                             draws=300, seed=11)
    costs = {c: s.cost for c, s in schedules.items()}
    ordering = costs["I"] <= costs["II"] + 1e-9 and costs["II"] <= costs["III"] + 1e-9
    separation = rates["III"] <= (1 - eta) and rates["II"] > (1 - eta)

    baseline = fixed_margin_baseline(desk_instance, moments.mu, G_LIM, desk_grid, spec,
                                     margins=[0, 5, 10, 15, 20, 25], eval_draws=300,
                                     seed=11, dro_cost=costs["III"])
    assert baseline.rows[0].cost == costs["II"]   # zero margin is the plain case
    margin_ok = (baseline.zero_violation_cost is not None
                 and costs["III"] <= baseline.zero_violation_cost + 1e-9)
    elapsed = time.time() - start
    ok = ordering and separation and margin_ok
    report("criterion 8 (case-study trends)", ok,
           f"costs I/II/III = {costs['I']:.2f}/{costs['II']:.2f}/{costs['III']:.2f}, "
           f"violation II {rates['II']:.3f} > {1-eta:.2f} >= III {rates['III']:.3f}, "
           f"zero-violation margin cost {baseline.zero_violation_cost:.2f} >= "
           f"robust {costs['III']:.2f}, {elapsed:.0f}s")


def test_criterion_9_k_eta_table():
    """Robustness multiplier reference values, exactly."""
    vals = (k_eta(0.5), k_eta(0.9), k_eta(0.875, symmetric=True))
    ok = (vals[0] == 1.0
          and abs(vals[1] - 3.0) <= 4 * np.finfo(float).eps
          and abs(vals[2] - 2.0) <= 4 * np.finfo(float).eps)
    report("criterion 9 (multiplier table)", ok,
           f"k(0.5)={vals[0]}, k(0.9)={vals[1]}, k_sym(0.875)={vals[2]}")
