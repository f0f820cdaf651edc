"""Acceptance gate: one test per release criterion, each printing the
measured numbers it judged.  Heavy desk computations are shared through
module-scoped fixtures so the whole gate stays under a minute."""
import time
from itertools import combinations, product

import numpy as np
import pytest
import scipy.sparse as sp

from lvbess.benders import run_benders
from lvbess.cli import linearization_sweep
from lvbess.economics import battery_lifetime, evaluate_run, irr, npv
from lvbess.heuristic import run_heuristic_year
from lvbess.lp import (GE, LE, LpProblem, LpStatus, SolverConfig,
                       check_solution, solve_lp)
from lvbess.mpc import MpcConfig, extract_z_duals, run_receding_horizon
from lvbess.multiperiod import (FixedCapacity, assemble_multiperiod,
                                solve_monolithic_sizing)
from lvbess.scenarios import build_system, desk_scenario
from lvbess.storage import replay_soe

N = desk_scenario().n_steps          # 48: two days at one hour


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def monolithic(desk_system):
    return solve_monolithic_sizing(desk_system, N)


@pytest.fixture(scope="module")
def open_loop(desk_system):
    """Decomposed plan with full-length windows (exact cuts), timed."""
    cfg = MpcConfig(horizon_steps=N, update_steps=N, step_hours=1.0,
                    total_steps=N)
    t0 = time.perf_counter()
    plan = run_benders(desk_system, cfg, epsilon=0.01)
    return plan, time.perf_counter() - t0


@pytest.fixture(scope="module")
def horizon_plans(desk_system):
    """Receding-horizon plans at 6 h and 24 h lookahead, 6 h updates."""
    common = dict(update_steps=6, step_hours=1.0, total_steps=N)
    p6 = run_benders(desk_system,
                     MpcConfig(horizon_steps=6, **common), epsilon=0.05)
    p24 = run_benders(desk_system,
                      MpcConfig(horizon_steps=24, **common), epsilon=0.05)
    return p6, p24


@pytest.fixture(scope="module")
def h24_runs(desk_system, horizon_plans):
    """Operate the H=24 plan's capacities: optimizer, rules, and no-storage
    baseline on identical inputs."""
    _, p24 = horizon_plans
    cfg = MpcConfig(horizon_steps=24, update_steps=6, step_hours=1.0,
                    total_steps=N)
    mpc = run_receding_horizon(desk_system, cfg, p24.z_kwh)
    heur = run_heuristic_year(desk_system, p24.z_kwh)
    base = run_receding_horizon(desk_system, cfg, np.zeros(2))
    return p24, mpc, heur, base


# --------------------------------------------------------------- criteria

def test_criterion_01_decomposed_plan_matches_monolithic(open_loop,
                                                         monolithic):
    plan, runtime = open_loop
    rel = abs(plan.z_up - monolithic.objective) / abs(monolithic.objective)
    print(f"plan {plan.z_up:.6f} vs monolithic {monolithic.objective:.6f} "
          f"-> rel {rel:.5f}; runtime {runtime:.2f} s")
    assert rel <= 0.01
    assert runtime < 60.0


def test_criterion_02_lower_bound_monotone_and_terminates(open_loop):
    plan, _ = open_loop
    zd = [r.z_down for r in plan.history]
    print(f"desk iteration count: {plan.iterations} "
          f"(z_down {zd[0]:.4f} -> {zd[-1]:.4f})")
    assert all(b >= a - 1e-9 for a, b in zip(zd, zd[1:]))
    assert plan.converged and plan.iterations <= 100


def test_criterion_03_prohibitive_cost_places_nothing():
    system = build_system(desk_scenario(), 1000.0)
    cfg = MpcConfig(horizon_steps=N, update_steps=N, step_hours=1.0,
                    total_steps=N)
    plan = run_benders(system, cfg, epsilon=0.01)
    print(f"total capacity at 1000 EUR/kWh: {plan.z_kwh.sum():.6f} kWh")
    assert plan.z_kwh.sum() <= 0.01


def test_criterion_04_capacity_non_increasing_in_price():
    cfgN = MpcConfig(horizon_steps=N, update_steps=N, step_hours=1.0,
                     total_steps=N)
    totals = []
    for cost in range(50, 501, 50):
        system = build_system(desk_scenario(), float(cost))
        # tight gap: the default tolerance leaves the capacity split loose
        # inside the LP's flat region, which would fake non-monotonicity
        plan = run_benders(system, cfgN, epsilon=1e-6)
        totals.append(plan.z_kwh.sum())
    print("totals per price:",
          " ".join(f"{t:.3f}" for t in totals))
    assert all(b <= a + 1e-3 for a, b in zip(totals, totals[1:]))


def test_criterion_05_short_horizon_is_never_better(horizon_plans):
    p6, p24 = horizon_plans
    print(f"H=6:  z={p6.z_kwh.sum():.3f} kWh, profit {p6.profit_eur:.4f}")
    print(f"H=24: z={p24.z_kwh.sum():.3f} kWh, profit {p24.profit_eur:.4f}")
    assert p6.z_kwh.sum() <= p24.z_kwh.sum() + 1e-3
    assert p6.profit_eur <= p24.profit_eur + 1e-6


def test_criterion_06_optimizer_beats_the_heuristic(desk_system, h24_runs):
    _, mpc, heur, _ = h24_runs
    mpc_bill = float(mpc.trajectory.y_eur_h.sum()) * desk_system.t_hours
    print(f"energy bill: optimizer {mpc_bill:.4f} vs "
          f"rules {heur.energy_cost_eur:.4f} EUR")
    # lower bill == higher revenue; strict on the desk inputs, where the
    # tariff spread leaves money on the table for a price-blind policy
    assert mpc_bill < heur.energy_cost_eur


def test_criterion_07_capacity_duals_match_finite_differences(desk_system):
    def window_cost(z):
        mpp = assemble_multiperiod(desk_system, 12, 24, np.zeros(2),
                                   FixedCapacity(z))
        sol = solve_lp(mpp.problem, SolverConfig())
        assert sol.status is LpStatus.OPTIMAL
        return sol.objective_value, sol, mpp

    z0 = np.array([2.0, 3.0])
    j0, sol, mpp = window_cost(z0)
    lam = extract_z_duals(sol, mpp)
    delta = 1e-3
    for s in range(2):
        zp = z0.copy()
        zp[s] += delta
        fd = (window_cost(zp)[0] - j0) / delta
        rel = abs(fd - lam[s]) / max(1.0, abs(lam[s]))
        print(f"unit {s}: dual {lam[s]:.8f}, fd {fd:.8f}, rel {rel:.2e}")
        assert rel <= 1e-4


def _random_lp(rng):
    """Feasible by construction (interior point), bounded by finite boxes.
    Small-variable instances keep few rows so they stay enumerable."""
    n = int(rng.integers(2, 31))
    m = int(rng.integers(1, 4)) if n <= 10 else int(rng.integers(1, 13))
    a = rng.normal(size=(m, n))
    x0 = rng.uniform(-1.0, 1.0, n)
    senses = [LE if rng.random() < 0.7 else GE for _ in range(m)]
    slack = rng.uniform(0.1, 1.0, m)
    b = a @ x0 + np.where(np.array(senses) == LE, slack, -slack)
    lb = x0 - rng.uniform(0.5, 2.0, n)
    ub = x0 + rng.uniform(0.5, 2.0, n)
    return LpProblem.build(c=rng.normal(size=n), a_in=a, b_in=b,
                           senses=senses, lb=lb, ub=ub), n


def _enumerate_vertices_minimum(prob, feas_tol=1e-7):
    """Exhaustive check: visit every candidate vertex (k rows active, the
    remaining variables at a bound), keep the feasible ones, take the min.
    The boxes make the feasible set a polytope, so the optimum is there."""
    c, lb, ub = prob.c, prob.lb, prob.ub
    a = prob.a_in.toarray() if sp.issparse(prob.a_in) else np.asarray(prob.a_in)
    b = np.asarray(prob.b_in, dtype=float)
    n, m = len(c), len(b)
    sign = np.where(np.array(prob.senses) == LE, 1.0, -1.0)
    a_le, b_le = sign[:, None] * a, sign * b
    best = np.inf
    patterns = {}
    for k in range(0, min(m, n) + 1):
        for rows in combinations(range(m), k):
            ar, br = a[list(rows)], b[list(rows)]
            for free in combinations(range(n), k):
                fix = [j for j in range(n) if j not in free]
                nf = len(fix)
                if nf not in patterns:
                    patterns[nf] = (np.array(list(product((0, 1), repeat=nf)),
                                             dtype=float)
                                    if nf else np.zeros((1, 0)))
                x_fix = (np.where(patterns[nf] == 0, lb[fix], ub[fix])
                         if nf else patterns[nf])
                x = np.empty((n, x_fix.shape[0]))
                if fix:
                    x[fix, :] = x_fix.T
                if k:
                    rhs = br[:, None] - (ar[:, fix] @ x_fix.T if nf else 0.0)
                    try:
                        x[list(free), :] = np.linalg.solve(ar[:, list(free)],
                                                           rhs)
                    except np.linalg.LinAlgError:
                        continue            # singular active set: not a vertex
                ok = (np.all(x >= lb[:, None] - feas_tol, axis=0)
                      & np.all(x <= ub[:, None] + feas_tol, axis=0)
                      & np.all(a_le @ x <= b_le[:, None] + feas_tol, axis=0))
                if ok.any():
                    best = min(best, float((c @ x[:, ok]).min()))
    return best


def test_criterion_08_lp_certification_on_1000_instances():
    rng = np.random.default_rng(2024)
    worst_gap = worst_enum = 0.0
    n_enum = 0
    for i in range(1000):
        prob, n = _random_lp(rng)
        sol = solve_lp(prob, SolverConfig())
        assert sol.status is LpStatus.OPTIMAL, (i, sol.status)
        report = check_solution(prob, sol)
        assert report.passed, i
        assert abs(report.duality_gap) <= 1e-6, (i, report.duality_gap)
        worst_gap = max(worst_gap, abs(report.duality_gap))
        if n <= 10:
            n_enum += 1
            ref = _enumerate_vertices_minimum(prob)
            diff = abs(sol.objective_value - ref)
            assert diff <= 1e-6, (i, diff)
            worst_enum = max(worst_enum, diff)
    print(f"1000 instances: worst duality gap {worst_gap:.2e}; "
          f"{n_enum} enumerated exhaustively, worst diff {worst_enum:.2e}")


def test_criterion_09_linearization_accuracy_on_the_shipped_grid(cigre):
    report = linearization_sweep(cigre, samples=200, seed=1, loading=0.3)
    print(f"voltage error {report['max_voltage_error_pu']:.6f} pu "
          f"(limit 0.01); current error "
          f"{report['max_current_error_frac_of_rating']:.6f} of rating "
          f"(limit 0.05); {report['samples_unconverged']} unconverged")
    assert report["voltage_ok"], (
        f"worst voltage sample: {report['worst_voltage_sample']}")
    assert report["current_ok"], (
        f"worst current sample: {report['worst_current_sample']}")


def test_criterion_10_storage_physics_on_optimal_trajectories(desk_system,
                                                              h24_runs):
    p24, mpc, _, _ = h24_runs
    for name, traj in (("receding-horizon", mpc.trajectory),
                       ("plan incumbent", p24.mpc_result.trajectory)):
        j_dis = [traj.gen_names.index(f"{u.name}:dis")
                 for u in desk_system.fleet]
        j_ch = [traj.gen_names.index(f"{u.name}:ch")
                for u in desk_system.fleet]
        e_rep = replay_soe(desk_system.fleet, np.zeros(2),
                           traj.p_gen_kw[:, j_dis] / 100.0,
                           traj.p_gen_kw[:, j_ch] / 100.0,
                           desk_system.t_hours)
        continuity = np.max(np.abs(e_rep - traj.e_kwh))
        overfill = np.max(traj.e_kwh - traj.z_kwh)
        underrun = -traj.e_kwh.min()
        simultaneous = np.minimum(traj.p_gen_kw[:, j_dis],
                                  -traj.p_gen_kw[:, j_ch]).max()
        print(f"{name}: continuity {continuity:.2e}, overfill "
              f"{overfill:.2e}, underrun {underrun:.2e}, "
              f"simultaneous {simultaneous:.2e} kW")
        assert continuity <= 1e-9
        assert overfill <= 1e-9 and underrun <= 1e-9
        assert simultaneous <= 1e-6


def test_criterion_11_economic_identities(desk_system, h24_runs):
    life = battery_lifetime(0.25, 10.0)          # 2.5 %/yr against EoL 0.8
    assert life.years == 8
    assert battery_lifetime(0.0, 10.0).years == 10   # calendar cap
    for m, inv, dj in [(1, 100.0, 110.0), (8, 3000.0, 417.3),
                       (10, 1000.0, 163.75)]:
        assert npv(inv, dj, m, 0.0) == m * dj - inv  # exact, not approx

    r = irr(1000.0, 163.75, 10)
    assert r.converged
    assert abs(npv(1000.0, 163.75, 10, r.rate)) <= 1e-6 * 1000.0

    _, mpc, _, base = h24_runs
    econ = evaluate_run(desk_system, mpc.trajectory, base.trajectory)
    assert econ.npv_eur == (econ.lifetime_years * econ.delta_j_eur
                            - econ.investment_eur)
    print(f"desk evaluation: dJ {econ.delta_j_eur:.2f} EUR/yr, lifetime "
          f"{econ.lifetime_years} yr, irr {econ.irr:.4f} "
          f"(converged={econ.irr_converged})")
    if econ.irr_converged:
        resid = npv(econ.investment_eur, econ.delta_j_eur,
                    econ.lifetime_years, econ.irr)
        print(f"npv at the root: {resid:.2e} EUR")
        assert abs(resid) <= 1e-6 * econ.investment_eur


# main feeder then laterals: (start, end, ohm/km, ohm/km, m, A)
BENCHMARK_BRANCHES = [
    ("R1", "R2", 0.405, 0.205, 35.0, 398.0),
    ("R2", "R3", 0.405, 0.205, 35.0, 398.0),
    ("R3", "R4", 0.405, 0.205, 35.0, 398.0),
    ("R4", "R5", 0.405, 0.205, 35.0, 398.0),
    ("R5", "R6", 0.405, 0.205, 35.0, 398.0),
    ("R6", "R7", 0.405, 0.205, 35.0, 398.0),
    ("R7", "R8", 0.405, 0.205, 35.0, 398.0),
    ("R8", "R9", 0.405, 0.205, 35.0, 398.0),
    ("R9", "R10", 0.405, 0.205, 35.0, 398.0),
    ("R3", "R11", 2.05, 0.212, 35.0, 158.0),
    ("R4", "R12", 2.05, 0.212, 30.0, 158.0),
    ("R12", "R13", 2.05, 0.212, 35.0, 158.0),
    ("R13", "R14", 2.05, 0.212, 35.0, 158.0),
    ("R14", "R15", 2.05, 0.212, 35.0, 158.0),
    ("R6", "R16", 2.05, 0.212, 30.0, 158.0),
    ("R9", "R17", 2.05, 0.212, 30.0, 158.0),
    ("R10", "R18", 2.05, 0.212, 30.0, 158.0),
]

# (step, expected import EUR/MWh) on the hourly year that starts Monday 00:00
TARIFF_SPOT_CHECKS = [
    (5, 131.5),      # Monday 05:00, before the window opens
    (6, 246.0),      # Monday 06:00, first high hour
    (21, 246.0),     # Monday 21:00, last high hour
    (22, 131.5),     # Monday 22:00, end hour is exclusive
    (58, 246.0),     # Wednesday 10:00
    (96, 131.5),     # Friday 00:00
    (132, 246.0),    # Saturday 12:00, Saturdays count as high days
    (154, 131.5),    # Sunday 10:00, Sundays never do
    (167, 131.5),    # Sunday 23:00
    (174, 246.0),    # second Monday 06:00, the week pattern repeats
]


def test_criterion_12_shipped_data_fidelity(cigre, desk_system):
    assert cigre.n_branch == len(BENCHMARK_BRANCHES) == 17
    for br, expect in zip(cigre.branches, BENCHMARK_BRANCHES):
        got = (br.start, br.end, br.r_ohm_per_km, br.x_ohm_per_km,
               br.length_m, br.i_max_a)
        assert got == expect, (got, expect)
    print("all 17 branch rows match field-for-field")
    tariff = desk_system.tariff
    for step, expect_import in TARIFF_SPOT_CHECKS:
        imp, exp = tariff.tariff_at(step)
        assert (imp, exp) == (expect_import, 50.0), (step, imp)
    print(f"{len(TARIFF_SPOT_CHECKS)} tariff timestamps verified")
