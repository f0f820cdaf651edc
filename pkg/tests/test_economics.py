"""Economics layer: self-sufficiency arithmetic, lifetime cases with a
dead-unit floor, the NPV identity, IRR against closed forms, and a full
desk-run evaluation with energy and fade reconciliation."""
import math

import numpy as np
import pytest

from conftest import three_bus_grid
from lvbess.economics import (NoSignChange, NonPositiveLoad, ResultsRow,
                              battery_lifetime, evaluate_run, fade_from_run,
                              irr, npv, read_results_csv, self_sufficiency,
                              write_results_csv)
from lvbess.grid import build_operators
from lvbess.heuristic import run_heuristic_year
from lvbess.io import TariffSchedule, synthesize_profiles
from lvbess.mpc import MpcConfig, run_receding_horizon
from lvbess.multiperiod import SystemModel, prorated_sizing_cost
from lvbess.opf import (Circular, GeneratorSpec, GenKind, PwaCost,
                        Rectangular, make_layout)
from lvbess.storage import (StorageSpec, default_degradation_map,
                            fleet_generators)


def test_self_sufficiency():
    assert self_sufficiency(10.0, 0.0) == 1.0
    assert self_sufficiency(10.0, 10.0) == 0.0
    assert self_sufficiency(61.5, 30.75) == pytest.approx(0.5, abs=1e-15)
    assert self_sufficiency(10.0, 12.0) < 0.0    # imports can exceed the load
    for bad in (0.0, -1.0):
        with pytest.raises(NonPositiveLoad):
            self_sufficiency(bad, 1.0)
    with pytest.raises(ValueError):
        self_sufficiency(10.0, -1.0)


def test_battery_lifetime_cases():
    life = battery_lifetime(0.0, 10.0)
    assert life.years == 10 and life.crossing_years == math.inf and life.capped
    life = battery_lifetime(0.25, 10.0)          # 2.5 %/yr hits 80% at year 8
    assert life.years == 8
    assert life.crossing_years == pytest.approx(8.0, abs=1e-12)
    assert not life.capped
    life = battery_lifetime(0.3, 10.0)
    assert life.years == 7
    assert life.crossing_years == pytest.approx(20.0 / 3.0, abs=1e-12)
    # heterogeneous fleet: the fast-fading unit drags the whole fleet down
    life = battery_lifetime(np.array([5.0, 0.0]), np.array([10.0, 10.0]))
    assert life.years == 1
    assert life.crossing_years == pytest.approx(0.8, abs=1e-12)
    # a unit cannot fade below zero: remaining = max(10-20t, 0) + (10-t)
    life = battery_lifetime(np.array([20.0, 1.0]), np.array([10.0, 10.0]))
    assert life.years == 1
    assert life.crossing_years == pytest.approx(4.0 / 21.0, abs=1e-12)
    life = battery_lifetime(np.array([0.0]), np.array([0.0]))
    assert life.years == 10 and life.capped      # nothing installed
    with pytest.raises(ValueError):
        battery_lifetime(0.1, 10.0, eol=1.5)


def test_npv_identity():
    for m, inv, dj in [(1, 100.0, 110.0), (10, 1000.0, 163.75),
                       (8, 3000.0, 417.3)]:
        assert npv(inv, dj, m, 0.0) == m * dj - inv   # exact, no tolerance
    assert npv(100.0, 110.0, 1, 0.10) == -100.0 + 110.0 / 1.1


def test_irr_against_closed_forms():
    r = irr(100.0, 110.0, 1)
    assert r.converged and not r.no_sign_change
    assert r.rate == pytest.approx(0.10, abs=1e-5)
    assert abs(r.npv_eur) <= 1e-6 * 100.0

    # ten equal 163.75 EUR payments on a 1000 EUR outlay: the 10% annuity
    # factor is 6.1446, and 163.75 * 6.1075... lands within half a percent
    r10 = irr(1000.0, 163.75, 10)
    annuity = sum(1.0 / 1.1 ** k for k in range(1, 11))
    assert annuity == pytest.approx(6.1446, abs=1e-4)
    assert r10.converged and r10.rate == pytest.approx(0.10, abs=5e-3)
    assert abs(npv(1000.0, 163.75, 10, r10.rate)) <= 1e-6 * 1000.0


def test_irr_no_root_sentinels():
    for dj in (0.0, -5.0):
        bad = irr(100.0, dj, 5)
        assert bad.no_sign_change and not bad.converged and bad.rate == -1.0
    huge = irr(1.0, 1e9, 10)          # true rate above the search bracket
    assert huge.no_sign_change and huge.rate == -1.0
    with pytest.raises(NoSignChange):
        irr(100.0, -5.0, 5, strict=True)


def test_irr_monotone_in_savings():
    rates = [irr(1000.0, dj, 8).rate for dj in np.linspace(150.0, 400.0, 11)]
    assert all(b >= a - 1e-12 for a, b in zip(rates, rates[1:]))


@pytest.fixture(scope="module")
def desk_eval():
    grid = three_bus_grid()
    ops = build_operators(grid)
    fleet = [StorageSpec(name="S2", bus="B2"), StorageSpec(name="S3", bus="B3")]
    profiles = synthesize_profiles(seed=11, days=2, buses=["B2", "B3"],
                                   pv_total_mwh=0.12, load_total_mwh=0.06)
    gens = ([GeneratorSpec(name="feeder", bus="B1", kind=GenKind.SLACK_FEEDER,
                           p_min_kw=-1e5, p_max_kw=1e5, s_max_kva=1e5,
                           q_shape=Circular(), cost=PwaCost.free()),
             GeneratorSpec(name="pvB3", bus="B3", kind=GenKind.PV,
                           p_min_kw=0.0, p_max_kw=20.0, s_max_kva=10.0,
                           q_shape=Rectangular(), cost=PwaCost.free())]
            + fleet_generators(fleet))
    system = SystemModel(grid=grid, ops=ops, gens=gens,
                         layout=make_layout(ops, gens), fleet=fleet,
                         tariff=TariffSchedule(), profiles=profiles,
                         dmap=default_degradation_map(fleet[0], 10.0),
                         battery_cost_eur_kwh=150.0,
                         sizing_cost_eur_kwh=prorated_sizing_cost(
                             150.0, profiles.n_steps, 1.0))
    cfg = MpcConfig(horizon_steps=24, update_steps=6, step_hours=1.0,
                    total_steps=profiles.n_steps)
    run_with = run_receding_horizon(system, cfg, np.array([8.0, 12.0]))
    run_wout = run_receding_horizon(system, cfg, np.zeros(2))
    return system, run_with, run_wout


def test_desk_run_evaluation(desk_eval):
    system, run_with, run_wout = desk_eval
    econ = evaluate_run(system, run_with.trajectory, run_wout.trajectory)
    assert econ.delta_j_eur > 0.0
    assert econ.yearly_revenue_with_eur > econ.yearly_revenue_without_eur
    assert 0.0 < econ.self_sufficiency <= 1.0
    assert econ.import_mwh < econ.load_mwh
    assert econ.investment_eur == pytest.approx(150.0 * 20.0, abs=1e-9)
    assert econ.npv_eur == (econ.lifetime_years * econ.delta_j_eur
                            - econ.investment_eur)
    assert 1 <= econ.lifetime_years <= 10
    assert econ.pv_curtailed_mwh >= -1e-12
    if econ.irr_converged:
        resid = npv(econ.investment_eur, econ.delta_j_eur,
                    econ.lifetime_years, econ.irr)
        assert abs(resid) <= 1e-6 * econ.investment_eur


def test_energy_reconciliation(desk_eval):
    system, run_with, run_wout = desk_eval
    econ = evaluate_run(system, run_with.trajectory, run_wout.trajectory)
    tr = run_with.trajectory
    t = system.t_hours
    gen_mwh = tr.p_gen_kw.sum() * t / 1000.0
    loss_mwh = tr.loss_p_kw.sum() * t / 1000.0
    assert abs(gen_mwh - econ.load_mwh - loss_mwh) < 1e-6
    # the curtailment number closes the PV ledger exactly
    profiles = system.profiles
    avail = sum(np.clip(np.take(profiles.pv_kw[:, c], tr.steps, mode="wrap"),
                        0.0, system.gens[j].p_max_kw).sum()
                for j, c in system.pv_columns()) * t / 1000.0
    dispatched = sum(tr.p_gen_kw[:, j].sum()
                     for j, _ in system.pv_columns()) * t / 1000.0
    assert (avail - dispatched) == pytest.approx(econ.pv_curtailed_mwh,
                                                 abs=1e-12)


def test_fade_repricing_matches_lp_variables(desk_eval):
    system, run_with, _ = desk_eval
    t = system.t_hours
    tr = run_with.trajectory
    fade = fade_from_run(tr, system.dmap, t)
    assert np.allclose(fade, t * tr.d_kwh_h.sum(axis=0), atol=1e-6)
    h = run_heuristic_year(system, np.array([8.0, 12.0]))
    fade_h = fade_from_run(h.trajectory, system.dmap, t)
    assert np.allclose(fade_h, t * h.trajectory.d_kwh_h.sum(axis=0),
                       atol=1e-12)


def test_storage_free_self_evaluation(desk_eval):
    system, _, run_wout = desk_eval
    econ0 = evaluate_run(system, run_wout.trajectory, run_wout.trajectory)
    assert econ0.z_total_kwh == 0.0 and econ0.investment_eur == 0.0
    assert econ0.delta_j_eur == 0.0 and econ0.npv_eur == 0.0
    assert econ0.irr == -1.0 and econ0.irr_no_sign_change
    assert econ0.lifetime_years == 10


def test_results_csv_round_trip(desk_eval, tmp_path):
    system, run_with, run_wout = desk_eval
    econ = evaluate_run(system, run_with.trajectory, run_wout.trajectory)
    econ0 = evaluate_run(system, run_wout.trajectory, run_wout.trajectory)
    path = tmp_path / "results.csv"
    write_results_csv([ResultsRow(150.0, 24, "mpc-deg", econ),
                       ResultsRow(150.0, 24, "mpc", econ0)], path)
    back = read_results_csv(path)
    assert len(back) == 2
    assert back[0]["controller"] == "mpc-deg"
    assert float(back[0]["self_sufficiency"]) == econ.self_sufficiency
    assert int(back[0]["lifetime_years"]) == econ.lifetime_years
    assert float(back[1]["irr"]) == -1.0
    assert float(back[0]["yearly_fade_kwh"]) == float(econ.yearly_fade_kwh.sum())
