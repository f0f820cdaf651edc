"""Economic post-processing: self-sufficiency, lifetime, NPV and IRR.

A sized-and-operated plan is judged the way an investor would judge it:
how much of the yearly load the area now covers on its own, how long
the fleet lasts before its aggregate capacity hits end of life, and
whether the yearly operating savings pay the hardware back within that
lifetime.  Savings are the energy-bill difference between the same
controller run with and without the batteries; capacity fade enters the
cash-flow picture only through the lifetime, so fade is never priced
twice.  Fade itself is always re-evaluated ex post from the degradation
map along the realized dispatch — controllers that ignore degradation
still age their cells, and this module charges them for it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .multiperiod import HOURS_PER_YEAR, SystemModel, Trajectory
from .storage import DegradationMap


class NonPositiveLoad(ValueError):
    """Self-sufficiency is undefined without load to be sufficient for."""


class NoSignChange(ValueError):
    """The IRR bracket has no root (savings never repay anything)."""


def self_sufficiency(e_load_mwh: float, e_import_mwh: float) -> float:
    """Share of the period's load covered without importing.

    1.0 means off-the-grid operation, 0.0 means everything consumed was
    imported.  Negative values are possible when imports exceed load
    (losses plus grid-charging) and are returned as-is.
    """
    if e_load_mwh <= 0.0:
        raise NonPositiveLoad(f"load energy must be positive, got {e_load_mwh}")
    if e_import_mwh < 0.0:
        raise ValueError(f"import energy must be non-negative, got {e_import_mwh}")
    return (e_load_mwh - e_import_mwh) / e_load_mwh


# --- lifetime ----------------------------------------------------------------

CALENDAR_CAP_YEARS = 10


@dataclass(frozen=True)
class LifetimeResult:
    years: int                  # smallest whole year at/below EoL, capped
    crossing_years: float       # exact crossing time; inf if never reached
    capped: bool                # True when the calendar cap cut it short


def battery_lifetime(yearly_fade_kwh: np.ndarray | float,
                     z_kwh: np.ndarray | float,
                     eol: float = 0.8,
                     calendar_cap_years: int = CALENDAR_CAP_YEARS,
                     ) -> LifetimeResult:
    """Years until the fleet's aggregate remaining capacity hits EoL.

    Fade is assumed the same every year (revenue streams repeat), and a
    unit's remaining capacity floors at zero — one dead battery does not
    drag the aggregate below what the survivors still hold.  The whole
    fleet retires together, at the smallest whole year where aggregate
    remaining / initial <= ``eol``, never later than the calendar cap.
    """
    if not 0.0 < eol < 1.0:
        raise ValueError(f"eol must be in (0, 1), got {eol}")
    fade = np.atleast_1d(np.asarray(yearly_fade_kwh, dtype=float))
    z = np.atleast_1d(np.asarray(z_kwh, dtype=float))
    if fade.shape != z.shape:
        raise ValueError("one yearly fade figure per battery required")
    if np.any(fade < 0.0) or np.any(z < 0.0):
        raise ValueError("fade and capacity must be non-negative")
    z_total = float(z.sum())
    if z_total <= 0.0:
        # nothing installed: nothing ages, the cap is all that binds
        return LifetimeResult(calendar_cap_years, math.inf, True)

    def remaining_ratio(t: float) -> float:
        return float(np.maximum(z - t * fade, 0.0).sum()) / z_total

    years = next((m for m in range(1, calendar_cap_years + 1)
                  if remaining_ratio(m) <= eol), calendar_cap_years)
    capped = remaining_ratio(years) > eol

    if capped:
        crossing = math.inf
    else:
        # remaining_ratio is piecewise linear and non-increasing; its knots
        # are the individual depletion times, so the crossing segment is
        # bracketed by the knots (plus 0) straddling the EoL level.
        knots = sorted({0.0, float(years)}
                       | {float(zi / fi) for zi, fi in zip(z, fade)
                          if fi > 0.0 and zi / fi < years})
        lo = max(t for t in knots if remaining_ratio(t) > eol)
        hi = min(t for t in knots if t > lo and remaining_ratio(t) <= eol)
        r_lo, r_hi = remaining_ratio(lo), remaining_ratio(hi)
        crossing = hi if r_lo == r_hi else \
            lo + (r_lo - eol) / (r_lo - r_hi) * (hi - lo)
    return LifetimeResult(int(years), crossing, capped)


# --- discounted cash flow ------------------------------------------------------

IRR_BRACKET = (-0.99, 10.0)
IRR_MAX_ITERATIONS = 200
IRR_SENTINEL = -1.0


def npv(investment_eur: float, delta_j_eur: float, m_years: int,
        rate: float) -> float:
    """Net present value of ``m_years`` equal yearly savings.

    At ``rate == 0`` this is exactly ``m * delta_j - investment`` (summed
    term by term, no rounding games).
    """
    if m_years < 0:
        raise ValueError("m_years must be non-negative")
    if rate == 0.0:
        return float(-investment_eur + m_years * delta_j_eur)
    flows = delta_j_eur / (1.0 + rate) ** np.arange(1, m_years + 1)
    return float(-investment_eur + flows.sum())


@dataclass(frozen=True)
class IrrResult:
    rate: float
    npv_eur: float              # NPV evaluated at ``rate``
    converged: bool
    no_sign_change: bool        # True when the bracket holds no root


def irr(investment_eur: float, delta_j_eur: float, m_years: int,
        *, strict: bool = False) -> IrrResult:
    """Internal rate of return of the storage investment.

    Bisects NPV over the open bracket (-0.99, 10); NPV is monotone in
    the rate for one-signed yearly flows, so a sign change pins a unique
    root.  When the savings are non-positive (or so small that even a
    rate of -99 % cannot lift NPV above zero) there is no root in the
    bracket: the result carries ``rate = -1.0`` with ``no_sign_change``
    set, or raises :class:`NoSignChange` when ``strict``.
    """
    if investment_eur <= 0.0:
        raise ValueError(f"investment must be positive, got {investment_eur}")
    if m_years < 1:
        raise ValueError(f"need at least one year of operation, got {m_years}")
    lo, hi = IRR_BRACKET
    f_lo = npv(investment_eur, delta_j_eur, m_years, lo)
    f_hi = npv(investment_eur, delta_j_eur, m_years, hi)
    if not (f_lo > 0.0 > f_hi or f_lo < 0.0 < f_hi):
        if strict:
            raise NoSignChange(
                f"no IRR in ({lo}, {hi}): NPV spans [{f_hi:.3g}, {f_lo:.3g}]")
        return IrrResult(IRR_SENTINEL,
                         npv(investment_eur, delta_j_eur, m_years,
                             IRR_SENTINEL + 1e-12),
                         converged=False, no_sign_change=True)
    tol = 1e-6 * investment_eur
    rate = 0.5 * (lo + hi)
    for _ in range(IRR_MAX_ITERATIONS):
        rate = 0.5 * (lo + hi)
        f_mid = npv(investment_eur, delta_j_eur, m_years, rate)
        if abs(f_mid) <= tol:
            return IrrResult(rate, f_mid, converged=True, no_sign_change=False)
        if (f_mid > 0.0) == (f_lo > 0.0):
            lo, f_lo = rate, f_mid
        else:
            hi = rate
    return IrrResult(rate, npv(investment_eur, delta_j_eur, m_years, rate),
                     converged=False, no_sign_change=False)


# --- run accounting -----------------------------------------------------------

def energy_bill_eur(traj: Trajectory, t_hours: float) -> float:
    """Pure energy cost of a run (tariff terms only, no fade pricing)."""
    return float(t_hours * traj.y_eur_h.sum())


def feeder_energy_mwh(system: SystemModel, traj: Trajectory,
                      ) -> tuple[float, float]:
    """(imported, exported) MWh over the run, split at the feeder."""
    p = traj.p_gen_kw[:, system.feeder_index]
    t = system.t_hours
    return (float(np.maximum(p, 0.0).sum() * t / 1000.0),
            float(np.maximum(-p, 0.0).sum() * t / 1000.0))


def load_energy_mwh(system: SystemModel, traj: Trajectory) -> float:
    rows = np.take(system.profiles.load_kw, traj.steps, axis=0, mode="wrap")
    return float(rows.sum() * system.t_hours / 1000.0)


def pv_curtailed_mwh(system: SystemModel, traj: Trajectory) -> float:
    """Available-but-not-dispatched PV energy over the run."""
    total = 0.0
    for j, col in system.pv_columns():
        avail = np.take(system.profiles.pv_kw[:, col], traj.steps, mode="wrap")
        avail = np.clip(avail, 0.0, system.gens[j].p_max_kw)
        total += float((avail - traj.p_gen_kw[:, j]).sum())
    return total * system.t_hours / 1000.0


def unit_power_kw(traj: Trajectory) -> np.ndarray:
    """(N, n_s) net AC-side battery power, discharge positive."""
    idx_dis = [traj.gen_names.index(f"{u}:dis") for u in traj.unit_names]
    idx_ch = [traj.gen_names.index(f"{u}:ch") for u in traj.unit_names]
    return traj.p_gen_kw[:, idx_dis] + traj.p_gen_kw[:, idx_ch]


def fade_from_run(traj: Trajectory, dmap: DegradationMap,
                  t_hours: float) -> np.ndarray:
    """Per-unit capacity faded over the run (kWh), priced from the map.

    Deliberately not read off the optimizer's fade variables: a
    controller dispatched with zero fade cost leaves those columns
    degenerate, and the heuristic has none at all.  The map applied to
    the realized (power, state, size) path is the one common yardstick.
    """
    if traj.e_kwh.size == 0:
        return np.zeros(len(traj.unit_names))
    rate = dmap.fade_rate(unit_power_kw(traj), traj.e_kwh, traj.z_kwh)
    return t_hours * rate.sum(axis=0)


# --- the headline result --------------------------------------------------------

@dataclass(frozen=True)
class EconResult:
    """Investor's view of one sized-and-operated scenario."""

    self_sufficiency: float
    lifetime_years: int
    lifetime_crossing_years: float
    npv_eur: float                      # undiscounted: m * delta_J - investment
    irr: float                          # -1.0 sentinel when no root exists
    irr_converged: bool
    irr_no_sign_change: bool
    yearly_revenue_with_eur: float
    yearly_revenue_without_eur: float
    delta_j_eur: float                  # yearly savings, energy bill only
    investment_eur: float
    pv_curtailed_mwh: float
    import_mwh: float
    export_mwh: float
    load_mwh: float
    yearly_fade_kwh: np.ndarray         # per unit
    z_total_kwh: float


def evaluate_run(system: SystemModel, traj: Trajectory,
                 baseline: Trajectory, *,
                 battery_cost_eur_kwh: float | None = None,
                 eol: float = 0.8,
                 hours_per_year: float = HOURS_PER_YEAR) -> EconResult:
    """Judge a dispatched run against its storage-free twin.

    ``baseline`` must be the same controller and scenario re-run with
    zero installed capacity; both runs are annualized by straight
    scaling before the cash-flow arithmetic.  All energy figures
    (self-sufficiency, curtailment) describe the with-storage run.
    """
    if len(traj.steps) != len(baseline.steps):
        raise ValueError("with/without-storage runs must cover equal spans")
    cost = system.battery_cost_eur_kwh if battery_cost_eur_kwh is None \
        else battery_cost_eur_kwh
    hours_run = len(traj.steps) * system.t_hours
    if hours_run <= 0.0:
        raise ValueError("cannot evaluate an empty run")
    scale = hours_per_year / hours_run

    revenue_with = -energy_bill_eur(traj, system.t_hours) * scale
    revenue_without = -energy_bill_eur(baseline, system.t_hours) * scale
    delta_j = revenue_with - revenue_without

    imported, exported = feeder_energy_mwh(system, traj)
    load = load_energy_mwh(system, traj)
    yearly_fade = fade_from_run(traj, system.dmap, system.t_hours) * scale
    life = battery_lifetime(yearly_fade, traj.z_kwh, eol)

    investment = cost * float(traj.z_kwh.sum())
    if investment > 0.0:
        rate = irr(investment, delta_j, life.years)
    else:
        rate = IrrResult(IRR_SENTINEL, math.nan,
                         converged=False, no_sign_change=True)

    return EconResult(
        self_sufficiency=self_sufficiency(load, imported),
        lifetime_years=life.years,
        lifetime_crossing_years=life.crossing_years,
        npv_eur=npv(investment, delta_j, life.years, 0.0),
        irr=rate.rate,
        irr_converged=rate.converged,
        irr_no_sign_change=rate.no_sign_change,
        yearly_revenue_with_eur=revenue_with,
        yearly_revenue_without_eur=revenue_without,
        delta_j_eur=delta_j,
        investment_eur=investment,
        pv_curtailed_mwh=pv_curtailed_mwh(system, traj),
        import_mwh=imported,
        export_mwh=exported,
        load_mwh=load,
        yearly_fade_kwh=yearly_fade,
        z_total_kwh=float(traj.z_kwh.sum()),
    )


# --- results table --------------------------------------------------------------

RESULTS_SCHEMA = "lvbess-results/1"

RESULTS_FIELDS = [
    "battery_cost_eur_kwh", "horizon_steps", "controller", "z_total_kwh",
    "self_sufficiency", "lifetime_years", "lifetime_crossing_years",
    "npv_eur", "irr", "irr_converged", "irr_no_sign_change",
    "yearly_revenue_with_eur", "yearly_revenue_without_eur",
    "delta_j_eur", "investment_eur", "pv_curtailed_mwh",
    "import_mwh", "export_mwh", "load_mwh", "yearly_fade_kwh",
]


@dataclass(frozen=True)
class ResultsRow:
    """One (battery cost, horizon, controller) cell of the study grid."""

    battery_cost_eur_kwh: float
    horizon_steps: int
    controller: str
    econ: EconResult


def write_results_csv(rows: list[ResultsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {RESULTS_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(RESULTS_FIELDS)
        for row in rows:
            e = row.econ
            writer.writerow([
                repr(row.battery_cost_eur_kwh), row.horizon_steps,
                row.controller, repr(e.z_total_kwh),
                repr(e.self_sufficiency), e.lifetime_years,
                repr(e.lifetime_crossing_years), repr(e.npv_eur),
                repr(e.irr), int(e.irr_converged), int(e.irr_no_sign_change),
                repr(e.yearly_revenue_with_eur),
                repr(e.yearly_revenue_without_eur),
                repr(e.delta_j_eur), repr(e.investment_eur),
                repr(e.pv_curtailed_mwh), repr(e.import_mwh),
                repr(e.export_mwh), repr(e.load_mwh),
                repr(float(e.yearly_fade_kwh.sum())),
            ])


def read_results_csv(path: str | Path) -> list[dict[str, str]]:
    """Rows back as dictionaries of strings; schema line verified."""
    with open(path, newline="") as fh:
        head = fh.readline().strip()
        if head != f"# {RESULTS_SCHEMA}":
            raise ValueError(f"unexpected results schema line {head!r}")
        return list(csv.DictReader(fh))
