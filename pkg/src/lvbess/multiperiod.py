"""Horizon dispatch: N coupled steps of the linearized grid with storage.

One LP covers N steps.  Each step carries a full copy of the single-step
dispatch columns (losses, generator set-points, voltages, cost
epigraphs); the steps are tied together by the battery state-of-energy
rows, by the shared capacity variables z, and by the degradation rate
columns d priced at the battery cost.  The objective is

    T * sum_k ( 1'y(k) + c_d' d(k) )  +  c_s' z

with the sizing term present only when capacities are free.  When they
are pinned (operation mode) the pinning is done with equality rows so
their duals — the marginal value of capacity — come out of the solver
directly.

Tariffs enter through the feeder's cost epigraph, whose import gradient
switches between the high and low rate per step; PV availability enters
as per-step upper bounds on the PV generator columns.  Loads are taken
from the profile set at unity power factor (the profile format carries
active power only).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid import GridModel, LinearGridOperators
from .io import ProfileSet, TariffSchedule
from .lp import LpProblem, LpSolution, LpStatus, SolverConfig, solve_lp
from .opf import (GeneratorSpec, GenKind, PwaCost, SingleShotLayout,
                  _demand_pu, _step_matrices, _step_rhs, make_layout)
from .storage import (DegradationMap, SoEEvolution, StorageSpec,
                      degradation_matrix, degradation_rhs, soe_bound_matrix,
                      soe_bound_rhs, soe_matrices)


class ProfileOutOfRange(ValueError):
    """A window asked for steps the profile series does not cover."""


class InfeasibleInitialState(ValueError):
    """Initial stored energy incompatible with the capacity setting."""


HOURS_PER_YEAR = 8760.0


def prorated_sizing_cost(battery_cost_eur_kwh: float, n_steps: int,
                         t_hours: float,
                         calendar_life_years: float = 10.0) -> float:
    """Per-kWh capacity price charged against a simulated span.

    The investment is annualized over the calendar life cap and prorated
    to the simulated hours, so short desk runs and full years price
    capacity consistently.
    """
    yearly = battery_cost_eur_kwh / calendar_life_years
    return yearly * (n_steps * t_hours) / HOURS_PER_YEAR


@dataclass(frozen=True)
class FreeCapacity:
    """Size the fleet: 0 <= z <= z_max, investment priced in the objective."""
    z_max_kwh: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "z_max_kwh",
                           np.atleast_1d(np.asarray(self.z_max_kwh, dtype=float)))


@dataclass(frozen=True)
class FixedCapacity:
    """Operate a given fleet: z pinned by equality rows (duals = capacity value)."""
    z_kwh: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "z_kwh",
                           np.atleast_1d(np.asarray(self.z_kwh, dtype=float)))


ZMode = FreeCapacity | FixedCapacity


@dataclass
class SystemModel:
    """Everything a dispatch window needs, bundled once per study."""

    grid: GridModel
    ops: LinearGridOperators
    gens: list[GeneratorSpec]
    layout: SingleShotLayout
    fleet: list[StorageSpec]
    tariff: TariffSchedule
    profiles: ProfileSet
    dmap: DegradationMap
    battery_cost_eur_kwh: float
    sizing_cost_eur_kwh: float
    v_min: float = 0.9
    v_max: float = 1.1
    t_hours: float = 1.0

    def __post_init__(self) -> None:
        for u in self.fleet:
            for suffix in (":dis", ":ch"):
                if f"{u.name}{suffix}" not in self.layout.gen_names:
                    raise ValueError(f"generator {u.name}{suffix} missing from layout")
        for g in self.gens:
            if g.kind is GenKind.PV and g.bus not in self.profiles.buses:
                raise ValueError(f"no PV profile column for bus {g.bus}")
        for b in self.profiles.buses:
            self.grid.bus_index(b)          # raises on unknown bus

    @property
    def n_units(self) -> int:
        return len(self.fleet)

    @property
    def feeder_index(self) -> int:
        return next(j for j, g in enumerate(self.gens)
                    if g.kind is GenKind.SLACK_FEEDER)

    def pv_columns(self) -> list[tuple[int, int]]:
        """(generator index, profile column) pairs for the PV units."""
        return [(j, self.profiles.buses.index(g.bus))
                for j, g in enumerate(self.gens) if g.kind is GenKind.PV]

    def demand_kw(self, step: int) -> np.ndarray:
        """Per-bus active demand at an absolute step, in kW."""
        out = np.zeros(self.grid.n_bus)
        for col, bus in enumerate(self.profiles.buses):
            out[self.grid.bus_index(bus)] += self.profiles.load_kw[step, col]
        return out

    def with_profiles(self, profiles: ProfileSet) -> "SystemModel":
        return dataclasses.replace(self, profiles=profiles)


@dataclass
class MultiPeriodLayout:
    """Column bookkeeping: N per-step blocks, then z, then the fade rates."""

    step: SingleShotLayout
    n_steps: int
    n_units: int

    @property
    def n_cols_step(self) -> int:
        return self.step.n_cols

    @property
    def z_offset(self) -> int:
        return self.n_steps * self.n_cols_step

    @property
    def d_offset(self) -> int:
        return self.z_offset + self.n_units

    @property
    def n_cols(self) -> int:
        return self.d_offset + self.n_steps * self.n_units

    def step_cols(self, k: int) -> slice:
        return slice(k * self.n_cols_step, (k + 1) * self.n_cols_step)

    @property
    def z_cols(self) -> slice:
        return slice(self.z_offset, self.z_offset + self.n_units)

    def d_cols(self, k: int) -> slice:
        start = self.d_offset + k * self.n_units
        return slice(start, start + self.n_units)


@dataclass
class MultiPeriodProblem:
    problem: LpProblem
    layout: MultiPeriodLayout
    evo: SoEEvolution
    system: SystemModel
    k0: int
    n_steps: int
    t_hours: float
    z_mode: ZMode
    e0: np.ndarray
    import_prices: np.ndarray
    pin_rows: slice | None          # equality-row range pinning z, Fixed mode


def _templates_for_prices(system: SystemModel, prices) -> dict[float, object]:
    """One StepMatrices bundle per distinct feeder import price."""
    out = {}
    feeder_j = system.feeder_index
    for price in sorted(set(float(p) for p in prices)):
        gens = list(system.gens)
        gens[feeder_j] = dataclasses.replace(
            gens[feeder_j],
            cost=PwaCost.two_sided(system.tariff.export, price))
        pieces = _step_matrices(system.ops, gens, system.layout,
                                system.v_min, system.v_max)
        pieces.a_in = sp.csr_matrix(pieces.a_in)
        pieces.a_eq = sp.csr_matrix(pieces.a_eq)
        out[price] = pieces
    return out


def assemble_multiperiod(system: SystemModel, k0: int, n_steps: int,
                         e0: np.ndarray, z_mode: ZMode) -> MultiPeriodProblem:
    """Build the N-step dispatch LP over steps [k0, k0+N)."""
    if n_steps < 1:
        raise ValueError("need at least one step")
    if k0 < 0 or k0 + n_steps > system.profiles.n_steps:
        raise ProfileOutOfRange(
            f"window [{k0}, {k0 + n_steps}) exceeds the {system.profiles.n_steps}"
            " profiled steps")
    fleet = system.fleet
    n_s = len(fleet)
    e0 = np.atleast_1d(np.asarray(e0, dtype=float))
    if e0.shape != (n_s,):
        raise ValueError(f"expected {n_s} initial energies, got {e0.shape}")
    if np.any(e0 < -1e-12):
        raise InfeasibleInitialState("negative stored energy")
    if isinstance(z_mode, FixedCapacity):
        z_ref = np.broadcast_to(z_mode.z_kwh, (n_s,))
        if np.any(e0 > z_ref + 1e-9):
            raise InfeasibleInitialState(
                f"initial energy {e0} exceeds pinned capacity {z_ref}")
    else:
        z_ref = np.broadcast_to(z_mode.z_max_kwh, (n_s,))
        if np.any(e0 > z_ref + 1e-9):
            raise InfeasibleInitialState(
                f"initial energy {e0} exceeds the capacity ceiling {z_ref}")

    layout = MultiPeriodLayout(step=system.layout, n_steps=n_steps, n_units=n_s)
    grid, ops = system.grid, system.ops
    base = grid.base
    prices = np.array([system.tariff.tariff_at(k0 + k)[0] for k in range(n_steps)])
    templates = _templates_for_prices(system, prices)
    pv_cols = system.pv_columns()

    a_in_steps, b_in, senses_in, labels_in = [], [], [], []
    a_eq_steps, b_eq, labels_eq = [], [], []
    lb_parts, ub_parts = [], []
    for k in range(n_steps):
        tpl = templates[float(prices[k])]
        demand = _demand_pu(grid, system.demand_kw(k0 + k), None)
        bk_in, bk_eq = _step_rhs(ops, system.layout, tpl, demand)
        a_in_steps.append(tpl.a_in)
        b_in.append(bk_in)
        senses_in.extend(tpl.senses)
        labels_in.extend(f"k{k}:{lbl}" for lbl in tpl.labels_in)
        a_eq_steps.append(tpl.a_eq)
        b_eq.append(bk_eq)
        labels_eq.extend(f"k{k}:{lbl}" for lbl in tpl.labels_eq)
        lb_k, ub_k = tpl.lb.copy(), tpl.ub.copy()
        for j, col in pv_cols:
            avail = base.power_to_pu(system.profiles.pv_kw[k0 + k, col])
            ub_k[system.layout.p_gen.start + j] = min(
                max(avail, 0.0), base.power_to_pu(system.gens[j].p_max_kw))
        lb_parts.append(lb_k)
        ub_parts.append(ub_k)

    evo = soe_matrices(fleet, system.layout, n_steps, system.t_hours)
    n_x = n_steps * layout.n_cols_step
    n_d = n_steps * n_s

    a_soe, soe_senses, soe_labels = soe_bound_matrix(evo)
    a_soe_full = sp.hstack([a_soe, sp.csr_matrix((a_soe.shape[0], n_d))],
                           format="csr")
    a_deg_x, a_deg_z, a_deg_d, deg_senses, deg_labels = degradation_matrix(
        system.dmap, evo, system.layout)
    a_deg_full = sp.hstack([a_deg_x, a_deg_z, a_deg_d], format="csr")

    a_in_x = sp.block_diag(a_in_steps, format="csr")
    a_in_full = sp.hstack(
        [a_in_x, sp.csr_matrix((a_in_x.shape[0], n_s + n_d))], format="csr")
    a_in_all = sp.vstack([a_in_full, a_soe_full, a_deg_full], format="csr")
    b_in_all = np.concatenate(b_in + [soe_bound_rhs(evo, e0),
                                      degradation_rhs(system.dmap, evo, e0)])
    senses_all = senses_in + soe_senses + deg_senses
    labels_all = labels_in + soe_labels + deg_labels

    a_eq_x = sp.block_diag(a_eq_steps, format="csr")
    a_eq_full = sp.hstack(
        [a_eq_x, sp.csr_matrix((a_eq_x.shape[0], n_s + n_d))], format="csr")
    b_eq_all = np.concatenate(b_eq)
    pin_rows = None
    if isinstance(z_mode, FixedCapacity):
        pin = sp.hstack([sp.csr_matrix((n_s, n_x)), sp.eye(n_s),
                         sp.csr_matrix((n_s, n_d))], format="csr")
        pin_rows = slice(a_eq_full.shape[0], a_eq_full.shape[0] + n_s)
        a_eq_full = sp.vstack([a_eq_full, pin], format="csr")
        b_eq_all = np.concatenate([b_eq_all, z_ref])
        labels_eq.extend(f"pin_z[{u.name}]" for u in fleet)

    lb = np.concatenate(lb_parts + [np.zeros(n_s), np.zeros(n_d)])
    ub = np.concatenate(ub_parts + [np.full(n_s, np.inf), np.full(n_d, np.inf)])
    if isinstance(z_mode, FixedCapacity):
        # pin rows are the only thing holding z, so their duals carry the
        # whole marginal value even when a capacity sits at zero
        lb[layout.z_cols] = -np.inf
    else:
        lb[layout.z_cols] = np.maximum(e0, 0.0)
        ub[layout.z_cols] = z_ref

    c = np.zeros(layout.n_cols)
    for k in range(n_steps):
        sl = layout.step_cols(k)
        c[sl.start + system.layout.y.start:sl.start + system.layout.y.stop] = \
            system.t_hours
        c[layout.d_cols(k)] = system.t_hours * system.battery_cost_eur_kwh
    if isinstance(z_mode, FreeCapacity):
        c[layout.z_cols] = system.sizing_cost_eur_kwh

    col_names = []
    step_names = system.layout.column_names()
    for k in range(n_steps):
        col_names.extend(f"k{k}:{nm}" for nm in step_names)
    col_names.extend(f"z[{u.name}]" for u in fleet)
    for k in range(n_steps):
        col_names.extend(f"d[{k},{u.name}]" for u in fleet)

    problem = LpProblem.build(
        c=c, a_in=a_in_all, b_in=b_in_all, senses=senses_all,
        a_eq=a_eq_full, b_eq=b_eq_all, lb=lb, ub=ub,
        col_names=col_names, row_names_in=labels_all, row_names_eq=labels_eq,
    )
    return MultiPeriodProblem(
        problem=problem, layout=layout, evo=evo, system=system, k0=k0,
        n_steps=n_steps, t_hours=system.t_hours, z_mode=z_mode, e0=e0.copy(),
        import_prices=prices, pin_rows=pin_rows,
    )


# ---------------------------------------------------------------------------
# solutions and trajectories
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Physical readout of a horizon solution, in engineering units."""

    steps: np.ndarray               # absolute step indices, length N
    gen_names: list[str]
    bus_names: list[str]
    unit_names: list[str]
    p_gen_kw: np.ndarray            # (N, n_g)
    q_gen_kvar: np.ndarray          # (N, n_g)
    v_pu: np.ndarray                # (N, n_b)
    loss_p_kw: np.ndarray           # (N, n_l)
    loss_q_kvar: np.ndarray         # (N, n_l)
    y_eur_h: np.ndarray             # (N, n_g)
    e_kwh: np.ndarray               # (N, n_s), e(1..N)
    d_kwh_h: np.ndarray             # (N, n_s)
    z_kwh: np.ndarray               # (n_s,)
    step_cost_eur: np.ndarray       # (N,), T*(1'y + c_d'd) per step

    @property
    def operation_cost_eur(self) -> float:
        return float(self.step_cost_eur.sum())


def extract_trajectory(mpp: MultiPeriodProblem, sol: LpSolution) -> Trajectory:
    system, layout = mpp.system, mpp.layout
    step, n = system.layout, mpp.n_steps
    base = system.grid.base
    x = sol.primal

    def per_step(col_slice: slice) -> np.ndarray:
        width = col_slice.stop - col_slice.start
        out = np.empty((n, width))
        for k in range(n):
            blk = x[layout.step_cols(k)]
            out[k] = blk[col_slice]
        return out

    p_gen = base.power_from_pu(per_step(step.p_gen))
    q_gen = base.power_from_pu(per_step(step.q_gen))
    v = per_step(step.v)
    loss_p = base.power_from_pu(per_step(step.loss_p))
    loss_q = base.power_from_pu(per_step(step.loss_q))
    y = per_step(step.y)
    z = x[layout.z_cols].copy()
    d = np.vstack([x[layout.d_cols(k)] for k in range(n)]) if n else \
        np.zeros((0, layout.n_units))
    e = mpp.evo.energies(mpp.e0, x[:layout.z_offset])
    step_cost = mpp.t_hours * (y.sum(axis=1)
                               + system.battery_cost_eur_kwh * d.sum(axis=1))
    return Trajectory(
        steps=np.arange(mpp.k0, mpp.k0 + n),
        gen_names=list(step.gen_names), bus_names=list(step.bus_names),
        unit_names=[u.name for u in system.fleet],
        p_gen_kw=p_gen, q_gen_kvar=q_gen, v_pu=v,
        loss_p_kw=loss_p, loss_q_kvar=loss_q, y_eur_h=y,
        e_kwh=e, d_kwh_h=d, z_kwh=z, step_cost_eur=step_cost,
    )


@dataclass
class MonolithicResult:
    z_kwh: np.ndarray
    objective: float                # operation + prorated investment
    trajectory: Trajectory
    solution: LpSolution


_DESK_COLUMN_GUARD = 2_000_000


def solve_monolithic_sizing(system: SystemModel, n_steps: int, *,
                            k0: int = 0, e0: np.ndarray | None = None,
                            z_max_kwh: np.ndarray | float | None = None,
                            config: SolverConfig | None = None) -> MonolithicResult:
    """Solve the whole horizon with free capacities in one LP.

    This is the planning oracle the decomposition is checked against; it
    is guarded against accidentally huge instances.
    """
    n_s = len(system.fleet)
    if e0 is None:
        e0 = np.array([u.e0_kwh for u in system.fleet])
    if z_max_kwh is None:
        z_max = np.array([u.z_max_kwh for u in system.fleet])
    else:
        z_max = np.broadcast_to(np.asarray(z_max_kwh, dtype=float), (n_s,)).copy()
    layout_cols = (n_steps * system.layout.n_cols + n_s + n_steps * n_s)
    if layout_cols > _DESK_COLUMN_GUARD:
        raise ValueError(
            f"monolithic instance would have {layout_cols} columns; "
            "use the decomposition for horizons this long")
    mpp = assemble_multiperiod(system, k0, n_steps, e0, FreeCapacity(z_max))
    sol = solve_lp(mpp.problem, config or SolverConfig())
    if sol.status is not LpStatus.OPTIMAL:
        raise RuntimeError(f"monolithic sizing ended {sol.status.value}")
    traj = extract_trajectory(mpp, sol)
    return MonolithicResult(z_kwh=traj.z_kwh, objective=sol.objective_value,
                            trajectory=traj, solution=sol)
