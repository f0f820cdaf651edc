"""Rule-based storage baseline for head-to-head comparison.

The conventional strategy this controller encodes: store local PV
surplus in the battery at the same bus during the day, curtail PV only
when the battery is full and the grid would otherwise leave its limits,
and force the batteries empty in the early morning so the day's surplus
finds room.  It never charges from the grid and it never looks ahead.

Grid feasibility is enforced with the exact nonlinear load flow rather
than a linearization: a candidate dispatch is checked directly, and
when it violates a limit the positive (exported) injections are scaled
back by bisection to the feasibility boundary — the scaling comes out
of PV first and battery discharge second.  Scaling down to zero export
is always feasible for sane data, which is the guaranteed fallback.
Inverters run at unity power factor here; reactive support is a
capability of the optimizing controllers, not of this baseline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import GridModel
from .loadflow import LoadflowResult, NotConverged, fbs_loadflow
from .multiperiod import SystemModel, Trajectory
from .opf import GenKind
from .storage import StorageSpec


@dataclass(frozen=True)
class HeuristicConfig:
    morning_start_hour: float = 5.0
    morning_end_hour: float = 8.0
    bisection_iterations: int = 40
    limit_tolerance: float = 1e-6


@dataclass
class HeuristicState:
    e_kwh: np.ndarray                 # per battery
    morning_emptied: np.ndarray       # per battery: done for today
    export_limit_kw: np.ndarray       # per bus, last discovered feasible export
    last_hour: float = -1.0

    def copy(self) -> "HeuristicState":
        return HeuristicState(self.e_kwh.copy(), self.morning_emptied.copy(),
                              self.export_limit_kw.copy(), self.last_hour)


@dataclass
class StepDispatch:
    pv_kw: np.ndarray                 # delivered PV per PV generator
    p_dis_kw: np.ndarray              # per battery, >= 0
    p_ch_kw: np.ndarray               # per battery, <= 0 (injection convention)
    injections_kw: np.ndarray         # net per bus, slack entry 0
    curtail_factor: float             # 1.0 when nothing was scaled back
    flow: LoadflowResult | None       # load flow at the final dispatch


@dataclass(frozen=True)
class HeuristicContext:
    """Static data the per-step rule needs."""

    grid: GridModel
    fleet: list[StorageSpec]
    z_kwh: np.ndarray
    unit_bus: np.ndarray              # bus index per battery
    pv_bus: np.ndarray                # bus index per PV generator
    pv_rating_kw: np.ndarray
    t_hours: float
    config: HeuristicConfig


def make_context(system: SystemModel, z_kwh: np.ndarray,
                 config: HeuristicConfig | None = None) -> HeuristicContext:
    grid = system.grid
    pv = [(grid.bus_index(g.bus), g.p_max_kw)
          for g in system.gens if g.kind is GenKind.PV]
    return HeuristicContext(
        grid=grid, fleet=system.fleet,
        z_kwh=np.asarray(z_kwh, dtype=float),
        unit_bus=np.array([grid.bus_index(u.bus) for u in system.fleet],
                          dtype=int),
        pv_bus=np.array([b for b, _ in pv], dtype=int),
        pv_rating_kw=np.array([r for _, r in pv]),
        t_hours=system.t_hours, config=config or HeuristicConfig(),
    )


def initial_state(ctx: HeuristicContext,
                  e0_kwh: np.ndarray | None = None) -> HeuristicState:
    n_s = len(ctx.fleet)
    e0 = (np.array([u.e0_kwh for u in ctx.fleet]) if e0_kwh is None
          else np.asarray(e0_kwh, dtype=float).copy())
    return HeuristicState(
        e_kwh=np.clip(e0, 0.0, ctx.z_kwh),
        morning_emptied=np.zeros(n_s, dtype=bool),
        export_limit_kw=np.full(ctx.grid.n_bus, np.inf),
    )


def make_grid_check(grid: GridModel, v_min: float = 0.9, v_max: float = 1.1,
                    tolerance: float = 1e-6):
    """Exact feasibility test: kW injections -> (ok, load-flow result)."""
    i_max = grid.i_max_pu

    def check(p_inj_kw: np.ndarray) -> tuple[bool, LoadflowResult | None]:
        try:
            res = fbs_loadflow(grid, grid.base.power_to_pu(p_inj_kw))
        except NotConverged:
            return False, None
        vm = np.abs(res.v)
        ok = (vm.min() >= v_min - tolerance
              and vm.max() <= v_max + tolerance
              and np.all(res.i_b <= i_max * (1.0 + tolerance)))
        return bool(ok), res

    return check


def _planned_dispatch(ctx: HeuristicContext, state: HeuristicState,
                      pv_kw: np.ndarray, load_kw: np.ndarray,
                      hour: float) -> tuple[np.ndarray, np.ndarray]:
    """Battery set-points before any grid-limit scaling."""
    cfg, t = ctx.config, ctx.t_hours
    n_s = len(ctx.fleet)
    p_dis = np.zeros(n_s)
    p_ch = np.zeros(n_s)
    in_morning = cfg.morning_start_hour <= hour < cfg.morning_end_hour
    pv_at_bus = np.zeros(ctx.grid.n_bus)
    np.add.at(pv_at_bus, ctx.pv_bus, pv_kw)
    for s, u in enumerate(ctx.fleet):
        b = ctx.unit_bus[s]
        if in_morning and not state.morning_emptied[s] and state.e_kwh[s] > 1e-9:
            # dump stored energy: limited by the power rating and by what
            # the stored energy can deliver in one step
            p_dis[s] = min(u.p_dis_max_kw, state.e_kwh[s] * u.eta_dis / t)
        else:
            surplus = pv_at_bus[b] - load_kw[b]
            if surplus > 0 and state.e_kwh[s] < ctx.z_kwh[s] - 1e-12:
                headroom_kw = (ctx.z_kwh[s] - state.e_kwh[s]) / (t * u.eta_ch)
                p_ch[s] = -min(surplus, u.p_ch_max_kw, headroom_kw)
    return p_dis, p_ch


def heuristic_step(ctx: HeuristicContext, state: HeuristicState,
                   pv_avail_kw: np.ndarray, load_kw: np.ndarray,
                   hour: float, grid_check) -> tuple[StepDispatch, HeuristicState]:
    """One step of the rule; returns the dispatch and the successor state."""
    cfg, grid, t = ctx.config, ctx.grid, ctx.t_hours
    new = state.copy()
    if hour < new.last_hour:            # the clock wrapped: a new day
        new.morning_emptied[:] = False
    new.last_hour = hour

    pv = np.minimum(np.maximum(np.asarray(pv_avail_kw, dtype=float), 0.0),
                    ctx.pv_rating_kw)
    p_dis, p_ch = _planned_dispatch(ctx, new, pv, load_kw, hour)

    def injections(scale: float) -> np.ndarray:
        inj = -np.asarray(load_kw, dtype=float).copy()
        np.add.at(inj, ctx.pv_bus, pv)
        np.add.at(inj, ctx.unit_bus, p_dis + p_ch)
        inj[grid.slack_index] = 0.0
        pos = np.maximum(inj, 0.0)
        return np.minimum(inj, 0.0) + scale * pos

    ok, flow = grid_check(injections(1.0))
    scale = 1.0
    if not ok:
        lo, hi = 0.0, 1.0              # lo feasible (full curtailment), hi not
        ok0, flow = grid_check(injections(0.0))
        if ok0:
            for _ in range(cfg.bisection_iterations):
                mid = 0.5 * (lo + hi)
                okm, fm = grid_check(injections(mid))
                if okm:
                    lo, flow = mid, fm
                else:
                    hi = mid
        scale = lo
        # charge the scale-back to PV first, then to battery discharge
        inj_raw = -np.asarray(load_kw, dtype=float).copy()
        np.add.at(inj_raw, ctx.pv_bus, pv)
        np.add.at(inj_raw, ctx.unit_bus, p_dis + p_ch)
        inj_raw[grid.slack_index] = 0.0
        reduction = (1.0 - scale) * np.maximum(inj_raw, 0.0)
        for b in np.nonzero(reduction > 0)[0]:
            need = reduction[b]
            for j in np.nonzero(ctx.pv_bus == b)[0]:
                cut = min(need, pv[j])
                pv[j] -= cut
                need -= cut
                if need <= 1e-15:
                    break
            if need > 1e-15:
                for s in np.nonzero(ctx.unit_bus == b)[0]:
                    cut = min(need, p_dis[s])
                    p_dis[s] -= cut
                    need -= cut
                    if need <= 1e-15:
                        break
        new.export_limit_kw[:] = np.inf
        limited = np.maximum(inj_raw, 0.0) > 0
        new.export_limit_kw[limited] = scale * inj_raw[limited]

    final_inj = -np.asarray(load_kw, dtype=float).copy()
    np.add.at(final_inj, ctx.pv_bus, pv)
    np.add.at(final_inj, ctx.unit_bus, p_dis + p_ch)
    final_inj[grid.slack_index] = 0.0
    if flow is None:
        _, flow = grid_check(final_inj)

    for s, u in enumerate(ctx.fleet):
        de = (-t / u.eta_dis * p_dis[s] - t * u.eta_ch * p_ch[s])
        new.e_kwh[s] = min(max(new.e_kwh[s] + de, 0.0), ctx.z_kwh[s])
        if (cfg.morning_start_hour <= hour < cfg.morning_end_hour
                and new.e_kwh[s] <= 1e-9):
            new.morning_emptied[s] = True

    dispatch = StepDispatch(pv_kw=pv, p_dis_kw=p_dis, p_ch_kw=p_ch,
                            injections_kw=final_inj, curtail_factor=scale,
                            flow=flow)
    return dispatch, new


@dataclass
class HeuristicResult:
    trajectory: Trajectory
    j_sub: float                    # energy + priced-fade accounting
    energy_cost_eur: float          # feeder cash flow only
    curtailed_mwh: float
    z_kwh: np.ndarray


def run_heuristic_year(system: SystemModel, z_kwh: np.ndarray, *,
                       n_steps: int | None = None,
                       config: HeuristicConfig | None = None,
                       grid_check=None,
                       trace_path: str | Path | None = None) -> HeuristicResult:
    """Simulate the rule over the profiled span with capacities ``z_kwh``.

    Costs follow the same per-step accounting as the optimizing
    controllers — feeder energy priced by the tariff plus the fade rate
    priced at the battery cost — with the fade read off the degradation
    map along the realized trajectory (the rule itself never sees it).
    """
    grid = system.grid
    n = system.profiles.n_steps if n_steps is None else n_steps
    z = np.broadcast_to(np.asarray(z_kwh, dtype=float),
                        (len(system.fleet),)).copy()
    ctx = make_context(system, z, config)
    state = initial_state(ctx)
    check = grid_check or make_grid_check(grid, system.v_min, system.v_max)

    gen_names = list(system.layout.gen_names)
    n_g, n_b = len(gen_names), grid.n_bus
    n_l, n_s = grid.n_branch, len(system.fleet)
    feeder_j = system.feeder_index
    pv_gen_idx = [j for j, g in enumerate(system.gens) if g.kind is GenKind.PV]
    dis_idx = [gen_names.index(f"{u.name}:dis") for u in system.fleet]
    ch_idx = [gen_names.index(f"{u.name}:ch") for u in system.fleet]
    # the load flow ignores injections at the slack bus, so anything the
    # scenario parks there (load, PV, a battery) trades with the feeder
    # directly and has to be added back into the exchange by hand
    slack_b = grid.slack_index
    slack_bus = grid.bus_names[slack_b]
    pv_at_slack = [i for i, j in enumerate(pv_gen_idx)
                   if system.gens[j].bus == slack_bus]
    units_at_slack = [s for s, u in enumerate(system.fleet)
                      if u.bus == slack_bus]

    p_gen = np.zeros((n, n_g))
    y = np.zeros((n, n_g))
    v = np.zeros((n, n_b))
    loss_p = np.zeros((n, n_l))
    e = np.zeros((n, n_s))
    d = np.zeros((n, n_s))
    curtailed_kwh = 0.0
    trace_fh = open(trace_path, "w") if trace_path is not None else None
    try:
        for k in range(n):
            hour = (k * system.t_hours) % 24.0
            pv_avail = np.array([system.profiles.pv_kw[k,
                                 system.profiles.buses.index(system.gens[j].bus)]
                                 for j in pv_gen_idx])
            load = system.demand_kw(k)
            dispatch, state = heuristic_step(ctx, state, pv_avail, load,
                                             hour, check)
            flow = dispatch.flow
            if flow is None:
                raise NotConverged(f"no load-flow solution at step {k}")
            local_gen = (sum(dispatch.pv_kw[i] for i in pv_at_slack)
                         + sum(dispatch.p_dis_kw[s] + dispatch.p_ch_kw[s]
                               for s in units_at_slack))
            feeder_kw = (grid.base.power_from_pu(flow.slack_p)
                         + load[slack_b] - local_gen)
            p_gen[k, feeder_j] = feeder_kw
            for idx, val in zip(pv_gen_idx, dispatch.pv_kw):
                p_gen[k, idx] = val
            p_gen[k, dis_idx] = dispatch.p_dis_kw
            p_gen[k, ch_idx] = dispatch.p_ch_kw
            imp, exp = system.tariff.tariff_at(k)
            y[k, feeder_j] = (imp * max(feeder_kw, 0.0)
                              + exp * min(feeder_kw, 0.0)) / 1000.0
            v[k] = np.abs(flow.v)
            loss_p[k] = grid.base.power_from_pu(flow.losses_per_branch)
            e[k] = state.e_kwh
            p_net = dispatch.p_dis_kw + dispatch.p_ch_kw
            d[k] = system.dmap.fade_rate(p_net, state.e_kwh, z)
            curtailed_kwh += (pv_avail.clip(min=0.0).clip(max=ctx.pv_rating_kw)
                              - dispatch.pv_kw).sum() * system.t_hours
            if trace_fh is not None:
                trace_fh.write(json.dumps({
                    "step": k, "hour": hour,
                    "curtail_factor": dispatch.curtail_factor,
                    "p_gen_kw": np.round(p_gen[k], 9).tolist(),
                    "soe_kwh": np.round(e[k], 9).tolist(),
                }) + "\n")
    finally:
        if trace_fh is not None:
            trace_fh.close()

    step_cost = system.t_hours * (y.sum(axis=1)
                                  + system.battery_cost_eur_kwh * d.sum(axis=1))
    traj = Trajectory(
        steps=np.arange(n), gen_names=gen_names,
        bus_names=list(grid.bus_names),
        unit_names=[u.name for u in system.fleet],
        p_gen_kw=p_gen, q_gen_kvar=np.zeros_like(p_gen), v_pu=v,
        loss_p_kw=loss_p, loss_q_kvar=np.zeros((n, n_l)), y_eur_h=y,
        e_kwh=e, d_kwh_h=d, z_kwh=z, step_cost_eur=step_cost,
    )
    return HeuristicResult(
        trajectory=traj, j_sub=float(step_cost.sum()),
        energy_cost_eur=float(y.sum() * system.t_hours),
        curtailed_mwh=curtailed_kwh / 1000.0, z_kwh=z,
    )
