"""Ready-made studies and the glue that makes a config solvable.

Two scenario families ship with the package: a two-branch desk feeder
small enough that every optimizer result can be cross-checked against
monolithic solves and hand arithmetic, and the CIGRE European
low-voltage residential feeder with a battery slot, a PV unit and a
household on every bus, run over a full year at hourly resolution.
``build_system`` turns either config (or any user-written one) into the
:class:`~lvbess.multiperiod.SystemModel` the controllers consume.
"""

from __future__ import annotations

import dataclasses
from importlib import resources
from pathlib import Path

from .io import (ProfileSet, ScenarioConfig, load_grid, load_profiles,
                 synthesize_profiles)
from .grid import GridModel, build_operators
from .multiperiod import SystemModel, prorated_sizing_cost
from .opf import (Circular, GenKind, GeneratorSpec, PwaCost, Rectangular,
                  make_layout)
from .storage import StorageSpec, default_degradation_map, fleet_generators

#: dispatch flavors understood by ``dispatch_system`` and the batch driver
CONTROLLERS = ("mpc", "mpc-deg", "heuristic")

#: the MV connection is not a studied limit; keep it out of the way
FEEDER_CAP_KW = 1.0e5

#: reference battery size for sampling the synthetic fade model
FADE_SAMPLE_REF_KWH = 10.0


def data_path(name: str) -> Path:
    """Absolute path of a data file shipped inside the package."""
    return Path(str(resources.files("lvbess").joinpath("data").joinpath(name)))


def resolve_input(name: str | Path, search_dir: str | Path | None = None,
                  ) -> Path:
    """Find a scenario input: as given, next to the scenario, or shipped."""
    cand = Path(name)
    if cand.is_absolute():
        return cand
    if search_dir is not None and (Path(search_dir) / cand).exists():
        return Path(search_dir) / cand
    if cand.exists():
        return cand
    shipped = data_path(cand.name)
    if shipped.exists():
        return shipped
    raise FileNotFoundError(f"cannot locate scenario input {name!r}")


def desk_scenario(*, seed: int = 11, days: int = 2) -> ScenarioConfig:
    """Three buses, one PV roof, two battery slots, a couple of days.

    Sized so that a monolithic sizing LP, full enumeration sweeps, and
    finite-difference probes all run in seconds; the profile energy
    targets scale with the requested span so per-day intensity is fixed.
    """
    return ScenarioConfig(
        grid_file="desk_lv.csv",
        storage_buses=["B2", "B3"],
        pv_buses=["B3"],
        horizons_h=[6, 12, 24],
        n_steps=days * 24,
        profile_source={"kind": "synthetic", "seed": seed,
                        "pv_total_mwh": 0.06 * days,
                        "load_total_mwh": 0.03 * days},
    )


def benchmark_scenario(*, seed: int = 1) -> ScenarioConfig:
    """The CIGRE LV residential feeder, fully populated, one year.

    Eighteen 10 kW / 10 kVar battery slots and eighteen 20 kW PV units,
    one of each on every bus — the feeder bus included, where they trade
    with the upstream grid without touching the network constraints.
    """
    buses = [f"R{i}" for i in range(1, 19)]
    return ScenarioConfig(
        grid_file="cigre_lv.csv",
        storage_buses=list(buses),
        pv_buses=list(buses),
        profile_source={"kind": "synthetic", "seed": seed,
                        "pv_total_mwh": 465.0, "load_total_mwh": 61.5},
    )


def scenario_profiles(config: ScenarioConfig,
                      search_dir: str | Path | None = None) -> ProfileSet:
    """Materialize the config's profile source."""
    src = dict(config.profile_source)
    kind = src.pop("kind", "synthetic")
    if kind == "synthetic":
        if config.n_steps % 24:
            raise ValueError("synthetic profiles need whole days")
        buses = sorted(set(config.storage_buses) | set(config.pv_buses))
        return synthesize_profiles(seed=int(src.get("seed", 1)),
                                   days=config.n_steps // 24,
                                   buses=buses,
                                   pv_total_mwh=float(src["pv_total_mwh"]),
                                   load_total_mwh=float(src["load_total_mwh"]))
    if kind == "files":
        return load_profiles(resolve_input(src["pv"], search_dir),
                             resolve_input(src["load"], search_dir))
    raise ValueError(f"unknown profile source kind {kind!r}")


def scenario_fleet(config: ScenarioConfig) -> list[StorageSpec]:
    return [StorageSpec(name=f"S@{bus}", bus=bus,
                        p_dis_max_kw=config.storage_p_max_kw,
                        p_ch_max_kw=config.storage_p_max_kw,
                        q_max_kvar=config.storage_q_max_kvar,
                        eta_dis=config.storage_eta_discharge,
                        eta_ch=config.storage_eta_charge)
            for bus in config.storage_buses]


def scenario_generators(config: ScenarioConfig, grid: GridModel,
                        fleet: list[StorageSpec]) -> list[GeneratorSpec]:
    feeder = GeneratorSpec(
        name="feeder", bus=grid.bus_names[grid.slack_index],
        kind=GenKind.SLACK_FEEDER, p_min_kw=-FEEDER_CAP_KW,
        p_max_kw=FEEDER_CAP_KW, s_max_kva=FEEDER_CAP_KW,
        q_shape=Circular(), cost=PwaCost.free())   # tariff applied per step
    pv = [GeneratorSpec(name=f"pv@{bus}", bus=bus, kind=GenKind.PV,
                        p_min_kw=0.0, p_max_kw=config.pv_p_max_kw,
                        s_max_kva=config.pv_q_max_kvar,
                        q_shape=Rectangular(), cost=PwaCost.free())
          for bus in config.pv_buses]
    return [feeder] + pv + fleet_generators(fleet)


def build_system(config: ScenarioConfig, battery_cost_eur_kwh: float, *,
                 profiles: ProfileSet | None = None,
                 search_dir: str | Path | None = None) -> SystemModel:
    """Assemble the solvable system for one battery-cost level.

    The cost enters twice, deliberately: as the fade price seen by the
    dispatch objective and, prorated over the simulated span against the
    calendar life, as the sizing price per kWh seen by the planner.
    """
    grid = load_grid(resolve_input(config.grid_file, search_dir),
                     v_slack=config.v_slack)
    fleet = scenario_fleet(config)
    gens = scenario_generators(config, grid, fleet)
    ops = build_operators(grid)
    if profiles is None:
        profiles = scenario_profiles(config, search_dir)
    ref_unit = fleet[0] if fleet else StorageSpec(name="ref", bus=grid.bus_names[0])
    return SystemModel(
        grid=grid, ops=ops, gens=gens, layout=make_layout(ops, gens),
        fleet=fleet, tariff=config.tariff, profiles=profiles,
        dmap=default_degradation_map(ref_unit, FADE_SAMPLE_REF_KWH),
        battery_cost_eur_kwh=battery_cost_eur_kwh,
        sizing_cost_eur_kwh=prorated_sizing_cost(
            battery_cost_eur_kwh, config.n_steps, config.step_hours),
        v_min=config.v_min, v_max=config.v_max,
        t_hours=config.step_hours)


def dispatch_system(system: SystemModel, controller: str) -> SystemModel:
    """The system as one of the dispatch flavors sees it.

    ``mpc`` runs fade-blind (zero fade price in the objective; fade is
    still charged ex post by the economics), ``mpc-deg`` prices fade in
    the dispatch, and the ``heuristic`` never looks at prices at all.
    """
    if controller not in CONTROLLERS:
        raise ValueError(f"unknown controller {controller!r}; "
                         f"pick one of {CONTROLLERS}")
    if controller == "mpc":
        return dataclasses.replace(system, battery_cost_eur_kwh=0.0)
    return system
