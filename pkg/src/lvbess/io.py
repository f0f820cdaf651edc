"""Data ingestion and scenario files.

Covers the four interchange formats of the toolkit:

* grid files      -- CSV, one branch per row, header
                     ``start_node,end_node,r_ohm_per_km,x_ohm_per_km,length_m,i_max_A``
* profile files   -- CSV ``step,bus,kW`` for PV availability and load
* tariff calendar -- weekday/hour two-level import price plus flat export price
* scenario files  -- one human-readable JSON document tying the above together
                     with fleet ratings, horizons, and solver settings

The bundled ``data/cigre_lv.csv`` is the 18-bus European LV residential
feeder used throughout the tests and demos.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path

import numpy as np

from .grid import Bus, Branch, GridBase, GridModel


class ParseError(ValueError):
    """Malformed input file; carries file, row and column of the offence."""

    def __init__(self, message: str, *, path: str | Path = "?",
                 row: int | None = None, column: str | None = None) -> None:
        self.path = str(path)
        self.row = row
        self.column = column
        where = self.path
        if row is not None:
            where += f", row {row}"
        if column is not None:
            where += f", column {column!r}"
        super().__init__(f"{where}: {message}")


# ---------------------------------------------------------------------------
# grid files
# ---------------------------------------------------------------------------

GRID_HEADER = ["start_node", "end_node", "r_ohm_per_km", "x_ohm_per_km",
               "length_m", "i_max_A"]


def load_grid(path: str | Path, *, base: GridBase | None = None,
              v_slack: float = 1.0) -> GridModel:
    """Read a branch-list CSV into a :class:`GridModel`.

    Buses are collected from the node columns in order of first
    appearance.  The feeder (slack) bus is the unique bus that never
    appears as an ``end_node``; branch rows are expected to be oriented
    away from the feeder.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", path=path) from None
        header = [h.strip() for h in header]
        if header != GRID_HEADER:
            for i, want in enumerate(GRID_HEADER):
                got = header[i] if i < len(header) else "<missing>"
                if got != want:
                    raise ParseError(
                        f"expected column {want!r}, found {got!r}",
                        path=path, row=1, column=want)
        branches: list[Branch] = []
        seen_order: list[str] = []
        ends: set[str] = set()
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(GRID_HEADER):
                raise ParseError(f"expected {len(GRID_HEADER)} fields, found {len(rec)}",
                                 path=path, row=lineno)
            start, end = rec[0].strip(), rec[1].strip()
            nums = []
            for col, raw in zip(GRID_HEADER[2:], rec[2:]):
                try:
                    nums.append(float(raw))
                except ValueError:
                    raise ParseError(f"not a number: {raw!r}",
                                     path=path, row=lineno, column=col) from None
            for name in (start, end):
                if name not in seen_order:
                    seen_order.append(name)
            ends.add(end)
            branches.append(Branch(start, end, *nums))

    if not branches:
        raise ParseError("no branch rows", path=path)
    roots = [n for n in seen_order if n not in ends]
    if len(roots) != 1:
        raise ParseError(
            f"cannot identify the feeder bus: {len(roots)} buses never appear "
            f"as end_node ({roots[:4]}...); orient branch rows away from the feeder",
            path=path)
    buses = [Bus(n, is_slack=(n == roots[0])) for n in seen_order]
    return GridModel(buses=buses, branches=branches,
                     base=base or GridBase(), v_slack=v_slack)


def cigre_grid(**kwargs) -> GridModel:
    """The bundled 18-bus residential LV feeder."""
    with resources.as_file(resources.files("lvbess.data") / "cigre_lv.csv") as p:
        return load_grid(p, **kwargs)


# ---------------------------------------------------------------------------
# tariff calendar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TariffSchedule:
    """Two-level import price with a flat export price.

    The year is anchored at Monday 00:00 with no daylight-saving shifts,
    so a step index converts to (weekday, hour) by plain division.
    """

    import_high: float = 246.0      # €/MWh inside the high window
    import_low: float = 131.5       # €/MWh outside it
    export: float = 50.0            # €/MWh paid for net feed-in
    high_hour_start: int = 6
    high_hour_end: int = 22         # exclusive
    high_last_weekday: int = 5      # Monday=0 .. Saturday=5 inclusive
    step_hours: float = 1.0

    def tariff_at(self, step: int) -> tuple[float, float]:
        """(import €/MWh, export €/MWh) for one time step."""
        hours = int(step * self.step_hours)
        hour = hours % 24
        weekday = (hours // 24) % 7
        high = (weekday <= self.high_last_weekday
                and self.high_hour_start <= hour < self.high_hour_end)
        return (self.import_high if high else self.import_low, self.export)

    def import_series(self, n_steps: int) -> np.ndarray:
        return np.array([self.tariff_at(k)[0] for k in range(n_steps)])


def tariff_at(calendar: TariffSchedule, step: int) -> tuple[float, float]:
    return calendar.tariff_at(step)


# ---------------------------------------------------------------------------
# profiles
# ---------------------------------------------------------------------------

@dataclass
class ProfileSet:
    """Per-bus PV availability and load series, hourly kW.

    ``pv_kw`` and ``load_kw`` are (n_steps, n_units) with one column per
    entry of ``buses``.  ``base_steps`` is the length of the underlying
    series; rows beyond it repeat the series cyclically so receding
    windows can run past the end of the horizon.
    """

    buses: list[str]
    pv_kw: np.ndarray
    load_kw: np.ndarray
    base_steps: int

    def __post_init__(self) -> None:
        self.pv_kw = np.asarray(self.pv_kw, dtype=float)
        self.load_kw = np.asarray(self.load_kw, dtype=float)
        if self.pv_kw.shape != self.load_kw.shape:
            raise ValueError("pv and load series must have matching shapes")
        if self.pv_kw.shape[1] != len(self.buses):
            raise ValueError("one series column per bus required")
        if self.base_steps > self.pv_kw.shape[0]:
            raise ValueError("base_steps exceeds the series length")
        if np.any(self.pv_kw < 0):
            raise ValueError("PV availability must be non-negative")

    @property
    def n_steps(self) -> int:
        return self.pv_kw.shape[0]

    def extended(self, extra_steps: int) -> "ProfileSet":
        """Wrap-extend so at least ``base_steps + extra_steps`` rows exist."""
        need = self.base_steps + extra_steps
        if self.n_steps >= need:
            return self
        base_pv = self.pv_kw[:self.base_steps]
        base_ld = self.load_kw[:self.base_steps]
        reps = int(np.ceil(need / self.base_steps))
        return ProfileSet(
            buses=list(self.buses),
            pv_kw=np.tile(base_pv, (reps, 1))[:need],
            load_kw=np.tile(base_ld, (reps, 1))[:need],
            base_steps=self.base_steps,
        )

    def total_pv_mwh(self) -> float:
        return float(self.pv_kw[:self.base_steps].sum()) / 1000.0

    def total_load_mwh(self) -> float:
        return float(self.load_kw[:self.base_steps].sum()) / 1000.0


def save_profiles(profiles: ProfileSet, pv_path: str | Path,
                  load_path: str | Path) -> None:
    """Write the two ``step,bus,kW`` CSV files (base series only)."""
    for path, series in ((pv_path, profiles.pv_kw), (load_path, profiles.load_kw)):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "bus", "kW"])
            for k in range(profiles.base_steps):
                for j, bus in enumerate(profiles.buses):
                    w.writerow([k, bus, repr(float(series[k, j]))])


def load_profiles(pv_path: str | Path, load_path: str | Path) -> ProfileSet:
    """Read the two ``step,bus,kW`` CSV files written by :func:`save_profiles`."""
    def read_one(path):
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or [h.strip() for h in header] != ["step", "bus", "kW"]:
                raise ParseError("expected header step,bus,kW", path=path, row=1)
            cells: dict[tuple[int, str], float] = {}
            buses: list[str] = []
            for lineno, rec in enumerate(reader, start=2):
                if not rec or all(not c.strip() for c in rec):
                    continue
                if len(rec) != 3:
                    raise ParseError("expected 3 fields", path=path, row=lineno)
                try:
                    step = int(rec[0])
                except ValueError:
                    raise ParseError(f"not an integer step: {rec[0]!r}",
                                     path=path, row=lineno, column="step") from None
                bus = rec[1].strip()
                try:
                    kw = float(rec[2])
                except ValueError:
                    raise ParseError(f"not a number: {rec[2]!r}",
                                     path=path, row=lineno, column="kW") from None
                if bus not in buses:
                    buses.append(bus)
                cells[(step, bus)] = kw
            n_steps = max(s for s, _ in cells) + 1 if cells else 0
            arr = np.zeros((n_steps, len(buses)))
            for (s, b), kw in cells.items():
                arr[s, buses.index(b)] = kw
            return buses, arr

    pv_buses, pv = read_one(pv_path)
    ld_buses, ld = read_one(load_path)
    if pv_buses != ld_buses or pv.shape != ld.shape:
        raise ParseError("pv and load files disagree on buses or steps",
                         path=load_path)
    return ProfileSet(buses=pv_buses, pv_kw=pv, load_kw=ld, base_steps=pv.shape[0])


def synthesize_profiles(
    seed: int,
    days: int,
    buses: list[str],
    pv_total_mwh: float,
    load_total_mwh: float,
) -> ProfileSet:
    """Deterministic synthetic PV and household-load series.

    PV: a clear-sky bell per day, daylight window and amplitude modulated
    over the season, multiplied by a smooth seeded cloud process.  Load:
    weekday-shaped base with morning and evening peaks plus seeded noise.
    Both are scaled so the totals over the generated span hit the targets
    exactly (well within the 0.1% reporting tolerance).
    """
    rng = np.random.default_rng(seed)
    n_units = len(buses)
    steps = days * 24
    hours = np.arange(steps)
    hour_of_day = hours % 24
    day_idx = hours // 24

    # season in [0,1]: 0 at mid-winter, 1 at mid-summer (day 172 of a
    # Monday-anchored year)
    season = 0.5 - 0.5 * np.cos(2 * np.pi * (day_idx - 11) / 365.25)

    # --- PV -----------------------------------------------------------------
    half_window = 3.0 + 3.5 * season                 # hours around solar noon
    offset = (hour_of_day + 0.5) - 12.5              # bin centre vs solar noon
    inside = np.abs(offset) < half_window
    bell = np.zeros(steps)
    bell[inside] = np.cos(0.5 * np.pi * offset[inside] / half_window[inside]) ** 2
    amplitude = 0.35 + 0.65 * season                 # seasonal irradiance level

    # cloud process: smooth lognormal-ish multiplier, persistent over ~6 h
    white = rng.standard_normal(steps)
    cloud = np.empty(steps)
    acc = 0.0
    for k in range(steps):
        acc = 0.85 * acc + 0.15 * white[k]
        cloud[k] = acc
    cloud = np.clip(0.75 + 0.9 * cloud, 0.05, 1.0)

    unit_scale = 1.0 + 0.08 * rng.standard_normal(n_units)
    pv = np.outer(bell * amplitude * cloud, np.clip(unit_scale, 0.5, None))

    # --- load ---------------------------------------------------------------
    base_shape = np.array([
        0.42, 0.38, 0.36, 0.35, 0.36, 0.42,  # 00-05
        0.60, 0.85, 0.80, 0.65, 0.60, 0.62,  # 06-11
        0.66, 0.63, 0.60, 0.62, 0.72, 0.95,  # 12-17
        1.15, 1.25, 1.20, 1.00, 0.75, 0.55,  # 18-23
    ])
    weekday = day_idx % 7
    weekend_bump = np.where(weekday >= 5, 1.12, 1.0)
    seasonal_load = 1.0 + 0.18 * (1.0 - season)      # more demand in winter
    household = 0.6 + 0.5 * rng.random(n_units)
    noise = np.clip(1.0 + 0.15 * rng.standard_normal((steps, n_units)), 0.3, None)
    load = (base_shape[hour_of_day] * weekend_bump * seasonal_load)[:, None] \
        * household[None, :] * noise

    # --- calibration ---------------------------------------------------------
    pv *= pv_total_mwh * 1000.0 / pv.sum()
    load *= load_total_mwh * 1000.0 / load.sum()
    return ProfileSet(buses=list(buses), pv_kw=pv, load_kw=load, base_steps=steps)


# ---------------------------------------------------------------------------
# scenario files
# ---------------------------------------------------------------------------

SCENARIO_SCHEMA = "lvbess-scenario/1"


@dataclass
class ScenarioConfig:
    """Everything needed to reproduce one study, in plain data.

    Serialized as a single JSON document (see :func:`save_scenario`);
    ``profile_source`` is either ``{"kind": "synthetic", "seed": int}`` or
    ``{"kind": "files", "pv": path, "load": path}``.
    """

    grid_file: str = "cigre_lv.csv"
    v_slack: float = 1.0
    v_min: float = 0.9
    v_max: float = 1.1

    # fleet ratings (one storage unit and one PV unit on every listed bus)
    storage_buses: list[str] = field(default_factory=list)
    storage_p_max_kw: float = 10.0
    storage_q_max_kvar: float = 10.0
    storage_eta_charge: float = 0.88
    storage_eta_discharge: float = 0.88
    pv_buses: list[str] = field(default_factory=list)
    pv_p_max_kw: float = 20.0
    pv_q_max_kvar: float = 10.0

    # tariffs, horizon grid, solver settings
    tariff: TariffSchedule = field(default_factory=TariffSchedule)
    horizons_h: list[int] = field(default_factory=lambda: [6, 12, 24, 168, 672])
    control_steps: int = 6              # steps applied per receding window
    step_hours: float = 1.0
    n_steps: int = 8760
    battery_cost_sweep: list[float] = field(
        default_factory=lambda: [float(c) for c in range(50, 1001, 50)])
    gap_tolerance: float = 0.01
    profile_source: dict = field(
        default_factory=lambda: {"kind": "synthetic", "seed": 1,
                                 "pv_total_mwh": 465.0, "load_total_mwh": 61.5})

    def __post_init__(self) -> None:
        if self.n_steps % self.control_steps:
            raise ValueError("n_steps must be divisible by control_steps")
        if not (0 < self.v_min < self.v_max):
            raise ValueError("voltage limits must satisfy 0 < v_min < v_max")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tariff"] = asdict(self.tariff)
        return {"schema": SCENARIO_SCHEMA, **d}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        schema = d.pop("schema", SCENARIO_SCHEMA)
        if schema != SCENARIO_SCHEMA:
            raise ParseError(f"unsupported scenario schema {schema!r}")
        if "tariff" in d and isinstance(d["tariff"], dict):
            d["tariff"] = TariffSchedule(**d["tariff"])
        return cls(**d)


def save_scenario(config: ScenarioConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}", path=path,
                             row=exc.lineno) from None
    try:
        return ScenarioConfig.from_dict(d)
    except TypeError as exc:
        raise ParseError(f"bad scenario field: {exc}", path=path) from None
