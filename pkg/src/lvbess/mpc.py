"""Receding-horizon execution of the horizon dispatch problem.

The year is covered by n = N/c windows.  Window j sees steps
[jc, jc+H), is solved with the capacities pinned, and only its first c
steps are applied; the stored energy reached after those c steps seeds
window j+1.  Each window's pin-row duals are collected and weighted by
c/H into the capacity sensitivity the planning layer consumes, and the
applied-step costs accumulate into the operation total attributed to
the candidate capacities.

Profiles are extended beyond the simulated span by wrapping to the
start of the series, so the final windows keep a full lookahead.
Windows read the true series: forecasts are perfect by construction.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lp import LpSolution, LpStatus, SolverConfig, dump_lp, solve_lp
from .multiperiod import (FixedCapacity, MultiPeriodProblem, SystemModel,
                          Trajectory, assemble_multiperiod, extract_trajectory)


class WindowInfeasible(RuntimeError):
    """A window LP failed; the run aborts because, with curtailable PV and
    a slack feeder, infeasibility indicates a data or configuration bug."""

    def __init__(self, window: int, status: str, detail: str = ""):
        self.window = window
        self.status = status
        super().__init__(f"window {window} ended {status}"
                         + (f": {detail}" if detail else ""))


class MissingRows(ValueError):
    """The window problem has no capacity pin rows to read duals from."""


@dataclass(frozen=True)
class MpcConfig:
    horizon_steps: int        # H
    update_steps: int         # c, applied per window
    step_hours: float         # T
    total_steps: int          # N

    def __post_init__(self) -> None:
        if not (1 <= self.update_steps <= self.horizon_steps <= self.total_steps):
            raise ValueError("need 1 <= c <= H <= N, got "
                             f"c={self.update_steps}, H={self.horizon_steps}, "
                             f"N={self.total_steps}")
        if self.total_steps % self.update_steps:
            raise ValueError(
                f"N={self.total_steps} not divisible by c={self.update_steps}")
        if self.step_hours <= 0:
            raise ValueError("step length must be positive")

    @property
    def n_windows(self) -> int:
        return self.total_steps // self.update_steps


@dataclass
class WindowRecord:
    index: int
    k0: int
    status: str
    objective: float
    duals_z: np.ndarray
    solve_seconds: float
    lp_iterations: int


@dataclass
class MpcRunResult:
    trajectory: Trajectory          # applied steps, stitched over all windows
    lambda_s: np.ndarray            # weighted capacity sensitivity, EUR/kWh
    j_sub: float                    # applied-step operation cost, EUR
    z_kwh: np.ndarray
    windows: list[WindowRecord]

    @property
    def n_windows(self) -> int:
        return len(self.windows)


def extract_z_duals(sol: LpSolution, mpp: MultiPeriodProblem) -> np.ndarray:
    """Duals of the capacity pin rows: marginal window cost per kWh of z.

    Negative components mean more capacity would reduce the window cost.
    """
    if mpp.pin_rows is None:
        raise MissingRows("window was not assembled with pinned capacities")
    names = mpp.problem.row_names_eq[mpp.pin_rows]
    if not all(str(nm).startswith("pin_z[") for nm in names):
        raise MissingRows(f"rows {mpp.pin_rows} are not capacity pins: {names}")
    return np.asarray(sol.duals_eq[mpp.pin_rows], dtype=float)


def _stitch(parts: list[Trajectory], z: np.ndarray) -> Trajectory:
    first = parts[0]
    return Trajectory(
        steps=np.concatenate([t.steps for t in parts]),
        gen_names=first.gen_names, bus_names=first.bus_names,
        unit_names=first.unit_names,
        p_gen_kw=np.vstack([t.p_gen_kw for t in parts]),
        q_gen_kvar=np.vstack([t.q_gen_kvar for t in parts]),
        v_pu=np.vstack([t.v_pu for t in parts]),
        loss_p_kw=np.vstack([t.loss_p_kw for t in parts]),
        loss_q_kvar=np.vstack([t.loss_q_kvar for t in parts]),
        y_eur_h=np.vstack([t.y_eur_h for t in parts]),
        e_kwh=np.vstack([t.e_kwh for t in parts]),
        d_kwh_h=np.vstack([t.d_kwh_h for t in parts]),
        z_kwh=z.copy(),
        step_cost_eur=np.concatenate([t.step_cost_eur for t in parts]),
    )


def _clip_state(e_next: np.ndarray, z: np.ndarray, window: int) -> np.ndarray:
    """Absorb solver-tolerance fuzz; anything beyond it is a real violation."""
    over = e_next - z
    if np.any(over > 1e-6) or np.any(e_next < -1e-6):
        raise WindowInfeasible(window, "state_violation",
                               f"carried state {e_next} outside [0, {z}]")
    return np.clip(e_next, 0.0, z)


def _applied_slice(traj: Trajectory, c: int) -> Trajectory:
    return Trajectory(
        steps=traj.steps[:c], gen_names=traj.gen_names,
        bus_names=traj.bus_names, unit_names=traj.unit_names,
        p_gen_kw=traj.p_gen_kw[:c], q_gen_kvar=traj.q_gen_kvar[:c],
        v_pu=traj.v_pu[:c], loss_p_kw=traj.loss_p_kw[:c],
        loss_q_kvar=traj.loss_q_kvar[:c], y_eur_h=traj.y_eur_h[:c],
        e_kwh=traj.e_kwh[:c], d_kwh_h=traj.d_kwh_h[:c], z_kwh=traj.z_kwh,
        step_cost_eur=traj.step_cost_eur[:c],
    )


def run_receding_horizon(system: SystemModel, config: MpcConfig,
                         z_fixed: np.ndarray, *,
                         e0: np.ndarray | None = None,
                         trace_path: str | Path | None = None,
                         solver_config: SolverConfig | None = None,
                         dump_dir: str | Path | None = None) -> MpcRunResult:
    """Roll the controller over N steps with capacities pinned at ``z_fixed``."""
    n_s = len(system.fleet)
    z = np.broadcast_to(np.asarray(z_fixed, dtype=float), (n_s,)).copy()
    if np.any(z < 0):
        raise ValueError("capacities must be non-negative")
    if e0 is None:
        e0 = np.array([u.e0_kwh for u in system.fleet])
    e_state = np.asarray(e0, dtype=float).copy()

    # every window needs H steps of lookahead; wrap the series
    overhang = config.total_steps + config.horizon_steps - system.profiles.n_steps
    work = system
    if overhang > 0:
        work = system.with_profiles(system.profiles.extended(overhang))

    scfg = solver_config or SolverConfig()
    h, c = config.horizon_steps, config.update_steps
    weight = c / h
    lambda_s = np.zeros(n_s)
    records: list[WindowRecord] = []
    applied: list[Trajectory] = []
    trace_fh = open(trace_path, "w") if trace_path is not None else None
    try:
        for j in range(config.n_windows):
            k0 = j * c
            mpp = assemble_multiperiod(work, k0, h, e_state, FixedCapacity(z))
            t0 = time.perf_counter()
            sol = solve_lp(mpp.problem, scfg)
            dt = time.perf_counter() - t0
            if sol.status is not LpStatus.OPTIMAL:
                if dump_dir is not None:
                    path = Path(dump_dir) / f"window_{j:05d}.lp"
                    path.parent.mkdir(parents=True, exist_ok=True)
                    dump_lp(mpp.problem, path)
                    detail = f"problem dumped to {path}"
                else:
                    detail = f"k0={k0}, e0={e_state.tolist()}, z={z.tolist()}"
                raise WindowInfeasible(j, sol.status.value, detail)

            duals = extract_z_duals(sol, mpp)
            lambda_s += weight * duals
            traj = extract_trajectory(mpp, sol)
            applied.append(_applied_slice(traj, c))
            e_state = _clip_state(traj.e_kwh[c - 1].copy(), z, j) if n_s else e_state
            records.append(WindowRecord(
                index=j, k0=k0, status=sol.status.value,
                objective=sol.objective_value, duals_z=duals,
                solve_seconds=dt, lp_iterations=sol.iterations))
            if trace_fh is not None:
                trace_fh.write(json.dumps({
                    "window": j, "k0": k0, "status": sol.status.value,
                    "objective": sol.objective_value,
                    "duals_z": duals.tolist(),
                    "applied_p_gen_kw": np.round(
                        traj.p_gen_kw[:c], 9).tolist(),
                    "applied_soe_kwh": np.round(traj.e_kwh[:c], 9).tolist(),
                }) + "\n")
    finally:
        if trace_fh is not None:
            trace_fh.close()

    stitched = _stitch(applied, z)
    j_sub = float(stitched.step_cost_eur.sum())
    return MpcRunResult(trajectory=stitched, lambda_s=lambda_s, j_sub=j_sub,
                        z_kwh=z, windows=records)
