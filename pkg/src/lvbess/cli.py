"""Batch driver: plan, simulate, compare, validate.

This is deliberately thin glue over the library: each subcommand builds
a system from a scenario config, calls one of the solvers, and writes
versioned, timestamp-free artifacts (timestamps live in a separate
``metadata.json`` so reruns with the same inputs and seed are
byte-identical).  Exit codes: 0 success, 1 input error, 2 the planner
stopped without reaching its gap, 3 numerical failure inside a solve.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .benders import (IterationLimit, NoProgress, PlanResult, run_benders,
                      write_convergence_csv)
from .economics import ResultsRow, evaluate_run, write_results_csv
from .grid import GridModel, build_operators
from .heuristic import run_heuristic_year
from .io import ParseError, ScenarioConfig, load_grid, load_scenario
from .loadflow import NotConverged, fbs_loadflow
from .lp import NumericalBreakdown
from .mpc import MpcConfig, WindowInfeasible, run_receding_horizon
from .multiperiod import SystemModel, Trajectory
from .scenarios import (CONTROLLERS, benchmark_scenario, build_system,
                        desk_scenario, dispatch_system, resolve_input)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NO_CONVERGENCE = 2
EXIT_NUMERICAL = 3

PLAN_SCHEMA = "lvbess-plan/1"
SWEEP_SCHEMA = "lvbess-sweep/1"
TRAJECTORY_SCHEMA = "lvbess-trajectory/1"
SUMMARY_SCHEMA = "lvbess-summary/1"
VALIDATION_SCHEMA = "lvbess-validation/1"
METADATA_SCHEMA = "lvbess-metadata/1"
ERROR_SCHEMA = "lvbess-error/1"

#: linearization-accuracy thresholds for ``validate`` (report-only)
VOLTAGE_ERROR_MAX_PU = 0.01
CURRENT_ERROR_MAX_FRAC = 0.05


# --- argument plumbing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="lvbess",
        description="Size, place, and operate distributed battery storage "
                    "in a radial low-voltage grid.")
    top.add_argument("--version", action="version", version=__version__)
    sub = top.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", default="desk",
                        help="'desk', 'benchmark', or a scenario JSON path")
    common.add_argument("--seed", type=int, default=None,
                        help="override the profile seed")
    common.add_argument("--out-dir", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=1,
                        help="worker pool size for independent scenario "
                             "levels (each worker owns its solvers)")

    plan = sub.add_parser("plan", parents=[common],
                          help="size and place storage (cut-generation loop)")
    plan.add_argument("--horizon", type=int, default=None,
                      help="subproblem lookahead in steps; default: the "
                           "full simulated span (open-loop planning)")
    plan.add_argument("--cost", type=float, default=None,
                      help="battery cost in EUR/kWh (single level)")
    plan.add_argument("--costs", default=None,
                      help="sweep start:stop:step in EUR/kWh, stop inclusive")
    plan.add_argument("--epsilon", type=float, default=None,
                      help="relative gap target; default from the scenario")
    plan.add_argument("--max-iterations", type=int, default=200)

    sim = sub.add_parser("simulate", parents=[common],
                         help="operate a fixed fleet over the profiled span")
    sim.add_argument("--controller", choices=CONTROLLERS, default="mpc-deg")
    sim.add_argument("--horizon", type=int, default=24,
                     help="lookahead in steps (predictive controllers)")
    sim.add_argument("--cost", type=float, default=150.0,
                     help="battery cost in EUR/kWh (prices fade for mpc-deg)")
    sim.add_argument("--z", default=None,
                     help="capacities in kWh: one value per unit, "
                          "comma-separated, or a single value for all")
    sim.add_argument("--plan", default=None,
                     help="plan.json to take capacities from")
    sim.add_argument("--trace", action="store_true",
                     help="also write a per-step JSONL trace")

    cmp_ = sub.add_parser("compare", parents=[common],
                          help="economics table across controllers")
    cmp_.add_argument("--horizon", type=int, default=24)
    cmp_.add_argument("--cost", type=float, default=150.0)
    cmp_.add_argument("--z", default=None)
    cmp_.add_argument("--plan", default=None)
    cmp_.add_argument("--controllers", default=",".join(CONTROLLERS),
                      help="comma-separated subset to evaluate")

    val = sub.add_parser("validate", parents=[common],
                         help="linearization accuracy vs the exact load flow")
    val.add_argument("--samples", type=int, default=200)
    val.add_argument("--loading", type=float, default=0.3,
                     help="injection range as a fraction of branch ratings")
    return top


def _scenario_from_args(args) -> tuple[ScenarioConfig, Path | None]:
    name = args.scenario
    if name == "desk":
        cfg = desk_scenario() if args.seed is None else desk_scenario(seed=args.seed)
        return cfg, None
    if name == "benchmark":
        cfg = benchmark_scenario() if args.seed is None \
            else benchmark_scenario(seed=args.seed)
        return cfg, None
    path = Path(name)
    cfg = load_scenario(path)
    if args.seed is not None:
        src = dict(cfg.profile_source)
        src["seed"] = args.seed
        cfg = dataclasses.replace(cfg, profile_source=src)
    return cfg, path.parent


def _mpc_config(config: ScenarioConfig, horizon: int | None) -> MpcConfig:
    if horizon is None:
        # whole span in one window: cut data is exact, the planner's default
        h = c = config.n_steps
    else:
        h = int(horizon)
        c = min(config.control_steps, h)
    return MpcConfig(horizon_steps=h, update_steps=c,
                     step_hours=config.step_hours,
                     total_steps=config.n_steps)


def _fleet_z(system: SystemModel, args) -> np.ndarray:
    n_s = len(system.fleet)
    if args.plan is not None:
        with open(args.plan) as fh:
            doc = json.load(fh)
        if doc.get("schema") != PLAN_SCHEMA:
            raise ParseError(f"not a plan file: {args.plan}")
        placed = doc["z_kwh"]
        try:
            return np.array([float(placed[u.name]) for u in system.fleet])
        except KeyError as exc:
            raise ParseError(f"plan lacks capacity for unit {exc}") from None
    if args.z is not None:
        vals = [float(v) for v in str(args.z).split(",")]
        if len(vals) == 1:
            vals = vals * n_s
        if len(vals) != n_s:
            raise ValueError(f"--z needs 1 or {n_s} values, got {len(vals)}")
        return np.array(vals)
    raise ValueError("provide capacities via --z or --plan")


# --- artifact writers ----------------------------------------------------------

def _write_json(path: Path, schema: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump({"schema": schema, **payload}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_metadata(out_dir: Path, args) -> None:
    _write_json(out_dir / "metadata.json", METADATA_SCHEMA, {
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "tool_version": __version__,
        "command": args.command,
        "arguments": {k: v for k, v in sorted(vars(args).items())
                      if k != "command"},
    })


def _write_trajectory_csv(traj: Trajectory, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {TRAJECTORY_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["step"]
            + [f"p_kw[{g}]" for g in traj.gen_names]
            + [f"v_pu[{b}]" for b in traj.bus_names]
            + [f"e_kwh[{u}]" for u in traj.unit_names]
            + [f"d_kwh_h[{u}]" for u in traj.unit_names]
            + ["y_total_eur_h", "step_cost_eur"])
        for i, k in enumerate(traj.steps):
            writer.writerow(
                [int(k)]
                + [repr(float(v)) for v in traj.p_gen_kw[i]]
                + [repr(float(v)) for v in traj.v_pu[i]]
                + [repr(float(v)) for v in traj.e_kwh[i]]
                + [repr(float(v)) for v in traj.d_kwh_h[i]]
                + [repr(float(traj.y_eur_h[i].sum())),
                   repr(float(traj.step_cost_eur[i]))])


def _plan_payload(plan: PlanResult, cost: float, horizon: int) -> dict:
    return {
        "battery_cost_eur_kwh": cost,
        "horizon_steps": horizon,
        "z_kwh": {name: float(z) for name, z
                  in zip(plan.unit_names, plan.z_kwh)},
        "z_total_kwh": float(np.sum(plan.z_kwh)),
        "upper_bound_eur": plan.z_up,
        "lower_bound_eur": plan.z_down,
        "gap": plan.gap,
        "iterations": plan.iterations,
        "converged": plan.converged,
        "profit_eur": plan.profit_eur,
    }


def _error_payload(exc: Exception, code: int) -> dict:
    return {"schema": ERROR_SCHEMA, "error": type(exc).__name__,
            "message": str(exc), "exit_code": code}


# --- subcommands -----------------------------------------------------------------

def _parse_cost_sweep(text: str) -> list[float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"--costs wants start:stop:step, got {text!r}")
    start, stop, step = (float(p) for p in parts)
    if step <= 0 or stop < start:
        raise ValueError(f"bad sweep range {text!r}")
    n = int(round((stop - start) / step))
    levels = [start + i * step for i in range(n + 1)]
    return [lv for lv in levels if lv <= stop + 1e-9]


def cmd_plan(args) -> int:
    config, search_dir = _scenario_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mpc_cfg = _mpc_config(config, args.horizon)
    epsilon = config.gap_tolerance if args.epsilon is None else args.epsilon

    def solve_level(cost: float) -> PlanResult:
        system = build_system(config, cost, search_dir=search_dir)
        return run_benders(system, mpc_cfg, epsilon=epsilon,
                           max_iterations=args.max_iterations)

    if args.costs is not None:
        levels = _parse_cost_sweep(args.costs)
        results: list[PlanResult | Exception] = [None] * len(levels)
        with concurrent.futures.ThreadPoolExecutor(
                max_workers=max(1, args.threads)) as pool:
            futures = {pool.submit(solve_level, lv): i
                       for i, lv in enumerate(levels)}
            for fut in concurrent.futures.as_completed(futures):
                i = futures[fut]
                try:
                    results[i] = fut.result()
                except (NoProgress, IterationLimit) as exc:
                    results[i] = exc
        unit_names = next(r.unit_names for r in results
                          if isinstance(r, PlanResult)) \
            if any(isinstance(r, PlanResult) for r in results) else []
        with open(out_dir / "sweep.csv", "w", newline="") as fh:
            fh.write(f"# {SWEEP_SCHEMA}\n")
            writer = csv.writer(fh)
            writer.writerow(["battery_cost_eur_kwh"]
                            + [f"z_kwh[{u}]" for u in unit_names]
                            + ["z_total_kwh", "upper_bound_eur",
                               "lower_bound_eur", "gap", "iterations",
                               "converged"])
            for lv, res in zip(levels, results):
                if isinstance(res, PlanResult):
                    writer.writerow([repr(lv)]
                                    + [repr(float(z)) for z in res.z_kwh]
                                    + [repr(float(np.sum(res.z_kwh))),
                                       repr(res.z_up), repr(res.z_down),
                                       repr(res.gap), res.iterations, 1])
                else:
                    writer.writerow([repr(lv)] + [""] * len(unit_names)
                                    + ["", "", "", "", "", 0])
        _write_metadata(out_dir, args)
        failed = [(lv, res) for lv, res in zip(levels, results)
                  if not isinstance(res, PlanResult)]
        if failed:
            lv, exc = failed[0]
            payload = _error_payload(exc, EXIT_NO_CONVERGENCE)
            payload["message"] = f"cost level {lv}: {payload['message']}"
            print(json.dumps(payload, sort_keys=True), file=sys.stderr)
            _write_json(out_dir / "error.json", ERROR_SCHEMA,
                        {k: v for k, v in payload.items() if k != "schema"})
            return EXIT_NO_CONVERGENCE
        return EXIT_OK

    cost = 150.0 if args.cost is None else args.cost
    plan = solve_level(cost)
    _write_json(out_dir / "plan.json", PLAN_SCHEMA,
                _plan_payload(plan, cost, mpc_cfg.horizon_steps))
    write_convergence_csv(plan, out_dir / "convergence.csv")
    _write_trajectory_csv(plan.mpc_result.trajectory,
                          out_dir / "trajectory.csv")
    _write_metadata(out_dir, args)
    return EXIT_OK


def cmd_simulate(args) -> int:
    config, search_dir = _scenario_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    system = build_system(config, args.cost, search_dir=search_dir)
    z = _fleet_z(system, args)
    trace = (out_dir / "trace.jsonl") if args.trace else None

    if args.controller == "heuristic":
        res = run_heuristic_year(system, z, trace_path=trace)
        traj, extras = res.trajectory, {
            "energy_cost_eur": res.energy_cost_eur,
            "pv_curtailed_mwh": res.curtailed_mwh,
        }
        j_sub = res.j_sub
    else:
        mpc_cfg = _mpc_config(config, args.horizon)
        run = run_receding_horizon(dispatch_system(system, args.controller),
                                   mpc_cfg, z, trace_path=trace)
        traj, j_sub = run.trajectory, run.j_sub
        extras = {
            "capacity_duals_eur_kwh": {u.name: float(l) for u, l
                                       in zip(system.fleet, run.lambda_s)},
            "windows": len(run.windows),
        }
    _write_trajectory_csv(traj, out_dir / "simulation.csv")
    _write_json(out_dir / "summary.json", SUMMARY_SCHEMA, {
        "controller": args.controller,
        "battery_cost_eur_kwh": args.cost,
        "horizon_steps": None if args.controller == "heuristic"
        else _mpc_config(config, args.horizon).horizon_steps,
        "z_kwh": {u.name: float(v) for u, v in zip(system.fleet, z)},
        "operation_cost_eur": j_sub,
        "energy_bill_eur": float(traj.y_eur_h.sum() * config.step_hours),
        **extras,
    })
    _write_metadata(out_dir, args)
    return EXIT_OK


def cmd_compare(args) -> int:
    config, search_dir = _scenario_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    system = build_system(config, args.cost, search_dir=search_dir)
    z = _fleet_z(system, args)
    zeros = np.zeros_like(z)
    wanted = [c.strip() for c in args.controllers.split(",") if c.strip()]
    for c in wanted:
        if c not in CONTROLLERS:
            raise ValueError(f"unknown controller {c!r}; pick from {CONTROLLERS}")

    def run_one(controller: str, z_kwh: np.ndarray) -> Trajectory:
        if controller == "heuristic":
            return run_heuristic_year(system, z_kwh).trajectory
        mpc_cfg = _mpc_config(config, args.horizon)
        return run_receding_horizon(dispatch_system(system, controller),
                                    mpc_cfg, z_kwh).trajectory

    rows = []
    for controller in wanted:
        traj = run_one(controller, z)
        base = run_one(controller, zeros)
        econ = evaluate_run(system, traj, base,
                            battery_cost_eur_kwh=args.cost)
        horizon = 0 if controller == "heuristic" \
            else _mpc_config(config, args.horizon).horizon_steps
        rows.append(ResultsRow(battery_cost_eur_kwh=args.cost,
                               horizon_steps=horizon,
                               controller=controller, econ=econ))
    write_results_csv(rows, out_dir / "results.csv")
    _write_metadata(out_dir, args)
    return EXIT_OK


# --- linearization validation -----------------------------------------------------

def linearization_sweep(grid: GridModel, *, samples: int = 200,
                        seed: int = 0, loading: float = 0.3,
                        power_factor_min: float = 0.98) -> dict:
    """Random-injection accuracy audit of the linear grid operators.

    Draws random per-bus injection directions (near-unity power factor,
    as PV and storage inverters run here) and scales each sample so the
    most loaded branch carries ``loading`` times its rating — branch
    stress, not the per-bus draw, is what bounds the linearization's
    validity on a radial feeder.  Compares linearized voltages and
    branch currents against the exact load flow and returns a plain
    dict ready for JSON, with the worst offender per quantity.
    """
    ops = build_operators(grid)
    rng = np.random.default_rng(seed)
    non_slack = ops.non_slack
    # rating of the branch that feeds each bus, as seen from its end node
    feed_rating_pu = np.zeros(grid.n_bus)
    for b, branch in enumerate(grid.branches):
        j = grid.bus_index(branch.end)
        feed_rating_pu[j] = grid.i_max_pu[b]
    tan_max = np.tan(np.arccos(power_factor_min))

    worst_v = {"error_pu": -1.0}
    worst_i = {"error_frac": -1.0}
    max_dv = 0.0
    max_di = 0.0
    max_loss_err_kw = 0.0
    unconverged: list[int] = []
    for s in range(samples):
        # random direction, then scaled so the worst-loaded branch sits at
        # ``loading`` times its rating: injections aggregate along the
        # feeder, so per-bus draws alone say nothing about branch stress
        p = np.zeros(grid.n_bus)
        q = np.zeros(grid.n_bus)
        p[non_slack] = rng.uniform(-1.0, 1.0,
                                   len(non_slack)) * feed_rating_pu[non_slack]
        utilization = float(np.max(np.abs(ops.b_r @ p) / grid.i_max_pu))
        if utilization > 0.0:
            p *= min(loading / utilization,
                     float(np.min(feed_rating_pu[non_slack]
                                  / np.maximum(np.abs(p[non_slack]), 1e-12))))
        q[non_slack] = rng.uniform(-tan_max, tan_max,
                                   len(non_slack)) * np.abs(p[non_slack])
        try:
            exact = fbs_loadflow(grid, p, q)
        except NotConverged:
            # no exact reference exists for this state (requested loading
            # is beyond what the feeder can physically carry); report it
            unconverged.append(s)
            continue
        v_lin = np.full(grid.n_bus, float(grid.v_slack))
        v_lin[non_slack] += ops.b_v @ np.concatenate([p, q])
        # current magnitude from both power axes; the dispatch problem
        # carries them as separate components through the same operator
        i_lin = np.hypot(ops.b_r @ p, ops.b_r @ q)
        dv = np.abs(v_lin - np.abs(exact.v))
        di = np.abs(i_lin - np.abs(exact.i_b)) / grid.i_max_pu
        loss_lin_kw = grid.base.power_from_pu(
            ops.loss_planes_at_current(i_lin).sum())
        loss_kw = grid.base.power_from_pu(exact.losses_per_branch.sum())
        max_loss_err_kw = max(max_loss_err_kw, abs(loss_lin_kw - loss_kw))
        if dv.max() > max_dv:
            max_dv = float(dv.max())
            j = int(np.argmax(dv))
            worst_v = {"sample": s, "bus": grid.bus_names[j],
                       "error_pu": max_dv,
                       "injections_kw": [round(float(x), 6) for x
                                         in grid.base.power_from_pu(p)]}
        if di.max() > max_di:
            max_di = float(di.max())
            b = int(np.argmax(di))
            worst_i = {"sample": s,
                       "branch": f"{grid.branches[b].start}->"
                                 f"{grid.branches[b].end}",
                       "error_frac": max_di,
                       "injections_kw": [round(float(x), 6) for x
                                         in grid.base.power_from_pu(p)]}
    return {
        "samples": samples, "seed": seed, "loading": loading,
        "power_factor_min": power_factor_min,
        "max_voltage_error_pu": max_dv,
        "max_current_error_frac_of_rating": max_di,
        "max_total_loss_error_kw": max_loss_err_kw,
        "voltage_threshold_pu": VOLTAGE_ERROR_MAX_PU,
        "current_threshold_frac": CURRENT_ERROR_MAX_FRAC,
        "voltage_ok": max_dv <= VOLTAGE_ERROR_MAX_PU,
        "current_ok": max_di <= CURRENT_ERROR_MAX_FRAC,
        "samples_unconverged": len(unconverged),
        "unconverged_sample_ids": unconverged[:20],
        "worst_voltage_sample": worst_v,
        "worst_current_sample": worst_i,
    }


def cmd_validate(args) -> int:
    config, search_dir = _scenario_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = load_grid(resolve_input(config.grid_file, search_dir),
                     v_slack=config.v_slack)
    report = linearization_sweep(grid, samples=args.samples,
                                 seed=args.seed if args.seed is not None else 0,
                                 loading=args.loading)
    _write_json(out_dir / "validation.json", VALIDATION_SCHEMA, report)
    _write_metadata(out_dir, args)
    flags = [] if report["voltage_ok"] else ["voltage"]
    flags += [] if report["current_ok"] else ["current"]
    if report["samples_unconverged"]:
        flags.append(f"{report['samples_unconverged']} samples with no "
                     "exact load-flow solution")
    status = "all within thresholds" if not flags \
        else f"threshold breach: {', '.join(flags)} (report written)"
    print(f"validate: {args.samples} samples at loading {args.loading}: "
          f"{status}")
    return EXIT_OK


# --- entry point --------------------------------------------------------------------

_COMMANDS = {"plan": cmd_plan, "simulate": cmd_simulate,
             "compare": cmd_compare, "validate": cmd_validate}

_INPUT_ERRORS = (ParseError, FileNotFoundError, ValueError, KeyError)
_CONVERGENCE_ERRORS = (NoProgress, IterationLimit)
_NUMERICAL_ERRORS = (WindowInfeasible, NotConverged, NumericalBreakdown)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (*_CONVERGENCE_ERRORS, *_NUMERICAL_ERRORS, *_INPUT_ERRORS) as exc:
        if isinstance(exc, _CONVERGENCE_ERRORS):
            code = EXIT_NO_CONVERGENCE
        elif isinstance(exc, _NUMERICAL_ERRORS):
            code = EXIT_NUMERICAL
        else:
            code = EXIT_INPUT
        payload = _error_payload(exc, code)
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        try:
            out_dir = Path(args.out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            _write_json(out_dir / "error.json", ERROR_SCHEMA,
                        {k: v for k, v in payload.items() if k != "schema"})
        except OSError:
            pass
        return code


if __name__ == "__main__":
    sys.exit(main())
