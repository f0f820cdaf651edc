"""Capacity planning by Benders-style decomposition.

The master problem picks candidate capacities z against an investment
price and a growing bundle of cuts; each candidate is evaluated by a
full receding-horizon run, whose applied-step cost and weighted pin-row
duals form the next cut

    J_sub^(l) + lambda_s' (z - z^(l))  <=  alpha .

The upper bound is the realized total Z_up = J_sub + c_s'z; the lower
bound is the master's own optimum Z_down = c_s'z + alpha, which is
non-decreasing as cuts accumulate.  Iteration stops when the relative
gap falls under epsilon.

Because the subproblem is a closed-loop simulation rather than a single
convex program, cut validity is empirical, not guaranteed; a cycle
guard turns silent non-convergence into a loud error, and the bound
history is always reported so a run can be audited.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lp import LpProblem, LpStatus, SolverConfig, solve_lp
from .mpc import MpcConfig, MpcRunResult, run_receding_horizon
from .multiperiod import SystemModel

logger = logging.getLogger(__name__)

ALPHA_DOWN_DEFAULT = -100000.0
ALPHA_RESCALE_THRESHOLD = 1.0e4


class NoProgress(RuntimeError):
    """The same capacities recurred with the same cost and an open gap."""


class IterationLimit(RuntimeError):
    """The gap did not close within the iteration budget."""


@dataclass(frozen=True)
class BendersCut:
    j_sub: float
    z: np.ndarray
    lambda_s: np.ndarray

    def value_at(self, z: np.ndarray) -> float:
        return self.j_sub + float(self.lambda_s @ (np.asarray(z) - self.z))


@dataclass
class IterationRecord:
    iteration: int
    z: np.ndarray
    alpha: float
    j_sub: float
    z_up: float
    z_down: float
    gap: float
    seconds: float


@dataclass
class BendersState:
    epsilon: float
    alpha_down: float = ALPHA_DOWN_DEFAULT
    iteration: int = 0
    cuts: list[BendersCut] = field(default_factory=list)
    z_current: np.ndarray | None = None
    alpha_current: float = ALPHA_DOWN_DEFAULT
    z_up: float = np.inf
    z_down: float = -np.inf
    history: list[IterationRecord] = field(default_factory=list)


def solve_master(state: BendersState, c_s: np.ndarray, z_max: np.ndarray,
                 config: SolverConfig | None = None) -> tuple[np.ndarray, float]:
    """min c_s'z + alpha over the stored cuts and the boxes on z, alpha."""
    n_s = len(z_max)
    c = np.concatenate([c_s, [1.0]])
    if state.cuts:
        a_in = np.vstack([np.concatenate([cut.lambda_s, [-1.0]])
                          for cut in state.cuts])
        b_in = np.array([float(cut.lambda_s @ cut.z) - cut.j_sub
                         for cut in state.cuts])
        senses = ["<="] * len(state.cuts)
        row_names = [f"cut[{i}]" for i in range(len(state.cuts))]
    else:
        a_in, b_in, senses, row_names = None, None, None, None
    lb = np.concatenate([np.zeros(n_s), [state.alpha_down]])
    ub = np.concatenate([z_max, [np.inf]])
    problem = LpProblem.build(c=c, a_in=a_in, b_in=b_in, senses=senses,
                              lb=lb, ub=ub, row_names_in=row_names)
    sol = solve_lp(problem, config or SolverConfig(backend="simplex"))
    if sol.status is not LpStatus.OPTIMAL:
        raise RuntimeError(f"master problem ended {sol.status.value}")
    return sol.primal[:n_s].copy(), float(sol.primal[n_s])


@dataclass
class PlanResult:
    z_kwh: np.ndarray               # incumbent capacities (best Z_up seen)
    placement: dict[str, float]     # bus -> kWh, aggregated over units
    unit_names: list[str]
    j_sub: float                    # operation cost of the incumbent
    z_up: float
    z_down: float
    gap: float
    converged: bool
    iterations: int
    cuts: list[BendersCut]
    history: list[IterationRecord]
    mpc_result: MpcRunResult        # run that produced the incumbent
    alpha_down_used: float

    @property
    def profit_eur(self) -> float:
        return -self.z_up


def run_benders(system: SystemModel, mpc_config: MpcConfig, *,
                sizing_cost_eur_kwh: np.ndarray | float | None = None,
                z_max_kwh: np.ndarray | float | None = None,
                epsilon: float = 0.01,
                max_iterations: int = 200,
                master_config: SolverConfig | None = None,
                subproblem_config: SolverConfig | None = None,
                on_iteration=None) -> PlanResult:
    """Alternate master capacities and receding-horizon evaluations."""
    n_s = len(system.fleet)
    if n_s == 0:
        raise ValueError("planning needs at least one storage unit")
    if sizing_cost_eur_kwh is None:
        sizing_cost_eur_kwh = system.sizing_cost_eur_kwh
    c_s = np.broadcast_to(np.asarray(sizing_cost_eur_kwh, dtype=float),
                          (n_s,)).copy()
    if z_max_kwh is None:
        z_max = np.array([u.z_max_kwh for u in system.fleet])
    else:
        z_max = np.broadcast_to(np.asarray(z_max_kwh, dtype=float), (n_s,)).copy()

    state = BendersState(epsilon=epsilon)
    seen: dict[tuple, float] = {}
    best: tuple[float, np.ndarray, float, MpcRunResult] | None = None
    converged = False

    for l in range(1, max_iterations + 1):
        t0 = time.perf_counter()
        z_l, alpha_l = solve_master(state, c_s, z_max, master_config)
        mpc_res = run_receding_horizon(system, mpc_config, z_l,
                                       solver_config=subproblem_config)
        j_sub = mpc_res.j_sub
        if l == 1 and abs(j_sub) > ALPHA_RESCALE_THRESHOLD:
            rescaled = -10.0 * abs(j_sub)
            logger.warning(
                "first-pass operation cost %.3e exceeds the default bound box; "
                "alpha_down rescaled from %.3e to %.3e",
                j_sub, state.alpha_down, rescaled)
            state.alpha_down = min(state.alpha_down, rescaled)

        z_up_l = j_sub + float(c_s @ z_l)
        z_down_l = float(c_s @ z_l) + alpha_l
        if z_down_l == 0.0:
            gap_l = np.inf if z_up_l != 0.0 else 0.0
        else:
            gap_l = abs((z_up_l - z_down_l) / z_down_l)
        dt = time.perf_counter() - t0

        state.iteration = l
        state.z_current, state.alpha_current = z_l, alpha_l
        state.z_up, state.z_down = z_up_l, z_down_l
        state.cuts.append(BendersCut(j_sub=j_sub, z=z_l.copy(),
                                     lambda_s=mpc_res.lambda_s.copy()))
        rec = IterationRecord(iteration=l, z=z_l.copy(), alpha=alpha_l,
                              j_sub=j_sub, z_up=z_up_l, z_down=z_down_l,
                              gap=gap_l, seconds=dt)
        state.history.append(rec)
        if on_iteration is not None:
            on_iteration(rec)
        if best is None or z_up_l < best[0]:
            best = (z_up_l, z_l.copy(), j_sub, mpc_res)

        if gap_l <= epsilon:
            converged = True
            break
        key = tuple(np.round(z_l, 9))
        if key in seen and abs(seen[key] - j_sub) <= 1e-9:
            raise NoProgress(
                f"capacities {z_l} recurred at iteration {l} with unchanged "
                f"cost {j_sub:.6f} and gap {gap_l:.4f} > {epsilon}")
        seen[key] = j_sub
    else:
        raise IterationLimit(
            f"gap {state.history[-1].gap:.4f} > {epsilon} after "
            f"{max_iterations} iterations")

    z_best, j_best, res_best = best[1], best[2], best[3]
    placement: dict[str, float] = {}
    for u, z_val in zip(system.fleet, z_best):
        placement[u.bus] = placement.get(u.bus, 0.0) + float(z_val)
    return PlanResult(
        z_kwh=z_best, placement=placement,
        unit_names=[u.name for u in system.fleet],
        j_sub=j_best, z_up=state.z_up, z_down=state.z_down,
        gap=state.history[-1].gap, converged=converged,
        iterations=state.iteration, cuts=state.cuts, history=state.history,
        mpc_result=res_best, alpha_down_used=state.alpha_down,
    )


CONVERGENCE_SCHEMA = "lvbess-convergence/1"


def write_convergence_csv(plan: PlanResult, path: str | Path) -> None:
    """Bound trajectory per iteration; feeds the convergence plot."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {CONVERGENCE_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "z_up_eur", "z_down_eur", "gap"]
                        + [f"z_kwh[{nm}]" for nm in plan.unit_names])
        for rec in plan.history:
            writer.writerow([rec.iteration, repr(rec.z_up), repr(rec.z_down),
                             repr(rec.gap)] + [repr(float(v)) for v in rec.z])
