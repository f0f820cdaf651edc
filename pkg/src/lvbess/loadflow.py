"""Exact nonlinear load flow for radial grids by forward/backward sweeps.

Serves two roles: validation oracle for the linear grid operators, and
exact feasibility checker for the rule-based controller.  Loads are
constant power.  The sweep alternates a backward current accumulation
(leaves to slack) with a forward voltage update (slack to leaves) until
voltages stop moving or the nodal power mismatch is negligible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridModel, tree_structure


class NotConverged(RuntimeError):
    """Sweeps exhausted without meeting the mismatch tolerance.

    Usually means the requested operating point is beyond the grid's
    loadability (no solution exists) or the data is pathological.
    """


@dataclass
class LoadflowResult:
    v: np.ndarray                   # complex bus voltages, p.u.
    i_b: np.ndarray                 # branch current magnitudes, p.u.
    losses_per_branch: np.ndarray   # active losses r*|i|^2, p.u.
    converged: bool
    iterations: int
    slack_p: float                  # net active injection at the slack, p.u.
    slack_q: float
    max_mismatch: float             # worst nodal power mismatch, p.u.


def fbs_loadflow(
    grid: GridModel,
    p: np.ndarray,
    q: np.ndarray | None = None,
    *,
    tol_voltage: float = 1e-10,
    tol_mismatch: float = 1e-8,
    max_iterations: int = 100,
) -> LoadflowResult:
    """Solve the radial load flow for net injections ``p + jq`` (p.u.).

    ``p`` and ``q`` are per-bus net injections, generation minus demand;
    the entries at the slack bus are ignored (the slack balances the
    network and its injection is reported in the result).  Iteration stops
    when the largest voltage change per sweep falls below ``tol_voltage``
    or the largest nodal power mismatch falls below ``tol_mismatch``,
    whichever happens first; :class:`NotConverged` is raised after
    ``max_iterations`` sweeps.
    """
    n = grid.n_bus
    p = np.asarray(p, dtype=float)
    q = np.zeros(n) if q is None else np.asarray(q, dtype=float)
    if p.shape != (n,) or q.shape != (n,):
        raise ValueError(f"injection vectors must have shape ({n},)")

    order, parent_bus, parent_branch = tree_structure(grid)
    slack = grid.slack_index
    z = (grid.r_pu + 1j * grid.x_pu)

    s_inj = p + 1j * q
    s_inj[slack] = 0.0

    v = np.full(n, complex(grid.v_slack))
    i_branch = np.zeros(grid.n_branch, dtype=complex)
    down = order[::-1]

    converged = False
    mismatch = np.inf
    it = 0
    for it in range(1, max_iterations + 1):
        # backward: accumulate load currents from the leaves toward the slack
        i_node = np.conj(s_inj / v)          # injection current at each bus
        acc = -i_node.copy()                 # current drawn from upstream
        for j in down:
            k = parent_branch[j]
            if k < 0:
                continue
            i_branch[k] = acc[j]
            acc[parent_bus[j]] += acc[j]

        # forward: push voltage drops from the slack toward the leaves
        v_new = v.copy()
        v_new[slack] = grid.v_slack
        for j in order:
            k = parent_branch[j]
            if k >= 0:
                v_new[j] = v_new[parent_bus[j]] - z[k] * i_branch[k]

        dv = float(np.max(np.abs(v_new - v)))
        v = v_new
        mismatch = _max_mismatch(grid, v, s_inj, parent_bus, parent_branch, z)
        if dv <= tol_voltage or mismatch <= tol_mismatch:
            converged = True
            break

    if not converged:
        raise NotConverged(
            f"no load-flow solution after {max_iterations} sweeps "
            f"(mismatch {mismatch:.3e} p.u.)"
        )

    losses = grid.r_pu * np.abs(i_branch) ** 2
    s_slack = v[slack] * np.conj(sum(
        i_branch[parent_branch[j]] for j in range(n) if parent_bus[j] == slack
    ))
    return LoadflowResult(
        v=v,
        i_b=np.abs(i_branch),
        losses_per_branch=losses,
        converged=True,
        iterations=it,
        slack_p=float(s_slack.real),
        slack_q=float(s_slack.imag),
        max_mismatch=mismatch,
    )


def _max_mismatch(grid, v, s_inj, parent_bus, parent_branch, z) -> float:
    """Worst |S_specified - S_calculated| over the non-slack buses."""
    worst = 0.0
    for j in range(grid.n_bus):
        k = parent_branch[j]
        if k < 0:
            continue
        # current into bus j from its parent, recomputed from voltages
        i_in = (v[parent_bus[j]] - v[j]) / z[k]
        # minus currents leaving toward the children of j
        for c in range(grid.n_bus):
            if parent_bus[c] == j:
                kc = parent_branch[c]
                i_in -= (v[j] - v[c]) / z[kc]
        s_calc = v[j] * np.conj(i_in)
        worst = max(worst, abs(s_calc + s_inj[j]))
    return worst


def refined_operators(grid: GridModel, p: np.ndarray, q: np.ndarray | None = None,
                      **kwargs):
    """Rebuild the linear operators around the load-flow solution at (p, q).

    One nonlinear solve at a reference loading, then the linearization
    point is moved from the flat profile to the solved voltage magnitudes.
    Extra keyword arguments pass through to ``build_operators``.
    """
    from .grid import build_operators

    res = fbs_loadflow(grid, p, q)
    return build_operators(grid, operating_voltages=np.abs(res.v), **kwargs)
