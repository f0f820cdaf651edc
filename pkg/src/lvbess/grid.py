"""Radial low-voltage grid model and its linearized sensitivity operators.

The data model is deliberately small: buses, branches with per-length
impedances, exactly one slack bus, and per-unit bases.  From it we build
the path matrix of the radial network (every branch row flags the buses
whose route to the slack crosses that branch) and the three families of
linear operators used by the dispatch problems:

* a voltage-sensitivity map     v - v_s  ~=  B_v [p; q]
* a branch-current map          i_b      ~=  B_r p
* convex loss planes            p_loss   >=  max{L0 p, -L0 p, L1 p + b, -L1 p + b}

with p, q net bus injections (generation minus demand) in per-unit.

The loss planes are chords of the quadratic branch loss r*i^2: the first
through the origin and a lower supporting current i0, the second through
i0 and an upper supporting current i1.  The max over the four planes is
convex in the branch current and agrees with r*i^2 exactly at
0, +-i0, +-i1.  Defaults put the supports at half and full thermal
rating.  All operators are plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NotRadial(ValueError):
    """The branch graph is not a tree spanning all buses."""


class DegenerateVoltage(ValueError):
    """An operating-point voltage is too far from nominal to linearize around."""


@dataclass(frozen=True)
class Bus:
    name: str
    is_slack: bool = False


@dataclass(frozen=True)
class Branch:
    start: str
    end: str
    r_ohm_per_km: float
    x_ohm_per_km: float
    length_m: float
    i_max_a: float

    @property
    def r_ohm(self) -> float:
        return self.r_ohm_per_km * self.length_m / 1000.0

    @property
    def x_ohm(self) -> float:
        return self.x_ohm_per_km * self.length_m / 1000.0


@dataclass(frozen=True)
class GridBase:
    """Per-unit bases (line-to-neutral voltage, single-phase power)."""

    s_base_va: float = 100_000.0
    v_base_v: float = 230.0

    @property
    def z_base_ohm(self) -> float:
        return self.v_base_v ** 2 / self.s_base_va

    @property
    def i_base_a(self) -> float:
        return self.s_base_va / self.v_base_v

    def power_to_pu(self, kw: float | np.ndarray) -> float | np.ndarray:
        return np.asarray(kw, dtype=float) * 1e3 / self.s_base_va

    def power_from_pu(self, pu: float | np.ndarray) -> float | np.ndarray:
        return np.asarray(pu, dtype=float) * self.s_base_va / 1e3


@dataclass
class GridModel:
    """A radial network: bus list, branch list, bases, slack voltage."""

    buses: list[Bus]
    branches: list[Branch]
    base: GridBase = field(default_factory=GridBase)
    v_slack: float = 1.0

    def __post_init__(self) -> None:
        names = [b.name for b in self.buses]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate bus names: {sorted(names)}")
        slacks = [b.name for b in self.buses if b.is_slack]
        if len(slacks) != 1:
            raise ValueError(f"need exactly one slack bus, got {slacks!r}")
        known = set(names)
        for br in self.branches:
            if br.start not in known or br.end not in known:
                raise ValueError(f"branch {br.start}-{br.end} references unknown bus")
            if br.r_ohm_per_km <= 0 or br.length_m <= 0 or br.i_max_a <= 0:
                raise ValueError(
                    f"branch {br.start}-{br.end}: resistance, length and rating "
                    "must be strictly positive"
                )
        if len(self.branches) != len(self.buses) - 1:
            raise NotRadial(
                f"{len(self.branches)} branches cannot span {len(self.buses)} buses"
            )

    # --- indexing helpers -------------------------------------------------
    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def bus_names(self) -> list[str]:
        return [b.name for b in self.buses]

    @property
    def slack_index(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.is_slack)

    def bus_index(self, name: str) -> int:
        try:
            return self.bus_names.index(name)
        except ValueError:
            raise KeyError(f"no bus named {name!r}") from None

    @property
    def r_pu(self) -> np.ndarray:
        return np.array([br.r_ohm for br in self.branches]) / self.base.z_base_ohm

    @property
    def x_pu(self) -> np.ndarray:
        return np.array([br.x_ohm for br in self.branches]) / self.base.z_base_ohm

    @property
    def i_max_pu(self) -> np.ndarray:
        return np.array([br.i_max_a for br in self.branches]) / self.base.i_base_a


def tree_structure(grid: GridModel) -> tuple[list[int], np.ndarray, np.ndarray]:
    """BFS the branch graph from the slack bus.

    Returns ``(order, parent_bus, parent_branch)`` where ``order`` lists bus
    indices from the slack outward, ``parent_bus[j]`` is the upstream
    neighbour of bus j and ``parent_branch[j]`` the branch connecting them
    (-1 for the slack).  Raises :class:`NotRadial` on a cycle, a parallel
    branch, or a bus unreachable from the slack.
    """
    n = grid.n_bus
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, br in enumerate(grid.branches):
        i, j = grid.bus_index(br.start), grid.bus_index(br.end)
        if i == j:
            raise NotRadial(f"branch {br.start}-{br.end} is a self-loop")
        adj[i].append((j, k))
        adj[j].append((i, k))

    parent_bus = np.full(n, -1, dtype=int)
    parent_branch = np.full(n, -1, dtype=int)
    seen = np.zeros(n, dtype=bool)
    root = grid.slack_index
    seen[root] = True
    order = [root]
    queue = [root]
    while queue:
        u = queue.pop(0)
        for v, k in adj[u]:
            if k == parent_branch[u]:
                continue
            if seen[v]:
                raise NotRadial(
                    f"cycle detected through branch "
                    f"{grid.branches[k].start}-{grid.branches[k].end}"
                )
            seen[v] = True
            parent_bus[v] = u
            parent_branch[v] = k
            order.append(v)
            queue.append(v)
    if not seen.all():
        missing = [grid.buses[i].name for i in np.flatnonzero(~seen)]
        raise NotRadial(f"buses not connected to the slack: {missing}")
    return order, parent_bus, parent_branch


def build_bibc(grid: GridModel) -> np.ndarray:
    """Bus-injection to branch-current path matrix, shape (n_branch, n_bus).

    Entry (l, j) is 1 when branch l lies on the path from bus j to the
    slack; the slack column is all zero.  With net injection currents i at
    the buses, the branch currents of the radial network are -M_f i (flow
    measured from the slack toward the leaves).
    """
    order, parent_bus, parent_branch = tree_structure(grid)
    m_f = np.zeros((grid.n_branch, grid.n_bus))
    # walk each bus toward the root, marking the branches crossed; BFS order
    # lets us reuse the parent's already-computed column
    for j in order:
        if parent_branch[j] < 0:
            continue
        m_f[:, j] = m_f[:, parent_bus[j]]
        m_f[parent_branch[j], j] = 1.0
    return m_f


@dataclass
class LinearGridOperators:
    """All linear operators for one grid at one operating point."""

    grid: GridModel
    m_f: np.ndarray          # path matrix, (n_branch, n_bus)
    m: np.ndarray            # path matrix without the slack column
    r_d: np.ndarray          # diag branch resistance, p.u.
    x_d: np.ndarray          # diag branch reactance, p.u.
    v_df: np.ndarray         # diag 1/|v| at the operating point
    b_v: np.ndarray          # voltage sensitivity, (n_branch, 2 n_bus)
    b_r: np.ndarray          # branch-current sensitivity, (n_branch, n_bus)
    l0: np.ndarray           # lower loss plane, (n_branch, n_bus)
    l1: np.ndarray           # upper loss plane, (n_branch, n_bus)
    b_loss: np.ndarray       # upper-plane offsets, (n_branch,)
    i0: np.ndarray           # lower supporting currents, p.u.
    i1: np.ndarray           # upper supporting currents, p.u.

    @property
    def non_slack(self) -> list[int]:
        s = self.grid.slack_index
        return [j for j in range(self.grid.n_bus) if j != s]

    def loss_planes_at_current(self, i_branch: np.ndarray) -> np.ndarray:
        """Max-of-planes loss per branch at signed branch currents (p.u.)."""
        i = np.asarray(i_branch, dtype=float)
        r = self.grid.r_pu
        lower = r * self.i0 * np.abs(i)
        upper = r * (self.i0 + self.i1) * np.abs(i) - r * self.i0 * self.i1
        return np.maximum(lower, upper)


def build_operators(
    grid: GridModel,
    operating_voltages: np.ndarray | None = None,
    loss_supports: tuple[np.ndarray, np.ndarray] | None = None,
) -> LinearGridOperators:
    """Construct all linear operators for ``grid``.

    ``operating_voltages`` are per-bus voltage magnitudes (p.u.) defining
    the linearization point; default is a flat profile at the slack
    voltage.  ``loss_supports`` is an optional pair ``(i0, i1)`` of
    per-branch supporting currents (p.u.); default is half and full
    thermal rating.  Raises :class:`DegenerateVoltage` when any operating
    voltage is below 0.5 p.u.
    """
    m_f = build_bibc(grid)
    n_b = grid.n_bus

    if operating_voltages is None:
        v_op = np.full(n_b, float(grid.v_slack))
    else:
        v_op = np.abs(np.asarray(operating_voltages, dtype=float))
        if v_op.shape != (n_b,):
            raise ValueError(f"expected {n_b} operating voltages, got {v_op.shape}")
    if np.any(v_op < 0.5):
        worst = grid.buses[int(np.argmin(v_op))].name
        raise DegenerateVoltage(
            f"operating voltage {v_op.min():.3f} p.u. at bus {worst} is below 0.5"
        )

    i_rating = grid.i_max_pu
    if loss_supports is None:
        i0 = 0.5 * i_rating
        i1 = 1.0 * i_rating
    else:
        i0 = np.broadcast_to(np.asarray(loss_supports[0], dtype=float), i_rating.shape).copy()
        i1 = np.broadcast_to(np.asarray(loss_supports[1], dtype=float), i_rating.shape).copy()
        if np.any(i0 <= 0) or np.any(i1 <= 0):
            raise ValueError("loss supporting currents must be strictly positive")
        if np.any(i1 <= i0):
            raise ValueError("upper loss support must exceed the lower support")

    r_d = np.diag(grid.r_pu)
    x_d = np.diag(grid.x_pu)
    v_df = np.diag(1.0 / v_op)

    slack = grid.slack_index
    m = np.delete(m_f, slack, axis=1)

    mf_v = m_f @ v_df
    b_v = np.hstack([m.T @ r_d @ mf_v, m.T @ x_d @ mf_v])
    b_r = mf_v
    l0 = np.diag(i0) @ r_d @ mf_v
    l1 = np.diag(i0 + i1) @ r_d @ mf_v
    b_loss = -grid.r_pu * i0 * i1

    return LinearGridOperators(
        grid=grid, m_f=m_f, m=m, r_d=r_d, x_d=x_d, v_df=v_df,
        b_v=b_v, b_r=b_r, l0=l0, l1=l1, b_loss=b_loss, i0=i0, i1=i1,
    )
