"""Single-period linearized optimal power flow for radial LV grids.

The decision vector for one time step is

    x = [p_loss_p, p_loss_q, p_gen, q_gen, v]        (2 n_branch + 2 n_gen + n_bus)

plus one epigraph variable y per generator carrying its piecewise-affine
cost rate.  Constraints: per-generator PWA cost epigraphs, a single
network-wide active power balance that books the loss variables, voltage
equalities driven by the linear sensitivity map, four loss planes per
branch for each of the active and reactive current contributions,
two-sided branch-current limits, polygonal apparent-power capability
sets, and simple bounds.  Everything is assembled in per-unit with costs
in Euro per hour; the result is a plain LpProblem with every row labeled
by meaning so duals can be looked up by name.

The same column template is reused verbatim by the multi-period problem,
which strings one copy per time step together with storage dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .grid import LinearGridOperators
from .lp import LE, GE, LpProblem


class MissingSlack(ValueError):
    """No feeder generator was supplied; the grid cannot balance."""


class DimensionMismatch(ValueError):
    """A per-bus input does not match the grid's bus count."""


class NonConvexCost(ValueError):
    """PWA cost gradients decrease across segments."""


class UnsupportedShape(ValueError):
    """Unknown reactive-capability shape."""


class GenKind(Enum):
    SLACK_FEEDER = "slack_feeder"
    PV = "pv"
    STORAGE_DISCHARGE = "storage_discharge"
    STORAGE_CHARGE = "storage_charge"


# --- reactive capability shapes --------------------------------------------

@dataclass(frozen=True)
class Circular:
    """Apparent-power circle, approximated by an inscribed polygon."""


@dataclass(frozen=True)
class Rectangular:
    """Independent p and q limits (box)."""


@dataclass(frozen=True)
class CosPhi:
    """Minimum power-factor cone for non-negative active injection."""

    phi: float

    def __post_init__(self) -> None:
        if not 0.0 < self.phi <= 1.0:
            raise ValueError("power factor must lie in (0, 1]")


QShape = Circular | Rectangular | CosPhi

_OCT = math.sqrt(2.0) - 1.0      # diagonal facet slope for the circle polygon
_QCAP = 1.0 / math.sqrt(2.0)     # reactive cap for the circle polygon


@dataclass(frozen=True)
class QPolygon:
    """Linear description of a capability region in the (p, q) plane.

    ``rows`` are (coef_p, coef_q, rhs) with sense <=; ``q_abs_max`` is an
    additional plain bound |q| <= q_abs_max.
    """

    rows: tuple[tuple[float, float, float], ...]
    q_abs_max: float


def build_q_polygon(shape: QShape, s_max: float) -> QPolygon:
    """Capability polygon for one unit, everything in the same power unit.

    The circular region uses the inscribed polygon with vertices at
    (+-s, 0) and (+-s/sqrt2, +-s/sqrt2) — it never admits an apparent
    power above ``s_max``.  The rectangular region is a plain box with
    the reactive side bounded by ``s_max``.  The cone caps the circle
    polygon and assumes the unit only injects active power.
    """
    if s_max <= 0:
        raise ValueError("s_max must be positive")
    circle = (
        (1.0, _OCT, s_max), (-1.0, -_OCT, s_max),
        (1.0, -_OCT, s_max), (-1.0, _OCT, s_max),
    )
    if isinstance(shape, Circular):
        return QPolygon(rows=circle, q_abs_max=_QCAP * s_max)
    if isinstance(shape, Rectangular):
        return QPolygon(rows=(), q_abs_max=s_max)
    if isinstance(shape, CosPhi):
        t = math.tan(math.acos(shape.phi))
        cone = ((0.0, 1.0, 0.0) if t == 0 else (-t, 1.0, 0.0),
                (0.0, -1.0, 0.0) if t == 0 else (-t, -1.0, 0.0))
        return QPolygon(rows=circle + cone, q_abs_max=_QCAP * s_max)
    raise UnsupportedShape(f"unknown capability shape {shape!r}")


# --- generator specification ------------------------------------------------

@dataclass(frozen=True)
class PwaCost:
    """Convex piecewise-affine cost: y >= gradient * p_MW + offset per segment.

    Gradients in €/MWh, offsets in € per hour of operation.
    """

    segments: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if not self.segments:
            raise NonConvexCost("cost needs at least one segment")
        grads = [s[0] for s in self.segments]
        if any(b < a for a, b in zip(grads, grads[1:])):
            raise NonConvexCost(f"gradients must be non-decreasing, got {grads}")

    @classmethod
    def free(cls) -> "PwaCost":
        return cls(((0.0, 0.0),))

    @classmethod
    def two_sided(cls, export_price: float, import_price: float) -> "PwaCost":
        """Feeder cost: pay ``import_price`` when drawing, earn
        ``export_price`` when feeding back (both €/MWh, p measured as
        injection into the grid under study)."""
        return cls(((export_price, 0.0), (import_price, 0.0)))

    def rate_at(self, p_mw: float) -> float:
        return max(g * p_mw + b for g, b in self.segments)


@dataclass(frozen=True)
class GeneratorSpec:
    name: str
    bus: str
    kind: GenKind
    p_min_kw: float
    p_max_kw: float
    s_max_kva: float
    q_shape: QShape
    cost: PwaCost

    def __post_init__(self) -> None:
        if self.p_min_kw > self.p_max_kw:
            raise ValueError(f"{self.name}: p_min exceeds p_max")
        if self.s_max_kva <= 0:
            raise ValueError(f"{self.name}: s_max must be positive")


# --- column layout -----------------------------------------------------------

@dataclass
class SingleShotLayout:
    """Column offsets of one step's decision block, plus bookkeeping."""

    n_branch: int
    n_bus: int
    n_gen: int
    gen_names: list[str]
    bus_names: list[str]
    c_g: np.ndarray              # bus x gen incidence

    @property
    def loss_p(self) -> slice:
        return slice(0, self.n_branch)

    @property
    def loss_q(self) -> slice:
        return slice(self.n_branch, 2 * self.n_branch)

    @property
    def p_gen(self) -> slice:
        a = 2 * self.n_branch
        return slice(a, a + self.n_gen)

    @property
    def q_gen(self) -> slice:
        a = 2 * self.n_branch + self.n_gen
        return slice(a, a + self.n_gen)

    @property
    def v(self) -> slice:
        a = 2 * self.n_branch + 2 * self.n_gen
        return slice(a, a + self.n_bus)

    @property
    def n_x(self) -> int:
        """Length of the grid block x (loss, dispatch, voltage)."""
        return 2 * self.n_branch + 2 * self.n_gen + self.n_bus

    @property
    def y(self) -> slice:
        return slice(self.n_x, self.n_x + self.n_gen)

    @property
    def n_cols(self) -> int:
        return self.n_x + self.n_gen

    def unpack(self, solution_x: np.ndarray) -> dict[str, np.ndarray]:
        return {
            "loss_p": solution_x[self.loss_p],
            "loss_q": solution_x[self.loss_q],
            "p_gen": solution_x[self.p_gen],
            "q_gen": solution_x[self.q_gen],
            "v": solution_x[self.v],
            "y": solution_x[self.y],
        }

    def column_names(self) -> list[str]:
        names = [f"lossP[{b}]" for b in range(self.n_branch)]
        names += [f"lossQ[{b}]" for b in range(self.n_branch)]
        names += [f"p[{g}]" for g in self.gen_names]
        names += [f"q[{g}]" for g in self.gen_names]
        names += [f"v[{b}]" for b in self.bus_names]
        names += [f"y[{g}]" for g in self.gen_names]
        return names


# --- assembly ----------------------------------------------------------------

def build_pwa_cost_rows(cost: PwaCost, gen_col: int, y_col: int,
                        n_cols: int, label: str,
                        power_scale_mw: float) -> tuple[np.ndarray, np.ndarray, list[str], list[str]]:
    """Epigraph rows ``gradient*p - y <= -offset`` for one generator.

    ``power_scale_mw`` converts the generator column's unit to MW so the
    €/MWh gradients come out as € per hour.
    """
    rows = np.zeros((len(cost.segments), n_cols))
    rhs = np.zeros(len(cost.segments))
    senses = [LE] * len(cost.segments)
    labels = []
    for i, (grad, offset) in enumerate(cost.segments):
        rows[i, gen_col] = grad * power_scale_mw
        rows[i, y_col] = -1.0
        rhs[i] = -offset
        labels.append(f"cost[{label},{i}]")
    return rows, rhs, senses, labels


def assemble_single_shot(
    ops: LinearGridOperators,
    gens: list[GeneratorSpec],
    p_demand_kw: np.ndarray,
    q_demand_kvar: np.ndarray | None = None,
    *,
    v_min: float = 0.9,
    v_max: float = 1.1,
) -> tuple[LpProblem, SingleShotLayout]:
    """Build the one-step dispatch LP; objective is the sum of the y columns."""
    grid = ops.grid
    layout = make_layout(ops, gens)
    pieces = _step_matrices(ops, gens, layout, v_min, v_max)
    b_in, b_eq = _step_rhs(ops, layout, pieces,
                           _demand_pu(grid, p_demand_kw, q_demand_kvar))

    c = np.zeros(layout.n_cols)
    c[layout.y] = 1.0
    problem = LpProblem.build(
        c=c,
        a_in=pieces.a_in, b_in=b_in, senses=pieces.senses,
        a_eq=pieces.a_eq, b_eq=b_eq,
        lb=pieces.lb, ub=pieces.ub,
        col_names=layout.column_names(),
        row_names_in=pieces.labels_in,
        row_names_eq=pieces.labels_eq,
    )
    return problem, layout


def make_layout(ops: LinearGridOperators, gens: list[GeneratorSpec]) -> SingleShotLayout:
    grid = ops.grid
    if not any(g.kind is GenKind.SLACK_FEEDER for g in gens):
        raise MissingSlack("at least one feeder generator is required")
    names = [g.name for g in gens]
    if len(set(names)) != len(names):
        raise ValueError("generator names must be unique")
    c_g = np.zeros((grid.n_bus, len(gens)))
    for j, g in enumerate(gens):
        c_g[grid.bus_index(g.bus), j] = 1.0
    return SingleShotLayout(
        n_branch=grid.n_branch, n_bus=grid.n_bus, n_gen=len(gens),
        gen_names=names, bus_names=list(grid.bus_names), c_g=c_g,
    )


def _demand_pu(grid, p_demand_kw, q_demand_kvar) -> np.ndarray:
    p_d = np.asarray(p_demand_kw, dtype=float)
    if p_d.shape != (grid.n_bus,):
        raise DimensionMismatch(
            f"expected {grid.n_bus} per-bus active demands, got shape {p_d.shape}")
    if q_demand_kvar is None:
        q_d = np.zeros(grid.n_bus)
    else:
        q_d = np.asarray(q_demand_kvar, dtype=float)
        if q_d.shape != (grid.n_bus,):
            raise DimensionMismatch(
                f"expected {grid.n_bus} per-bus reactive demands, got shape {q_d.shape}")
    return np.concatenate([grid.base.power_to_pu(p_d), grid.base.power_to_pu(q_d)])


@dataclass
class StepMatrices:
    """Load-independent constraint pieces of one dispatch step."""

    a_in: np.ndarray
    senses: list[str]
    labels_in: list[str]
    a_eq: np.ndarray
    labels_eq: list[str]
    lb: np.ndarray
    ub: np.ndarray
    # row slices needed to fill the load-dependent right-hand sides
    rows_loss: dict[str, slice]
    rows_current: dict[str, slice]
    rows_polygon: slice
    rows_cost: slice
    b_in_const: np.ndarray       # polygon + cost rhs, load-independent
    row_balance: int
    rows_voltage: slice


def _step_matrices(ops: LinearGridOperators, gens: list[GeneratorSpec],
                   layout: SingleShotLayout, v_min: float, v_max: float) -> StepMatrices:
    grid = ops.grid
    n_l, n_b, n_g = layout.n_branch, layout.n_bus, layout.n_gen
    n_cols = layout.n_cols
    base_mw = grid.base.s_base_va / 1e6

    cg_p = ops.l0 @ layout.c_g          # lower loss plane on generator columns
    cg_p1 = ops.l1 @ layout.c_g
    cg_r = ops.b_r @ layout.c_g
    bv_p = ops.b_v[:, :n_b] @ layout.c_g
    bv_q = ops.b_v[:, n_b:] @ layout.c_g

    blocks: list[np.ndarray] = []
    rhs_const: list[np.ndarray] = []
    senses: list[str] = []
    labels: list[str] = []

    def add(rows, const, sense, labs):
        blocks.append(rows)
        rhs_const.append(const)
        senses.extend([sense] * rows.shape[0])
        labels.extend(labs)

    eye_l = np.eye(n_l)
    zeros_l = np.zeros((n_l, n_cols))
    br_names = [f"{br.start}-{br.end}" for br in grid.branches]

    # loss planes, active then reactive; all >= rows
    for tag, col_slice, low, high in (
        ("p", layout.loss_p, cg_p, cg_p1),
        ("q", layout.loss_q, ops.l0 @ layout.c_g, ops.l1 @ layout.c_g),
    ):
        flow_cols = layout.p_gen if tag == "p" else layout.q_gen
        for fam, mat, sgn in (("low+", low, -1.0), ("low-", low, +1.0),
                              ("high+", high, -1.0), ("high-", high, +1.0)):
            rows = zeros_l.copy()
            rows[:, col_slice] = eye_l
            rows[:, flow_cols] = sgn * mat
            add(rows, np.zeros(n_l), GE,
                [f"loss_{tag}[{fam},{br_names[i]}]" for i in range(n_l)])

    # branch-current limits, two-sided
    rows = zeros_l.copy(); rows[:, layout.p_gen] = cg_r
    add(rows, np.zeros(n_l), LE, [f"current_hi[{nm}]" for nm in br_names])
    rows = zeros_l.copy(); rows[:, layout.p_gen] = cg_r
    add(rows, np.zeros(n_l), GE, [f"current_lo[{nm}]" for nm in br_names])

    # apparent-power polygons
    poly_start = sum(b.shape[0] for b in blocks)
    for j, g in enumerate(gens):
        poly = build_q_polygon(g.q_shape, grid.base.power_to_pu(g.s_max_kva))
        for k, (cp, cq, rhs) in enumerate(poly.rows):
            row = np.zeros((1, n_cols))
            row[0, layout.p_gen.start + j] = cp
            row[0, layout.q_gen.start + j] = cq
            add(row, np.array([rhs]), LE, [f"capability[{g.name},{k}]"])
    poly_stop = sum(b.shape[0] for b in blocks)

    # cost epigraphs
    cost_start = poly_stop
    for j, g in enumerate(gens):
        rows, rhs, sn, labs = build_pwa_cost_rows(
            g.cost, layout.p_gen.start + j, layout.y.start + j,
            n_cols, g.name, base_mw)
        add(rows, rhs, LE, labs)
    cost_stop = sum(b.shape[0] for b in blocks)

    a_in = np.vstack(blocks)
    b_in_const = np.concatenate(rhs_const)

    # equalities: active power balance, then voltage rows at non-slack buses
    a_eq = np.zeros((1 + n_l, n_cols))
    a_eq[0, layout.p_gen] = 1.0
    a_eq[0, layout.loss_p] = -1.0
    a_eq[0, layout.loss_q] = -1.0
    labels_eq = ["power_balance"]
    non_slack = ops.non_slack
    a_eq[1:, layout.p_gen] = bv_p
    a_eq[1:, layout.q_gen] = bv_q
    for r, bus in enumerate(non_slack):
        a_eq[1 + r, layout.v.start + bus] = -1.0
        labels_eq.append(f"voltage[{grid.bus_names[bus]}]")

    # bounds
    lb = np.full(n_cols, -np.inf)
    ub = np.full(n_cols, np.inf)
    lb[layout.loss_p] = 0.0
    lb[layout.loss_q] = 0.0
    for j, g in enumerate(gens):
        lb[layout.p_gen.start + j] = grid.base.power_to_pu(g.p_min_kw)
        ub[layout.p_gen.start + j] = grid.base.power_to_pu(g.p_max_kw)
        poly = build_q_polygon(g.q_shape, grid.base.power_to_pu(g.s_max_kva))
        lb[layout.q_gen.start + j] = -poly.q_abs_max
        ub[layout.q_gen.start + j] = poly.q_abs_max
    lb[layout.v] = v_min
    ub[layout.v] = v_max
    slack_col = layout.v.start + grid.slack_index
    lb[slack_col] = ub[slack_col] = grid.v_slack

    n_rows_in = a_in.shape[0]
    return StepMatrices(
        a_in=a_in, senses=senses, labels_in=labels,
        a_eq=a_eq, labels_eq=labels_eq, lb=lb, ub=ub,
        rows_loss={
            "p_low+": slice(0, n_l), "p_low-": slice(n_l, 2 * n_l),
            "p_high+": slice(2 * n_l, 3 * n_l), "p_high-": slice(3 * n_l, 4 * n_l),
            "q_low+": slice(4 * n_l, 5 * n_l), "q_low-": slice(5 * n_l, 6 * n_l),
            "q_high+": slice(6 * n_l, 7 * n_l), "q_high-": slice(7 * n_l, 8 * n_l),
        },
        rows_current={"hi": slice(8 * n_l, 9 * n_l), "lo": slice(9 * n_l, 10 * n_l)},
        rows_polygon=slice(poly_start, poly_stop),
        rows_cost=slice(cost_start, cost_stop),
        b_in_const=b_in_const,
        row_balance=0,
        rows_voltage=slice(1, 1 + n_l),
    )


def _step_rhs(ops: LinearGridOperators, layout: SingleShotLayout,
              pieces: StepMatrices, demand_pu: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fill the load-dependent right-hand sides for one step."""
    grid = ops.grid
    n_b = layout.n_bus
    p_d, q_d = demand_pu[:n_b], demand_pu[n_b:]

    b_in = pieces.b_in_const.copy()
    l0_pd, l1_pd = ops.l0 @ p_d, ops.l1 @ p_d
    l0_qd, l1_qd = ops.l0 @ q_d, ops.l1 @ q_d
    b_in[pieces.rows_loss["p_low+"]] = -l0_pd
    b_in[pieces.rows_loss["p_low-"]] = l0_pd
    b_in[pieces.rows_loss["p_high+"]] = -l1_pd + ops.b_loss
    b_in[pieces.rows_loss["p_high-"]] = l1_pd + ops.b_loss
    b_in[pieces.rows_loss["q_low+"]] = -l0_qd
    b_in[pieces.rows_loss["q_low-"]] = l0_qd
    b_in[pieces.rows_loss["q_high+"]] = -l1_qd + ops.b_loss
    b_in[pieces.rows_loss["q_high-"]] = l1_qd + ops.b_loss
    br_pd = ops.b_r @ p_d
    b_in[pieces.rows_current["hi"]] = grid.i_max_pu + br_pd
    b_in[pieces.rows_current["lo"]] = -grid.i_max_pu + br_pd

    b_eq = np.zeros(1 + layout.n_branch)
    b_eq[0] = p_d.sum()
    b_eq[1:] = ops.b_v @ demand_pu - grid.v_slack
    return b_in, b_eq
