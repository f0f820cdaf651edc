"""Battery fleet dynamics and the convex piecewise-affine degradation model.

A storage unit appears in the dispatch problems as two generators at its
bus: a discharge generator with p in [0, p_dis_max] and a charge
generator with p in [-p_ch_max, 0] (injection convention).  The state of
energy evolves as

    e(k+1) = e(k) - T/eta_dis * p_dis(k) - T*eta_ch * p_ch(k)

so discharging drains more than it delivers and charging stores less
than it draws.  Stacked over a horizon this becomes E = S_x e0 + S_u X
with a cumulative (block lower-triangular) S_u, from which the capacity
bounds 0 <= e(k) <= z are plain linear rows in the horizon variables and
the sizing variable z.

Capacity fade is a convex max-of-planes function of (net power, SoE,
capacity).  Planes are fitted to a sampled fade map by small LPs (one
per anchor point, each plane supporting the sample cloud from below), so
any convex empirical map can be plugged in; a documented synthetic map
is provided because no measured map ships with this package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .lp import GE, LpProblem, LpStatus, SolverConfig, solve_lp
from .opf import (Circular, GeneratorSpec, GenKind, PwaCost, Rectangular,
                  SingleShotLayout)


class DegenerateSamples(ValueError):
    """Fade samples do not pin down a supporting plane (fit unbounded)."""


@dataclass(frozen=True)
class StorageSpec:
    name: str
    bus: str
    p_dis_max_kw: float = 10.0
    p_ch_max_kw: float = 10.0
    q_max_kvar: float = 10.0
    eta_dis: float = 0.88
    eta_ch: float = 0.88
    e0_kwh: float = 0.0
    z_max_kwh: float = 100.0

    def __post_init__(self) -> None:
        for eta in (self.eta_dis, self.eta_ch):
            if not 0.0 < eta <= 1.0:
                raise ValueError(f"{self.name}: efficiencies must lie in (0, 1]")
        if self.e0_kwh < 0:
            raise ValueError(f"{self.name}: initial energy must be non-negative")
        if self.p_dis_max_kw < 0 or self.p_ch_max_kw < 0 or self.q_max_kvar < 0:
            raise ValueError(f"{self.name}: ratings must be non-negative")


def fleet_generators(fleet: list[StorageSpec]) -> list[GeneratorSpec]:
    """The two dispatch generators per unit, in fleet order.

    The unit's reactive rating is split evenly between the pair; since
    both sit on the same bus and the box shape has no p-q coupling, the
    unit's total reactive range is exactly +-q_max whatever the active
    power does.
    """
    gens = []
    for u in fleet:
        half_q = max(u.q_max_kvar / 2.0, 1e-9)
        gens.append(GeneratorSpec(
            name=f"{u.name}:dis", bus=u.bus, kind=GenKind.STORAGE_DISCHARGE,
            p_min_kw=0.0, p_max_kw=u.p_dis_max_kw, s_max_kva=half_q,
            q_shape=Rectangular(), cost=PwaCost.free()))
        gens.append(GeneratorSpec(
            name=f"{u.name}:ch", bus=u.bus, kind=GenKind.STORAGE_CHARGE,
            p_min_kw=-u.p_ch_max_kw, p_max_kw=0.0, s_max_kva=half_q,
            q_shape=Rectangular(), cost=PwaCost.free()))
    return gens


def storage_selector(layout: SingleShotLayout, fleet: list[StorageSpec]) -> sp.csr_matrix:
    """C_s: pick [p_dis; p_ch] (all discharges, then all charges) out of a
    step's column block."""
    n_s = len(fleet)
    rows, cols = [], []
    for s, u in enumerate(fleet):
        try:
            j_dis = layout.gen_names.index(f"{u.name}:dis")
            j_ch = layout.gen_names.index(f"{u.name}:ch")
        except ValueError:
            raise ValueError(f"layout lacks the generator pair for {u.name}") from None
        rows += [s, n_s + s]
        cols += [layout.p_gen.start + j_dis, layout.p_gen.start + j_ch]
    data = np.ones(len(rows))
    return sp.csr_matrix((data, (rows, cols)), shape=(2 * n_s, layout.n_cols))


def soe_input_matrix(fleet: list[StorageSpec], t_hours: float,
                     power_base_kw: float) -> np.ndarray:
    """B: kWh change per step from [p_dis; p_ch] in per-unit power."""
    inv_eta_dis = np.array([1.0 / u.eta_dis for u in fleet])
    eta_ch = np.array([u.eta_ch for u in fleet])
    return t_hours * power_base_kw * np.hstack(
        [-np.diag(inv_eta_dis), -np.diag(eta_ch)])


@dataclass
class SoEEvolution:
    """Stacked state-of-energy maps: E = S_x e0 + S_u X.

    E collects e(1) .. e(N) for the whole fleet, step-major.  ``s_u`` is
    block lower-triangular with every nonzero block equal to B @ C_s,
    acting on the concatenated per-step column blocks X.
    """

    s_x: sp.csr_matrix          # (N n_s, n_s)
    s_u: sp.csr_matrix          # (N n_s, N n_cols)
    c_s: sp.csr_matrix          # (2 n_s, n_cols)
    b: np.ndarray               # (n_s, 2 n_s)
    n_steps: int
    n_units: int

    def energies(self, e0: np.ndarray, x_stacked: np.ndarray) -> np.ndarray:
        """e(1..N) as an (N, n_s) array."""
        e = self.s_x @ np.asarray(e0, dtype=float) + self.s_u @ x_stacked
        return e.reshape(self.n_steps, self.n_units)


def soe_matrices(fleet: list[StorageSpec], layout: SingleShotLayout,
                 n_steps: int, t_hours: float) -> SoEEvolution:
    if n_steps < 1 or t_hours <= 0:
        raise ValueError("need n_steps >= 1 and positive step length")
    n_s = len(fleet)
    c_s = storage_selector(layout, fleet)
    power_base_kw = layout_power_base_kw(layout)
    b = soe_input_matrix(fleet, t_hours, power_base_kw)
    bc = sp.csr_matrix(b) @ c_s                      # (n_s, n_cols)
    lower = sp.tril(np.ones((n_steps, n_steps)))
    s_u = sp.kron(lower, bc, format="csr")
    s_x = sp.kron(np.ones((n_steps, 1)), sp.eye(n_s), format="csr")
    return SoEEvolution(s_x=s_x, s_u=s_u, c_s=c_s, b=b,
                        n_steps=n_steps, n_units=n_s)


def layout_power_base_kw(layout: SingleShotLayout) -> float:
    """Power base used to convert the layout's per-unit columns to kW."""
    # the layout is always built against a grid with a known base; the
    # conventional 100 kVA base gives 100 kW per unit of p
    return 100.0


def replay_soe(fleet: list[StorageSpec], e0: np.ndarray,
               p_dis_pu: np.ndarray, p_ch_pu: np.ndarray,
               t_hours: float, power_base_kw: float = 100.0) -> np.ndarray:
    """Step-by-step recursion oracle; returns e(1..N) as (N, n_s)."""
    n_steps, n_s = p_dis_pu.shape
    e = np.empty((n_steps, n_s))
    prev = np.asarray(e0, dtype=float).copy()
    for k in range(n_steps):
        for s, u in enumerate(fleet):
            prev_s = prev[s]
            de = (-t_hours / u.eta_dis * p_dis_pu[k, s]
                  - t_hours * u.eta_ch * p_ch_pu[k, s]) * power_base_kw
            e[k, s] = prev_s + de
        prev = e[k].copy()
    return e


def soe_bound_matrix(evo: SoEEvolution) -> tuple[sp.csr_matrix, list[str], list[str]]:
    """Rows over [X | z] expressing 0 <= e(k) <= z, as <= constraints.

    Returns (A_s, senses, labels); the right-hand side depends on the
    initial state and comes from :func:`soe_bound_rhs`.
    """
    n, n_s = evo.n_steps, evo.n_units
    rep = sp.kron(np.ones((n, 1)), sp.eye(n_s), format="csr")
    top = sp.hstack([evo.s_u, -rep], format="csr")        # e(k) - z <= 0
    bottom = sp.hstack([-evo.s_u,
                        sp.csr_matrix((n * n_s, n_s))], format="csr")  # -e(k) <= 0
    a_s = sp.vstack([top, bottom], format="csr")
    senses = ["<="] * (2 * n * n_s)
    labels = [f"soe_hi[{k},{s}]" for k in range(n) for s in range(n_s)]
    labels += [f"soe_lo[{k},{s}]" for k in range(n) for s in range(n_s)]
    return a_s, senses, labels


def soe_bound_rhs(evo: SoEEvolution, e0: np.ndarray) -> np.ndarray:
    sx_e0 = evo.s_x @ np.asarray(e0, dtype=float)
    return np.concatenate([-sx_e0, sx_e0])


# ---------------------------------------------------------------------------
# degradation map
# ---------------------------------------------------------------------------

DEGRADATION_SCHEMA = "lvbess-degradation/1"


@dataclass(frozen=True)
class DegradationMap:
    """Capacity fade rate as a convex max of homogeneous planes.

    Each plane is (a1, a2, a3): fade kWh/h = a1*p_kW + a2*e_kWh + a3*z_kWh,
    with p the unit's net injection.  The realized fade is the maximum
    over planes, floored at zero.
    """

    planes: np.ndarray           # (n_p, 3)

    def __post_init__(self) -> None:
        object.__setattr__(self, "planes",
                           np.atleast_2d(np.asarray(self.planes, dtype=float)))
        if self.planes.shape[1] != 3:
            raise ValueError("planes must be (a1, a2, a3) triples")

    @property
    def n_planes(self) -> int:
        return self.planes.shape[0]

    def fade_rate(self, p_kw, e_kwh, z_kwh):
        """kWh of capacity lost per hour; elementwise over broadcast inputs."""
        p, e, z = np.broadcast_arrays(np.asarray(p_kw, dtype=float),
                                      np.asarray(e_kwh, dtype=float),
                                      np.asarray(z_kwh, dtype=float))
        vals = (self.planes[:, 0, None] * p.ravel()
                + self.planes[:, 1, None] * e.ravel()
                + self.planes[:, 2, None] * z.ravel())
        out = np.maximum(vals.max(axis=0), 0.0).reshape(p.shape)
        return float(out) if out.ndim == 0 else out


def save_degradation_map(dmap: DegradationMap, path: str | Path) -> None:
    doc = {
        "schema": DEGRADATION_SCHEMA,
        "units": {"a1": "kWh/h per kW of net power",
                  "a2": "kWh/h per kWh of state of energy",
                  "a3": "kWh/h per kWh of capacity"},
        "planes": [[float(v) for v in row] for row in dmap.planes],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_degradation_map(path: str | Path) -> DegradationMap:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != DEGRADATION_SCHEMA:
        raise ValueError(f"unsupported degradation file schema {doc.get('schema')!r}")
    return DegradationMap(planes=np.asarray(doc["planes"], dtype=float))


def synthetic_fade_rate(p_kw, e_kwh, z_kwh, *,
                        k_throughput: float = 5.0e-5,
                        k_stress: float = 1.0e-4,
                        k_calendar: float = 0.02 / 8760.0):
    """Documented synthetic fade model (no measured map is bundled).

    kWh lost per hour = k_throughput*|p| + k_stress*max(e - 0.9 z, 0)
    + k_calendar*z: a throughput term, a high-state-of-charge stress term
    above 90%, and calendar aging sized so an idle battery reaches 80%
    capacity after exactly ten years.
    """
    p = np.asarray(p_kw, dtype=float)
    e = np.asarray(e_kwh, dtype=float)
    z = np.asarray(z_kwh, dtype=float)
    return (k_throughput * np.abs(p)
            + k_stress * np.maximum(e - 0.9 * z, 0.0)
            + k_calendar * z)


def sample_fade_box(fade_fn, p_ch_max_kw: float, p_dis_max_kw: float,
                    z_ref_kwh: float, n_power: int = 9,
                    n_energy: int = 9) -> np.ndarray:
    """Sample a fade function over the unit's operating box at z = z_ref.

    Returns rows (p, e, z, fade)."""
    ps = np.linspace(-p_ch_max_kw, p_dis_max_kw, n_power)
    es = np.linspace(0.0, z_ref_kwh, n_energy)
    rows = []
    for p in ps:
        for e in es:
            rows.append((p, e, z_ref_kwh, float(fade_fn(p, e, z_ref_kwh))))
    return np.asarray(rows)


def default_anchors(p_ch_max_kw: float, p_dis_max_kw: float,
                    z_ref_kwh: float) -> np.ndarray:
    z = z_ref_kwh
    return np.asarray([
        (p_dis_max_kw, 0.3 * z, z),
        (-p_ch_max_kw, 0.3 * z, z),
        (p_dis_max_kw, 0.97 * z, z),
        (-p_ch_max_kw, 0.97 * z, z),
        (0.0, 0.97 * z, z),
        (0.0, 0.1 * z, z),
    ])


def convexify_map(samples: np.ndarray, anchors: np.ndarray | None = None,
                  dedupe_tol: float = 1e-9) -> DegradationMap:
    """Fit supporting planes to a sampled fade map.

    For each anchor point u, one small LP finds the plane a maximizing
    a.u subject to a.s_j <= fade_j for every sample — the plane touches
    the lower convex envelope of the cloud near the anchor and never
    overestimates any sample.  Duplicate planes are merged.  Raises
    :class:`DegenerateSamples` if the fit is unbounded, i.e. the samples
    cannot pin a supporting plane down.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != 4 or samples.shape[0] < 3:
        raise DegenerateSamples("need at least 3 samples of (p, e, z, fade)")
    pts, fade = samples[:, :3], samples[:, 3]
    if anchors is None:
        anchors = default_anchors(-pts[:, 0].min(), pts[:, 0].max(),
                                  float(np.median(pts[:, 2])))
    planes: list[np.ndarray] = []
    for u in np.atleast_2d(anchors):
        prob = LpProblem.build(
            c=-np.asarray(u, dtype=float),       # maximize a.u
            a_in=pts, b_in=fade, senses=["<="] * len(fade),
            lb=np.full(3, -np.inf), ub=np.full(3, np.inf),
        )
        sol = solve_lp(prob, SolverConfig(backend="simplex"))
        if sol.status is LpStatus.UNBOUNDED:
            raise DegenerateSamples(
                f"supporting-plane fit unbounded at anchor {tuple(u)}; "
                "samples do not cover the operating box")
        if sol.status is not LpStatus.OPTIMAL:
            raise DegenerateSamples(f"plane fit failed at anchor {tuple(u)}: "
                                    f"{sol.status.value}")
        cand = sol.primal
        if not any(np.max(np.abs(cand - p)) <= dedupe_tol for p in planes):
            planes.append(cand)
    return DegradationMap(planes=np.vstack(planes))


def default_degradation_map(unit: StorageSpec, z_ref_kwh: float | None = None) -> DegradationMap:
    """Convexified synthetic map for one unit (planes are z-scalable)."""
    z_ref = z_ref_kwh if z_ref_kwh is not None else max(unit.z_max_kwh, 1.0)
    samples = sample_fade_box(synthetic_fade_rate, unit.p_ch_max_kw,
                              unit.p_dis_max_kw, z_ref)
    anchors = default_anchors(unit.p_ch_max_kw, unit.p_dis_max_kw, z_ref)
    return convexify_map(samples, anchors)


# ---------------------------------------------------------------------------
# degradation rows for the horizon problem
# ---------------------------------------------------------------------------

def degradation_matrix(dmap: DegradationMap, evo: SoEEvolution,
                       layout: SingleShotLayout
                       ) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix, list[str], list[str]]:
    """Plane rows over ([X], [z], [D]) as <= constraints.

    For battery s, step k, plane i:

        a1*(p_dis + p_ch)(k) + a2*e(k+1) + a3*z_s - d_s(k) <= -a2*(S_x e0)

    assembled with Kronecker products so the sparsity mirrors the block
    structure.  Returns (A_x, A_z, A_d, senses, labels); the rhs comes
    from :func:`degradation_rhs`.
    """
    n, n_s, n_p = evo.n_steps, evo.n_units, dmap.n_planes
    a1 = dmap.planes[:, [0]] * layout_power_base_kw(layout)  # per-unit columns
    a2 = dmap.planes[:, [1]]
    a3 = dmap.planes[:, [2]]

    sum_dis_ch = sp.kron(np.ones((1, 2)), sp.eye(n_s)) @ evo.c_s   # (n_s, n_cols)
    a_power = sp.kron(sp.eye(n * n_s), a1, format="csr") @ sp.kron(
        sp.eye(n), sum_dis_ch, format="csr")
    a_energy = sp.kron(sp.eye(n * n_s), a2, format="csr") @ evo.s_u
    a_x = (a_power + a_energy).tocsr()
    a_z = sp.kron(np.ones((n, 1)), sp.kron(sp.eye(n_s), a3), format="csr")
    a_d = sp.kron(sp.eye(n * n_s), -np.ones((n_p, 1)), format="csr")
    senses = ["<="] * (n * n_s * n_p)
    labels = [f"fade[{k},{s},{i}]"
              for k in range(n) for s in range(n_s) for i in range(n_p)]
    return a_x, a_z, a_d, senses, labels


def degradation_rhs(dmap: DegradationMap, evo: SoEEvolution,
                    e0: np.ndarray) -> np.ndarray:
    a2 = dmap.planes[:, [1]]
    sx_e0 = evo.s_x @ np.asarray(e0, dtype=float)
    return -(sp.kron(sp.eye(evo.n_steps * evo.n_units), a2) @ sx_e0)
