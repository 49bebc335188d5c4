"""MILP assembly: variables, rows, SOS2 sets, and the dispatch formulation.

``MilpModel`` is a plain container consumed by the bundled solver and the
file exporters.  ``build_model`` lays down the full day-ahead dispatch
instance: interactive migration flows, batch reshaping, cluster capacity,
expected-failure server dynamics, chance-constrained backup rows, the
battery/PV/grid power balance, and (in the full mode) the linearized
embodied-carbon term.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .. import linearize
from ..carbon import future_operating_days
from ..clustering import ServerCluster
from ..linearize import EmbodiedClusterBounds, LinExpr
from ..reliability import (build_backup_table, cluster_hourly_failure_probs,
                           hourly_survival, server_reliability)
from ..scenario import HORIZON_HOURS, Scenario

T = HORIZON_HOURS
INT_TOL = 1e-6


class BuildError(ValueError):
    """The instance is structurally infeasible before any solve."""


class Mode(enum.Enum):
    M1 = "m1"                # no migration, operating carbon only
    M2 = "m2"                # migration, operating carbon only
    PROPOSED = "proposed"    # migration plus embodied carbon

    @classmethod
    def parse(cls, text):
        return cls(str(text).lower())


@dataclass
class VarDef:
    name: str
    lb: float
    ub: float
    integer: bool = False


@dataclass
class Constraint:
    terms: dict            # var id -> coefficient
    sense: str             # "<=", ">=", "=="
    rhs: float
    name: str = ""


class MilpModel:
    """Sparse minimization model with SOS2 sets and per-variable metadata."""

    def __init__(self, name="model"):
        self.name = name
        self.variables = []
        self.constraints = []
        self.sos2_sets = {}      # id -> (var ids tuple, weights tuple)
        self.sos2_names = {}
        self.objective = LinExpr()
        self.meta = {}           # var id -> role dict
        self.info = {}           # builder payload (index maps, tables, bounds)
        self._next_sos2 = 0
        self._arrays = None

    # -- construction -------------------------------------------------------

    def add_var(self, name, lb=0.0, ub=math.inf, integer=False, meta=None):
        self._arrays = None
        self.variables.append(VarDef(name, float(lb), float(ub), integer))
        vid = len(self.variables) - 1
        if meta:
            self.meta[vid] = meta
        return vid

    def var_name(self, vid):
        return self.variables[vid].name

    def add_constraint(self, terms, sense, rhs, name=""):
        self._arrays = None
        if isinstance(terms, LinExpr):
            rhs = rhs - terms.constant
            terms = terms.terms.items()
        merged = {}
        for var, coef in terms:
            merged[var] = merged.get(var, 0.0) + coef
        if sense not in ("<=", ">=", "=="):
            raise ValueError(f"unknown sense {sense!r}")
        for var in merged:
            if not 0 <= var < len(self.variables):
                raise ValueError(f"constraint {name!r} references unknown "
                                 f"variable {var}")
        self.constraints.append(Constraint(merged, sense, float(rhs), name))
        return len(self.constraints) - 1

    def add_sos2(self, var_ids, weights=None, name=""):
        self._arrays = None
        var_ids = tuple(var_ids)
        if weights is None:
            weights = tuple(range(1, len(var_ids) + 1))
        sid = self._next_sos2
        self._next_sos2 += 1
        self.sos2_sets[sid] = (var_ids, tuple(weights))
        self.sos2_names[sid] = name or f"sos2_{sid}"
        return sid

    def remove_sos2(self, sid):
        self.sos2_sets.pop(sid)
        self.sos2_names.pop(sid, None)

    def add_objective(self, var, coef):
        self.objective.add(var, coef)

    # -- views --------------------------------------------------------------

    @property
    def n_vars(self):
        return len(self.variables)

    @property
    def n_constraints(self):
        return len(self.constraints)

    @property
    def integer_vars(self):
        return [i for i, v in enumerate(self.variables) if v.integer]

    def objective_vector(self):
        c = np.zeros(self.n_vars)
        for var, coef in self.objective.terms.items():
            c[var] = coef
        return c

    def bounds_arrays(self):
        lb = np.array([v.lb for v in self.variables])
        ub = np.array([v.ub for v in self.variables])
        return lb, ub

    def constraint_arrays(self):
        """(A_ub, b_ub, A_eq, b_eq) with >= rows negated into <= rows."""
        if self._arrays is not None:
            return self._arrays
        ub_rows, ub_rhs, eq_rows, eq_rhs = [], [], [], []
        for con in self.constraints:
            if con.sense == "==":
                eq_rows.append(con)
                eq_rhs.append(con.rhs)
            else:
                ub_rows.append(con)
                ub_rhs.append(con.rhs if con.sense == "<=" else -con.rhs)

        def build(rows, negate_ge=False):
            data, ri, ci = [], [], []
            for r, con in enumerate(rows):
                flip = -1.0 if (negate_ge and con.sense == ">=") else 1.0
                for var, coef in con.terms.items():
                    ri.append(r)
                    ci.append(var)
                    data.append(flip * coef)
            return sparse.csr_matrix((data, (ri, ci)),
                                     shape=(len(rows), self.n_vars))

        a_ub = build(ub_rows, negate_ge=True)
        a_eq = build(eq_rows)
        self._arrays = (a_ub, np.array(ub_rhs), a_eq, np.array(eq_rhs))
        return self._arrays

    def constraint_value(self, con: Constraint, x):
        return sum(coef * x[var] for var, coef in con.terms.items())


# ---------------------------------------------------------------------------
# Backup requirement rows


def lower_convex_hull(points):
    """Lower convex hull of (x, y) points, left to right (monotone chain)."""
    pts = sorted(set(points))
    if len(pts) <= 2:
        return pts
    hull = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            # pop while the last two plus p fail to make a left turn
            if (x2 - x1) * (p[1] - y1) - (p[0] - x1) * (y2 - y1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def envelope_edges(table_counts):
    """Linear pieces (slope, intercept) of the table's lower convex envelope.

    The envelope never exceeds the exact table at integer active counts, so
    rows N^B >= slope * N^A + intercept are a valid relaxation of the chance
    constraint: no feasible integer point is cut.  The table itself is
    concave-shaped, so no conjunction of linear rows can dominate it without
    absurd over-provisioning; exactness is restored inside the solver by
    disjunctive branching on the table (see milp.solver).
    """
    n_max = len(table_counts) - 1
    points = [(float(n), float(table_counts[n])) for n in range(n_max + 1)]
    hull = lower_convex_hull(points)
    edges = []
    for (x1, y1), (x2, y2) in zip(hull, hull[1:]):
        slope = (y2 - y1) / (x2 - x1)
        edges.append((slope, y1 - slope * x1))
    return edges


def envelope_value(edges, n):
    if not edges:
        return 0.0
    return max(slope * n + intercept for slope, intercept in edges)


def backup_requirement_rows(model: MilpModel, table, na_var, nb_var,
                            row_prefix=""):
    """Add the envelope rows linking one hour's backup count to its actives.

    Vacuous tables (all zero) add nothing.  Returns the edges used.
    """
    counts = np.asarray(table.counts)
    if not np.any(counts > 0):
        return []
    edges = envelope_edges(counts)
    for e, (slope, intercept) in enumerate(edges):
        if slope <= 0.0 and intercept <= 0.0:
            continue
        model.add_constraint([(nb_var, -1.0), (na_var, slope)], "<=",
                             -intercept, name=f"{row_prefix}bak{e}")
    return edges


# ---------------------------------------------------------------------------
# Solution container


@dataclass(frozen=True)
class ClusterRef:
    """Static cluster data carried inside a solution for re-pricing."""

    dc_id: str
    cluster_id: str
    group: str
    n_servers: int
    t_pc: float
    t_po: float
    t_fo: float          # at the run utilization
    c_manufacture: float
    beta: float

    def as_dict(self):
        return {"dc_id": self.dc_id, "cluster_id": self.cluster_id,
                "group": self.group, "n_servers": self.n_servers,
                "t_pc": self.t_pc, "t_po": self.t_po, "t_fo": self.t_fo,
                "c_manufacture": self.c_manufacture, "beta": self.beta}


@dataclass
class DispatchSolution:
    """A solved dispatch plan, self-describing enough to re-price and replay."""

    mode: str
    u: float
    dc_ids: list
    cluster_refs: list          # per dc: list[ClusterRef]
    n_primary: list             # per dc: int array (K_i, 24)
    n_backup: list
    n_active: list
    w_interactive: list         # per dc: float array (K_i, 24)
    w_batch: list
    grid_kw: np.ndarray         # (I, 24)
    pv_used_kw: np.ndarray
    batt_charge_kw: np.ndarray
    batt_discharge_kw: np.ndarray
    soc: np.ndarray             # (I, 24), state at the end of each hour
    delta_wb: np.ndarray        # (I, 24)
    link_flows: dict            # (from_id, to_id) -> array (24,)
    objective_value: float
    status: str
    mip_gap: float
    solver_stats: dict = field(default_factory=dict)
    model_embodied: dict = field(default_factory=dict)   # (dc, cluster) -> Z
    embodied_bounds: dict = field(default_factory=dict)  # (dc, cluster) -> bound

    def dc_index(self, dc_id):
        return self.dc_ids.index(dc_id)

    def clusters_for_dc(self, dc_id):
        return self.cluster_refs[self.dc_index(dc_id)]

    def delta_wi(self, dc_id):
        """Net interactive workload moved out of a DC, per hour."""
        out = np.zeros(T)
        for (i, j), flow in self.link_flows.items():
            if i == dc_id:
                out += flow
            if j == dc_id:
                out -= flow
        return out

    def backup_share(self):
        """Backups as a fraction of all dispatched server-hours."""
        backup = sum(arr.sum() for arr in self.n_backup)
        active = sum(arr.sum() for arr in self.n_active)
        return float(backup / active) if active > 0 else 0.0

    def as_dict(self):
        return {
            "mode": self.mode,
            "u": self.u,
            "dc_ids": list(self.dc_ids),
            "clusters": [[c.as_dict() for c in refs] for refs in self.cluster_refs],
            "n_primary": [a.tolist() for a in self.n_primary],
            "n_backup": [a.tolist() for a in self.n_backup],
            "n_active": [a.tolist() for a in self.n_active],
            "w_interactive": [a.tolist() for a in self.w_interactive],
            "w_batch": [a.tolist() for a in self.w_batch],
            "grid_kw": self.grid_kw.tolist(),
            "pv_used_kw": self.pv_used_kw.tolist(),
            "batt_charge_kw": self.batt_charge_kw.tolist(),
            "batt_discharge_kw": self.batt_discharge_kw.tolist(),
            "soc": self.soc.tolist(),
            "delta_wb": self.delta_wb.tolist(),
            "link_flows": {f"{i}->{j}": f.tolist()
                           for (i, j), f in self.link_flows.items()},
            "objective_value": self.objective_value,
            "status": self.status,
            "mip_gap": self.mip_gap,
            "solver_stats": self.solver_stats,
            "model_embodied": {f"{d}/{c}": v
                               for (d, c), v in self.model_embodied.items()},
            "embodied_bounds": {f"{d}/{c}": v
                                for (d, c), v in self.embodied_bounds.items()},
        }

    @classmethod
    def from_dict(cls, obj):
        refs = [[ClusterRef(**c) for c in dc_refs] for dc_refs in obj["clusters"]]
        flows = {}
        for key, vals in obj["link_flows"].items():
            i, j = key.split("->")
            flows[(i, j)] = np.asarray(vals, dtype=float)

        def split_key(key):
            d, c = key.split("/", 1)
            return d, c

        return cls(
            mode=obj["mode"], u=obj["u"], dc_ids=list(obj["dc_ids"]),
            cluster_refs=refs,
            n_primary=[np.asarray(a, dtype=int) for a in obj["n_primary"]],
            n_backup=[np.asarray(a, dtype=int) for a in obj["n_backup"]],
            n_active=[np.asarray(a, dtype=int) for a in obj["n_active"]],
            w_interactive=[np.asarray(a, dtype=float)
                           for a in obj["w_interactive"]],
            w_batch=[np.asarray(a, dtype=float) for a in obj["w_batch"]],
            grid_kw=np.asarray(obj["grid_kw"], dtype=float),
            pv_used_kw=np.asarray(obj["pv_used_kw"], dtype=float),
            batt_charge_kw=np.asarray(obj["batt_charge_kw"], dtype=float),
            batt_discharge_kw=np.asarray(obj["batt_discharge_kw"], dtype=float),
            soc=np.asarray(obj["soc"], dtype=float),
            delta_wb=np.asarray(obj["delta_wb"], dtype=float),
            link_flows=flows,
            objective_value=float(obj["objective_value"]),
            status=obj["status"],
            mip_gap=float(obj["mip_gap"]),
            solver_stats=dict(obj.get("solver_stats", {})),
            model_embodied={split_key(k): v
                            for k, v in obj.get("model_embodied", {}).items()},
            embodied_bounds={split_key(k): v
                             for k, v in obj.get("embodied_bounds", {}).items()},
        )


# ---------------------------------------------------------------------------
# Instance assembly


def _structural_checks(scenario: Scenario, clusters_by_dc, u, mode):
    caps = {}
    for dc in scenario.dcs:
        caps[dc.id] = sum(c.n_servers for c in clusters_by_dc[dc.id]) \
            * dc.server_params.s_rate * u
    for t in range(T):
        total_demand = 0.0
        for dc in scenario.dcs:
            if mode is Mode.M1:
                demand = dc.workload_interactive[t] + dc.workload_batch[t]
            else:
                demand = (dc.workload_interactive[t]
                          + dc.workload_batch.mean())
            total_demand += dc.workload_interactive[t] + dc.workload_batch[t]
            relief = 0.0
            if mode is not Mode.M1:
                relief = sum(scenario.link_cap(dc.id, other.id)
                             for other in scenario.dcs if other.id != dc.id)
            if demand > caps[dc.id] + relief + 1e-9:
                raise BuildError(
                    f"hour {t}, dc '{dc.id}': workload {demand:.1f} req/s "
                    f"exceeds fleet capacity {caps[dc.id]:.1f} req/s at "
                    f"u={u} plus link relief {relief:.1f}")
        if total_demand > sum(caps.values()) + 1e-9:
            raise BuildError(
                f"hour {t}: total workload {total_demand:.1f} req/s exceeds "
                f"total fleet capacity {sum(caps.values()):.1f} req/s at u={u}")


def build_model(scenario: Scenario, clusters_by_dc, u, mode=Mode.PROPOSED,
                segments=16, tangent_ratio=1.25) -> MilpModel:
    """Assemble the dispatch MILP for one utilization level and mode.

    M1 pins every migration variable at zero and prices operating carbon
    only; M2 frees migration with the same objective; PROPOSED adds the
    linearized embodied term.  The model's ``info`` dict carries the index
    maps, backup tables and linearization handles needed to extract and
    audit a solution.
    """
    if isinstance(mode, str):
        mode = Mode.parse(mode)
    for dc in scenario.dcs:
        if u > dc.server_params.u_ub + 1e-12:
            raise BuildError(f"u={u} exceeds u_ub={dc.server_params.u_ub} "
                             f"of dc '{dc.id}'")
        if not clusters_by_dc.get(dc.id):
            raise BuildError(f"dc '{dc.id}' has no clusters")
    _structural_checks(scenario, clusters_by_dc, u, mode)

    model = MilpModel(name=f"{scenario.name}_{mode.value}_u{u}")
    info = model.info
    info.update({"mode": mode, "u": u, "scenario": scenario.name,
                 "scenario_obj": scenario,
                 "dc_ids": [dc.id for dc in scenario.dcs]})

    migration_on = mode is not Mode.M1
    embodied_on = mode is Mode.PROPOSED

    idx = {}
    info["idx"] = idx
    idx["np"], idx["nb"], idx["na"] = [], [], []
    idx["wi"], idx["wb"] = [], []
    info["clusters"] = []
    info["backup_tables"] = []
    info["hull_edges"] = []
    info["cluster_refs"] = []

    # --- per-cluster hourly variables and reliability constants
    for dc in scenario.dcs:
        clusters = clusters_by_dc[dc.id]
        sp = dc.server_params
        k = len(clusters)
        np_ids = np.empty((k, T), dtype=int)
        nb_ids = np.empty((k, T), dtype=int)
        na_ids = np.empty((k, T), dtype=int)
        wi_ids = np.empty((k, T), dtype=int)
        wb_ids = np.empty((k, T), dtype=int)
        tables = []
        refs = []
        for ki, cl in enumerate(clusters):
            tables.append(build_backup_table(cl, u, scenario.p_thr,
                                             cl.n_servers, sp))
            refs.append(ClusterRef(
                dc_id=dc.id, cluster_id=cl.id, group=cl.group_kind.value,
                n_servers=cl.n_servers,
                t_pc=cl.centroid_past_calendar_days,
                t_po=cl.centroid_past_operating_days,
                t_fo=future_operating_days(cl, u),
                c_manufacture=cl.c_manufacture, beta=cl.beta))
            for t in range(T):
                base = f"{cl.id}_t{t}"
                m = {"dc": dc.id, "cluster": cl.id, "hour": t}
                np_ids[ki, t] = model.add_var(
                    f"{base}_np", 0, cl.n_servers, integer=True,
                    meta=dict(m, role="n_primary"))
                nb_ids[ki, t] = model.add_var(
                    f"{base}_nb", 0, cl.n_servers, integer=True,
                    meta=dict(m, role="n_backup"))
                na_ids[ki, t] = model.add_var(
                    f"{base}_na", 0, cl.n_servers,
                    meta=dict(m, role="n_active"))
                wi_ids[ki, t] = model.add_var(
                    f"{base}_wi", 0, math.inf, meta=dict(m, role="w_int"))
                wb_ids[ki, t] = model.add_var(
                    f"{base}_wb", 0, math.inf, meta=dict(m, role="w_batch"))
        idx["np"].append(np_ids)
        idx["nb"].append(nb_ids)
        idx["na"].append(na_ids)
        idx["wi"].append(wi_ids)
        idx["wb"].append(wb_ids)
        info["clusters"].append(clusters)
        info["backup_tables"].append(tables)
        info["cluster_refs"].append(refs)

    # --- per-DC hourly power & batch variables
    n_dc = len(scenario.dcs)
    grid = np.empty((n_dc, T), dtype=int)
    pv = np.empty((n_dc, T), dtype=int)
    chg = np.empty((n_dc, T), dtype=int)
    dis = np.empty((n_dc, T), dtype=int)
    soc = np.empty((n_dc, T), dtype=int)
    dwb = np.empty((n_dc, T), dtype=int)
    bexc = np.empty((n_dc, T), dtype=int) if scenario.battery_exclusive_binary \
        else None
    for di, dc in enumerate(scenario.dcs):
        bat = dc.battery
        for t in range(T):
            m = {"dc": dc.id, "hour": t}
            grid[di, t] = model.add_var(f"{dc.id}_grid_t{t}", 0, math.inf,
                                        meta=dict(m, role="grid_kw"))
            pv[di, t] = model.add_var(f"{dc.id}_pv_t{t}", 0,
                                      dc.pv_profile[t],
                                      meta=dict(m, role="pv_kw"))
            chg[di, t] = model.add_var(f"{dc.id}_chg_t{t}", 0, bat.power_kw,
                                       meta=dict(m, role="chg_kw"))
            dis[di, t] = model.add_var(f"{dc.id}_dis_t{t}", 0, bat.power_kw,
                                       meta=dict(m, role="dis_kw"))
            soc[di, t] = model.add_var(f"{dc.id}_soc_t{t}", bat.soc_min,
                                       bat.soc_max, meta=dict(m, role="soc"))
            lo, hi = (-math.inf, math.inf) if migration_on else (0.0, 0.0)
            dwb[di, t] = model.add_var(f"{dc.id}_dwb_t{t}", lo, hi,
                                       meta=dict(m, role="delta_wb"))
            if bexc is not None:
                bexc[di, t] = model.add_var(f"{dc.id}_bexc_t{t}", 0, 1,
                                            integer=True,
                                            meta=dict(m, role="batt_flag"))
    idx.update(grid=grid, pv=pv, chg=chg, dis=dis, soc=soc, dwb=dwb, bexc=bexc)

    # --- migration flow variables, one per ordered DC pair with a link
    flows = {}
    for (i_id, j_id), cap in sorted(scenario.migration_link_caps.items()):
        ids = np.empty(T, dtype=int)
        for t in range(T):
            ub = cap if migration_on else 0.0
            ids[t] = model.add_var(f"f_{i_id}_{j_id}_t{t}", 0, ub,
                                   meta={"from": i_id, "to": j_id, "hour": t,
                                         "role": "flow"})
        flows[(i_id, j_id)] = ids
    idx["flows"] = flows

    # --- rows: server coupling, capacity, backups, remaining fleet
    info["chance_pairs"] = []
    for di, dc in enumerate(scenario.dcs):
        clusters = clusters_by_dc[dc.id]
        sp = dc.server_params
        for ki, cl in enumerate(clusters):
            q_hw, _ = cluster_hourly_failure_probs(cl, u, sp)
            table = info["backup_tables"][di][ki]
            edges = None
            for t in range(T):
                info["chance_pairs"].append(
                    (int(idx["na"][di][ki, t]), int(idx["nb"][di][ki, t]),
                     di, ki))
                model.add_constraint(
                    [(idx["np"][di][ki, t], 1.0), (idx["nb"][di][ki, t], 1.0),
                     (idx["na"][di][ki, t], -1.0)], "==", 0.0,
                    name=f"{cl.id}_t{t}_active")
                model.add_constraint(
                    [(idx["wi"][di][ki, t], 1.0), (idx["wb"][di][ki, t], 1.0),
                     (idx["np"][di][ki, t], -sp.s_rate * u)], "<=", 0.0,
                    name=f"{cl.id}_t{t}_capacity")
                # active servers cannot exceed the expected remaining fleet
                terms = [(idx["na"][di][ki, t], 1.0)]
                for tau in range(t + 1):
                    terms.append((idx["na"][di][ki, tau], q_hw))
                model.add_constraint(terms, "<=", float(cl.n_servers),
                                     name=f"{cl.id}_t{t}_remaining")
                e = backup_requirement_rows(
                    model, table, idx["na"][di][ki, t], idx["nb"][di][ki, t],
                    row_prefix=f"{cl.id}_t{t}_")
                if edges is None:
                    edges = e
            info["hull_edges"].append(edges or [])

    # --- rows: workload balance
    for di, dc in enumerate(scenario.dcs):
        batch_base = dc.workload_batch.mean() if migration_on \
            else dc.workload_batch
        for t in range(T):
            terms = [(idx["wi"][di][ki, t], 1.0)
                     for ki in range(len(clusters_by_dc[dc.id]))]
            for (i_id, j_id), ids in flows.items():
                if i_id == dc.id:
                    terms.append((ids[t], 1.0))     # moved out
                elif j_id == dc.id:
                    terms.append((ids[t], -1.0))    # received
            model.add_constraint(terms, "==", float(dc.workload_interactive[t]),
                                 name=f"{dc.id}_t{t}_int_balance")
            terms = [(idx["wb"][di][ki, t], 1.0)
                     for ki in range(len(clusters_by_dc[dc.id]))]
            terms.append((dwb[di, t], -1.0))
            base = batch_base if np.isscalar(batch_base) else batch_base[t]
            model.add_constraint(terms, "==", float(base),
                                 name=f"{dc.id}_t{t}_batch_balance")
        model.add_constraint([(dwb[di, t], 1.0) for t in range(T)], "==", 0.0,
                             name=f"{dc.id}_batch_conserve")

    # --- rows: power balance and battery dynamics
    for di, dc in enumerate(scenario.dcs):
        sp = dc.server_params
        bat = dc.battery
        clusters = clusters_by_dc[dc.id]
        idle_term = sp.p_idle + (dc.pue - 1.0) * sp.p_peak
        for t in range(T):
            terms = []
            for ki, cl in enumerate(clusters):
                p_comb_hour = hourly_survival(server_reliability(cl, u, sp))
                coeff = idle_term + u * p_comb_hour * (sp.p_peak - sp.p_idle)
                terms.append((idx["na"][di][ki, t], coeff))
            terms += [(grid[di, t], -1.0), (pv[di, t], -1.0),
                      (dis[di, t], -1.0), (chg[di, t], 1.0)]
            model.add_constraint(terms, "==", 0.0,
                                 name=f"{dc.id}_t{t}_power_balance")
            # SOC(t) - SOC(t-1) = (eta*chg - dis/eta) / E
            terms = [(soc[di, t], 1.0),
                     (chg[di, t], -bat.efficiency / bat.energy_kwh),
                     (dis[di, t], 1.0 / (bat.efficiency * bat.energy_kwh))]
            rhs = 0.0
            if t == 0:
                rhs = bat.soc_initial
            else:
                terms.append((soc[di, t - 1], -1.0))
            model.add_constraint(terms, "==", rhs, name=f"{dc.id}_t{t}_soc")
            if bexc is not None:
                model.add_constraint(
                    [(chg[di, t], 1.0), (bexc[di, t], -bat.power_kw)], "<=",
                    0.0, name=f"{dc.id}_t{t}_chg_flag")
                model.add_constraint(
                    [(dis[di, t], 1.0), (bexc[di, t], bat.power_kw)], "<=",
                    bat.power_kw, name=f"{dc.id}_t{t}_dis_flag")
        if scenario.cyclic_soc:
            model.add_constraint([(soc[di, T - 1], 1.0)], ">=",
                                 bat.soc_initial, name=f"{dc.id}_soc_final")

    # --- embodied carbon (proposed mode only)
    info["embodied"] = {}
    if embodied_on:
        for di, dc in enumerate(scenario.dcs):
            for ki, cl in enumerate(clusters_by_dc[dc.id]):
                ref = info["cluster_refs"][di][ki]
                x_var = model.add_var(
                    f"{cl.id}_x", 0.0, cl.n_servers,
                    meta={"dc": dc.id, "cluster": cl.id, "role": "x_days"})
                terms = [(idx["na"][di][ki, t], 1.0 / 24.0) for t in range(T)]
                terms.append((x_var, -1.0))
                model.add_constraint(terms, "==", 0.0, name=f"{cl.id}_x_def")
                pw = linearize.add_piecewise_square(
                    model, x_var, 0.0, float(cl.n_servers), segments)
                bounds = EmbodiedClusterBounds(
                    c_manufacture=cl.c_manufacture, t_pc=ref.t_pc,
                    t_fo=ref.t_fo, n_servers=cl.n_servers)
                reform = linearize.add_fractional_embodied(
                    model, x_var, pw, bounds, tangent_ratio=tangent_ratio)
                model.add_objective(
                    reform.z_var,
                    scenario.weight_ec * scenario.alpha_carbon)
                info["embodied"][(dc.id, cl.id)] = (x_var, pw, reform)

    # --- objective: operating carbon and migration
    for di, dc in enumerate(scenario.dcs):
        for t in range(T):
            model.add_objective(
                grid[di, t],
                scenario.weight_oc * scenario.alpha_carbon
                * float(dc.carbon_intensity[t]))
    for ids in flows.values():
        for t in range(T):
            model.add_objective(ids[t], scenario.weight_mig * scenario.alpha_mig)

    return model


def model_size_formula(n_dc, k_total, n_link_dirs, segments, mode,
                       n_qvars=None, hull_edge_rows=0, tangent_rows=0,
                       battery_binary=False, cyclic_soc=True):
    """Predicted (n_vars, n_rows, n_integer, n_sos2) of a built model.

    Counts follow directly from the construction above: five hourly
    variables per cluster, six per DC, one per link direction and hour,
    and in the full mode 3 + segments + 1 auxiliaries per cluster plus one
    product variable per cluster with a nonzero calendar age.
    """
    if isinstance(mode, str):
        mode = Mode.parse(mode)
    embodied_on = mode is Mode.PROPOSED
    if n_qvars is None:
        n_qvars = k_total
    n_vars = 5 * k_total * T + 6 * n_dc * T + n_link_dirs * T
    n_int = 2 * k_total * T
    n_sos2 = 0
    n_rows = (3 * k_total * T          # active coupling, capacity, remaining
              + hull_edge_rows
              + 2 * n_dc * T + n_dc    # workload balances + batch conservation
              + 2 * n_dc * T)          # power balance + soc recursion
    if cyclic_soc:
        n_rows += n_dc
    if battery_binary:
        n_vars += n_dc * T
        n_int += n_dc * T
        n_rows += 2 * n_dc * T
    if embodied_on:
        n_vars += k_total * (3 + segments + 1) + n_qvars
        n_sos2 = k_total
        # x definition + convexity + x interp + y interp + z equality
        n_rows += 5 * k_total + 4 * n_qvars + tangent_rows
    return n_vars, n_rows, n_int, n_sos2


def extract_solution(model: MilpModel, x, status, mip_gap,
                     solver_stats=None) -> DispatchSolution:
    """Read a variable vector back into a DispatchSolution."""
    info = model.info
    idx = info["idx"]
    n_dc = len(info["dc_ids"])

    def int_arr(ids):
        vals = np.asarray([[x[v] for v in row] for row in ids])
        return np.rint(vals).astype(int)

    def flt_arr(ids):
        return np.asarray([[x[v] for v in row] for row in ids])

    flows = {key: np.array([x[v] for v in ids])
             for key, ids in idx["flows"].items()}

    model_emb = {}
    emb_bounds = {}
    for key, (x_var, pw, reform) in info.get("embodied", {}).items():
        model_emb[key] = float(x[reform.z_var])
        emb_bounds[key] = linearize.embodied_minimizer_bound(reform)

    return DispatchSolution(
        mode=info["mode"].value,
        u=info["u"],
        dc_ids=list(info["dc_ids"]),
        cluster_refs=[list(refs) for refs in info["cluster_refs"]],
        n_primary=[int_arr(idx["np"][di]) for di in range(n_dc)],
        n_backup=[int_arr(idx["nb"][di]) for di in range(n_dc)],
        n_active=[int_arr(idx["na"][di]) for di in range(n_dc)],
        w_interactive=[flt_arr(idx["wi"][di]) for di in range(n_dc)],
        w_batch=[flt_arr(idx["wb"][di]) for di in range(n_dc)],
        grid_kw=flt_arr(idx["grid"]),
        pv_used_kw=flt_arr(idx["pv"]),
        batt_charge_kw=flt_arr(idx["chg"]),
        batt_discharge_kw=flt_arr(idx["dis"]),
        soc=flt_arr(idx["soc"]),
        delta_wb=flt_arr(idx["dwb"]),
        link_flows=flows,
        objective_value=float(model.objective_vector() @ np.asarray(x)),
        status=status,
        mip_gap=float(mip_gap),
        solver_stats=solver_stats or {},
        model_embodied=model_emb,
        embodied_bounds=emb_bounds,
    )
