"""Cost evaluators: operating carbon, lifetime-based embodied carbon, migration.

These are the exact nonlinear forms.  The optimizer consumes linearized
versions of the same quantities; these evaluators serve both as coefficient
builders and as the oracle that solved plans are re-priced against.
Internal accounting is in kgCO2; monetization applies alpha_carbon at
reporting time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .clustering import ServerCluster
from .scenario import HORIZON_HOURS, Scenario

# Clusters whose expected remaining lifetime is exhausted stay dispatchable
# but maximally expensive: T^FO is floored rather than made infeasible.
T_FO_FLOOR_DAYS = 1.0


class CarbonModelError(ValueError):
    pass


@dataclass(frozen=True)
class EmbodiedModelInputs:
    """Inputs of the daily embodied-emission closed form for one cluster."""

    c_manufacture: float          # kgCO2 per server
    t_pc: float                   # past calendar days (centroid)
    t_fo: float                   # expected remaining operating days
    n_servers: int
    active_counts: np.ndarray     # 24 entries of dispatched servers

    def validate(self):
        if self.t_fo < 0:
            raise CarbonModelError("t_fo must be >= 0 (clamp before building)")
        if self.t_pc < 0:
            raise CarbonModelError("t_pc must be >= 0")
        if self.n_servers < 1:
            raise CarbonModelError("n_servers must be >= 1")
        counts = np.asarray(self.active_counts)
        if counts.shape != (HORIZON_HOURS,):
            raise CarbonModelError(
                f"active_counts must have {HORIZON_HOURS} entries")
        if np.any(counts < -1e-9) or np.any(counts > self.n_servers + 1e-9):
            raise CarbonModelError("active_counts must lie in [0, n_servers]")


def operating_cost(grid_power, ci, alpha_carbon):
    """alpha * sum_t CI(t) * P_grid(t) * 1h, in currency."""
    grid_power = np.asarray(grid_power, dtype=float)
    ci = np.asarray(ci, dtype=float)
    if grid_power.shape != (HORIZON_HOURS,) or ci.shape != (HORIZON_HOURS,):
        raise CarbonModelError(
            f"grid_power and ci must both have {HORIZON_HOURS} entries")
    if np.any(grid_power < 0) or np.any(ci < 0):
        raise CarbonModelError("grid_power and ci must be nonnegative")
    return float(alpha_carbon * np.dot(ci, grid_power))


def equivalent_operating_days(active_counts, n_servers):
    """Fraction of a cluster-day consumed: sum_t N^A(t) / (24 N)."""
    if n_servers <= 0:
        raise CarbonModelError("n_servers must be positive")
    counts = np.asarray(active_counts, dtype=float)
    if np.any(counts < 0) or np.any(counts > n_servers + 1e-9):
        raise CarbonModelError("active_counts must lie in [0, n_servers]")
    return float(counts.sum() / (HORIZON_HOURS * n_servers))


def embodied_emission(inputs: EmbodiedModelInputs):
    """Daily embodied kgCO2 of one cluster, closed form.

    C^M * X^2 / (T^PC * X + T^FO * N) with X the dispatched server-days
    sum_t N^A(t)/24; zero when the cluster is idle all day.
    """
    inputs.validate()
    x = float(np.asarray(inputs.active_counts, dtype=float).sum()) / 24.0
    if x == 0.0:
        return 0.0
    denom = inputs.t_pc * x + inputs.t_fo * inputs.n_servers
    if denom <= 0:
        raise CarbonModelError(
            "embodied denominator is not positive: cluster has no remaining "
            "lifetime but is dispatched")
    return inputs.c_manufacture * x * x / denom


def embodied_emission_compositional(inputs: EmbodiedModelInputs):
    """Same quantity assembled stepwise via the lifetime model.

    Daily consumed fraction -> expected calendar lifetime -> daily embodied
    intensity -> daily emission.  Agrees with the closed form to floating
    precision; kept as the independent route for verification.
    """
    inputs.validate()
    dt_eq = equivalent_operating_days(inputs.active_counts, inputs.n_servers)
    if dt_eq == 0.0:
        return 0.0
    # expected calendar lifetime of the whole group, server-days
    t_can = (inputs.t_pc + inputs.t_fo * 1.0 / dt_eq) * inputs.n_servers
    if t_can <= 0:
        raise CarbonModelError("expected calendar lifetime is not positive")
    ci_ec = inputs.c_manufacture * inputs.n_servers / t_can   # kg per server-day
    return ci_ec * inputs.n_servers * dt_eq


def future_operating_days(cluster: ServerCluster, u, floor=T_FO_FLOOR_DAYS):
    """T^FO = T^Life(u) - T^PO, floored for end-of-life clusters."""
    t_fo = cluster.lifetime_curve(u) - cluster.centroid_past_operating_days
    if t_fo < floor:
        warnings.warn(
            f"cluster {cluster.id}: remaining lifetime {t_fo:.1f} d clamped "
            f"to {floor} d; dispatching it is maximally expensive",
            stacklevel=2)
        return floor
    return t_fo


def cluster_embodied_inputs(cluster: ServerCluster, u, active_counts):
    return EmbodiedModelInputs(
        c_manufacture=cluster.c_manufacture,
        t_pc=cluster.centroid_past_calendar_days,
        t_fo=future_operating_days(cluster, u),
        n_servers=cluster.n_servers,
        active_counts=np.asarray(active_counts, dtype=float),
    )


def migration_cost(flow_magnitudes, alpha_mig):
    """alpha * total |interactive flow|, charged once per ordered-pair flow.

    `flow_magnitudes` is an array of per-link hourly flows (any shape);
    absolute values are applied here so signed conventions also work.
    """
    flows = np.abs(np.asarray(flow_magnitudes, dtype=float))
    return float(alpha_mig * flows.sum())


@dataclass
class CostBreakdown:
    """Eq.-weighted plan cost with kg and currency views."""

    operating: float         # currency
    embodied: float          # currency
    migration: float         # currency
    total: float             # currency, weighted per the scenario
    operating_kg: float
    embodied_kg: float
    per_dc: dict = field(default_factory=dict)       # dc_id -> component dict
    per_cluster: dict = field(default_factory=dict)  # (dc_id, cluster_id) -> kg

    def as_dict(self):
        return {
            "operating_cost": self.operating,
            "embodied_cost": self.embodied,
            "migration_cost": self.migration,
            "total_cost": self.total,
            "operating_kg": self.operating_kg,
            "embodied_kg": self.embodied_kg,
            "per_dc": self.per_dc,
            "per_cluster": {f"{d}/{c}": v for (d, c), v in self.per_cluster.items()},
        }


def total_cost(solution, scenario: Scenario) -> CostBreakdown:
    """Re-price a dispatch plan with the exact evaluators.

    The embodied term is recomputed from the realized active counts through
    the closed form, independent of the linearized value the optimizer used.
    """
    n_dcs = len(scenario.dcs)
    if solution.grid_kw.shape != (n_dcs, HORIZON_HOURS):
        raise CarbonModelError("solution dimensions do not match the scenario")

    per_dc = {}
    per_cluster = {}
    op_kg_total = 0.0
    ec_kg_total = 0.0
    for di, dc in enumerate(scenario.dcs):
        op_kg = float(np.dot(dc.carbon_intensity, solution.grid_kw[di]))
        ec_kg = 0.0
        for ci_, cl in enumerate(solution.clusters_for_dc(dc.id)):
            inputs = EmbodiedModelInputs(
                c_manufacture=cl.c_manufacture,
                t_pc=cl.t_pc,
                t_fo=cl.t_fo,
                n_servers=cl.n_servers,
                active_counts=solution.n_active[di][ci_],
            )
            kg = embodied_emission(inputs)
            per_cluster[(dc.id, cl.cluster_id)] = kg
            ec_kg += kg
        per_dc[dc.id] = {"operating_kg": op_kg, "embodied_kg": ec_kg}
        op_kg_total += op_kg
        ec_kg_total += ec_kg

    mig = migration_cost(solution.link_flows, scenario.alpha_mig)
    op_cost = scenario.alpha_carbon * op_kg_total
    ec_cost = scenario.alpha_carbon * ec_kg_total
    total = (scenario.weight_oc * op_cost + scenario.weight_ec * ec_cost
             + scenario.weight_mig * mig)
    return CostBreakdown(
        operating=op_cost, embodied=ec_cost, migration=mig, total=total,
        operating_kg=op_kg_total, embodied_kg=ec_kg_total,
        per_dc=per_dc, per_cluster=per_cluster)
