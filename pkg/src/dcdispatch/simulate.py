"""Monte Carlo evaluation of a dispatch plan under sampled failures.

Each trial replays the planned day hour by hour: hardware and software
failures are drawn per cluster (hardware losses persist for the rest of the
day, software losses last one hour), surviving backups take over failed
primaries one for one, overload spills to sibling clusters with spare
surviving capacity (lowest embodied intensity first), and what cannot be
served inside the delay bound is counted as an SLA violation.  Trials use
inverse-CDF sampling on a per-trial uniform stream, so paired runs (for
example with and without backups) see coupled failure draws and the
with-backup run can never do worse on the same seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .carbon import EmbodiedModelInputs, embodied_emission
from .clustering import GroupKind, ServerCluster
from .milp.model import DispatchSolution
from .reliability import binomial_inverse_cdf, cluster_hourly_failure_probs
from .scenario import HORIZON_HOURS, Scenario

T = HORIZON_HOURS


def clusters_from_solution(solution: DispatchSolution, scenario: Scenario):
    """Rebuild ServerCluster objects from the refs embedded in a solution."""
    out = {}
    for di, dc_id in enumerate(solution.dc_ids):
        dc = scenario.dcs[scenario.dc_index(dc_id)]
        out[dc_id] = [ServerCluster(
            id=ref.cluster_id,
            group_kind=GroupKind(ref.group),
            n_servers=ref.n_servers,
            centroid_past_calendar_days=ref.t_pc,
            centroid_past_operating_days=ref.t_po,
            c_manufacture=ref.c_manufacture,
            beta=ref.beta,
            lifetime_curve=dc.server_params.lifetime_curve,
        ) for ref in solution.cluster_refs[di]]
    return out


def strip_backups(solution: DispatchSolution) -> DispatchSolution:
    """The same plan with every backup removed (primaries untouched)."""
    import copy

    stripped = copy.deepcopy(solution)
    for di in range(len(stripped.dc_ids)):
        stripped.n_backup[di] = np.zeros_like(stripped.n_backup[di])
        stripped.n_active[di] = stripped.n_primary[di].copy()
    return stripped


@dataclass
class TrialResult:
    """Realized state of one failure trajectory."""

    seed_key: tuple
    hw_failures: list          # per dc: (K, T) int
    sw_failures: list
    realized_active: list      # per dc: (K, T) int
    served: list               # per dc: (K, T) req/s actually served
    dropped: list              # per dc: (K, T) req/s dropped
    delay: list                # per dc: (K, T) seconds, NaN where no load
    violated_load: list        # per dc: (K, T) req/s in violation
    operating_kg: float = 0.0
    embodied_kg: float = 0.0

    def total_load(self):
        return sum(float(s.sum() + d.sum())
                   for s, d in zip(self.served, self.dropped))

    def total_violated(self):
        return sum(float(v.sum()) for v in self.violated_load)

    def total_dropped(self):
        return sum(float(d.sum()) for d in self.dropped)


def _sla_utilization(sp):
    """Highest utilization that still meets the delay bound."""
    return 1.0 - 1.0 / (sp.s_rate * sp.t_delay_ub)


def run_trial(solution: DispatchSolution, scenario: Scenario,
              clusters_by_dc=None, seed=0) -> TrialResult:
    """Sample one failure trajectory and replay the plan against it."""
    if clusters_by_dc is None:
        clusters_by_dc = clusters_from_solution(solution, scenario)
    rng = np.random.default_rng([int(s) for s in np.atleast_1d(seed)])
    u = solution.u
    n_dc = len(solution.dc_ids)

    probs = []
    intensities = []
    for di, dc_id in enumerate(solution.dc_ids):
        dc = scenario.dcs[scenario.dc_index(dc_id)]
        pr, inten = [], []
        for ref, cl in zip(solution.cluster_refs[di], clusters_by_dc[dc_id]):
            pr.append(cluster_hourly_failure_probs(cl, u, dc.server_params))
            inten.append(ref.c_manufacture / max(ref.t_pc + ref.t_fo, 1e-9))
        probs.append(pr)
        intensities.append(inten)

    hw = [np.zeros_like(solution.n_active[di]) for di in range(n_dc)]
    sw = [np.zeros_like(solution.n_active[di]) for di in range(n_dc)]
    act = [np.zeros_like(solution.n_active[di]) for di in range(n_dc)]
    served = [np.zeros(a.shape) for a in solution.n_active]
    dropped = [np.zeros(a.shape) for a in solution.n_active]
    delay = [np.full(a.shape, np.nan) for a in solution.n_active]
    violated = [np.zeros(a.shape) for a in solution.n_active]
    cum_hw = [np.zeros(a.shape[0], dtype=int) for a in solution.n_active]

    for t in range(T):
        pools = [np.zeros(a.shape[0]) for a in solution.n_active]
        spares = [np.zeros(a.shape[0]) for a in solution.n_active]
        loads = [np.zeros(a.shape[0]) for a in solution.n_active]
        for di, dc_id in enumerate(solution.dc_ids):
            dc = scenario.dcs[scenario.dc_index(dc_id)]
            k = solution.n_active[di].shape[0]
            for ki in range(k):
                ref = solution.cluster_refs[di][ki]
                avail = ref.n_servers - cum_hw[di][ki]
                act_p = min(int(solution.n_primary[di][ki, t]), avail)
                act_b = min(int(solution.n_backup[di][ki, t]), avail - act_p)
                active = act_p + act_b
                act[di][ki, t] = active
                u1, u2 = rng.random(), rng.random()
                q_hw, q_sw = probs[di][ki]
                f_hw = binomial_inverse_cdf(u1, active, q_hw)
                f_sw = binomial_inverse_cdf(u2, active - f_hw, q_sw)
                hw[di][ki, t] = f_hw
                sw[di][ki, t] = f_sw
                cum_hw[di][ki] += f_hw
                survivors = active - f_hw - f_sw
                # backups replace failed units one for one
                pools[di][ki] = min(act_p, survivors)
                spares[di][ki] = survivors - pools[di][ki]
                loads[di][ki] = (solution.w_interactive[di][ki, t]
                                 + solution.w_batch[di][ki, t])

        # spillover and service accounting, per DC
        for di, dc_id in enumerate(solution.dc_ids):
            dc = scenario.dcs[scenario.dc_index(dc_id)]
            sp = dc.server_params
            u_sla = _sla_utilization(sp)
            k = solution.n_active[di].shape[0]
            pool = pools[di]
            load = loads[di]
            engaged = np.zeros(k)

            sla_cap = pool * sp.s_rate * u_sla
            excess = np.maximum(0.0, load - sla_cap)
            if excess.sum() > 1e-12:
                # spare capacity: surviving reserves plus own headroom
                spare_cap = (spares[di] * sp.s_rate * u_sla
                             + np.maximum(0.0, sla_cap - load))
                order = sorted(range(k), key=lambda m: (intensities[di][m], m))
                for ki in np.where(excess > 1e-12)[0]:
                    for m in order:
                        if m == ki or excess[ki] <= 1e-12:
                            continue
                        take = min(excess[ki], spare_cap[m])
                        if take <= 1e-12:
                            continue
                        spare_cap[m] -= take
                        excess[ki] -= take
                        load[ki] -= take
                        load[m] += take
                        engaged[m] = spares[di][m]

            for ki in range(k):
                serve_pool = pool[ki] + engaged[ki]
                cap_full = serve_pool * sp.s_rate
                if load[ki] <= 1e-12:
                    served[di][ki, t] = 0.0
                    delay[di][ki, t] = np.nan
                    continue
                if cap_full <= 0:
                    dropped[di][ki, t] = load[ki]
                    violated[di][ki, t] = load[ki]
                    continue
                u_real = load[ki] / cap_full
                if u_real < 1.0:
                    served[di][ki, t] = load[ki]
                    d = 1.0 / ((1.0 - u_real) * sp.s_rate)
                    delay[di][ki, t] = d
                    if d > sp.t_delay_ub + 1e-12:
                        violated[di][ki, t] = load[ki]
                else:
                    served[di][ki, t] = cap_full
                    dropped[di][ki, t] = load[ki] - cap_full
                    violated[di][ki, t] = load[ki]

    # realized emissions from the realized active counts
    operating_kg = 0.0
    embodied_kg = 0.0
    for di, dc_id in enumerate(solution.dc_ids):
        dc = scenario.dcs[scenario.dc_index(dc_id)]
        sp = dc.server_params
        idle_term = sp.p_idle + (dc.pue - 1.0) * sp.p_peak
        p_dc = np.zeros(T)
        for ki in range(act[di].shape[0]):
            fails = hw[di][ki] + sw[di][ki]
            p_dc += (idle_term * act[di][ki]
                     + u * (act[di][ki] - fails) * (sp.p_peak - sp.p_idle))
            ref = solution.cluster_refs[di][ki]
            inputs = EmbodiedModelInputs(
                c_manufacture=ref.c_manufacture, t_pc=ref.t_pc, t_fo=ref.t_fo,
                n_servers=ref.n_servers, active_counts=act[di][ki])
            embodied_kg += embodied_emission(inputs)
        grid = np.maximum(0.0, p_dc - solution.pv_used_kw[di]
                          - solution.batt_discharge_kw[di]
                          + solution.batt_charge_kw[di])
        operating_kg += float(np.dot(dc.carbon_intensity, grid))

    return TrialResult(
        seed_key=tuple(np.atleast_1d(seed)),
        hw_failures=hw, sw_failures=sw, realized_active=act,
        served=served, dropped=dropped, delay=delay, violated_load=violated,
        operating_kg=operating_kg, embodied_kg=embodied_kg)


@dataclass
class MonteCarloReport:
    n_trials: int
    sla_violation_rate: float         # workload-weighted, primary metric
    violation_rate_hours: float       # fraction of (dc, hour) cells violated
    dropped_workload: float           # mean req/s-hours dropped per trial
    delay_stats: dict                 # dc_id -> {mean, max, p99} seconds
    operating_kg: dict                # {mean, std, min, max}
    embodied_kg: dict
    per_hour_violations: np.ndarray = None   # (I, T) violated fraction

    def as_dict(self):
        return {
            "n_trials": self.n_trials,
            "sla_violation_rate": self.sla_violation_rate,
            "violation_rate_hours": self.violation_rate_hours,
            "dropped_workload": self.dropped_workload,
            "delay_stats": self.delay_stats,
            "operating_kg": self.operating_kg,
            "embodied_kg": self.embodied_kg,
            "per_hour_violations": None if self.per_hour_violations is None
            else self.per_hour_violations.tolist(),
        }


def _weighted_quantile(values, weights, q):
    order = np.argsort(values)
    values = np.asarray(values)[order]
    weights = np.asarray(weights)[order]
    cum = np.cumsum(weights)
    if cum[-1] <= 0:
        return float("nan")
    return float(values[np.searchsorted(cum, q * cum[-1], side="left")])


def monte_carlo(solution: DispatchSolution, scenario: Scenario,
                clusters_by_dc=None, n_trials=1000, seed=0) -> MonteCarloReport:
    """Aggregate run_trial over independent per-trial streams."""
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if clusters_by_dc is None:
        clusters_by_dc = clusters_from_solution(solution, scenario)
    n_dc = len(solution.dc_ids)

    tot_load = 0.0
    tot_violated = 0.0
    tot_dropped = 0.0
    cell_total = 0
    cell_violated = 0
    per_hour_v = np.zeros((n_dc, T))
    per_hour_w = np.zeros((n_dc, T))
    delays = [[] for _ in range(n_dc)]
    delay_w = [[] for _ in range(n_dc)]
    op_kg = np.zeros(n_trials)
    ec_kg = np.zeros(n_trials)

    for trial in range(n_trials):
        res = run_trial(solution, scenario, clusters_by_dc,
                        seed=(seed, trial))
        tot_load += res.total_load()
        tot_violated += res.total_violated()
        tot_dropped += res.total_dropped()
        op_kg[trial] = res.operating_kg
        ec_kg[trial] = res.embodied_kg
        for di in range(n_dc):
            v = res.violated_load[di].sum(axis=0)
            w = res.served[di].sum(axis=0) + res.dropped[di].sum(axis=0)
            per_hour_v[di] += v
            per_hour_w[di] += w
            cell_total += T
            cell_violated += int(np.count_nonzero(v > 1e-9))
            mask = np.isfinite(res.delay[di]) & (res.served[di] > 0)
            delays[di].append(res.delay[di][mask])
            delay_w[di].append(res.served[di][mask])

    delay_stats = {}
    for di, dc_id in enumerate(solution.dc_ids):
        vals = np.concatenate(delays[di]) if delays[di] else np.array([])
        wts = np.concatenate(delay_w[di]) if delay_w[di] else np.array([])
        if vals.size == 0:
            delay_stats[dc_id] = {"mean": float("nan"), "max": float("nan"),
                                  "p99": float("nan")}
        else:
            delay_stats[dc_id] = {
                "mean": float(np.average(vals, weights=wts)),
                "max": float(vals.max()),
                "p99": _weighted_quantile(vals, wts, 0.99),
            }

    with np.errstate(invalid="ignore", divide="ignore"):
        per_hour = np.where(per_hour_w > 0, per_hour_v / per_hour_w, 0.0)

    return MonteCarloReport(
        n_trials=n_trials,
        sla_violation_rate=tot_violated / max(tot_load, 1e-12),
        violation_rate_hours=cell_violated / max(cell_total, 1),
        dropped_workload=tot_dropped / n_trials,
        delay_stats=delay_stats,
        operating_kg={"mean": float(op_kg.mean()), "std": float(op_kg.std()),
                      "min": float(op_kg.min()), "max": float(op_kg.max())},
        embodied_kg={"mean": float(ec_kg.mean()), "std": float(ec_kg.std()),
                     "min": float(ec_kg.min()), "max": float(ec_kg.max())},
        per_hour_violations=per_hour,
    )
