"""Independent feasibility audit of a dispatch plan.

Recomputes every constraint family directly from the scenario data rather
than from the model rows: workload balances, cluster capacity, server-count
coupling, expected-failure fleet dynamics, the exact (table-based, not
relaxed) chance constraint, power balance and battery dynamics.  Used by
the solver before returning and by the test suite as the oracle-side gate.
"""

from __future__ import annotations

import numpy as np

from ..reliability import cluster_hourly_failure_probs, hourly_survival, \
    min_backups, server_reliability
from ..scenario import HORIZON_HOURS, Scenario

T = HORIZON_HOURS


def _tol(scale):
    return 1e-6 * max(1.0, abs(scale))


def check_solution(solution, scenario: Scenario, clusters_by_dc,
                   tol_scale=1.0):
    """Return a list of violation descriptions; empty means feasible."""
    problems = []
    u = solution.u
    migration_on = solution.mode != "m1"

    def err(msg):
        problems.append(msg)

    for (i_id, j_id), flow in solution.link_flows.items():
        cap = scenario.link_cap(i_id, j_id)
        if np.any(flow < -_tol(cap)) or np.any(flow > cap + _tol(cap)):
            err(f"link {i_id}->{j_id}: flow outside [0, {cap}]")
        if not migration_on and np.any(np.abs(flow) > 1e-6):
            err(f"link {i_id}->{j_id}: migration active in mode m1")

    for di, dc in enumerate(scenario.dcs):
        clusters = clusters_by_dc[dc.id]
        sp = dc.server_params
        n_p = solution.n_primary[di]
        n_b = solution.n_backup[di]
        n_a = solution.n_active[di]
        w_i = solution.w_interactive[di]
        w_b = solution.w_batch[di]

        if np.any(n_p < 0) or np.any(n_b < 0):
            err(f"dc {dc.id}: negative server counts")
        if np.any(n_p + n_b != n_a):
            err(f"dc {dc.id}: N^P + N^B != N^A")

        for ki, cl in enumerate(clusters):
            if np.any(n_a[ki] > cl.n_servers):
                err(f"dc {dc.id}, cluster {cl.id}: active exceeds fleet size")
            # capacity (workload vs primaries at the run utilization)
            cap = n_p[ki] * sp.s_rate * u
            over = w_i[ki] + w_b[ki] - cap
            bad = np.where(over > _tol(np.max(cap) if cap.size else 1.0)
                           * tol_scale)[0]
            for t in bad:
                err(f"dc {dc.id}, cluster {cl.id}, hour {t}: workload "
                    f"{w_i[ki, t] + w_b[ki, t]:.3f} exceeds primary capacity "
                    f"{cap[t]:.3f}")
            if np.any(w_i[ki] < -1e-6) or np.any(w_b[ki] < -1e-6):
                err(f"dc {dc.id}, cluster {cl.id}: negative workload share")

            # expected remaining fleet per the hardware-failure recursion
            q_hw, _ = cluster_hourly_failure_probs(cl, u, sp)
            cum = 0.0
            for t in range(T):
                cum += q_hw * n_a[ki, t]
                remaining = cl.n_servers - cum
                if n_a[ki, t] > remaining + _tol(cl.n_servers):
                    err(f"dc {dc.id}, cluster {cl.id}, hour {t}: active "
                        f"{n_a[ki, t]} exceeds expected remaining fleet "
                        f"{remaining:.3f}")

            # exact chance constraint from the binomial table
            p_server = server_reliability(cl, u, sp)
            for t in range(T):
                need = min_backups(int(n_a[ki, t]), p_server, scenario.p_thr)
                if n_b[ki, t] < need:
                    err(f"dc {dc.id}, cluster {cl.id}, hour {t}: backups "
                        f"{n_b[ki, t]} below exact requirement {need}")

        # workload balances
        net_out = solution.delta_wi(dc.id)
        target_i = dc.workload_interactive - net_out
        if np.any(target_i < -1e-6):
            err(f"dc {dc.id}: post-migration interactive workload negative")
        diff = np.abs(w_i.sum(axis=0) - target_i)
        if np.any(diff > _tol(np.max(dc.workload_interactive, initial=1.0))):
            err(f"dc {dc.id}: interactive assignment does not balance "
                f"(max gap {diff.max():.6f})")

        base = dc.workload_batch.mean() if migration_on else dc.workload_batch
        target_b = base + solution.delta_wb[di]
        if np.any(target_b < -1e-6):
            err(f"dc {dc.id}: post-shift batch workload negative")
        diff = np.abs(w_b.sum(axis=0) - target_b)
        if np.any(diff > _tol(np.max(dc.workload_batch, initial=1.0))):
            err(f"dc {dc.id}: batch assignment does not balance")
        if abs(solution.delta_wb[di].sum()) > _tol(dc.workload_batch.sum()):
            err(f"dc {dc.id}: batch shifts do not sum to zero over the day")
        if not migration_on and np.any(np.abs(solution.delta_wb[di]) > 1e-6):
            err(f"dc {dc.id}: batch shifting active in mode m1")

        # power balance and battery dynamics
        bat = dc.battery
        idle_term = sp.p_idle + (dc.pue - 1.0) * sp.p_peak
        p_dc = np.zeros(T)
        for ki, cl in enumerate(clusters):
            p_hour = hourly_survival(server_reliability(cl, u, sp))
            coeff = idle_term + u * p_hour * (sp.p_peak - sp.p_idle)
            p_dc += coeff * n_a[ki]
        supply = (solution.grid_kw[di] + solution.pv_used_kw[di]
                  + solution.batt_discharge_kw[di]
                  - solution.batt_charge_kw[di])
        gap = np.abs(supply - p_dc)
        if np.any(gap > _tol(np.max(p_dc, initial=1.0))):
            err(f"dc {dc.id}: power balance violated (max gap "
                f"{gap.max():.6f} kW)")
        if np.any(solution.grid_kw[di] < -1e-6):
            err(f"dc {dc.id}: grid import negative")
        if np.any(solution.pv_used_kw[di] > dc.pv_profile + 1e-6):
            err(f"dc {dc.id}: PV use exceeds the profile")
        if np.any(solution.pv_used_kw[di] < -1e-6):
            err(f"dc {dc.id}: PV use negative")
        for name, arr in (("charge", solution.batt_charge_kw[di]),
                          ("discharge", solution.batt_discharge_kw[di])):
            if np.any(arr < -1e-6) or np.any(arr > bat.power_kw + 1e-6):
                err(f"dc {dc.id}: battery {name} outside [0, rated power]")
        soc = bat.soc_initial
        for t in range(T):
            soc = soc + (bat.efficiency * solution.batt_charge_kw[di, t]
                         - solution.batt_discharge_kw[di, t] / bat.efficiency) \
                / bat.energy_kwh
            if abs(soc - solution.soc[di, t]) > 1e-6:
                err(f"dc {dc.id}, hour {t}: SOC recursion mismatch")
                soc = solution.soc[di, t]
            if not bat.soc_min - 1e-6 <= soc <= bat.soc_max + 1e-6:
                err(f"dc {dc.id}, hour {t}: SOC {soc:.4f} outside bounds")
        if scenario.cyclic_soc and soc < bat.soc_initial - 1e-6:
            err(f"dc {dc.id}: terminal SOC {soc:.4f} below initial "
                f"{bat.soc_initial}")

        if u > sp.u_ub + 1e-9:
            err(f"dc {dc.id}: run utilization {u} exceeds u_ub {sp.u_ub}")
        delay = 1.0 / ((1.0 - u) * sp.s_rate)
        if delay > sp.t_delay_ub + 1e-9:
            err(f"dc {dc.id}: planned delay {delay:.4f}s violates the SLA "
                f"bound {sp.t_delay_ub}s")

    # interactive workload conservation across DCs each hour
    total_net = np.zeros(T)
    for dc in scenario.dcs:
        total_net += solution.delta_wi(dc.id)
    if np.any(np.abs(total_net) > 1e-6):
        err("interactive migration does not conserve workload across DCs")

    return problems
