"""Bundled MILP solver: best-first branch and bound over HiGHS LP relaxations.

Branching handles three kinds of violation, in priority order: fractional
integer variables (most-fractional first), SOS2 sets with non-adjacent
support (split at the weighted midpoint), and chance-table deficits, where
the integer point satisfies the LP's convex-envelope backup rows but not the
exact binomial table.  The table disjunction (N^A <= m) or (N^A >= m+1 and
N^B >= table[m+1]) is exact and finite, so accepted incumbents always meet
the exact chance constraint.

A repair dive builds early incumbents: round primaries up, set backups to
the exact table fixed point, fix all counts and re-solve the LP for the
continuous variables.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .model import INT_TOL, DispatchSolution, MilpModel, extract_solution

LAMBDA_TOL = 1e-7


class InfeasibleError(RuntimeError):
    """The instance admits no feasible dispatch."""


class SolverError(RuntimeError):
    pass


@dataclass
class SolveLimits:
    time_s: float = 120.0
    mip_gap: float = 1e-4
    node_limit: int = 200000


class ScipyLpBackend:
    """LP relaxation backend over scipy's HiGHS (bounded-variable simplex).

    Any object with the same ``solve_lp`` signature can serve as a backend,
    which is the extension point for plugging external LP codes.
    """

    method = "highs"

    def solve_lp(self, c, a_ub, b_ub, a_eq, b_eq, lb, ub):
        kwargs = dict(
            A_ub=a_ub if a_ub.shape[0] else None,
            b_ub=b_ub if a_ub.shape[0] else None,
            A_eq=a_eq if a_eq.shape[0] else None,
            b_eq=b_eq if a_eq.shape[0] else None,
            bounds=np.column_stack([lb, ub]))
        res = linprog(c, method=self.method, **kwargs)
        if res.status == 4:
            # HiGHS sometimes reports Unknown when presolve proves a node
            # infeasible; a dual-simplex retry settles it
            res = linprog(c, method="highs-ds",
                          options={"presolve": False}, **kwargs)
            if res.status == 4 and "infeasible" in str(res.message).lower():
                res.status = 2
        return res


@dataclass(order=True)
class _Node:
    bound: float
    seq: int
    patches: dict = field(compare=False)   # var id -> (lb, ub)
    x: np.ndarray = field(compare=False)


@dataclass
class BnBResult:
    status: str
    x: np.ndarray = None
    objective: float = math.nan
    bound: float = math.nan
    gap: float = math.inf
    nodes: int = 0
    wall_s: float = 0.0


def _most_fractional(x, int_vars):
    best, best_score = None, INT_TOL
    for v in int_vars:
        frac = abs(x[v] - round(x[v]))
        score = min(frac, 1.0 - frac)
        if score > best_score:
            best, best_score = v, score
    return best


def _sos2_violation(model, x):
    for sid, (var_ids, _) in model.sos2_sets.items():
        nz = [l for l, v in enumerate(var_ids) if x[v] > LAMBDA_TOL]
        if len(nz) <= 1:
            continue
        if len(nz) == 2 and nz[1] - nz[0] == 1:
            continue
        total = sum(x[var_ids[l]] for l in nz)
        pos = sum(l * x[var_ids[l]] for l in nz) / total
        r = int(min(max(math.floor(pos), nz[0] + 1), nz[-1] - 1))
        return sid, var_ids, r
    return None


def _table_violation(model, x):
    tables = model.info.get("backup_tables")
    if not tables:
        return None
    for na_v, nb_v, di, ki in model.info.get("chance_pairs", ()):
        na = int(round(x[na_v]))
        nb = int(round(x[nb_v]))
        counts = tables[di][ki].counts
        if na <= len(counts) - 1 and nb < counts[na]:
            # largest m with counts[m] <= nb; counts is non-decreasing
            m = int(np.searchsorted(counts, nb, side="right")) - 1
            return na_v, nb_v, m, int(counts[m + 1])
    return None


def exact_backup_fixpoint(n_primary, counts):
    """Smallest N^B covering the table applied to N^P + N^B, or None."""
    n_max = len(counts) - 1
    nb = int(counts[min(n_primary, n_max)])
    while True:
        na = n_primary + nb
        if na > n_max:
            return None
        need = int(counts[na])
        if need <= nb:
            return nb
        nb = need


class BranchAndBound:
    def __init__(self, model: MilpModel, backend=None, limits=None):
        self.model = model
        self.backend = backend or ScipyLpBackend()
        self.limits = limits or SolveLimits()
        self.c = model.objective_vector()
        self.a_ub, self.b_ub, self.a_eq, self.b_eq = model.constraint_arrays()
        self.lb0, self.ub0 = model.bounds_arrays()
        self.int_vars = model.integer_vars
        self.nodes = 0
        self._seq = 0

    def _solve_lp(self, patches):
        lb = self.lb0.copy()
        ub = self.ub0.copy()
        for var, (plb, pub) in patches.items():
            lb[var] = max(lb[var], plb)
            ub[var] = min(ub[var], pub)
        if np.any(lb > ub + 1e-12):
            return None
        res = self.backend.solve_lp(self.c, self.a_ub, self.b_ub,
                                    self.a_eq, self.b_eq, lb, ub)
        if res.status == 2:
            return None
        if res.status != 0:
            raise SolverError(f"LP relaxation failed with status {res.status}: "
                              f"{res.message}")
        return res

    # -- repair dive ---------------------------------------------------------

    def _repair_embodied(self, x):
        """Recompute lambda/Y/Z/Q from the fixed X so SOS2 and rows hold."""
        from .. import linearize

        for (dc_id, cl_id), (x_var, pw, reform) in \
                self.model.info.get("embodied", {}).items():
            xs = np.asarray(pw.breakpoints)
            xval = float(x[x_var])
            xval = min(max(xval, xs[0]), xs[-1])
            seg = int(np.clip(np.searchsorted(xs, xval) - 1, 0, len(xs) - 2))
            width = xs[seg + 1] - xs[seg]
            lam_hi = (xval - xs[seg]) / width
            for l, lam_var in enumerate(pw.lam_vars):
                x[lam_var] = 0.0
            x[pw.lam_vars[seg]] = 1.0 - lam_hi
            x[pw.lam_vars[seg + 1]] = lam_hi
            y = (1.0 - lam_hi) * xs[seg] ** 2 + lam_hi * xs[seg + 1] ** 2
            x[pw.y_var] = y
            z_lo, _ = linearize.embodied_z_interval(reform, xval)
            z = float(z_lo)
            x[reform.z_var] = z
            if reform.q_var >= 0:
                b = reform.bounds
                x[reform.q_var] = ((b.c_manufacture * y
                                    - b.n_servers * b.t_fo * z) / b.t_pc)

    def _dive(self, x):
        """Round counts up, set backups to the exact fixed point, re-solve."""
        info = self.model.info
        tables = info.get("backup_tables")
        idx = info.get("idx")
        if tables is None or idx is None:
            return None
        patches = {}
        for di in range(len(idx["np"])):
            np_ids, nb_ids, na_ids = idx["np"][di], idx["nb"][di], idx["na"][di]
            for ki in range(np_ids.shape[0]):
                counts = tables[di][ki].counts
                for t in range(np_ids.shape[1]):
                    n_p = int(math.ceil(x[np_ids[ki, t]] - 1e-9))
                    n_b = exact_backup_fixpoint(n_p, counts)
                    if n_b is None:
                        return None
                    lp_nb = x[nb_ids[ki, t]]
                    if lp_nb > n_b:
                        # keep any extra backups the relaxation already pays for
                        n_b2 = int(math.ceil(lp_nb - 1e-9))
                        if n_p + n_b2 <= len(counts) - 1:
                            n_b = max(n_b, min(n_b2, len(counts) - 1 - n_p))
                    patches[int(np_ids[ki, t])] = (n_p, n_p)
                    patches[int(nb_ids[ki, t])] = (n_b, n_b)
                    patches[int(na_ids[ki, t])] = (n_p + n_b, n_p + n_b)
        res = self._solve_lp(patches)
        if res is None:
            return None
        x_h = np.array(res.x)
        self._repair_embodied(x_h)
        if self._violations(x_h):
            return None
        return x_h

    def _violations(self, x):
        """True when x is not integer-SOS2-table feasible."""
        if _most_fractional(x, self.int_vars) is not None:
            return True
        if _sos2_violation(self.model, x) is not None:
            return True
        if _table_violation(self.model, x) is not None:
            return True
        return False

    # -- main loop -----------------------------------------------------------

    def run(self) -> BnBResult:
        t0 = time.monotonic()
        limits = self.limits
        res = self._solve_lp({})
        if res is None:
            return BnBResult(status="infeasible")
        incumbent = math.inf
        best_x = None

        x_h = self._dive(np.array(res.x))
        if x_h is not None:
            incumbent = float(self.c @ x_h)
            best_x = x_h

        heap = []
        self._seq += 1
        heapq.heappush(heap, _Node(float(res.fun), self._seq, {},
                                   np.array(res.x)))
        self.nodes = 1
        lower = float(res.fun)

        def gap_of(inc, low):
            if not math.isfinite(inc):
                return math.inf
            return (inc - low) / max(abs(inc), 1e-9)

        status = "optimal"
        while heap:
            if time.monotonic() - t0 > limits.time_s:
                status = "limit"
                break
            if self.nodes >= limits.node_limit:
                status = "limit"
                break
            node = heapq.heappop(heap)
            lower = node.bound
            if gap_of(incumbent, lower) <= limits.mip_gap:
                lower = min(lower, incumbent)
                break
            x = node.x

            branches = None
            v = _most_fractional(x, self.int_vars)
            if v is not None:
                lo = math.floor(x[v])
                branches = [{v: (self.lb0[v], float(lo))},
                            {v: (float(lo + 1), self.ub0[v])}]
            else:
                sos = _sos2_violation(self.model, x)
                if sos is not None:
                    sid, var_ids, r = sos
                    left = {var_ids[l]: (0.0, 0.0)
                            for l in range(r + 1, len(var_ids))}
                    right = {var_ids[l]: (0.0, 0.0) for l in range(r)}
                    branches = [left, right]
                else:
                    tab = _table_violation(self.model, x)
                    if tab is not None:
                        na_v, nb_v, m, need = tab
                        branches = [{na_v: (self.lb0[na_v], float(m))},
                                    {na_v: (float(m + 1), self.ub0[na_v]),
                                     nb_v: (float(need), self.ub0[nb_v])}]

            if branches is None:
                # integer, SOS2-honored, table-exact: candidate incumbent
                obj = float(self.c @ x)
                if obj < incumbent - 1e-12:
                    incumbent = obj
                    best_x = x
                continue

            for patch in branches:
                child = dict(node.patches)
                for var, (plb, pub) in patch.items():
                    old = child.get(var, (self.lb0[var], self.ub0[var]))
                    child[var] = (max(old[0], plb), min(old[1], pub))
                res = self._solve_lp(child)
                self.nodes += 1
                if res is None:
                    continue
                bound = float(res.fun)
                if bound >= incumbent - 1e-12:
                    continue
                self._seq += 1
                heapq.heappush(heap, _Node(bound, self._seq, child,
                                           np.array(res.x)))
            if self.nodes % 400 == 0 and best_x is None:
                x_h = self._dive(x)
                if x_h is not None:
                    obj = float(self.c @ x_h)
                    if obj < incumbent:
                        incumbent, best_x = obj, x_h
        else:
            # heap exhausted: the incumbent is proven optimal
            lower = incumbent

        wall = time.monotonic() - t0
        if best_x is None:
            return BnBResult(status="infeasible" if status == "optimal"
                             else "no_solution",
                             nodes=self.nodes, wall_s=wall)
        if heap and status == "optimal":
            lower = min(lower, min(n.bound for n in heap))
        return BnBResult(status=status, x=best_x, objective=incumbent,
                         bound=lower, gap=gap_of(incumbent, lower),
                         nodes=self.nodes, wall_s=wall)


def solve(model: MilpModel, backend=None, limits=None) -> DispatchSolution:
    """Solve a built dispatch model and return a verified DispatchSolution.

    Raises InfeasibleError when no integer-feasible dispatch exists.  The
    returned solution has been passed through the independent feasibility
    checker (exact chance tables included) before being handed back.
    """
    from .check import check_solution

    limits = limits or SolveLimits()
    bnb = BranchAndBound(model, backend=backend, limits=limits)
    result = bnb.run()
    if result.status == "infeasible":
        raise InfeasibleError(
            "no feasible dispatch: workload, backup and battery rows cannot "
            "all hold; first structural suspect is fleet capacity at the "
            "peak hour (build-time checks passed, so interactions between "
            "remaining-fleet dynamics and backup sizing are binding)")
    if result.x is None:
        raise SolverError(f"no incumbent found within limits "
                          f"(status={result.status}, nodes={result.nodes})")
    status = "optimal" if result.status == "optimal" else "limit"
    solution = extract_solution(
        model, result.x, status, result.gap,
        solver_stats={"nodes": result.nodes, "wall_s": result.wall_s,
                      "bound": result.bound})
    scenario = model.info.get("scenario_obj")
    clusters = model.info.get("clusters")
    if scenario is not None and clusters is not None:
        problems = check_solution(solution, scenario,
                                  {dc.id: cls for dc, cls in
                                   zip(scenario.dcs, clusters)})
        if problems:
            raise SolverError("solver returned an infeasible solution: "
                              + "; ".join(problems[:5]))
    return solution
