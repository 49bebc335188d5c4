"""Reformulation toolkit: SOS2 piecewise squares, McCormick boxes, and the
fractional embodied-carbon substitution.

All helpers mutate a model object exposing ``add_var``, ``add_constraint``
and ``add_sos2`` (see milp.model.MilpModel).  The fractional reformulation
follows the auxiliary-variable scheme (X, Y, Z, Q with an equality tying
them and envelope rows on the product), plus optional tangent cuts on Z.
The exact per-cluster emission z(x) = c x^2 / (t_pc x + n t_fo) is convex
in x, so its tangents are globally valid lower bounds; without them a
single envelope box leaves Z slack of tens of percent at interior dispatch
levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class LinExpr:
    """Sparse linear expression; duplicate variable ids are merged."""

    terms: dict = field(default_factory=dict)   # var id -> coefficient
    constant: float = 0.0

    @classmethod
    def from_pairs(cls, pairs, constant=0.0):
        expr = cls(constant=constant)
        for var, coef in pairs:
            expr.add(var, coef)
        return expr

    def add(self, var, coef):
        new = self.terms.get(var, 0.0) + coef
        if new == 0.0:
            self.terms.pop(var, None)
        else:
            self.terms[var] = new
        return self

    def value(self, x):
        return self.constant + sum(c * x[v] for v, c in self.terms.items())


@dataclass(frozen=True)
class PiecewiseSpec:
    """Handles of one piecewise-square block."""

    x_var: int
    y_var: int
    lam_vars: tuple
    breakpoints: tuple
    sos2_id: int

    def chord_value(self, x):
        """Y at an SOS2-honored point: interpolation of the squares."""
        xs = np.asarray(self.breakpoints)
        return float(np.interp(x, xs, xs ** 2))


@dataclass(frozen=True)
class McCormickSpec:
    x: int
    z: int
    q: int
    x_min: float
    x_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.z_min < self.z_max):
            raise ValueError("McCormick bounds must satisfy min < max")


def add_piecewise_square(model, x_var, x_min, x_max, segments):
    """Couple a new Y variable to X^2 through an SOS2 interpolation.

    Uniform breakpoints on [x_min, x_max]; at SOS2-honored points
    |Y - X^2| is at most (segment width)^2 / 4.
    """
    if not x_min < x_max:
        raise ValueError("x_min must be < x_max")
    if segments < 1:
        raise ValueError("segments must be >= 1")
    xs = tuple(np.linspace(x_min, x_max, segments + 1))
    name = model.var_name(x_var)
    y_var = model.add_var(f"{name}_sq", lb=min(x ** 2 for x in xs),
                          ub=max(x ** 2 for x in xs))
    lam = tuple(model.add_var(f"{name}_lam{l}", lb=0.0, ub=1.0)
                for l in range(segments + 1))
    model.add_constraint([(v, 1.0) for v in lam], "==", 1.0,
                         name=f"{name}_pw_convex")
    model.add_constraint([(v, x) for v, x in zip(lam, xs)] + [(x_var, -1.0)],
                         "==", 0.0, name=f"{name}_pw_x")
    model.add_constraint([(v, x * x) for v, x in zip(lam, xs)] + [(y_var, -1.0)],
                         "==", 0.0, name=f"{name}_pw_y")
    sos2_id = model.add_sos2(lam, weights=tuple(range(1, segments + 2)),
                             name=f"{name}_sos2")
    return PiecewiseSpec(x_var=x_var, y_var=y_var, lam_vars=lam,
                         breakpoints=xs, sos2_id=sos2_id)


def add_mccormick(model, spec: McCormickSpec):
    """Four envelope rows making q track the product x*z over the box."""
    x, z, q = spec.x, spec.z, spec.q
    xl, xu, zl, zu = spec.x_min, spec.x_max, spec.z_min, spec.z_max
    # q >= xl*z + x*zl - xl*zl
    model.add_constraint([(q, -1.0), (z, xl), (x, zl)], "<=", xl * zl,
                         name=f"mc_lo1_q{q}")
    # q >= xu*z + x*zu - xu*zu
    model.add_constraint([(q, -1.0), (z, xu), (x, zu)], "<=", xu * zu,
                         name=f"mc_lo2_q{q}")
    # q <= xu*z + x*zl - xu*zl
    model.add_constraint([(q, 1.0), (z, -xu), (x, -zl)], "<=", -xu * zl,
                         name=f"mc_up1_q{q}")
    # q <= xl*z + x*zu - xl*zu
    model.add_constraint([(q, 1.0), (z, -xl), (x, -zu)], "<=", -xl * zu,
                         name=f"mc_up2_q{q}")


@dataclass(frozen=True)
class EmbodiedClusterBounds:
    """Fixed per-cluster data of the fractional embodied term."""

    c_manufacture: float
    t_pc: float
    t_fo: float
    n_servers: float
    x_min: float = 0.0
    x_max: float = None

    def __post_init__(self):
        if self.t_fo <= 0 and self.t_pc * self.x_min <= 0:
            raise ValueError("denominator must be positive at x_min")
        if self.x_max is None:
            object.__setattr__(self, "x_max", float(self.n_servers))
        if not 0 <= self.x_min < self.x_max:
            raise ValueError("need 0 <= x_min < x_max")

    def exact(self, x):
        """z(x) = c x^2 / (t_pc x + n t_fo)."""
        x = np.asarray(x, dtype=float)
        denom = self.t_pc * x + self.t_fo * self.n_servers
        with np.errstate(invalid="ignore", divide="ignore"):
            val = np.where(x == 0.0, 0.0,
                           self.c_manufacture * x * x / denom)
        return float(val) if val.ndim == 0 else val

    def slope(self, x):
        """dz/dx = c x (t_pc x + 2 n t_fo) / (t_pc x + n t_fo)^2."""
        b = self.t_fo * self.n_servers
        denom = self.t_pc * x + b
        return self.c_manufacture * x * (self.t_pc * x + 2 * b) / denom ** 2

    def z_range(self):
        return self.exact(self.x_min), self.exact(self.x_max)


def tangent_grid(bounds: EmbodiedClusterBounds, ratio=1.25,
                 min_positive_x=1.0 / 24.0):
    """Geometric tangency abscissae; dense at small x where z is most curved."""
    start = max(bounds.x_min, min_positive_x)
    if start >= bounds.x_max:
        return (bounds.x_max,)
    xs = [start]
    while xs[-1] * ratio < bounds.x_max:
        xs.append(xs[-1] * ratio)
    xs.append(bounds.x_max)
    return tuple(xs)


@dataclass(frozen=True)
class EmbodiedReformulation:
    z_var: int
    q_var: int            # -1 when the bilinear term vanishes (t_pc == 0)
    bounds: EmbodiedClusterBounds
    tangent_xs: tuple
    breakpoints: tuple


def add_fractional_embodied(model, x_var, piecewise: PiecewiseSpec,
                            bounds: EmbodiedClusterBounds, *,
                            tangent_ratio=1.25, min_positive_x=1.0 / 24.0,
                            tangents=True):
    """Introduce Z contributing the cluster's daily embodied emission.

    Adds the equality t_pc*Q + n*t_fo*Z = c*Y with Q boxed by a McCormick
    envelope of X*Z, variable bounds on Z from evaluating the fraction at
    the X extremes, and tangent cuts of the exact convex z(x).  When
    t_pc == 0 the equality is already linear and no envelope is needed.
    """
    y_var = piecewise.y_var
    z_lb, z_ub = bounds.z_range()
    name = model.var_name(x_var)
    z_var = model.add_var(f"{name}_emb", lb=z_lb, ub=z_ub)

    cm, tpc, tfo, n = (bounds.c_manufacture, bounds.t_pc, bounds.t_fo,
                       bounds.n_servers)
    q_var = -1
    if tpc == 0.0:
        # n*t_fo*Z = c*Y
        model.add_constraint([(z_var, n * tfo), (y_var, -cm)], "==", 0.0,
                             name=f"{name}_emb_eq")
    else:
        corners = [bounds.x_min * z_lb, bounds.x_min * z_ub,
                   bounds.x_max * z_lb, bounds.x_max * z_ub]
        q_var = model.add_var(f"{name}_embq", lb=min(corners), ub=max(corners))
        model.add_constraint([(q_var, tpc), (z_var, n * tfo), (y_var, -cm)],
                             "==", 0.0, name=f"{name}_emb_eq")
        if z_lb == z_ub:
            # degenerate box; pin the product directly
            model.add_constraint([(q_var, 1.0), (x_var, -z_lb)], "==", 0.0,
                                 name=f"{name}_emb_qpin")
        else:
            add_mccormick(model, McCormickSpec(
                x=x_var, z=z_var, q=q_var,
                x_min=bounds.x_min, x_max=bounds.x_max,
                z_min=z_lb, z_max=z_ub))

    xs = ()
    if tangents:
        xs = tangent_grid(bounds, tangent_ratio, min_positive_x)
        for i, x0 in enumerate(xs):
            slope = bounds.slope(x0)
            intercept = bounds.exact(x0) - slope * x0
            # z >= slope*x + intercept
            model.add_constraint([(z_var, -1.0), (x_var, slope)], "<=",
                                 -intercept, name=f"{name}_emb_tan{i}")
    return EmbodiedReformulation(z_var=z_var, q_var=q_var, bounds=bounds,
                                 tangent_xs=xs, breakpoints=piecewise.breakpoints)


def _chord(breakpoints, x):
    xs = np.asarray(breakpoints)
    return np.interp(x, xs, xs ** 2)


def embodied_z_interval(reform: EmbodiedReformulation, x):
    """Feasible [z_lo, z_hi] at an SOS2-honored X (Y pinned to the chord).

    Closed-form elimination of Q from the equality against the envelope
    rows; a minimizing solver lands on z_lo.
    """
    b = reform.bounds
    cm, tpc, tfo, n = b.c_manufacture, b.t_pc, b.t_fo, b.n_servers
    z_lb, z_ub = b.z_range()
    y = _chord(reform.breakpoints, x)
    x = np.asarray(x, dtype=float)

    if tpc == 0.0:
        z = cm * y / (n * tfo)
        return z, z

    nf = n * tfo
    # upper rows on Q give lower bounds on Z
    lo = np.maximum(cm * y / (n * tpc + nf),                 # Q <= x_max * Z
                    (cm * y - tpc * x * z_ub) / nf)          # Q <= x * z_ub
    lo = np.maximum(lo, z_lb)
    for x0 in reform.tangent_xs:
        slope = b.slope(x0)
        lo = np.maximum(lo, b.exact(x0) + slope * (x - x0))
    # lower rows on Q give upper bounds on Z
    hi1 = (cm * y - tpc * (x * z_lb - b.x_min * z_lb)) / (nf + tpc * b.x_min)
    hi2 = (cm * y + tpc * (b.x_max * z_ub - x * z_ub)) / (nf + tpc * b.x_max)
    hi = np.minimum(np.minimum(hi1, hi2), z_ub)
    return lo, hi


def embodied_minimizer_bound(reform: EmbodiedReformulation, grid_step=1.0 / 24.0):
    """A-priori bound on |Z - exact| for minimizing solves, over feasible X.

    X is a sum of 24 integer hourly counts divided by 24, so it ranges over
    multiples of 1/24; the bound is the max deviation of the feasible-Z
    floor from the exact fraction over that grid.
    """
    b = reform.bounds
    xs = np.arange(math.ceil(b.x_min / grid_step),
                   math.floor(b.x_max / grid_step) + 1) * grid_step
    if len(xs) == 0:
        xs = np.array([b.x_min, b.x_max])
    lo, _ = embodied_z_interval(reform, xs)
    return float(np.max(np.abs(lo - b.exact(xs))))


def sos2_to_binaries(model, sos2_id):
    """Replace an SOS2 marking with the binary segment encoding.

    One binary per segment; each weight may be positive only when an
    adjacent segment is selected, and exactly one segment is selected.
    """
    var_ids, _ = model.sos2_sets[sos2_id]
    n_pts = len(var_ids)
    segs = [model.add_var(f"sos2seg{sos2_id}_{s}", lb=0.0, ub=1.0, integer=True)
            for s in range(max(1, n_pts - 1))]
    model.add_constraint([(s, 1.0) for s in segs], "==", 1.0,
                         name=f"sos2bin{sos2_id}_one")
    for l, lam in enumerate(var_ids):
        adjacent = []
        if l - 1 >= 0 and l - 1 < len(segs):
            adjacent.append(segs[l - 1])
        if l < len(segs):
            adjacent.append(segs[l])
        model.add_constraint([(lam, 1.0)] + [(s, -1.0) for s in adjacent],
                             "<=", 0.0, name=f"sos2bin{sos2_id}_lam{l}")
    model.remove_sos2(sos2_id)
    return segs
