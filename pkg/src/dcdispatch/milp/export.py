"""Model export to free-format MPS and CPLEX-style LP files.

Both writers emit SOS2 sections with the set weights (breakpoint indices),
so exported files can be fed unchanged to mainstream external solvers.
"""

from __future__ import annotations

import math
from pathlib import Path

from .model import MilpModel


def _clean(name):
    out = "".join(ch if ch.isalnum() or ch in "_.[]" else "_" for ch in name)
    return out or "r"


def _num(value):
    return f"{value:.12g}"


def write_mps(model: MilpModel, path):
    lines = [f"NAME          {_clean(model.name)}"]
    lines.append("ROWS")
    lines.append(" N  OBJ")
    sense_tag = {"<=": "L", ">=": "G", "==": "E"}
    row_names = []
    for r, con in enumerate(model.constraints):
        rname = _clean(con.name) if con.name else f"c{r}"
        row_names.append(rname)
        lines.append(f" {sense_tag[con.sense]}  {rname}")

    # column-major coefficient listing
    by_var = [[] for _ in range(model.n_vars)]
    for var, coef in model.objective.terms.items():
        by_var[var].append(("OBJ", coef))
    for r, con in enumerate(model.constraints):
        for var, coef in con.terms.items():
            by_var[var].append((row_names[r], coef))

    lines.append("COLUMNS")
    in_int = False
    marker = 0
    for vid, vdef in enumerate(model.variables):
        if vdef.integer != in_int:
            tag = "'INTORG'" if vdef.integer else "'INTEND'"
            lines.append(f"    MARKER{marker}    'MARKER'    {tag}")
            in_int = vdef.integer
            marker += 1
        vname = _clean(vdef.name)
        entries = by_var[vid]
        if not entries:
            lines.append(f"    {vname}  OBJ  0")
            continue
        for row, coef in entries:
            lines.append(f"    {vname}  {row}  {_num(coef)}")
    if in_int:
        lines.append(f"    MARKER{marker}    'MARKER'    'INTEND'")

    lines.append("RHS")
    for r, con in enumerate(model.constraints):
        if con.rhs != 0.0:
            lines.append(f"    RHS  {row_names[r]}  {_num(con.rhs)}")

    lines.append("BOUNDS")
    for vdef in model.variables:
        vname = _clean(vdef.name)
        lb, ub = vdef.lb, vdef.ub
        if lb == ub:
            lines.append(f" FX BND  {vname}  {_num(lb)}")
            continue
        if math.isinf(lb) and math.isinf(ub):
            lines.append(f" FR BND  {vname}")
            continue
        if math.isinf(lb):
            lines.append(f" MI BND  {vname}")
        elif lb != 0.0:
            lines.append(f" LO BND  {vname}  {_num(lb)}")
        if not math.isinf(ub):
            lines.append(f" UP BND  {vname}  {_num(ub)}")

    if model.sos2_sets:
        lines.append("SOS")
        for si, (sid, (var_ids, weights)) in enumerate(model.sos2_sets.items()):
            sname = _clean(model.sos2_names.get(sid, f"s{sid}"))
            lines.append(f" S2 SOS  {sname}  {si + 1}")
            for var, w in zip(var_ids, weights):
                lines.append(f"    {_clean(model.var_name(var))}  {_num(w)}")

    lines.append("ENDATA")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def _lp_expr(terms):
    parts = []
    for var_name, coef in terms:
        sign = "-" if coef < 0 else "+"
        parts.append(f"{sign} {_num(abs(coef))} {var_name}")
    if not parts:
        return "0"
    out = " ".join(parts)
    return out[2:] if out.startswith("+ ") else out


def write_lp(model: MilpModel, path):
    lines = ["\\ " + _clean(model.name), "Minimize"]
    obj_terms = [(_clean(model.var_name(v)), c)
                 for v, c in sorted(model.objective.terms.items())]
    lines.append(" obj: " + _lp_expr(obj_terms))
    lines.append("Subject To")
    sense_tag = {"<=": "<=", ">=": ">=", "==": "="}
    for r, con in enumerate(model.constraints):
        rname = _clean(con.name) if con.name else f"c{r}"
        terms = [(_clean(model.var_name(v)), c)
                 for v, c in sorted(con.terms.items())]
        lines.append(f" {rname}: {_lp_expr(terms)} {sense_tag[con.sense]} "
                     f"{_num(con.rhs)}")
    lines.append("Bounds")
    for vdef in model.variables:
        vname = _clean(vdef.name)
        lb = "-inf" if math.isinf(vdef.lb) else _num(vdef.lb)
        ub = "+inf" if math.isinf(vdef.ub) else _num(vdef.ub)
        if vdef.lb == vdef.ub:
            lines.append(f" {vname} = {_num(vdef.lb)}")
        else:
            lines.append(f" {lb} <= {vname} <= {ub}")
    generals = [_clean(v.name) for v in model.variables if v.integer]
    if generals:
        lines.append("General")
        for name in generals:
            lines.append(f" {name}")
    if model.sos2_sets:
        lines.append("SOS")
        for sid, (var_ids, weights) in model.sos2_sets.items():
            sname = _clean(model.sos2_names.get(sid, f"s{sid}"))
            entries = " ".join(f"{_clean(model.var_name(v))}:{_num(w)}"
                               for v, w in zip(var_ids, weights))
            lines.append(f" {sname}: S2:: {entries}")
    lines.append("End")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def export_model(model: MilpModel, path, fmt="mps"):
    """Write the model in 'mps' or 'lp' format; returns the path written."""
    fmt = fmt.lower()
    if fmt == "mps":
        return write_mps(model, path)
    if fmt == "lp":
        return write_lp(model, path)
    raise ValueError(f"unknown export format {fmt!r} (use 'mps' or 'lp')")
