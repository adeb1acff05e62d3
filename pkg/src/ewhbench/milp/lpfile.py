"""CPLEX-style LP text export and a reader for the same subset."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .model import MilpModel, SparseLp

_LINE = 200
_SENSE = {"<=": "<=", "=<": "<=", "<": "<=", ">=": ">=", "=>": ">=", ">": ">=", "=": "="}


def _num(v: float) -> str:
    if v == math.inf:
        return "inf"
    if v == -math.inf:
        return "-inf"
    return repr(float(v))


def _terms(pairs) -> list[str]:
    out = []
    for name, v in pairs:
        out.append("-" if v < 0 or (v == 0 and math.copysign(1.0, v) < 0) else "+")
        out.append(_num(abs(v)))
        out.append(name)
    return out


def _wrap(head: str, tokens: list[str]) -> list[str]:
    lines, cur = [], head
    for t in tokens:
        if len(cur) + len(t) + 1 > _LINE:
            lines.append(cur)
            cur = "   "
        cur += " " + t
    lines.append(cur)
    return lines


def export_lp(model: MilpModel | SparseLp, path: str | Path) -> None:
    """Write the model in LP text format (minimize, subject to, bounds, binaries).

    Every column appears in the objective, zero coefficients included, so a
    reader recovers the column order.
    """
    lp = model.to_sparse() if isinstance(model, MilpModel) else model
    m, n = lp.shape
    if n == 0:
        raise ValueError("model has no columns")
    names = lp.col_names or [f"x{j}" for j in range(n)]
    rnames = lp.row_names or [f"r{i}" for i in range(m)]
    order = np.lexsort((lp.cols, lp.rows))
    rows, cols, vals = lp.rows[order], lp.cols[order], lp.vals[order]
    starts = np.searchsorted(rows, np.arange(m + 1))

    out = ["\\ block-scheduled water heater MILP", "Minimize"]
    obj = _terms((names[j], lp.c[j]) for j in range(n))
    if lp.obj_const:
        obj += ["+" if lp.obj_const > 0 else "-", _num(abs(lp.obj_const))]
    out += _wrap(" obj:", obj)
    out.append("Subject To")
    for i in range(m):
        seg = slice(starts[i], starts[i + 1])
        terms = _terms((names[j], v) for j, v in zip(cols[seg], vals[seg]))
        lo, hi = lp.row_lo[i], lp.row_hi[i]
        if lo == hi:
            tail = ["=", _num(hi)]
        elif math.isinf(lo) and math.isinf(hi):
            tail = [">=", "-inf"]
        elif math.isinf(lo):
            tail = ["<=", _num(hi)]
        elif math.isinf(hi):
            tail = [">=", _num(lo)]
        else:
            # ranged row: lower bound is written before the expression
            out += _wrap(f" {rnames[i]}: {_num(lo)} <=", terms + ["<=", _num(hi)])
            continue
        out += _wrap(f" {rnames[i]}:", terms + tail)
    out.append("Bounds")
    for j in range(n):
        lo, hi = lp.col_lo[j], lp.col_hi[j]
        if lp.integer[j] and lo == 0 and hi == 1:
            continue
        if lo == 0 and hi == math.inf:
            continue
        if math.isinf(lo) and math.isinf(hi):
            out.append(f" {names[j]} free")
        else:
            out.append(f" {_num(lo)} <= {names[j]} <= {_num(hi)}")
    binaries = [names[j] for j in range(n) if lp.integer[j]]
    if binaries:
        out.append("Binaries")
        out += _wrap("", binaries)
    out.append("End")
    Path(path).write_text("\n".join(out) + "\n")


def _parse_value(tok: str) -> float:
    t = tok.lower()
    if t in ("inf", "+inf", "infinity", "+infinity"):
        return math.inf
    if t in ("-inf", "-infinity"):
        return -math.inf
    return float(tok)


def _is_number(tok: str) -> bool:
    try:
        _parse_value(tok)
        return True
    except ValueError:
        return False


def _linear(tokens: list[str]) -> tuple[list[tuple[str, float]], float]:
    """Parse ``[+|-] [coef] name ...`` into terms plus a constant."""
    terms, const = [], 0.0
    i = 0
    while i < len(tokens):
        sign = 1.0
        while i < len(tokens) and tokens[i] in "+-":
            sign = -sign if tokens[i] == "-" else sign
            i += 1
        if i >= len(tokens):
            break
        coef = 1.0
        if _is_number(tokens[i]):
            coef = _parse_value(tokens[i])
            i += 1
            if i >= len(tokens) or tokens[i] in "+-":
                const += sign * coef
                continue
        terms.append((tokens[i], sign * coef))
        i += 1
    return terms, const


def read_lp(path: str | Path) -> SparseLp:
    """Parse the LP subset written by :func:`export_lp`."""
    sections: dict[str, list[str]] = {"obj": [], "st": [], "bounds": [], "bin": []}
    heads = {"minimize": "obj", "minimise": "obj", "min": "obj", "subject to": "st", "st": "st",
             "s.t.": "st", "such that": "st", "bounds": "bounds", "bound": "bounds", "binaries": "bin",
             "binary": "bin", "bin": "bin", "end": None,
             "maximize": "obj", "maximise": "obj", "max": "obj"}
    cur = None
    for raw in Path(path).read_text().splitlines():
        line = raw.split("\\", 1)[0].strip()
        if not line:
            continue
        key = line.lower()
        if key in heads:
            cur = heads[key]
            if key in ("maximize", "maximise", "max"):
                raise ValueError("only minimisation models are supported")
            continue
        if cur is None:
            raise ValueError(f"text outside any section: {raw!r}")
        sections[cur].append(line)

    def split_named(lines):
        items, name, buf = [], None, []
        for tok in " ".join(lines).replace(":", ": ").split():
            if tok.endswith(":"):
                if name is not None or buf:
                    items.append((name, buf))
                name, buf = tok[:-1], []
            else:
                buf.append(tok)
        if name is not None or buf:
            items.append((name, buf))
        return items

    col_index: dict[str, int] = {}

    def col(name):
        if name not in col_index:
            col_index[name] = len(col_index)
        return col_index[name]

    obj_items = split_named(sections["obj"])
    obj_terms, obj_const = _linear(obj_items[0][1]) if obj_items else ([], 0.0)
    cvec = {}
    for name, v in obj_terms:
        cvec[col(name)] = cvec.get(col(name), 0.0) + v

    R, C, V, rlo, rhi, rnames = [], [], [], [], [], []
    for name, toks in split_named(sections["st"]):
        ops = [k for k, t in enumerate(toks) if t in _SENSE]
        lo, hi = -math.inf, math.inf
        if len(ops) == 2:  # lo <= expr <= hi
            lo = _parse_value(toks[0])
            body = toks[ops[0] + 1:ops[1]]
            hi = _parse_value(toks[ops[1] + 1])
        elif len(ops) == 1:
            body = toks[:ops[0]]
            rhs = _parse_value(toks[ops[0] + 1])
            sense = _SENSE[toks[ops[0]]]
            if sense == "<=":
                hi = rhs
            elif sense == ">=":
                lo = rhs
            else:
                lo = hi = rhs
        else:
            raise ValueError(f"constraint {name!r}: cannot parse {' '.join(toks)!r}")
        terms, const = _linear(body)
        i = len(rlo)
        for cname, v in terms:
            R.append(i)
            C.append(col(cname))
            V.append(v)
        rlo.append(lo - const)
        rhi.append(hi - const)
        rnames.append(name or f"r{i}")

    bounds = {}
    for line in sections["bounds"]:
        toks = line.split()
        if len(toks) == 2 and toks[1].lower() == "free":
            bounds[toks[0]] = (-math.inf, math.inf)
        elif len(toks) == 5 and toks[1] in _SENSE and toks[3] in _SENSE:
            bounds[toks[2]] = (_parse_value(toks[0]), _parse_value(toks[4]))
        elif len(toks) == 3 and toks[1] in _SENSE:
            name, v = (toks[0], _parse_value(toks[2])) if not _is_number(toks[0]) else (toks[2], _parse_value(toks[0]))
            lo, hi = bounds.get(name, (0.0, math.inf))
            sense = _SENSE[toks[1]]
            if _is_number(toks[0]):  # value <= name
                sense = {"<=": ">=", ">=": "<=", "=": "="}[sense]
            if sense == "<=":
                hi = v
            elif sense == ">=":
                lo = v
            else:
                lo = hi = v
            bounds[name] = (lo, hi)
        else:
            raise ValueError(f"cannot parse bound {line!r}")
        col(toks[2] if len(toks) == 5 else (toks[0] if len(toks) == 2 or not _is_number(toks[0]) else toks[2]))

    binaries = [t for line in sections["bin"] for t in line.split()]
    for b in binaries:
        col(b)

    n = len(col_index)
    names = [None] * n
    for k, j in col_index.items():
        names[j] = k
    c = np.zeros(n)
    for j, v in cvec.items():
        c[j] = v
    lo = np.zeros(n)
    hi = np.full(n, math.inf)
    integer = np.zeros(n, dtype=bool)
    for b in binaries:
        j = col_index[b]
        integer[j] = True
        hi[j] = 1.0
    for name, (l, h) in bounds.items():
        j = col_index[name]
        lo[j], hi[j] = l, h
    return SparseLp(c, lo, hi, np.array(R, int), np.array(C, int), np.array(V, float),
                    np.array(rlo, float), np.array(rhi, float), integer, names, rnames, obj_const)
