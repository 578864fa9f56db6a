"""Mixed-integer encoding of a tree ensemble, written in LP text format.

Variables:

* ``x_<j>_<c>``: feature ``j`` takes category ``c`` (free features only)
* ``y_<t>_<l>``: tree ``t`` routes to its ``l``-th leaf (pre-order)

Each free feature takes exactly one category, each non-constant tree
selects exactly one leaf, and a leaf can only be selected when every free
feature on its path takes a category the path admits::

    y_t_l - sum(x_j_c for c in admitted) <= 0

Fixed features are substituted out.  Leaves they make unreachable are
dropped, and trees left with a single reachable leaf fold into the objective
constant.

Numbers are written as the exact decimal expansion of their double value.
Any LP reader recovers the same doubles, and :func:`parse_lp` reads them as
exact rationals, so the folded constant loses nothing.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction

import numpy as np

from .errors import FormatError
from .gbt import TreeEnsemble
from .treeopt import VariableDomain, _check, leaf_paths

_LINE_WIDTH = 200


def _num(v) -> str:
    """Exact decimal form of a double or of a dyadic rational (a sum of doubles)."""
    if isinstance(v, float):
        return str(Decimal(v))
    k = v.denominator.bit_length() - 1
    assert v.denominator == 1 << k
    return str(Decimal(f"{v.numerator * 5 ** k}E-{k}"))


def _terms(coefs) -> list:
    out = []
    for name, c in coefs:
        if c == 0:
            continue
        sign = "-" if c < 0 else "+"
        mag = abs(float(c))
        out.append(f"{sign} {name}" if mag == 1 else f"{sign} {_num(mag)} {name}")
    return out


def _wrap(head: str, parts: list) -> list:
    lines, cur = [], head
    for part in parts:
        if len(cur) + 1 + len(part) > _LINE_WIDTH:
            lines.append(cur)
            cur = "   "
        cur = f"{cur} {part}"
    lines.append(cur)
    return lines


def encode_mio(model: TreeEnsemble, dom: VariableDomain) -> str:
    _check(model, dom)
    free = dom.free_indices
    constant = [model.base_score]
    objective = []
    leaf_rows = []
    links = []
    for t, tree in enumerate(model.trees):
        paths = leaf_paths(tree, dom.allowed)
        if len(paths) == 1:
            constant.append(paths[0][1].value)
            continue
        names = []
        for pos, leaf, sets in paths:
            y = f"y_{t}_{pos}"
            names.append(y)
            objective.append((y, leaf.value))
            for f in sorted(sets):
                cats = sets[f]
                if f in free and len(cats) < len(dom.allowed[f]):
                    links.append((f"link_{t}_{pos}_{f}", y, f, sorted(cats)))
        leaf_rows.append((f"leaf_{t}", names))

    const = sum((Fraction(v) for v in constant), Fraction(0))
    lines = ["\\ tree ensemble maximization", "Maximize"]
    obj = _terms(objective)
    if const != 0 or not obj:
        obj.append(("- " if const < 0 else "+ ") + _num(abs(const)))
    lines += _wrap(" obj:", obj)
    lines.append("Subject To")
    for j in free:
        lines += _wrap(f" assign_{j}:", _terms((f"x_{j}_{c}", 1) for c in dom.allowed[j]) + ["= 1"])
    for name, ys in leaf_rows:
        lines += _wrap(f" {name}:", _terms((y, 1) for y in ys) + ["= 1"])
    for name, y, f, cats in links:
        lines += _wrap(f" {name}:", _terms([(y, 1)] + [(f"x_{f}_{c}", -1) for c in cats]) + ["<= 0"])
    binaries = [f"x_{j}_{c}" for j in free for c in dom.allowed[j]]
    binaries += [y for _, ys in leaf_rows for y in ys]
    if binaries:
        lines.append("Binary")
        for i in range(0, len(binaries), 8):
            lines.append(" " + " ".join(binaries[i:i + 8]))
    lines.append("End")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# reading back


@dataclass
class LpProgram:
    """Parsed program; all numbers are exact rationals."""

    sense: str
    objective: dict
    constant: Fraction
    constraints: list = field(default_factory=list)  # (name, coefs, op, rhs)
    binaries: list = field(default_factory=list)

    @property
    def variables(self) -> list:
        names = set(self.objective) | set(self.binaries)
        for _, coefs, _, _ in self.constraints:
            names |= set(coefs)
        return sorted(names)

    def objective_at(self, values: dict) -> float:
        """Objective at ``values``, summed exactly and rounded once."""
        total = self.constant + sum((c * values.get(v, 0) for v, c in self.objective.items()), Fraction(0))
        return float(total)

    def is_feasible(self, values: dict) -> bool:
        for _, coefs, op, rhs in self.constraints:
            lhs = sum(c * values.get(v, 0) for v, c in coefs.items())
            if op == "=" and lhs != rhs or op == "<=" and lhs > rhs or op == ">=" and lhs < rhs:
                return False
        return True


_LABEL = re.compile(r"\s*[A-Za-z_][A-Za-z0-9_]*\s*:")
_TOKEN = re.compile(r"<=|>=|=|[+-]|[A-Za-z_][A-Za-z0-9_]*|(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?")


def _parse_expr(text: str):
    coefs: dict = {}
    constant = Fraction(0)
    sign, num = 1, None
    for tok in _TOKEN.findall(text):
        if tok == "+":
            sign = 1
        elif tok == "-":
            sign = -1
        elif tok[0].isalpha() or tok[0] == "_":
            coefs[tok] = coefs.get(tok, Fraction(0)) + sign * (1 if num is None else num)
            sign, num = 1, None
        else:
            if num is not None:
                raise FormatError(f"two numbers in a row near {tok!r}")
            num = Fraction(tok)
    if num is not None:
        constant += sign * num
    return coefs, constant


def parse_lp(text: str) -> LpProgram:
    """Read the subset of LP format that :func:`encode_mio` writes."""
    section = None
    buf: list = []
    sense = None
    objective, constant = {}, Fraction(0)
    constraints, binaries = [], []

    def flush():
        nonlocal objective, constant
        if not buf:
            return
        stmt = " ".join(buf)
        buf.clear()
        name, _, body = stmt.partition(":")
        if not _:
            name, body = "", stmt
        if section == "obj":
            objective, constant = _parse_expr(body)
            return
        m = re.search(r"(<=|>=|=)\s*([-+]?[0-9.]+(?:[eE][-+]?[0-9]+)?)\s*$", body)
        if not m:
            raise FormatError(f"constraint without right-hand side: {stmt!r}")
        coefs, c0 = _parse_expr(body[:m.start()])
        constraints.append((name.strip(), coefs, m.group(1), Fraction(m.group(2)) - c0))

    for raw in text.splitlines():
        line = raw.split("\\", 1)[0].rstrip()
        if not line.strip():
            continue
        key = line.strip().lower()
        if key in ("maximize", "maximum", "max", "minimize", "minimum", "min"):
            flush()
            sense = "max" if key.startswith("max") else "min"
            section = "obj"
            continue
        if key in ("subject to", "such that", "st", "s.t."):
            flush()
            section = "st"
            continue
        if key in ("binary", "binaries", "bin"):
            flush()
            section = "bin"
            continue
        if key == "end":
            flush()
            section = "end"
            continue
        if section == "bin":
            binaries.extend(line.split())
        elif section in ("obj", "st"):
            if _LABEL.match(line):
                flush()
            buf.append(line.strip())
        else:
            raise FormatError(f"text outside any section: {raw!r}")
    if sense is None:
        raise FormatError("no objective section")
    if section != "end":
        raise FormatError("missing End")
    return LpProgram(sense, objective, constant, constraints, binaries)


def induced_solution(model: TreeEnsemble, dom: VariableDomain, x) -> dict:
    """Binary values the encoding assigns to a full feature vector ``x``."""
    values = {}
    x = [int(v) for v in x]
    for j in dom.free_indices:
        for c in dom.allowed[j]:
            values[f"x_{j}_{c}"] = int(x[j] == c)
    point = tuple((v,) for v in x)
    for t, tree in enumerate(model.trees):
        paths = leaf_paths(tree, dom.allowed)
        if len(paths) == 1:
            continue
        hit = leaf_paths(tree, point)[0][0]
        for pos, _, _ in paths:
            values[f"y_{t}_{pos}"] = int(pos == hit)
    return values


def solve_with_scipy(program: LpProgram):
    """Solve an all-binary program with the HiGHS MILP backend in SciPy.

    Returns ``(objective_value, values)``.  Used only to cross-check the
    built-in search.
    """
    from scipy.optimize import Bounds, LinearConstraint, milp

    names = program.variables
    col = {v: i for i, v in enumerate(names)}
    sign = -1.0 if program.sense == "max" else 1.0
    c = np.zeros(len(names))
    for v, a in program.objective.items():
        c[col[v]] = sign * float(a)
    rows, lo, hi = [], [], []
    for _, coefs, op, rhs in program.constraints:
        row = np.zeros(len(names))
        for v, a in coefs.items():
            row[col[v]] = float(a)
        rows.append(row)
        lo.append(float(rhs) if op in ("=", ">=") else -np.inf)
        hi.append(float(rhs) if op in ("=", "<=") else np.inf)
    if not names:
        return float(program.constant), {}
    cons = [LinearConstraint(np.array(rows), lo, hi)] if rows else []
    res = milp(c, constraints=cons, integrality=np.ones(len(names)), bounds=Bounds(0, 1))
    if not res.success:
        raise RuntimeError(f"MILP solve failed: {res.message}")
    values = {v: int(round(res.x[i])) for i, v in enumerate(names)}
    return sign * res.fun + float(program.constant), values
