"""Exact rational integer linear programming (maximization).

A sparse two-phase primal simplex over ``Fraction`` solves the LP relaxation;
depth-first branch-and-bound on the most fractional variable enforces
integrality.  Nothing here uses floating point for decisions that affect the
returned values.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import SolverBudgetExceeded, SolverError

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"

_DEGENERATE_SWITCH = 50


@dataclass
class Constraint:
    coefs: dict          # var index -> Fraction
    sense: str           # "<=", ">=", "="
    rhs: Fraction
    name: str = ""

    def satisfied(self, x):
        lhs = sum((c * x[j] for j, c in self.coefs.items()), Fraction(0))
        if self.sense == "<=":
            return lhs <= self.rhs
        if self.sense == ">=":
            return lhs >= self.rhs
        return lhs == self.rhs


@dataclass
class IlpProblem:
    names: list = field(default_factory=list)
    objective: dict = field(default_factory=dict)
    constraints: list = field(default_factory=list)
    upper: dict = field(default_factory=dict)      # optional var upper bounds
    integer: bool = True

    def add_var(self, name, obj=Fraction(0)):
        self.names.append(name)
        j = len(self.names) - 1
        if obj:
            self.objective[j] = Fraction(obj)
        return j

    def add(self, coefs, sense, rhs, name=""):
        if sense not in ("<=", ">=", "="):
            raise ValueError(f"bad sense {sense!r}")
        clean = {j: Fraction(c) for j, c in coefs.items() if c != 0}
        self.constraints.append(Constraint(clean, sense, Fraction(rhs), name))

    @property
    def n(self):
        return len(self.names)

    def value(self, x):
        return sum((c * x[j] for j, c in self.objective.items()), Fraction(0))

    def check(self, x):
        """Names of violated constraints (empty when ``x`` is feasible)."""
        bad = [c.name or f"c{i}" for i, c in enumerate(self.constraints) if not c.satisfied(x)]
        bad += [self.names[j] for j in range(self.n) if x[j] < 0]
        bad += [self.names[j] for j, u in self.upper.items() if x[j] > u]
        return bad


@dataclass
class LpResult:
    status: str
    objective: Fraction | None = None
    x: list | None = None
    pivots: int = 0


@dataclass
class PathSolution:
    status: str
    objective: Fraction | None
    values: list | None
    relaxation_bound: Fraction | None = None
    nodes: int = 0


# ------------------------------------------------------------------ simplex


class _Tableau:
    def __init__(self, n_struct):
        self.n_struct = n_struct
        self.rows = []
        self.rhs = []
        self.basis = []
        self.ncols = n_struct
        self.artificial = set()

    def new_col(self, art=False):
        j = self.ncols
        self.ncols += 1
        if art:
            self.artificial.add(j)
        return j

    def pivot(self, r, j):
        row = self.rows[r]
        a = row[j]
        if a != 1:
            inv = 1 / a
            for k in row:
                row[k] *= inv
            self.rhs[r] *= inv
        for i, other in enumerate(self.rows):
            if i == r:
                continue
            f = other.get(j)
            if not f:
                continue
            for k, v in row.items():
                nv = other.get(k, 0) - f * v
                if nv:
                    other[k] = nv
                else:
                    other.pop(k, None)
            self.rhs[i] -= f * self.rhs[r]
        self.basis[r] = j

    def optimize(self, obj, deadline=None, allowed=None):
        """Maximize ``obj`` (dict col -> coef) from the current basic feasible solution.

        Returns ("optimal"|"unbounded", value, pivots).
        """
        # reduced costs: d_j = c_j - c_B B^-1 A_j ; tableau rows already hold B^-1 A
        d = dict(obj)
        z = Fraction(0)
        for r, b in enumerate(self.basis):
            cb = obj.get(b, 0)
            if cb:
                z += cb * self.rhs[r]
                for k, v in self.rows[r].items():
                    d[k] = d.get(k, 0) - cb * v
        basic = set(self.basis)
        for b in basic:
            d.pop(b, None)
        pivots = 0
        degenerate = 0
        while True:
            if deadline is not None and pivots % 16 == 0 and time.monotonic() > deadline:
                raise _Timeout()
            cand = [(v, k) for k, v in d.items() if v > 0 and (allowed is None or k in allowed)]
            if not cand:
                return "optimal", z, pivots
            if degenerate >= _DEGENERATE_SWITCH:
                j = min(k for _, k in cand)          # Bland
            else:
                j = max(cand, key=lambda t: (t[0], -t[1]))[1]
            best = None
            for r, row in enumerate(self.rows):
                a = row.get(j)
                if a is not None and a > 0:
                    ratio = self.rhs[r] / a
                    key = (ratio, self.basis[r])
                    if best is None or key < best[0]:
                        best = (key, r)
            if best is None:
                return "unbounded", None, pivots
            r = best[1]
            if best[0][0] == 0:
                degenerate += 1
            else:
                degenerate = 0
            dj = d[j]
            leaving = self.basis[r]
            self.pivot(r, j)
            row = self.rows[r]
            z += dj * self.rhs[r]
            for k, v in row.items():
                nv = d.get(k, 0) - dj * v
                if nv:
                    d[k] = nv
                else:
                    d.pop(k, None)
            d.pop(j, None)
            if leaving not in row:
                d.setdefault(leaving, Fraction(0))
                nv = -dj * row.get(leaving, 0)
                if nv:
                    d[leaving] = nv
                else:
                    d.pop(leaving, None)
            pivots += 1


class _Timeout(Exception):
    pass


def solve_lp(problem, extra=(), deadline=None):
    """LP relaxation with additional ``(j, sense, value)`` bound rows."""
    n = problem.n
    t = _Tableau(n)
    rows = [(c.coefs, c.sense, c.rhs) for c in problem.constraints]
    rows += [({j: Fraction(1)}, "<=", Fraction(u)) for j, u in problem.upper.items()]
    rows += [({j: Fraction(1)}, s, Fraction(v)) for j, s, v in extra]
    for coefs, sense, rhs in rows:
        coefs = dict(coefs)
        if rhs < 0:
            coefs = {k: -v for k, v in coefs.items()}
            rhs = -rhs
            sense = {"<=": ">=", ">=": "<=", "=": "="}[sense]
        if not coefs:
            if (sense == "<=" and rhs < 0) or (sense == ">=" and rhs > 0) or (sense == "=" and rhs != 0):
                return LpResult(INFEASIBLE)
            continue
        row = dict(coefs)
        if sense == "<=":
            s = t.new_col()
            row[s] = Fraction(1)
            basic = s
        elif sense == ">=":
            s = t.new_col()
            row[s] = Fraction(-1)
            basic = t.new_col(art=True)
            row[basic] = Fraction(1)
        else:
            basic = t.new_col(art=True)
            row[basic] = Fraction(1)
        t.rows.append(row)
        t.rhs.append(Fraction(rhs))
        t.basis.append(basic)
    pivots = 0
    if t.artificial:
        status, val, p = t.optimize({a: Fraction(-1) for a in t.artificial}, deadline)
        pivots += p
        if val < 0:
            return LpResult(INFEASIBLE, pivots=pivots)
        # drive zero-level artificials out of the basis
        for r in range(len(t.rows)):
            if t.basis[r] in t.artificial:
                j = next((k for k in sorted(t.rows[r]) if k not in t.artificial), None)
                if j is not None:
                    t.pivot(r, j)
        keep = [r for r in range(len(t.rows)) if t.basis[r] not in t.artificial]
        t.rows = [t.rows[r] for r in keep]
        t.rhs = [t.rhs[r] for r in keep]
        t.basis = [t.basis[r] for r in keep]
        for row in t.rows:
            for a in t.artificial:
                row.pop(a, None)
    allowed = set(range(t.ncols)) - t.artificial
    status, val, p = t.optimize(dict(problem.objective), deadline, allowed)
    pivots += p
    if status == "unbounded":
        return LpResult(UNBOUNDED, pivots=pivots)
    x = [Fraction(0)] * n
    for r, b in enumerate(t.basis):
        if b < n:
            x[b] = t.rhs[r]
    return LpResult(OPTIMAL, problem.value(x), x, pivots)


# ------------------------------------------------------------------ branch and bound


def solve(problem, time_budget=600.0):
    """Optimal integer solution of ``problem`` (maximization)."""
    deadline = None if time_budget is None else time.monotonic() + time_budget
    try:
        root = solve_lp(problem, deadline=deadline)
    except _Timeout:
        raise SolverBudgetExceeded(None) from None
    if root.status != OPTIMAL:
        return PathSolution(root.status, None, None)
    if not problem.integer:
        return PathSolution(OPTIMAL, root.objective, root.x, root.objective, 1)
    best = None
    best_val = None
    stack = [((), root)]
    nodes = 0
    try:
        while stack:
            extra, lp = stack.pop()
            nodes += 1
            if lp is None:
                lp = solve_lp(problem, extra, deadline)
            if lp.status == INFEASIBLE:
                continue
            if lp.status == UNBOUNDED:
                return PathSolution(UNBOUNDED, None, None, None, nodes)
            if best_val is not None and lp.objective <= best_val:
                continue
            frac = [(abs(v - math.floor(v) - Fraction(1, 2)), j) for j, v in enumerate(lp.x)
                    if v.denominator != 1]
            if not frac:
                best, best_val = lp.x, lp.objective
                continue
            _, j = min(frac)
            v = lp.x[j]
            # depth first, ceil branch explored first (pushed last)
            stack.append((extra + ((j, "<=", Fraction(math.floor(v))),), None))
            stack.append((extra + ((j, ">=", Fraction(math.ceil(v))),), None))
            if deadline is not None and time.monotonic() > deadline:
                raise _Timeout()
    except _Timeout:
        raise SolverBudgetExceeded(root.objective) from None
    if best is None:
        return PathSolution(INFEASIBLE, None, None, root.objective, nodes)
    if root.objective < best_val:
        raise SolverError("LP relaxation below the integer optimum")
    return PathSolution(OPTIMAL, best_val, best, root.objective, nodes)


# ------------------------------------------------------------------ LP format


def _fmt(q):
    from .models import _dec

    return _dec(q, exact=True)


def _expr(coefs, names):
    parts = []
    for j in sorted(coefs):
        c = coefs[j]
        sign = "-" if c < 0 else "+"
        mag = abs(c)
        term = names[j] if mag == 1 else f"{_fmt(mag)} {names[j]}"
        parts.append(f"{sign} {term}")
    if not parts:
        return "0"
    text = " ".join(parts)
    return text[2:] if text.startswith("+ ") else "-" + text[1:]


def export_lp(problem, title="wcec"):
    """CPLEX-style LP text."""
    lines = [f"\\ {title}", "Maximize"]
    if problem.names:
        lines.append(f" obj: {_expr(problem.objective, problem.names)}")
        lines.append("Subject To")
        for i, c in enumerate(problem.constraints):
            name = c.name or f"c{i}"
            lines.append(f" {name}: {_expr(c.coefs, problem.names)} {c.sense} {_fmt(c.rhs)}")
        lines.append("Bounds")
        for j, name in enumerate(problem.names):
            if j in problem.upper:
                lines.append(f" 0 <= {name} <= {_fmt(problem.upper[j])}")
            else:
                lines.append(f" {name} >= 0")
        if problem.integer:
            lines.append("General")
            lines.append(" " + " ".join(problem.names))
    lines.append("End")
    return "\n".join(lines) + "\n"


def _parse_terms(text, index, names, where):
    import re

    coefs = {}
    text = text.strip()
    if text == "0":
        return coefs
    for m in re.finditer(r"([+-]?)\s*(?:(\d+(?:\.\d+)?(?:/\d+)?)\s+)?([A-Za-z_][\w.\[\]]*)|(\S)", text):
        if m.group(4):
            raise SolverError(f"{where}: cannot parse {text!r}")
        sign = -1 if m.group(1) == "-" else 1
        coef = Fraction(m.group(2)) if m.group(2) else Fraction(1)
        name = m.group(3)
        if name not in index:
            index[name] = len(names)
            names.append(name)
        j = index[name]
        coefs[j] = coefs.get(j, 0) + sign * coef
    return coefs


def parse_lp(text):
    """Inverse of :func:`export_lp` for the subset it emits."""
    import re

    prob = IlpProblem(integer=False)
    index = {}
    # the Bounds section lists every variable in declaration order; seed from it
    section = None
    for raw in text.splitlines():
        line = raw.strip()
        if line.lower() in ("maximize", "subject to", "bounds", "general", "end"):
            section = line.lower()
        elif section == "bounds" and line:
            m = re.match(r"(?:0 <= )?([A-Za-z_][\w.\[\]]*)\s*(?:<=|>=)", line)
            if m and m.group(1) not in index:
                index[m.group(1)] = len(prob.names)
                prob.names.append(m.group(1))
    section = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("\\"):
            continue
        low = line.lower()
        if low in ("maximize", "subject to", "bounds", "general", "end"):
            section = low
            continue
        if section == "maximize":
            _, expr = line.split(":", 1)
            prob.objective = _parse_terms(expr, index, prob.names, "objective")
        elif section == "subject to":
            name, rest = line.split(":", 1)
            m = re.match(r"(.*?)\s*(<=|>=|=)\s*(\S+)$", rest)
            if not m:
                raise SolverError(f"bad constraint line {line!r}")
            coefs = _parse_terms(m.group(1), index, prob.names, name)
            prob.constraints.append(Constraint(coefs, m.group(2), Fraction(m.group(3)), name.strip()))
        elif section == "bounds":
            m = re.match(r"0 <= (\S+) <= (\S+)$", line)
            if m:
                j = index.setdefault(m.group(1), len(prob.names))
                if j == len(prob.names):
                    prob.names.append(m.group(1))
                prob.upper[j] = Fraction(m.group(2))
                continue
            m = re.match(r"(\S+) >= 0$", line)
            if not m:
                raise SolverError(f"bad bound line {line!r}")
            if m.group(1) not in index:
                index[m.group(1)] = len(prob.names)
                prob.names.append(m.group(1))
        elif section == "general":
            prob.integer = True
    prob.objective = {j: c for j, c in prob.objective.items() if c}
    return prob
