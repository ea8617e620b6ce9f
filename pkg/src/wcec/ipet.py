"""Implicit path enumeration: contextual CFG + costs + bounds -> ILP -> worst path."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from . import ilp
from .errors import AnnotationError, SolverError, UnboundedLoop
from .ilp import IlpProblem


@dataclass
class IpetProblem:
    ilp: IlpProblem
    ctx_cfg: object
    node_var: list
    edge_var: list
    node_cost: list
    edge_cost: list
    bounds: dict = field(default_factory=dict)   # loop-instance key -> (min, max)


@dataclass
class IpetSolution:
    status: str
    objective: Fraction | None
    node_freq: list | None
    edge_freq: list | None
    relaxation_bound: Fraction | None = None
    bb_nodes: int = 0


def _cost(c):
    return Fraction(getattr(c, "energy", c))


def _minmax(b):
    if b is None:
        return None
    if isinstance(b, tuple):
        return int(b[0]), int(b[1])
    return int(b.min), int(b.max)


def _nodes_for_addr(ctx_cfg, addr):
    blocks = {b.id for b in ctx_cfg.cfg.blocks_at(addr)}
    return [n.id for n in ctx_cfg.nodes if n.block in blocks]


def build(ctx_cfg, node_costs, edge_costs, loop_bounds, flow=(), infeasible_nodes=(),
          infeasible_edges=(), infeasible_addrs=()):
    """Assemble the IPET integer program.

    ``loop_bounds`` maps a loop-instance key (or, as a fallback, a header
    address) to a ``LoopBound`` or ``(min, max)``; a bound counts header
    executions per entry of the loop.
    """
    p = IlpProblem()
    node_var = [p.add_var(f"n{n.id}", _cost(node_costs[n.id])) for n in ctx_cfg.nodes]
    edge_var = [p.add_var(f"e{e.id}", _cost(edge_costs[e.id])) for e in ctx_cfg.edges]
    for j, c in p.objective.items():
        if c < 0:
            raise SolverError(f"negative objective coefficient on {p.names[j]}")

    p.add({edge_var[ctx_cfg.start_edge]: 1}, "=", 1, "start")
    for n in ctx_cfg.nodes:
        v = node_var[n.id]
        ins = {edge_var[e.id]: 1 for e in ctx_cfg.in_edges(n.id)}
        outs = {edge_var[e.id]: 1 for e in ctx_cfg.out_edges(n.id)}
        ins[v] = ins.get(v, 0) - 1
        p.add(ins, "=", 0, f"in{n.id}")
        outs[v] = outs.get(v, 0) - 1
        p.add(outs, "=", 0, f"out{n.id}")

    bounds = {}
    for li in ctx_cfg.loop_instances:
        b = _minmax(loop_bounds.get(li.key)) or _minmax(loop_bounds.get(li.header))
        if b is None:
            raise UnboundedLoop(li.header)
        lo, hi = b
        bounds[li.key] = b
        heads = {node_var[h]: Fraction(1) for h in li.header_nodes}
        tag = f"loop{li.header:x}_{len(bounds)}"
        row = dict(heads)
        for e in li.entry_edges:
            row[edge_var[e]] = row.get(edge_var[e], 0) - hi
        p.add(row, "<=", 0, tag + "_max")
        if lo > 0:
            row = dict(heads)
            for e in li.entry_edges:
                row[edge_var[e]] = row.get(edge_var[e], 0) - lo
            p.add(row, ">=", 0, tag + "_min")

    for i, g in enumerate(ctx_cfg.call_groups):
        row = {edge_var[e]: Fraction(1) for e in g.return_edges}
        for e in g.call_edges:
            row[edge_var[e]] = row.get(edge_var[e], 0) - 1
        p.add(row, "=", 0, f"call{i}")

    for g in ctx_cfg.recursion_groups:
        row = {edge_var[e]: Fraction(1) for e in g.call_edges}
        for e in g.external_edges:
            row[edge_var[e]] = row.get(edge_var[e], 0) - g.depth
        if g.includes_start:
            s = edge_var[ctx_cfg.start_edge]
            row[s] = row.get(s, 0) - g.depth
        p.add(row, "<=", 0, f"rec{g.routine:x}")

    for i, fc in enumerate(flow):
        terms, sense, const = fc.normalized()
        row = {}
        for t in terms:
            if t.kind == "block":
                vars_ = [node_var[n] for n in _nodes_for_addr(ctx_cfg, t.a)]
            else:
                src = {b.id for b in ctx_cfg.cfg.blocks_at(t.a)}
                dst = {b.id for b in ctx_cfg.cfg.blocks_at(t.b)}
                vars_ = [edge_var[e.id] for e in ctx_cfg.edges
                         if e.src is not None and e.dst is not None
                         and ctx_cfg.nodes[e.src].block in src and ctx_cfg.nodes[e.dst].block in dst]
                if not src or not dst:
                    vars_ = []
            if not vars_:
                raise AnnotationError(f"flow fact names no analysed {t.kind} at {t.a:#x}", fc.line)
            for v in vars_:
                row[v] = row.get(v, 0) + t.coef
        p.add(row, sense, const, f"flow{i}")

    zero = {node_var[n] for n in infeasible_nodes} | {edge_var[e] for e in infeasible_edges}
    for a in infeasible_addrs:
        nodes = _nodes_for_addr(ctx_cfg, a)
        if not nodes:
            raise AnnotationError(f"infeasible address {a:#x} is not in an analysed block")
        zero.update(node_var[n] for n in nodes)
    for v in sorted(zero):
        p.add({v: 1}, "=", 0, f"zero_{p.names[v]}")

    return IpetProblem(p, ctx_cfg, node_var, edge_var,
                       [_cost(c) for c in node_costs], [_cost(c) for c in edge_costs], bounds)


def solve(problem, time_budget=600.0):
    """Solve and verify; conservation and the objective are rechecked here."""
    sol = ilp.solve(problem.ilp, time_budget)
    if sol.status != ilp.OPTIMAL:
        return IpetSolution(sol.status, None, None, None, sol.relaxation_bound, sol.nodes)
    x = sol.values
    bad = problem.ilp.check(x)
    if bad:
        raise SolverError(f"solver returned a point violating {', '.join(bad[:5])}")
    if any(v.denominator != 1 for v in x):
        raise SolverError("solver returned a fractional frequency")
    nf = [int(x[v]) for v in problem.node_var]
    ef = [int(x[v]) for v in problem.edge_var]
    total = (sum((c * f for c, f in zip(problem.node_cost, nf)), Fraction(0))
             + sum((c * f for c, f in zip(problem.edge_cost, ef)), Fraction(0)))
    if total != sol.objective:
        raise SolverError("objective does not match the priced witness")
    return IpetSolution(ilp.OPTIMAL, total, nf, ef, sol.relaxation_bound, sol.nodes)


def export_lp(problem):
    return ilp.export_lp(problem.ilp if isinstance(problem, IpetProblem) else problem)
