"""Independent reference computations used to check the analyser.

Nothing here imports the analyser's graph, solver or fitting code; inputs are
plain Python structures.
"""

from __future__ import annotations

import functools
import sys
from fractions import Fraction


def reachable(succ, start, removed=None):
    seen = set()
    stack = [start] if start != removed else []
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        stack.extend(s for s in succ.get(n, ()) if s != removed and s not in seen)
    return seen


def dominators(nodes, succ, entry):
    """``dom[n]`` = set of nodes dominating ``n``, by deletion and reachability."""
    live = reachable(succ, entry)
    dom = {n: {n} for n in live}
    for d in live:
        if d == entry:
            for n in live:
                dom[n].add(entry)
            continue
        cut = reachable(succ, entry, removed=d)
        for n in live - cut:
            dom[n].add(d)
    return dom


def natural_loops(nodes, succ, entry):
    """Map header -> body set from back edges ``u -> h`` where ``h`` dominates ``u``."""
    dom = dominators(nodes, succ, entry)
    pred = {}
    for u, vs in succ.items():
        for v in vs:
            pred.setdefault(v, set()).add(u)
    loops = {}
    for u in dom:
        for h in succ.get(u, ()):
            if h in dom[u]:
                body = loops.setdefault(h, {h})
                stack = [u]
                while stack:
                    x = stack.pop()
                    if x not in body:
                        body.add(x)
                        stack.extend(pred.get(x, ()))
    return loops


def worst_path(entry, intra, calls, exit_blocks, node_cost, edge_cost, loops, bounds):
    """Maximum priced path by exhaustive search over program executions.

    ``intra[b]`` is a list of ``(dst, edge_key)``; ``calls[b]`` is
    ``(callee_entry, call_key, return_block)``; leaving return block ``rb`` costs
    ``edge_cost[(rb, ret, "Return")]`` (``ret`` is None for the program exit).
    ``loops`` maps header -> body; ``bounds`` maps header -> (min, max) header
    executions per entry.  Returns ``None`` when no complete execution exists.
    """
    routine_loops = {h: frozenset(b) for h, b in loops.items()}
    sys.setrecursionlimit(max(sys.getrecursionlimit(), 20000))

    def step(counters, u, v):
        """Update per-loop counters for a local transfer ``u -> v``; None if it breaks a bound."""
        out = []
        for h, c in counters:
            body = routine_loops[h]
            if u in body and v not in body:
                if c < bounds[h][0]:
                    return None
                continue
            if v == h:
                c += 1
                if c > bounds[h][1]:
                    return None
            out.append((h, c))
        held = {h for h, _ in out}
        if v in routine_loops and v not in held:
            if bounds[v][1] < 1:
                return None
            out.append((v, 1))
        return tuple(out)

    @functools.lru_cache(maxsize=None)
    def best(b, counters, stack):
        here = Fraction(node_cost[b])
        options = []
        for dst, key in intra.get(b, ()):
            nc = step(counters, b, dst)
            if nc is not None:
                r = best(dst, nc, stack)
                if r is not None:
                    options.append(Fraction(edge_cost[key]) + r)
        if b in calls:
            for callee, key, ret in calls[b]:
                start = step((), None, callee)
                if start is None:
                    continue
                r = best(callee, start, stack + ((b, ret, counters),))
                if r is not None:
                    options.append(Fraction(edge_cost[key]) + r)
        if b in exit_blocks:
            if stack:
                caller, ret, saved = stack[-1]
                ok = all(c >= bounds[h][0] for h, c in counters)
                nc = step(saved, caller, ret) if ok else None
                if nc is not None:
                    r = best(ret, nc, stack[:-1])
                    if r is not None:
                        options.append(Fraction(edge_cost[(b, ret, "Return")]) + r)
            elif all(c >= bounds[h][0] for h, c in counters):
                options.append(Fraction(edge_cost[(b, None, "Return")]))
        if not options:
            return None
        return here + max(options)

    start = step((), None, entry)
    return None if start is None else best(entry, start, ())
