"""Interprocedural CFG reconstruction, loop detection and context expansion."""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field

import networkx as nx

from .errors import CfgError
from .isa import LR, PC, Kind, branch_target, decode_one

log = logging.getLogger(__name__)


class EdgeKind(str, enum.Enum):
    FALLTHROUGH = "FallThrough"
    TAKEN = "Taken"
    CALL = "Call"
    RETURN = "Return"
    ENTRY = "Entry"


@dataclass
class BasicBlock:
    id: int
    start: int
    end: int
    instrs: tuple
    routine: int
    virtual: bool = False

    @property
    def terminator(self):
        return self.instrs[-1] if self.instrs else None

    @property
    def is_return(self):
        if self.virtual:
            return True
        t = self.terminator
        return t is not None and t.kind is Kind.RETURN

    def __repr__(self):
        return f"BasicBlock({self.id}, {self.start:#x}..{self.end:#x}{', virtual' if self.virtual else ''})"


@dataclass(frozen=True)
class CfgEdge:
    src: int
    dst: int
    kind: EdgeKind
    taken_flag: bool


@dataclass
class Loop:
    header: int              # header block start address; the loop id
    routine: int
    header_block: int
    body: frozenset
    back_edges: tuple
    parent: int | None = None
    depth: int = 1


@dataclass
class CallSite:
    block: int               # block ending in the call
    addr: int                # address of the call instruction
    callees: tuple           # routine entry addresses
    return_block: int        # block receiving control after the callee returns
    tail: bool = False


@dataclass
class Routine:
    entry: int
    name: str
    entry_block: int = -1
    blocks: list = field(default_factory=list)
    return_blocks: list = field(default_factory=list)
    loops: dict = field(default_factory=dict)
    irreducible: bool = False
    idom: dict = field(default_factory=dict)

    def dominates(self, a, b):
        """True if block ``a`` dominates block ``b`` (both in this routine)."""
        while True:
            if a == b:
                return True
            parent = self.idom.get(b)
            if parent is None or parent == b:
                return False
            b = parent


@dataclass
class Cfg:
    image: object
    entry: int
    blocks: dict
    routines: dict
    edges: list
    call_sites: dict
    warnings: list = field(default_factory=list)

    def local_successors(self, block_id):
        return self._local_succ.get(block_id, ())

    def routine_of(self, block_id):
        return self.routines[self.blocks[block_id].routine]

    def loops(self):
        for r in self.routines.values():
            yield from r.loops.values()

    def loop(self, header):
        for lp in self.loops():
            if lp.header == header:
                return lp
        raise KeyError(header)

    def block_at(self, addr, routine=None):
        """Block whose address range contains ``addr`` (first routine in order if ambiguous)."""
        for b in self.blocks.values():
            if b.virtual or (routine is not None and b.routine != routine):
                continue
            if b.start <= addr < b.end:
                return b
        return None

    def blocks_at(self, addr):
        return [b for b in self.blocks.values() if not b.virtual and b.start <= addr < b.end]

    def loops_containing(self, block_id):
        r = self.routine_of(block_id)
        return sorted((lp for lp in r.loops.values() if block_id in lp.body), key=lambda lp: lp.depth)


def _explore_routine(image, entry, annotations, warnings):
    """Decode every instruction reachable inside one routine.

    Returns (instrs by address, leaders, callees by call addr, jump targets by addr, tail flags).
    """
    instrs = {}
    leaders = {entry}
    calls = {}
    jumps = {}
    todo = [entry]
    while todo:
        addr = todo.pop()
        while True:
            if addr in instrs:
                break
            for start, ins in instrs.items():
                if start < addr < start + ins.size:
                    raise CfgError(f"branch into the middle of instruction at {start:#010x}")
            ins = decode_one(image, addr)
            instrs[addr] = ins
            if ins.opaque:
                warnings.append(("W-OPAQUE", f"analysis-opaque instruction {ins.text} at {addr:#010x}"))
            if ins.hint_warning:
                warnings.append(("W-HINT", f"undefined hint treated as NOP at {addr:#010x}"))
            if not ins.is_control:
                addr = ins.next_addr
                continue
            if ins.kind is Kind.CALL:
                if ins.mnemonic == "BL":
                    calls[addr] = (branch_target(ins),)
                else:
                    calls[addr] = _annotated(annotations, addr, "computed call")
                leaders.add(ins.next_addr)
                addr = ins.next_addr
                continue
            if ins.kind is Kind.BRANCH_COND:
                tgt = branch_target(ins)
                leaders.update((tgt, ins.next_addr))
                todo.append(tgt)
                addr = ins.next_addr
                continue
            if ins.kind is Kind.BRANCH_UNCOND:
                if ins.mnemonic == "B":
                    tgt = branch_target(ins)
                    leaders.add(tgt)
                    todo.append(tgt)
                elif ins.mnemonic == "BX":
                    calls[addr] = _annotated(annotations, addr, "computed branch")
                else:
                    tgts = _annotated(annotations, addr, "computed jump")
                    jumps[addr] = tgts
                    leaders.update(tgts)
                    todo.extend(tgts)
                leaders.add(ins.next_addr)
            break
    leaders = {a for a in leaders if a in instrs}
    return instrs, leaders, calls, jumps


def _annotated(annotations, addr, what):
    tgts = annotations.targets.get(addr) if annotations is not None else None
    if not tgts:
        raise CfgError(f"unresolved {what} at {addr:#010x}: add 'target {addr:#x} = ...;'")
    return tuple(t & ~1 for t in tgts)


def reconstruct(image, entry=None, annotations=None):
    from .annotations import AnnotationSet

    if annotations is None:
        annotations = AnnotationSet()
    if entry is None:
        entry = annotations.entry if annotations.entry is not None else image.entry
    entry &= ~1
    warnings = []

    explored = {}
    order = deque([entry])
    while order:
        r = order.popleft()
        if r in explored:
            continue
        explored[r] = _explore_routine(image, r, annotations, warnings)
        for callees in explored[r][2].values():
            for c in callees:
                if c not in explored:
                    order.append(c)

    blocks = {}
    routines = {}
    edges = []
    call_sites = {}
    local_succ = {}
    next_id = 0
    by_routine_start = {}
    for r_entry in sorted(explored):
        instrs, leaders, calls, jumps = explored[r_entry]
        name = image.symbol_at(r_entry) or f"sub_{r_entry:08x}"
        routine = Routine(r_entry, name)
        routines[r_entry] = routine
        addrs = sorted(instrs)
        cur = []
        for a in addrs:
            ins = instrs[a]
            if cur and (a in leaders or cur[-1].next_addr != a):
                blk = BasicBlock(next_id, cur[0].addr, cur[-1].next_addr, tuple(cur), r_entry)
                blocks[next_id] = blk
                by_routine_start[(r_entry, blk.start)] = next_id
                routine.blocks.append(next_id)
                next_id += 1
                cur = []
            cur.append(ins)
            if ins.is_control:
                blk = BasicBlock(next_id, cur[0].addr, ins.next_addr, tuple(cur), r_entry)
                blocks[next_id] = blk
                by_routine_start[(r_entry, blk.start)] = next_id
                routine.blocks.append(next_id)
                next_id += 1
                cur = []
        if cur:
            # the routine runs off the end of decodable code without a control transfer
            blk = BasicBlock(next_id, cur[0].addr, cur[-1].next_addr, tuple(cur), r_entry)
            blocks[next_id] = blk
            by_routine_start[(r_entry, blk.start)] = next_id
            routine.blocks.append(next_id)
            next_id += 1
        routine.entry_block = by_routine_start[(r_entry, r_entry)]

    for r_entry in sorted(explored):
        instrs, leaders, calls, jumps = explored[r_entry]
        routine = routines[r_entry]
        for bid in list(routine.blocks):
            blk = blocks[bid]
            t = blk.terminator
            succ = []

            def local(dst_addr, kind, taken):
                dst = by_routine_start.get((r_entry, dst_addr))
                if dst is None:
                    raise CfgError(f"no block at {dst_addr:#010x} in routine {routine.name}")
                edges.append(CfgEdge(bid, dst, kind, taken))
                succ.append(dst)

            if not t.is_control:
                if (r_entry, blk.end) in by_routine_start:
                    local(blk.end, EdgeKind.FALLTHROUGH, False)
                else:
                    raise CfgError(f"control runs past decoded code at {blk.end:#010x}")
            elif t.kind is Kind.BRANCH_COND:
                local(branch_target(t), EdgeKind.TAKEN, True)
                local(t.next_addr, EdgeKind.FALLTHROUGH, False)
            elif t.kind is Kind.BRANCH_UNCOND and t.mnemonic == "B":
                local(branch_target(t), EdgeKind.TAKEN, True)
            elif t.addr in jumps:
                for tgt in jumps[t.addr]:
                    local(tgt, EdgeKind.TAKEN, True)
            elif t.addr in calls:
                tail = t.kind is not Kind.CALL
                if tail:
                    stub = BasicBlock(next_id, t.addr, t.addr, (), r_entry, virtual=True)
                    blocks[next_id] = stub
                    routine.blocks.append(next_id)
                    ret_block = next_id
                    next_id += 1
                else:
                    ret_block = by_routine_start[(r_entry, t.next_addr)]
                site = CallSite(bid, t.addr, calls[t.addr], ret_block, tail)
                call_sites[bid] = site
                succ.append(ret_block)
                for callee in site.callees:
                    edges.append(CfgEdge(bid, routines[callee].entry_block, EdgeKind.CALL, True))
            local_succ[bid] = tuple(succ)

    for routine in routines.values():
        routine.return_blocks = [b for b in routine.blocks if blocks[b].is_return]
    for site in call_sites.values():
        for callee in site.callees:
            for rb in routines[callee].return_blocks:
                edges.append(CfgEdge(rb, site.return_block, EdgeKind.RETURN, not blocks[rb].virtual))

    cfg = Cfg(image, entry, blocks, routines, edges, call_sites, warnings)
    cfg._local_succ = local_succ
    for routine in routines.values():
        _find_loops(cfg, routine)
    _check_recursion(cfg, annotations)
    return cfg


def _find_loops(cfg, routine):
    g = nx.DiGraph()
    g.add_nodes_from(routine.blocks)
    for b in routine.blocks:
        for s in cfg.local_successors(b):
            g.add_edge(b, s)
    idom = nx.immediate_dominators(g, routine.entry_block)
    routine.idom = idom

    dominates = routine.dominates
    back = {}
    for u, v in _retreating_edges(g, routine.entry_block):
        if not dominates(v, u):
            routine.irreducible = True
            raise CfgError(f"irreducible control flow in {routine.name} at "
                           f"{cfg.blocks[v].start:#010x}")
        back.setdefault(v, []).append(u)
    loops = {}
    for h, latches in back.items():
        body = {h}
        stack = [x for x in latches if x != h]
        while stack:
            x = stack.pop()
            if x in body:
                continue
            body.add(x)
            stack.extend(p for p in g.predecessors(x) if p not in body)
        hb = cfg.blocks[h]
        loops[hb.start] = Loop(hb.start, routine.entry, h, frozenset(body),
                               tuple(sorted((l, h) for l in latches)))
    for lp in loops.values():
        parents = [o for o in loops.values() if o is not lp and lp.body < o.body]
        if parents:
            parent = min(parents, key=lambda o: len(o.body))
            lp.parent = parent.header
        lp.depth = 1 + len(parents)
    routine.loops = dict(sorted(loops.items()))


def _retreating_edges(g, root):
    """Edges ``u -> v`` where ``v`` is on the DFS stack when ``u`` is expanded."""
    out = []
    on_stack = {root}
    seen = {root}
    stack = [(root, iter(sorted(g.successors(root))))]
    while stack:
        u, it = stack[-1]
        for v in it:
            if v in on_stack:
                out.append((u, v))
            elif v not in seen:
                seen.add(v)
                on_stack.add(v)
                stack.append((v, iter(sorted(g.successors(v)))))
                break
        else:
            stack.pop()
            on_stack.discard(u)
    return out


def _check_recursion(cfg, annotations):
    cg = nx.DiGraph()
    cg.add_nodes_from(cfg.routines)
    for site in cfg.call_sites.values():
        caller = cfg.blocks[site.block].routine
        for c in site.callees:
            cg.add_edge(caller, c)
    for scc in nx.strongly_connected_components(cg):
        r = next(iter(scc))
        if len(scc) > 1 or cg.has_edge(r, r):
            for routine in scc:
                if routine not in annotations.recursion:
                    raise CfgError(f"recursion through {cfg.routines[routine].name} "
                                   f"needs 'recursion {cfg.routines[routine].name} depth <n>;'")
    cfg.call_graph = cg


# ---------------------------------------------------------------- contexts


@dataclass(frozen=True)
class Context:
    callstring: tuple = ()
    loops: tuple = ()

    def label(self):
        parts = []
        if self.callstring:
            parts.append("<" + ",".join(f"{a:x}" for a in self.callstring) + ">")
        for h, phase in self.loops:
            parts.append(f"{h:x}:{phase}")
        return " ".join(parts) or "-"


@dataclass
class Node:
    id: int
    block: int | None
    context: Context
    routine: int | None = None


@dataclass
class CEdge:
    id: int
    src: int | None          # None for the virtual start edge
    dst: int | None          # None for virtual exit edges
    kind: EdgeKind
    taken_flag: bool
    local_src: int | None = None   # block on the intraprocedural side (call block for returns)


@dataclass
class LoopInstance:
    header: int
    key: tuple
    header_nodes: list
    entry_edges: list
    back_edges: list
    nodes: list


@dataclass
class CallGroup:
    """Calls into one callee context that all return to the same return-site node."""

    callee: int
    callee_ctx: tuple
    return_site: int
    call_edges: list = field(default_factory=list)
    return_edges: list = field(default_factory=list)


@dataclass
class RecursionGroup:
    routine: int
    depth: int
    call_edges: list
    external_edges: list
    includes_start: bool


@dataclass
class ContextualCfg:
    cfg: object
    nodes: list
    edges: list
    entry: int
    start_edge: int
    exit_edges: list
    loop_instances: list
    call_groups: list
    recursion_groups: list = field(default_factory=list)
    k: int = 1
    loop_mode: str = "first-rest"

    def out_edges(self, n):
        return self._out.get(n, [])

    def in_edges(self, n):
        return self._in.get(n, [])

    def index(self):
        self._out = {}
        self._in = {}
        for e in self.edges:
            if e.src is not None:
                self._out.setdefault(e.src, []).append(e)
            if e.dst is not None:
                self._in.setdefault(e.dst, []).append(e)
        return self

    def nodes_of_block(self, block_id):
        return [n for n in self.nodes if n.block == block_id]


def expand_contexts(cfg, k=1, loop_mode="first-rest", annotations=None):
    if k < 0:
        raise ValueError("call-string depth must be >= 0")
    if loop_mode not in ("first-rest", "none"):
        raise ValueError(f"unknown loop context mode {loop_mode!r}")
    loops_of = {b: cfg.loops_containing(b) for b in cfg.blocks}

    def tags_on(src, dst, tags):
        if loop_mode == "none":
            return ()
        old = dict(tags)
        out = []
        for lp in loops_of[dst]:
            if src is not None and src in lp.body:
                phase = "rest" if dst == lp.header_block else old.get(lp.header, "first")
            else:
                phase = "first"
            out.append((lp.header, phase))
        return tuple(out)

    def trim(cs):
        return cs[len(cs) - k:] if k else ()

    nodes = []
    index = {}
    edges = []
    queue = deque()

    def node(block, ctx):
        key = (block, ctx)
        if key not in index:
            index[key] = len(nodes)
            nodes.append(Node(len(nodes), block, ctx, cfg.blocks[block].routine))
            queue.append(key)
        return index[key]

    def edge(src, dst, kind, taken, local_src):
        e = CEdge(len(edges), src, dst, kind, taken, local_src)
        edges.append(e)
        return e

    entry_block = cfg.routines[cfg.entry].entry_block
    entry = node(entry_block, Context((), tags_on(None, entry_block, ())))
    start = edge(None, entry, EdgeKind.ENTRY, False, None)
    groups = {}
    intra = {}
    for e in cfg.edges:
        if e.kind in (EdgeKind.FALLTHROUGH, EdgeKind.TAKEN):
            intra.setdefault(e.src, []).append(e)

    while queue:
        b, ctx = queue.popleft()
        n = index[(b, ctx)]
        for e in intra.get(b, []):
            d = node(e.dst, Context(ctx.callstring, tags_on(b, e.dst, ctx.loops)))
            edge(n, d, e.kind, e.taken_flag, b)
        site = cfg.call_sites.get(b)
        if site is None:
            continue
        rs = node(site.return_block, Context(ctx.callstring, tags_on(b, site.return_block, ctx.loops)))
        for callee in site.callees:
            cs = trim(ctx.callstring + (site.addr,))
            eb = cfg.routines[callee].entry_block
            d = node(eb, Context(cs, tags_on(None, eb, ())))
            ce = edge(n, d, EdgeKind.CALL, True, b)
            key = (callee, cs, rs)
            grp = groups.get(key)
            if grp is None:
                grp = groups[key] = CallGroup(callee, cs, rs)
            grp.call_edges.append(ce.id)

    returns_by = {}
    for nd in nodes:
        blk = cfg.blocks[nd.block]
        if blk.is_return:
            returns_by.setdefault((blk.routine, nd.context.callstring), []).append(nd.id)
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2])):
        grp = groups[key]
        site_block = cfg.blocks[nodes[grp.return_site].block]
        call_block = next(cs.block for cs in cfg.call_sites.values() if cs.return_block == site_block.id)
        for r in returns_by.get((grp.callee, grp.callee_ctx), []):
            taken = not cfg.blocks[nodes[r].block].virtual
            e = edge(r, grp.return_site, EdgeKind.RETURN, taken, call_block)
            grp.return_edges.append(e.id)
    exits = []
    for r in returns_by.get((cfg.entry, ()), []):
        taken = not cfg.blocks[nodes[r].block].virtual
        exits.append(edge(r, None, EdgeKind.RETURN, taken, None).id)

    ctx_cfg = ContextualCfg(cfg, nodes, edges, entry, start.id, exits, [],
                            [groups[k] for k in sorted(groups, key=lambda k: (k[0], k[1], k[2]))],
                            k=k, loop_mode=loop_mode)
    ctx_cfg.index()
    ctx_cfg.loop_instances = _loop_instances(ctx_cfg, cfg, loops_of)
    if annotations is not None:
        ctx_cfg.recursion_groups = _recursion_groups(ctx_cfg, cfg, annotations)
    return ctx_cfg


def _loop_instances(ctx_cfg, cfg, loops_of):
    inst = {}
    for nd in ctx_cfg.nodes:
        tags = dict(nd.context.loops)
        for depth, lp in enumerate(loops_of[nd.block]):
            outer = tuple((h, tags.get(h)) for h in (o.header for o in loops_of[nd.block][:depth]))
            if ctx_cfg.loop_mode == "none":
                outer = ()
            key = (lp.routine, lp.header, nd.context.callstring, outer)
            li = inst.get(key)
            if li is None:
                li = inst[key] = LoopInstance(lp.header, key, [], [], [], [])
            li.nodes.append(nd.id)
            if nd.block == lp.header_block:
                li.header_nodes.append(nd.id)
    for li in inst.values():
        lp = cfg.loop(li.header)
        for h in li.header_nodes:
            for e in ctx_cfg.in_edges(h):
                if e.local_src is not None and e.local_src in lp.body:
                    li.back_edges.append(e.id)
                else:
                    li.entry_edges.append(e.id)
    return [inst[k] for k in sorted(inst, key=lambda k: (k[0], k[1], k[2], str(k[3])))]


def _recursion_groups(ctx_cfg, cfg, annotations):
    out = []
    scc_of = {}
    for scc in nx.strongly_connected_components(cfg.call_graph):
        for r in scc:
            scc_of[r] = scc
    for routine, depth in sorted(annotations.recursion.items()):
        if routine not in cfg.routines:
            continue
        eb = cfg.routines[routine].entry_block
        calls, external = [], []
        for e in ctx_cfg.edges:
            if e.kind is EdgeKind.CALL and ctx_cfg.nodes[e.dst].block == eb:
                calls.append(e.id)
                caller = ctx_cfg.nodes[e.src].routine
                if caller not in scc_of[routine]:
                    external.append(e.id)
        out.append(RecursionGroup(routine, depth, calls, external, routine == cfg.entry))
    return out
