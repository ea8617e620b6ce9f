"""Static prediction of the Cortex-M0 model counters and their pricing."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .loader import RegionKind
from .models import (FLASH_READ, INSTR_NOMUL, MUL, RAM_READ, RAM_WRITE, TAKEN_BRANCH,
                     EventVector, price)

__all__ = ["BlockCost", "count_events_block", "count_events_edge", "price", "node_costs"]


@dataclass(frozen=True)
class BlockCost:
    node: int
    events: EventVector
    energy: Fraction


def count_events_block(block, accesses=()):
    """Counters for one execution of ``block``.

    ``accesses`` are the value-analysis access records for the block in one
    context.  Reads of unknown region are charged as Flash reads (the larger
    read coefficient); every write is a RAM write, the model's only write
    counter.
    """
    ev = EventVector.zero()
    muls = sum(1 for i in block.instrs if i.mnemonic == "MULS")
    ev[INSTR_NOMUL] = len(block.instrs) - muls
    ev[MUL] = muls
    for a in accesses:
        if a.write:
            ev[RAM_WRITE] += a.count
        elif a.region is RegionKind.RAM:
            ev[RAM_READ] += a.count
        else:
            ev[FLASH_READ] += a.count
    return ev


def count_events_edge(edge):
    ev = EventVector.zero()
    if edge.taken_flag:
        ev[TAKEN_BRANCH] = 1
    return ev


def node_costs(ctx_cfg, value_results, model):
    """(node costs, edge costs) as lists of BlockCost indexed by node / edge id."""
    nodes = []
    for nd in ctx_cfg.nodes:
        blk = ctx_cfg.cfg.blocks[nd.block]
        ev = count_events_block(blk, value_results.accesses.get(nd.id, ()))
        nodes.append(BlockCost(nd.id, ev, price(_restrict(ev, model), model, intercept=False)))
    edges = []
    for e in ctx_cfg.edges:
        ev = count_events_edge(e)
        edges.append(BlockCost(e.id, ev, price(_restrict(ev, model), model, intercept=False)))
    return nodes, edges


def _restrict(ev, model):
    # a static model may use a subset of the six counters; others carry no weight
    return {c: n for c, n in ev.items() if c in model.coefficients}

