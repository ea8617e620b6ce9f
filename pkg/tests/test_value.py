import pytest

from programs import (LOCKSTEP, counted_loop, counted_loop_cases, image, make_rng, random_straight_line)
from wcec import sim, value
from wcec.annotations import parse_annotations
from wcec.cfg import EdgeKind, expand_contexts, reconstruct
from wcec.errors import UnboundedLoop
from wcec.isa import SP
from wcec.loader import RegionKind
from wcec.value import LoopBound, Provenance, Transfer, bound_for


def _analyze(src, ann=None, k=1, mode="first-rest"):
    img = image(src)
    a = parse_annotations(ann).resolve(img) if ann else None
    cfg = reconstruct(img, annotations=a)
    ctx = expand_contexts(cfg, k, mode, annotations=a)
    return img, cfg, ctx, value.analyze(ctx, img, a)


def _contains(val, concrete, sp0):
    if val.is_bottom:
        return False
    if val.base == "sp":
        return ((concrete - sp0) & 0xFFFF_FFFF) in val.itv
    return concrete in val.itv


def test_counted_loop_example():
    img, cfg, ctx, res = _analyze("main:\nmovs r0,#0\nloop: adds r0,#1\ncmp r0,#10\nblt loop\nbx lr")
    (lp,) = cfg.loops()
    b = res.loop_bounds[lp.header]
    assert (b.min, b.max, b.provenance) == (10, 10, Provenance.ANALYSIS)
    facts = sim.derive_flow_facts(sim.run(img), cfg)
    assert facts.loop_bounds[lp.header] == (0, 10)


@pytest.mark.parametrize("case", counted_loop_cases(make_rng(1)), ids=lambda c: "-".join(map(str, c)))
def test_counted_loops_are_exact(case):
    img, cfg, ctx, res = _analyze(counted_loop(*case))
    (lp,) = cfg.loops()
    observed = sim.derive_flow_facts(sim.run(img), cfg).loop_bounds[lp.header][1]
    b = res.loop_bounds[lp.header]
    assert b is not None and (b.min, b.max) == (observed, observed)


def test_nested_and_callee_loops():
    src = LOCKSTEP[[n for n, *_ in LOCKSTEP].index("nested-4x5")][1]
    img, cfg, ctx, res = _analyze(src)
    got = {h: (b.min, b.max) for h, b in res.loop_bounds.items()}
    assert sorted(got.values()) == [(4, 4), (5, 5)]
    src = LOCKSTEP[[n for n, *_ in LOCKSTEP].index("callee-loop")][1]
    img, cfg, ctx, res = _analyze(src)
    assert sorted((b.min, b.max) for b in res.loop_bounds.values()) == [(2, 2), (4, 4)]


def test_literal_load_is_flash_and_ram_pointer_is_ram():
    img, cfg, ctx, res = _analyze("main:\nldr r1, =0x20000000\nldr r0,[r1]\nstr r0,[r1,#4]\nbx lr")
    acc = res.accesses[ctx.entry]
    assert [(a.write, a.region) for a in acc] == [(False, RegionKind.FLASH), (False, RegionKind.RAM),
                                                 (True, RegionKind.RAM)]
    assert res.warnings == []


def test_unknown_pointer_warns():
    img, cfg, ctx, res = _analyze("main:\nldr r0,[r2]\nbx lr")
    assert res.accesses[ctx.entry][0].region is None
    assert [w[0] for w in res.warnings] == ["W-UNKNOWN-REGION"]


def test_region_annotation_overrides():
    src = "main:\nacc: ldr r0,[r2]\nbx lr"
    img, cfg, ctx, res = _analyze(src, "region acc = ram;")
    assert res.accesses[ctx.entry][0].region is RegionKind.RAM and res.warnings == []


def test_definitely_false_guard_marks_edge_infeasible():
    img, cfg, ctx, res = _analyze("main:\nmovs r0,#0\ncmp r0,#0\nbne L\nmovs r1,#1\nL: bx lr")
    L = img.symbol("L")
    taken = [e for e in ctx.edges if e.kind is EdgeKind.TAKEN]
    assert len(taken) == 1 and taken[0].id in res.infeasible_edges
    assert ctx.nodes[taken[0].dst].block == cfg.block_at(L).id


def test_bound_for_precedence():
    analysis = LoopBound(0x100, 10, 10, Provenance.ANALYSIS)

    class R:
        loop_bounds = {0x100: analysis}
        instance_bounds = {}

    ann = parse_annotations("loop 0x100 bound 1..8;")
    assert bound_for(0x100, R, ann, {0x100: (0, 7)}) == LoopBound(0x100, 1, 8, Provenance.ANNOTATION)
    assert bound_for(0x100, R, None, {0x100: (0, 7)}) is analysis

    class Empty:
        loop_bounds = {0x100: None}
        instance_bounds = {}

    assert bound_for(0x100, Empty, None, {0x100: (0, 7)}) == LoopBound(0x100, 0, 7, Provenance.TRACE)
    with pytest.raises(UnboundedLoop, match="0x00000100"):
        bound_for(0x100, Empty, None, None)


def test_data_dependent_loop_has_no_bound():
    img, cfg, ctx, res = _analyze("main:\nldr r1, =0x20000000\nldr r0,[r1]\nloop: subs r0,#1\nbne loop\nbx lr")
    assert list(res.loop_bounds.values()) == [None]


def test_analysis_is_deterministic():
    src = LOCKSTEP[[n for n, *_ in LOCKSTEP].index("call-in-loop")][1]
    a = _analyze(src)[3]
    b = _analyze(src)[3]
    assert a.node_in == b.node_in and a.infeasible_edges == b.infeasible_edges
    assert a.instance_bounds == b.instance_bounds


def test_iterations_stay_below_cap():
    for case in counted_loop_cases(make_rng(2), per_shape=3):
        res = _analyze(counted_loop(*case))[3]
        assert res.iterations < value.VISIT_CAP


@pytest.mark.parametrize("seed", range(150))
def test_straight_line_soundness_per_instruction(seed):
    img = image(random_straight_line(make_rng(seed), n=16))
    cfg = reconstruct(img)
    ctx = expand_contexts(cfg)
    res = value.analyze(ctx, img)
    st = res.node_in[ctx.entry].copy()
    sp0, limit = sim.default_stack(img)
    mach = sim.Machine(img, sp0, limit)
    tf = Transfer(img)
    for ins in cfg.blocks[ctx.nodes[ctx.entry].block].instrs[:-1]:
        tf.step(st, ins)
        mach.step(ins)
        for r in list(range(13)) + [SP]:
            assert _contains(st.reg(r), mach.r[r], sp0), (ins.text, r, st.reg(r), hex(mach.r[r]))


def _run_blockwise(img, cfg, ctx, res, max_steps=50_000):
    """Step the machine; at each block entry every register must lie in some context's interval."""
    sp0, limit = sim.default_stack(img)
    mach = sim.Machine(img, sp0, limit)
    starts = {b.start: b.id for b in cfg.blocks.values() if not b.virtual}
    pc, prev = img.entry, None
    for _ in range(max_steps):
        if pc == sim.STOP_SENTINEL:
            return
        if pc in starts:
            b = starts[pc]
            nodes = [n.id for n in ctx.nodes_of_block(b)]
            live = [n for n in nodes if n not in res.infeasible_nodes]
            assert live, f"executed block {pc:#x} judged unreachable"
            for r in list(range(13)) + [SP]:
                assert any(_contains(res.node_in[n].reg(r), mach.r[r], sp0) for n in live), (hex(pc), r)
            if prev is not None:
                edges = [e for e in ctx.edges if e.src is not None and e.dst is not None
                         and ctx.nodes[e.src].block == prev and ctx.nodes[e.dst].block == b]
                if edges:
                    assert any(e.id not in res.infeasible_edges for e in edges)
            prev = b
        ins = mach.decode(pc)
        pc, _ = mach.step(ins)
    raise AssertionError("program did not finish")


@pytest.mark.parametrize("name,src,ann", LOCKSTEP, ids=[n for n, *_ in LOCKSTEP])
def test_block_entry_soundness_on_fixtures(name, src, ann):
    img, cfg, ctx, res = _analyze(src, ann)
    _run_blockwise(img, cfg, ctx, res)


@pytest.mark.parametrize("case", counted_loop_cases(make_rng(3), per_shape=4), ids=lambda c: "-".join(map(str, c)))
def test_block_entry_soundness_on_loops(case):
    img, cfg, ctx, res = _analyze(counted_loop(*case))
    _run_blockwise(img, cfg, ctx, res)
