"""Interval value analysis over the contextual CFG.

Registers hold either an absolute interval or an interval offset from the
entry stack pointer (``base == "sp"``).  Flags are kept as a single relational
fact produced by the last flag-setting instruction.  Loop bounds come from a
counter pattern: one register stepped by constants once per iteration and
tested against a loop-invariant value by an exit test that dominates every
latch.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from math import gcd

from .cfg import EdgeKind
from .errors import UnboundedLoop
from .interval import BOTTOM, M32, MASK, SMAX, SMIN, TOP, Interval, make
from .isa import LR, PC, SP, Kind, literal_address, regs_written
from .loader import RegionKind

log = logging.getLogger(__name__)

WIDEN_AFTER = 3
VISIT_CAP = 10_000
CALLER_SAVED = frozenset({0, 1, 2, 3, 12, LR})


@dataclass(frozen=True)
class Val:
    base: str | None
    itv: Interval

    @property
    def is_bottom(self):
        return self.itv.empty

    def join(self, other):
        if self.itv.empty:
            return other
        if other.itv.empty:
            return self
        if self.base != other.base:
            return TOPV
        return Val(self.base, self.itv.join(other.itv))

    def leq(self, other):
        if self.itv.empty:
            return True
        if other.base is None and other.itv.is_top:
            return True
        return self.base == other.base and self.itv.leq(other.itv)

    def widen(self, other, thresholds):
        if self.base != other.base and not self.itv.empty and not other.itv.empty:
            return TOPV
        base = self.base if not self.itv.empty else other.base
        return Val(base, self.itv.widen(other.itv, thresholds))


TOPV = Val(None, TOP)


def absv(itv):
    return Val(None, itv)


def const(v):
    return Val(None, Interval.const(v))


@dataclass(frozen=True)
class Fact:
    """Flags = compare(reg + off, rhs) (kind ``cmp``) or N/Z of ``reg + off`` (kind ``nz``)."""

    kind: str
    reg: int
    off: int
    rhs: object = None  # ("imm", Interval) or ("reg", r)

    def uses(self, regs):
        return self.reg in regs or (self.rhs is not None and self.rhs[0] == "reg" and self.rhs[1] in regs)


@dataclass
class State:
    regs: tuple
    mem: dict = field(default_factory=dict)      # absolute word address -> Val
    stack: dict = field(default_factory=dict)    # sp-relative word offset -> Val
    flags: Fact | None = None
    bottom: bool = False

    @staticmethod
    def initial():
        regs = [TOPV] * 16
        regs[SP] = Val("sp", Interval.const(0))
        return State(tuple(regs))

    @staticmethod
    def bot():
        return State(tuple([Val(None, BOTTOM)] * 16), bottom=True)

    def copy(self):
        return State(self.regs, dict(self.mem), dict(self.stack), self.flags, self.bottom)

    def reg(self, r):
        return self.regs[r]

    def set(self, r, v):
        regs = list(self.regs)
        regs[r] = v
        self.regs = tuple(regs)

    def join(self, other):
        if self.bottom:
            return other
        if other.bottom:
            return self
        regs = tuple(a.join(b) for a, b in zip(self.regs, other.regs))
        mem = {k: v.join(other.mem[k]) for k, v in self.mem.items() if k in other.mem}
        stack = {k: v.join(other.stack[k]) for k, v in self.stack.items() if k in other.stack}
        flags = self.flags if self.flags == other.flags else None
        return State(regs, mem, stack, flags)

    def widen(self, other, thresholds):
        if self.bottom:
            return other
        if other.bottom:
            return self
        regs = tuple(a.widen(b, thresholds) for a, b in zip(self.regs, other.regs))
        mem = {k: v.widen(other.mem[k], thresholds) for k, v in self.mem.items() if k in other.mem}
        stack = {k: v.widen(other.stack[k], thresholds) for k, v in self.stack.items() if k in other.stack}
        flags = self.flags if self.flags == other.flags else None
        return State(regs, mem, stack, flags)

    def leq(self, other):
        if self.bottom:
            return True
        if other.bottom:
            return False
        if not all(a.leq(b) for a, b in zip(self.regs, other.regs)):
            return False
        for k, v in other.mem.items():
            if k not in self.mem or not self.mem[k].leq(v):
                return False
        for k, v in other.stack.items():
            if k not in self.stack or not self.stack[k].leq(v):
                return False
        return other.flags is None or self.flags == other.flags

    def __eq__(self, other):
        return isinstance(other, State) and self.leq(other) and other.leq(self)


@dataclass(frozen=True)
class Access:
    addr: int          # instruction address
    write: bool
    count: int
    region: RegionKind | None   # Flash, Ram, or None for unknown
    device: bool = False


class Provenance(str, enum.Enum):
    ANALYSIS = "analysis"
    ANNOTATION = "annotation"
    TRACE = "trace"


@dataclass(frozen=True)
class LoopBound:
    loop: int
    min: int
    max: int
    provenance: Provenance

    def __post_init__(self):
        if not 0 <= self.min <= self.max:
            raise ValueError(f"bad loop bound {self.min}..{self.max}")


@dataclass
class ValueResults:
    ctx_cfg: object
    node_in: list
    node_out: list
    edge_states: dict
    infeasible_edges: set
    infeasible_nodes: set
    accesses: dict
    instance_bounds: dict            # loop-instance key -> LoopBound
    thresholds: tuple = ()
    warnings: list = field(default_factory=list)
    iterations: int = 0

    @property
    def loop_bounds(self):
        """Per loop header: the widest analysis bound over its instances."""
        out = {}
        for key, b in self.instance_bounds.items():
            h = key[1]
            prev = out.get(h)
            out[h] = b if prev is None else LoopBound(h, min(prev.min, b.min), max(prev.max, b.max),
                                                      Provenance.ANALYSIS)
        for li in self.ctx_cfg.loop_instances:
            out.setdefault(li.header, None)
        return out

    def register_at(self, node, r, after=False):
        st = (self.node_out if after else self.node_in)[node]
        return st.reg(r)


# ------------------------------------------------------------------ classification


def _uniform_kind(image, lo, hi):
    """Region kind shared by every byte of ``[lo, hi]``, else ``None``."""
    if lo < 0 or hi > MASK:
        return None
    kinds = set()
    for r in image.regions:
        if r.base <= hi and lo < r.end:
            kinds.add(r.kind)
            if r.base <= lo and hi < r.end:
                return r.kind
    for e in image.memory_map:
        if e.base <= lo and hi < e.end:
            kinds.add(e.kind)
            return e.kind if len(kinds) == 1 else None
    return None


def classify_access(image, val, nbytes, override=None):
    """(region or None, device flag) for an access of ``nbytes`` starting at ``val``."""
    if override is not None:
        return override, False
    if val.is_bottom:
        return None, False
    if val.base == "sp":
        return RegionKind.RAM, False
    if val.itv.is_top:
        return None, False
    kinds = set()
    for lo, hi in val.itv.unsigned_pieces():
        kinds.add(_uniform_kind(image, lo, hi + nbytes - 1))
    if len(kinds) != 1:
        return None, False
    k = kinds.pop()
    if k in (RegionKind.FLASH, RegionKind.RAM):
        return k, False
    return None, k is RegionKind.DEVICE


# ------------------------------------------------------------------ transfer


def sets_flags(ins):
    m = ins.mnemonic
    if ins.is_control or m in ("MRS",):
        return False
    if m in ("CMP", "CMN", "TST", "MSR"):
        return True
    return m.endswith("S") and ins.enc not in ("hireg", "sp_adj", "add_sp_rd", "adr")


class Transfer:
    def __init__(self, image, annotations=None):
        self.image = image
        self.regions = dict(annotations.regions) if annotations is not None else {}

    # memory helpers -------------------------------------------------
    def _flash_word(self, addr, width, signed):
        r = self.image.region_at(addr)
        if r is None or r.writable or r.kind is not RegionKind.FLASH or addr + width > r.end:
            return None
        data = self.image.read(addr, width)
        if data is None:
            return None
        v = int.from_bytes(data, "little")
        if signed and v & (1 << (8 * width - 1)):
            v -= 1 << (8 * width)
        return v

    def load(self, st, addr, width, signed=False):
        """Abstract value read from ``addr`` (a Val)."""
        default = Interval.const(0)
        if width == 4:
            default = TOP
        elif signed:
            default = make(-(1 << (8 * width - 1)), (1 << (8 * width - 1)) - 1)
        else:
            default = make(0, (1 << (8 * width)) - 1)
        if addr.is_bottom:
            return Val(None, BOTTOM)
        if addr.base == "sp":
            if addr.itv.is_const and width == 4:
                off = addr.itv.lo
                if off % 4 == 0 and off in st.stack:
                    return st.stack[off]
            return absv(default)
        itv = addr.itv
        if itv.is_top:
            return absv(default)
        pieces = itv.unsigned_pieces()
        if sum(hi - lo + 1 for lo, hi in pieces) <= 64:
            out = None
            for lo, hi in pieces:
                for a in range(lo, hi + 1):
                    v = self._flash_word(a, width, signed)
                    if v is not None:
                        cur = const(v)
                    elif width == 4 and a % 4 == 0 and a in st.mem:
                        cur = st.mem[a]
                    else:
                        return absv(default)
                    out = cur if out is None else out.join(cur)
            return out if out is not None else absv(default)
        return absv(default)

    def store(self, st, addr, width, val):
        if addr.is_bottom:
            return
        if addr.base == "sp":
            if addr.itv.is_const:
                off = addr.itv.lo
                if width == 4 and off % 4 == 0:
                    st.stack[off] = val
                else:
                    st.stack.pop(off - off % 4, None)
                    st.stack.pop((off + width - 1) - (off + width - 1) % 4, None)
                return
            if addr.itv.width < 4096 and addr.itv.lo >= -(1 << 30):
                lo, hi = addr.itv.lo, addr.itv.hi + width
                for k in [k for k in st.stack if lo - 4 < k < hi]:
                    del st.stack[k]
                return
            st.stack.clear()
            return
        itv = addr.itv
        if itv.is_const:
            a = itv.value()
            if width == 4 and a % 4 == 0:
                st.mem[a] = val
            else:
                st.mem.pop(a - a % 4, None)
                st.mem.pop((a + width - 1) - (a + width - 1) % 4, None)
            return
        if not itv.is_top and itv.width < 4096:
            for lo, hi in itv.unsigned_pieces():
                for k in [k for k in st.mem if lo - 4 < k < hi + width]:
                    del st.mem[k]
            return
        # unknown pointer: forget everything written so far
        st.mem.clear()
        st.stack.clear()

    # instruction transfer -------------------------------------------
    def step(self, st, ins, accesses=None):
        """Apply ``ins`` to ``st`` in place."""
        m, e, o = ins.mnemonic, ins.enc, ins.operands
        R = st.reg
        new_fact = None
        keep_fact = not sets_flags(ins)
        written = regs_written(ins)

        def addv(a, b):
            if a.base and b.base:
                return TOPV
            return Val(a.base or b.base, a.itv.add(b.itv))

        def subv(a, b):
            if b.base:
                return Val(None, a.itv.sub(b.itv)) if a.base == b.base else TOPV
            return Val(a.base, a.itv.sub(b.itv))

        def absreg(r):
            v = R(r)
            return v.itv if v.base is None else TOP

        def note(write, count, addr_val, nbytes):
            if accesses is None:
                return
            region, device = classify_access(self.image, addr_val, nbytes, self.regions.get(ins.addr))
            accesses.append(Access(ins.addr, write, count, region, device))

        if e == "mov_reg":
            st.set(o[0], R(o[1]))
            new_fact = Fact("nz", o[0], 0)
        elif e == "shift_imm":
            x = absreg(o[1])
            k = o[2]
            if m == "LSLS":
                res = x.shl(k)
            elif m == "LSRS":
                res = x.lshr(k or 32)
            else:
                res = x.ashr(k or 32)
            st.set(o[0], absv(res))
            new_fact = Fact("nz", o[0], 0)
        elif e in ("addsub_reg", "addsub_imm3"):
            rd, rn, x = o
            b = R(x) if e == "addsub_reg" else const(x)
            a = R(rn)
            res = addv(a, b) if m == "ADDS" else subv(a, b)
            if m == "SUBS":
                if e == "addsub_imm3":
                    new_fact = Fact("cmp", rn, 0, ("imm", Interval.const(x))) if rd != rn else \
                        Fact("cmp", rd, x, ("imm", Interval.const(x)))
                elif rd not in (rn, x):
                    new_fact = Fact("cmp", rn, 0, ("reg", x))
            else:
                new_fact = Fact("nz", rd, 0)
            st.set(rd, res)
        elif e == "imm8":
            rd, imm = o
            if m == "MOVS":
                st.set(rd, const(imm))
                new_fact = Fact("nz", rd, 0)
            elif m == "CMP":
                new_fact = Fact("cmp", rd, 0, ("imm", Interval.const(imm)))
            elif m == "ADDS":
                st.set(rd, addv(R(rd), const(imm)))
                new_fact = Fact("nz", rd, 0)
            else:
                st.set(rd, subv(R(rd), const(imm)))
                new_fact = Fact("cmp", rd, imm, ("imm", Interval.const(imm)))
        elif e == "dp":
            rdn, rm = o
            a, b = absreg(rdn), absreg(rm)
            res = None
            if m == "ANDS":
                res = a.bitand(b)
            elif m == "EORS":
                res = a.bitor(b, xor=True)
            elif m == "ORRS":
                res = a.bitor(b)
            elif m == "BICS":
                res = a.bitand(b.invert())
            elif m == "MVNS":
                res = b.invert()
            elif m in ("LSLS", "LSRS", "ASRS", "RORS"):
                if b.is_const and m != "RORS":
                    k = b.value() & 0xFF
                    res = a.shl(k) if m == "LSLS" else a.lshr(k) if m == "LSRS" else a.ashr(k)
                elif m == "LSRS":
                    res = make(0, a.unsigned()[1])
                else:
                    res = TOP
            elif m == "ADCS":
                res = a.add(b).add(make(0, 1))
            elif m == "SBCS":
                res = a.sub(b).sub(make(0, 1))
            elif m == "CMP":
                new_fact = Fact("cmp", rdn, 0, ("reg", rm))
            if res is not None:
                st.set(rdn, absv(res))
                new_fact = Fact("nz", rdn, 0)
        elif e == "muls":
            rdm, rn, _ = o
            st.set(rdm, absv(absreg(rdm).mul(absreg(rn))))
            new_fact = Fact("nz", rdm, 0)
        elif e == "rsbs":
            st.set(o[0], absv(absreg(o[1]).neg()))
            new_fact = Fact("nz", o[0], 0)
        elif e == "hireg":
            rdn, rm = o
            src = const((ins.addr + 4) & MASK) if rm == PC else R(rm)
            if m == "MOV" and rdn != PC:
                st.set(rdn, src)
            elif m == "ADD" and rdn != PC:
                cur = const((ins.addr + 4) & MASK) if rdn == PC else R(rdn)
                st.set(rdn, addv(cur, src))
            elif m == "CMP":
                new_fact = Fact("cmp", rdn, 0, ("reg", rm))
        elif e in ("adr", "ldr_lit"):
            lit = literal_address(ins)
            if e == "adr":
                st.set(o[0], const(lit))
            else:
                note(False, 1, const(lit), 4)
                st.set(o[0], self.load(st, const(lit), 4))
        elif e == "add_sp_rd":
            st.set(o[0], addv(R(SP), const(o[1])))
        elif e == "sp_adj":
            st.set(SP, addv(R(SP), const(o[0])) if m == "ADD" else subv(R(SP), const(o[0])))
        elif e == "extend":
            rd, rm = o
            x = absreg(rm)
            if m == "UXTB":
                res = x.zext(8)
            elif m == "UXTH":
                res = x.zext(16)
            elif m == "SXTB":
                res = x.sext(8)
            elif m == "SXTH":
                res = x.sext(16)
            elif x.is_const:
                v = x.value()
                b = v.to_bytes(4, "little")
                if m == "REV":
                    res = Interval.const(int.from_bytes(b, "big"))
                elif m == "REV16":
                    res = Interval.const(int.from_bytes(bytes([b[1], b[0], b[3], b[2]]), "little"))
                else:
                    h = (b[0] << 8) | b[1]
                    res = Interval.const(h - 0x10000 if h & 0x8000 else h)
            else:
                res = TOP if m != "REVSH" else make(-0x8000, 0x7FFF)
            st.set(rd, absv(res))
        elif e in ("ldst_reg", "ldst_imm", "ldst_sp"):
            if e == "ldst_sp":
                rt, imm = o
                addr = addv(R(SP), const(imm))
            elif e == "ldst_imm":
                rt, rn, imm = o
                addr = addv(R(rn), const(imm))
            else:
                rt, rn, rm = o
                addr = addv(R(rn), R(rm))
            width = ins.mem_width
            if m.startswith("LDR"):
                note(False, 1, addr, width)
                st.set(rt, self.load(st, addr, width, signed=m in ("LDRSB", "LDRSH")))
            else:
                note(True, 1, addr, width)
                v = R(rt)
                if width < 4:
                    v = absv(absreg(rt).zext(8 * width))
                self.store(st, addr, width, v)
        elif e == "pushpop":
            regs = o[0]
            n = len(regs)
            sp = R(SP)
            if m == "PUSH":
                base = subv(sp, const(4 * n))
                note(True, n, base, 4 * n)
                for i, r in enumerate(regs):
                    self.store(st, addv(base, const(4 * i)), 4, R(r))
                st.set(SP, base)
            else:
                note(False, n, sp, 4 * n)
                vals = [self.load(st, addv(sp, const(4 * i)), 4) for i in range(n)]
                for r, v in zip(regs, vals):
                    if r != PC:
                        st.set(r, v)
                st.set(SP, addv(sp, const(4 * n)))
        elif e == "ldstm":
            rn, regs = o
            n = len(regs)
            base = R(rn)
            if m == "LDM":
                note(False, n, base, 4 * n)
                vals = [self.load(st, addv(base, const(4 * i)), 4) for i in range(n)]
                if rn not in regs:
                    st.set(rn, addv(base, const(4 * n)))
                for r, v in zip(regs, vals):
                    st.set(r, v)
            else:
                note(True, n, base, 4 * n)
                for i, r in enumerate(regs):
                    self.store(st, addv(base, const(4 * i)), 4, R(r))
                st.set(rn, addv(base, const(4 * n)))
        elif m in ("BL", "BLX"):
            st.set(LR, const((ins.next_addr | 1) & MASK))
        elif e == "mrs":
            st.set(o[0], TOPV if o[1] not in (8, 9) else TOPV)
        elif e == "msr":
            if o[0] in (8, 9):
                st.set(SP, TOPV)
                st.stack.clear()
        # flags bookkeeping
        if keep_fact:
            if st.flags is not None and st.flags.uses(written):
                st.flags = None
        else:
            st.flags = new_fact
        return st

    def block(self, st, block, accesses=None):
        if st.bottom:
            return st
        st = st.copy()
        for ins in block.instrs:
            self.step(st, ins, accesses)
        return st


# ------------------------------------------------------------------ condition refinement

_NEGATE = {"EQ": "NE", "NE": "EQ", "HS": "LO", "LO": "HS", "HI": "LS", "LS": "HI",
           "GE": "LT", "LT": "GE", "GT": "LE", "LE": "GT", "MI": "PL", "PL": "MI",
           "VS": "VC", "VC": "VS"}
_SWAP = {"EQ": "EQ", "NE": "NE", "HS": "LS", "LS": "HS", "LO": "HI", "HI": "LO",
         "GE": "LE", "LE": "GE", "LT": "GT", "GT": "LT"}


def _restrict(x, rel, y):
    """Values of interval ``x`` for which ``x rel y`` can hold, ``y`` an interval."""
    if x.empty or y.empty:
        return BOTTOM
    if rel == "EQ":
        return x.meet_pieces(y.unsigned_pieces())
    if rel == "NE":
        if y.is_const:
            c = y.value()
            return x.meet_pieces([(0, c - 1), (c + 1, MASK)] if 0 < c < MASK else
                                 [(1, MASK)] if c == 0 else [(0, MASK - 1)])
        return x
    if rel in ("HS", "HI", "LO", "LS"):
        ylo, yhi = y.unsigned()
        rng = {"HS": (ylo, MASK), "HI": (ylo + 1, MASK), "LO": (0, yhi - 1), "LS": (0, yhi)}[rel]
        return x.meet_pieces([rng]) if rng[0] <= rng[1] else BOTTOM
    if rel in ("GE", "GT", "LT", "LE"):
        ylo, yhi = y.signed()
        rng = {"GE": (ylo, SMAX), "GT": (ylo + 1, SMAX), "LT": (SMIN, yhi - 1), "LE": (SMIN, yhi)}[rel]
        return x.meet_pieces([rng], signed=True) if rng[0] <= rng[1] else BOTTOM
    return x


def refine(st, cond, truth):
    """State on the edge where condition ``cond`` evaluates to ``truth``."""
    if st.bottom or st.flags is None or cond is None:
        return st
    rel = cond if truth else _NEGATE[cond]
    f = st.flags
    x_val = st.reg(f.reg)
    if x_val.base is not None:
        return st
    x = x_val.itv.add(Interval.const(f.off)) if f.off else x_val.itv
    out = st.copy()
    if f.kind == "nz":
        if rel in ("EQ", "NE"):
            nx_ = _restrict(x, rel, Interval.const(0))
        elif rel == "MI":
            nx_ = x.meet_pieces([(SMIN, -1)], signed=True)
        elif rel == "PL":
            nx_ = x.meet_pieces([(0, SMAX)], signed=True)
        else:
            return st
        y_reg = None
    else:
        if rel in ("MI", "PL", "VS", "VC"):
            return st
        if f.rhs[0] == "imm":
            y, y_reg = f.rhs[1], None
        else:
            yv = st.reg(f.rhs[1])
            if yv.base is not None:
                return st
            y, y_reg = yv.itv, f.rhs[1]
        nx_ = _restrict(x, rel, y)
        if y_reg is not None and y_reg != f.reg and not nx_.empty:
            ny = _restrict(y, _SWAP[rel], nx_)
            if ny.empty:
                return State.bot()
            out.set(y_reg, absv(ny))
    if nx_.empty:
        return State.bot()
    newreg = nx_.sub(Interval.const(f.off)) if f.off else nx_
    out.set(f.reg, absv(newreg))
    return out


# ------------------------------------------------------------------ fixpoint


def _thresholds(ctx_cfg, image):
    ts = {0, 1, -1, MASK, SMIN, SMAX}
    for k in range(33):
        ts.update({1 << k, (1 << k) - 1, -(1 << k)})
    for blk in ctx_cfg.cfg.blocks.values():
        for ins in blk.instrs:
            if ins.mnemonic == "CMP" and ins.enc == "imm8":
                c = ins.operands[1]
                ts.update({c, c - 1, c + 1})
            if ins.enc == "ldr_lit":
                v = image.read_u32(literal_address(ins))
                if v is not None:
                    ts.update({v, v - 1, v + 1})
    for r in image.regions:
        ts.update({r.base, r.end, r.end - 1})
    for e in image.memory_map:
        ts.update({e.base, e.end, e.end - 1})
    return tuple(sorted(t for t in ts if SMIN <= t <= MASK))


def _rpo(ctx_cfg):
    order, back = [], set()
    seen = {ctx_cfg.entry}
    on_stack = {ctx_cfg.entry}
    stack = [(ctx_cfg.entry, iter(ctx_cfg.out_edges(ctx_cfg.entry)))]
    while stack:
        n, it = stack[-1]
        for e in it:
            d = e.dst
            if d is None:
                continue
            if d in on_stack:
                back.add(d)
            elif d not in seen:
                seen.add(d)
                on_stack.add(d)
                stack.append((d, iter(ctx_cfg.out_edges(d))))
                break
        else:
            stack.pop()
            on_stack.discard(n)
            order.append(n)
    order.reverse()
    return order, back


class _Engine:
    def __init__(self, ctx_cfg, image, annotations, widen_after):
        self.cc = ctx_cfg
        self.cfg = ctx_cfg.cfg
        self.tf = Transfer(image, annotations)
        self.widen_after = widen_after
        self.thresholds = _thresholds(ctx_cfg, image)
        self.order, self.wpoints = _rpo(ctx_cfg)
        self.rank = {n: i for i, n in enumerate(self.order)}

    def edge_state(self, e, out):
        if e.kind is EdgeKind.ENTRY:
            return State.initial()
        st = out[e.src]
        if e.kind in (EdgeKind.TAKEN, EdgeKind.FALLTHROUGH):
            t = self.cfg.blocks[self.cc.nodes[e.src].block].terminator
            if t is not None and t.kind is Kind.BRANCH_COND:
                return refine(st, t.cond, e.kind is EdgeKind.TAKEN)
        return st

    def incoming(self, n, out):
        acc = State.bot()
        for e in self.cc.in_edges(n):
            acc = acc.join(self.edge_state(e, out))
        return acc

    def run(self):
        import heapq

        nn = len(self.cc.nodes)
        inn = [State.bot() for _ in range(nn)]
        out = [State.bot() for _ in range(nn)]
        visits = [0] * nn
        heap = [(self.rank[self.cc.entry], self.cc.entry)]
        queued = {self.cc.entry}
        total = 0
        while heap:
            _, n = heapq.heappop(heap)
            queued.discard(n)
            total += 1
            new_in = self.incoming(n, out)
            visits[n] += 1
            if visits[n] > VISIT_CAP:
                raise RuntimeError(f"value analysis did not converge at node {n}")
            if n in self.wpoints and visits[n] > self.widen_after:
                new_in = inn[n].widen(new_in.join(inn[n]), self.thresholds)
            if visits[n] > 1 and new_in.leq(inn[n]) and inn[n].leq(new_in):
                continue
            inn[n] = new_in
            out[n] = self.tf.block(new_in, self.cfg.blocks[self.cc.nodes[n].block])
            for e in self.cc.out_edges(n):
                if e.dst is not None and e.dst not in queued:
                    queued.add(e.dst)
                    heapq.heappush(heap, (self.rank.get(e.dst, nn), e.dst))
        # one narrowing pass, kept only if the result is still a post-fixpoint
        n_in, n_out = list(inn), list(out)
        for n in self.order:
            st = self.incoming(n, n_out)
            if st.leq(n_in[n]):
                n_in[n] = st
                n_out[n] = self.tf.block(st, self.cfg.blocks[self.cc.nodes[n].block])
        if self._post_fixpoint(n_in, n_out):
            inn, out = n_in, n_out
        return inn, out, total

    def _post_fixpoint(self, inn, out):
        for e in self.cc.edges:
            if e.dst is None:
                continue
            if not self.edge_state(e, out).leq(inn[e.dst]):
                return False
        return True


def analyze(ctx_cfg, image, annotations=None, widen_after=WIDEN_AFTER):
    from .annotations import AnnotationSet

    annotations = annotations or AnnotationSet()
    eng = _Engine(ctx_cfg, image, annotations, widen_after)
    inn, out, total = eng.run()
    edge_states = {}
    infeasible_edges = set()
    for e in ctx_cfg.edges:
        if e.dst is None:
            st = out[e.src]
        else:
            st = eng.edge_state(e, out)
        edge_states[e.id] = st
        if st.bottom:
            infeasible_edges.add(e.id)
    infeasible_nodes = {n.id for n in ctx_cfg.nodes if inn[n.id].bottom}
    accesses = {}
    warnings = []
    for nd in ctx_cfg.nodes:
        acc = []
        if not inn[nd.id].bottom:
            eng.tf.block(inn[nd.id], ctx_cfg.cfg.blocks[nd.block], acc)
        else:
            # unreachable per analysis; classify conservatively for reporting
            eng.tf.block(State.initial(), ctx_cfg.cfg.blocks[nd.block], acc)
        accesses[nd.id] = acc
    seen = set()
    for nd_id, acc in accesses.items():
        if nd_id in infeasible_nodes:
            continue
        for a in acc:
            if a.region is None and (a.addr, a.write) not in seen:
                seen.add((a.addr, a.write))
                code = "W-DEVICE" if a.device else "W-UNKNOWN-REGION"
                what = "write" if a.write else "read"
                warnings.append((code, f"{what} at {a.addr:#010x} has unknown region; priced at the worst "
                                       f"coefficient"))
    res = ValueResults(ctx_cfg, inn, out, edge_states, infeasible_edges, infeasible_nodes, accesses, {},
                       eng.thresholds, warnings, total)
    res.instance_bounds = {li.key: b for li in ctx_cfg.loop_instances
                           if (b := _instance_bound(ctx_cfg, res, li)) is not None}
    return res


# ------------------------------------------------------------------ loop bounds


def _evaluable(kind, rel):
    if kind == "nz":
        return rel in ("EQ", "NE", "MI", "PL")
    return rel not in ("MI", "PL", "VS", "VC")


def _holds(kind, rel, x, c):
    """Concrete evaluation of the relation on 32-bit values ``x``, ``c``."""
    x &= MASK
    c &= MASK
    sx = x - M32 if x > SMAX else x
    sc = c - M32 if c > SMAX else c
    if kind == "nz":
        return {"EQ": x == 0, "NE": x != 0, "MI": sx < 0, "PL": sx >= 0}[rel]
    return {"EQ": x == c, "NE": x != c, "HS": x >= c, "LO": x < c, "HI": x > c, "LS": x <= c,
            "GE": sx >= sc, "LT": sx < sc, "GT": sx > sc, "LE": sx <= sc}[rel]


def _first_exit(kind, stay_rel, start, step, c, swapped):
    """Smallest i >= 1 such that the stay relation fails at x_i = start + (i-1)*step.

    Returns None when the sequence never leaves (or only after a wraparound we
    decline to reason about).
    """
    def stays(x):
        if swapped:
            return _holds(kind, stay_rel, c, x)
        return _holds(kind, stay_rel, x, c)

    if not stays(start):
        return 1
    if step == 0:
        return None
    if stay_rel == "NE" or (kind == "nz" and stay_rel == "NE"):
        target = 0 if kind == "nz" else c
        # solve start + j*step == target (mod 2**32), j >= 1
        diff = (target - start) % M32
        g = gcd(step % M32, M32)
        if diff % g:
            return None
        mod = M32 // g
        j = (diff // g) * pow((step % M32) // g, -1, mod) % mod
        return j + 1 if j >= 0 else None
    if stay_rel == "EQ":
        return 2 if not stays(start + step) else None
    # monotone relations: the sequence must not cross a seam of the comparison view
    signed = stay_rel in ("GE", "LT", "GT", "LE", "MI", "PL")
    lo_seam, hi_seam = (SMIN, SMAX) if signed else (0, MASK)
    s0 = start & MASK
    if signed and s0 > SMAX:
        s0 -= M32
    # binary search on i for the first failing iteration without wraparound
    limit = (hi_seam - s0) // step if step > 0 else (s0 - lo_seam) // -step
    if limit <= 0:
        return None
    hi_i = limit + 1
    if stays(s0 + (hi_i - 1) * step):
        return None
    lo_i = 1
    while hi_i - lo_i > 1:
        mid = (lo_i + hi_i) // 2
        if stays(s0 + (mid - 1) * step):
            lo_i = mid
        else:
            hi_i = mid
    return hi_i


def _instance_bound(ctx_cfg, res, li):
    cfg = ctx_cfg.cfg
    lp = cfg.loop(li.header)
    routine = cfg.routines[lp.routine]
    latches = [u for u, _ in lp.back_edges]
    inner = {b for o in routine.loops.values() if o.parent is not None and o is not lp
             and o.body < lp.body for b in o.body}
    has_call = any(b in cfg.call_sites for b in lp.body)
    entry_states = [res.edge_states[eid] for eid in li.entry_edges if not res.edge_states[eid].bottom]
    if not entry_states:
        return LoopBound(lp.header, 0, 0, Provenance.ANALYSIS) if li.entry_edges else None
    entry = entry_states[0]
    for s in entry_states[1:]:
        entry = entry.join(s)

    exits = {e.src for e in cfg.edges if e.src in lp.body and e.dst not in lp.body
             and e.kind in (EdgeKind.TAKEN, EdgeKind.FALLTHROUGH)}
    exits |= {b for b in lp.body if cfg.blocks[b].is_return}
    best = None
    for t in sorted(lp.body):
        blk = cfg.blocks[t]
        term = blk.terminator
        if term is None or term.kind is not Kind.BRANCH_COND or t in inner:
            continue
        if not all(routine.dominates(t, l) for l in latches):
            continue
        succs = [e for e in cfg.edges if e.src == t and e.kind in (EdgeKind.TAKEN, EdgeKind.FALLTHROUGH)]
        inside = [e for e in succs if e.dst in lp.body]
        if len(inside) != 1 or len(succs) != 2:
            continue
        stay_rel = term.cond if inside[0].kind is EdgeKind.TAKEN else _NEGATE[term.cond]
        n = _counter_bound(cfg, lp, routine, t, stay_rel, entry, inner, has_call, res)
        if n is None:
            continue
        lo = n[0] if exits == {t} else 1
        if best is None or n[1] < best[1]:
            best = (lo, n[1])
    if best is None:
        return None
    return LoopBound(lp.header, best[0], best[1], Provenance.ANALYSIS)


def _counter_bound(cfg, lp, routine, t, stay_rel, entry, inner, has_call, res):
    blk = cfg.blocks[t]
    setter_idx = None
    for i, ins in enumerate(blk.instrs[:-1]):
        if sets_flags(ins):
            setter_idx = i
    if setter_idx is None:
        return None
    s = blk.instrs[setter_idx]
    # (kind, counter reg, offset applied before compare, rhs) in terms of the value before ``s``
    m, e, o = s.mnemonic, s.enc, s.operands
    swapped = False
    rhs = None
    if m == "CMP":
        kind, reg, rhs = "cmp", o[0], ("reg", o[1]) if e in ("dp", "hireg") else ("imm", o[1])
        if e in ("dp", "hireg"):
            reg, rhs = o[0], ("reg", o[1])
    elif m == "SUBS" and e in ("imm8", "addsub_imm3"):
        kind = "cmp"
        reg = o[0] if e == "imm8" else o[1]
        rhs = ("imm", o[-1])
    elif m == "ADDS" and e in ("imm8", "addsub_imm3"):
        kind = "nz"
        reg = o[0] if e == "imm8" else o[1]
        rhs = ("add", o[-1])
    elif m == "MOVS" and e == "mov_reg":
        kind, reg, rhs = "nz", o[1], ("add", 0)
    else:
        return None
    if not _evaluable(kind, stay_rel):
        return None

    def invariant_const(r):
        for b in lp.body:
            for ins in cfg.blocks[b].instrs:
                if r in regs_written(ins):
                    return None
        if has_call and r in CALLER_SAVED:
            return None
        v = entry.reg(r)
        return v.itv.value() if v.base is None and v.itv.is_const else None

    if rhs[0] == "reg":
        c_reg = invariant_const(rhs[1])
        c_cnt = None
        if c_reg is None:
            # maybe the counter is on the right-hand side
            c_cnt = invariant_const(reg)
            if c_cnt is None:
                return None
            reg, c, swapped = rhs[1], c_cnt, True
        else:
            c = c_reg
    elif rhs[0] == "add":
        c = 0
    else:
        c = rhs[1]
    if reg in (SP, PC, LR):
        return None
    if has_call and reg in CALLER_SAVED:
        return None

    # every write of the counter must be a constant step in a block executed once per iteration
    latches = [u for u, _ in lp.back_edges]
    step = 0
    pre = 0
    for b in sorted(lp.body):
        for i, ins in enumerate(cfg.blocks[b].instrs):
            if reg not in regs_written(ins):
                continue
            d = _const_step(ins, reg)
            if d is None or b in inner or not all(routine.dominates(b, l) for l in latches):
                return None
            step += d
            before = (b != t and routine.dominates(b, t)) or (b == t and i < setter_idx)
            if before:
                pre += d
    step %= M32
    if step == 0:
        return None
    if step > SMAX:
        step -= M32
    init = entry.reg(reg)
    if init.base is not None or init.itv.is_top:
        return None
    pieces = init.itv.unsigned_pieces()
    if sum(hi - lo + 1 for lo, hi in pieces) > 4096:
        starts = [p for piece in pieces for p in piece]
    else:
        starts = [v for lo, hi in pieces for v in range(lo, hi + 1)]
    if len(starts) > 4096 or (sum(hi - lo + 1 for lo, hi in pieces) > 4096 and stay_rel in ("EQ", "NE")):
        return None
    add = rhs[1] if rhs[0] == "add" else 0
    counts = []
    for v0 in starts:
        n = _first_exit(kind, stay_rel, (v0 + pre + add) & MASK, step, c, swapped)
        if n is None:
            return None
        counts.append(n)
    return min(counts), max(counts)


def _const_step(ins, reg):
    m, e, o = ins.mnemonic, ins.enc, ins.operands
    if e == "imm8" and m in ("ADDS", "SUBS") and o[0] == reg:
        return o[1] if m == "ADDS" else -o[1]
    if e == "addsub_imm3" and o[0] == reg and o[1] == reg:
        return o[2] if m == "ADDS" else -o[2]
    return None


# ------------------------------------------------------------------ bound selection


def bound_for(loop, results=None, annotations=None, trace=None, instance=None):
    """Loop bound by precedence annotation > analysis > trace.

    ``loop`` is the header address; ``instance`` optionally selects one loop
    instance key of the analysis.  ``trace`` maps header -> (min, max).
    """
    if annotations is not None and loop in annotations.loop_bounds:
        lo, hi = annotations.loop_bounds[loop]
        return LoopBound(loop, lo, hi, Provenance.ANNOTATION)
    if results is not None:
        if instance is not None and instance in results.instance_bounds:
            return results.instance_bounds[instance]
        if instance is None:
            b = results.loop_bounds.get(loop)
            if b is not None:
                return b
    if trace is not None and loop in trace:
        lo, hi = trace[loop]
        log.warning("loop %#010x bounded from a simulation trace; may underestimate the worst case", loop)
        return LoopBound(loop, 0, hi, Provenance.TRACE)
    raise UnboundedLoop(loop)
