"""ARMv6-M instruction-set simulator: the concrete oracle for the static pipeline.

Counting conventions mirror :mod:`wcec.events`: every executed instruction
other than ``MULS`` is one ``INSTR_NOMUL``; each word moved by LDM/STM/PUSH/POP
is one access; reads from RAM are ``RAM_READ`` and every other read is a
``FLASH_READ``; every write is a ``RAM_WRITE``; any instruction that writes
the PC counts one ``TAKEN_BRANCH``.  The instruction fetched at a stop
address is not executed and not counted.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field

from .annotations import AnnotationSet
from .errors import AddressError, CfgError, DecodeError, SimulationFault
from .isa import LR, PC, SP, branch_target, decode_one, literal_address
from .loader import RegionKind
from .models import (CM0_COUNTERS, FLASH_READ, INSTR_NOMUL, MUL, RAM_READ, RAM_WRITE,
                     TAKEN_BRANCH, CounterTrace, EventVector, replay)

M = 0xFFFF_FFFF
STOP_SENTINEL = 0xF000_0000       # initial LR points here; fetching it stops the run

HIT_STOP = "HitStopAddress"
MAX_STEPS = "MaxSteps"
FAULT = "Fault"


@dataclass
class SimResult:
    counters: EventVector
    trace: list                      # (segment start address, instructions executed)
    steps: int
    stop_reason: str
    pc: int
    regs: list
    fault: SimulationFault | None = None
    pcs: list | None = None

    def trace_csv(self):
        if self.pcs is None:
            raise ValueError("run with record_pcs=True to dump the pc trace")
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["step", "pc"])
        for i, pc in enumerate(self.pcs):
            w.writerow([i, f"{pc:#010x}"])
        return out.getvalue()

    def counter_trace(self, label="run"):
        return CounterTrace(CM0_COUNTERS, [(label, {c: self.counters[c] for c in CM0_COUNTERS})])


class _Memory:
    """Writable copies of loaded RAM, lazily zeroed map RAM, inert device space."""

    def __init__(self, image):
        self.image = image
        self.ram = {}
        self.rom = {}
        for r in image.regions:
            data = image.contents.get(r.name)
            buf = bytearray(data if data is not None else bytes(r.size))
            (self.ram if r.writable else self.rom)[r.name] = (r, buf)
        self.extra = {}      # page base -> bytearray, for map RAM outside loaded segments

    def _locate(self, addr, n, write):
        for r, buf in list(self.ram.values()) + list(self.rom.values()):
            if r.base <= addr and addr + n <= r.end:
                if write and not r.writable:
                    raise _Fault("write to read-only memory" if r.kind is not RegionKind.FLASH
                                 else "flash write")
                return buf, addr - r.base
        kind = self.image.classify(addr)
        if kind is RegionKind.UNMAPPED or self.image.classify(addr + n - 1) is not kind:
            raise _Fault(f"unmapped access at {addr:#010x}")
        if kind is RegionKind.FLASH:
            raise _Fault("flash write" if write else f"read of unloaded flash at {addr:#010x}")
        if kind is RegionKind.DEVICE:
            return None, 0
        page = addr & ~0xFFF
        if (addr + n - 1) & ~0xFFF != page:
            raise _Fault("access straddles a page")
        buf = self.extra.setdefault(page, bytearray(0x1000))
        return buf, addr - page

    def read(self, addr, n):
        buf, off = self._locate(addr, n, False)
        if buf is None:
            return 0
        return int.from_bytes(buf[off:off + n], "little")

    def write(self, addr, n, value):
        buf, off = self._locate(addr, n, True)
        if buf is not None:
            buf[off:off + n] = (value & ((1 << (8 * n)) - 1)).to_bytes(n, "little")


class _Fault(Exception):
    pass


def _sx(v, bits):
    v &= (1 << bits) - 1
    return v - (1 << bits) if v >> (bits - 1) else v


def _add_with_carry(x, y, carry):
    u = x + y + carry
    r = u & M
    s = _sx(x, 32) + _sx(y, 32) + carry
    return r, int(u > M), int(s != _sx(r, 32))


class Machine:
    def __init__(self, image, sp, stack_limit=None):
        self.image = image
        self.mem = _Memory(image)
        self.r = [0] * 16
        self.r[SP] = sp & ~3
        self.r[LR] = STOP_SENTINEL | 1
        self.n = self.z = self.c = self.v = 0
        self.stack_limit = stack_limit
        self.counters = EventVector.zero()
        self._decoded = {}

    # -- helpers
    def nz(self, r):
        self.n = r >> 31
        self.z = int(r == 0)

    def set_sp(self, v):
        v &= M
        if self.stack_limit is not None and v < self.stack_limit:
            raise _Fault("stack overflow")
        self.r[SP] = v & ~3

    def setreg(self, d, v):
        if d == SP:
            self.set_sp(v)
        else:
            self.r[d] = v & M

    def get(self, n, ins):
        return (ins.addr + 4) if n == PC else self.r[n]

    def load(self, addr, n, signed=False):
        addr &= M
        if addr % n:
            raise _Fault(f"unaligned {n}-byte read at {addr:#010x}")
        v = self.mem.read(addr, n)
        kind = self.image.classify(addr)
        self.counters[RAM_READ if kind is RegionKind.RAM else FLASH_READ] += 1
        return (_sx(v, 8 * n) & M) if signed else v

    def store(self, addr, n, value):
        addr &= M
        if addr % n:
            raise _Fault(f"unaligned {n}-byte write at {addr:#010x}")
        self.mem.write(addr, n, value)
        self.counters[RAM_WRITE] += 1

    def cond(self, c):
        n, z, cy, v = self.n, self.z, self.c, self.v
        return {
            "EQ": z, "NE": not z, "HS": cy, "LO": not cy, "MI": n, "PL": not n,
            "VS": v, "VC": not v, "HI": cy and not z, "LS": not cy or z,
            "GE": n == v, "LT": n != v, "GT": not z and n == v, "LE": z or n != v,
        }[c]

    def decode(self, pc):
        ins = self._decoded.get(pc)
        if ins is None:
            ins = self._decoded[pc] = decode_one(self.image, pc)
        return ins

    # -- shifts (value, amount, kind) -> (result, carry)
    def shift(self, kind, x, amt):
        c = self.c
        if amt == 0:
            return x, c
        if kind == "LSL":
            if amt < 32:
                return (x << amt) & M, (x >> (32 - amt)) & 1
            return 0, (x & 1) if amt == 32 else 0
        if kind == "LSR":
            if amt < 32:
                return x >> amt, (x >> (amt - 1)) & 1
            return 0, (x >> 31) if amt == 32 else 0
        if kind == "ASR":
            if amt < 32:
                return (_sx(x, 32) >> amt) & M, (x >> (amt - 1)) & 1
            return (M if x >> 31 else 0), x >> 31
        amt %= 32                                   # ROR
        if amt == 0:
            return x, x >> 31
        r = ((x >> amt) | (x << (32 - amt))) & M
        return r, r >> 31

    # -- one instruction; returns the next pc and whether the pc was written
    def step(self, ins):
        m, e, o = ins.mnemonic, ins.enc, ins.operands
        r = self.r
        nxt = ins.addr + ins.size
        if m == "MULS":
            self.counters[MUL] += 1
        else:
            self.counters[INSTR_NOMUL] += 1
        if ins.opaque and m in ("SVC", "BKPT"):
            raise _Fault(f"{m} is not simulated")

        if e == "shift_imm":
            amt = o[2] if (o[2] or m == "LSLS") else 32
            res, self.c = self.shift(m[:3], r[o[1]], amt)
            r[o[0]] = res
            self.nz(res)
        elif e == "mov_reg":
            r[o[0]] = r[o[1]]
            self.nz(r[o[0]])
        elif e in ("addsub_reg", "addsub_imm3"):
            b = r[o[2]] if e == "addsub_reg" else o[2]
            if m == "ADDS":
                res, self.c, self.v = _add_with_carry(r[o[1]], b, 0)
            else:
                res, self.c, self.v = _add_with_carry(r[o[1]], ~b & M, 1)
            r[o[0]] = res
            self.nz(res)
        elif e == "imm8":
            d, imm = o
            if m == "MOVS":
                r[d] = imm
                self.nz(imm)
            else:
                if m == "ADDS":
                    res, self.c, self.v = _add_with_carry(r[d], imm, 0)
                else:
                    res, self.c, self.v = _add_with_carry(r[d], ~imm & M, 1)
                self.nz(res)
                if m != "CMP":
                    r[d] = res
        elif e == "dp":
            self._dp(m, o[0], o[1])
        elif e == "muls":
            res = (r[o[1]] * r[o[0]]) & M
            r[o[0]] = res
            self.nz(res)
        elif e == "rsbs":
            res, self.c, self.v = _add_with_carry(~r[o[1]] & M, 0, 1)
            r[o[0]] = res
            self.nz(res)
        elif e == "hireg":
            d, s = o
            if m == "CMP":
                res, self.c, self.v = _add_with_carry(self.get(d, ins), ~self.get(s, ins) & M, 1)
                self.nz(res)
            else:
                val = self.get(s, ins) if m == "MOV" else (self.get(d, ins) + self.get(s, ins)) & M
                if d == PC:
                    return val & ~1, True
                self.setreg(d, val)
        elif e == "bx":
            target = r[o[0]]
            if not target & 1:
                raise _Fault("interworking branch to ARM state")
            if m == "BLX":
                r[LR] = nxt | 1
            return target & ~1, True
        elif e == "ldr_lit":
            r[o[0]] = self.load(literal_address(ins), 4)
        elif e in ("ldst_reg", "ldst_imm", "ldst_sp"):
            if e == "ldst_reg":
                addr = r[o[1]] + r[o[2]]
            elif e == "ldst_imm":
                addr = r[o[1]] + o[2]
            else:
                addr = r[SP] + o[1]
            w = ins.mem_width
            if m.startswith("LDR"):
                r[o[0]] = self.load(addr, w, signed=m.startswith("LDRS"))
            else:
                self.store(addr, w, r[o[0]])
        elif e == "adr":
            r[o[0]] = literal_address(ins)
        elif e == "add_sp_rd":
            r[o[0]] = (r[SP] + o[1]) & M
        elif e == "sp_adj":
            self.set_sp(r[SP] + o[0] if m == "ADD" else r[SP] - o[0])
        elif e == "extend":
            x = r[o[1]]
            r[o[0]] = {
                "SXTH": lambda: _sx(x, 16) & M,
                "SXTB": lambda: _sx(x, 8) & M,
                "UXTH": lambda: x & 0xFFFF,
                "UXTB": lambda: x & 0xFF,
                "REV": lambda: int.from_bytes(x.to_bytes(4, "little"), "big"),
                "REV16": lambda: ((x & 0x00FF00FF) << 8 | (x >> 8) & 0x00FF00FF) & M,
                "REVSH": lambda: _sx(((x & 0xFF) << 8) | ((x >> 8) & 0xFF), 16) & M,
            }[m]()
        elif e == "pushpop":
            regs = o[0]
            if m == "PUSH":
                base = (r[SP] - 4 * len(regs)) & M
                self.set_sp(base)
                for i, reg in enumerate(regs):
                    self.store(base + 4 * i, 4, r[reg])
            else:
                base = r[SP]
                vals = [self.load(base + 4 * i, 4) for i in range(len(regs))]
                self.set_sp(base + 4 * len(regs))
                for reg, v in zip(regs, vals):
                    if reg == PC:
                        if not v & 1:
                            raise _Fault("interworking branch to ARM state")
                        return v & ~1, True
                    r[reg] = v
        elif e == "ldstm":
            rn, regs = o
            base = r[rn]
            if m == "LDM":
                vals = [self.load(base + 4 * i, 4) for i in range(len(regs))]
                for reg, v in zip(regs, vals):
                    r[reg] = v
                if rn not in regs:
                    r[rn] = (base + 4 * len(regs)) & M
            else:
                for i, reg in enumerate(regs):
                    self.store(base + 4 * i, 4, r[reg])
                r[rn] = (base + 4 * len(regs)) & M
        elif e == "branch":
            target = branch_target(ins)
            if m == "BL":
                r[LR] = nxt | 1
                return target, True
            if ins.cond is None or self.cond(ins.cond):
                return target, True
        elif e == "mrs":
            r[o[0]] = r[SP] if o[1] in (8, 9) else 0
        elif e == "msr":
            if o[0] in (8, 9):
                self.set_sp(r[o[1]])
        # hints, barriers and CPS have no architectural effect here
        return nxt, False

    def _dp(self, m, d, s):
        r = self.r
        a, b = r[d], r[s]
        if m in ("ANDS", "TST"):
            res = a & b
        elif m == "EORS":
            res = a ^ b
        elif m == "ORRS":
            res = a | b
        elif m == "BICS":
            res = a & ~b & M
        elif m == "MVNS":
            res = ~b & M
        elif m in ("LSLS", "LSRS", "ASRS", "RORS"):
            res, self.c = self.shift(m[:3], a, b & 0xFF)
        elif m == "ADCS":
            res, self.c, self.v = _add_with_carry(a, b, self.c)
        elif m == "SBCS":
            res, self.c, self.v = _add_with_carry(a, ~b & M, self.c)
        elif m == "CMP":
            res, self.c, self.v = _add_with_carry(a, ~b & M, 1)
        elif m == "CMN":
            res, self.c, self.v = _add_with_carry(a, b, 0)
        else:
            raise _Fault(f"unhandled data-processing op {m}")
        self.nz(res)
        if m not in ("TST", "CMP", "CMN"):
            r[d] = res


def default_stack(image):
    """(initial sp, stack limit) from the highest writable RAM segment."""
    rams = [r for r in image.regions if r.kind is RegionKind.RAM and r.writable]
    if not rams:
        raise SimulationFault(image.entry, "no writable RAM segment for the stack")
    top = max(rams, key=lambda r: r.end)
    return top.end, top.base


def run(image, start=None, stop=(), max_steps=1_000_000, sp=None, stack_limit=None,
        regs=None, record_pcs=False):
    """Execute from ``start`` until a stop address is fetched, the step cap, or a fault."""
    if sp is None:
        sp, limit = default_stack(image)
        stack_limit = limit if stack_limit is None else stack_limit
    elif image.classify(sp - 4) is not RegionKind.RAM:
        raise SimulationFault(sp, "initial sp is not inside RAM")
    mach = Machine(image, sp, stack_limit)
    for k, v in (regs or {}).items():
        mach.r[k] = v & M
    pc = image.entry if start is None else start
    stops = set(stop) | {STOP_SENTINEL}
    trace = []
    seg_start, seg_len = pc, 0
    pcs = [] if record_pcs else None
    steps = 0
    fault = None
    reason = MAX_STEPS
    while True:
        if pc in stops:
            reason = HIT_STOP
            break
        if steps >= max_steps:
            break
        try:
            if pc & 1:
                raise _Fault("unaligned pc")
            ins = mach.decode(pc)
            if record_pcs:
                pcs.append(pc)
            nxt, jumped = mach.step(ins)
        except _Fault as exc:
            fault = SimulationFault(pc, str(exc))
        except DecodeError as exc:
            fault = SimulationFault(pc, f"undefined instruction ({exc})")
        except AddressError as exc:
            fault = SimulationFault(pc, f"fetch from non-executable address ({exc})")
        if fault is not None:
            reason = FAULT
            break
        steps += 1
        seg_len += 1
        if jumped:
            mach.counters[TAKEN_BRANCH] += 1
            trace.append((seg_start, seg_len))
            seg_start, seg_len = nxt, 0
        pc = nxt
    if seg_len:
        trace.append((seg_start, seg_len))
    mach.r[PC] = pc
    return SimResult(mach.counters, trace, steps, reason, pc, list(mach.r), fault, pcs)


def model_result(sim, model):
    return replay(model, sim.counter_trace()).total


def dump_counters(sim, label="run"):
    from .models import write_trace

    return write_trace(sim.counter_trace(label))


# ------------------------------------------------------------------ flow facts


def block_sequence(sim, cfg):
    """Expand the segment trace into (block id) visits, tracking routines on a shadow stack."""
    starts = {}
    for b in cfg.blocks.values():
        if not b.virtual:
            starts.setdefault(b.start, []).append(b)
    entry_of = {r.entry: rid for rid, r in cfg.routines.items()}
    stack = []
    routine = None
    out = []
    pending_call = None
    for seg_start, count in sim.trace:
        addr = seg_start
        while count > 0:
            cands = starts.get(addr)
            if not cands:
                raise CfgError(f"simulated address {addr:#010x} does not start an analysed block")
            if pending_call is not None:
                routine = entry_of.get(addr, routine)
            elif routine is None:
                routine = cands[0].routine
            blk = next((b for b in cands if b.routine == routine), None)
            if blk is None:
                raise CfgError(f"simulated block {addr:#010x} is outside routine {routine:#x}")
            out.append(blk.id)
            pending_call = None
            n = len(blk.instrs)
            count -= n
            addr = blk.end
            site = cfg.call_sites.get(blk.id)
            if count < 0:
                break
            if site is not None:
                if not site.tail:
                    stack.append(routine)
                pending_call = site
            elif blk.is_return:
                routine = stack.pop() if stack else None
    return out


def derive_flow_facts(sim, cfg):
    """Per-loop ``0..max header executions per entry`` bounds observed in the run."""
    seq = block_sequence(sim, cfg)
    maxima = {lp.header: 0 for lp in cfg.loops()}
    frames = [{"prev": None, "count": {}, "tail": False}]
    push = None
    for bid in seq:
        blk = cfg.blocks[bid]
        rt = cfg.routines[blk.routine]
        if push is not None:
            frames.append({"prev": None, "count": {}, "tail": push})
            push = None
        fr = frames[-1]
        for lp in rt.loops.values():
            if bid != lp.header_block:
                continue
            prev = fr["prev"]
            n = fr["count"].get(lp.header, 0) + 1 if prev is not None and prev in lp.body else 1
            fr["count"][lp.header] = n
            maxima[lp.header] = max(maxima[lp.header], n)
        fr["prev"] = bid
        site = cfg.call_sites.get(bid)
        if site is not None:
            push = site.tail
        elif blk.is_return and frames:
            # a tail-called routine returns on behalf of the routine that jumped to it
            while frames and frames.pop()["tail"]:
                pass
            if not frames:
                frames.append({"prev": None, "count": {}, "tail": False})
    ann = AnnotationSet(source="trace")
    ann.loop_bounds = {h: (0, n) for h, n in sorted(maxima.items())}
    return ann
