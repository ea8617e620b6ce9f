"""ARMv6-M (Thumb) decoder.

Every decoded instruction carries its encoding form (``enc``) and a normalized
operand tuple, so the assembler in :mod:`wcec.asm` can reproduce the exact
halfwords.  Operand layouts per form are listed in ``FORMS``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

from .errors import AddressError, DecodeError

log = logging.getLogger(__name__)

PC, LR, SP = 15, 14, 13

CONDITIONS = ("EQ", "NE", "HS", "LO", "MI", "PL", "VS", "VC", "HI", "LS", "GE", "LT", "GT", "LE")


class Kind(str, enum.Enum):
    CALL = "Call"
    BRANCH_COND = "BranchCond"
    BRANCH_UNCOND = "BranchUncond"
    RETURN = "Return"
    MULTIPLY = "Multiply"
    LOAD = "Load"
    STORE = "Store"
    LOAD_STORE_MULTIPLE = "LoadStoreMultiple"
    OTHER = "Other"


CONTROL_KINDS = frozenset({Kind.CALL, Kind.BRANCH_COND, Kind.BRANCH_UNCOND, Kind.RETURN})

# enc -> operand layout, for reference and for the assembler
FORMS = {
    "shift_imm": "(rd, rm, imm5)",
    "mov_reg": "(rd, rm)",
    "addsub_reg": "(rd, rn, rm)",
    "addsub_imm3": "(rd, rn, imm3)",
    "imm8": "(rdn, imm8)",
    "dp": "(rdn, rm)",
    "muls": "(rdm, rn, rdm)",
    "rsbs": "(rd, rn)",
    "hireg": "(rdn, rm)",
    "bx": "(rm,)",
    "ldr_lit": "(rt, imm)",
    "ldst_reg": "(rt, rn, rm)",
    "ldst_imm": "(rt, rn, imm)",
    "ldst_sp": "(rt, imm)",
    "adr": "(rd, imm)",
    "add_sp_rd": "(rd, imm)",
    "sp_adj": "(imm,)",
    "extend": "(rd, rm)",
    "pushpop": "(reglist,)",
    "ldstm": "(rn, reglist)",
    "cps": "(disable,)",
    "hint": "()",
    "imm_only": "(imm,)",
    "branch": "(offset,)",
    "msr": "(sysm, rn)",
    "mrs": "(rd, sysm)",
    "barrier": "(option,)",
}


@dataclass(frozen=True)
class Instr:
    addr: int
    size: int
    mnemonic: str
    operands: tuple
    kind: Kind
    enc: str
    cond: str | None = None
    mem_width: int | None = None
    reg_count: int | None = None
    opaque: bool = False
    hint_warning: bool = False

    @property
    def is_control(self):
        return self.kind in CONTROL_KINDS

    @property
    def next_addr(self):
        return self.addr + self.size

    @property
    def is_load(self):
        return self.mnemonic in LOAD_MNEMONICS or (self.mnemonic == "POP")

    @property
    def is_store(self):
        return self.mnemonic in STORE_MNEMONICS or self.mnemonic == "PUSH"

    @property
    def text(self):
        return format_instr(self)


LOAD_MNEMONICS = frozenset({"LDR", "LDRB", "LDRH", "LDRSB", "LDRSH", "LDM"})
STORE_MNEMONICS = frozenset({"STR", "STRB", "STRH", "STM"})
OPAQUE = frozenset({"SVC", "BKPT", "WFI", "WFE"})

_DP_OPS = ("ANDS", "EORS", "LSLS", "LSRS", "ASRS", "ADCS", "SBCS", "RORS",
           "TST", "RSBS", "CMP", "CMN", "ORRS", "MULS", "BICS", "MVNS")
_LDST_REG = ("STR", "STRH", "STRB", "LDRSB", "LDR", "LDRH", "LDRB", "LDRSH")
_WIDTH = {"STR": 4, "LDR": 4, "STRH": 2, "LDRH": 2, "LDRSH": 2, "STRB": 1, "LDRB": 1, "LDRSB": 1}
_HINTS = ("NOP", "YIELD", "WFE", "WFI", "SEV")


def _sx(value, bits):
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def _reglist(bits, extra=None):
    regs = [r for r in range(8) if bits & (1 << r)]
    if extra is not None:
        regs.append(extra)
    return tuple(regs)


def _mk(addr, size, mnemonic, operands, enc, kind=None, **kw):
    if kind is None:
        if mnemonic == "MULS":
            kind = Kind.MULTIPLY
        elif mnemonic in LOAD_MNEMONICS - {"LDM"}:
            kind = Kind.LOAD
        elif mnemonic in STORE_MNEMONICS - {"STM"}:
            kind = Kind.STORE
        else:
            kind = Kind.OTHER
    if mnemonic in _WIDTH:
        kw.setdefault("mem_width", _WIDTH[mnemonic])
    if mnemonic in OPAQUE:
        kw["opaque"] = True
    return Instr(addr, size, mnemonic, tuple(operands), kind, enc, **kw)


def is_32bit_prefix(hw):
    return (hw >> 11) in (0b11101, 0b11110, 0b11111)


def decode_halfwords(addr, hw1, hw2=None):
    """Decode the instruction at ``addr`` from its first (and second) halfword."""
    if is_32bit_prefix(hw1):
        if hw2 is None:
            raise DecodeError(addr, (hw1,), "truncated 32-bit encoding")
        return _decode32(addr, hw1, hw2)
    return _decode16(addr, hw1)


def _decode16(addr, hw):
    undefined = DecodeError(addr, (hw,))
    top5 = hw >> 11
    lo3 = hw & 7
    mid3 = (hw >> 3) & 7
    if top5 <= 0b00010:
        imm5 = (hw >> 6) & 0x1F
        if top5 == 0 and imm5 == 0:
            return _mk(addr, 2, "MOVS", (lo3, mid3), "mov_reg")
        return _mk(addr, 2, ("LSLS", "LSRS", "ASRS")[top5], (lo3, mid3, imm5), "shift_imm")
    if top5 == 0b00011:
        op = (hw >> 9) & 3
        rm_or_imm = (hw >> 6) & 7
        if op < 2:
            return _mk(addr, 2, ("ADDS", "SUBS")[op], (lo3, mid3, rm_or_imm), "addsub_reg")
        return _mk(addr, 2, ("ADDS", "SUBS")[op - 2], (lo3, mid3, rm_or_imm), "addsub_imm3")
    if hw >> 13 == 0b001:
        op = (hw >> 11) & 3
        return _mk(addr, 2, ("MOVS", "CMP", "ADDS", "SUBS")[op], ((hw >> 8) & 7, hw & 0xFF), "imm8")
    if hw >> 10 == 0b010000:
        op = (hw >> 6) & 0xF
        name = _DP_OPS[op]
        if name == "MULS":
            return _mk(addr, 2, "MULS", (lo3, mid3, lo3), "muls")
        if name == "RSBS":
            return _mk(addr, 2, "RSBS", (lo3, mid3), "rsbs")
        return _mk(addr, 2, name, (lo3, mid3), "dp")
    if hw >> 10 == 0b010001:
        op = (hw >> 8) & 3
        rm = (hw >> 3) & 0xF
        rdn = ((hw >> 4) & 8) | lo3
        if op == 0:
            if rdn == PC and rm == PC:
                raise undefined
            kind = Kind.BRANCH_UNCOND if rdn == PC else Kind.OTHER
            return _mk(addr, 2, "ADD", (rdn, rm), "hireg", kind)
        if op == 1:
            if (rdn < 8 and rm < 8) or rdn == PC or rm == PC:
                raise undefined
            return _mk(addr, 2, "CMP", (rdn, rm), "hireg")
        if op == 2:
            kind = Kind.BRANCH_UNCOND if rdn == PC else Kind.OTHER
            return _mk(addr, 2, "MOV", (rdn, rm), "hireg", kind)
        if lo3 != 0:
            raise undefined
        if hw & 0x80:
            if rm == PC:
                raise undefined
            return _mk(addr, 2, "BLX", (rm,), "bx", Kind.CALL)
        kind = Kind.RETURN if rm == LR else Kind.BRANCH_UNCOND
        return _mk(addr, 2, "BX", (rm,), "bx", kind)
    if top5 == 0b01001:
        return _mk(addr, 2, "LDR", ((hw >> 8) & 7, (hw & 0xFF) * 4), "ldr_lit")
    if hw >> 12 == 0b0101:
        name = _LDST_REG[(hw >> 9) & 7]
        return _mk(addr, 2, name, (lo3, mid3, (hw >> 6) & 7), "ldst_reg")
    if hw >> 13 == 0b011:
        byte = (hw >> 12) & 1
        load = (hw >> 11) & 1
        imm5 = (hw >> 6) & 0x1F
        name = ("STR", "LDR", "STRB", "LDRB")[byte * 2 + load]
        return _mk(addr, 2, name, (lo3, mid3, imm5 if byte else imm5 * 4), "ldst_imm")
    if hw >> 12 == 0b1000:
        name = "LDRH" if hw & 0x800 else "STRH"
        return _mk(addr, 2, name, (lo3, mid3, ((hw >> 6) & 0x1F) * 2), "ldst_imm")
    if hw >> 12 == 0b1001:
        name = "LDR" if hw & 0x800 else "STR"
        return _mk(addr, 2, name, ((hw >> 8) & 7, (hw & 0xFF) * 4), "ldst_sp")
    if hw >> 12 == 0b1010:
        rd = (hw >> 8) & 7
        if hw & 0x800:
            return _mk(addr, 2, "ADD", (rd, (hw & 0xFF) * 4), "add_sp_rd")
        return _mk(addr, 2, "ADR", (rd, (hw & 0xFF) * 4), "adr")
    if hw >> 12 == 0b1011:
        return _decode_misc(addr, hw, undefined)
    if hw >> 12 == 0b1100:
        rn = (hw >> 8) & 7
        regs = _reglist(hw & 0xFF)
        if not regs:
            raise undefined
        name = "LDM" if hw & 0x800 else "STM"
        return _mk(addr, 2, name, (rn, regs), "ldstm", Kind.LOAD_STORE_MULTIPLE,
                   mem_width=4, reg_count=len(regs))
    if hw >> 12 == 0b1101:
        cond = (hw >> 8) & 0xF
        if cond == 0xE:
            raise DecodeError(addr, (hw,), "permanently undefined (UDF)")
        if cond == 0xF:
            return _mk(addr, 2, "SVC", (hw & 0xFF,), "imm_only")
        name = CONDITIONS[cond]
        return _mk(addr, 2, "B" + name, (_sx(hw & 0xFF, 8) * 2,), "branch",
                   Kind.BRANCH_COND, cond=name)
    if top5 == 0b11100:
        return _mk(addr, 2, "B", (_sx(hw & 0x7FF, 11) * 2,), "branch", Kind.BRANCH_UNCOND)
    raise undefined


def _decode_misc(addr, hw, undefined):
    op = (hw >> 8) & 0xF
    if op == 0b0000:
        name = "SUB" if hw & 0x80 else "ADD"
        return _mk(addr, 2, name, ((hw & 0x7F) * 4,), "sp_adj")
    if op == 0b0010:
        name = ("SXTH", "SXTB", "UXTH", "UXTB")[(hw >> 6) & 3]
        return _mk(addr, 2, name, (hw & 7, (hw >> 3) & 7), "extend")
    if op in (0b0100, 0b0101):
        regs = _reglist(hw & 0xFF, LR if hw & 0x100 else None)
        if not regs:
            raise undefined
        return _mk(addr, 2, "PUSH", (regs,), "pushpop", Kind.LOAD_STORE_MULTIPLE,
                   mem_width=4, reg_count=len(regs))
    if op in (0b1100, 0b1101):
        regs = _reglist(hw & 0xFF, PC if hw & 0x100 else None)
        if not regs:
            raise undefined
        kind = Kind.RETURN if PC in regs else Kind.LOAD_STORE_MULTIPLE
        return _mk(addr, 2, "POP", (regs,), "pushpop", kind, mem_width=4, reg_count=len(regs))
    if op == 0b0110:
        if hw in (0xB662, 0xB672):
            return _mk(addr, 2, "CPSID" if hw & 0x10 else "CPSIE", (bool(hw & 0x10),), "cps")
        raise undefined
    if op == 0b1010:
        sub = (hw >> 6) & 3
        if sub == 2:
            raise undefined
        name = ("REV", "REV16", None, "REVSH")[sub]
        return _mk(addr, 2, name, (hw & 7, (hw >> 3) & 7), "extend")
    if op == 0b1110:
        return _mk(addr, 2, "BKPT", (hw & 0xFF,), "imm_only")
    if op == 0b1111:
        if hw & 0xF:
            raise DecodeError(addr, (hw,), "IT is not available on ARMv6-M")
        op_a = (hw >> 4) & 0xF
        if op_a < len(_HINTS):
            return _mk(addr, 2, _HINTS[op_a], (), "hint")
        log.warning("undefined hint %#06x at %#010x treated as NOP", hw, addr)
        return _mk(addr, 2, "NOP", (op_a,), "hint", hint_warning=True)
    raise undefined


def _decode32(addr, hw1, hw2):
    undefined = DecodeError(addr, (hw1, hw2))
    if hw1 >> 11 != 0b11110 or not hw2 & 0x8000:
        raise undefined
    if hw2 & 0xD000 == 0xD000:
        s = (hw1 >> 10) & 1
        j1 = (hw2 >> 13) & 1
        j2 = (hw2 >> 11) & 1
        i1 = 1 - (j1 ^ s)
        i2 = 1 - (j2 ^ s)
        imm = (s << 24) | (i1 << 23) | (i2 << 22) | ((hw1 & 0x3FF) << 12) | ((hw2 & 0x7FF) << 1)
        return _mk(addr, 4, "BL", (_sx(imm, 25),), "branch", Kind.CALL)
    if hw2 & 0xD000 != 0x8000:
        raise undefined
    if hw1 & 0xFFF0 == 0xF380 and hw2 & 0xFF00 == 0x8800:
        return _mk(addr, 4, "MSR", (hw2 & 0xFF, hw1 & 0xF), "msr")
    if hw1 == 0xF3EF and hw2 & 0xF000 == 0x8000:
        return _mk(addr, 4, "MRS", ((hw2 >> 8) & 0xF, hw2 & 0xFF), "mrs")
    if hw1 == 0xF3BF and hw2 & 0xFF00 == 0x8F00:
        name = {0x4: "DSB", 0x5: "DMB", 0x6: "ISB"}.get((hw2 >> 4) & 0xF)
        if name is not None:
            return _mk(addr, 4, name, (hw2 & 0xF,), "barrier")
    raise undefined


def decode_one(image, addr):
    if addr & 1:
        raise AddressError(addr, "unaligned instruction address")
    if not image.is_executable(addr):
        raise AddressError(addr)
    hw1 = image.read_u16(addr)
    if hw1 is None:
        raise AddressError(addr)
    hw2 = None
    if is_32bit_prefix(hw1):
        if image.is_executable(addr + 2):
            hw2 = image.read_u16(addr + 2)
    return decode_halfwords(addr, hw1, hw2)


def decode_range(image, start, end):
    """Decode ``[start, end)`` sequentially."""
    out = []
    addr = start
    while addr < end:
        ins = decode_one(image, addr)
        if addr + ins.size > end:
            hw = image.read_u16(addr)
            raise DecodeError(addr, (hw,), "truncated 32-bit encoding")
        out.append(ins)
        addr += ins.size
    return out


def branch_target(ins):
    """Static target of a PC-relative branch or call, else ``None``."""
    if ins.enc != "branch":
        return None
    return (ins.addr + 4 + ins.operands[0]) & 0xFFFF_FFFE


def literal_address(ins):
    """Address read by a PC-relative literal load (``LDR rt, [pc, #imm]``) or ADR result."""
    if ins.enc not in ("ldr_lit", "adr"):
        return None
    return ((ins.addr + 4) & ~3) + ins.operands[1]


def regs_written(ins):
    """General registers (0..14) written by ``ins``; sp writes included as 13."""
    m, e, ops = ins.mnemonic, ins.enc, ins.operands
    if e in ("shift_imm", "mov_reg", "addsub_reg", "addsub_imm3", "rsbs", "extend", "muls"):
        return {ops[0]}
    if e == "imm8":
        return set() if m == "CMP" else {ops[0]}
    if e == "dp":
        return set() if m in ("TST", "CMP", "CMN") else {ops[0]}
    if e == "hireg":
        return set() if m == "CMP" or ops[0] == PC else {ops[0]}
    if e in ("ldr_lit", "adr", "add_sp_rd", "ldst_sp"):
        return {ops[0]} if m != "STR" else set()
    if e in ("ldst_reg", "ldst_imm"):
        return {ops[0]} if m.startswith("LDR") else set()
    if e == "sp_adj":
        return {SP}
    if e == "pushpop":
        regs = {r for r in ops[0] if r != PC} if m == "POP" else set()
        return regs | {SP}
    if e == "ldstm":
        rn, regs = ops
        out = set(regs) if m == "LDM" else set()
        if m == "STM" or rn not in regs:
            out.add(rn)
        return out
    if m in ("BL", "BLX"):
        return {LR, 0, 1, 2, 3, 12}
    if e == "mrs":
        return {ops[0]}
    if e == "msr":
        return {SP}
    return set()


def _r(n):
    return {13: "sp", 14: "lr", 15: "pc"}.get(n, f"r{n}")


def _rl(regs):
    return "{" + ", ".join(_r(r) for r in regs) + "}"


def format_instr(ins):
    m, e, o = ins.mnemonic.lower(), ins.enc, ins.operands
    if e == "shift_imm":
        return f"{m} {_r(o[0])}, {_r(o[1])}, #{o[2]}"
    if e in ("mov_reg", "dp", "hireg", "extend", "rsbs"):
        suffix = ", #0" if e == "rsbs" else ""
        return f"{m} {_r(o[0])}, {_r(o[1])}{suffix}"
    if e in ("addsub_reg", "muls"):
        return f"{m} {_r(o[0])}, {_r(o[1])}, {_r(o[2])}"
    if e == "addsub_imm3":
        return f"{m} {_r(o[0])}, {_r(o[1])}, #{o[2]}"
    if e == "imm8":
        return f"{m} {_r(o[0])}, #{o[1]}"
    if e == "bx":
        return f"{m} {_r(o[0])}"
    if e == "ldr_lit":
        return f"{m} {_r(o[0])}, [pc, #{o[1]}]"
    if e == "ldst_reg":
        return f"{m} {_r(o[0])}, [{_r(o[1])}, {_r(o[2])}]"
    if e == "ldst_imm":
        return f"{m} {_r(o[0])}, [{_r(o[1])}, #{o[2]}]"
    if e == "ldst_sp":
        return f"{m} {_r(o[0])}, [sp, #{o[1]}]"
    if e == "adr":
        return f"adr {_r(o[0])}, #{o[1]}"
    if e == "add_sp_rd":
        return f"add {_r(o[0])}, sp, #{o[1]}"
    if e == "sp_adj":
        return f"{m} sp, #{o[0]}"
    if e == "pushpop":
        return f"{m} {_rl(o[0])}"
    if e == "ldstm":
        wb = "!" if ins.mnemonic == "STM" or o[0] not in o[1] else ""
        return f"{m} {_r(o[0])}{wb}, {_rl(o[1])}"
    if e == "branch":
        return f"{m} #{branch_target(ins):#x}"
    if e == "imm_only":
        return f"{m} #{o[0]}"
    if e == "cps":
        return f"{m} i"
    if e == "msr":
        return f"msr {o[0]}, {_r(o[1])}"
    if e == "mrs":
        return f"mrs {_r(o[0])}, {o[1]}"
    if e == "barrier":
        return f"{m} #{o[0]}"
    return m
