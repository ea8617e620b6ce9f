"""A small two-pass Thumb assembler for the ARMv6-M subset used by fixtures.

``encode`` turns a decoded :class:`~wcec.isa.Instr` back into bytes, so that
``decode(encode(i)) == i``.  ``assemble`` accepts GNU-flavoured source with
labels, ``ldr rX, =value`` literals and a few directives (``.word``,
``.align``, ``.space``, ``.pool``, ``.equ``).
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field

from . import isa
from .isa import CONDITIONS, LR, PC, SP, Instr

_DP_CODE = {name: i for i, name in enumerate(isa._DP_OPS)}
_LDST_REG_CODE = {name: i for i, name in enumerate(isa._LDST_REG)}
_HINT_CODE = {name: i for i, name in enumerate(isa._HINTS)}
_SYSREGS = {"apsr": 0, "iapsr": 1, "eapsr": 2, "xpsr": 3, "ipsr": 5, "epsr": 6, "iepsr": 7,
            "msp": 8, "psp": 9, "primask": 16, "control": 20}


class AsmError(ValueError):
    pass


def _bits(regs):
    out = 0
    for r in regs:
        if r > 7:
            raise AsmError(f"register r{r} not allowed in a low register list")
        out |= 1 << r
    return out


def _check(value, lo, hi, what):
    if not lo <= value <= hi:
        raise AsmError(f"{what} {value} out of range [{lo}, {hi}]")
    return value


def encode_halfwords(ins):
    """Halfwords for ``ins`` (one or two)."""
    m, e, o = ins.mnemonic, ins.enc, ins.operands
    if e == "shift_imm":
        op = ("LSLS", "LSRS", "ASRS").index(m)
        return [(op << 11) | (_check(o[2], 0, 31, "shift") << 6) | (o[1] << 3) | o[0]]
    if e == "mov_reg":
        return [(o[1] << 3) | o[0]]
    if e in ("addsub_reg", "addsub_imm3"):
        op = ("ADDS", "SUBS").index(m) + (2 if e == "addsub_imm3" else 0)
        return [0x1800 | (op << 9) | (_check(o[2], 0, 7, "operand") << 6) | (o[1] << 3) | o[0]]
    if e == "imm8":
        op = ("MOVS", "CMP", "ADDS", "SUBS").index(m)
        return [0x2000 | (op << 11) | (o[0] << 8) | _check(o[1], 0, 255, "imm8")]
    if e == "dp":
        return [0x4000 | (_DP_CODE[m] << 6) | (o[1] << 3) | o[0]]
    if e == "muls":
        return [0x4000 | (_DP_CODE["MULS"] << 6) | (o[1] << 3) | o[0]]
    if e == "rsbs":
        return [0x4000 | (_DP_CODE["RSBS"] << 6) | (o[1] << 3) | o[0]]
    if e == "hireg":
        op = {"ADD": 0, "CMP": 1, "MOV": 2}[m]
        rdn, rm = o
        return [0x4400 | (op << 8) | ((rdn & 8) << 4) | (rm << 3) | (rdn & 7)]
    if e == "bx":
        return [0x4700 | (0x80 if m == "BLX" else 0) | (o[0] << 3)]
    if e == "ldr_lit":
        return [0x4800 | (o[0] << 8) | (_imm_scaled(o[1], 4, 255))]
    if e == "ldst_reg":
        return [0x5000 | (_LDST_REG_CODE[m] << 9) | (o[2] << 6) | (o[1] << 3) | o[0]]
    if e == "ldst_imm":
        if m in ("STR", "LDR", "STRB", "LDRB"):
            byte = m.endswith("B")
            load = m.startswith("LDR")
            imm = _imm_scaled(o[2], 1 if byte else 4, 31)
            return [0x6000 | (byte << 12) | (load << 11) | (imm << 6) | (o[1] << 3) | o[0]]
        load = m == "LDRH"
        return [0x8000 | (load << 11) | (_imm_scaled(o[2], 2, 31) << 6) | (o[1] << 3) | o[0]]
    if e == "ldst_sp":
        return [0x9000 | ((m == "LDR") << 11) | (o[0] << 8) | _imm_scaled(o[1], 4, 255)]
    if e == "adr":
        return [0xA000 | (o[0] << 8) | _imm_scaled(o[1], 4, 255)]
    if e == "add_sp_rd":
        return [0xA800 | (o[0] << 8) | _imm_scaled(o[1], 4, 255)]
    if e == "sp_adj":
        return [0xB000 | ((m == "SUB") << 7) | _imm_scaled(o[0], 4, 127)]
    if e == "extend":
        if m in ("SXTH", "SXTB", "UXTH", "UXTB"):
            return [0xB200 | (("SXTH", "SXTB", "UXTH", "UXTB").index(m) << 6) | (o[1] << 3) | o[0]]
        return [0xBA00 | ({"REV": 0, "REV16": 1, "REVSH": 3}[m] << 6) | (o[1] << 3) | o[0]]
    if e == "pushpop":
        regs = o[0]
        extra = LR if m == "PUSH" else PC
        low = [r for r in regs if r < 8]
        if any(r >= 8 and r != extra for r in regs):
            raise AsmError(f"{m} cannot transfer {regs}")
        base = 0xB400 if m == "PUSH" else 0xBC00
        return [base | ((extra in regs) << 8) | _bits(low)]
    if e == "ldstm":
        return [0xC000 | ((m == "LDM") << 11) | (o[0] << 8) | _bits(o[1])]
    if e == "branch":
        off = o[0]
        if off & 1:
            raise AsmError("branch offset must be even")
        if m == "B":
            return [0xE000 | ((_check(off, -2048, 2046, "branch offset") >> 1) & 0x7FF)]
        if m == "BL":
            _check(off, -(1 << 24), (1 << 24) - 2, "call offset")
            imm = off & 0x1FFFFFF
            s = (imm >> 24) & 1
            i1 = (imm >> 23) & 1
            i2 = (imm >> 22) & 1
            j1 = (1 - i1) ^ s
            j2 = (1 - i2) ^ s
            return [0xF000 | (s << 10) | ((imm >> 12) & 0x3FF),
                    0xD000 | (j1 << 13) | (j2 << 11) | ((imm >> 1) & 0x7FF)]
        cond = CONDITIONS.index(ins.cond)
        return [0xD000 | (cond << 8) | ((_check(off, -256, 254, "branch offset") >> 1) & 0xFF)]
    if e == "imm_only":
        if m == "SVC":
            return [0xDF00 | _check(o[0], 0, 255, "svc")]
        return [0xBE00 | _check(o[0], 0, 255, "bkpt")]
    if e == "hint":
        code = o[0] if o else _HINT_CODE[m]
        return [0xBF00 | (code << 4)]
    if e == "cps":
        return [0xB672 if o[0] else 0xB662]
    if e == "msr":
        return [0xF380 | o[1], 0x8800 | o[0]]
    if e == "mrs":
        return [0xF3EF, 0x8000 | (o[0] << 8) | o[1]]
    if e == "barrier":
        code = {"DSB": 4, "DMB": 5, "ISB": 6}[m]
        return [0xF3BF, 0x8F00 | (code << 4) | o[0]]
    raise AsmError(f"cannot encode form {e!r}")


def _imm_scaled(value, scale, maxv):
    if value % scale:
        raise AsmError(f"offset {value} not a multiple of {scale}")
    return _check(value // scale, 0, maxv, "offset")


def encode(ins):
    return b"".join(struct.pack("<H", h) for h in encode_halfwords(ins))


def make(mnemonic, operands, enc, addr=0, cond=None):
    """Build an Instr by encoding then decoding, so classification matches the decoder."""
    probe = Instr(addr, 2, mnemonic, tuple(operands), isa.Kind.OTHER, enc, cond=cond)
    hws = encode_halfwords(probe)
    return isa.decode_halfwords(addr, *hws)


# ---------------------------------------------------------------- text assembler

_REGS = {f"r{i}": i for i in range(16)}
_REGS.update({"sp": SP, "lr": LR, "pc": PC, "ip": 12, "fp": 11, "sb": 9, "sl": 10})


@dataclass
class Program:
    base: int
    code: bytes
    labels: dict = field(default_factory=dict)

    def addr(self, label):
        return self.labels[label]

    @property
    def end(self):
        return self.base + len(self.code)


@dataclass
class _Item:
    kind: str            # "ins", "word", "space", "align", "lit"
    line: int
    mnemonic: str = ""
    args: list = field(default_factory=list)
    size: int = 0
    addr: int = 0
    value: object = None


def _split_args(text):
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def _is_reg(tok):
    return tok.lower() in _REGS


def _reg(tok):
    try:
        return _REGS[tok.lower().rstrip("!")]
    except KeyError:
        raise AsmError(f"expected register, got {tok!r}") from None


def _reglist_arg(tok):
    if not (tok.startswith("{") and tok.endswith("}")):
        raise AsmError(f"expected register list, got {tok!r}")
    regs = set()
    for part in tok[1:-1].split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-")
            regs.update(range(_reg(a.strip()), _reg(b.strip()) + 1))
        elif part:
            regs.add(_reg(part))
    return tuple(sorted(regs))


class Assembler:
    def __init__(self, base=0x0800_0000, symbols=None):
        self.base = base
        self.symbols = dict(symbols or {})

    def _value(self, tok, labels):
        tok = tok.strip().lstrip("#")
        if tok in labels:
            return labels[tok]
        if tok in self.symbols:
            return self.symbols[tok]
        m = re.fullmatch(r"([A-Za-z_.$][\w.$]*)\s*([+-])\s*(\w+)", tok)
        if m and (m.group(1) in labels or m.group(1) in self.symbols):
            base = labels.get(m.group(1), self.symbols.get(m.group(1)))
            off = int(m.group(3), 0)
            return base + off if m.group(2) == "+" else base - off
        try:
            return int(tok, 0)
        except ValueError:
            raise AsmError(f"unknown value {tok!r}") from None

    def assemble(self, source):
        items = []
        pending_lits = []
        labels_at = {}
        for lineno, raw in enumerate(source.splitlines(), 1):
            line = raw.split("@")[0].split(";")[0].split("//")[0].strip()
            while True:
                m = re.match(r"^([A-Za-z_.$][\w.$]*):\s*(.*)$", line)
                if not m:
                    break
                labels_at.setdefault(len(items), []).append(m.group(1))
                line = m.group(2)
            if not line:
                continue
            parts = line.split(None, 1)
            op = parts[0].lower()
            args = _split_args(parts[1]) if len(parts) > 1 else []
            if op in (".thumb", ".syntax", ".text", ".thumb_func", ".global", ".globl", ".type"):
                continue
            if op == ".equ" or op == ".set":
                self.symbols[args[0]] = int(args[1], 0)
                continue
            if op == ".word":
                for a in args:
                    items.append(_Item("word", lineno, args=[a], size=4))
                continue
            if op == ".space":
                items.append(_Item("space", lineno, size=int(args[0], 0)))
                continue
            if op == ".align":
                items.append(_Item("align", lineno, value=4))
                continue
            if op in (".pool", ".ltorg"):
                items.append(_Item("align", lineno, value=4))
                for lit in pending_lits:
                    items.append(_Item("lit", lineno, args=[lit.args[1]], size=4, value=lit))
                pending_lits = []
                continue
            it = _Item("ins", lineno, mnemonic=op, args=args)
            it.size = 4 if op in ("bl", "msr", "mrs", "dmb", "dsb", "isb") else 2
            if op == "ldr" and len(args) == 2 and args[1].startswith("="):
                pending_lits.append(it)
            items.append(it)
        if pending_lits:
            items.append(_Item("align", 0, value=4))
            for lit in pending_lits:
                items.append(_Item("lit", 0, args=[lit.args[1]], size=4, value=lit))

        # pass 1: addresses
        labels = {}
        addr = self.base
        for idx, it in enumerate(items):
            for name in labels_at.get(idx, []):
                labels[name] = addr
            if it.kind == "align":
                it.size = (-addr) % it.value
            it.addr = addr
            if it.kind == "lit":
                it.value.value = addr
            addr += it.size
        for name in labels_at.get(len(items), []):
            labels[name] = addr

        # pass 2: encode
        out = bytearray()
        for it in items:
            if it.kind == "ins":
                try:
                    ins = self._instr(it, labels)
                except AsmError as exc:
                    raise AsmError(f"line {it.line}: {exc}") from None
                data = encode(ins)
                if len(data) != it.size:
                    raise AsmError(f"line {it.line}: size mismatch for {it.mnemonic}")
                out += data
            elif it.kind in ("word", "lit"):
                tok = it.args[0].lstrip("=")
                out += struct.pack("<I", self._value(tok, labels) & 0xFFFF_FFFF)
            elif it.kind == "space":
                out += bytes(it.size)
            elif it.kind == "align":
                out += b"\x00\xbf" * (it.size // 2)
        return Program(self.base, bytes(out), labels)

    def _instr(self, it, labels):
        op, a, addr = it.mnemonic, it.args, it.addr
        mk = lambda m, ops, enc, cond=None: make(m, ops, enc, addr, cond)  # noqa: E731
        M = op.upper()
        if op == "negs":
            M = "RSBS"
        n = len(a)

        def imm(tok):
            return self._value(tok, labels)

        def target_off(tok):
            return self._value(tok, labels) - (addr + 4)

        if M in ("B", "BL") or (M[:1] == "B" and M[1:] in CONDITIONS):
            cond = M[1:] if M not in ("B", "BL") else None
            if M == "BL":
                return mk("BL", (target_off(a[0]),), "branch")
            return mk(M, (target_off(a[0]),), "branch", cond)
        if M in ("BX", "BLX"):
            return mk(M, (_reg(a[0]),), "bx")
        if M in ("NOP", "YIELD", "WFE", "WFI", "SEV"):
            return mk(M, (), "hint")
        if M in ("SVC", "BKPT"):
            return mk(M, (imm(a[0]),), "imm_only")
        if M in ("CPSIE", "CPSID"):
            return mk(M, (M == "CPSID",), "cps")
        if M in ("DMB", "DSB", "ISB"):
            return mk(M, (15,), "barrier")
        if M == "MSR":
            return mk(M, (self._sysreg(a[0], labels), _reg(a[1])), "msr")
        if M == "MRS":
            return mk(M, (_reg(a[0]), self._sysreg(a[1], labels)), "mrs")
        if M in ("PUSH", "POP"):
            return mk(M, (_reglist_arg(a[0]),), "pushpop")
        if M in ("LDM", "STM", "LDMIA", "STMIA"):
            return mk(M[:3], (_reg(a[0]), _reglist_arg(a[1])), "ldstm")
        if M in ("SXTH", "SXTB", "UXTH", "UXTB", "REV", "REV16", "REVSH"):
            return mk(M, (_reg(a[0]), _reg(a[1])), "extend")
        if M == "ADR":
            return mk("ADR", (_reg(a[0]), imm(a[1]) - ((addr + 4) & ~3)), "adr")
        if M == "MOVS":
            if a[1].startswith("#"):
                return mk("MOVS", (_reg(a[0]), imm(a[1])), "imm8")
            return mk("MOVS", (_reg(a[0]), _reg(a[1])), "mov_reg")
        if M == "MOV":
            return mk("MOV", (_reg(a[0]), _reg(a[1])), "hireg")
        if M in ("ADDS", "SUBS"):
            if n == 2 and a[1].startswith("#"):
                return mk(M, (_reg(a[0]), imm(a[1])), "imm8")
            if n == 2:
                return mk(M, (_reg(a[0]), _reg(a[0]), _reg(a[1])), "addsub_reg")
            if a[2].startswith("#"):
                v = imm(a[2])
                if v > 7 and _reg(a[0]) == _reg(a[1]):
                    return mk(M, (_reg(a[0]), v), "imm8")
                return mk(M, (_reg(a[0]), _reg(a[1]), v), "addsub_imm3")
            return mk(M, (_reg(a[0]), _reg(a[1]), _reg(a[2])), "addsub_reg")
        if M in ("ADD", "SUB"):
            if _reg(a[0]) == SP and (n == 2 or _reg(a[1]) == SP) and a[-1].startswith("#"):
                return mk(M, (imm(a[-1]),), "sp_adj")
            if M == "ADD" and n == 3 and _reg(a[1]) == SP:
                return mk("ADD", (_reg(a[0]), imm(a[2])), "add_sp_rd")
            if M == "ADD" and n == 3 and _reg(a[1]) == PC:
                return mk("ADR", (_reg(a[0]), imm(a[2])), "adr")
            if M == "ADD" and n == 2:
                return mk("ADD", (_reg(a[0]), _reg(a[1])), "hireg")
            raise AsmError(f"unsupported form: {op} {', '.join(a)}")
        if M == "CMP":
            if a[1].startswith("#"):
                return mk("CMP", (_reg(a[0]), imm(a[1])), "imm8")
            rn, rm = _reg(a[0]), _reg(a[1])
            if rn < 8 and rm < 8:
                return mk("CMP", (rn, rm), "dp")
            return mk("CMP", (rn, rm), "hireg")
        if M in ("LSLS", "LSRS", "ASRS") and n == 3:
            return mk(M, (_reg(a[0]), _reg(a[1]), imm(a[2]) % 32 if M != "LSLS" else imm(a[2])), "shift_imm")
        if M == "MULS":
            rd = _reg(a[0])
            rn = _reg(a[1])
            if n == 3 and _reg(a[2]) != rd:
                if rn == rd:
                    rn = _reg(a[2])
                else:
                    raise AsmError("muls destination must equal one source")
            return mk("MULS", (rd, rn, rd), "muls")
        if M == "RSBS":
            return mk("RSBS", (_reg(a[0]), _reg(a[1])), "rsbs")
        if M in _DP_CODE:
            if n == 3:
                if _reg(a[0]) != _reg(a[1]):
                    raise AsmError(f"{op} is two-operand")
                a = [a[0], a[2]]
            return mk(M, (_reg(a[0]), _reg(a[1])), "dp")
        if M in _LDST_REG_CODE:
            return self._ldst(M, a, it, labels, mk)
        raise AsmError(f"unknown mnemonic {op!r}")

    def _sysreg(self, tok, labels):
        return _SYSREGS[tok.lower()] if tok.lower() in _SYSREGS else self._value(tok, labels)

    def _ldst(self, M, a, it, labels, mk):
        rt = _reg(a[0])
        mem = a[1]
        addr = it.addr
        if mem.startswith("="):
            return mk("LDR", (rt, it.value - ((addr + 4) & ~3)), "ldr_lit")
        if not mem.startswith("["):
            target = self._value(mem, labels)
            return mk("LDR", (rt, target - ((addr + 4) & ~3)), "ldr_lit")
        inner = [x.strip() for x in mem.strip("[]").split(",")]
        rn = _reg(inner[0])
        if len(inner) == 2 and _is_reg(inner[1]):
            return mk(M, (rt, rn, _reg(inner[1])), "ldst_reg")
        off = self._value(inner[1], labels) if len(inner) == 2 else 0
        if rn == PC:
            return mk("LDR", (rt, off), "ldr_lit")
        if rn == SP:
            return mk(M, (rt, off), "ldst_sp")
        return mk(M, (rt, rn, off), "ldst_imm")


def assemble(source, base=0x0800_0000, symbols=None):
    return Assembler(base, symbols).assemble(source)


def build_image(source, base=0x0800_0000, entry=None, ram_base=0x2000_0000, ram_size=0x1000,
                data=None, symbols=None):
    """Assemble ``source`` into a flash image with a zero-filled RAM region.

    Labels become symbols.  ``data`` optionally pre-initializes RAM bytes.
    """
    from .loader import MemoryImage, MemoryRegion, RegionKind

    prog = assemble(source, base, symbols)
    flash = MemoryRegion("flash0", base, len(prog.code), RegionKind.FLASH, executable=True)
    regions = [flash]
    contents = {"flash0": prog.code}
    if ram_size:
        ram = MemoryRegion("ram0", ram_base, ram_size, RegionKind.RAM, writable=True)
        regions.append(ram)
        init = bytes(data or b"")
        contents["ram0"] = init + bytes(ram_size - len(init))
    start = prog.labels.get("main", base) if entry is None else entry
    return MemoryImage(tuple(regions), contents, start, dict(prog.labels)), prog


def write_elf(image, func_symbols=()):
    """Serialize ``image`` as a little-endian ELF32 ARM executable.

    One PT_LOAD segment per region plus a symbol table; names listed in
    ``func_symbols`` are emitted as Thumb functions (value | 1).
    """
    import struct

    from .loader import RegionKind

    regions = sorted(image.regions, key=lambda r: r.base)
    names = sorted(image.symbols)
    strtab = b"\0"
    name_off = {}
    for n in names:
        name_off[n] = len(strtab)
        strtab += n.encode() + b"\0"
    shstr = b"\0.symtab\0.strtab\0.shstrtab\0"
    ehsize, phsize, shsize = 52, 32, 40
    phoff = ehsize
    off = phoff + phsize * len(regions)
    blobs = []
    phdrs = []
    for r in regions:
        data = image.contents.get(r.name) or b""
        filesz = len(data) if r.kind is not RegionKind.RAM or any(data) else 0
        flags = (4 if r.readable else 0) | (2 if r.writable else 0) | (1 if r.executable else 0)
        phdrs.append(struct.pack("<IIIIIIII", 1, off, r.base, r.base, filesz, r.size, flags, 4))
        blobs.append(bytes(data[:filesz]))
        off += filesz
    off = (off + 3) & ~3
    pad = off - sum(len(b) for b in blobs) - (phoff + phsize * len(regions))
    symtab = bytes(16)
    for n in names:
        v = image.symbols[n]
        is_func = n in func_symbols
        info = 2 if is_func else 0
        symtab += struct.pack("<IIIBBH", name_off[n], v | 1 if is_func else v, 0, 0x10 | info, 0, 0xFFF1)
    sym_off = off
    str_off = sym_off + len(symtab)
    shstr_off = str_off + len(strtab)
    sh_off = (shstr_off + len(shstr) + 3) & ~3
    tail_pad = sh_off - shstr_off - len(shstr)
    sections = [bytes(shsize),
                struct.pack("<IIIIIIIIII", 1, 2, 0, 0, sym_off, len(symtab), 2, 1, 4, 16),
                struct.pack("<IIIIIIIIII", 9, 3, 0, 0, str_off, len(strtab), 0, 0, 1, 0),
                struct.pack("<IIIIIIIIII", 17, 3, 0, 0, shstr_off, len(shstr), 0, 0, 1, 0)]
    ident = b"\x7fELF" + bytes([1, 1, 1, 0]) + bytes(8)
    header = ident + struct.pack("<HHIIIIIHHHHHH", 2, 40, 1, image.entry | 1, phoff, sh_off, 0x05000200,
                                 ehsize, phsize, len(regions), shsize, len(sections), 3)
    return (header + b"".join(phdrs) + b"".join(blobs) + bytes(pad) + symtab + strtab + shstr
            + bytes(tail_pad) + b"".join(sections))
