"""Executable images: ELF32/raw loading and the memory map used for access classification."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

from .errors import LoadError

MASK32 = 0xFFFF_FFFF


class RegionKind(str, enum.Enum):
    FLASH = "Flash"
    RAM = "Ram"
    DEVICE = "Device"
    UNMAPPED = "Unmapped"


@dataclass(frozen=True)
class MapEntry:
    """One row of the address-range classification table, ``[base, end)``."""

    base: int
    end: int
    kind: RegionKind

    def contains(self, addr):
        return self.base <= addr < self.end


# Cortex-M0 style layout: code/flash below 0x2000_0000, SRAM above, then peripherals.
DEFAULT_MAP = (
    MapEntry(0x0000_0000, 0x2000_0000, RegionKind.FLASH),
    MapEntry(0x2000_0000, 0x4000_0000, RegionKind.RAM),
    MapEntry(0x4000_0000, 0x6000_0000, RegionKind.DEVICE),
    MapEntry(0xE000_0000, 0xE010_0000, RegionKind.DEVICE),
)


def check_map(table):
    entries = sorted(table, key=lambda e: e.base)
    for e in entries:
        if not 0 <= e.base < e.end <= MASK32 + 1:
            raise LoadError(f"bad memory-map entry {e.base:#x}..{e.end:#x}")
        if e.kind is RegionKind.UNMAPPED:
            raise LoadError("memory-map entries cannot be Unmapped")
    for a, b in zip(entries, entries[1:]):
        if b.base < a.end:
            raise LoadError(f"memory-map entries overlap at {b.base:#x}")
    return tuple(entries)


def overlay_map(base, overrides):
    """``base`` with ``overrides`` laid on top; base entries are clipped around them."""
    top = check_map(overrides)
    out = list(top)
    for e in base:
        pieces = [(e.base, e.end)]
        for o in top:
            pieces = [p for lo, hi in pieces
                      for p in ((lo, min(hi, o.base)), (max(lo, o.end), hi)) if p[0] < p[1]]
        out += [MapEntry(lo, hi, e.kind) for lo, hi in pieces]
    return check_map(out)


def classify_in_map(table, addr):
    for e in table:
        if e.contains(addr):
            return e.kind
    return RegionKind.UNMAPPED


@dataclass(frozen=True)
class MemoryRegion:
    name: str
    base: int
    size: int
    kind: RegionKind
    readable: bool = True
    writable: bool = False
    executable: bool = False

    def __post_init__(self):
        if self.size < 0 or self.base < 0 or self.base + self.size > MASK32 + 1:
            raise LoadError(f"region {self.name} overflows the 32-bit address space")

    @property
    def end(self):
        return self.base + self.size

    def contains(self, addr):
        return self.base <= addr < self.base + self.size


@dataclass(frozen=True)
class MemoryImage:
    regions: tuple
    contents: dict
    entry: int
    symbols: dict = field(default_factory=dict)
    memory_map: tuple = DEFAULT_MAP

    def __post_init__(self):
        ordered = sorted(self.regions, key=lambda r: r.base)
        for a, b in zip(ordered, ordered[1:]):
            if b.base < a.end:
                raise LoadError(f"overlapping segments: {a.name} and {b.name}")
        for r in self.regions:
            data = self.contents.get(r.name)
            if data is not None and len(data) != r.size:
                raise LoadError(f"contents of {r.name} do not match its size")
        region = self.region_at(self.entry)
        if region is None or not region.executable:
            raise LoadError(f"entry {self.entry:#010x} is not in an executable region")

    def region_at(self, addr):
        for r in self.regions:
            if r.contains(addr):
                return r
        return None

    def classify(self, addr):
        r = self.region_at(addr)
        if r is not None:
            return r.kind
        return classify_in_map(self.memory_map, addr)

    def is_executable(self, addr):
        r = self.region_at(addr)
        return r is not None and r.executable

    def read(self, addr, n):
        """Initialized bytes at ``addr``; ``None`` if any byte is not loaded."""
        r = self.region_at(addr)
        if r is None or addr + n > r.end:
            return None
        data = self.contents.get(r.name)
        if data is None:
            return bytes(n)
        off = addr - r.base
        return bytes(data[off:off + n])

    def read_u16(self, addr):
        b = self.read(addr, 2)
        return None if b is None else struct.unpack("<H", b)[0]

    def read_u32(self, addr):
        b = self.read(addr, 4)
        return None if b is None else struct.unpack("<I", b)[0]

    def symbol(self, name):
        return self.symbols.get(name)

    def symbol_at(self, addr):
        for name, value in sorted(self.symbols.items()):
            if value == addr:
                return name
        return None


def classify_address(image, addr):
    return image.classify(addr)


def _classify_span(table, base, size):
    kind = classify_in_map(table, base)
    last = classify_in_map(table, base + max(size, 1) - 1)
    if kind != last:
        raise LoadError(f"segment at {base:#x} crosses a memory-map boundary")
    if kind is RegionKind.UNMAPPED:
        raise LoadError(f"segment at {base:#x} is outside the memory map")
    return kind


# ELF constants
PT_LOAD = 1
SHT_SYMTAB = 2
STT_FUNC = 2
STT_OBJECT = 1
EM_ARM = 40
PF_X, PF_W, PF_R = 1, 2, 4


def load_elf(data, memory_map=DEFAULT_MAP, entry=None):
    data = bytes(data)
    table = check_map(memory_map)
    if len(data) < 52 or data[:4] != b"\x7fELF":
        raise LoadError("malformed ELF header: bad magic or truncated")
    ei_class, ei_data = data[4], data[5]
    if ei_class == 2:
        raise LoadError("64-bit ELF is not supported")
    if ei_class != 1:
        raise LoadError(f"malformed ELF header: unknown class {ei_class}")
    if ei_data == 2:
        raise LoadError("big-endian ELF is not supported")
    if ei_data != 1:
        raise LoadError(f"malformed ELF header: unknown data encoding {ei_data}")
    (e_type, e_machine, _version, e_entry, e_phoff, e_shoff, _flags, _ehsize,
     e_phentsize, e_phnum, e_shentsize, e_shnum, _shstrndx) = struct.unpack_from("<HHIIIIIHHHHHH", data, 16)
    if e_phnum and e_phentsize < 32:
        raise LoadError("malformed ELF header: program header entry too small")
    if e_phoff + e_phnum * e_phentsize > len(data):
        raise LoadError("malformed ELF header: program headers beyond end of file")

    regions = []
    contents = {}
    counts = {}
    for i in range(e_phnum):
        (p_type, p_offset, p_vaddr, _paddr, p_filesz, p_memsz, p_flags,
         _align) = struct.unpack_from("<IIIIIIII", data, e_phoff + i * e_phentsize)
        if p_type != PT_LOAD or p_memsz == 0:
            continue
        if p_filesz > p_memsz or p_offset + p_filesz > len(data):
            raise LoadError(f"malformed program header {i}")
        kind = _classify_span(table, p_vaddr, p_memsz)
        n = counts.get(kind, 0)
        counts[kind] = n + 1
        name = f"{kind.value.lower()}{n}"
        region = MemoryRegion(name, p_vaddr, p_memsz, kind,
                              readable=bool(p_flags & PF_R),
                              writable=bool(p_flags & PF_W) and kind is not RegionKind.FLASH,
                              executable=bool(p_flags & PF_X))
        regions.append(region)
        contents[name] = bytes(data[p_offset:p_offset + p_filesz]) + bytes(p_memsz - p_filesz)
    if not regions:
        raise LoadError("no loadable segments")
    ordered = sorted(regions, key=lambda r: r.base)
    for a, b in zip(ordered, ordered[1:]):
        if b.base < a.end:
            raise LoadError(f"overlapping segments at {b.base:#010x}")

    symbols = _read_symbols(data, e_shoff, e_shnum, e_shentsize)
    start = e_entry & ~1 if entry is None else entry & ~1
    return MemoryImage(tuple(regions), contents, start, symbols, table)


def _read_symbols(data, shoff, shnum, shentsize):
    if not shoff or not shnum or shentsize < 40 or shoff + shnum * shentsize > len(data):
        return {}
    sections = [struct.unpack_from("<IIIIIIIIII", data, shoff + i * shentsize) for i in range(shnum)]
    symbols = {}
    for sh in sections:
        if sh[1] != SHT_SYMTAB:
            continue
        offset, size, link, entsize = sh[4], sh[5], sh[6], sh[9] or 16
        if link >= len(sections):
            continue
        stroff, strsize = sections[link][4], sections[link][5]
        strtab = data[stroff:stroff + strsize]
        for j in range(size // entsize):
            st_name, st_value, _size, st_info, _other, st_shndx = struct.unpack_from(
                "<IIIBBH", data, offset + j * entsize)
            if st_shndx == 0 or (st_info & 0xF) not in (STT_FUNC, STT_OBJECT, 0):
                continue
            end = strtab.find(b"\0", st_name)
            name = strtab[st_name:end].decode("ascii", "replace")
            if not name or name.startswith("$"):
                continue
            value = st_value & ~1 if (st_info & 0xF) == STT_FUNC else st_value
            symbols.setdefault(name, value)
    return symbols


def load_raw(data, base, entry, memory_map=DEFAULT_MAP, kind=None):
    table = check_map(memory_map)
    data = bytes(data)
    if not base <= entry < base + len(data):
        raise LoadError(f"entry {entry:#010x} outside image [{base:#010x}, {base + len(data):#010x})")
    if kind is None:
        kind = _classify_span(table, base, len(data))
    region = MemoryRegion(f"{kind.value.lower()}0", base, len(data), kind,
                          writable=kind is RegionKind.RAM, executable=True)
    return MemoryImage((region,), {region.name: data}, entry & ~1, {}, table)


def with_regions(image, extra):
    """Return a copy of ``image`` with additional (data) regions, e.g. a RAM block."""
    regions = tuple(image.regions) + tuple(r for r, _ in extra)
    contents = dict(image.contents)
    for r, data in extra:
        if data is not None:
            contents[r.name] = bytes(data)
    return MemoryImage(regions, contents, image.entry, dict(image.symbols), image.memory_map)
