import re
import shutil
import struct
import subprocess

import pytest
from hypothesis import given, settings, strategies as st

from wcec.asm import assemble, build_image, write_elf
from wcec.errors import LoadError
from wcec.isa import decode_range
from wcec.loader import (DEFAULT_MAP, MapEntry, MemoryImage, MemoryRegion, RegionKind, check_map,
                         classify_address, classify_in_map, load_elf, load_raw, overlay_map, with_regions)

READELF = shutil.which("readelf")


def _elf(src="main:\nmovs r0,#1\nbx lr", **kw):
    img = build_image(src, **kw)[0]
    return img, write_elf(img, ["main"])


def _minimal_elf(segments, entry=0x0800_0001, ident=None):
    """Independent hand-packed ELF: ``segments`` is a list of (vaddr, data, memsz, flags)."""
    ident = ident or (b"\x7fELF" + bytes([1, 1, 1]) + bytes(9))
    phoff = 52
    off = phoff + 32 * len(segments)
    ph = b""
    body = b""
    for vaddr, data, memsz, flags in segments:
        ph += struct.pack("<IIIIIIII", 1, off + len(body), vaddr, vaddr, len(data), memsz, flags, 4)
        body += data
    hdr = ident + struct.pack("<HHIIIIIHHHHHH", 2, 40, 1, entry, phoff, 0, 0, 52, 32, len(segments), 40, 0, 0)
    return hdr + ph + body


def test_minimal_elf_one_flash_region():
    data = _minimal_elf([(0x0800_0000, b"\x00\xbf\x70\x47", 4, 5)])
    img = load_elf(data)
    assert [(r.base, r.size, r.kind) for r in img.regions] == [(0x0800_0000, 4, RegionKind.FLASH)]
    assert img.entry == 0x0800_0000
    assert img.symbols == {}


@pytest.mark.skipif(READELF is None, reason="readelf not available")
def test_elf_fields_agree_with_readelf(tmp_path):
    img, data = _elf(data=b"\x01\x02\x03")
    path = tmp_path / "a.elf"
    path.write_bytes(data)
    out = subprocess.run([READELF, "-lsh", "-W", str(path)], capture_output=True, text=True, check=True).stdout
    entry = int(re.search(r"Entry point address:\s+(0x[0-9a-f]+)", out).group(1), 16)
    loads = re.findall(r"LOAD\s+(0x\w+)\s+(0x\w+)\s+0x\w+\s+(0x\w+)\s+(0x\w+)\s+([RWE ]+?)\s+0x\w+\n", out)
    syms = dict((m[1], int(m[0], 16)) for m in re.findall(r"\d+:\s+([0-9a-f]{8})\s+\d+\s+\w+\s+GLOBAL\s+\w+\s+\w+\s+(\w+)", out))
    loaded = load_elf(data)
    assert loaded.entry == entry & ~1
    assert [(r.base, r.size) for r in loaded.regions] == [(int(v, 16), int(m, 16)) for _, v, _, m, _ in loads]
    assert ["W" in f for *_, f in loads] == [r.writable for r in loaded.regions]
    assert ["E" in f for *_, f in loads] == [r.executable for r in loaded.regions]
    assert loaded.symbols["main"] == syms["main"] & ~1
    assert loaded.read(0x2000_0000, 4) == b"\x01\x02\x03\x00"


def test_flash_and_ram_segments_classified():
    data = _minimal_elf([(0x0800_0000, b"\x70\x47", 2, 5), (0x2000_0000, b"", 16, 6)])
    img = load_elf(data)
    assert [r.kind for r in img.regions] == [RegionKind.FLASH, RegionKind.RAM]
    assert img.read(0x2000_0000, 16) == bytes(16)
    assert img.regions[1].writable and not img.regions[0].writable


def test_no_loadable_segments():
    with pytest.raises(LoadError, match="no loadable segments"):
        load_elf(_minimal_elf([]))


@pytest.mark.parametrize("ident,msg", [
    (b"\x7fELF" + bytes([2, 1, 1]) + bytes(9), "64-bit"),
    (b"\x7fELF" + bytes([1, 2, 1]) + bytes(9), "big-endian"),
    (b"\x7fELX" + bytes([1, 1, 1]) + bytes(9), "bad magic"),
])
def test_header_diagnostics_are_distinct(ident, msg):
    with pytest.raises(LoadError, match=msg):
        load_elf(_minimal_elf([(0x0800_0000, b"\x70\x47", 2, 5)], ident=ident))


def test_truncated_header():
    with pytest.raises(LoadError, match="malformed"):
        load_elf(b"\x7fELF\x01\x01")


def test_overlapping_segments():
    data = _minimal_elf([(0x0800_0000, b"\x70\x47" * 4, 8, 5), (0x0800_0004, b"\x70\x47", 2, 5)])
    with pytest.raises(LoadError, match="overlapping"):
        load_elf(data)


def test_entry_override():
    data = _minimal_elf([(0x0800_0000, b"\x00\xbf\x70\x47", 4, 5)])
    assert load_elf(data, entry=0x0800_0002).entry == 0x0800_0002


def test_raw_four_bytes():
    img = load_raw(b"\x00\xbf\x70\x47", 0x0, 0x0)
    assert len(img.regions) == 1 and img.regions[0].kind is RegionKind.FLASH
    assert img.symbols == {}


def test_raw_entry_at_end_is_rejected():
    with pytest.raises(LoadError):
        load_raw(b"\x00\xbf\x70\x47", 0x100, 0x104)


def test_raw_roundtrip_through_decoder():
    prog = assemble("movs r0,#1\nadds r0,r0,r1\nldr r2,[r1,#4]\npush {r4, lr}\nbl next\nnext: bx lr")
    img = load_raw(prog.code, prog.base, prog.base)
    again = decode_range(img, prog.base, prog.end)
    first = decode_range(build_image("main:\nmovs r0,#1\nadds r0,r0,r1\nldr r2,[r1,#4]\npush {r4, lr}\n"
                                     "bl next\nnext: bx lr")[0], prog.base, prog.end)
    assert again == first


@given(st.binary(min_size=2, max_size=64).filter(lambda b: len(b) % 2 == 0))
@settings(max_examples=50, deadline=None)
def test_raw_contents_reproduce_input(data):
    img = load_raw(data, 0x0800_0000, 0x0800_0000)
    assert img.read(0x0800_0000, len(data)) == data


@pytest.mark.parametrize("addr,kind", [
    (0x0800_0100, RegionKind.FLASH), (0x2000_0004, RegionKind.RAM), (0x6000_0000, RegionKind.UNMAPPED),
    (0x4000_0000, RegionKind.DEVICE), (0x0000_0010, RegionKind.FLASH),
])
def test_classify_default_map(addr, kind):
    img = load_raw(b"\x70\x47", 0x0800_0000, 0x0800_0000)
    assert classify_address(img, addr) is kind


def test_map_rejects_overlap():
    with pytest.raises(LoadError):
        check_map([MapEntry(0, 0x100, RegionKind.FLASH), MapEntry(0x80, 0x200, RegionKind.RAM)])


def test_custom_map_changes_classification():
    table = (MapEntry(0x0, 0x1000, RegionKind.RAM), MapEntry(0x1000, 0x2000, RegionKind.FLASH))
    img = load_raw(b"\x70\x47", 0x1000, 0x1000, table)
    assert img.classify(0x10) is RegionKind.RAM
    assert img.classify(0x1000) is RegionKind.FLASH


def test_segment_crossing_map_boundary():
    data = _minimal_elf([(0x1FFF_FFFC, bytes(8), 8, 5)])
    with pytest.raises(LoadError, match="crosses"):
        load_elf(data)


def test_entry_must_be_executable():
    r = MemoryRegion("ram0", 0x2000_0000, 16, RegionKind.RAM, writable=True)
    with pytest.raises(LoadError):
        MemoryImage((r,), {}, 0x2000_0000)


def test_region_overflow():
    with pytest.raises(LoadError):
        MemoryRegion("x", 0xFFFF_FFF0, 0x20, RegionKind.FLASH)


def test_with_regions_adds_ram():
    img = load_raw(b"\x70\x47", 0x0800_0000, 0x0800_0000)
    ram = MemoryRegion("ram0", 0x2000_0000, 8, RegionKind.RAM, writable=True)
    img2 = with_regions(img, [(ram, b"\x05" * 8)])
    assert img2.read(0x2000_0000, 2) == b"\x05\x05"
    assert img.region_at(0x2000_0000) is None


@given(st.integers(0, 0xFFFF_FFFF))
@settings(max_examples=200, deadline=None)
def test_every_address_has_one_classification(addr):
    hits = [e for e in DEFAULT_MAP if e.contains(addr)]
    assert len(hits) <= 1


_KINDS = [RegionKind.FLASH, RegionKind.RAM, RegionKind.DEVICE]


@st.composite
def _disjoint_entries(draw):
    cuts = sorted(draw(st.sets(st.integers(0, 1 << 16), min_size=2, max_size=8)))
    pairs = list(zip(cuts[::2], cuts[1::2]))
    return [MapEntry(lo, hi, draw(st.sampled_from(_KINDS))) for lo, hi in pairs]


@given(_disjoint_entries(), st.lists(st.integers(0, (1 << 16) + 4), max_size=40))
@settings(max_examples=200, deadline=None)
def test_overlay_override_wins_elsewhere_default(overrides, probes):
    merged = overlay_map(DEFAULT_MAP, overrides)
    for a in probes + [o.base for o in overrides] + [o.end - 1 for o in overrides]:
        expect = classify_in_map(overrides, a)
        if expect is RegionKind.UNMAPPED:
            expect = classify_in_map(DEFAULT_MAP, a)
        assert classify_in_map(merged, a) is expect
    assert classify_in_map(merged, 0x2000_0000 + (1 << 20)) is RegionKind.RAM


def test_overlay_with_no_overrides_is_identity():
    assert overlay_map(DEFAULT_MAP, ()) == check_map(DEFAULT_MAP)
