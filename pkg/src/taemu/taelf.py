"""TAELF container format: an ELF32-LE carrier for trusted applications.

The container keeps real ELF32 structure (header, program headers, section
headers) with a custom machine tag 0x5441 and three custom sections:
`.taimp` (import records), `.taent` (entrypoint records), and `.tablk`
(static basic-block map).  `serialize_taelf` is the single canonical writer,
so parse -> serialize round-trips byte-identically on its own output.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from . import gp
from .emucore import (
    GuestState,
    HOOK_REGION_BASE,
    HOOK_REGION_END,
    HOOK_SLOT_STRIDE,
    PERM_R,
    PERM_W,
    PERM_X,
    RETURN_TRAMPOLINE,
)
from .errors import (
    MalformedContainer,
    MissingEntrypoint,
    OverlapWithHookRegion,
    ParseError,
    UnresolvedStaticTa,
)

TAELF_MACHINE = 0x5441

_EHDR = struct.Struct("<16sHHIIIIIHHHHHH")
_PHDR = struct.Struct("<IIIIIIII")
_SHDR = struct.Struct("<IIIIIIIIII")

_ELF_MAGIC = b"\x7fELF\x01\x01\x01" + b"\x00" * 9
_ET_EXEC = 2
_PT_LOAD = 1
_SHT_NULL = 0
_SHT_PROGBITS = 1
_SHT_STRTAB = 3

_PF_X = 1
_PF_W = 2
_PF_R = 4

_FLAG_STATIC = 1  # e_flags bit: static TA, needs an annotation config


def _perm_to_pf(perm: int) -> int:
    pf = 0
    if perm & PERM_R:
        pf |= _PF_R
    if perm & PERM_W:
        pf |= _PF_W
    if perm & PERM_X:
        pf |= _PF_X
    return pf


def _pf_to_perm(pf: int) -> int:
    perm = 0
    if pf & _PF_R:
        perm |= PERM_R
    if pf & _PF_W:
        perm |= PERM_W
    if pf & _PF_X:
        perm |= PERM_X
    return perm


@dataclass
class Segment:
    vaddr: int
    flags: int  # PERM_R / PERM_W / PERM_X bits
    data: bytes

    @property
    def end(self) -> int:
        return self.vaddr + len(self.data)


@dataclass
class Import:
    slot_vaddr: int
    name: str


@dataclass
class TaElfFile:
    machine_tag: int = TAELF_MACHINE
    segments: list[Segment] = field(default_factory=list)
    imports: list[Import] = field(default_factory=list)
    entrypoints: dict[str, int] = field(default_factory=dict)
    is_static: bool = False
    block_map: list[int] = field(default_factory=list)


@dataclass
class StaticAnnotationConfig:
    """Inline hook annotations for statically linked TAs."""

    entries: list[tuple[int, str]] = field(default_factory=list)


@dataclass
class TaImage:
    """A TA mapped into a guest address space with rewritten import slots."""

    file: TaElfFile
    import_bindings: dict[int, str]
    entrypoints: dict[str, int]
    got_original: dict[int, int]
    inline_api_hooks: dict[int, str]
    block_map: list[int]


def sentinel_address(import_index: int) -> int:
    return HOOK_REGION_BASE + HOOK_SLOT_STRIDE * import_index


def _pad4(n: int) -> int:
    return (n + 3) & ~3


def _validate(file: TaElfFile) -> None:
    writable: list[tuple[int, int]] = []
    spans: list[tuple[int, int]] = []
    for seg in file.segments:
        if seg.vaddr % 4 != 0:
            raise MalformedContainer(f"segment at {seg.vaddr:#x} is not 4-byte aligned")
        spans.append((seg.vaddr, seg.end))
        if seg.flags & PERM_W:
            writable.append((seg.vaddr, seg.end))
    spans.sort()
    for (a0, a1), (b0, _b1) in zip(spans, spans[1:]):
        if b0 < a1:
            raise MalformedContainer("overlapping segments")
    for imp in file.imports:
        if not any(lo <= imp.slot_vaddr and imp.slot_vaddr + 4 <= hi for lo, hi in writable):
            raise MalformedContainer(
                f"import slot {imp.slot_vaddr:#x} ({imp.name}) not in a writable segment")
    if file.is_static and file.imports:
        raise MalformedContainer("static TA declares imports")
    for name in file.entrypoints:
        if name not in gp.ENTRYPOINT_NAMES:
            raise MalformedContainer(f"unknown entrypoint name {name!r}")
    if gp.ENTRY_INVOKE not in file.entrypoints:
        raise MissingEntrypoint(f"container lacks {gp.ENTRY_INVOKE}")


def serialize_taelf(file: TaElfFile) -> bytes:
    """Emit the canonical byte form of a TAELF container."""
    _validate(file)

    taimp = bytearray(struct.pack("<I", len(file.imports)))
    for imp in file.imports:
        encoded = imp.name.encode()
        taimp += struct.pack("<IH", imp.slot_vaddr, len(encoded)) + encoded

    taent = bytearray(struct.pack("<I", len(file.entrypoints)))
    for name in sorted(file.entrypoints):
        encoded = name.encode()
        taent += struct.pack("<IH", file.entrypoints[name], len(encoded)) + encoded

    blocks = sorted(set(file.block_map))
    tablk = struct.pack("<I", len(blocks)) + b"".join(struct.pack("<I", b) for b in blocks)

    shstrtab = b"\x00.taimp\x00.taent\x00.tablk\x00.shstrtab\x00"
    name_off = {".taimp": 1, ".taent": 8, ".tablk": 15, ".shstrtab": 22}

    phnum = len(file.segments)
    shnum = 5
    pos = _EHDR.size + _PHDR.size * phnum

    seg_offsets = []
    for seg in file.segments:
        pos = _pad4(pos)
        seg_offsets.append(pos)
        pos += len(seg.data)

    section_payloads = [bytes(taimp), bytes(taent), tablk, shstrtab]
    sec_offsets = []
    for payload in section_payloads:
        pos = _pad4(pos)
        sec_offsets.append(pos)
        pos += len(payload)

    shoff = _pad4(pos)

    flags = _FLAG_STATIC if file.is_static else 0
    entry = file.entrypoints.get(gp.ENTRY_INVOKE, 0)
    out = bytearray()
    out += _EHDR.pack(_ELF_MAGIC, _ET_EXEC, file.machine_tag, 1, entry,
                      _EHDR.size if phnum else 0, shoff, flags,
                      _EHDR.size, _PHDR.size, phnum, _SHDR.size, shnum, 4)

    for seg, off in zip(file.segments, seg_offsets):
        out += _PHDR.pack(_PT_LOAD, off, seg.vaddr, seg.vaddr,
                          len(seg.data), len(seg.data), _perm_to_pf(seg.flags), 4)

    for seg, off in zip(file.segments, seg_offsets):
        out += b"\x00" * (off - len(out))
        out += seg.data

    for payload, off in zip(section_payloads, sec_offsets):
        out += b"\x00" * (off - len(out))
        out += payload

    out += b"\x00" * (shoff - len(out))
    out += _SHDR.pack(_SHT_NULL, 0, 0, 0, 0, 0, 0, 0, 0, 0)
    for (name, payload, off) in zip((".taimp", ".taent", ".tablk"),
                                    section_payloads[:3], sec_offsets[:3]):
        out += _SHDR.pack(name_off[name], _SHT_PROGBITS, 0, 0, off, len(payload), 0, 0, 4, 0)
    out += _SHDR.pack(name_off[".shstrtab"], _SHT_STRTAB, 0, 0,
                      sec_offsets[3], len(shstrtab), 0, 0, 1, 0)
    return bytes(out)


def _slice(data: bytes, off: int, size: int, what: str) -> bytes:
    if off < 0 or size < 0 or off + size > len(data):
        raise MalformedContainer(f"{what} out of bounds (offset {off:#x}, size {size:#x})")
    return data[off:off + size]


def _parse_records(payload: bytes, what: str) -> list[tuple[int, str]]:
    if len(payload) < 4:
        raise MalformedContainer(f"truncated {what} section")
    (count,) = struct.unpack_from("<I", payload)
    records = []
    pos = 4
    for _ in range(count):
        if pos + 6 > len(payload):
            raise MalformedContainer(f"truncated {what} record")
        vaddr, name_len = struct.unpack_from("<IH", payload, pos)
        pos += 6
        if pos + name_len > len(payload):
            raise MalformedContainer(f"truncated {what} record name")
        name = payload[pos:pos + name_len].decode()
        pos += name_len
        records.append((vaddr, name))
    return records


def parse_taelf(data: bytes) -> TaElfFile:
    """Parse and structurally validate a TAELF container."""
    if len(data) < _EHDR.size:
        raise MalformedContainer("file shorter than the ELF header")
    (ident, e_type, machine, _ver, _entry, phoff, shoff, e_flags,
     _ehsize, phentsize, phnum, shentsize, shnum, shstrndx) = _EHDR.unpack_from(data)
    if ident[:7] != _ELF_MAGIC[:7]:
        raise MalformedContainer("bad ELF32-LE magic")
    if machine != TAELF_MACHINE:
        raise MalformedContainer(f"machine tag {machine:#x}, expected {TAELF_MACHINE:#x}")
    if e_type != _ET_EXEC:
        raise MalformedContainer("not an executable container")
    if phentsize != _PHDR.size or (shnum and shentsize != _SHDR.size):
        raise MalformedContainer("unexpected header entry sizes")

    segments = []
    for i in range(phnum):
        raw = _slice(data, phoff + i * _PHDR.size, _PHDR.size, "program header")
        p_type, p_offset, p_vaddr, _pa, p_filesz, _memsz, p_flags, _align = _PHDR.unpack(raw)
        if p_type != _PT_LOAD:
            continue
        seg_data = _slice(data, p_offset, p_filesz, f"segment {i}")
        segments.append(Segment(p_vaddr, _pf_to_perm(p_flags), bytes(seg_data)))

    sections: dict[str, bytes] = {}
    if shnum:
        shdrs = []
        for i in range(shnum):
            raw = _slice(data, shoff + i * _SHDR.size, _SHDR.size, "section header")
            shdrs.append(_SHDR.unpack(raw))
        if shstrndx >= shnum:
            raise MalformedContainer("bad section string table index")
        str_off, str_size = shdrs[shstrndx][4], shdrs[shstrndx][5]
        strtab = _slice(data, str_off, str_size, "string table")
        for sh in shdrs:
            sh_name, sh_type, _fl, _addr, sh_off, sh_size = sh[0], sh[1], sh[2], sh[3], sh[4], sh[5]
            if sh_type == _SHT_NULL:
                continue
            end = strtab.find(b"\x00", sh_name)
            name = strtab[sh_name:end if end >= 0 else None].decode()
            sections[name] = _slice(data, sh_off, sh_size, f"section {name}")

    imports = [Import(vaddr, name) for vaddr, name in
               _parse_records(sections.get(".taimp", b"\x00\x00\x00\x00"), ".taimp")]
    entry_records = _parse_records(sections.get(".taent", b"\x00\x00\x00\x00"), ".taent")
    entrypoints: dict[str, int] = {}
    for vaddr, name in entry_records:
        if name in entrypoints:
            raise MalformedContainer(f"duplicate entrypoint {name}")
        entrypoints[name] = vaddr

    block_map: list[int] = []
    blk = sections.get(".tablk")
    if blk is not None:
        if len(blk) < 4:
            raise MalformedContainer("truncated .tablk section")
        (count,) = struct.unpack_from("<I", blk)
        if 4 + 4 * count > len(blk):
            raise MalformedContainer("truncated .tablk records")
        block_map = list(struct.unpack_from(f"<{count}I", blk, 4)) if count else []

    file = TaElfFile(machine_tag=machine, segments=segments, imports=imports,
                     entrypoints=entrypoints, is_static=bool(e_flags & _FLAG_STATIC),
                     block_map=block_map)
    _validate(file)
    return file


def parse_annotation_config(text: str) -> StaticAnnotationConfig:
    """Parse the static-TA config: one `<hex-vaddr> <api-name>` per line."""
    entries: list[tuple[int, str]] = []
    seen: set[int] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError("expected '<hex-vaddr> <api-name>'", lineno)
        try:
            vaddr = int(parts[0], 16)
        except ValueError:
            raise ParseError(f"bad address {parts[0]!r}", lineno) from None
        if vaddr in seen:
            raise ParseError(f"duplicate address {vaddr:#x}", lineno)
        seen.add(vaddr)
        entries.append((vaddr, parts[1]))
    return StaticAnnotationConfig(entries)


def load(file: TaElfFile, config: StaticAnnotationConfig | None,
         guest: GuestState) -> TaImage:
    """Map a parsed TA into the guest and rewrite its import slots.

    Each import slot i is rewritten to the hook sentinel
    HOOK_REGION_BASE + 16*i; the original slot words are kept for byte-exact
    restoration.  Static TAs get their config addresses registered as inline
    API hook points instead.
    """
    if file.is_static and config is None:
        raise UnresolvedStaticTa("static TA requires an annotation config")

    trampoline_page = RETURN_TRAMPOLINE & ~0xFFF
    for seg in file.segments:
        if seg.vaddr < HOOK_REGION_END and seg.end > HOOK_REGION_BASE:
            raise OverlapWithHookRegion(
                f"segment {seg.vaddr:#x}..{seg.end:#x} intersects the hook region")
        if seg.vaddr < trampoline_page + 0x1000 and seg.end > trampoline_page:
            raise OverlapWithHookRegion(
                f"segment {seg.vaddr:#x}..{seg.end:#x} intersects the return trampoline")
        if any(guest.is_mapped(a, 1) for a in range(seg.vaddr & ~0xFFF, seg.end, 0x1000)):
            raise MalformedContainer(
                f"guest range {seg.vaddr:#x}..{seg.end:#x} already mapped")

    for seg in file.segments:
        guest.map_region(seg.vaddr, len(seg.data), seg.flags)
        guest.mem_write(seg.vaddr, seg.data, require=0)

    got_original: dict[int, int] = {}
    import_bindings: dict[int, str] = {}
    for index, imp in enumerate(file.imports):
        got_original[imp.slot_vaddr] = guest.read_u32(imp.slot_vaddr, require=0)
        guest.write_u32(imp.slot_vaddr, sentinel_address(index), require=0)
        import_bindings[index] = imp.name

    inline_api_hooks: dict[int, str] = {}
    if file.is_static and config is not None:
        for vaddr, api_name in config.entries:
            inline_api_hooks[vaddr] = api_name

    return TaImage(file=file, import_bindings=import_bindings,
                   entrypoints=dict(file.entrypoints), got_original=got_original,
                   inline_api_hooks=inline_api_hooks,
                   block_map=sorted(set(file.block_map)))
