"""Two-pass assembler for the TIR-32 dialect, emitting TAELF containers.

Syntax (one item per line, `;` starts a comment):

    .segment text 0x10000 rx
    .segment data 0x20000 rw
    .import TEE_Malloc            ; reserves a 4-byte GOT slot here
    .entry TA_InvokeCommandEntryPoint main
    .static                       ; marks a config-annotated TA
    .word 1, 0x2000               ; 32-bit little-endian words (.data alias)
    .byte 0xde, 0xad
    .asciz "hello"
    .space 16
    .align 8
    main:
        MOVI r0, #0
        ADD  r1, r2, #4           ; #imm or a third register
        LDW  r3, [r1, #8]
        CALLG TEE_Malloc          ; call through the GOT slot (uses r7)
        RET

The full instruction set and calling convention live in docs/isa.md.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from . import emucore, gp
from .errors import AssemblyError
from .taelf import Import, Segment, TaElfFile, serialize_taelf

_INSN = struct.Struct("<BBBBi")

_REG_ALIASES = {"sp": emucore.REG_SP, "lr": emucore.REG_LR, "pc": emucore.REG_PC}

# mnemonic -> (opcode, operand form)
_FORMS = {
    "MOVI": (emucore.OP_MOVI, "ri"),
    "MOV": (emucore.OP_MOV, "rr"),
    "ADD": (emucore.OP_ADD, "rrx"),
    "SUB": (emucore.OP_SUB, "rrx"),
    "AND": (emucore.OP_AND, "rrx"),
    "OR": (emucore.OP_OR, "rrx"),
    "XOR": (emucore.OP_XOR, "rrx"),
    "SHL": (emucore.OP_SHL, "rrx"),
    "SHR": (emucore.OP_SHR, "rrx"),
    "LDW": (emucore.OP_LDW, "mem"),
    "STW": (emucore.OP_STW, "mem"),
    "LDB": (emucore.OP_LDB, "mem"),
    "STB": (emucore.OP_STB, "mem"),
    "CMP": (emucore.OP_CMP, "rx"),
    "BEQ": (emucore.OP_BEQ, "rel"),
    "BNE": (emucore.OP_BNE, "rel"),
    "BLT": (emucore.OP_BLT, "rel"),
    "BGE": (emucore.OP_BGE, "rel"),
    "JMP": (emucore.OP_JMP, "rel"),
    "CALL": (emucore.OP_CALL, "abs"),
    "CALLR": (emucore.OP_CALLR, "r1"),
    "RET": (emucore.OP_RET, "none"),
    "PUSH": (emucore.OP_PUSH, "rd"),
    "POP": (emucore.OP_POP, "rd"),
    "HALT": (emucore.OP_HALT, "none"),
}

_CONTROL_OPS = {emucore.OP_BEQ, emucore.OP_BNE, emucore.OP_BLT, emucore.OP_BGE,
                emucore.OP_JMP, emucore.OP_CALL, emucore.OP_CALLR, emucore.OP_RET}

CALLG_SCRATCH_REG = 7  # clobbered by the CALLG import-call pseudo-instruction


@dataclass
class _Seg:
    name: str
    vaddr: int
    perm: int
    data: bytearray = field(default_factory=bytearray)

    @property
    def cursor(self) -> int:
        return self.vaddr + len(self.data)


@dataclass
class _Insn:
    lineno: int
    addr: int
    mnemonic: str
    operands: list[str]


def _parse_reg(tok: str, lineno: int) -> int:
    t = tok.strip().lower()
    if t in _REG_ALIASES:
        return _REG_ALIASES[t]
    if t.startswith("r") and t[1:].isdigit():
        n = int(t[1:])
        if 0 <= n <= 15:
            return n
    raise AssemblyError(f"bad register {tok!r}", lineno)


def _split_operands(rest: str) -> list[str]:
    """Split on commas that are outside brackets: 'r0, [r1, #4]' -> 2 ops."""
    ops, depth, cur = [], 0, ""
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            ops.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        ops.append(cur.strip())
    return ops


class _Assembler:
    def __init__(self, source: str):
        self.source = source
        self.segments: list[_Seg] = []
        self.labels: dict[str, int] = {}
        self.imports: list[Import] = []
        self.import_slots: dict[str, int] = {}
        self.entry_requests: list[tuple[str, str, int]] = []
        self.is_static = False
        self.insns: list[_Insn] = []
        self.leaders: set[int] = set()

    # -- pass 1: layout ------------------------------------------------------

    def _seg(self, lineno: int) -> _Seg:
        if not self.segments:
            raise AssemblyError("code or data before any .segment", lineno)
        return self.segments[-1]

    def _emit_bytes(self, data: bytes, lineno: int) -> None:
        self._seg(lineno).data += data

    def _def_label(self, name: str, lineno: int) -> None:
        if name in self.labels:
            raise AssemblyError(f"duplicate label {name!r}", lineno)
        self.labels[name] = self._seg(lineno).cursor

    def _int(self, tok: str, lineno: int) -> int:
        try:
            return int(tok, 0)
        except ValueError:
            raise AssemblyError(f"bad number {tok!r}", lineno) from None

    def _directive(self, name: str, rest: str, lineno: int) -> None:
        if name == ".segment":
            parts = rest.split()
            if len(parts) != 3:
                raise AssemblyError(".segment expects NAME VADDR PERMS", lineno)
            vaddr = self._int(parts[1], lineno)
            perm = 0
            for ch in parts[2].lower():
                try:
                    perm |= {"r": emucore.PERM_R, "w": emucore.PERM_W,
                             "x": emucore.PERM_X}[ch]
                except KeyError:
                    raise AssemblyError(f"bad permission letter {ch!r}", lineno) from None
            self.segments.append(_Seg(parts[0], vaddr, perm))
        elif name == ".entry":
            parts = rest.split()
            if len(parts) != 2:
                raise AssemblyError(".entry expects ENTRYPOINT LABEL", lineno)
            if parts[0] not in gp.ENTRYPOINT_NAMES:
                raise AssemblyError(f"unknown entrypoint {parts[0]!r}", lineno)
            if any(parts[0] == existing for existing, _, _ in self.entry_requests):
                raise AssemblyError(f"duplicate entrypoint {parts[0]}", lineno)
            self.entry_requests.append((parts[0], parts[1], lineno))
        elif name == ".import":
            api = rest.strip()
            if not api:
                raise AssemblyError(".import expects an API name", lineno)
            if self.is_static:
                raise AssemblyError(".import not allowed in a .static TA", lineno)
            if api in self.import_slots:
                raise AssemblyError(f"duplicate import {api!r}", lineno)
            seg = self._seg(lineno)
            if not seg.perm & emucore.PERM_W:
                raise AssemblyError(".import slot must be in a writable segment", lineno)
            self.import_slots[api] = seg.cursor
            self.imports.append(Import(seg.cursor, api))
            seg.data += b"\x00\x00\x00\x00"
        elif name == ".static":
            if self.imports:
                raise AssemblyError(".static TA cannot have imports", lineno)
            self.is_static = True
        elif name in (".word", ".data"):
            for tok in _split_operands(rest):
                self._emit_bytes(struct.pack("<I", self._int(tok, lineno) & 0xFFFFFFFF),
                                 lineno)
        elif name == ".byte":
            for tok in _split_operands(rest):
                value = self._int(tok, lineno)
                if not 0 <= value <= 0xFF:
                    raise AssemblyError(f"byte value {tok} out of range", lineno)
                self._emit_bytes(bytes([value]), lineno)
        elif name == ".asciz":
            try:
                text = json.loads(rest.strip())
            except (json.JSONDecodeError, ValueError):
                raise AssemblyError("bad string literal", lineno) from None
            self._emit_bytes(text.encode() + b"\x00", lineno)
        elif name == ".space":
            self._emit_bytes(b"\x00" * self._int(rest.strip(), lineno), lineno)
        elif name == ".align":
            n = self._int(rest.strip(), lineno)
            if n <= 0:
                raise AssemblyError("alignment must be positive", lineno)
            seg = self._seg(lineno)
            pad = (-seg.cursor) % n
            seg.data += b"\x00" * pad
        else:
            raise AssemblyError(f"unknown directive {name}", lineno)

    def _layout(self) -> None:
        for lineno, raw in enumerate(self.source.splitlines(), 1):
            line = raw.split(";", 1)[0].strip()
            while line and ":" in line.split()[0]:
                label, _, line = line.partition(":")
                label = label.strip()
                if not label.isidentifier():
                    raise AssemblyError(f"bad label {label!r}", lineno)
                self._def_label(label, lineno)
                line = line.strip()
            if not line:
                continue
            if line.startswith("."):
                name, _, rest = line.partition(" ")
                self._directive(name.strip(), rest.strip(), lineno)
                continue
            mnem, _, rest = line.partition(" ")
            mnem = mnem.upper()
            seg = self._seg(lineno)
            if not seg.perm & emucore.PERM_X:
                raise AssemblyError("instruction outside an executable segment", lineno)
            if seg.cursor % emucore.INSN_SIZE != 0:
                raise AssemblyError("instruction not 8-byte aligned; use .align 8", lineno)
            operands = _split_operands(rest)
            if mnem == "CALLG":
                size = 3 * emucore.INSN_SIZE
            elif mnem in _FORMS:
                size = emucore.INSN_SIZE
            else:
                raise AssemblyError(f"unknown mnemonic {mnem!r}", lineno)
            self.insns.append(_Insn(lineno, seg.cursor, mnem, operands))
            seg.data += b"\x00" * size

    # -- pass 2: encode --------------------------------------------------------

    def _value(self, tok: str, lineno: int) -> int:
        tok = tok.strip()
        if tok.startswith("#"):
            tok = tok[1:]
        if tok in self.labels:
            return self.labels[tok]
        try:
            return int(tok, 0)
        except ValueError:
            raise AssemblyError(f"undefined label or bad value {tok!r}", lineno) from None

    def _rs2_or_imm(self, tok: str, lineno: int) -> tuple[int, int]:
        tok = tok.strip()
        if tok.startswith("#") or tok in self.labels or tok[:1].isdigit() or tok[:1] == "-":
            return emucore.RS2_IMM, self._value(tok, lineno)
        return _parse_reg(tok, lineno), 0

    def _pack(self, op: int, rd: int, rs1: int, rs2: int, imm: int, lineno: int) -> bytes:
        if imm > 0x7FFFFFFF:
            imm -= 0x100000000
        if not -0x80000000 <= imm <= 0x7FFFFFFF:
            raise AssemblyError(f"immediate {imm:#x} out of 32-bit range", lineno)
        return _INSN.pack(op, rd, rs1, rs2, imm)

    def _expect(self, insn: _Insn, n: int) -> list[str]:
        if len(insn.operands) != n:
            raise AssemblyError(
                f"{insn.mnemonic} expects {n} operand(s), got {len(insn.operands)}",
                insn.lineno)
        return insn.operands

    def _mem_operand(self, tok: str, lineno: int) -> tuple[int, int]:
        tok = tok.strip()
        if not (tok.startswith("[") and tok.endswith("]")):
            raise AssemblyError(f"expected memory operand, got {tok!r}", lineno)
        inner = _split_operands(tok[1:-1])
        base = _parse_reg(inner[0], lineno)
        off = self._value(inner[1], lineno) if len(inner) > 1 else 0
        return base, off

    def _encode(self, insn: _Insn, seg: _Seg) -> None:
        lineno, addr = insn.lineno, insn.addr
        chunks: list[bytes] = []
        if insn.mnemonic == "CALLG":
            (api,) = self._expect(insn, 1)
            api = api.strip()
            if api not in self.import_slots:
                raise AssemblyError(f"CALLG target {api!r} is not a declared import", lineno)
            slot = self.import_slots[api]
            r7 = CALLG_SCRATCH_REG
            chunks.append(self._pack(emucore.OP_MOVI, r7, 0, 0, slot, lineno))
            chunks.append(self._pack(emucore.OP_LDW, r7, r7, 0, 0, lineno))
            chunks.append(self._pack(emucore.OP_CALLR, 0, r7, 0, 0, lineno))
            self.leaders.add(addr + 3 * emucore.INSN_SIZE)
        else:
            op, form = _FORMS[insn.mnemonic]
            if form == "ri":
                rd, val = self._expect(insn, 2)
                chunks.append(self._pack(op, _parse_reg(rd, lineno), 0, 0,
                                         self._value(val, lineno), lineno))
            elif form == "rr":
                rd, rs = self._expect(insn, 2)
                chunks.append(self._pack(op, _parse_reg(rd, lineno),
                                         _parse_reg(rs, lineno), 0, 0, lineno))
            elif form == "rrx":
                rd, rs1, x = self._expect(insn, 3)
                rs2, imm = self._rs2_or_imm(x, lineno)
                chunks.append(self._pack(op, _parse_reg(rd, lineno),
                                         _parse_reg(rs1, lineno), rs2, imm, lineno))
            elif form == "mem":
                rd, mem = self._expect(insn, 2)
                base, off = self._mem_operand(mem, lineno)
                chunks.append(self._pack(op, _parse_reg(rd, lineno), base, 0, off, lineno))
            elif form == "rx":
                rs1, x = self._expect(insn, 2)
                rs2, imm = self._rs2_or_imm(x, lineno)
                chunks.append(self._pack(op, 0, _parse_reg(rs1, lineno), rs2, imm, lineno))
            elif form == "rel":
                (target,) = self._expect(insn, 1)
                dest = self._value(target, lineno)
                chunks.append(self._pack(op, 0, 0, 0, dest - addr, lineno))
                self.leaders.add(dest)
                self.leaders.add(addr + emucore.INSN_SIZE)
            elif form == "abs":
                (target,) = self._expect(insn, 1)
                dest = self._value(target, lineno)
                chunks.append(self._pack(op, 0, 0, 0, dest, lineno))
                self.leaders.add(dest)
                self.leaders.add(addr + emucore.INSN_SIZE)
            elif form == "r1":
                (rs,) = self._expect(insn, 1)
                chunks.append(self._pack(op, 0, _parse_reg(rs, lineno), 0, 0, lineno))
                self.leaders.add(addr + emucore.INSN_SIZE)
            elif form == "rd":
                (rd,) = self._expect(insn, 1)
                chunks.append(self._pack(op, _parse_reg(rd, lineno), 0, 0, 0, lineno))
            elif form == "none":
                self._expect(insn, 0)
                chunks.append(self._pack(op, 0, 0, 0, 0, lineno))
                if op == emucore.OP_RET:
                    self.leaders.add(addr + emucore.INSN_SIZE)
            else:  # pragma: no cover
                raise AssemblyError(f"unhandled form {form}", lineno)
        encoded = b"".join(chunks)
        off = addr - seg.vaddr
        seg.data[off:off + len(encoded)] = encoded

    def assemble(self) -> TaElfFile:
        self._layout()
        for insn in self.insns:
            seg = next(s for s in self.segments
                       if s.vaddr <= insn.addr < s.vaddr + len(s.data))
            self._encode(insn, seg)

        entrypoints: dict[str, int] = {}
        for name, label, lineno in self.entry_requests:
            if label not in self.labels:
                raise AssemblyError(f"undefined entrypoint label {label!r}", lineno)
            entrypoints[name] = self.labels[label]
            self.leaders.add(self.labels[label])

        exec_ranges = [(s.vaddr, s.vaddr + len(s.data))
                       for s in self.segments if s.perm & emucore.PERM_X]
        for name, addr in self.labels.items():
            if any(lo <= addr < hi for lo, hi in exec_ranges):
                self.leaders.add(addr)
        block_map = sorted(a for a in self.leaders
                           if any(lo <= a < hi for lo, hi in exec_ranges))

        return TaElfFile(
            segments=[Segment(s.vaddr, s.perm, bytes(s.data)) for s in self.segments],
            imports=list(self.imports),
            entrypoints=entrypoints,
            is_static=self.is_static,
            block_map=block_map,
        )


def assemble_file(source: str) -> TaElfFile:
    """Assemble TIR-32 source into a structured TAELF file."""
    return _Assembler(source).assemble()


def assemble(source: str) -> bytes:
    """Assemble TIR-32 source into TAELF container bytes."""
    return serialize_taelf(assemble_file(source))
