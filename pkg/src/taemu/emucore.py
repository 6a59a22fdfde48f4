"""Deterministic TIR-32 emulator core with program-counter hook dispatch.

The core executes guest code one fixed-width instruction at a time.  Hooks
fire when the program counter lands on a rewritten import sentinel or on a
registered inline address; the bound handler runs on the host and execution
resumes at the caller (pc <- lr).  Every block transition feeds an AFL-style
edge-coverage map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from .errors import GuestMemoryFault

PAGE_SIZE = 4096
PAGE_MASK = ~(PAGE_SIZE - 1) & 0xFFFFFFFF

PERM_R = 1
PERM_W = 2
PERM_X = 4

HOOK_REGION_BASE = 0xF0000000
HOOK_REGION_END = 0xF1000000
HOOK_SLOT_STRIDE = 16

# Reaching this address means the current entrypoint invocation returned.
RETURN_TRAMPOLINE = 0xEFFFFF00

COVERAGE_MAP_SIZE = 65536
DEFAULT_INSTRUCTION_BUDGET = 1_000_000

INSN_SIZE = 8

REG_SP = 13
REG_LR = 14
REG_PC = 15

# Opcode numbers; encoding is [opcode u8 | rd u8 | rs1 u8 | rs2 u8 | imm i32].
OP_MOVI = 0x01
OP_MOV = 0x02
OP_ADD = 0x03
OP_SUB = 0x04
OP_AND = 0x05
OP_OR = 0x06
OP_XOR = 0x07
OP_SHL = 0x08
OP_SHR = 0x09
OP_LDW = 0x0A
OP_STW = 0x0B
OP_LDB = 0x0C
OP_STB = 0x0D
OP_CMP = 0x0E
OP_BEQ = 0x0F
OP_BNE = 0x10
OP_BLT = 0x11
OP_BGE = 0x12
OP_JMP = 0x13
OP_CALL = 0x14
OP_CALLR = 0x15
OP_RET = 0x16
OP_PUSH = 0x17
OP_POP = 0x18
OP_HALT = 0x19

# rs2 field value marking "second operand is the immediate".
RS2_IMM = 0xFF

_INSN = struct.Struct("<BBBBi")


class OutcomeKind(Enum):
    RETURNED = "returned"
    CRASH = "crash"
    BREAKPOINT = "breakpoint"
    BUDGET_EXHAUSTED = "budget-exhausted"


class CrashClass(Enum):
    INVALID_MEM_ACCESS = "invalid-mem-access"
    INVALID_INSTRUCTION = "invalid-instruction"
    HALT = "halt"
    ASAN_VIOLATION = "asan-violation"
    MISSING_API = "missing-api"
    PANIC = "panic"


@dataclass
class ExecOutcome:
    """Terminal result of an execution slice; exactly one kind per outcome."""

    kind: OutcomeKind
    gp_result: Optional[int] = None
    crash_class: Optional[CrashClass] = None
    fault_pc: Optional[int] = None
    fault_addr: Optional[int] = None
    violation: Optional[object] = None  # asan.AccessViolation for ASAN crashes
    api_name: Optional[str] = None
    panic_code: Optional[int] = None
    bp_addr: Optional[int] = None

    @classmethod
    def returned(cls, gp_result: int) -> "ExecOutcome":
        return cls(OutcomeKind.RETURNED, gp_result=gp_result)

    @classmethod
    def breakpoint(cls, addr: int) -> "ExecOutcome":
        return cls(OutcomeKind.BREAKPOINT, bp_addr=addr)

    @classmethod
    def budget_exhausted(cls) -> "ExecOutcome":
        return cls(OutcomeKind.BUDGET_EXHAUSTED)

    @classmethod
    def crash(cls, crash_class: CrashClass, fault_pc: int, fault_addr: int | None = None,
              violation: object = None, api_name: str | None = None,
              panic_code: int | None = None) -> "ExecOutcome":
        return cls(OutcomeKind.CRASH, crash_class=crash_class, fault_pc=fault_pc,
                   fault_addr=fault_addr, violation=violation, api_name=api_name,
                   panic_code=panic_code)

    @property
    def is_crash(self) -> bool:
        return self.kind is OutcomeKind.CRASH

    def crash_tag(self) -> str:
        """Stable short label for a crash (used by triage and dedup)."""
        assert self.kind is OutcomeKind.CRASH
        if self.crash_class is CrashClass.ASAN_VIOLATION and self.violation is not None:
            return f"asan:{self.violation.kind.value}"
        return self.crash_class.value

    def describe(self) -> str:
        if self.kind is OutcomeKind.RETURNED:
            return f"returned {self.gp_result:#010x}"
        if self.kind is OutcomeKind.BREAKPOINT:
            return f"breakpoint at {self.bp_addr:#010x}"
        if self.kind is OutcomeKind.BUDGET_EXHAUSTED:
            return "instruction budget exhausted"
        parts = [self.crash_tag(), f"pc={self.fault_pc:#010x}" if self.fault_pc is not None else "pc=?"]
        if self.fault_addr is not None:
            parts.append(f"addr={self.fault_addr:#010x}")
        if self.api_name:
            parts.append(f"api={self.api_name}")
        if self.panic_code is not None:
            parts.append(f"code={self.panic_code:#x}")
        return "crash: " + " ".join(parts)


@dataclass
class HookTable:
    """Sentinel and inline hook bindings plus debugger breakpoints."""

    sentinel_handlers: dict[int, Callable] = field(default_factory=dict)
    inline_handlers: dict[int, Callable] = field(default_factory=dict)
    breakpoints: set[int] = field(default_factory=set)

    def bind_sentinel(self, index: int, handler: Callable) -> None:
        self.sentinel_handlers[index] = handler

    def bind_inline(self, vaddr: int, handler: Callable) -> None:
        if HOOK_REGION_BASE <= vaddr < HOOK_REGION_END:
            raise ValueError("inline hook inside the hook region")
        self.inline_handlers[vaddr] = handler


def _block_hash(addr: int) -> int:
    h = (addr * 0x9E3779B1) & 0xFFFFFFFF
    return (h ^ (h >> 16)) & 0xFFFF


class GuestState:
    """Registers, flags, sparse paged memory, and the edge-coverage map."""

    def __init__(self, instruction_budget: int = DEFAULT_INSTRUCTION_BUDGET):
        self.regs = [0] * 16
        self.flag_z = False
        self.flag_n = False
        self.pages: dict[int, bytearray] = {}
        self.perms: dict[int, int] = {}
        self.coverage_map = bytearray(COVERAGE_MAP_SIZE)
        self.blocks_hit: set[int] = set()
        self.prev_block = 0
        self.instruction_budget = instruction_budget
        self.budget_remaining = instruction_budget
        self.tee = None  # attached by the manager; cloned by snapshots

    # -- memory ------------------------------------------------------------

    def map_region(self, vaddr: int, size: int, perm: int) -> None:
        """Map all pages covering [vaddr, vaddr+size) with the given perms."""
        if size <= 0:
            return
        start = vaddr & PAGE_MASK
        end = (vaddr + size - 1) & PAGE_MASK
        page = start
        while True:
            if page not in self.pages:
                self.pages[page] = bytearray(PAGE_SIZE)
            self.perms[page] = self.perms.get(page, 0) | perm
            if page == end:
                break
            page = (page + PAGE_SIZE) & 0xFFFFFFFF

    def unmap_page(self, page: int) -> None:
        self.pages.pop(page, None)
        self.perms.pop(page, None)

    def is_mapped(self, addr: int, size: int, perm: int = 0) -> bool:
        if size == 0:
            size = 1
        if addr + size > 0x100000000:
            return False
        page = addr & PAGE_MASK
        end = (addr + size - 1) & PAGE_MASK
        while True:
            p = self.perms.get(page)
            if p is None or (perm and (p & perm) != perm):
                return False
            if page == end:
                break
            page += PAGE_SIZE
        return True

    def _fault(self, addr: int, size: int, write: bool):
        raise GuestMemoryFault(addr, size, write)

    def mem_read(self, addr: int, size: int, require: int = PERM_R) -> bytes:
        if size == 0:
            return b""
        if not self.is_mapped(addr, size, require):
            self._fault(addr, size, False)
        out = bytearray()
        pos = addr
        remaining = size
        while remaining:
            page = pos & PAGE_MASK
            off = pos - page
            take = min(PAGE_SIZE - off, remaining)
            out += self.pages[page][off:off + take]
            pos += take
            remaining -= take
        return bytes(out)

    def mem_write(self, addr: int, data: bytes, require: int = PERM_W) -> None:
        if not data:
            return
        if not self.is_mapped(addr, len(data), require):
            self._fault(addr, len(data), True)
        pos = addr
        view = memoryview(data)
        while view:
            page = pos & PAGE_MASK
            off = pos - page
            take = min(PAGE_SIZE - off, len(view))
            self.pages[page][off:off + take] = view[:take]
            pos += take
            view = view[take:]

    def read_u32(self, addr: int, require: int = PERM_R) -> int:
        return struct.unpack("<I", self.mem_read(addr, 4, require))[0]

    def write_u32(self, addr: int, value: int, require: int = PERM_W) -> None:
        self.mem_write(addr, struct.pack("<I", value & 0xFFFFFFFF), require)

    def read_cstring(self, addr: int, limit: int = 4096) -> bytes:
        """Read a NUL-terminated byte string, page-checked, capped at limit."""
        out = bytearray()
        pos = addr
        while len(out) < limit:
            b = self.mem_read(pos, 1)
            if b == b"\x00":
                break
            out += b
            pos += 1
        return bytes(out)

    # -- coverage ----------------------------------------------------------

    def enter_block(self, addr: int) -> None:
        idx = (_block_hash(self.prev_block) ^ _block_hash(addr)) % COVERAGE_MAP_SIZE
        cell = self.coverage_map[idx]
        if cell != 0xFF:
            self.coverage_map[idx] = cell + 1
        self.blocks_hit.add(addr)
        self.prev_block = addr

    def reset_coverage(self) -> None:
        self.coverage_map = bytearray(COVERAGE_MAP_SIZE)
        self.blocks_hit = set()
        self.prev_block = 0


@dataclass
class GuestSnapshot:
    regs: list[int]
    flag_z: bool
    flag_n: bool
    pages: dict[int, bytes]
    perms: dict[int, int]
    coverage_map: bytes
    blocks_hit: set[int]
    prev_block: int
    budget_remaining: int
    tee_clone: object


def snapshot(guest: GuestState) -> GuestSnapshot:
    """Capture registers, flags, all mapped pages, coverage, and TEE state."""
    tee_clone = guest.tee.clone() if guest.tee is not None else None
    return GuestSnapshot(
        regs=list(guest.regs),
        flag_z=guest.flag_z,
        flag_n=guest.flag_n,
        pages={p: bytes(b) for p, b in guest.pages.items()},
        perms=dict(guest.perms),
        coverage_map=bytes(guest.coverage_map),
        blocks_hit=set(guest.blocks_hit),
        prev_block=guest.prev_block,
        budget_remaining=guest.budget_remaining,
        tee_clone=tee_clone,
    )


def restore(guest: GuestState, snap: GuestSnapshot) -> None:
    """Reset the guest to a snapshot; identity on observable guest state."""
    guest.regs = list(snap.regs)
    guest.flag_z = snap.flag_z
    guest.flag_n = snap.flag_n
    for page in list(guest.pages.keys()):
        if page not in snap.pages:
            guest.unmap_page(page)
    for page, data in snap.pages.items():
        guest.pages[page] = bytearray(data)
    guest.perms = dict(snap.perms)
    guest.coverage_map = bytearray(snap.coverage_map)
    guest.blocks_hit = set(snap.blocks_hit)
    guest.prev_block = snap.prev_block
    guest.budget_remaining = snap.budget_remaining
    if snap.tee_clone is not None:
        guest.tee = snap.tee_clone.clone()


def _sentinel_index(pc: int) -> Optional[int]:
    if HOOK_REGION_BASE <= pc < HOOK_REGION_END:
        index, off = divmod(pc - HOOK_REGION_BASE, HOOK_SLOT_STRIDE)
        if off == 0:
            return index
    return None


def _dispatch_hook(guest: GuestState, handler: Callable) -> Optional[ExecOutcome]:
    call_site = guest.regs[REG_LR]
    try:
        outcome = handler(guest)
    except GuestMemoryFault as fault:
        return ExecOutcome.crash(CrashClass.INVALID_MEM_ACCESS, fault_pc=call_site,
                                 fault_addr=fault.addr)
    if outcome is not None:
        return outcome
    guest.regs[REG_PC] = guest.regs[REG_LR]
    guest.enter_block(guest.regs[REG_PC])
    return None


def step(guest: GuestState, hooks: HookTable, skip_bp: Optional[int] = None) -> Optional[ExecOutcome]:
    """Execute one instruction or dispatch one hook.

    Returns None while execution can continue, otherwise the terminal
    outcome.  Guest-level errors surface as Crash outcomes, never as host
    exceptions.
    """
    pc = guest.regs[REG_PC]

    if pc == RETURN_TRAMPOLINE:
        return ExecOutcome.returned(guest.regs[0])

    if pc in hooks.breakpoints and pc != skip_bp:
        return ExecOutcome.breakpoint(pc)

    if guest.budget_remaining <= 0:
        return ExecOutcome.budget_exhausted()
    guest.budget_remaining -= 1

    idx = _sentinel_index(pc)
    if idx is not None:
        handler = hooks.sentinel_handlers.get(idx)
        if handler is None:
            return ExecOutcome.crash(CrashClass.INVALID_INSTRUCTION, fault_pc=pc)
        return _dispatch_hook(guest, handler)
    if HOOK_REGION_BASE <= pc < HOOK_REGION_END:
        return ExecOutcome.crash(CrashClass.INVALID_INSTRUCTION, fault_pc=pc)

    handler = hooks.inline_handlers.get(pc)
    if handler is not None:
        return _dispatch_hook(guest, handler)

    if pc % INSN_SIZE != 0:
        return ExecOutcome.crash(CrashClass.INVALID_INSTRUCTION, fault_pc=pc)
    try:
        raw = guest.mem_read(pc, INSN_SIZE, require=PERM_X)
    except GuestMemoryFault:
        return ExecOutcome.crash(CrashClass.INVALID_MEM_ACCESS, fault_pc=pc, fault_addr=pc)

    op, rd, rs1, rs2, imm = _INSN.unpack(raw)
    regs = guest.regs
    next_pc = (pc + INSN_SIZE) & 0xFFFFFFFF

    def operand2() -> int:
        return imm & 0xFFFFFFFF if rs2 == RS2_IMM else regs[rs2 & 0xF]

    try:
        if op == OP_MOVI:
            regs[rd & 0xF] = imm & 0xFFFFFFFF
        elif op == OP_MOV:
            regs[rd & 0xF] = regs[rs1 & 0xF]
        elif op == OP_ADD:
            regs[rd & 0xF] = (regs[rs1 & 0xF] + operand2()) & 0xFFFFFFFF
        elif op == OP_SUB:
            regs[rd & 0xF] = (regs[rs1 & 0xF] - operand2()) & 0xFFFFFFFF
        elif op == OP_AND:
            regs[rd & 0xF] = regs[rs1 & 0xF] & operand2()
        elif op == OP_OR:
            regs[rd & 0xF] = regs[rs1 & 0xF] | operand2()
        elif op == OP_XOR:
            regs[rd & 0xF] = regs[rs1 & 0xF] ^ operand2()
        elif op == OP_SHL:
            regs[rd & 0xF] = (regs[rs1 & 0xF] << (operand2() & 31)) & 0xFFFFFFFF
        elif op == OP_SHR:
            regs[rd & 0xF] = regs[rs1 & 0xF] >> (operand2() & 31)
        elif op == OP_LDW:
            regs[rd & 0xF] = guest.read_u32((regs[rs1 & 0xF] + imm) & 0xFFFFFFFF)
        elif op == OP_STW:
            guest.write_u32((regs[rs1 & 0xF] + imm) & 0xFFFFFFFF, regs[rd & 0xF])
        elif op == OP_LDB:
            regs[rd & 0xF] = guest.mem_read((regs[rs1 & 0xF] + imm) & 0xFFFFFFFF, 1)[0]
        elif op == OP_STB:
            guest.mem_write((regs[rs1 & 0xF] + imm) & 0xFFFFFFFF,
                            bytes([regs[rd & 0xF] & 0xFF]))
        elif op == OP_CMP:
            a = regs[rs1 & 0xF]
            b = operand2()
            sa = a - 0x100000000 if a & 0x80000000 else a
            sb = b - 0x100000000 if b & 0x80000000 else b
            guest.flag_z = a == b
            guest.flag_n = sa < sb
        elif op in (OP_BEQ, OP_BNE, OP_BLT, OP_BGE, OP_JMP):
            taken = (op == OP_JMP
                     or (op == OP_BEQ and guest.flag_z)
                     or (op == OP_BNE and not guest.flag_z)
                     or (op == OP_BLT and guest.flag_n)
                     or (op == OP_BGE and not guest.flag_n))
            target = (pc + imm) & 0xFFFFFFFF if taken else next_pc
            regs[REG_PC] = target
            guest.enter_block(target)
            return None
        elif op == OP_CALL:
            regs[REG_LR] = next_pc
            regs[REG_PC] = imm & 0xFFFFFFFF
            guest.enter_block(regs[REG_PC])
            return None
        elif op == OP_CALLR:
            regs[REG_LR] = next_pc
            regs[REG_PC] = regs[rs1 & 0xF]
            if _sentinel_index(regs[REG_PC]) is None:
                guest.enter_block(regs[REG_PC])
            return None
        elif op == OP_RET:
            regs[REG_PC] = regs[REG_LR]
            guest.enter_block(regs[REG_PC])
            return None
        elif op == OP_PUSH:
            regs[REG_SP] = (regs[REG_SP] - 4) & 0xFFFFFFFF
            guest.write_u32(regs[REG_SP], regs[rd & 0xF])
        elif op == OP_POP:
            regs[rd & 0xF] = guest.read_u32(regs[REG_SP])
            regs[REG_SP] = (regs[REG_SP] + 4) & 0xFFFFFFFF
        elif op == OP_HALT:
            return ExecOutcome.crash(CrashClass.HALT, fault_pc=pc)
        else:
            return ExecOutcome.crash(CrashClass.INVALID_INSTRUCTION, fault_pc=pc)
    except GuestMemoryFault as fault:
        return ExecOutcome.crash(CrashClass.INVALID_MEM_ACCESS, fault_pc=pc,
                                 fault_addr=fault.addr)

    regs[REG_PC] = next_pc
    return None


def prepare_entry(guest: GuestState, entry_vaddr: int, args: tuple[int, ...] = ()) -> None:
    """Arm the guest to run an entrypoint: args in r0..r3, lr at trampoline."""
    for i, value in enumerate(args[:4]):
        guest.regs[i] = value & 0xFFFFFFFF
    guest.regs[REG_LR] = RETURN_TRAMPOLINE
    guest.regs[REG_PC] = entry_vaddr
    guest.budget_remaining = guest.instruction_budget
    guest.enter_block(entry_vaddr)


def continue_run(guest: GuestState, hooks: HookTable,
                 skip_bp: Optional[int] = None) -> ExecOutcome:
    """Step until a terminal outcome; skip_bp suppresses one breakpoint hit."""
    outcome = step(guest, hooks, skip_bp=skip_bp)
    while outcome is None:
        outcome = step(guest, hooks)
    return outcome


def run_until_return(guest: GuestState, hooks: HookTable, entry_vaddr: int,
                     args: tuple[int, ...] = ()) -> ExecOutcome:
    """Invoke an entrypoint and run until it returns, crashes, or stalls."""
    prepare_entry(guest, entry_vaddr, args)
    return continue_run(guest, hooks)
