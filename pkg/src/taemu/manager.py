"""TA manager: session lifecycle, parameter marshalling, outcome classification.

Marshalling is deliberately unsanitized: whatever parameter kinds the client
declares are written into guest memory verbatim, nibbles and declared sizes
untouched.  A TA that trusts the paramTypes word without checking it will
misinterpret values as pointers here exactly as it would on a device; that
fidelity is the point.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Union

from . import gp
from .emucore import (
    ExecOutcome,
    GuestState,
    HookTable,
    OutcomeKind,
    PERM_R,
    PERM_W,
    REG_SP,
    continue_run,
    prepare_entry,
    run_until_return,
)
from .errors import BadSessionError, TaemuError
from .taelf import StaticAnnotationConfig, TaElfFile, TaImage, load, parse_taelf
from .vtee import (
    ApiRegistry,
    EmulationCrash,
    MissingApiPolicy,
    SharedRegion,
    TeeContext,
    TeeState,
)

STACK_TOP = 0x80000000
STACK_SIZE = 0x10000
SCRATCH_BASE = 0xE0000000
SCRATCH_SIZE = 0x1000

_SESS_CTX_SLOT = SCRATCH_BASE  # guest slot receiving the TA's session context


@dataclass
class ValueParam:
    a: int = 0
    b: int = 0


@dataclass
class MemrefParam:
    data: bytes = b""
    declared_size: Optional[int] = None  # passes through unclamped when set

    @property
    def size(self) -> int:
        return len(self.data) if self.declared_size is None else self.declared_size


class NoneParam:
    pass


Param = Union[NoneParam, ValueParam, MemrefParam]


@dataclass
class GpParamSet:
    """Four client-declared parameter slots plus the 16-bit paramTypes word."""

    param_types: int = 0
    params: list[Param] = field(default_factory=lambda: [NoneParam()] * 4)

    def __post_init__(self):
        if len(self.params) != 4:
            raise ValueError("exactly four parameter slots required")
        self.param_types &= 0xFFFF

    @classmethod
    def empty(cls) -> "GpParamSet":
        return cls()


@dataclass
class InvocationResult:
    return_code: int
    return_origin: int
    out_params: list[Optional[Union[tuple[int, int], bytes]]]
    log_lines: list[str]
    outcome: ExecOutcome

    @property
    def crashed(self) -> bool:
        return self.outcome.kind is not OutcomeKind.RETURNED

    def describe(self) -> str:
        origin = {gp.ORIGIN_TEE: "TEE", gp.ORIGIN_TRUSTED_APP: "TRUSTED_APP",
                  gp.ORIGIN_API: "API"}.get(self.return_origin, "?")
        return f"code={self.return_code:#010x} origin={origin} ({self.outcome.describe()})"


class SessionOpenError(TaemuError):
    def __init__(self, result: InvocationResult):
        super().__init__(f"session open failed: {result.describe()}")
        self.result = result


@dataclass
class Session:
    handle: int
    sess_ctx: int = 0
    open: bool = True


@dataclass
class _Marshalled:
    array_ptr: int
    records: list[tuple[int, int]]
    memref_slots: list[tuple[int, int, int]]  # (slot, guest_addr, byte_length)
    allocations: list[int]
    regions: list[SharedRegion]


class TaManager:
    """Owns one loaded TA instance: guest, TEE state, hooks, and sessions."""

    def __init__(self, ta: TaElfFile, config: StaticAnnotationConfig | None = None,
                 policy: MissingApiPolicy = MissingApiPolicy.CRASH,
                 rng_seed: Optional[int] = None,
                 instruction_budget: Optional[int] = None):
        self.guest = GuestState() if instruction_budget is None else \
            GuestState(instruction_budget)
        self.guest.map_region(STACK_TOP - STACK_SIZE, STACK_SIZE, PERM_R | PERM_W)
        self.guest.map_region(SCRATCH_BASE, SCRATCH_SIZE, PERM_R | PERM_W)
        self.guest.tee = TeeState() if rng_seed is None else TeeState(rng_seed)
        self.registry = ApiRegistry(policy)
        self.image: TaImage = load(ta, config, self.guest)
        self.hooks = HookTable()
        self.pause_callback = None  # set by the interactive server
        for index, name in self.image.import_bindings.items():
            self.hooks.bind_sentinel(index, self._make_dispatcher(name))
        for vaddr, name in self.image.inline_api_hooks.items():
            self.hooks.bind_inline(vaddr, self._make_dispatcher(name))
        self._sessions: dict[int, Session] = {}
        self._next_session = 1

    @classmethod
    def from_bytes(cls, blob: bytes, config: StaticAnnotationConfig | None = None,
                   **kwargs) -> "TaManager":
        return cls(parse_taelf(blob), config, **kwargs)

    @property
    def tee(self) -> TeeState:
        return self.guest.tee

    def _make_dispatcher(self, name: str):
        def dispatch(guest: GuestState) -> Optional[ExecOutcome]:
            if self.pause_callback is not None:
                self.pause_callback(name)
            return self.registry.invoke(name, TeeContext(guest, guest.tee))
        return dispatch

    # -- parameter marshalling -------------------------------------------------

    def _marshal(self, params: GpParamSet,
                 shm_backings: Optional[dict[int, object]] = None) -> _Marshalled:
        ctx = TeeContext(self.guest, self.tee)
        records: list[tuple[int, int]] = []
        memref_slots: list[tuple[int, int, int]] = []
        allocations: list[int] = []
        regions: list[SharedRegion] = []
        for slot, param in enumerate(params.params):
            if isinstance(param, ValueParam):
                records.append((param.a & 0xFFFFFFFF, param.b & 0xFFFFFFFF))
            elif isinstance(param, MemrefParam):
                buf = ctx.malloc(len(param.data), hint=1)
                if buf and param.data:
                    self.guest.mem_write(buf, param.data, require=0)
                records.append((buf, param.size & 0xFFFFFFFF))
                memref_slots.append((slot, buf, len(param.data)))
                allocations.append(buf)
                if shm_backings and slot in shm_backings and buf:
                    region = SharedRegion(buf, len(param.data), shm_backings[slot])
                    regions.append(region)
                    self.tee.shared_regions.append(region)
            else:
                records.append((0, 0))
        array_ptr = ctx.malloc(32, hint=0)
        for i, (lo, hi) in enumerate(records):
            self.guest.write_u32(array_ptr + 8 * i, lo, require=0)
            self.guest.write_u32(array_ptr + 8 * i + 4, hi, require=0)
        allocations.append(array_ptr)
        return _Marshalled(array_ptr, records, memref_slots, allocations, regions)

    def _collect_out_params(self, params: GpParamSet,
                            state: _Marshalled) -> list[Optional[Union[tuple[int, int], bytes]]]:
        out: list[Optional[Union[tuple[int, int], bytes]]] = []
        memrefs = {slot: (addr, length) for slot, addr, length in state.memref_slots}
        for slot, param in enumerate(params.params):
            if isinstance(param, ValueParam):
                a = self.guest.read_u32(state.array_ptr + 8 * slot, require=0)
                b = self.guest.read_u32(state.array_ptr + 8 * slot + 4, require=0)
                out.append((a, b))
            elif isinstance(param, MemrefParam):
                addr, length = memrefs[slot]
                out.append(self.guest.mem_read(addr, length, require=0) if addr else b"")
            else:
                out.append(None)
        return out

    def _release(self, state: _Marshalled) -> None:
        for region in state.regions:
            if region in self.tee.shared_regions:
                self.tee.shared_regions.remove(region)
        ctx = TeeContext(self.guest, self.tee)
        for ptr in state.allocations:
            if ptr:
                try:
                    ctx.free(ptr)
                except EmulationCrash:
                    pass  # the TA freed (or corrupted) a param buffer itself

    # -- entrypoint plumbing --------------------------------------------------

    def _run_entry(self, name: str, args: tuple[int, ...]) -> ExecOutcome:
        entry = self.image.entrypoints.get(name)
        if entry is None:
            return ExecOutcome.returned(gp.TEE_SUCCESS)
        self.guest.regs[REG_SP] = STACK_TOP
        return run_until_return(self.guest, self.hooks, entry, args)

    def _classify(self, outcome: ExecOutcome, out_params, log_lines) -> InvocationResult:
        if outcome.kind is OutcomeKind.RETURNED:
            return InvocationResult(outcome.gp_result, gp.ORIGIN_TRUSTED_APP,
                                    out_params, log_lines, outcome)
        return InvocationResult(gp.TEE_ERROR_TARGET_DEAD, gp.ORIGIN_TEE,
                                out_params, log_lines, outcome)

    # -- public session API -----------------------------------------------------

    def open_session(self, params: Optional[GpParamSet] = None) -> Session:
        """Run the create and open-session entrypoints; raises SessionOpenError
        (with the InvocationResult attached) when either fails."""
        params = params or GpParamSet.empty()
        log_start = len(self.tee.log_lines)
        outcome = self._run_entry(gp.ENTRY_CREATE, ())
        if outcome.kind is not OutcomeKind.RETURNED or outcome.gp_result != gp.TEE_SUCCESS:
            result = self._classify(outcome, [None] * 4, self.tee.log_lines[log_start:])
            raise SessionOpenError(result)

        state = self._marshal(params)
        self.guest.write_u32(_SESS_CTX_SLOT, 0, require=0)
        outcome = self._run_entry(gp.ENTRY_OPEN_SESSION,
                                  (params.param_types, state.array_ptr, _SESS_CTX_SLOT))
        out_params = self._collect_out_params(params, state)
        self._release(state)
        result = self._classify(outcome, out_params, self.tee.log_lines[log_start:])
        if result.return_code != gp.TEE_SUCCESS:
            raise SessionOpenError(result)
        session = Session(self._next_session,
                          sess_ctx=self.guest.read_u32(_SESS_CTX_SLOT, require=0))
        self._next_session += 1
        self._sessions[session.handle] = session
        return session

    def _live_session(self, session: Session) -> Session:
        live = self._sessions.get(session.handle if isinstance(session, Session) else session)
        if live is None or not live.open:
            raise BadSessionError("session is not open")
        return live

    def invoke_command(self, session: Session, cmd_id: int, params: GpParamSet,
                       shm_backings: Optional[dict[int, object]] = None) -> InvocationResult:
        """Marshal, invoke the command entrypoint, classify, and copy back.

        Never rejects a paramTypes value or a declared size; only TA code can.
        """
        live = self._live_session(session)
        log_start = len(self.tee.log_lines)
        state = self._marshal(params, shm_backings)
        outcome = self._run_entry(
            gp.ENTRY_INVOKE,
            (live.sess_ctx, cmd_id & 0xFFFFFFFF, params.param_types, state.array_ptr))
        out_params = self._collect_out_params(params, state)
        self._release(state)
        return self._classify(outcome, out_params, self.tee.log_lines[log_start:])

    def prepare_invoke(self, session: Session, cmd_id: int,
                       params: GpParamSet) -> _Marshalled:
        """Arm the guest for an invoke without running it (debugger path)."""
        live = self._live_session(session)
        state = self._marshal(params)
        self.guest.regs[REG_SP] = STACK_TOP
        entry = self.image.entrypoints[gp.ENTRY_INVOKE]
        prepare_entry(self.guest, entry,
                      (live.sess_ctx, cmd_id & 0xFFFFFFFF, params.param_types,
                       state.array_ptr))
        return state

    def finish_invoke(self, params: GpParamSet, state: _Marshalled,
                      outcome: ExecOutcome) -> InvocationResult:
        out_params = self._collect_out_params(params, state)
        self._release(state)
        return self._classify(outcome, out_params, self.tee.log_lines)

    def close_session(self, session: Session) -> InvocationResult:
        """Run the close entrypoint; the session is removed even on a crash."""
        live = self._live_session(session)
        log_start = len(self.tee.log_lines)
        outcome = self._run_entry(gp.ENTRY_CLOSE_SESSION, (live.sess_ctx,))
        live.open = False
        del self._sessions[live.handle]
        return self._classify(outcome, [None] * 4, self.tee.log_lines[log_start:])

    def destroy(self) -> InvocationResult:
        log_start = len(self.tee.log_lines)
        outcome = self._run_entry(gp.ENTRY_DESTROY, ())
        return self._classify(outcome, [None] * 4, self.tee.log_lines[log_start:])

    def run_continue(self, skip_bp: Optional[int] = None) -> ExecOutcome:
        return continue_run(self.guest, self.hooks, skip_bp=skip_bp)
