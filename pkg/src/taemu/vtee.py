"""Virtual TEE: stateful API backing plus the dispatchable API registry.

Three categories of guest-callable APIs live here: the GlobalPlatform
internal-API subset, a libc subset, and TEE-specific stubs.  Stateful pieces
(heap, persistent objects, crypto operations, properties, shared-memory
bindings) hang off TeeState so snapshots can clone the whole thing.

The cipher is a placeholder XOR keystream, NOT real cryptography.  It exists
so ciphertext-producing control flow can execute; do not mistake it for AES.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from . import gp
from .asan import AccessViolation, AsanHeap, ViolationKind
from .emucore import CrashClass, ExecOutcome, GuestState, PERM_R, PERM_W, REG_LR, REG_SP
from .errors import (
    BadHandleError,
    DuplicateRegistrationError,
    ItemNotFoundError,
    KeyNotSetError,
    ShortBufferError,
    StorageExhaustedError,
    TaemuError,
    TeeApiError,
)

STORAGE_OBJECT_CAP = 1024 * 1024
STRLEN_LIMIT = 1024 * 1024
DEFAULT_RNG_SEED = 0x1337C0DE5EED

# Key handed out by the demo tee_get_key handler; tests and the cipher
# walkthrough in the README rely on this exact value.
DEMO_KEY = b"\x5a\xa5\x3c\xc3"

DEFAULT_PROPERTIES = {
    "gpd.tee.apiversion": "1.3",
    "gpd.tee.description": "taemu virtual tee",
    "gpd.tee.deviceID": "0102030405060708",
    "gpd.client.identity": "nwclient:00000000",
}


class EmulationCrash(TaemuError):
    """Raised by API implementations to abort the current execution slice."""

    def __init__(self, outcome: ExecOutcome):
        super().__init__(outcome.describe())
        self.outcome = outcome


class AsanCrash(EmulationCrash):
    def __init__(self, violation: AccessViolation, fault_pc: int):
        outcome = ExecOutcome.crash(CrashClass.ASAN_VIOLATION, fault_pc=fault_pc,
                                    violation=violation)
        super().__init__(outcome)
        self.violation = violation


class XorShift64:
    """Deterministic RNG backing the random-fill APIs."""

    def __init__(self, seed: int = DEFAULT_RNG_SEED):
        self.state = seed & 0xFFFFFFFFFFFFFFFF or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= (x << 13) & 0xFFFFFFFFFFFFFFFF
        x ^= x >> 7
        x ^= (x << 17) & 0xFFFFFFFFFFFFFFFF
        self.state = x
        return x

    def gen_bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += struct.pack("<Q", self.next_u64())
        return bytes(out[:n])


@dataclass
class SharedRegion:
    """A guest range whose bytes are mirrored into an external buffer.

    The backing may be mutated concurrently by another thread or process;
    the emulator only touches it at API sync points.
    """

    guest_vaddr: int
    length: int
    backing: object  # bytearray or mmap.mmap; anything slice-assignable
    direction: str = "inout"  # in | out | inout

    def overlap(self, base: int, size: int) -> Optional[tuple[int, int]]:
        lo = max(self.guest_vaddr, base)
        hi = min(self.guest_vaddr + self.length, base + size)
        if lo < hi:
            return lo, hi
        return None


@dataclass
class _ObjectCursor:
    name: str
    cursor: int = 0


@dataclass
class _CryptoOp:
    alg_id: int
    key: Optional[bytes] = None
    mode: int = 0


class TeeState:
    """Mutable TEE-side state for one emulated TA instance."""

    def __init__(self, rng_seed: int = DEFAULT_RNG_SEED):
        self.heap = AsanHeap()
        self.objects: dict[str, bytearray] = {}
        self.open_objects: dict[int, _ObjectCursor] = {}
        self.crypto_ops: dict[int, _CryptoOp] = {}
        self.properties: dict[str, str] = dict(DEFAULT_PROPERTIES)
        self.shared_regions: list[SharedRegion] = []
        self.panic_code: Optional[int] = None
        self.epoch = 0
        self.log_lines: list[str] = []
        self.rng = XorShift64(rng_seed)
        self._next_handle = 1

    def touch(self) -> None:
        self.epoch += 1

    def new_handle(self) -> int:
        handle = self._next_handle
        self._next_handle += 1
        return handle

    def clone(self) -> "TeeState":
        other = TeeState.__new__(TeeState)
        other.heap = self.heap.clone()
        other.objects = {k: bytearray(v) for k, v in self.objects.items()}
        other.open_objects = {h: _ObjectCursor(c.name, c.cursor)
                              for h, c in self.open_objects.items()}
        other.crypto_ops = {h: _CryptoOp(o.alg_id, o.key, o.mode)
                            for h, o in self.crypto_ops.items()}
        other.properties = dict(self.properties)
        other.shared_regions = list(self.shared_regions)
        other.panic_code = self.panic_code
        other.epoch = self.epoch
        other.log_lines = list(self.log_lines)
        other.rng = XorShift64.__new__(XorShift64)
        other.rng.state = self.rng.state
        other._next_handle = self._next_handle
        return other


def save_object_store(tee: TeeState, path: str) -> None:
    """Serialize persistent objects: name_len u16 | name | data_len u32 | data."""
    with open(path, "wb") as fh:
        for name in sorted(tee.objects):
            encoded = name.encode()
            data = tee.objects[name]
            fh.write(struct.pack("<H", len(encoded)) + encoded)
            fh.write(struct.pack("<I", len(data)) + bytes(data))


def load_object_store(tee: TeeState, path: str) -> None:
    with open(path, "rb") as fh:
        blob = fh.read()
    pos = 0
    while pos < len(blob):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode()
        pos += name_len
        (data_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        tee.objects[name] = bytearray(blob[pos:pos + data_len])
        pos += data_len


class TeeContext:
    """One API invocation's view of the guest and the TEE state.

    Hook handlers receive a TeeContext; tests may also construct one directly
    and call the operation methods without any guest code in the loop.
    """

    def __init__(self, guest: GuestState, tee: TeeState):
        self.guest = guest
        self.tee = tee

    # -- guest ABI helpers ---------------------------------------------------

    def arg(self, i: int) -> int:
        if i < 4:
            return self.guest.regs[i]
        return self.guest.read_u32(self.guest.regs[REG_SP] + 4 * (i - 4))

    def set_ret(self, value: int) -> None:
        self.guest.regs[0] = value & 0xFFFFFFFF

    def _call_site(self) -> int:
        return self.guest.regs[REG_LR]

    def check(self, base: int, size: int, is_write: bool) -> None:
        verdict = self.tee.heap.is_access_valid(self.guest, base, size, is_write)
        if not verdict.ok:
            raise AsanCrash(verdict.violation, self._call_site())

    def raise_violation(self, violation: AccessViolation) -> None:
        raise AsanCrash(violation, self._call_site())

    # -- shared-memory sync (Listing-2 ordering: in before read, out after write)

    def sync_in(self, base: int, size: int) -> None:
        for region in self.tee.shared_regions:
            if region.direction == "out":
                continue
            span = region.overlap(base, size)
            if span:
                lo, hi = span
                off = lo - region.guest_vaddr
                self.guest.mem_write(lo, bytes(region.backing[off:off + (hi - lo)]),
                                     require=0)

    def sync_out(self, base: int, size: int) -> None:
        for region in self.tee.shared_regions:
            if region.direction == "in":
                continue
            span = region.overlap(base, size)
            if span:
                lo, hi = span
                off = lo - region.guest_vaddr
                region.backing[off:off + (hi - lo)] = self.guest.mem_read(lo, hi - lo,
                                                                          require=0)

    # -- memory management -----------------------------------------------------

    def malloc(self, size: int, hint: int = 0) -> int:
        """8-aligned ASAN-tracked chunk; hint 0 zero-fills; NULL on exhaustion."""
        ptr = self.tee.heap.alloc(self.guest, size, zero=(hint == 0))
        self.tee.touch()
        return ptr

    def free(self, ptr: int) -> None:
        violation = self.tee.heap.free(self.guest, ptr)
        self.tee.touch()
        if violation is not None:
            self.raise_violation(violation)

    def mem_move(self, dest: int, src: int, size: int) -> int:
        self.check(dest, size, is_write=True)
        self.check(src, size, is_write=False)
        self.sync_in(src, size)
        data = self.guest.mem_read(src, size, require=0) if size else b""
        if size:
            self.guest.mem_write(dest, data, require=0)
        self.sync_out(dest, size)
        return dest

    def mem_fill(self, dest: int, value: int, size: int) -> int:
        self.check(dest, size, is_write=True)
        if size:
            self.guest.mem_write(dest, bytes([value & 0xFF]) * size, require=0)
        self.sync_out(dest, size)
        return dest

    def mem_compare(self, a: int, b: int, size: int) -> int:
        self.check(a, size, is_write=False)
        self.check(b, size, is_write=False)
        self.sync_in(a, size)
        self.sync_in(b, size)
        da = self.guest.mem_read(a, size, require=0)
        db = self.guest.mem_read(b, size, require=0)
        if da == db:
            return 0
        return 1 if da > db else -1

    def strlen(self, s: int) -> int:
        n = 0
        while n < STRLEN_LIMIT:
            self.check(s + n, 1, is_write=False)
            if self.guest.mem_read(s + n, 1, require=0) == b"\x00":
                return n
            n += 1
        return n

    def check_access(self, flags: int, base: int, size: int) -> int:
        """Result-code-only mapping/permission probe; never faults."""
        if size == 0:
            return gp.TEE_SUCCESS
        if base + size > 0x100000000:
            return gp.TEE_ERROR_ACCESS_DENIED
        perm = 0
        if flags & gp.ACCESS_READ:
            perm |= PERM_R
        if flags & gp.ACCESS_WRITE:
            perm |= PERM_W
        if self.guest.is_mapped(base, size, perm):
            return gp.TEE_SUCCESS
        return gp.TEE_ERROR_ACCESS_DENIED

    # -- persistent objects ------------------------------------------------------

    def storage_create(self, name: str, data: bytes) -> None:
        if len(data) > STORAGE_OBJECT_CAP:
            raise StorageExhaustedError(f"object {name!r} exceeds the per-object cap")
        self.tee.objects[name] = bytearray(data)
        self.tee.touch()

    def storage_open(self, name: str) -> int:
        if name not in self.tee.objects:
            raise ItemNotFoundError(f"no persistent object {name!r}")
        handle = self.tee.new_handle()
        self.tee.open_objects[handle] = _ObjectCursor(name)
        self.tee.touch()
        return handle

    def _cursor(self, handle: int) -> _ObjectCursor:
        cur = self.tee.open_objects.get(handle)
        if cur is None or cur.name not in self.tee.objects:
            raise BadHandleError(f"bad object handle {handle}")
        return cur

    def storage_read(self, handle: int, length: int) -> bytes:
        cur = self._cursor(handle)
        data = self.tee.objects[cur.name]
        chunk = bytes(data[cur.cursor:cur.cursor + length])
        cur.cursor += len(chunk)
        self.tee.touch()
        return chunk

    def storage_write(self, handle: int, data: bytes) -> None:
        cur = self._cursor(handle)
        obj = self.tee.objects[cur.name]
        if cur.cursor + len(data) > STORAGE_OBJECT_CAP:
            raise StorageExhaustedError("write exceeds the per-object cap")
        if cur.cursor + len(data) > len(obj):
            obj.extend(b"\x00" * (cur.cursor + len(data) - len(obj)))
        obj[cur.cursor:cur.cursor + len(data)] = data
        cur.cursor += len(data)
        self.tee.touch()

    def storage_close(self, handle: int) -> None:
        if handle not in self.tee.open_objects:
            raise BadHandleError(f"bad object handle {handle}")
        del self.tee.open_objects[handle]
        self.tee.touch()

    def storage_delete(self, name: str) -> None:
        if name not in self.tee.objects:
            raise ItemNotFoundError(f"no persistent object {name!r}")
        del self.tee.objects[name]
        self.tee.open_objects = {h: c for h, c in self.tee.open_objects.items()
                                 if c.name != name}
        self.tee.touch()

    # -- crypto (placeholder XOR keystream, not real crypto) ----------------------

    def crypto_allocate(self, alg_id: int, mode: int = 0) -> int:
        handle = self.tee.new_handle()
        self.tee.crypto_ops[handle] = _CryptoOp(alg_id, mode=mode)
        self.tee.touch()
        return handle

    def crypto_free(self, handle: int) -> None:
        if handle not in self.tee.crypto_ops:
            raise BadHandleError(f"bad operation handle {handle}")
        del self.tee.crypto_ops[handle]
        self.tee.touch()

    def crypto_set_key(self, handle: int, key: bytes) -> None:
        op = self.tee.crypto_ops.get(handle)
        if op is None:
            raise BadHandleError(f"bad operation handle {handle}")
        if not key:
            raise TeeApiError("empty key")
        op.key = bytes(key)
        self.tee.touch()

    def crypto_do_final(self, handle: int, data: bytes, out_cap: int) -> bytes:
        op = self.tee.crypto_ops.get(handle)
        if op is None:
            raise BadHandleError(f"bad operation handle {handle}")
        if op.key is None:
            raise KeyNotSetError("cipher operation used before set-key")
        if out_cap < len(data):
            raise ShortBufferError(f"need {len(data)} bytes, capacity {out_cap}")
        key = op.key
        return bytes(b ^ key[i % len(key)] for i, b in enumerate(data))

    # -- misc ------------------------------------------------------------------

    def gen_random(self, n: int) -> bytes:
        self.tee.touch()
        return self.tee.rng.gen_bytes(n)

    def get_property(self, name: str) -> str:
        value = self.tee.properties.get(name)
        if value is None:
            raise ItemNotFoundError(f"no property {name!r}")
        return value

    def log(self, line: str) -> None:
        self.tee.log_lines.append(line)
        self.tee.touch()

    def format_log(self, fmt: bytes, args: list[int]) -> str:
        """printf-style formatting for %s/%d/%x/%p; other directives pass through."""
        out = []
        i = 0
        argi = 0

        def next_arg() -> int:
            nonlocal argi
            value = args[argi] if argi < len(args) else 0
            argi += 1
            return value

        while i < len(fmt):
            ch = fmt[i:i + 1]
            if ch != b"%" or i + 1 >= len(fmt):
                out.append(ch.decode("latin-1"))
                i += 1
                continue
            spec = fmt[i + 1:i + 2]
            if spec == b"s":
                out.append(self.guest.read_cstring(next_arg()).decode("latin-1"))
            elif spec == b"d":
                value = next_arg()
                out.append(str(value - 0x100000000 if value & 0x80000000 else value))
            elif spec == b"x":
                out.append(f"{next_arg():x}")
            elif spec == b"p":
                out.append(f"0x{next_arg():08x}")
            elif spec == b"%":
                out.append("%")
            else:
                out.append("%" + spec.decode("latin-1"))
            i += 2
        return "".join(out)


class ApiCategory(Enum):
    GP = "gp"
    LIBC = "libc"
    TEE_SPECIFIC = "tee-specific"


class MissingApiPolicy(Enum):
    CRASH = "crash"
    RETURN_ZERO = "stub"


@dataclass
class ApiEntry:
    name: str
    category: ApiCategory
    handler: Optional[Callable[[TeeContext], Optional[ExecOutcome]]]
    implemented: bool


Handler = Callable[[TeeContext], Optional[ExecOutcome]]


class ApiRegistry:
    """Name-to-handler map for every API a TA can import or hook inline."""

    def __init__(self, default_policy: MissingApiPolicy = MissingApiPolicy.CRASH):
        self.entries: dict[str, ApiEntry] = {}
        self.default_policy = default_policy
        _install_builtins(self)

    def add(self, name: str, category: ApiCategory, handler: Handler) -> None:
        self.entries[name] = ApiEntry(name, category, handler, implemented=True)

    def resolve(self, name: str) -> ApiEntry:
        """Look up an entry, auto-creating unknown names as unimplemented
        TEE-specific APIs."""
        entry = self.entries.get(name)
        if entry is None:
            entry = ApiEntry(name, ApiCategory.TEE_SPECIFIC, None, implemented=False)
            self.entries[name] = entry
        return entry

    def register_tee_specific(self, name: str, handler: Handler) -> None:
        existing = self.entries.get(name)
        if existing is not None and existing.implemented:
            raise DuplicateRegistrationError(f"{name} is already implemented")
        self.entries[name] = ApiEntry(name, ApiCategory.TEE_SPECIFIC, handler,
                                      implemented=True)

    def invoke(self, name: str, ctx: TeeContext) -> Optional[ExecOutcome]:
        """Dispatch one API call; unimplemented names follow the default policy."""
        entry = self.resolve(name)
        if not entry.implemented:
            return default_unimplemented(ctx, name, self.default_policy)
        try:
            return entry.handler(ctx)
        except EmulationCrash as crash:
            return crash.outcome
        except TeeApiError as err:
            ctx.set_ret(err.code)
            return None


def default_unimplemented(ctx: TeeContext, name: str,
                          policy: MissingApiPolicy) -> Optional[ExecOutcome]:
    """Behavior of the default handler for APIs nobody implemented."""
    if policy is MissingApiPolicy.CRASH:
        return ExecOutcome.crash(CrashClass.MISSING_API, fault_pc=ctx._call_site(),
                                 api_name=name)
    ctx.set_ret(0)
    return None


# -- guest-ABI handlers ------------------------------------------------------


def _h_tee_malloc(ctx: TeeContext):
    ctx.set_ret(ctx.malloc(ctx.arg(0), ctx.arg(1)))


def _h_tee_free(ctx: TeeContext):
    ctx.free(ctx.arg(0))
    ctx.set_ret(0)


def _h_tee_mem_move(ctx: TeeContext):
    ctx.set_ret(ctx.mem_move(ctx.arg(0), ctx.arg(1), ctx.arg(2)))


def _h_tee_mem_compare(ctx: TeeContext):
    ctx.set_ret(ctx.mem_compare(ctx.arg(0), ctx.arg(1), ctx.arg(2)))


def _h_tee_mem_fill(ctx: TeeContext):
    ctx.set_ret(ctx.mem_fill(ctx.arg(0), ctx.arg(1), ctx.arg(2)))


def _h_check_access(ctx: TeeContext):
    ctx.set_ret(ctx.check_access(ctx.arg(0), ctx.arg(1), ctx.arg(2)))


def _h_tee_panic(ctx: TeeContext):
    code = ctx.arg(0)
    ctx.tee.panic_code = code
    return ExecOutcome.crash(CrashClass.PANIC, fault_pc=ctx._call_site(),
                             panic_code=code)


def _h_gen_random(ctx: TeeContext):
    buf, length = ctx.arg(0), ctx.arg(1)
    ctx.check(buf, length, is_write=True)
    ctx.guest.mem_write(buf, ctx.gen_random(length), require=0)
    ctx.sync_out(buf, length)
    ctx.set_ret(0)


def _h_get_property(ctx: TeeContext):
    # (propset, name, value_buf, value_len_ptr); propset is ignored.
    name = ctx.guest.read_cstring(ctx.arg(1)).decode("latin-1")
    value = ctx.get_property(name).encode() + b"\x00"
    len_ptr = ctx.arg(3)
    cap = ctx.guest.read_u32(len_ptr)
    if cap < len(value):
        ctx.guest.write_u32(len_ptr, len(value))
        raise ShortBufferError(name)
    ctx.check(ctx.arg(2), len(value), is_write=True)
    ctx.guest.mem_write(ctx.arg(2), value, require=0)
    ctx.guest.write_u32(len_ptr, len(value))
    ctx.set_ret(gp.TEE_SUCCESS)


def _read_guest_blob(ctx: TeeContext, ptr: int, length: int) -> bytes:
    ctx.check(ptr, length, is_write=False)
    ctx.sync_in(ptr, length)
    return ctx.guest.mem_read(ptr, length, require=0) if length else b""


def _h_create_object(ctx: TeeContext):
    name = ctx.guest.mem_read(ctx.arg(0), ctx.arg(1)).decode("latin-1")
    data = _read_guest_blob(ctx, ctx.arg(2), ctx.arg(3))
    ctx.storage_create(name, data)
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_open_object(ctx: TeeContext):
    name = ctx.guest.mem_read(ctx.arg(0), ctx.arg(1)).decode("latin-1")
    handle = ctx.storage_open(name)
    ctx.guest.write_u32(ctx.arg(2), handle)
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_read_object(ctx: TeeContext):
    handle, buf, size, count_ptr = ctx.arg(0), ctx.arg(1), ctx.arg(2), ctx.arg(3)
    data = ctx.storage_read(handle, size)
    if data:
        ctx.check(buf, len(data), is_write=True)
        ctx.guest.mem_write(buf, data, require=0)
        ctx.sync_out(buf, len(data))
    ctx.guest.write_u32(count_ptr, len(data))
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_write_object(ctx: TeeContext):
    handle, buf, size = ctx.arg(0), ctx.arg(1), ctx.arg(2)
    ctx.storage_write(handle, _read_guest_blob(ctx, buf, size))
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_close_object(ctx: TeeContext):
    ctx.storage_close(ctx.arg(0))
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_close_delete_object(ctx: TeeContext):
    handle = ctx.arg(0)
    name = ctx._cursor(handle).name
    ctx.storage_close(handle)
    ctx.storage_delete(name)
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_allocate_operation(ctx: TeeContext):
    handle = ctx.crypto_allocate(ctx.arg(1), ctx.arg(2))
    ctx.guest.write_u32(ctx.arg(0), handle)
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_free_operation(ctx: TeeContext):
    ctx.crypto_free(ctx.arg(0))
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_set_operation_key(ctx: TeeContext):
    key = _read_guest_blob(ctx, ctx.arg(1), ctx.arg(2))
    ctx.crypto_set_key(ctx.arg(0), key)
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_cipher_do_final(ctx: TeeContext):
    op, src, src_len, dest = ctx.arg(0), ctx.arg(1), ctx.arg(2), ctx.arg(3)
    dest_len_ptr = ctx.arg(4)
    out_cap = ctx.guest.read_u32(dest_len_ptr)
    data = _read_guest_blob(ctx, src, src_len)
    out = ctx.crypto_do_final(op, data, out_cap)
    ctx.check(dest, len(out), is_write=True)
    if out:
        ctx.guest.mem_write(dest, out, require=0)
        ctx.sync_out(dest, len(out))
    ctx.guest.write_u32(dest_len_ptr, len(out))
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_open_ta_session(ctx: TeeContext):
    # TA-to-TA IPC stub: hands out a handle and claims success.
    ctx.guest.write_u32(ctx.arg(1), ctx.tee.new_handle())
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_invoke_ta_command(ctx: TeeContext):
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_close_ta_session(ctx: TeeContext):
    ctx.set_ret(gp.TEE_SUCCESS)


def _h_memcpy(ctx: TeeContext):
    ctx.set_ret(ctx.mem_move(ctx.arg(0), ctx.arg(1), ctx.arg(2)))


def _h_memset(ctx: TeeContext):
    ctx.set_ret(ctx.mem_fill(ctx.arg(0), ctx.arg(1), ctx.arg(2)))


def _h_memcmp(ctx: TeeContext):
    ctx.set_ret(ctx.mem_compare(ctx.arg(0), ctx.arg(1), ctx.arg(2)))


def _h_strlen(ctx: TeeContext):
    ctx.set_ret(ctx.strlen(ctx.arg(0)))


def _h_malloc(ctx: TeeContext):
    ctx.set_ret(ctx.malloc(ctx.arg(0), hint=1))


def _h_free(ctx: TeeContext):
    ctx.free(ctx.arg(0))
    ctx.set_ret(0)


def _h_printf(ctx: TeeContext):
    fmt = ctx.guest.read_cstring(ctx.arg(0))
    line = ctx.format_log(fmt, [ctx.arg(i) for i in range(1, 4)])
    ctx.log(line)
    ctx.set_ret(len(line))


def _install_builtins(registry: ApiRegistry) -> None:
    gp_handlers = {
        "TEE_Malloc": _h_tee_malloc,
        "TEE_Free": _h_tee_free,
        "TEE_MemMove": _h_tee_mem_move,
        "TEE_MemCompare": _h_tee_mem_compare,
        "TEE_MemFill": _h_tee_mem_fill,
        "TEE_CheckMemoryAccessRights": _h_check_access,
        "TEE_Panic": _h_tee_panic,
        "TEE_GenerateRandom": _h_gen_random,
        "TEE_GetPropertyAsString": _h_get_property,
        "TEE_CreatePersistentObject": _h_create_object,
        "TEE_OpenPersistentObject": _h_open_object,
        "TEE_ReadObjectData": _h_read_object,
        "TEE_WriteObjectData": _h_write_object,
        "TEE_CloseObject": _h_close_object,
        "TEE_CloseAndDeletePersistentObject": _h_close_delete_object,
        "TEE_AllocateOperation": _h_allocate_operation,
        "TEE_FreeOperation": _h_free_operation,
        "TEE_SetOperationKey": _h_set_operation_key,
        "TEE_CipherDoFinal": _h_cipher_do_final,
        "TEE_OpenTASession": _h_open_ta_session,
        "TEE_InvokeTACommand": _h_invoke_ta_command,
        "TEE_CloseTASession": _h_close_ta_session,
    }
    libc_handlers = {
        "memcpy": _h_memcpy,
        "memmove": _h_memcpy,
        "memset": _h_memset,
        "memcmp": _h_memcmp,
        "strlen": _h_strlen,
        "malloc": _h_malloc,
        "free": _h_free,
        "printf": _h_printf,
    }
    for name, handler in gp_handlers.items():
        registry.add(name, ApiCategory.GP, handler)
    for name, handler in libc_handlers.items():
        registry.add(name, ApiCategory.LIBC, handler)


# -- example TEE-specific handlers --------------------------------------------


def _x_is_shared_memory(ctx: TeeContext):
    code = ctx.check_access(gp.ACCESS_READ | gp.ACCESS_WRITE, ctx.arg(0), ctx.arg(1))
    ctx.set_ret(1 if code == gp.TEE_SUCCESS else 0)


def _x_rd_random(ctx: TeeContext):
    _h_gen_random(ctx)


def _x_printf_va(ctx: TeeContext):
    _h_printf(ctx)
    ctx.set_ret(0)


def _x_tee_log(ctx: TeeContext):
    ctx.log(ctx.guest.read_cstring(ctx.arg(0)).decode("latin-1"))
    ctx.set_ret(0)


def _x_tee_get_key(ctx: TeeContext):
    key_ptr_out, key_len_out = ctx.arg(0), ctx.arg(1)
    kptr = ctx.malloc(len(DEMO_KEY), hint=1)
    ctx.guest.mem_write(kptr, DEMO_KEY, require=0)
    ctx.guest.write_u32(key_ptr_out, kptr)
    ctx.guest.write_u32(key_len_out, len(DEMO_KEY))
    ctx.set_ret(0)


def example_tee_specific_handlers() -> dict[str, Handler]:
    """Ready-made handlers for common vendor APIs, each delegating to an
    existing GP facility: permission check, random fill, and logging."""
    return {
        "TEES_IsREESharedMemory": _x_is_shared_memory,
        "ut_pf_cp_rd_random": _x_rd_random,
        "msee_ta_printf_va": _x_printf_va,
        "tee_log": _x_tee_log,
        "tee_get_key": _x_tee_get_key,
    }


def register_examples(registry: ApiRegistry) -> None:
    for name, handler in example_tee_specific_handlers().items():
        registry.register_tee_specific(name, handler)
