"""GlobalPlatform constants: result codes, parameter types, origins, entrypoints."""

TEE_SUCCESS = 0x00000000
TEE_ERROR_GENERIC = 0xFFFF0000
TEE_ERROR_ACCESS_DENIED = 0xFFFF0001
TEE_ERROR_BAD_FORMAT = 0xFFFF0005
TEE_ERROR_BAD_PARAMETERS = 0xFFFF0006
TEE_ERROR_BAD_STATE = 0xFFFF0007
TEE_ERROR_ITEM_NOT_FOUND = 0xFFFF0008
TEE_ERROR_OUT_OF_MEMORY = 0xFFFF000C
TEE_ERROR_SHORT_BUFFER = 0xFFFF0010
TEE_ERROR_TARGET_DEAD = 0xFFFF3024

# Parameter-type nibbles, one per slot in the 16-bit paramTypes word.
PARAM_NONE = 0
PARAM_VALUE_INPUT = 1
PARAM_VALUE_OUTPUT = 2
PARAM_VALUE_INOUT = 3
PARAM_MEMREF_INPUT = 5
PARAM_MEMREF_OUTPUT = 6
PARAM_MEMREF_INOUT = 7

# returnOrigin values.
ORIGIN_API = 1
ORIGIN_TEE = 3
ORIGIN_TRUSTED_APP = 4

# Memory-access-rights flags.
ACCESS_READ = 1
ACCESS_WRITE = 2
ACCESS_ANY_OWNER = 4

ENTRY_CREATE = "TA_CreateEntryPoint"
ENTRY_DESTROY = "TA_DestroyEntryPoint"
ENTRY_OPEN_SESSION = "TA_OpenSessionEntryPoint"
ENTRY_CLOSE_SESSION = "TA_CloseSessionEntryPoint"
ENTRY_INVOKE = "TA_InvokeCommandEntryPoint"

ENTRYPOINT_NAMES = (
    ENTRY_CREATE,
    ENTRY_DESTROY,
    ENTRY_OPEN_SESSION,
    ENTRY_CLOSE_SESSION,
    ENTRY_INVOKE,
)


def param_type_nibble(param_types: int, slot: int) -> int:
    return (param_types >> (slot * 4)) & 0xF


def pack_param_types(t0: int, t1: int = 0, t2: int = 0, t3: int = 0) -> int:
    return (t0 & 0xF) | ((t1 & 0xF) << 4) | ((t2 & 0xF) << 8) | ((t3 & 0xF) << 12)
