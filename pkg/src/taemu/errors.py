"""Exception hierarchy shared across the package."""


class TaemuError(Exception):
    """Base class for all errors raised by this package."""


class MalformedContainer(TaemuError):
    """The TAELF byte stream is truncated, overlapping, or mis-tagged."""


class MissingEntrypoint(TaemuError):
    """The container lacks the mandatory invoke-command entrypoint."""


class AssemblyError(TaemuError):
    """Source-level assembler failure; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class OverlapWithHookRegion(TaemuError):
    """A segment intersects the reserved hook sentinel region."""


class UnresolvedStaticTa(TaemuError):
    """A static TA was loaded without its annotation config."""


class GuestMemoryFault(TaemuError):
    """Guest access to unmapped or permission-incompatible memory."""

    def __init__(self, addr, size=1, write=False):
        super().__init__(f"guest fault at {addr:#010x} (size {size}, {'write' if write else 'read'})")
        self.addr = addr
        self.size = size
        self.write = write


class TeeApiError(TaemuError):
    """An API-level failure that maps to a nonzero GP result code."""

    code = 0xFFFF0000  # TEE_ERROR_GENERIC

    def __init__(self, message=""):
        super().__init__(message or self.__class__.__name__)


class BadHandleError(TeeApiError):
    code = 0xFFFF0008  # item not found: handle does not name a live object


class ItemNotFoundError(TeeApiError):
    code = 0xFFFF0008


class KeyNotSetError(TeeApiError):
    code = 0xFFFF0007  # bad state: operation used before its key was set


class ShortBufferError(TeeApiError):
    code = 0xFFFF0010


class StorageExhaustedError(TeeApiError):
    code = 0xFFFF000C


class DuplicateRegistrationError(TaemuError):
    """An already-implemented API name was registered a second time."""


class BadSessionError(TaemuError):
    """Operation on a closed or unknown session handle."""


class ParseError(TaemuError):
    """Line-oriented input (ICFG, harness, config) failed to parse."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DanglingEdge(ParseError):
    """An ICFG edge references an undeclared block."""


class ProtocolError(TaemuError):
    """Malformed frame on the interactive wire protocol."""
