"""Exception hierarchy.

Every error raised by the public API derives from ForkStoreError so callers
can catch one base class; the CLI maps subclasses to exit codes.
"""

from __future__ import annotations


class ForkStoreError(Exception):
    """Base class for all forkstore errors."""


class FormatError(ForkStoreError):
    """Malformed serialized bytes (chunk, log record, wire frame)."""


class ChunkNotFound(ForkStoreError):
    def __init__(self, cid: bytes):
        super().__init__(f"chunk not found: {cid.hex()}")
        self.cid = cid


class ObjectNotFound(ForkStoreError):
    def __init__(self, uid: bytes):
        super().__init__(f"object not found: {uid.hex()}")
        self.uid = uid


class KeyNotFound(ForkStoreError):
    pass


class BranchNotFound(ForkStoreError):
    pass


class BranchExists(ForkStoreError):
    pass


class TamperDetected(ForkStoreError):
    """Stored bytes no longer digest to their cid."""

    def __init__(self, cid: bytes, actual: bytes):
        super().__init__(
            f"chunk {cid.hex()} digests to {actual.hex()}: content was altered"
        )
        self.cid = cid
        self.actual = actual


class GuardMismatch(ForkStoreError):
    """Compare-and-set guard did not match the current branch head."""

    def __init__(self, branch: str, current_head: bytes | None):
        cur = current_head.hex() if current_head else "<none>"
        super().__init__(f"guard mismatch on branch {branch!r}: head is {cur}")
        self.branch = branch
        self.current_head = current_head


class TypeMismatch(ForkStoreError):
    pass


class KeyMismatch(ForkStoreError):
    pass


class NoCommonAncestor(ForkStoreError):
    pass


class UnresolvedConflicts(ForkStoreError):
    """Three-way merge found conflicting edits and no resolver accepted them."""

    def __init__(self, conflicts):
        super().__init__(f"{len(conflicts)} unresolved merge conflict(s)")
        self.conflicts = list(conflicts)


class OutOfRange(ForkStoreError, IndexError):
    pass


class ElementNotFound(ForkStoreError, KeyError):
    """Absent Map/Set key."""

    def __str__(self) -> str:  # KeyError repr-quotes its args
        return Exception.__str__(self)


class IntegerOverflow(ForkStoreError, OverflowError):
    pass


class ValueTooLarge(ForkStoreError):
    """Inline (primitive) value exceeds the single-chunk cap."""


class SchemaError(ForkStoreError):
    """Tabular input violates its declared shape (header, arity, primary key)."""


class StoreClosed(ForkStoreError):
    pass


class RetryableTransportError(ForkStoreError):
    """Transient cluster transport failure; the call may be retried."""
