"""Branch heads: the only mutable state in a repository.

Chunks never change once written, so everything that moves lives here: a
per-key table of named branch heads plus the set of untagged heads that
unguarded writes leave behind. Every mutation is appended to branches.log
and the in-memory tables are rebuilt by replay on open, the same recovery
posture the chunk log has: a torn final record is discarded, anything
corrupt before that is an error.

Named heads move only through compare-and-set (the caller states which head
it based its write on), so two writers cannot silently overwrite each other;
one of them gets a GuardMismatch and has to rebase or merge. Untagged writes
never fail this way: advancing from a current head replaces it, advancing
from anything else just adds another head, and a later merge shrinks the set
back.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib

from .chunks import CID_SIZE, Cid
from .errors import (
    BranchExists,
    BranchNotFound,
    FormatError,
    GuardMismatch,
    KeyNotFound,
    StoreClosed,
)

LOG_NAME = "branches.log"

_OP_SET = 1  # key, branch, uid: create or move a named head
_OP_DEL = 2  # key, branch
_OP_RENAME = 3  # key, old, new
_OP_UNTAGGED = 4  # key, removed uids, added uids: adjust the untagged head set

_U32 = struct.Struct("<I")


def _enc_bytes(b: bytes) -> bytes:
    return _U32.pack(len(b)) + b


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0

    def take(self, n: int) -> bytes:
        out = self.payload[self.pos : self.pos + n]
        if len(out) != n:
            raise FormatError("truncated branch record")
        self.pos += n
        return out

    def bytes_(self) -> bytes:
        return self.take(_U32.unpack(self.take(4))[0])

    def done(self) -> None:
        if self.pos != len(self.payload):
            raise FormatError("branch record has trailing bytes")


class BranchManager:
    """Named and untagged branch heads for every key, logged to disk."""

    def __init__(self, path: str | os.PathLike):
        self.path = os.fspath(path)
        os.makedirs(self.path, exist_ok=True)
        self._log_path = os.path.join(self.path, LOG_NAME)
        self._named: dict[bytes, dict[str, Cid]] = {}
        self._untagged: dict[bytes, list[Cid]] = {}
        self._lock = threading.Lock()
        self._closed = False
        self._replay()
        self._fh = open(self._log_path, "ab")

    # -- persistence -----------------------------------------------------------

    def _replay(self) -> None:
        if not os.path.exists(self._log_path):
            with open(self._log_path, "wb"):
                pass
            return
        with open(self._log_path, "rb") as fh:
            data = fh.read()
        pos = 0
        keep = 0
        while pos < len(data):
            header = data[pos : pos + 4]
            if len(header) < 4:
                break  # torn length header
            (length,) = _U32.unpack(header)
            body = data[pos + 4 : pos + 4 + length]
            if len(body) < length:
                break  # torn payload
            payload, crc = body[:-4], _U32.unpack(body[-4:])[0]
            if zlib.crc32(payload) != crc:
                if pos + 4 + length == len(data):
                    break  # torn final record with a bad checksum
                raise FormatError(f"corrupt branch record at offset {pos}")
            self._apply(payload)
            pos += 4 + length
            keep = pos
        if keep != len(data):
            with open(self._log_path, "r+b") as fh:
                fh.truncate(keep)

    def _apply(self, payload: bytes) -> None:
        r = _Reader(payload)
        op = r.take(1)[0]
        key = r.bytes_()
        if op == _OP_SET:
            branch = r.bytes_().decode("utf-8")
            uid = r.take(CID_SIZE)
            r.done()
            self._named.setdefault(key, {})[branch] = uid
        elif op == _OP_DEL:
            branch = r.bytes_().decode("utf-8")
            r.done()
            self._named.get(key, {}).pop(branch, None)
        elif op == _OP_RENAME:
            old = r.bytes_().decode("utf-8")
            new = r.bytes_().decode("utf-8")
            r.done()
            table = self._named.get(key, {})
            table[new] = table.pop(old)
        elif op == _OP_UNTAGGED:
            removed = [r.take(CID_SIZE) for _ in range(_U32.unpack(r.take(4))[0])]
            added = [r.take(CID_SIZE) for _ in range(_U32.unpack(r.take(4))[0])]
            r.done()
            heads = self._untagged.setdefault(key, [])
            for uid in removed:
                if uid in heads:
                    heads.remove(uid)
            for uid in added:
                if uid not in heads:
                    heads.append(uid)
        else:
            raise FormatError(f"unknown branch opcode {op}")

    def _append(self, payload: bytes) -> None:
        record = _U32.pack(len(payload) + 4) + payload + _U32.pack(zlib.crc32(payload))
        self._fh.write(record)
        self._fh.flush()

    def _log(self, payload: bytes) -> None:
        # Replay through the same code path that open uses, then persist.
        self._apply(payload)
        self._append(payload)

    # -- named branches ----------------------------------------------------------

    def branches(self, key: bytes) -> dict[str, Cid]:
        self._check_open()
        return dict(self._named.get(key, {}))

    def head(self, key: bytes, branch: str) -> Cid:
        self._check_open()
        try:
            return self._named[key][branch]
        except KeyError:
            raise BranchNotFound(f"{branch!r} on key {key!r}") from None

    def has_branch(self, key: bytes, branch: str) -> bool:
        self._check_open()
        return branch in self._named.get(key, {})

    def set_head(self, key: bytes, branch: str, uid: Cid, guard: Cid | None = None) -> None:
        """Move a named head; guard must equal the current head (None: create).

        The guard is what makes concurrent writers safe: a writer that lost
        the race sees GuardMismatch instead of clobbering the other write.
        """
        with self._lock:
            self._check_open()
            current = self._named.get(key, {}).get(branch)
            if guard is None:
                if current is not None:
                    raise BranchExists(f"{branch!r} on key {key!r}")
            elif current != guard:
                raise GuardMismatch(branch, current)
            self._log(
                bytes([_OP_SET]) + _enc_bytes(key) + _enc_bytes(branch.encode("utf-8")) + uid
            )

    def force_head(self, key: bytes, branch: str, uid: Cid) -> None:
        """Move a named head unconditionally (merge results, imports)."""
        with self._lock:
            self._check_open()
            self._log(
                bytes([_OP_SET]) + _enc_bytes(key) + _enc_bytes(branch.encode("utf-8")) + uid
            )

    def fork(self, key: bytes, src: str, dst: str) -> Cid:
        """New branch dst at src's head. No data moves or copies: both names
        point at the same immutable version until one of them advances."""
        with self._lock:
            self._check_open()
            table = self._named.get(key, {})
            if src not in table:
                raise BranchNotFound(f"{src!r} on key {key!r}")
            if dst in table:
                raise BranchExists(f"{dst!r} on key {key!r}")
            uid = table[src]
            self._log(
                bytes([_OP_SET]) + _enc_bytes(key) + _enc_bytes(dst.encode("utf-8")) + uid
            )
            return uid

    def rename(self, key: bytes, old: str, new: str) -> None:
        with self._lock:
            self._check_open()
            table = self._named.get(key, {})
            if old not in table:
                raise BranchNotFound(f"{old!r} on key {key!r}")
            if new in table:
                raise BranchExists(f"{new!r} on key {key!r}")
            self._log(
                bytes([_OP_RENAME])
                + _enc_bytes(key)
                + _enc_bytes(old.encode("utf-8"))
                + _enc_bytes(new.encode("utf-8"))
            )

    def remove(self, key: bytes, branch: str) -> None:
        with self._lock:
            self._check_open()
            if branch not in self._named.get(key, {}):
                raise BranchNotFound(f"{branch!r} on key {key!r}")
            self._log(bytes([_OP_DEL]) + _enc_bytes(key) + _enc_bytes(branch.encode("utf-8")))

    # -- untagged heads ------------------------------------------------------------

    def untagged_heads(self, key: bytes) -> list[Cid]:
        self._check_open()
        return list(self._untagged.get(key, []))

    def advance_untagged(self, key: bytes, new_uid: Cid, bases: tuple[Cid, ...] = ()) -> None:
        """Record an unguarded write: heads among bases are replaced by the
        new version; writing from a stale base simply adds a head."""
        with self._lock:
            self._check_open()
            heads = self._untagged.get(key, [])
            removed = [b for b in bases if b in heads]
            if new_uid in heads and not removed:
                return
            self._log(
                bytes([_OP_UNTAGGED])
                + _enc_bytes(key)
                + _U32.pack(len(removed))
                + b"".join(removed)
                + _U32.pack(1)
                + new_uid
            )

    # -- enumeration ----------------------------------------------------------------

    def keys(self) -> list[bytes]:
        self._check_open()
        named = {k for k, table in self._named.items() if table}
        untagged = {k for k, heads in self._untagged.items() if heads}
        return sorted(named | untagged)

    def heads(self, key: bytes) -> dict:
        """Everything live for a key: named heads plus untagged ones."""
        self._check_open()
        if not self.has_key(key):
            raise KeyNotFound(f"no branches or heads for key {key!r}")
        return {"named": self.branches(key), "untagged": self.untagged_heads(key)}

    def has_key(self, key: bytes) -> bool:
        self._check_open()
        return bool(self._named.get(key)) or bool(self._untagged.get(key))

    # -- lifecycle --------------------------------------------------------------------

    def _check_open(self) -> None:
        if self._closed:
            raise StoreClosed("branch manager is closed")

    def sync(self) -> None:
        self._check_open()
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._fh.flush()
        self._fh.close()

    def __enter__(self) -> "BranchManager":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __repr__(self) -> str:
        return f"BranchManager({self.path!r}, keys={len(self.keys()) if not self._closed else '?'})"
