"""Content-defined splitting of element streams into chunk-sized groups.

Boundaries come from two pattern detectors:

* Leaf levels roll a cyclic-polynomial hash over the encoded element bytes.
  The hash of a k-byte window is

      rot^(k-1)(h(b1)) XOR rot^(k-2)(h(b2)) XOR ... XOR rot^0(h(bk))

  where rot shifts left by one within q bits (the q-th bit wraps to the
  lowest position) and h substitutes each byte with a fixed pseudo-random
  q-bit value. Advancing the window is O(1): rotate the running hash once,
  XOR out rot^k of the evicted byte, XOR in the incoming byte. A boundary
  pattern occurs where the low q bits are all zero, expected once per 2^q
  bytes on random input. A group closes at the end of the element containing
  the pattern. The first k-1 bytes of each group are priming: the window is
  not yet full there and the test is suppressed, which makes boundary
  decisions depend only on bytes inside the group, so identical content
  always splits identically no matter how it was edited into place.

* Index levels test each entry's child cid directly: a boundary occurs when
  the integer formed by the cid's low bytes has its low r bits all zero.

Both levels force a split before a group would exceed max_size_factor times
its target, so a group only exceeds that cap when a single element does.

The substitution table derives from SHA-256 of a fixed label, not from any
PRNG, so the byte stream it produces can never drift between library
versions. The hot scan over raw bytes is JIT-compiled with numba; the
RollingHash class is the same recurrence in plain Python for streaming use
and for cross-checking the kernel.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
from numba import njit

logger = logging.getLogger(__name__)

_TABLE_LABEL = b"forkstore-rolling-v1:"
_MAX_BITS = 62


def _master_table() -> np.ndarray:
    vals = [
        int.from_bytes(hashlib.sha256(_TABLE_LABEL + bytes((b,))).digest()[:8], "little")
        for b in range(256)
    ]
    return np.array(vals, dtype=np.uint64)


_MASTER = _master_table()


@lru_cache(maxsize=None)
def byte_table(q: int) -> np.ndarray:
    """Substitution table h: byte -> q-bit value. Fixed for all time."""
    if not 1 <= q <= _MAX_BITS:
        raise ValueError(f"q must be in [1, {_MAX_BITS}], got {q}")
    tab = _MASTER & np.uint64((1 << q) - 1)
    tab.setflags(write=False)
    return tab


@lru_cache(maxsize=None)
def rolled_table(q: int, k: int) -> np.ndarray:
    """byte_table rotated left by k mod q: the eviction term of the roll."""
    tab = byte_table(q)
    rot = _rotl(tab, k % q, q)
    rot.setflags(write=False)
    return rot


def _rotl(v, by: int, q: int):
    if by == 0:
        return v.copy() if isinstance(v, np.ndarray) else v
    mask = (1 << q) - 1
    if isinstance(v, np.ndarray):
        return ((v << np.uint64(by)) | (v >> np.uint64(q - by))) & np.uint64(mask)
    return ((v << by) | (v >> (q - by))) & mask


@dataclass(frozen=True)
class ChunkerConfig:
    """Splitting parameters. Trees built with different configs differ.

    leaf_bits (q) and index_bits (r) default to hitting the byte targets:
    the leaf detector tests every byte, so q = log2(target_leaf_bytes); the
    index detector tests once per entry, so r divides the target by an
    estimated encoded entry size.
    """

    window_size: int = 32
    target_leaf_bytes: int = 4096
    target_index_bytes: int = 4096
    max_size_factor: float = 8.0
    index_entry_estimate: int = 40
    leaf_bits: int = 0
    index_bits: int = 0

    def __post_init__(self):
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.target_leaf_bytes < 1 or self.target_index_bytes < 1:
            raise ValueError("targets must be >= 1")
        if self.max_size_factor < 1.0:
            raise ValueError("max_size_factor must be >= 1.0")
        if not self.leaf_bits:
            object.__setattr__(
                self, "leaf_bits", _clamp_bits(round(math.log2(self.target_leaf_bytes)))
            )
        if not self.index_bits:
            object.__setattr__(
                self,
                "index_bits",
                _clamp_bits(
                    round(math.log2(max(2.0, self.target_index_bytes / self.index_entry_estimate)))
                ),
            )
        for name in ("leaf_bits", "index_bits"):
            if not 1 <= getattr(self, name) <= _MAX_BITS:
                raise ValueError(f"{name} out of range")

    @property
    def max_leaf_bytes(self) -> int:
        return int(self.max_size_factor * self.target_leaf_bytes)

    @property
    def max_index_bytes(self) -> int:
        return int(self.max_size_factor * self.target_index_bytes)


def _clamp_bits(bits: int) -> int:
    return max(1, min(_MAX_BITS, bits))


DEFAULT_CONFIG = ChunkerConfig()


class RollingHash:
    """Streaming form of the window hash; one owner, push one byte at a time."""

    __slots__ = ("q", "k", "_tab", "_rot", "_mask", "_window", "value")

    def __init__(self, q: int, k: int):
        self.q = q
        self.k = k
        self._tab = byte_table(q).tolist()
        self._rot = rolled_table(q, k).tolist()
        self._mask = (1 << q) - 1
        self._window: deque[int] = deque(maxlen=k)
        self.value = 0

    def push(self, byte: int) -> int:
        h = self.value
        h = ((h << 1) | (h >> (self.q - 1))) & self._mask
        h ^= self._tab[byte]
        if len(self._window) == self.k:
            h ^= self._rot[self._window.popleft()]
        self._window.append(byte)
        self.value = h
        return h

    @property
    def window_full(self) -> bool:
        return len(self._window) == self.k

    def reset(self) -> None:
        self._window.clear()
        self.value = 0


def is_leaf_pattern(state, q: int) -> bool:
    """True when the low q bits of the hash are zero.

    Accepts a RollingHash (in which case a not-yet-full window never
    matches: those positions are priming) or a plain integer hash value.
    """
    if isinstance(state, RollingHash):
        if not state.window_full:
            return False
        value = state.value
    else:
        value = state
    return value & ((1 << q) - 1) == 0


def is_index_pattern(cid: bytes, r: int) -> bool:
    """True when the integer formed by the cid's low bytes ends in r zero bits."""
    return int.from_bytes(cid[-8:], "big") & ((1 << r) - 1) == 0


@njit(cache=True)
def _pattern_kernel(data, tab, rot, k, q, out):  # pragma: no cover - jitted
    mask = np.uint64((1 << q) - 1)
    one = np.uint64(1)
    qm1 = np.uint64(q - 1)
    zero = np.uint64(0)
    h = zero
    cnt = 0
    for i in range(data.size):
        h = ((h << one) | (h >> qm1)) & mask
        h ^= tab[data[i]]
        if i >= k:
            h ^= rot[data[i - k]]
        if h == zero and i >= k - 1:
            if cnt == out.size:
                return -1
            out[cnt] = i
            cnt += 1
    return cnt


@njit(cache=True)
def _hash_kernel(data, tab, rot, k, q):  # pragma: no cover - jitted
    mask = np.uint64((1 << q) - 1)
    one = np.uint64(1)
    qm1 = np.uint64(q - 1)
    out = np.empty(data.size, np.uint64)
    h = np.uint64(0)
    for i in range(data.size):
        h = ((h << one) | (h >> qm1)) & mask
        h ^= tab[data[i]]
        if i >= k:
            h ^= rot[data[i - k]]
        out[i] = h
    return out


def _as_byte_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data if data.dtype == np.uint8 else data.astype(np.uint8)
    return np.frombuffer(bytes(data), dtype=np.uint8)


def hash_values(data, q: int, k: int) -> np.ndarray:
    """Rolling hash at every byte position (window still filling included)."""
    arr = _as_byte_array(data)
    return _hash_kernel(arr, byte_table(q), rolled_table(q, k), k, q)


def pattern_positions(data, q: int, k: int) -> np.ndarray:
    """Byte positions with a full window whose hash matches the pattern."""
    arr = _as_byte_array(data)
    if arr.size < k:
        return np.empty(0, dtype=np.int64)
    cap = max(256, arr.size >> max(0, q - 3))
    tab, rot = byte_table(q), rolled_table(q, k)
    while True:
        out = np.empty(cap, dtype=np.int64)
        cnt = _pattern_kernel(arr, tab, rot, k, q, out)
        if cnt >= 0:
            return out[:cnt]
        cap *= 4


@dataclass(frozen=True)
class Group:
    """One chunk's worth of elements: span [start, stop) plus byte extent."""

    start: int
    stop: int
    byte_start: int
    byte_stop: int
    reason: str  # "pattern" | "forced" | "oversized" | "tail"

    @property
    def byte_size(self) -> int:
        return self.byte_stop - self.byte_start


def _greedy_groups(
    total_bytes: int,
    element_ends: np.ndarray | None,
    patterns: np.ndarray,
    priming: int,
    max_bytes: int,
) -> list[Group]:
    """Select group boundaries left to right.

    element_ends is the sorted array of encoded element end offsets (None
    means every byte is its own element, the Blob case). Patterns fire at
    byte positions; the boundary extends to the containing element's end.
    A group is closed before it would exceed max_bytes, except that a lone
    element over the cap becomes its own oversized group.
    """
    if total_bytes == 0:
        return [Group(0, 0, 0, 0, "tail")]
    groups: list[Group] = []
    start_byte = 0
    start_elem = 0
    n_pat = len(patterns)
    p_idx = 0
    while start_byte < total_bytes:
        limit = start_byte + max_bytes
        p_idx = int(np.searchsorted(patterns, start_byte + priming - 1, side="left"))
        pat_end = None
        if p_idx < n_pat:
            p = int(patterns[p_idx])
            if element_ends is None:
                pat_end = p + 1
            else:
                pat_end = int(element_ends[int(np.searchsorted(element_ends, p, side="right"))])
        if pat_end is not None and pat_end - start_byte <= max_bytes:
            end_byte, reason = pat_end, "pattern"
        elif total_bytes - start_byte <= max_bytes:
            end_byte, reason = total_bytes, "tail"
        elif element_ends is None:
            end_byte, reason = limit, "forced"
        else:
            e_idx = int(np.searchsorted(element_ends, limit, side="right")) - 1
            if e_idx < 0 or int(element_ends[e_idx]) <= start_byte:
                first = int(np.searchsorted(element_ends, start_byte, side="right"))
                end_byte, reason = int(element_ends[first]), "oversized"
                logger.warning(
                    "element of %d bytes exceeds group cap %d; storing whole",
                    end_byte - start_byte,
                    max_bytes,
                )
            else:
                end_byte, reason = int(element_ends[e_idx]), "forced"
        if element_ends is None:
            end_elem = end_byte
        else:
            end_elem = int(np.searchsorted(element_ends, end_byte, side="left")) + 1
        groups.append(Group(start_elem, end_elem, start_byte, end_byte, reason))
        start_byte, start_elem = end_byte, end_elem
    return groups


def split_bytes(data, config: ChunkerConfig = DEFAULT_CONFIG) -> list[Group]:
    """Split raw bytes (Blob leaf level: every byte is an element)."""
    arr = _as_byte_array(data)
    patterns = pattern_positions(arr, config.leaf_bits, config.window_size)
    return _greedy_groups(
        arr.size, None, patterns, config.window_size, config.max_leaf_bytes
    )


def split_elements(
    encoded: Sequence[bytes], config: ChunkerConfig = DEFAULT_CONFIG
) -> list[Group]:
    """Split a sequence of encoded elements at the leaf level."""
    if not encoded:
        return [Group(0, 0, 0, 0, "tail")]
    data = b"".join(encoded)
    ends = np.cumsum(np.fromiter((len(e) for e in encoded), dtype=np.int64, count=len(encoded)))
    patterns = pattern_positions(data, config.leaf_bits, config.window_size)
    return _greedy_groups(len(data), ends, patterns, config.window_size, config.max_leaf_bytes)


def split_index_entries(
    cids: Sequence[bytes],
    encoded_sizes: Sequence[int],
    config: ChunkerConfig = DEFAULT_CONFIG,
) -> list[Group]:
    """Split index entries; the detector tests each entry's child cid."""
    if not cids:
        return [Group(0, 0, 0, 0, "tail")]
    ends = np.cumsum(np.fromiter(encoded_sizes, dtype=np.int64, count=len(encoded_sizes)))
    r = config.index_bits
    patterns = np.fromiter(
        (int(ends[i]) - 1 for i, cid in enumerate(cids) if is_index_pattern(cid, r)),
        dtype=np.int64,
    )
    return _greedy_groups(int(ends[-1]), ends, patterns, 1, config.max_index_bytes)
