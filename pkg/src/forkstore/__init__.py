"""Content-addressed versioned storage with branching and three-way merges."""

from __future__ import annotations

from .chunking import ChunkerConfig
from .chunks import CID_SIZE, Chunk, ChunkType
from .cluster import ClusterClient, ClusterServer, ClusterSpec, LocalCluster
from .engine import Engine, EngineConfig, FObject
from .errors import (
    BranchExists,
    BranchNotFound,
    ChunkNotFound,
    ForkStoreError,
    FormatError,
    GuardMismatch,
    KeyNotFound,
    NoCommonAncestor,
    ObjectNotFound,
    TamperDetected,
    TypeMismatch,
    UnresolvedConflicts,
)
from .merge import Resolver
from .store import ChunkStore
from .values import ValueKind

__version__ = "0.1.0"

__all__ = [
    "CID_SIZE",
    "BranchExists",
    "BranchNotFound",
    "Chunk",
    "ChunkNotFound",
    "ChunkStore",
    "ChunkType",
    "ChunkerConfig",
    "ClusterClient",
    "ClusterServer",
    "ClusterSpec",
    "Engine",
    "EngineConfig",
    "FObject",
    "ForkStoreError",
    "FormatError",
    "GuardMismatch",
    "KeyNotFound",
    "LocalCluster",
    "NoCommonAncestor",
    "ObjectNotFound",
    "Resolver",
    "TamperDetected",
    "TypeMismatch",
    "UnresolvedConflicts",
    "ValueKind",
    "__version__",
]
