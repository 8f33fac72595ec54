"""adelite: a process-centered software-engineering database engine.

Typed ER/OO object store with versioning and partitions, an ECA trigger
engine with PRE/POST/AFTER/ERROR coupling, a constraint-driven configuration
builder, transactional workspaces mapped to file trees, and a role/connection
process layer, all scripted through the .adl DSL and the `adl` CLI.
"""

from .engine import AbortSignal, Engine, EngineError, TxResult
from .schema import (
    AttributeDef,
    ConnectionDef,
    EventRule,
    MethodDef,
    RoleDef,
    SchemaError,
    TriggerBlock,
    TypeDef,
)
from .store import Store, StoreError, obj_ref, rel_ref
from .values import UNSET, Domain

__all__ = [
    "AbortSignal",
    "AttributeDef",
    "ConnectionDef",
    "Domain",
    "Engine",
    "EngineError",
    "EventRule",
    "MethodDef",
    "RoleDef",
    "SchemaError",
    "Store",
    "StoreError",
    "TriggerBlock",
    "TxResult",
    "TypeDef",
    "UNSET",
    "obj_ref",
    "rel_ref",
]

__version__ = "0.1.0"
