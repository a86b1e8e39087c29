"""packrun: message-passing runs built around a self-describing buffer.

The pieces, bottom up:

- idl: type definitions and the registry they compile into.
- pack: dynamic values and the two wire encodings (Native, Portable).
- transport / mesh: point-to-point and collective delivery between ranks,
  in-process or over a socket mesh with launcher rendezvous.
- msgbuf: the user-facing buffer that packs values and moves itself.
- spmd: scoped enter/exit for one rank of a run.
- slave: the master-slave task farm.
- launcher / cli: start N ranks (mprun) and the utility tools.
"""

from .idl import (
    Arm,
    DuplicateField,
    DuplicateType,
    FieldDescriptor,
    FixedArray,
    IdlError,
    IdlSyntaxError,
    IllegalRecursion,
    Named,
    Primitive,
    PrimTag,
    RecordType,
    Sequence,
    TypeRegistry,
    UnresolvedType,
    VariantType,
    format_descriptor,
    format_descriptors,
    format_kind,
    parse_idl,
    parse_kind,
)
from .launcher import LaunchError, LaunchPlan, SpawnFailure, launch
from .msgbuf import MalformedSegmentTable, MsgBuf
from .pack import (
    Buffer,
    Encoding,
    MalformedBool,
    MalformedByte,
    MalformedString,
    MalformedVariantTag,
    PackError,
    Prim,
    Rec,
    SchemaMismatch,
    Seq,
    Str,
    Truncated,
    UnknownType,
    Var,
    decode_value,
    encode_value,
    infer_kind,
    pack,
    unpack,
)
from .slave import (
    FARM_TAG,
    STOP,
    DuplicateSelector,
    HandlerError,
    HandlerTable,
    MasterPool,
    NoIdleSlave,
    NoOutstanding,
    NoSlaves,
    SlaveError,
    TableMismatch,
    slave_loop,
)
from .spmd import AlreadyActive, GlobalScopeError, SpmdContext, SpmdError, spmd_enter, spmd_exit
from .transport import (
    ANY,
    NOT_MEMBER,
    AlreadyInitialized,
    BackendKind,
    Communicator,
    EmptySubset,
    Finalized,
    InvalidRank,
    InvalidRoot,
    RankConflict,
    RecvTimeout,
    RendezvousTimeout,
    SegmentCountMismatch,
    SelfSend,
    TransportContext,
    TransportError,
    WorldConfig,
    init,
)

__version__ = "0.1.0"

__all__ = [
    "ANY",
    "AlreadyActive",
    "AlreadyInitialized",
    "Arm",
    "BackendKind",
    "Buffer",
    "Communicator",
    "DuplicateField",
    "DuplicateSelector",
    "DuplicateType",
    "EmptySubset",
    "Encoding",
    "FARM_TAG",
    "FieldDescriptor",
    "Finalized",
    "FixedArray",
    "GlobalScopeError",
    "HandlerError",
    "HandlerTable",
    "IdlError",
    "IdlSyntaxError",
    "IllegalRecursion",
    "InvalidRank",
    "InvalidRoot",
    "LaunchError",
    "LaunchPlan",
    "MalformedBool",
    "MalformedByte",
    "MalformedSegmentTable",
    "MalformedString",
    "MalformedVariantTag",
    "MasterPool",
    "MsgBuf",
    "NOT_MEMBER",
    "Named",
    "NoIdleSlave",
    "NoOutstanding",
    "NoSlaves",
    "PackError",
    "Prim",
    "PrimTag",
    "Primitive",
    "RankConflict",
    "Rec",
    "RecordType",
    "RecvTimeout",
    "RendezvousTimeout",
    "STOP",
    "SchemaMismatch",
    "SegmentCountMismatch",
    "SelfSend",
    "Seq",
    "Sequence",
    "SlaveError",
    "SpawnFailure",
    "SpmdContext",
    "SpmdError",
    "Str",
    "TableMismatch",
    "Truncated",
    "TransportContext",
    "TransportError",
    "TypeRegistry",
    "UnknownType",
    "UnresolvedType",
    "Var",
    "VariantType",
    "WorldConfig",
    "decode_value",
    "encode_value",
    "format_descriptor",
    "format_descriptors",
    "format_kind",
    "infer_kind",
    "init",
    "launch",
    "pack",
    "parse_idl",
    "parse_kind",
    "slave_loop",
    "spmd_enter",
    "spmd_exit",
    "unpack",
]
