"""Rank identity, tagged point-to-point messaging, communicators, collectives.

Two interchangeable backends sit beneath :class:`TransportContext`: an
in-process world whose ranks are threads sharing one interpreter (used for
deterministic tests and the thread launcher) and a TCP socket mesh with one
OS process per rank (see :mod:`packrun.mesh`).  Everything above the backend
is identical: reliable FIFO point-to-point delivery per (src, dest,
communicator) triple, tag and source filtering on receive, and flat
root-centric collectives.

Collective traffic travels as control-kind envelopes tagged with a
per-communicator sequence number, so it can never be confused with user
messages, even ones received with wildcard filters.  All members must issue
collectives on one communicator in the same order; the sequence numbers then
agree on every rank without any allocation traffic.
"""

from __future__ import annotations

import os
import struct
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from ._slots import current_slot
from .wire import KIND_CONTROL, KIND_DATA, MAX_PAYLOAD, Envelope


class _AnyFilter:
    def __repr__(self) -> str:
        return "ANY"


ANY = _AnyFilter()  # wildcard for recv source/tag filters


class _NotMember:
    def __repr__(self) -> str:
        return "NOT_MEMBER"


NOT_MEMBER = _NotMember()  # comm_create's result for ranks outside the subset

WORLD_COMM_ID = 0

# Control opcodes (first payload byte of control-kind envelopes)
_OP_BARRIER_ENTER = 1
_OP_BARRIER_RELEASE = 2
_OP_BCAST = 3
_OP_GATHER = 4
_OP_SCATTER = 5
_OP_COMM_PROPOSAL = 6
_OP_COMM_RESULT = 7


# ---------------------------------------------------------------------------
# Errors


class TransportError(Exception):
    """Base class for runtime messaging errors."""


class AlreadyInitialized(TransportError):
    def __init__(self):
        super().__init__("transport already initialized in this process")


class RendezvousTimeout(TransportError):
    def __init__(self, seconds: float):
        super().__init__(f"rendezvous did not complete within {seconds:g} s")
        self.seconds = seconds


class RankConflict(TransportError):
    def __init__(self, rank: int):
        super().__init__(f"rank {rank} claimed more than once")
        self.rank = rank


class SelfSend(TransportError):
    def __init__(self):
        super().__init__("a rank cannot send a point-to-point message to itself")


class InvalidRank(TransportError):
    def __init__(self, rank):
        super().__init__(f"rank {rank!r} is not a member of this communicator")
        self.rank = rank


class InvalidRoot(TransportError):
    def __init__(self, root):
        super().__init__(f"root {root!r} is not a member of this communicator")
        self.root = root


class Finalized(TransportError):
    def __init__(self):
        super().__init__("transport context is finalized")


class EmptySubset(TransportError):
    def __init__(self):
        super().__init__("a communicator needs at least one member")


class SegmentCountMismatch(TransportError):
    def __init__(self, expected: int, found: int):
        super().__init__(f"scatter needs {expected} segments, got {found}")
        self.expected = expected
        self.found = found


class RecvTimeout(TransportError):
    def __init__(self, seconds: float):
        super().__init__(f"no matching message arrived within {seconds:g} s")
        self.seconds = seconds


# ---------------------------------------------------------------------------
# Configuration


class BackendKind(Enum):
    IN_PROCESS = "thread"
    SOCKET_MESH = "process"


@dataclass
class WorldConfig:
    nprocs: int = 1
    backend: BackendKind = BackendKind.IN_PROCESS
    rendezvous: Optional[str] = None  # "host:port" of the launcher's coordinator
    my_rank_hint: Optional[int] = None
    hetero: bool = False
    timeout: float = 10.0

    @classmethod
    def from_env(cls, env=os.environ) -> "WorldConfig":
        """Build the configuration a launcher injected, if any.

        A process started by the launcher sees PACKRUN_COORD and joins the
        socket mesh; anything else becomes a single-rank world.
        """
        coord = env.get("PACKRUN_COORD")
        if coord is None:
            return cls()
        return cls(
            nprocs=int(env["PACKRUN_NPROCS"]),
            backend=BackendKind.SOCKET_MESH,
            rendezvous=coord,
            my_rank_hint=int(env["PACKRUN_RANK"]),
            hetero=env.get("PACKRUN_HETERO", "0") == "1",
        )


@dataclass(frozen=True)
class Communicator:
    """An ordered rank subset. Local ranks are positions in ``members``."""

    comm_id: int
    members: tuple  # world ranks, sorted ascending
    local_rank: int

    @property
    def size(self) -> int:
        return len(self.members)

    def world_rank(self, local: int) -> int:
        return self.members[local]

    def local_of(self, world: int) -> int:
        return self.members.index(world)


# ---------------------------------------------------------------------------
# Mailbox


class Mailbox:
    """Arrival-ordered message store with predicate matching.

    ``take`` scans pending messages oldest-first and removes the first match,
    which preserves FIFO order per sender while letting a filtered receive
    skip past non-matching traffic (skipped messages stay queued).  The store
    is unbounded by design: delivery never blocks the sender.
    """

    def __init__(self):
        self._cond = threading.Condition()
        self._items: list[Envelope] = []
        self._closed = False

    def put(self, env: Envelope) -> bool:
        with self._cond:
            if self._closed:
                return False
            self._items.append(env)
            self._cond.notify_all()
            return True

    def take(self, match: Callable[[Envelope], bool], timeout: Optional[float] = None) -> Envelope:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                for i, env in enumerate(self._items):
                    if match(env):
                        return self._items.pop(i)
                if self._closed:
                    raise Finalized()
                if deadline is None:
                    self._cond.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise RecvTimeout(timeout)
                    self._cond.wait(remaining)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def pending(self) -> int:
        with self._cond:
            return len(self._items)


# ---------------------------------------------------------------------------
# Context


class TransportContext:
    """One rank's handle on the world.

    Thread-safe for point-to-point traffic.  Collectives follow the usual
    contract: every member calls the same collectives in the same order on a
    given communicator, one at a time.
    """

    def __init__(self, rank: int, nprocs: int, backend, mailbox: Mailbox, hetero: bool = False):
        self.rank = rank
        self.nprocs = nprocs
        self.hetero = hetero
        self._backend = backend
        self._mailbox = mailbox
        self._finalized = False
        self._lock = threading.Lock()
        self._coll_seq: dict[int, int] = {}
        self._child_counter: dict[int, int] = {}
        self.world = Communicator(WORLD_COMM_ID, tuple(range(nprocs)), rank)

    # -- plumbing

    @property
    def finalized(self) -> bool:
        return self._finalized

    def _check_open(self) -> None:
        if self._finalized:
            raise Finalized()

    def _next_seq(self, comm: Communicator) -> int:
        with self._lock:
            seq = (self._coll_seq.get(comm.comm_id, 0) + 1) & 0xFFFFFFFF
            self._coll_seq[comm.comm_id] = seq
            return seq

    def _post(self, env: Envelope) -> None:
        self._backend.post(env)

    def _send_control(self, comm: Communicator, dest_local: int, seq: int,
                      opcode: int, body: bytes = b"") -> None:
        env = Envelope(self.rank, comm.members[dest_local], comm.comm_id,
                       seq, bytes([opcode]) + body, KIND_CONTROL)
        self._post(env)

    def _recv_control(self, comm: Communicator, src_local: int, seq: int, opcode: int) -> bytes:
        src_world = comm.members[src_local]

        def match(env: Envelope) -> bool:
            return (env.kind == KIND_CONTROL and env.comm_id == comm.comm_id
                    and env.src == src_world and env.tag == seq)

        env = self._mailbox.take(match)
        if env.payload[:1] != bytes([opcode]):
            raise TransportError(
                f"collective mismatch: expected opcode {opcode}, got {env.payload[:1]!r} "
                f"(members issuing collectives in different orders?)")
        return env.payload[1:]

    # -- point to point

    def send(self, comm: Communicator, dest: int, tag: int, payload: bytes) -> None:
        self._check_open()
        if not 0 <= dest < comm.size:
            raise InvalidRank(dest)
        if dest == comm.local_rank:
            raise SelfSend()
        if not 0 <= tag < 2**32:
            raise TransportError(f"tag {tag} does not fit in u32")
        payload = bytes(payload)
        if len(payload) > MAX_PAYLOAD:
            raise TransportError(f"payload of {len(payload)} bytes exceeds the {MAX_PAYLOAD} maximum")
        self._post(Envelope(self.rank, comm.members[dest], comm.comm_id, tag, payload, KIND_DATA))

    def recv(self, comm: Communicator, source=ANY, tag=ANY,
             timeout: Optional[float] = None) -> tuple[int, int, bytes]:
        self._check_open()
        if source is not ANY and not 0 <= source < comm.size:
            raise InvalidRank(source)
        src_world = None if source is ANY else comm.members[source]

        def match(env: Envelope) -> bool:
            return (env.kind == KIND_DATA and env.comm_id == comm.comm_id
                    and (src_world is None or env.src == src_world)
                    and (tag is ANY or env.tag == tag))

        env = self._mailbox.take(match, timeout)
        return comm.local_of(env.src), env.tag, env.payload

    # -- collectives

    def barrier(self, comm: Communicator) -> None:
        self._check_open()
        seq = self._next_seq(comm)
        if comm.size == 1:
            return
        if comm.local_rank == 0:
            for m in range(1, comm.size):
                self._recv_control(comm, m, seq, _OP_BARRIER_ENTER)
            for m in range(1, comm.size):
                self._send_control(comm, m, seq, _OP_BARRIER_RELEASE)
        else:
            self._send_control(comm, 0, seq, _OP_BARRIER_ENTER)
            self._recv_control(comm, 0, seq, _OP_BARRIER_RELEASE)

    def broadcast(self, comm: Communicator, root: int, payload: Optional[bytes] = None) -> bytes:
        self._check_open()
        if not 0 <= root < comm.size:
            raise InvalidRoot(root)
        seq = self._next_seq(comm)
        if comm.local_rank == root:
            data = bytes(payload if payload is not None else b"")
            for m in range(comm.size):
                if m != root:
                    self._send_control(comm, m, seq, _OP_BCAST, data)
            return data
        return self._recv_control(comm, root, seq, _OP_BCAST)

    def gather(self, comm: Communicator, root: int, payload: bytes) -> Optional[list[bytes]]:
        self._check_open()
        if not 0 <= root < comm.size:
            raise InvalidRoot(root)
        seq = self._next_seq(comm)
        payload = bytes(payload)
        if comm.local_rank != root:
            self._send_control(comm, root, seq, _OP_GATHER, payload)
            return None
        parts: list[Optional[bytes]] = [None] * comm.size
        parts[root] = payload
        for m in range(comm.size):
            if m != root:
                parts[m] = self._recv_control(comm, m, seq, _OP_GATHER)
        return parts

    def scatter(self, comm: Communicator, root: int,
                segments: Optional[list[bytes]] = None) -> bytes:
        self._check_open()
        if not 0 <= root < comm.size:
            raise InvalidRoot(root)
        seq = self._next_seq(comm)
        if comm.local_rank != root:
            return self._recv_control(comm, root, seq, _OP_SCATTER)
        segments = [bytes(s) for s in (segments or [])]
        if len(segments) != comm.size:
            raise SegmentCountMismatch(comm.size, len(segments))
        for m in range(comm.size):
            if m != root:
                self._send_control(comm, m, seq, _OP_SCATTER, segments[m])
        return segments[root]

    def comm_create(self, parent: Communicator, members):
        """Collectively carve a child communicator out of ``parent``.

        ``members`` are parent-local ranks; every parent member must call
        with the identical subset.  Members of the subset get the child
        communicator, everyone else gets NOT_MEMBER.
        """
        self._check_open()
        requested = list(members)
        subset = sorted(set(requested))
        if not subset:
            raise EmptySubset()
        if len(subset) != len(requested):
            raise InvalidRank(next(m for m in requested if requested.count(m) > 1))
        for m in subset:
            if not 0 <= m < parent.size:
                raise InvalidRank(m)
        world_members = tuple(sorted(parent.members[m] for m in subset))
        proposal = struct.pack(f">{len(world_members)}I", *world_members)
        seq = self._next_seq(parent)
        if parent.local_rank == 0:
            agreed = True
            for m in range(1, parent.size):
                if self._recv_control(parent, m, seq, _OP_COMM_PROPOSAL) != proposal:
                    agreed = False
            if agreed:
                child_id = self._allocate_comm_id(parent.comm_id)
                result = b"\x01" + struct.pack(">I", child_id)
            else:
                result = b"\x00"
            for m in range(1, parent.size):
                self._send_control(parent, m, seq, _OP_COMM_RESULT, result)
            if not agreed:
                raise TransportError("comm_create needs an identical subset from every parent member")
        else:
            self._send_control(parent, 0, seq, _OP_COMM_PROPOSAL, proposal)
            result = self._recv_control(parent, 0, seq, _OP_COMM_RESULT)
            if result[:1] != b"\x01":
                raise TransportError("comm_create needs an identical subset from every parent member")
            (child_id,) = struct.unpack(">I", result[1:5])
        if self.rank not in world_members:
            return NOT_MEMBER
        return Communicator(child_id, world_members, world_members.index(self.rank))

    def _allocate_comm_id(self, parent_id: int) -> int:
        # Child ids pack the ancestry into bytes: (parent << 8) | counter.
        # Distinct roots can allocate concurrently without clashing because
        # siblings share the parent id and the per-parent counter.
        with self._lock:
            counter = self._child_counter.get(parent_id, 0) + 1
            self._child_counter[parent_id] = counter
        if counter > 0xFF or parent_id > 0xFFFFFF:
            raise TransportError("communicator nesting/fan-out exceeds the id space")
        return (parent_id << 8) | counter

    # -- lifecycle

    def finalize(self) -> None:
        """Tear down this rank's messaging. Idempotent."""
        if self._finalized:
            return
        self._finalized = True
        self._mailbox.close()
        self._backend.shutdown(self.rank)


# ---------------------------------------------------------------------------
# In-process backend


class InProcessWorld:
    """All ranks as threads of one interpreter, queues in shared memory.

    ``attach`` hands out each rank's context exactly once.  Delivery is a
    direct append to the destination mailbox, so messages to a finalized
    rank are dropped the way a closed socket would drop them.
    """

    def __init__(self, nprocs: int, hetero: bool = False):
        if nprocs < 1:
            raise TransportError("a world needs at least one rank")
        self.nprocs = nprocs
        self.hetero = hetero
        self._mailboxes = [Mailbox() for _ in range(nprocs)]
        self._attached: set[int] = set()
        self._lock = threading.Lock()

    def attach(self, rank: int) -> TransportContext:
        if not 0 <= rank < self.nprocs:
            raise InvalidRank(rank)
        with self._lock:
            if rank in self._attached:
                raise RankConflict(rank)
            self._attached.add(rank)
        return TransportContext(rank, self.nprocs, self, self._mailboxes[rank], self.hetero)

    def post(self, env: Envelope) -> None:
        self._mailboxes[env.dest].put(env)

    def shutdown(self, rank: int) -> None:
        pass  # per-rank mailboxes are closed by their contexts


# ---------------------------------------------------------------------------
# Process-wide entry point


def init(config: Optional[WorldConfig] = None) -> TransportContext:
    """Bring up this process's rank and connect the world.

    Callable at most once per logical process lifetime.  Under a launcher the
    configuration comes from the environment (socket mesh) or is pre-staged
    (thread backend); standalone callers get a single-rank world unless they
    pass an explicit config.
    """
    slot = current_slot()
    if slot.transport_initialized:
        raise AlreadyInitialized()
    if slot.staged_transport is not None:
        ctx = slot.staged_transport
        slot.staged_transport = None
    else:
        if config is None:
            config = WorldConfig.from_env()
        if config.nprocs < 1:
            raise TransportError("nprocs must be at least 1")
        if config.my_rank_hint is not None and not 0 <= config.my_rank_hint < config.nprocs:
            raise InvalidRank(config.my_rank_hint)
        if config.backend is BackendKind.IN_PROCESS:
            if config.nprocs != 1:
                raise TransportError(
                    "in-process worlds with nprocs > 1 are created by the thread launcher")
            ctx = InProcessWorld(1, config.hetero).attach(0)
        else:
            from .mesh import connect_mesh
            ctx = connect_mesh(config)
    slot.transport = ctx
    slot.transport_initialized = True
    return ctx
