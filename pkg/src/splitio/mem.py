"""Arenas, handles, and the shared-region registry.

Memory is modeled as flat arenas of two kinds. PRIVATE arenas belong to the
guest alone; the device side can never read or write them. SHARED arenas are
visible to the device, but only while they are registered with the
SharedRegionManager. Every byte access goes through MemorySystem.read/write
and names which side is acting, so the device/VM trust boundary is enforced
in exactly one place and can be audited from the access log.

Instrumentation (per-byte read tallies plus an access log) is optional: tests
turn it on, the benchmark fast path leaves it off.
"""

from __future__ import annotations

import enum
from array import array
from dataclasses import dataclass
from typing import Iterator, Optional

from .errors import (
    AlreadyTornDown,
    DeviceAccessDenied,
    NotShared,
    OutOfBounds,
    ZeroSize,
)


class RegionKind(enum.Enum):
    PRIVATE = "private"
    SHARED = "shared"


class Side(enum.Enum):
    VM = "vm"
    DEVICE = "device"


class RegionState(enum.Enum):
    INIT = "init"
    ACTIVE = "active"
    TORN_DOWN = "torn_down"


@dataclass(frozen=True)
class Handle:
    """A (region, offset, length) view into one arena. Plain data, no methods
    touch memory; resolution happens in MemorySystem."""

    region: int
    offset: int
    length: int

    def sub(self, start: int, length: int) -> "Handle":
        """Sub-range relative to this handle. Bounds checked here because a
        mis-built sub-handle should fail where it is made, not where used."""
        if start < 0 or length < 0 or start + length > self.length:
            raise OutOfBounds(
                f"sub({start}, {length}) outside handle of length {self.length}"
            )
        return Handle(self.region, self.offset + start, length)


@dataclass
class AccessRecord:
    """One logged byte access. ok=False records a denied attempt; denied
    attempts never touch memory."""

    side: Side
    op: str  # "read" or "write"
    region: int
    offset: int
    length: int
    ok: bool


class Arena:
    __slots__ = ("id", "kind", "size", "data", "read_counters")

    def __init__(self, arena_id: int, kind: RegionKind, size: int, instrument: bool):
        self.id = arena_id
        self.kind = kind
        self.size = size
        self.data = bytearray(size)
        # per-byte read tally, allocated only under instrumentation
        self.read_counters: Optional[array] = array("I", bytes(4 * size)) if instrument else None

    def is_zero(self) -> bool:
        return not any(self.data)


class SharedRegionManager:
    """Tracks which shared arenas the device is allowed to touch.

    Lifecycle is one-way: INIT -> ACTIVE on first registration, ACTIVE ->
    TORN_DOWN on zero_and_release. Teardown zeroes every registered arena
    before unregistering it, so no guest data survives in device-visible
    memory. A torn-down manager refuses further registration.
    """

    def __init__(self, mem: "MemorySystem"):
        self._mem = mem
        self.registered: set[int] = set()
        self.state = RegionState.INIT

    def register(self, arena: Arena) -> None:
        if self.state is RegionState.TORN_DOWN:
            raise AlreadyTornDown("manager already torn down")
        if arena.kind is not RegionKind.SHARED:
            raise NotShared(f"arena {arena.id} is {arena.kind.value}")
        self.registered.add(arena.id)
        self.state = RegionState.ACTIVE

    def is_registered(self, region: int) -> bool:
        return region in self.registered

    def zero_and_release(self) -> None:
        """Zero every registered arena, unregister all, and tear down."""
        if self.state is RegionState.TORN_DOWN:
            raise AlreadyTornDown("manager already torn down")
        for region in sorted(self.registered):
            arena = self._mem.arena(region)
            arena.data[:] = bytes(arena.size)
            self._mem.quarantined.discard(region)
        self.registered.clear()
        self.state = RegionState.TORN_DOWN


class MemorySystem:
    """All arenas of one simulated machine plus its shared-region manager."""

    def __init__(self, instrument: bool = False):
        self.instrument = instrument
        self.arenas: dict[int, Arena] = {}
        self.access_log: list[AccessRecord] = []
        # shared arenas abandoned by a non-graceful port teardown; not
        # reusable for new rings/pools until zero_and_release scrubs them
        self.quarantined: set[int] = set()
        self.shared = SharedRegionManager(self)
        self._next_id = 1

    # -- arena lifecycle ---------------------------------------------------

    def create_arena(self, kind: RegionKind, size: int) -> Arena:
        if size <= 0:
            raise ZeroSize(f"arena size must be positive, got {size}")
        arena = Arena(self._next_id, kind, size, self.instrument)
        self.arenas[arena.id] = arena
        self._next_id += 1
        return arena

    def arena(self, region: int) -> Arena:
        try:
            return self.arenas[region]
        except KeyError:
            raise OutOfBounds(f"no arena with id {region}") from None

    def is_reusable(self, arena: Arena) -> bool:
        return arena.id not in self.quarantined

    # -- containment -------------------------------------------------------

    def contains(self, arena: Arena, h: Handle, kind: Optional[RegionKind] = None) -> bool:
        """Total check: does h lie fully inside this arena (and match kind)?
        Never raises; malformed handles simply return False."""
        if h.region != arena.id:
            return False
        if kind is not None and arena.kind is not kind:
            return False
        return 0 <= h.offset and 0 <= h.length and h.offset + h.length <= arena.size

    def handle_in_kind(self, h: Handle, kind: RegionKind) -> bool:
        arena = self.arenas.get(h.region)
        return arena is not None and self.contains(arena, h, kind)

    def is_device_accessible(self, region: int) -> bool:
        arena = self.arenas.get(region)
        return (
            arena is not None
            and arena.kind is RegionKind.SHARED
            and self.shared.is_registered(region)
        )

    # -- byte access (the single trust-boundary choke point) ---------------

    def _resolve(self, h: Handle, length: int) -> Arena:
        arena = self.arenas.get(h.region)
        if arena is None:
            raise OutOfBounds(f"no arena with id {h.region}")
        if h.offset < 0 or length < 0 or h.offset + length > arena.size:
            raise OutOfBounds(
                f"[{h.offset}, {h.offset + length}) outside arena {arena.id} of size {arena.size}"
            )
        return arena

    def _check_device(self, h: Handle, op: str, length: int) -> None:
        if not self.is_device_accessible(h.region):
            if self.instrument:
                self.access_log.append(
                    AccessRecord(Side.DEVICE, op, h.region, h.offset, length, ok=False)
                )
            raise DeviceAccessDenied(
                f"device {op} of {length} B at region {h.region}+{h.offset} denied"
            )

    def read(self, h: Handle, side: Side) -> bytes:
        arena = self._resolve(h, h.length)
        if side is Side.DEVICE:
            self._check_device(h, "read", h.length)
        if self.instrument:
            self.access_log.append(
                AccessRecord(side, "read", h.region, h.offset, h.length, ok=True)
            )
            if arena.read_counters is not None:
                counters = arena.read_counters
                for i in range(h.offset, h.offset + h.length):
                    counters[i] += 1
        return bytes(arena.data[h.offset : h.offset + h.length])

    def write(self, h: Handle, side: Side, data: bytes) -> None:
        if len(data) > h.length:
            raise OutOfBounds(f"write of {len(data)} B into handle of length {h.length}")
        arena = self._resolve(h, len(data))
        if side is Side.DEVICE:
            self._check_device(h, "write", len(data))
        if self.instrument:
            self.access_log.append(
                AccessRecord(side, "write", h.region, h.offset, len(data), ok=True)
            )
        arena.data[h.offset : h.offset + len(data)] = data

    # -- audit helpers -----------------------------------------------------

    def device_touched_regions(self) -> set[int]:
        """Regions the device actually read or wrote (denied attempts excluded)."""
        return {
            rec.region
            for rec in self.access_log
            if rec.side is Side.DEVICE and rec.ok
        }

    def find_pattern(self, pattern: bytes, kind: Optional[RegionKind] = None) -> Iterator[tuple[int, int]]:
        """Yield (region, index) for every occurrence of pattern in arenas of
        the given kind (all arenas when kind is None)."""
        for arena in self.arenas.values():
            if kind is not None and arena.kind is not kind:
                continue
            start = 0
            while True:
                idx = arena.data.find(pattern, start)
                if idx < 0:
                    break
                yield (arena.id, idx)
                start = idx + 1

    def pattern_in_shared(self, pattern: bytes) -> bool:
        return next(self.find_pattern(pattern, RegionKind.SHARED), None) is not None
