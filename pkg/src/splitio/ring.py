"""SPSC descriptor rings living in shared memory.

Both rings use 32-byte slots in a registered shared arena. The VM produces
descriptors, the device consumes them and writes results back. Because the
device side is untrusted, the VM follows a strict field discipline:

* TX: the VM writes address/cmd_type_len/olinfo_status exactly once per post
  and afterwards reads only the status byte, only until it reads "free".
* RX: the VM writes the two buffer handles once per post; after the device
  signals ready it reads each writeback field exactly once, and it clamps the
  device-claimed length to the posted buffer before anyone trusts it.

Head/tail/device cursors are free-running 32-bit counters masked by capacity,
kept as plain attributes (they model doorbell registers, not shared bytes).

Slot byte layout (offsets within a slot; see docs/architecture.md):

  TX:  0..8  address handle   8..12 cmd_type_len  12..16 olinfo_status  16 status
  RX:  0..8  packet handle    8..16 header handle
      16..18 packet_info  18..22 rss  22..24 status_error  24..26 vlan_tag
      26..28 length

Handles are encoded on-ring as region:u16 | offset:u32 | length:u16, little
endian.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional

from .errors import (
    AddressNotShared,
    BadCapacity,
    NotShared,
    OutOfBounds,
    QuarantinedArena,
    RingFull,
)
from .mem import Handle, MemorySystem, RegionKind, Side

SLOT_SIZE = 32
DEFAULT_CAPACITY = 256

MASK32 = 0xFFFFFFFF

_HANDLE_FMT = struct.Struct("<HIH")

# TX slot field offsets
TX_OFF_ADDR = 0
TX_OFF_CMD = 8
TX_OFF_OLINFO = 12
TX_OFF_STATUS = 16

# RX slot field offsets
RX_OFF_PKT = 0
RX_OFF_HDR = 8
RX_OFF_INFO = 16
RX_OFF_RSS = 18
RX_OFF_STATUS = 22
RX_OFF_VLAN = 24
RX_OFF_LEN = 26

# TX status byte values
TX_STATUS_INFLIGHT = 0
TX_STATUS_FREE = 1

# RX status_error bits
RX_STATUS_READY = 0x0001
RX_STATUS_ERROR = 0x0002

# cmd_type_len: low 16 bits carry the frame length, upper bits are flags
TX_CMD_LEN_MASK = 0xFFFF
TX_CMD_EOP = 1 << 24


def encode_handle(h: Handle) -> bytes:
    if not (0 <= h.region <= 0xFFFF and 0 <= h.offset <= 0xFFFFFFFF and 0 <= h.length <= 0xFFFF):
        raise OutOfBounds(f"handle {h} does not fit the 8-byte ring encoding")
    return _HANDLE_FMT.pack(h.region, h.offset, h.length)


def decode_handle(raw: bytes) -> Handle:
    region, offset, length = _HANDLE_FMT.unpack(raw)
    return Handle(region, offset, length)


class Direction(enum.Enum):
    TX = "tx"
    RX = "rx"


@dataclass(frozen=True)
class TxDescriptor:
    address: Handle
    cmd_type_len: int
    olinfo_status: int


@dataclass(frozen=True)
class TxView:
    """What the device sees when it fetches a TX slot."""

    slot: int
    address: Handle
    cmd_type_len: int
    olinfo_status: int


@dataclass(frozen=True)
class RxView:
    slot: int
    packet_address: Handle
    header_address: Handle


@dataclass(frozen=True)
class RxHarvest:
    """One harvested RX writeback, post-clamp. suspect means the device-claimed
    metadata failed validation (oversized length or error bit)."""

    slot: int
    packet_address: Handle
    packet_info: int
    rss: int
    status_error: int
    vlan_tag: int
    length: int
    suspect: bool


class DescriptorRing:
    def __init__(self, mem: MemorySystem, backing: Handle, capacity: int, direction: Direction):
        if capacity < 2 or capacity & (capacity - 1):
            raise BadCapacity(f"capacity must be a power of two >= 2, got {capacity}")
        arena = mem.arena(backing.region)
        if arena.kind is not RegionKind.SHARED or not mem.shared.is_registered(arena.id):
            raise NotShared("ring backing must be in a registered shared arena")
        if not mem.is_reusable(arena):
            raise QuarantinedArena(f"arena {arena.id} awaits zero_and_release")
        if backing.length < capacity * SLOT_SIZE or not mem.contains(arena, backing):
            raise BadCapacity(
                f"backing of {backing.length} B cannot hold {capacity} slots of {SLOT_SIZE} B"
            )
        self.mem = mem
        self.backing = backing
        self.capacity = capacity
        self.direction = direction
        self.head = 0  # VM produce counter, free-running
        self.tail = 0  # VM reclaim counter, free-running
        self.device_next = 0  # device fetch cursor, free-running

        cap = capacity
        # VM-private shadow state; pointers and progress never live in shared
        # memory, only descriptor bytes do
        self._seen_free = [False] * cap
        self._posted_rx: list[Optional[tuple[Handle, Handle]]] = [None] * cap
        # device-private completion bookkeeping (models writeback ordering)
        self._completion_seq: dict[int, int] = {}
        self._next_completion = 0
        self._device_done = [False] * cap
        self.violations: list[tuple[str, int]] = []

        self._init_slots()

    # -- construction helpers ---------------------------------------------

    def _init_slots(self) -> None:
        zero = bytes(SLOT_SIZE)
        for slot in range(self.capacity):
            self.mem.write(self._slot(slot), Side.VM, zero)
            if self.direction is Direction.TX:
                self.mem.write(self._field(slot, TX_OFF_STATUS, 1), Side.VM, bytes([TX_STATUS_FREE]))

    def _slot(self, slot: int) -> Handle:
        return self.backing.sub(slot * SLOT_SIZE, SLOT_SIZE)

    def _field(self, slot: int, off: int, size: int) -> Handle:
        return self.backing.sub(slot * SLOT_SIZE + off, size)

    def _mask(self, counter: int) -> int:
        return counter & (self.capacity - 1)

    def occupancy(self) -> int:
        return (self.head - self.tail) & MASK32

    # -- VM side: TX -------------------------------------------------------

    def vm_post_tx(self, desc: TxDescriptor) -> int:
        assert self.direction is Direction.TX
        if self.occupancy() == self.capacity:
            raise RingFull(f"tx ring full at capacity {self.capacity}")
        if not self.mem.is_device_accessible(desc.address.region) or not self.mem.handle_in_kind(
            desc.address, RegionKind.SHARED
        ):
            raise AddressNotShared(f"tx address {desc.address} not in a registered shared arena")
        slot = self._mask(self.head)
        self.mem.write(self._field(slot, TX_OFF_ADDR, 8), Side.VM, encode_handle(desc.address))
        self.mem.write(
            self._field(slot, TX_OFF_CMD, 4), Side.VM, struct.pack("<I", desc.cmd_type_len & MASK32)
        )
        self.mem.write(
            self._field(slot, TX_OFF_OLINFO, 4),
            Side.VM,
            struct.pack("<I", desc.olinfo_status & MASK32),
        )
        self.mem.write(self._field(slot, TX_OFF_STATUS, 1), Side.VM, bytes([TX_STATUS_INFLIGHT]))
        self._seen_free[slot] = False
        self._device_done[slot] = False
        self._completion_seq.pop(slot, None)
        self.head = (self.head + 1) & MASK32
        return slot

    def vm_poll_tx(self) -> list[int]:
        """Return slots newly observed free, in device completion order.

        Reads only status bytes, and only for slots not already seen free;
        ring space is reclaimed in ring order over the contiguous freed
        prefix.
        """
        assert self.direction is Direction.TX
        newly: list[int] = []
        idx = self.tail
        while idx != self.head:
            slot = self._mask(idx)
            if not self._seen_free[slot]:
                raw = self.mem.read(self._field(slot, TX_OFF_STATUS, 1), Side.VM)
                if raw[0] == TX_STATUS_FREE:
                    self._seen_free[slot] = True
                    newly.append(slot)
            idx = (idx + 1) & MASK32
        newly.sort(key=lambda s: self._completion_seq.get(s, 1 << 62))
        while self.tail != self.head and self._seen_free[self._mask(self.tail)]:
            self._seen_free[self._mask(self.tail)] = False
            self.tail = (self.tail + 1) & MASK32
        return newly

    # -- VM side: RX -------------------------------------------------------

    def vm_post_rx_buffer(self, packet: Handle, header: Optional[Handle] = None) -> int:
        assert self.direction is Direction.RX
        if self.occupancy() == self.capacity:
            raise RingFull(f"rx ring full at capacity {self.capacity}")
        if not self.mem.is_device_accessible(packet.region) or not self.mem.handle_in_kind(
            packet, RegionKind.SHARED
        ):
            raise AddressNotShared(f"rx buffer {packet} not in a registered shared arena")
        if header is None:
            header = packet  # no header split in this driver model
        slot = self._mask(self.head)
        self.mem.write(self._field(slot, RX_OFF_PKT, 8), Side.VM, encode_handle(packet))
        self.mem.write(self._field(slot, RX_OFF_HDR, 8), Side.VM, encode_handle(header))
        # scrub stale writeback so a fresh slot never looks ready
        self.mem.write(self._field(slot, RX_OFF_INFO, 16), Side.VM, bytes(16))
        self._posted_rx[slot] = (packet, header)
        self._device_done[slot] = False
        self.head = (self.head + 1) & MASK32
        return slot

    def vm_harvest_rx(self, max_count: int) -> list[RxHarvest]:
        """Harvest up to max_count ready slots in ring order.

        Each writeback field is read exactly once per harvested slot; the
        device-claimed length is clamped to the posted buffer size and the
        record is flagged suspect if the claim was out of range or the error
        bit is set. A harvested slot is released and never read again until
        it is reposted.
        """
        assert self.direction is Direction.RX
        out: list[RxHarvest] = []
        while len(out) < max_count and self.tail != self.head:
            slot = self._mask(self.tail)
            status = struct.unpack(
                "<H", self.mem.read(self._field(slot, RX_OFF_STATUS, 2), Side.VM)
            )[0]
            if not status & RX_STATUS_READY:
                break
            info = struct.unpack("<H", self.mem.read(self._field(slot, RX_OFF_INFO, 2), Side.VM))[0]
            rss = struct.unpack("<I", self.mem.read(self._field(slot, RX_OFF_RSS, 4), Side.VM))[0]
            vlan = struct.unpack("<H", self.mem.read(self._field(slot, RX_OFF_VLAN, 2), Side.VM))[0]
            length = struct.unpack(
                "<H", self.mem.read(self._field(slot, RX_OFF_LEN, 2), Side.VM)
            )[0]
            posted = self._posted_rx[slot]
            assert posted is not None, "ready slot without a posted buffer"
            packet, _header = posted
            suspect = False
            if length > packet.length:
                length = packet.length
                suspect = True
            if status & RX_STATUS_ERROR:
                suspect = True
            out.append(
                RxHarvest(
                    slot=slot,
                    packet_address=packet,
                    packet_info=info,
                    rss=rss,
                    status_error=status,
                    vlan_tag=vlan,
                    length=length,
                    suspect=suspect,
                )
            )
            self._posted_rx[slot] = None
            self.tail = (self.tail + 1) & MASK32
        return out

    # -- device side -------------------------------------------------------

    def device_fetch(self) -> list[TxView] | list[RxView]:
        """Read VM-written fields of every not-yet-fetched slot, in order.

        Raises DeviceAccessDenied if the ring's arena is not device
        accessible; the caller (the simulated NIC) records that as a
        violation instead of crashing.
        """
        views: list = []
        while self.device_next != self.head:
            slot = self._mask(self.device_next)
            if self.direction is Direction.TX:
                addr = decode_handle(self.mem.read(self._field(slot, TX_OFF_ADDR, 8), Side.DEVICE))
                cmd = struct.unpack(
                    "<I", self.mem.read(self._field(slot, TX_OFF_CMD, 4), Side.DEVICE)
                )[0]
                olinfo = struct.unpack(
                    "<I", self.mem.read(self._field(slot, TX_OFF_OLINFO, 4), Side.DEVICE)
                )[0]
                views.append(TxView(slot, addr, cmd, olinfo))
            else:
                pkt = decode_handle(self.mem.read(self._field(slot, RX_OFF_PKT, 8), Side.DEVICE))
                hdr = decode_handle(self.mem.read(self._field(slot, RX_OFF_HDR, 8), Side.DEVICE))
                views.append(RxView(slot, pkt, hdr))
            self.device_next = (self.device_next + 1) & MASK32
        return views

    def _writeback_window_ok(self, slot: int) -> bool:
        # slot must be fetched, not yet completed, and still in flight
        idx = self.tail
        while idx != self.device_next:
            if self._mask(idx) == slot:
                return not self._device_done[slot]
            idx = (idx + 1) & MASK32
        return False

    def device_writeback_tx(self, slot: int) -> bool:
        """Mark a TX slot complete. Returns False (and logs) for a replayed or
        out-of-window completion; the byte write still happens because shared
        memory cannot be defended, only distrusted."""
        assert self.direction is Direction.TX
        ok = self._writeback_window_ok(slot)
        self.mem.write(self._field(slot, TX_OFF_STATUS, 1), Side.DEVICE, bytes([TX_STATUS_FREE]))
        if ok:
            self._device_done[slot] = True
            self._completion_seq[slot] = self._next_completion
            self._next_completion += 1
        else:
            self.violations.append(("replayed_tx_completion", slot))
        return ok

    def device_writeback_rx(
        self,
        slot: int,
        length: int,
        packet_info: int = 0,
        rss: int = 0,
        vlan_tag: int = 0,
        status_error: int = RX_STATUS_READY,
    ) -> bool:
        assert self.direction is Direction.RX
        ok = self._writeback_window_ok(slot)
        self.mem.write(self._field(slot, RX_OFF_INFO, 2), Side.DEVICE, struct.pack("<H", packet_info & 0xFFFF))
        self.mem.write(self._field(slot, RX_OFF_RSS, 4), Side.DEVICE, struct.pack("<I", rss & MASK32))
        self.mem.write(self._field(slot, RX_OFF_VLAN, 2), Side.DEVICE, struct.pack("<H", vlan_tag & 0xFFFF))
        self.mem.write(self._field(slot, RX_OFF_LEN, 2), Side.DEVICE, struct.pack("<H", length & 0xFFFF))
        # status goes last so a ready flag never precedes its payload fields
        self.mem.write(self._field(slot, RX_OFF_STATUS, 2), Side.DEVICE, struct.pack("<H", status_error & 0xFFFF))
        if ok:
            self._device_done[slot] = True
        else:
            self.violations.append(("replayed_rx_writeback", slot))
        return ok


def ring_new(
    mem: MemorySystem,
    backing: Handle,
    capacity: int = DEFAULT_CAPACITY,
    direction: Direction = Direction.TX,
) -> DescriptorRing:
    return DescriptorRing(mem, backing, capacity, direction)
