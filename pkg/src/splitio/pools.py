"""Packet buffer pools and the port fast path.

Three pools back every port:

* shared   - metadata and data rooms in a registered shared arena; this is the
             only packet memory the device ever sees.
* temporary - metadata in private memory, data handles pre-bound 1:1 to the
             shared pool's data rooms; the driver posts and reclaims these.
* shadow   - metadata and data both private; the only buffers the application
             ever holds.

The fast path performs exactly one bulk copy per packet per direction:
RX copies shared -> shadow after harvest (copy before anything parses the
bytes), TX copies shadow -> temporary right before posting. Buffer metadata,
free lists, and ring progress never live in shared memory.

Buffer metadata occupies a 128-byte block per buffer:

   0..2  msg_type   2..4 flags   4..8 pkt_len   8..16 data handle
  16..20 next index (0xFFFFFFFF = none)   20..24 rss   24..64 reserved
  64..128 app-private area (64 B)
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

from .errors import (
    ArenaTooSmall,
    ForeignBuffer,
    NotShared,
    OversizePacket,
    PoolExhausted,
    QuarantinedArena,
    RingFull,
)
from .mem import Arena, Handle, MemorySystem, RegionKind, Side
from . import ring as ringmod
from .ring import DescriptorRing, Direction, TxDescriptor, encode_handle

METADATA_OVERHEAD = 128
APP_PRIVATE_SIZE = 64
DEFAULT_MBUF_SIZE = 2176
DEFAULT_MBUF_COUNT = 8192

META_OFF_MSG_TYPE = 0
META_OFF_FLAGS = 2
META_OFF_PKT_LEN = 4
META_OFF_DATA = 8
META_OFF_NEXT = 16
META_OFF_RSS = 20
META_OFF_APP = APP_PRIVATE_SIZE

META_NEXT_NONE = 0xFFFFFFFF

FLAG_SUSPECT = 0x0001


class PoolKind(enum.Enum):
    SHARED = "shared"
    TEMPORARY = "temporary"
    SHADOW = "shadow"


@dataclass(frozen=True)
class PoolConfig:
    mbuf_count: int = DEFAULT_MBUF_COUNT
    mbuf_size: int = DEFAULT_MBUF_SIZE
    shared_equals_shadow: bool = True
    shadow_count: Optional[int] = None  # only consulted when shared_equals_shadow=False

    @property
    def data_room(self) -> int:
        return self.mbuf_size - METADATA_OVERHEAD

    def effective_shadow_count(self) -> int:
        if self.shared_equals_shadow or self.shadow_count is None:
            return self.mbuf_count
        return self.shadow_count


def pool_memory_footprint(cfg: PoolConfig) -> dict[str, int]:
    """Bytes each pool occupies. Pure arithmetic, no allocation.

    The shared and shadow pools carry metadata plus data rooms; the temporary
    pool carries metadata only because its data rooms are the shared pool's.
    """
    shared = cfg.mbuf_count * cfg.mbuf_size
    shadow = cfg.effective_shadow_count() * cfg.mbuf_size
    temporary = cfg.mbuf_count * METADATA_OVERHEAD
    return {
        "shared": shared,
        "temporary": temporary,
        "shadow": shadow,
        "total": shared + temporary + shadow,
    }


class PacketBuffer:
    """Handle pair (meta, data) for one buffer in one pool. Field accessors go
    through the memory system so metadata physically lives in its arena."""

    __slots__ = ("pool", "index")

    def __init__(self, pool: "PacketPool", index: int):
        self.pool = pool
        self.index = index

    @property
    def meta(self) -> Handle:
        return self.pool.meta_handle(self.index)

    @property
    def data(self) -> Handle:
        return self.pool.data_handle(self.index)

    @property
    def data_room(self) -> int:
        return self.pool.data_room

    @property
    def pool_kind(self) -> PoolKind:
        return self.pool.kind

    def _read_meta(self, off: int, size: int) -> bytes:
        return self.pool.mem.read(self.meta.sub(off, size), Side.VM)

    def _write_meta(self, off: int, data: bytes) -> None:
        self.pool.mem.write(self.meta.sub(off, len(data)), Side.VM, data)

    @property
    def pkt_len(self) -> int:
        return struct.unpack("<I", self._read_meta(META_OFF_PKT_LEN, 4))[0]

    @pkt_len.setter
    def pkt_len(self, value: int) -> None:
        self._write_meta(META_OFF_PKT_LEN, struct.pack("<I", value))

    @property
    def msg_type(self) -> int:
        return struct.unpack("<H", self._read_meta(META_OFF_MSG_TYPE, 2))[0]

    @msg_type.setter
    def msg_type(self, value: int) -> None:
        self._write_meta(META_OFF_MSG_TYPE, struct.pack("<H", value & 0xFFFF))

    @property
    def flags(self) -> int:
        return struct.unpack("<H", self._read_meta(META_OFF_FLAGS, 2))[0]

    @flags.setter
    def flags(self, value: int) -> None:
        self._write_meta(META_OFF_FLAGS, struct.pack("<H", value & 0xFFFF))

    @property
    def rss(self) -> int:
        return struct.unpack("<I", self._read_meta(META_OFF_RSS, 4))[0]

    @rss.setter
    def rss(self, value: int) -> None:
        self._write_meta(META_OFF_RSS, struct.pack("<I", value & 0xFFFFFFFF))

    @property
    def next_index(self) -> Optional[int]:
        raw = struct.unpack("<I", self._read_meta(META_OFF_NEXT, 4))[0]
        return None if raw == META_NEXT_NONE else raw

    def chain(self, nxt: Optional["PacketBuffer"]) -> None:
        if nxt is not None and nxt.pool is not self.pool:
            raise ForeignBuffer("segments of a chain must come from one pool")
        raw = META_NEXT_NONE if nxt is None else nxt.index
        self._write_meta(META_OFF_NEXT, struct.pack("<I", raw))

    def segments(self) -> Iterator["PacketBuffer"]:
        buf: Optional[PacketBuffer] = self
        hops = 0
        while buf is not None:
            yield buf
            nxt = buf.next_index
            buf = PacketBuffer(self.pool, nxt) if nxt is not None else None
            hops += 1
            if hops > self.pool.count:
                raise OversizePacket("segment chain longer than the pool")

    def total_len(self) -> int:
        return sum(seg.pkt_len for seg in self.segments())

    def write_app_private(self, data: bytes) -> None:
        if len(data) > APP_PRIVATE_SIZE:
            raise OversizePacket(f"app-private area is {APP_PRIVATE_SIZE} B")
        self._write_meta(META_OFF_APP, data)

    def read_app_private(self) -> bytes:
        return self._read_meta(META_OFF_APP, APP_PRIVATE_SIZE)

    def write_data(self, payload: bytes) -> None:
        """App helper: set payload and pkt_len in one go."""
        if len(payload) > self.data_room:
            raise OversizePacket(f"{len(payload)} B into a {self.data_room} B room")
        self.pool.mem.write(self.data.sub(0, len(payload)), Side.VM, payload)
        self.pkt_len = len(payload)

    def read_data(self) -> bytes:
        return self.pool.mem.read(self.data.sub(0, self.pkt_len), Side.VM)


class PacketPool:
    """Fixed-size buffer pool with a LIFO free list.

    The free list and allocation state are Python-side (private) state; only
    buffer bytes live in the arena.
    """

    def __init__(
        self,
        mem: MemorySystem,
        kind: PoolKind,
        count: int,
        data_room: int,
        meta_slab: Handle,
        data_slab: Optional[Handle],
        bound_data: Optional[list[Handle]] = None,
        canary: Optional[bytes] = None,
    ):
        self.mem = mem
        self.kind = kind
        self.count = count
        self.data_room = data_room
        self.meta_slab = meta_slab
        self.data_slab = data_slab
        self._bound_data = bound_data
        self.canary = canary
        self._free: list[int] = list(range(count - 1, -1, -1))
        self._is_free = [True] * count
        self._init_meta_slab()

    def _init_meta_slab(self) -> None:
        """Build the whole metadata slab locally and write it in one call;
        per-buffer writes are too slow for six-figure pool counts."""
        if self.canary is not None and self.kind is not PoolKind.SHARED:
            app_fill = (self.canary * (APP_PRIVATE_SIZE // len(self.canary) + 1))[:APP_PRIVATE_SIZE]
        else:
            app_fill = bytes(APP_PRIVATE_SIZE)
        slab = bytearray(self.count * METADATA_OVERHEAD)
        for i in range(self.count):
            base = i * METADATA_OVERHEAD
            slab[base + META_OFF_DATA : base + META_OFF_DATA + 8] = encode_handle(self.data_handle(i))
            struct.pack_into("<I", slab, base + META_OFF_NEXT, META_NEXT_NONE)
            slab[base + META_OFF_APP : base + META_OFF_APP + APP_PRIVATE_SIZE] = app_fill
        self.mem.write(self.meta_slab, Side.VM, bytes(slab))

    def _scrub_app_private(self, index: int) -> None:
        if self.canary is not None and self.kind is not PoolKind.SHARED:
            fill = (self.canary * (APP_PRIVATE_SIZE // len(self.canary) + 1))[:APP_PRIVATE_SIZE]
        else:
            fill = bytes(APP_PRIVATE_SIZE)
        self.mem.write(self.meta_handle(index).sub(META_OFF_APP, APP_PRIVATE_SIZE), Side.VM, fill)

    def meta_handle(self, index: int) -> Handle:
        return self.meta_slab.sub(index * METADATA_OVERHEAD, METADATA_OVERHEAD)

    def data_handle(self, index: int) -> Handle:
        if self._bound_data is not None:
            return self._bound_data[index]
        assert self.data_slab is not None
        return self.data_slab.sub(index * self.data_room, self.data_room)

    def remaining(self) -> int:
        return len(self._free)

    def alloc(self) -> PacketBuffer:
        if not self._free:
            raise PoolExhausted(f"{self.kind.value} pool empty")
        index = self._free.pop()
        self._is_free[index] = False
        buf = PacketBuffer(self, index)
        buf.pkt_len = 0
        buf.flags = 0
        buf.chain(None)
        return buf

    def free(self, buf: PacketBuffer) -> None:
        if buf.pool is not self:
            raise ForeignBuffer("buffer belongs to another pool")
        if self._is_free[buf.index]:
            raise ForeignBuffer(f"double free of buffer {buf.index}")
        if self.kind is PoolKind.SHADOW:
            # cheap scrub: the app-private area may hold secrets
            self._scrub_app_private(buf.index)
        self._is_free[buf.index] = True
        self._free.append(buf.index)

    def zero_slabs(self) -> None:
        self.mem.write(self.meta_slab, Side.VM, bytes(self.meta_slab.length))
        if self.data_slab is not None:
            self.mem.write(self.data_slab, Side.VM, bytes(self.data_slab.length))


@dataclass
class PoolSet:
    shared: PacketPool
    temporary: PacketPool
    shadow: PacketPool


def init_pools(
    mem: MemorySystem,
    cfg: PoolConfig,
    shared_arena: Arena,
    private_arena: Arena,
    shared_offset: int = 0,
    private_offset: int = 0,
    canary: Optional[bytes] = None,
) -> PoolSet:
    """Carve the three pools out of their arenas.

    Layout: shared arena gets [meta slab | data slab] for the shared pool;
    the private arena gets [shadow meta | shadow data | temporary meta].
    Temporary data handles are pre-bound 1:1 to the shared data rooms and
    never rebound.
    """
    if cfg.mbuf_size < METADATA_OVERHEAD + 64:
        raise ArenaTooSmall(
            f"mbuf_size {cfg.mbuf_size} below metadata overhead {METADATA_OVERHEAD} + 64"
        )
    if cfg.mbuf_count < 1:
        raise ArenaTooSmall("mbuf_count must be at least 1")
    if shared_arena.kind is not RegionKind.SHARED or not mem.shared.is_registered(shared_arena.id):
        raise NotShared("shared pool arena must be a registered shared arena")
    if private_arena.kind is not RegionKind.PRIVATE:
        raise NotShared("shadow/temporary pools must live in a private arena")
    if not mem.is_reusable(shared_arena):
        raise QuarantinedArena(f"arena {shared_arena.id} awaits zero_and_release")

    count = cfg.mbuf_count
    shadow_count = cfg.effective_shadow_count()
    room = cfg.data_room

    need_shared = count * cfg.mbuf_size
    if shared_offset + need_shared > shared_arena.size:
        raise ArenaTooSmall(
            f"shared arena of {shared_arena.size} B cannot hold {need_shared} B of pool"
        )
    need_private = shadow_count * cfg.mbuf_size + count * METADATA_OVERHEAD
    if private_offset + need_private > private_arena.size:
        raise ArenaTooSmall(
            f"private arena of {private_arena.size} B cannot hold {need_private} B of pools"
        )

    off = shared_offset
    shared_meta = Handle(shared_arena.id, off, count * METADATA_OVERHEAD)
    off += shared_meta.length
    shared_data = Handle(shared_arena.id, off, count * room)

    poff = private_offset
    shadow_meta = Handle(private_arena.id, poff, shadow_count * METADATA_OVERHEAD)
    poff += shadow_meta.length
    shadow_data = Handle(private_arena.id, poff, shadow_count * room)
    poff += shadow_data.length
    temp_meta = Handle(private_arena.id, poff, count * METADATA_OVERHEAD)

    shared_pool = PacketPool(mem, PoolKind.SHARED, count, room, shared_meta, shared_data)
    shadow_pool = PacketPool(
        mem, PoolKind.SHADOW, shadow_count, room, shadow_meta, shadow_data, canary=canary
    )
    temp_pool = PacketPool(
        mem,
        PoolKind.TEMPORARY,
        count,
        room,
        temp_meta,
        None,
        bound_data=[shared_pool.data_handle(i) for i in range(count)],
        canary=canary,
    )
    return PoolSet(shared=shared_pool, temporary=temp_pool, shadow=shadow_pool)


class PortContext:
    """One port: a TX/RX ring pair, the three pools, and flow counters.

    Applications interact through alloc_tx_buffer / tx_burst / rx_burst /
    free_buffer and only ever hold shadow (private) buffers.
    """

    def __init__(
        self,
        mem: MemorySystem,
        cfg: PoolConfig,
        pools: PoolSet,
        tx_ring: DescriptorRing,
        rx_ring: DescriptorRing,
        drop_suspect: bool = True,
    ):
        self.mem = mem
        self.cfg = cfg
        self.pools = pools
        self.tx_ring = tx_ring
        self.rx_ring = rx_ring
        self.drop_suspect = drop_suspect
        self.counters: dict[str, int] = {
            "copies_rx": 0,
            "copies_tx": 0,
            "bytes_copied": 0,
            "drops": 0,
            "metadata_suspect": 0,
            "auth_fail": 0,
            "aes_ops": 0,  # AES executed by the application worker itself
        }
        self._tx_slot_temp: dict[int, PacketBuffer] = {}
        self._rx_slot_temp: dict[int, PacketBuffer] = {}
        self.crypto_worker = None  # set by inline_attach
        self.destroyed = False

    # -- setup -------------------------------------------------------------

    def arm_rx(self, slots: int) -> int:
        """Post up to `slots` temporary buffers to the RX ring."""
        armed = 0
        for _ in range(slots):
            if self.rx_ring.occupancy() == self.rx_ring.capacity:
                break
            try:
                temp = self.pools.temporary.alloc()
            except PoolExhausted:
                break
            slot = self.rx_ring.vm_post_rx_buffer(temp.data)
            self._rx_slot_temp[slot] = temp
            armed += 1
        return armed

    def _repost_rx(self, temp: PacketBuffer) -> None:
        if self.rx_ring.occupancy() < self.rx_ring.capacity:
            slot = self.rx_ring.vm_post_rx_buffer(temp.data)
            self._rx_slot_temp[slot] = temp
        else:
            self.pools.temporary.free(temp)

    # -- fast path ---------------------------------------------------------

    def rx_burst(self, max_count: int = 32) -> list[PacketBuffer]:
        """Harvest ready RX slots, bounce each payload into a private shadow
        buffer (the single RX copy), repost the shared-side buffer, and hand
        the shadow buffers to the caller."""
        out: list[PacketBuffer] = []
        for rec in self.rx_ring.vm_harvest_rx(max_count):
            temp = self._rx_slot_temp.pop(rec.slot)
            if rec.suspect:
                self.counters["metadata_suspect"] += 1
                if self.drop_suspect:
                    self.counters["drops"] += 1
                    self._repost_rx(temp)
                    continue
            try:
                shadow = self.pools.shadow.alloc()
            except PoolExhausted:
                self.counters["drops"] += 1
                self._repost_rx(temp)
                continue
            payload = self.mem.read(temp.data.sub(0, rec.length), Side.VM)
            self.mem.write(shadow.data.sub(0, rec.length), Side.VM, payload)
            self.counters["copies_rx"] += 1
            self.counters["bytes_copied"] += rec.length
            shadow.pkt_len = rec.length
            shadow.msg_type = rec.packet_info
            shadow.rss = rec.rss
            if rec.suspect:
                shadow.flags = shadow.flags | FLAG_SUSPECT
            self._repost_rx(temp)
            out.append(shadow)
        return out

    def tx_burst(self, bufs: list[PacketBuffer]) -> int:
        """Queue shadow buffers for transmit. Each accepted packet is copied
        once (shadow -> temporary, flattening any chain) and its shadow
        buffer(s) freed; returns the length of the accepted prefix."""
        self.reclaim_tx()
        accepted = 0
        for buf in bufs:
            if buf.pool is not self.pools.shadow:
                raise ForeignBuffer("tx_burst takes shadow-pool buffers")
            total = buf.total_len()
            if total > self.cfg.data_room:
                raise OversizePacket(f"{total} B exceeds {self.cfg.data_room} B data room")
            try:
                temp = self.pools.temporary.alloc()
            except PoolExhausted:
                break
            segments = list(buf.segments())
            payload = b"".join(self.mem.read(s.data.sub(0, s.pkt_len), Side.VM) for s in segments)
            try:
                self.mem.write(temp.data.sub(0, total), Side.VM, payload)
                slot = self.tx_ring.vm_post_tx(
                    TxDescriptor(
                        address=temp.data.sub(0, total),
                        cmd_type_len=(total & ringmod.TX_CMD_LEN_MASK) | ringmod.TX_CMD_EOP,
                        olinfo_status=0,
                    )
                )
            except RingFull:
                self.pools.temporary.free(temp)
                break
            self._tx_slot_temp[slot] = temp
            self.counters["copies_tx"] += 1
            self.counters["bytes_copied"] += total
            for seg in segments:
                self.pools.shadow.free(seg)
            accepted += 1
        return accepted

    def reclaim_tx(self) -> int:
        """Return completed temporary buffers to their pool."""
        done = 0
        for slot in self.tx_ring.vm_poll_tx():
            temp = self._tx_slot_temp.pop(slot, None)
            if temp is not None:
                self.pools.temporary.free(temp)
                done += 1
        return done

    # -- app-facing buffer management -------------------------------------

    def alloc_tx_buffer(self) -> PacketBuffer:
        return self.pools.shadow.alloc()

    def free_buffer(self, buf: PacketBuffer) -> None:
        self.pools.shadow.free(buf)

    def counters_snapshot(self) -> dict[str, int]:
        return dict(self.counters)

    # -- teardown ----------------------------------------------------------

    def destroy(self, graceful: bool = True) -> None:
        """Graceful teardown zeroes the port's shared bytes immediately.
        A non-graceful one (crash model) quarantines the shared arena: its
        pages stay unreusable until zero_and_release scrubs them."""
        if self.destroyed:
            return
        self.destroyed = True
        shared_region = self.pools.shared.meta_slab.region
        if graceful:
            self.pools.shared.zero_slabs()
            self.mem.write(self.tx_ring.backing, Side.VM, bytes(self.tx_ring.backing.length))
            self.mem.write(self.rx_ring.backing, Side.VM, bytes(self.rx_ring.backing.length))
        else:
            self.mem.quarantined.add(shared_region)


def port_new(
    mem: MemorySystem,
    cfg: PoolConfig,
    ring_capacity: int = ringmod.DEFAULT_CAPACITY,
    rx_fill: Optional[int] = None,
    drop_suspect: bool = True,
    canary: Optional[bytes] = None,
) -> PortContext:
    """Allocate arenas, pools, and rings for one port and arm its RX side."""
    pool_bytes = cfg.mbuf_count * cfg.mbuf_size
    ring_bytes = ring_capacity * ringmod.SLOT_SIZE
    shared_arena = mem.create_arena(RegionKind.SHARED, pool_bytes + 2 * ring_bytes)
    mem.shared.register(shared_arena)
    private_size = (
        cfg.effective_shadow_count() * cfg.mbuf_size + cfg.mbuf_count * METADATA_OVERHEAD
    )
    private_arena = mem.create_arena(RegionKind.PRIVATE, private_size)

    pools = init_pools(mem, cfg, shared_arena, private_arena, canary=canary)
    tx_backing = Handle(shared_arena.id, pool_bytes, ring_bytes)
    rx_backing = Handle(shared_arena.id, pool_bytes + ring_bytes, ring_bytes)
    tx_ring = DescriptorRing(mem, tx_backing, ring_capacity, Direction.TX)
    rx_ring = DescriptorRing(mem, rx_backing, ring_capacity, Direction.RX)

    port = PortContext(mem, cfg, pools, tx_ring, rx_ring, drop_suspect=drop_suspect)
    if rx_fill is None:
        rx_fill = min(ring_capacity, max(1, cfg.mbuf_count // 2))
    port.arm_rx(rx_fill)
    return port
