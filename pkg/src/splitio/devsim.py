"""Simulated NIC, link model, and adversary machinery.

The NIC is deliberately written as an untrusted actor: every byte it touches
goes through MemorySystem with Side.DEVICE, so private memory is physically
out of its reach and any attempt is recorded and denied rather than crashing
the run. In adversarial mode the NIC additionally executes an AdversaryPlan:
a scripted sequence of tampering, forgery, replay, drop, and corruption
actions with nanosecond trigger times.

Determinism: all randomness (jitter, loss) comes from per-link Splitmix64
streams; per transmitted packet the link draws jitter first, then loss, so a
trace can be replayed draw-for-draw from the seed.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import BadPlan, DeviceAccessDenied, SplitioError, SymmetryRequired
from .mem import Handle, MemorySystem, RegionKind, Side
from .pools import PacketBuffer, PoolConfig, PortContext, port_new
from .prng import Splitmix64
from .ring import Direction, RxView, TxView


@dataclass(frozen=True)
class LinkModel:
    """One direction of a link. Delay for an n-byte frame is
    base_latency_ns + n * per_byte_ns + jitter, jitter uniform in
    [0, jitter_ns]."""

    base_latency_ns: int = 1000
    per_byte_ns: float = 0.0
    jitter_ns: int = 0
    jitter_seed: int = 0
    loss_rate: float = 0.0

    def delay_ns(self, length: int, jitter: int) -> int:
        return int(self.base_latency_ns + length * self.per_byte_ns) + jitter


class ActionKind(enum.Enum):
    TAMPER_SHARED = "tamper_shared"
    FORGE_WRITEBACK = "forge_writeback"
    FORGE_ADDRESS = "forge_address"
    REPLAY_DESCRIPTOR = "replay_descriptor"
    DROP_PACKET = "drop_packet"
    CORRUPT_CIPHERTEXT = "corrupt_ciphertext"


@dataclass
class AdversaryAction:
    kind: ActionKind
    when: int = 0
    # which endpoint's device side performs the action
    target: str = "a"
    # tamper_shared / forge_address
    region: int = 0
    offset: int = 0
    data: bytes = b""
    length: int = 0
    # forge_writeback / replay_descriptor
    slot: int = 0
    status_error: Optional[int] = None
    # drop_packet
    count: int = 1
    # bookkeeping filled in during the run
    executed: bool = False


@dataclass
class AdversaryPlan:
    actions: list[AdversaryAction] = field(default_factory=list)

    @staticmethod
    def parse(text: str) -> "AdversaryPlan":
        """Line format: `<action> key=value ...`. Unknown actions or bad
        values raise BadPlan. Blank lines and #-comments are skipped."""
        actions = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                kind = ActionKind(parts[0])
            except ValueError:
                raise BadPlan(f"line {lineno}: unknown action {parts[0]!r}") from None
            kwargs: dict = {}
            for tok in parts[1:]:
                if "=" not in tok:
                    raise BadPlan(f"line {lineno}: expected key=value, got {tok!r}")
                key, val = tok.split("=", 1)
                try:
                    if key == "data":
                        kwargs[key] = bytes.fromhex(val)
                    elif key == "target":
                        if val not in ("a", "b"):
                            raise BadPlan(f"line {lineno}: target must be a or b")
                        kwargs[key] = val
                    elif key in ("when", "region", "offset", "length", "slot", "count", "status_error"):
                        kwargs[key] = int(val, 0)
                    else:
                        raise BadPlan(f"line {lineno}: unknown key {key!r}")
                except ValueError:
                    raise BadPlan(f"line {lineno}: bad value for {key}: {val!r}") from None
            try:
                actions.append(AdversaryAction(kind=kind, **kwargs))
            except TypeError:
                raise BadPlan(f"line {lineno}: keys do not fit action {kind.value}") from None
        return AdversaryPlan(actions)

    @staticmethod
    def load(path: str) -> "AdversaryPlan":
        with open(path, "r", encoding="utf-8") as fh:
            return AdversaryPlan.parse(fh.read())


class Outcome(enum.Enum):
    NO_EFFECT = "no_effect"
    REJECTED = "rejected"
    DELIVERED_CORRUPTED = "delivered_corrupted"


@dataclass
class _FlightPacket:
    arrival: int
    seq: int
    payload: bytes

    def __lt__(self, other: "_FlightPacket") -> bool:
        return (self.arrival, self.seq) < (other.arrival, other.seq)


class SimNic:
    """Device side of one port. Fetches TX descriptors, DMAs payloads out of
    shared memory, models the link, and delivers arrivals into posted RX
    buffers. All memory access is device-side and therefore confined."""

    def __init__(
        self,
        name: str,
        mem: MemorySystem,
        port: PortContext,
        link: LinkModel,
        plan: Optional[AdversaryPlan] = None,
        capture: bool = False,
        trace: bool = False,
        role: str = "a",
    ):
        self.name = name
        self.mem = mem
        self.port = port
        self.link = link
        self.plan = plan
        self.role = role
        self.peer: Optional[SimNic] = None
        self.prng = Splitmix64(link.jitter_seed)
        self.inbox: list[_FlightPacket] = []
        self._rx_avail: list[RxView] = []
        self._seq = 0
        self.capture_enabled = capture
        self.capture: list[bytes] = []
        self.trace_enabled = trace
        self.events: list[dict] = []
        self.violations: list[dict] = []
        self.drops = 0
        self.delivered = 0
        self._forced_drops = 0
        self._pending_corrupt: list[int] = []

    # -- wiring ------------------------------------------------------------

    def connect(self, peer: "SimNic") -> None:
        self.peer = peer

    def enqueue(self, arrival: int, payload: bytes) -> None:
        heapq.heappush(self.inbox, _FlightPacket(arrival, self._seq, payload))
        self._seq += 1

    def next_arrival(self) -> Optional[int]:
        """Arrival time of the earliest in-flight packet, if any. Event-driven
        callers use this to know when the next step() is worth scheduling."""
        return self.inbox[0].arrival if self.inbox else None

    # -- event/violation recording ----------------------------------------

    def _event(self, kind: str, t: int, **detail) -> None:
        if self.trace_enabled:
            self.events.append({"kind": kind, "t": t, **detail})

    def _violation(self, kind: str, t: int, **detail) -> None:
        self.violations.append({"kind": kind, "t": t, **detail})
        self._event("violation_" + kind, t, **detail)

    # -- the step ----------------------------------------------------------

    def step(self, now: int) -> None:
        """One device iteration: run due adversary actions, fetch and
        transmit new TX descriptors, deliver due arrivals. Never raises on a
        confinement denial; those become violation records."""
        if self.plan is not None:
            self._run_due_actions(now)
        self._service_tx(now)
        self._service_rx(now)

    def _service_tx(self, now: int) -> None:
        try:
            views: list[TxView] = self.port.tx_ring.device_fetch()  # type: ignore[assignment]
        except DeviceAccessDenied as exc:
            self._violation("tx_ring_unreachable", now, error=str(exc))
            return
        for view in views:
            claimed = view.cmd_type_len & 0xFFFF
            length = min(claimed, view.address.length)
            payload: Optional[bytes] = None
            try:
                payload = self.mem.read(
                    Handle(view.address.region, view.address.offset, length), Side.DEVICE
                )
            except DeviceAccessDenied as exc:
                self._violation("dma_read_denied", now, slot=view.slot, error=str(exc))
            if payload is not None:
                if self._pending_corrupt:
                    off = self._pending_corrupt.pop(0)
                    mutable = bytearray(payload)
                    mutable[off % max(1, len(mutable))] ^= 0xFF
                    payload = bytes(mutable)
                    self._event("corrupt_applied", now, slot=view.slot, offset=off)
                # always two draws per packet (jitter, then loss) so traces
                # replay from the seed regardless of configuration
                jitter_draw = self.prng.next_u64()
                jitter = jitter_draw % (self.link.jitter_ns + 1) if self.link.jitter_ns else 0
                lost = self.prng.chance(self.link.loss_rate)
                if self._forced_drops > 0:
                    self._forced_drops -= 1
                    lost = True
                if self.capture_enabled:
                    self.capture.append(payload)
                if lost:
                    self.drops += 1
                    self._event("tx_lost", now, slot=view.slot, length=length)
                elif self.peer is not None:
                    arrival = now + self.link.delay_ns(length, jitter)
                    self.peer.enqueue(arrival, payload)
                    self._event("tx_sent", now, slot=view.slot, length=length, arrival=arrival)
            # sender-side completion happens whether or not the frame survived
            self.port.tx_ring.device_writeback_tx(view.slot)

    def _service_rx(self, now: int) -> None:
        try:
            self._rx_avail.extend(self.port.rx_ring.device_fetch())  # type: ignore[arg-type]
        except DeviceAccessDenied as exc:
            self._violation("rx_ring_unreachable", now, error=str(exc))
            return
        while self.inbox and self.inbox[0].arrival <= now:
            pkt = heapq.heappop(self.inbox)
            if not self._rx_avail:
                self.drops += 1
                self._event("rx_no_buffer", now, length=len(pkt.payload))
                continue
            view = self._rx_avail.pop(0)
            n = min(len(pkt.payload), view.packet_address.length)
            try:
                self.mem.write(view.packet_address.sub(0, n), Side.DEVICE, pkt.payload[:n])
            except DeviceAccessDenied as exc:
                self._violation("dma_write_denied", now, slot=view.slot, error=str(exc))
                continue
            self.port.rx_ring.device_writeback_rx(view.slot, length=n)
            self.delivered += 1
            self._event("rx_delivered", now, slot=view.slot, length=n)

    # -- adversary actions -------------------------------------------------

    def _run_due_actions(self, now: int) -> None:
        for action in self.plan.actions:
            if action.executed or action.when > now or action.target != self.role:
                continue
            action.executed = True
            self._execute(action, now)

    def _execute(self, action: AdversaryAction, now: int) -> None:
        kind = action.kind
        if kind is ActionKind.TAMPER_SHARED:
            try:
                self.mem.write(
                    Handle(action.region, action.offset, len(action.data)), Side.DEVICE, action.data
                )
                self._event("tamper_done", now, region=action.region, offset=action.offset)
            except SplitioError as exc:  # denied or out of bounds, either way rejected
                self._violation("tamper_denied", now, region=action.region, error=str(exc))
        elif kind is ActionKind.FORGE_WRITEBACK:
            self.port.rx_ring.device_writeback_rx(
                action.slot,
                length=action.length,
                status_error=action.status_error if action.status_error is not None else 0x0001,
            )
            self._event("forge_writeback", now, slot=action.slot, length=action.length)
        elif kind is ActionKind.FORGE_ADDRESS:
            target = Handle(action.region, action.offset, max(1, action.length))
            try:
                self.mem.read(target, Side.DEVICE)
                self._violation("private_read_succeeded", now, region=action.region)
            except SplitioError as exc:
                self._violation("forge_address_denied", now, region=action.region, error=str(exc))
            try:
                self.mem.write(target, Side.DEVICE, bytes(target.length))
                self._violation("private_write_succeeded", now, region=action.region)
            except SplitioError:
                pass
        elif kind is ActionKind.REPLAY_DESCRIPTOR:
            ok = self.port.tx_ring.device_writeback_tx(action.slot % self.port.tx_ring.capacity)
            self._event("replay_attempt", now, slot=action.slot, accepted=ok)
        elif kind is ActionKind.DROP_PACKET:
            self._forced_drops += max(1, action.count)
            self._event("drop_armed", now, count=action.count)
        elif kind is ActionKind.CORRUPT_CIPHERTEXT:
            self._pending_corrupt.append(action.offset)
            self._event("corrupt_armed", now, offset=action.offset)


def loopback_pair(
    port_a: PortContext,
    port_b: PortContext,
    cfg: LinkModel,
    cfg_back: Optional[LinkModel] = None,
    plan: Optional[AdversaryPlan] = None,
    capture: bool = False,
    trace: bool = False,
) -> tuple[SimNic, SimNic]:
    """Wire two ports with a symmetric link. The two directions must use the
    same link parameters; pass cfg_back only to prove you meant them equal."""
    if cfg_back is not None and cfg_back != cfg:
        raise SymmetryRequired(f"loopback link must be symmetric: {cfg} != {cfg_back}")
    back = replace(cfg) if cfg_back is None else cfg_back
    nic_a = SimNic(
        "nic_a", port_a.mem, port_a, cfg, plan=plan, capture=capture, trace=trace, role="a"
    )
    nic_b = SimNic(
        "nic_b", port_b.mem, port_b, back, plan=plan, capture=capture, trace=trace, role="b"
    )
    nic_a.connect(nic_b)
    nic_b.connect(nic_a)
    return nic_a, nic_b


# ---------------------------------------------------------------------------
# Loopback rig and adversary runs


class LoopbackSystem:
    """Two full endpoints (memory, port, NIC) joined by a symmetric link,
    pumped in lock steps of step_ns. Endpoint A sends, endpoint B records
    what its application receives; A's RX side also runs so forged inbound
    traffic is observable. This is the rig the adversary suite and the
    module-level examples use; the benchmark has its own event-driven loop."""

    STEP_NS = 1000

    def __init__(
        self,
        pool_cfg: Optional[PoolConfig] = None,
        link: Optional[LinkModel] = None,
        plan: Optional[AdversaryPlan] = None,
        ring_capacity: int = 8,
        canary: Optional[bytes] = None,
        instrument: bool = True,
        trace: bool = False,
    ):
        self.pool_cfg = pool_cfg or PoolConfig(mbuf_count=32)
        self.link = link or LinkModel(base_latency_ns=500)
        self.mem_a = MemorySystem(instrument=instrument)
        self.mem_b = MemorySystem(instrument=instrument)
        self.port_a = port_new(
            self.mem_a, self.pool_cfg, ring_capacity=ring_capacity, canary=canary
        )
        self.port_b = port_new(
            self.mem_b, self.pool_cfg, ring_capacity=ring_capacity, canary=canary
        )
        self.nic_a, self.nic_b = loopback_pair(
            self.port_a, self.port_b, self.link, plan=plan, capture=True, trace=trace
        )
        self.now = 0
        self.sent: list[bytes] = []
        self.delivered_b: list[bytes] = []
        self.delivered_a: list[bytes] = []
        # optional in-place packet protection (duck-typed: encrypt(buf),
        # decrypt(buf) -> bool); wired by the ipsec layer when used
        self.protect_a = None
        self.protect_b = None

    def send_from_a(self, payload: bytes) -> None:
        buf = self.port_a.alloc_tx_buffer()
        buf.write_data(payload)
        self.sent.append(payload)
        if self.protect_a is not None:
            self.protect_a.encrypt(buf)
        if self.port_a.tx_burst([buf]) == 0:
            self.port_a.free_buffer(buf)

    def _drain_a(self) -> None:
        for buf in self.port_a.rx_burst(64):
            if self.protect_a is not None and not self.protect_a.decrypt(buf):
                self.port_a.free_buffer(buf)
                continue
            self.delivered_a.append(buf.read_data())
            self.port_a.free_buffer(buf)

    def _drain_b_echo(self) -> None:
        # B's application: record the payload, then echo it straight back
        for buf in self.port_b.rx_burst(64):
            if self.protect_b is not None and not self.protect_b.decrypt(buf):
                self.port_b.free_buffer(buf)
                continue
            self.delivered_b.append(buf.read_data())
            if self.protect_b is not None:
                self.protect_b.encrypt(buf)
            if self.port_b.tx_burst([buf]) == 0:
                self.port_b.free_buffer(buf)

    def pump(self, steps: int = 1) -> None:
        for _ in range(steps):
            self.now += self.STEP_NS
            self.nic_a.step(self.now)
            self.nic_b.step(self.now)
            self._drain_b_echo()
            self._drain_a()
            self.port_a.reclaim_tx()
            self.port_b.reclaim_tx()

    def shared_regions(self) -> set[int]:
        return set(self.mem_a.shared.registered) | set(self.mem_b.shared.registered)


@dataclass
class AdversaryReport:
    outcomes: list[tuple[str, str]]
    violations: list[dict]
    breach: bool
    sent: list[bytes]
    delivered: list[bytes]
    echoed: list[bytes]
    counters_a: dict[str, int]
    counters_b: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "outcomes": [list(pair) for pair in self.outcomes],
            "violations": self.violations,
            "breach": self.breach,
            "sent": [p.hex() for p in self.sent],
            "delivered": [p.hex() for p in self.delivered],
            "echoed": [p.hex() for p in self.echoed],
            "counters_a": self.counters_a,
            "counters_b": self.counters_b,
        }


def _payloads_for_run(count: int, length: int, seed: int) -> list[bytes]:
    rng = Splitmix64(seed ^ 0xA5A5A5A5)
    out = []
    for i in range(count):
        head = i.to_bytes(4, "little")
        body = bytearray(head)
        while len(body) < length:
            body.extend(rng.next_u64().to_bytes(8, "little"))
        out.append(bytes(body[:length]))
    return out


def run_adversary(
    plan: AdversaryPlan,
    packets: int = 4,
    payload_len: int = 128,
    pool_cfg: Optional[PoolConfig] = None,
    link: Optional[LinkModel] = None,
    ring_capacity: int = 8,
    canary: Optional[bytes] = None,
    secret_patterns: Optional[list[bytes]] = None,
    protect_factory=None,
    seed: int = 0,
    trace: bool = False,
) -> AdversaryReport:
    """Run scripted traffic under an adversary plan and classify each action.

    Classification is evidence-based after the run: an action is REJECTED if
    the defenses visibly stopped it (access denied, clamp, replay log, auth
    failure), DELIVERED_CORRUPTED if application-visible data was corrupted or
    fabricated, and NO_EFFECT otherwise. `breach` is the red flag: it means
    the device actually touched private memory or a secret pattern leaked
    into shared memory or the wire, which must never happen.
    """
    system = LoopbackSystem(
        pool_cfg=pool_cfg,
        link=link,
        plan=plan,
        ring_capacity=ring_capacity,
        canary=canary,
        instrument=True,
        trace=trace,
    )
    if protect_factory is not None:
        system.protect_a, system.protect_b = protect_factory(system)

    payloads = _payloads_for_run(packets, payload_len, seed)
    for payload in payloads:
        system.send_from_a(payload)
        system.pump(1)
    system.pump(12 + 2 * packets)

    sent_set = set(system.sent)
    corrupt_delivered = [p for p in system.delivered_b if p not in sent_set]
    # A legitimately receives only echoes of what it sent
    fabricated_at_a = [p for p in system.delivered_a if p not in sent_set]
    violations = (
        system.nic_a.violations
        + system.nic_b.violations
        + [
            {"kind": k, "slot": s, "ring": "tx_a"}
            for (k, s) in system.port_a.tx_ring.violations
        ]
        + [
            {"kind": k, "slot": s, "ring": "rx_a"}
            for (k, s) in system.port_a.rx_ring.violations
        ]
        + [
            {"kind": k, "slot": s, "ring": "rx_b"}
            for (k, s) in system.port_b.rx_ring.violations
        ]
        + [
            {"kind": k, "slot": s, "ring": "tx_b"}
            for (k, s) in system.port_b.tx_ring.violations
        ]
    )
    vkinds = {v["kind"] for v in violations}

    outcomes: list[tuple[str, str]] = []
    for action in plan.actions:
        kind = action.kind
        if kind is ActionKind.TAMPER_SHARED:
            if any(
                v["kind"] == "tamper_denied" and v.get("region") == action.region
                for v in violations
            ):
                outcome = Outcome.REJECTED
            elif corrupt_delivered or fabricated_at_a:
                outcome = Outcome.DELIVERED_CORRUPTED
            else:
                outcome = Outcome.NO_EFFECT
        elif kind is ActionKind.FORGE_WRITEBACK:
            suspects = (
                system.port_a.counters["metadata_suspect"]
                + system.port_b.counters["metadata_suspect"]
            )
            if suspects > 0 or "replayed_rx_writeback" in vkinds:
                outcome = Outcome.REJECTED
            elif fabricated_at_a or corrupt_delivered:
                outcome = Outcome.DELIVERED_CORRUPTED
            else:
                outcome = Outcome.NO_EFFECT
        elif kind is ActionKind.FORGE_ADDRESS:
            if any(v["kind"].startswith("private_") for v in violations):
                outcome = Outcome.DELIVERED_CORRUPTED
            else:
                outcome = Outcome.REJECTED
        elif kind is ActionKind.REPLAY_DESCRIPTOR:
            outcome = (
                Outcome.REJECTED if "replayed_tx_completion" in vkinds else Outcome.NO_EFFECT
            )
        elif kind is ActionKind.DROP_PACKET:
            outcome = Outcome.NO_EFFECT
        else:  # CORRUPT_CIPHERTEXT
            auth_fails = (
                system.port_a.counters["auth_fail"] + system.port_b.counters["auth_fail"]
            )
            if auth_fails > 0:
                outcome = Outcome.REJECTED
            elif corrupt_delivered:
                outcome = Outcome.DELIVERED_CORRUPTED
            else:
                outcome = Outcome.NO_EFFECT
        outcomes.append((kind.value, outcome.value))

    breach = any(v["kind"].startswith("private_") for v in violations)
    for memsys in (system.mem_a, system.mem_b):
        allowed = set(memsys.shared.registered)
        if not memsys.device_touched_regions() <= allowed:
            breach = True
    patterns = list(secret_patterns or [])
    if canary:
        patterns.append(canary)
    for pattern in patterns:
        if system.mem_a.pattern_in_shared(pattern) or system.mem_b.pattern_in_shared(pattern):
            breach = True
        if any(pattern in frame for frame in system.nic_a.capture + system.nic_b.capture):
            breach = True

    return AdversaryReport(
        outcomes=outcomes,
        violations=violations,
        breach=breach,
        sent=system.sent,
        delivered=system.delivered_b,
        echoed=system.delivered_a,
        counters_a=system.port_a.counters_snapshot(),
        counters_b=system.port_b.counters_snapshot(),
    )
