"""ESP transport-mode protection with two offload shapes.

Wire layout of a protected packet (offsets in bytes):

   0..8   addressing prefix (src u32 | dst u32), cleartext, copied from the
          head of the original packet
   8..12  spi (big endian)
  12..16  sequence number, low 32 bits (big endian)
  16..24  explicit IV = the full 64-bit sequence number (big endian)
  24..N-16 ciphertext of: payload[8:] + padding + pad_len + next_header
   N-16..N 16-byte integrity tag

AES-128-GCM does the crypto: nonce = 4-byte salt || 8-byte IV, AAD = the
8-byte spi||seq header. Padding brings (inner + 2) to a 4-byte boundary, so
expansion over the original packet is 34 to 37 bytes, bounded by 40. The
single-SA receiver authenticates the received header bytes, so any bit flip
anywhere in the ESP frame proper (spi through tag) fails authentication; the
addressing prefix sits outside the protected frame, as outer headers do.

Key and salt bytes live in a private arena and are flowed into the cipher per
call, so a scan of shared memory or captured wire frames can prove they never
leak. AES executions are attributed to whoever passes its ops counter, which
is how the tests prove the app worker does zero AES in inline mode.

Offload shapes:

* look-aside: the application worker itself calls the batch encrypt/decrypt
  helpers around its rx/tx bursts.
* emulated inline: a dedicated crypto worker owns four bounded staging queues
  (cipher-in / plain-out inbound, plain-in / cipher-out outbound), polls the
  pool layer, and does every AES operation; the application only touches the
  plain-side queues.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AlreadyAttached,
    AuthFail,
    BadSaConfig,
    Malformed,
    Oversize,
    SeqExhausted,
    SplitioError,
)
from .mem import Handle, MemorySystem, RegionKind, Side
from .pools import PacketBuffer, PortContext

ADDR_PREFIX_LEN = 8
ESP_HEADER_LEN = 8  # spi + seq32
IV_LEN = 8
ICV_LEN = 16
ESP_OVERHEAD = 40  # contract bound on expansion; actual is 34..37
MIN_FRAME_LEN = ADDR_PREFIX_LEN + ESP_HEADER_LEN + IV_LEN + 4 + ICV_LEN  # 44
NEXT_HEADER = 17  # inner payload treated as UDP-like
MAX_WIRE_SEQ = 0xFFFFFFFF

MSG_TYPE_PLAIN = 0
MSG_TYPE_ESP = 0x0032

KEY_LEN = 16
SALT_LEN = 4


class SaDirection(enum.Enum):
    OUTBOUND = "outbound"
    INBOUND = "inbound"


class OffloadMode(enum.Enum):
    LOOKASIDE = "lookaside"
    INLINE = "inline"


class WrongDirection(SplitioError):
    pass


class SecurityAssociation:
    """One direction of one flow. Key material is stored in a private arena;
    the object keeps only handles plus counters."""

    def __init__(
        self,
        mem: MemorySystem,
        spi: int,
        key: bytes,
        salt: bytes,
        direction: SaDirection,
        replay_counting: bool = False,
    ):
        if len(key) != KEY_LEN:
            raise BadSaConfig(f"key must be {KEY_LEN} bytes, got {len(key)}")
        if len(salt) != SALT_LEN:
            raise BadSaConfig(f"salt must be {SALT_LEN} bytes, got {len(salt)}")
        if not 0 <= spi <= 0xFFFFFFFF:
            raise BadSaConfig(f"spi out of u32 range: {spi}")
        self.mem = mem
        self.spi = spi
        self.direction = direction
        self.seq = 1  # first outbound packet uses sequence number 1
        self.replay_counting = replay_counting
        self.last_seq = 0
        self.replays_detected = 0
        self.auth_fails = 0
        arena = mem.create_arena(RegionKind.PRIVATE, KEY_LEN + SALT_LEN)
        self.key_handle = Handle(arena.id, 0, KEY_LEN)
        self.salt_handle = Handle(arena.id, KEY_LEN, SALT_LEN)
        mem.write(self.key_handle, Side.VM, key)
        mem.write(self.salt_handle, Side.VM, salt)
        self._aead: Optional[AESGCM] = None

    def key_bytes(self) -> bytes:
        return self.mem.read(self.key_handle, Side.VM)

    def salt_bytes(self) -> bytes:
        return self.mem.read(self.salt_handle, Side.VM)

    def _cipher(self) -> AESGCM:
        if self._aead is None:
            self._aead = AESGCM(self.key_bytes())
        return self._aead


@dataclass(frozen=True)
class EspParts:
    """Parsed-but-unverified view of a protected frame (test/diagnostic aid)."""

    addressing: bytes
    spi: int
    seq32: int
    iv: bytes
    ciphertext: bytes
    icv: bytes


def esp_frame_len(pkt_len: int) -> int:
    """Protected length of a pkt_len-byte packet: +34 to +37 depending on pad."""
    inner = pkt_len - ADDR_PREFIX_LEN
    pad = (-(inner + 2)) % 4
    return pkt_len + 34 + pad


def parse_esp(frame: bytes) -> EspParts:
    if len(frame) < MIN_FRAME_LEN:
        raise Malformed(f"frame of {len(frame)} B below minimum {MIN_FRAME_LEN}")
    body = frame[ADDR_PREFIX_LEN + ESP_HEADER_LEN + IV_LEN : -ICV_LEN]
    return EspParts(
        addressing=frame[:ADDR_PREFIX_LEN],
        spi=int.from_bytes(frame[8:12], "big"),
        seq32=int.from_bytes(frame[12:16], "big"),
        iv=frame[16:24],
        ciphertext=body,
        icv=frame[-ICV_LEN:],
    )


def esp_encrypt(sa: SecurityAssociation, buf: PacketBuffer, ops_counter: Optional[dict] = None) -> None:
    """Protect a shadow buffer in place; pkt_len grows by 34..37 bytes."""
    if sa.direction is not SaDirection.OUTBOUND:
        raise WrongDirection("encrypt requires an outbound association")
    pkt_len = buf.pkt_len
    if pkt_len < ADDR_PREFIX_LEN:
        raise Malformed(f"packet of {pkt_len} B lacks the {ADDR_PREFIX_LEN} B addressing prefix")
    if pkt_len > buf.data_room - ESP_OVERHEAD:
        raise Oversize(f"{pkt_len} B cannot grow by {ESP_OVERHEAD} B in a {buf.data_room} B room")
    if sa.seq > MAX_WIRE_SEQ:
        raise SeqExhausted(f"sequence space of SPI {sa.spi:#x} exhausted")

    mem = sa.mem
    raw = mem.read(buf.data.sub(0, pkt_len), Side.VM)
    addressing, inner = raw[:ADDR_PREFIX_LEN], raw[ADDR_PREFIX_LEN:]
    pad_len = (-(len(inner) + 2)) % 4
    plaintext = inner + bytes(range(1, pad_len + 1)) + bytes([pad_len, NEXT_HEADER])

    seq = sa.seq
    sa.seq += 1
    iv = seq.to_bytes(IV_LEN, "big")
    header = sa.spi.to_bytes(4, "big") + (seq & MAX_WIRE_SEQ).to_bytes(4, "big")
    sealed = sa._cipher().encrypt(sa.salt_bytes() + iv, plaintext, header)
    if ops_counter is not None:
        ops_counter["aes_ops"] = ops_counter.get("aes_ops", 0) + 1

    frame = addressing + header + iv + sealed
    mem.write(buf.data.sub(0, len(frame)), Side.VM, frame)
    buf.pkt_len = len(frame)
    buf.msg_type = MSG_TYPE_ESP


def esp_decrypt(sa: SecurityAssociation, buf: PacketBuffer, ops_counter: Optional[dict] = None) -> None:
    """Verify and unprotect a shadow buffer in place.

    Structural problems raise Malformed; any authentication problem raises
    AuthFail. The AAD is taken from the received header bytes, so header
    tampering surfaces as AuthFail, not as a lookup error.
    """
    if sa.direction is not SaDirection.INBOUND:
        raise WrongDirection("decrypt requires an inbound association")
    frame_len = buf.pkt_len
    if frame_len < MIN_FRAME_LEN:
        raise Malformed(f"frame of {frame_len} B below minimum {MIN_FRAME_LEN}")
    mem = sa.mem
    frame = mem.read(buf.data.sub(0, frame_len), Side.VM)
    addressing = frame[:ADDR_PREFIX_LEN]
    header = frame[8:16]
    iv = frame[16:24]
    sealed = frame[24:]
    if (len(sealed) - ICV_LEN) % 4 != 0:
        raise Malformed("ciphertext length not 4-byte aligned")

    try:
        plaintext = sa._cipher().decrypt(sa.salt_bytes() + iv, sealed, header)
    except InvalidTag:
        sa.auth_fails += 1
        if ops_counter is not None:
            ops_counter["aes_ops"] = ops_counter.get("aes_ops", 0) + 1
        raise AuthFail(f"integrity check failed for SPI {sa.spi:#x}") from None
    if ops_counter is not None:
        ops_counter["aes_ops"] = ops_counter.get("aes_ops", 0) + 1

    pad_len, _next_header = plaintext[-2], plaintext[-1]
    if pad_len + 2 > len(plaintext):
        raise Malformed(f"pad length {pad_len} exceeds plaintext")
    inner = plaintext[: len(plaintext) - 2 - pad_len]

    seq64 = int.from_bytes(iv, "big")
    if sa.replay_counting:
        if seq64 <= sa.last_seq:
            sa.replays_detected += 1
        else:
            sa.last_seq = seq64

    restored = addressing + inner
    mem.write(buf.data.sub(0, len(restored)), Side.VM, restored)
    buf.pkt_len = len(restored)
    buf.msg_type = MSG_TYPE_PLAIN


# ---------------------------------------------------------------------------
# Look-aside offload: the app worker triggers batched crypto around bursts.


def lookaside_rx(
    port: PortContext, sa: SecurityAssociation, max_count: int = 32
) -> list[PacketBuffer]:
    """rx_burst, then batch-decrypt on the calling (application) worker.
    Frames that fail verification are freed and counted, never delivered.
    AES work lands in port.counters["aes_ops"], the application worker's
    tally."""
    out: list[PacketBuffer] = []
    for buf in port.rx_burst(max_count):
        try:
            esp_decrypt(sa, buf, ops_counter=port.counters)
        except (AuthFail, Malformed):
            port.counters["auth_fail"] += 1
            port.free_buffer(buf)
            continue
        out.append(buf)
    return out


def lookaside_tx(port: PortContext, sa: SecurityAssociation, bufs: list[PacketBuffer]) -> int:
    """Batch-encrypt on the calling worker, then tx_burst."""
    for buf in bufs:
        esp_encrypt(sa, buf, ops_counter=port.counters)
    return port.tx_burst(bufs)


# ---------------------------------------------------------------------------
# Emulated inline offload: a reserved crypto worker between pools and app.

STAGING_CAPACITY = 1024


class CryptoWorker:
    """Owns the four staging queues and all AES work for one port.

    The application enqueues plaintext shadow buffers (app_tx) and dequeues
    decrypted ones (app_rx); the worker's step pulls ciphertext in from the
    pool layer, transforms in batches, and pushes ciphertext out through
    tx_burst. Queues are bounded; overflow drops the packet and counts it.
    """

    def __init__(
        self,
        port: PortContext,
        sa_in: SecurityAssociation,
        sa_out: SecurityAssociation,
        staging_capacity: int = STAGING_CAPACITY,
    ):
        self.port = port
        self.sa_in = sa_in
        self.sa_out = sa_out
        self.capacity = staging_capacity
        self.cipher_in: deque[PacketBuffer] = deque()
        self.plain_out: deque[PacketBuffer] = deque()
        self.plain_in: deque[PacketBuffer] = deque()
        self.cipher_out: deque[PacketBuffer] = deque()
        self.counters = {"aes_ops": 0, "stage_drops": 0, "auth_fail": 0, "processed": 0}

    # -- app-side (plain queues only, zero crypto here) --------------------

    def app_tx(self, bufs: list[PacketBuffer]) -> int:
        accepted = 0
        for buf in bufs:
            if len(self.plain_in) >= self.capacity:
                self.counters["stage_drops"] += 1
                self.port.free_buffer(buf)
                continue
            self.plain_in.append(buf)
            accepted += 1
        return accepted

    def app_rx(self, max_count: int = 32) -> list[PacketBuffer]:
        out = []
        while self.plain_out and len(out) < max_count:
            out.append(self.plain_out.popleft())
        return out

    # -- worker side -------------------------------------------------------

    def queues_empty(self) -> bool:
        return not (self.cipher_in or self.plain_out or self.plain_in or self.cipher_out)

    def step(self, batch_max: int = 32) -> int:
        """One polling iteration; returns the number of transforms performed."""
        room = self.capacity - len(self.cipher_in)
        if room > 0:
            for buf in self.port.rx_burst(min(batch_max, room)):
                self.cipher_in.append(buf)

        done = 0
        while self.cipher_in and done < batch_max:
            buf = self.cipher_in.popleft()
            try:
                esp_decrypt(self.sa_in, buf, ops_counter=self.counters)
            except (AuthFail, Malformed):
                self.counters["auth_fail"] += 1
                self.port.counters["auth_fail"] += 1
                self.port.free_buffer(buf)
                done += 1
                continue
            if len(self.plain_out) >= self.capacity:
                self.counters["stage_drops"] += 1
                self.port.free_buffer(buf)
            else:
                self.plain_out.append(buf)
            done += 1

        while self.plain_in and done < batch_max:
            buf = self.plain_in.popleft()
            esp_encrypt(self.sa_out, buf, ops_counter=self.counters)
            if len(self.cipher_out) >= self.capacity:
                self.counters["stage_drops"] += 1
                self.port.free_buffer(buf)
            else:
                self.cipher_out.append(buf)
            done += 1

        if self.cipher_out:
            batch = list(self.cipher_out)
            accepted = self.port.tx_burst(batch)
            for _ in range(accepted):
                self.cipher_out.popleft()

        self.counters["processed"] += done
        return done


def inline_attach(
    port: PortContext,
    sa_in: SecurityAssociation,
    sa_out: SecurityAssociation,
    staging_capacity: int = STAGING_CAPACITY,
) -> CryptoWorker:
    if getattr(port, "crypto_worker", None) is not None:
        raise AlreadyAttached("port already has a crypto worker")
    worker = CryptoWorker(port, sa_in, sa_out, staging_capacity)
    port.crypto_worker = worker  # type: ignore[attr-defined]
    return worker


def inline_detach(worker: CryptoWorker, max_steps: int = 10_000) -> None:
    """Drain all staging queues, then release the port. An idle flow loses
    nothing: every queued packet is transformed and pushed out first."""
    steps = 0
    while not worker.queues_empty():
        worker.step()
        steps += 1
        if steps > max_steps:
            raise SplitioError("crypto worker failed to drain")
    worker.port.crypto_worker = None  # type: ignore[attr-defined]


def crypto_worker_step(worker: CryptoWorker, batch_max: int = 32) -> int:
    return worker.step(batch_max)


# ---------------------------------------------------------------------------
# Port protection adapter (used by the loopback rig and the bench harness).


class PortProtect:
    """Duck-typed protect object: in-place encrypt/decrypt on shadow buffers
    with failure counting on the port."""

    def __init__(self, port: PortContext, sa_out: SecurityAssociation, sa_in: SecurityAssociation):
        self.port = port
        self.sa_out = sa_out
        self.sa_in = sa_in

    def encrypt(self, buf: PacketBuffer) -> None:
        esp_encrypt(self.sa_out, buf, ops_counter=self.port.counters)

    def decrypt(self, buf: PacketBuffer) -> bool:
        try:
            esp_decrypt(self.sa_in, buf, ops_counter=self.port.counters)
            return True
        except (AuthFail, Malformed):
            self.port.counters["auth_fail"] += 1
            return False

    def secret_patterns(self) -> list[bytes]:
        return [self.sa_out.key_bytes(), self.sa_in.key_bytes()]


# ---------------------------------------------------------------------------
# SA configuration file: one line per association.


@dataclass(frozen=True)
class SaSpec:
    spi: int
    key: bytes
    salt: bytes
    mode: OffloadMode


def parse_sa_config(text: str) -> list[SaSpec]:
    """Format per line: spi=<u32> key=<32 hex> salt=<8 hex> mode=<lookaside|inline>.
    Blank lines and #-comments are ignored."""
    specs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields: dict[str, str] = {}
        for tok in line.split():
            if "=" not in tok:
                raise BadSaConfig(f"line {lineno}: expected key=value, got {tok!r}")
            key, val = tok.split("=", 1)
            fields[key] = val
        missing = {"spi", "key", "salt", "mode"} - fields.keys()
        if missing:
            raise BadSaConfig(f"line {lineno}: missing {sorted(missing)}")
        try:
            spi = int(fields["spi"], 0)
            key_bytes = bytes.fromhex(fields["key"])
            salt_bytes = bytes.fromhex(fields["salt"])
        except ValueError:
            raise BadSaConfig(f"line {lineno}: bad numeric or hex value") from None
        if not 0 <= spi <= 0xFFFFFFFF:
            raise BadSaConfig(f"line {lineno}: spi out of u32 range")
        if len(key_bytes) != KEY_LEN:
            raise BadSaConfig(f"line {lineno}: key must be {2 * KEY_LEN} hex digits")
        if len(salt_bytes) != SALT_LEN:
            raise BadSaConfig(f"line {lineno}: salt must be {2 * SALT_LEN} hex digits")
        try:
            mode = OffloadMode(fields["mode"])
        except ValueError:
            raise BadSaConfig(f"line {lineno}: mode must be lookaside or inline") from None
        specs.append(SaSpec(spi=spi, key=key_bytes, salt=salt_bytes, mode=mode))
    return specs


def load_sa_config(path: str) -> list[SaSpec]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_sa_config(fh.read())
