"""Stateless ICMPv6 Echo Request probing.

The engine keeps no per-target state.  Each Echo Request carries the probed
address inside its payload together with a keyed checksum, so any reply --
an Echo Reply quoting the payload, or an ICMPv6 error quoting the whole
request -- can be matched back to its target without a connection table.

Payload layout (24 bytes):

    0..15   target address, network byte order
    16..23  blake2b-8 of the address, keyed with the 64-bit scan secret

A reply is attributed to a target only if the checksum verifies, so stray
or spoofed packets cannot pollute results (false accept ~ 2^-64).
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import ipaddress
import json
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Iterable, Iterator, Protocol

from .target_gen import ProbeTarget

ICMP6_ECHO_REQUEST = 128
ICMP6_ECHO_REPLY = 129

PAYLOAD_LEN = 24
IPV6_HEADER_LEN = 40
ICMP6_HEADER_LEN = 8  # echo header: type, code, cksum, ident, seq


class TransportError(RuntimeError):
    """The transport failed mid-scan; partial results were flushed."""


@dataclass(frozen=True)
class ProbeConfig:
    send_rate: float = 200_000.0
    hop_limit: int = 64
    cooldown: float = 10.0
    secret: int = 0
    source_address: int = int(ipaddress.IPv6Address("2001:db8:ffff::1"))
    scan_pass: int = 0  # goes into the ICMP identifier field
    shard: int = 0      # goes into the ICMP sequence field

    def __post_init__(self):
        if self.send_rate <= 0:
            raise ValueError("send_rate must be > 0")
        if not 1 <= self.hop_limit <= 255:
            raise ValueError("hop_limit must be in 1..255")
        if self.cooldown < 0:
            raise ValueError("cooldown must be >= 0")
        if not 0 <= self.secret < (1 << 64):
            raise ValueError("secret must fit in 64 bits")
        if not 0 <= self.source_address < (1 << 128):
            raise ValueError("source_address must be an IPv6 address")
        if not 0 <= self.scan_pass < (1 << 16) or not 0 <= self.shard < (1 << 16):
            raise ValueError("scan_pass and shard are 16-bit fields")


class ReplyKind(enum.Enum):
    ECHO_REPLY = "echo_reply"
    DEST_UNREACHABLE = "dest_unreachable"
    PACKET_TOO_BIG = "packet_too_big"
    TIME_EXCEEDED = "time_exceeded"
    PARAM_PROBLEM = "param_problem"
    OTHER = "other"


_KIND_BY_TYPE = {
    1: ReplyKind.DEST_UNREACHABLE,
    2: ReplyKind.PACKET_TOO_BIG,
    3: ReplyKind.TIME_EXCEEDED,
    4: ReplyKind.PARAM_PROBLEM,
    ICMP6_ECHO_REPLY: ReplyKind.ECHO_REPLY,
}

ERROR_KINDS = frozenset(
    {
        ReplyKind.DEST_UNREACHABLE,
        ReplyKind.PACKET_TOO_BIG,
        ReplyKind.TIME_EXCEEDED,
        ReplyKind.PARAM_PROBLEM,
    }
)


@dataclass(frozen=True)
class EchoProbe:
    """One crafted probe: target plus the wire-level echo fields."""

    target: ProbeTarget | int
    identifier: int
    sequence: int
    payload: bytes

    @property
    def address(self) -> int:
        t = self.target
        return t.address if isinstance(t, ProbeTarget) else int(t)


@dataclass(frozen=True)
class ReplyRecord:
    kind: ReplyKind
    icmp_type: int
    code: int
    source: int
    embedded_target: int | None
    received_hop_limit: int
    timestamp: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "ts": self.timestamp,
                "kind": self.kind.value,
                "type": self.icmp_type,
                "code": self.code,
                "src": str(ipaddress.IPv6Address(self.source)),
                "embedded_target": (
                    str(ipaddress.IPv6Address(self.embedded_target))
                    if self.embedded_target is not None
                    else None
                ),
                "hop_limit": self.received_hop_limit,
            },
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "ReplyRecord":
        d = json.loads(line)
        return cls(
            kind=ReplyKind(d["kind"]),
            icmp_type=d["type"],
            code=d["code"],
            source=int(ipaddress.IPv6Address(d["src"])),
            embedded_target=(
                int(ipaddress.IPv6Address(d["embedded_target"]))
                if d["embedded_target"] is not None
                else None
            ),
            received_hop_limit=d["hop_limit"],
            timestamp=d["ts"],
        )


# --- payload tagging ----------------------------------------------------------


def _payload_mac(address_bytes: bytes, secret: int) -> bytes:
    key = secret.to_bytes(8, "big")
    return hashlib.blake2b(address_bytes, key=key, digest_size=8).digest()


def encode_payload(target_address: int, secret: int) -> bytes:
    """24-byte probe payload: target address plus keyed checksum."""
    addr = target_address.to_bytes(16, "big")
    return addr + _payload_mac(addr, secret)


def decode_payload(data: bytes, secret: int) -> int | None:
    """Recover the probed address if the payload authenticates; else None.

    Accepts any buffer that still holds the full 24 tag bytes at its start,
    so payloads from truncated error quotes decode as long as the tag
    survived.  A missing or corrupt tag is a value (None), not an error.
    """
    if len(data) < PAYLOAD_LEN:
        return None
    addr = data[:16]
    if not hmac.compare_digest(_payload_mac(addr, secret), data[16:PAYLOAD_LEN]):
        return None
    return int.from_bytes(addr, "big")


# --- packet crafting ----------------------------------------------------------


def icmpv6_checksum(src: int, dst: int, message: bytes) -> int:
    """RFC 4443 checksum: one's complement sum over the IPv6 pseudo-header."""
    data = (
        src.to_bytes(16, "big")
        + dst.to_bytes(16, "big")
        + struct.pack("!I3xB", len(message), 58)
        + message
    )
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for (word,) in struct.iter_unpack("!H", data):
        total += word
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_ipv6_icmp(src: int, dst: int, hop_limit: int, icmp: bytes) -> bytes:
    """Wrap an ICMPv6 message (checksum field zeroed) in an IPv6 header."""
    cksum = icmpv6_checksum(src, dst, icmp)
    icmp = icmp[:2] + struct.pack("!H", cksum) + icmp[4:]
    header = struct.pack(
        "!IHBB", 6 << 28, len(icmp), 58, hop_limit
    ) + src.to_bytes(16, "big") + dst.to_bytes(16, "big")
    return header + icmp


def make_probe(target: ProbeTarget | int, cfg: ProbeConfig) -> EchoProbe:
    address = target.address if isinstance(target, ProbeTarget) else int(target)
    return EchoProbe(
        target=target,
        identifier=cfg.scan_pass,
        sequence=cfg.shard,
        payload=encode_payload(address, cfg.secret),
    )


def build_echo_request(target: ProbeTarget | int, cfg: ProbeConfig) -> bytes:
    """Full IPv6 packet for one probe, checksummed and ready to send."""
    probe = make_probe(target, cfg)
    icmp = (
        struct.pack("!BBHHH", ICMP6_ECHO_REQUEST, 0, 0, probe.identifier, probe.sequence)
        + probe.payload
    )
    return build_ipv6_icmp(cfg.source_address, probe.address, cfg.hop_limit, icmp)


def parse_ipv6(packet: bytes) -> tuple[int, int, int, int, bytes] | None:
    """(src, dst, hop_limit, next_header, payload) or None if not plain IPv6.

    Extension header chains are not walked; scan replies arrive as plain
    ICMPv6 and anything else is noise.
    """
    if len(packet) < IPV6_HEADER_LEN:
        return None
    vtf, plen, nh, hlim = struct.unpack("!IHBB", packet[:8])
    if vtf >> 28 != 6:
        return None
    if len(packet) < IPV6_HEADER_LEN + plen:
        return None
    src = int.from_bytes(packet[8:24], "big")
    dst = int.from_bytes(packet[24:40], "big")
    return src, dst, hlim, nh, packet[IPV6_HEADER_LEN : IPV6_HEADER_LEN + plen]


def _embedded_from_quote(quoted: bytes, secret: int) -> int | None:
    """Pull the authenticated target out of an error message's quoted packet.

    Quotes are routinely truncated, so the IPv6 length field of the quoted
    packet is not trusted; whatever payload bytes survived are offered to
    decode_payload, which insists on a complete tag.
    """
    if len(quoted) < IPV6_HEADER_LEN + ICMP6_HEADER_LEN:
        return None
    if quoted[0] >> 4 != 6 or quoted[6] != 58:
        return None
    inner = quoted[IPV6_HEADER_LEN:]
    if inner[0] != ICMP6_ECHO_REQUEST:
        return None
    return decode_payload(inner[ICMP6_HEADER_LEN:], secret)


def classify_icmp(packet: bytes, secret: int, timestamp: float = 0.0) -> ReplyRecord | None:
    """Parse a received packet into a ReplyRecord.

    Returns None for anything that is not wellformed ICMPv6 over IPv6 or
    fails the RFC 4443 checksum; absence is a value, not an error.  Known
    types map to their kinds, everything else to OTHER.  embedded_target is
    set only when the echoed or quoted payload authenticates.
    """
    parsed = parse_ipv6(packet)
    if parsed is None:
        return None
    src, dst, hlim, nh, payload = parsed
    if nh != 58 or len(payload) < 4:
        return None
    if icmpv6_checksum(src, dst, payload[:2] + b"\x00\x00" + payload[4:]) != struct.unpack(
        "!H", payload[2:4]
    )[0]:
        return None
    icmp_type, code = payload[0], payload[1]
    kind = _KIND_BY_TYPE.get(icmp_type, ReplyKind.OTHER)
    embedded = None
    if kind is ReplyKind.ECHO_REPLY:
        embedded = decode_payload(payload[ICMP6_HEADER_LEN:], secret)
    elif kind in ERROR_KINDS:
        embedded = _embedded_from_quote(payload[8:], secret)
    return ReplyRecord(
        kind=kind,
        icmp_type=icmp_type,
        code=code,
        source=src,
        embedded_target=embedded,
        received_hop_limit=hlim,
        timestamp=timestamp,
    )


# --- scanning -----------------------------------------------------------------


class Transport(Protocol):
    """A packet channel: exactly send and receive, nothing else.

    Implementations must tolerate send() and receive() being driven from
    two different threads.
    """

    def send(self, packet: bytes) -> None: ...

    def receive(self, timeout: float) -> tuple[bytes, float] | None: ...


class _Pacer:
    """Token bucket smoothing sends to cfg.send_rate; burst capped at 1 ms."""

    def __init__(self, rate: float, clock, sleep):
        self.rate = rate
        self.burst = max(1.0, rate / 1000.0)
        self.tokens = self.burst
        self.clock = clock
        self.sleep = sleep
        self.last = clock()

    def wait(self):
        while True:
            now = self.clock()
            self.tokens = min(self.burst, self.tokens + (now - self.last) * self.rate)
            self.last = now
            if self.tokens >= 1.0:
                self.tokens -= 1.0
                return
            self.sleep((1.0 - self.tokens) / self.rate)


_DONE = object()


def run_scan(
    targets: Iterable[ProbeTarget | int],
    transport: Transport,
    cfg: ProbeConfig,
    clock=time.monotonic,
    sleep=time.sleep,
) -> Iterator[ReplyRecord]:
    """Send one Echo Request per target, yield classified replies.

    One sender and one receiver run concurrently; no per-target state is
    kept.  Reception continues for cfg.cooldown after the last send.  If the
    transport fails, replies received so far are still yielded, then
    TransportError is raised.
    """
    records: queue.SimpleQueue = queue.SimpleQueue()
    send_done = threading.Event()
    abort = threading.Event()
    sender_error: list[BaseException] = []

    def sender():
        pacer = _Pacer(cfg.send_rate, clock, sleep)
        try:
            for target in targets:
                if abort.is_set():
                    break
                pacer.wait()
                transport.send(build_echo_request(target, cfg))
        except BaseException as exc:  # noqa: BLE001 - re-raised in the consumer
            sender_error.append(exc)
        finally:
            send_done.set()

    def receiver():
        deadline = None
        try:
            while not abort.is_set():
                if send_done.is_set():
                    if deadline is None:
                        deadline = clock() + cfg.cooldown
                    remaining = deadline - clock()
                    if remaining <= 0:
                        break
                    timeout = min(0.05, remaining)
                else:
                    timeout = 0.05
                item = transport.receive(timeout)
                if item is None:
                    continue
                data, ts = item
                rec = classify_icmp(data, cfg.secret, timestamp=ts)
                if rec is not None:
                    records.put(rec)
        finally:
            records.put(_DONE)

    send_thread = threading.Thread(target=sender, name="srascan-send", daemon=True)
    recv_thread = threading.Thread(target=receiver, name="srascan-recv", daemon=True)
    send_thread.start()
    recv_thread.start()
    try:
        while True:
            item = records.get()
            if item is _DONE:
                break
            yield item
    finally:
        abort.set()
        send_thread.join()
        recv_thread.join()
    if sender_error:
        raise TransportError("transport failed mid-scan") from sender_error[0]


class LiveTransport:  # pragma: no cover - needs CAP_NET_RAW and a real network
    """Raw-socket transport.  Requires root (or CAP_NET_RAW).

    Sending hands the kernel the ICMPv6 part of the crafted packet (the
    kernel rebuilds an equivalent IPv6 header; hop limit and source are
    pinned via socket options).  Receiving sniffs full IPv6 frames so the
    classifier sees real headers.
    """

    def __init__(self, interface: str, source_address: int, hop_limit: int = 64):
        self._send_sock = socket.socket(
            socket.AF_INET6, socket.SOCK_RAW, socket.IPPROTO_ICMPV6
        )
        self._send_sock.setsockopt(
            socket.IPPROTO_IPV6, socket.IPV6_UNICAST_HOPS, hop_limit
        )
        self._send_sock.bind((str(ipaddress.IPv6Address(source_address)), 0))
        # ETH_P_IPV6 = 0x86DD; AF_PACKET delivers whole frames
        self._recv_sock = socket.socket(
            socket.AF_PACKET, socket.SOCK_DGRAM, socket.htons(0x86DD)
        )
        self._recv_sock.bind((interface, 0x86DD))
        self._recv_sock.settimeout(0.05)

    def send(self, packet: bytes) -> None:
        parsed = parse_ipv6(packet)
        if parsed is None:
            raise ValueError("not an IPv6 packet")
        _, dst, _, _, payload = parsed
        self._send_sock.sendto(payload, (str(ipaddress.IPv6Address(dst)), 0))

    def receive(self, timeout: float) -> tuple[bytes, float] | None:
        self._recv_sock.settimeout(max(timeout, 1e-4))
        try:
            data = self._recv_sock.recv(65535)
        except (TimeoutError, socket.timeout, BlockingIOError):
            return None
        return data, time.monotonic()

    def close(self) -> None:
        self._send_sock.close()
        self._recv_sock.close()
