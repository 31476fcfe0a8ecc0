"""Probe target generation for subnet-router anycast (SRA) scanning.

The subnet-router anycast address of a prefix is the prefix with all host
bits zero (RFC 4291 section 2.6.1).  Every generator below emits SRA
addresses derived from routing data (announced prefixes) or from a hitlist
of known-active host addresses.

Generators are lazy: they yield targets one by one and never materialize a
full target list, so prefix sets that expand to billions of addresses can
be streamed to a sender or counted.  Deduplication is exact and runs on
interval arithmetic over subnet index space, not on per-address sets.
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import ipaddress
import random
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

MAX128 = (1 << 128) - 1


class Stage(enum.Enum):
    """Which generation rule produced a target."""

    BGP_AS_ANNOUNCED = "bgp_as_announced"
    BGP_48 = "bgp48"
    BGP_64 = "bgp64"
    ROUTE6_RANDOM_64 = "route6_random64"
    HITLIST_64 = "hitlist64"


# Subnet length implied by each stage; None means "length of the origin prefix".
_STAGE_SUBNET_LEN = {
    Stage.BGP_AS_ANNOUNCED: None,
    Stage.BGP_48: 48,
    Stage.BGP_64: 64,
    Stage.ROUTE6_RANDOM_64: 64,
    Stage.HITLIST_64: 64,
}


@dataclass(frozen=True, slots=True)
class Ipv6Prefix:
    """A canonical IPv6 prefix: `bits` is a 128-bit integer, host bits zero.

    Non-canonical values (host bits set) are rejected rather than silently
    masked, so a typo in routing data surfaces instead of generating a
    bogus target range.
    """

    bits: int
    length: int

    def __post_init__(self):
        if not 0 <= self.length <= 128:
            raise ValueError(f"prefix length {self.length} out of range 0..128")
        if not 0 <= self.bits <= MAX128:
            raise ValueError("prefix bits out of 128-bit range")
        if self.bits & self.host_mask():
            raise ValueError(
                f"{ipaddress.IPv6Address(self.bits)}/{self.length} has host bits set"
            )

    def host_mask(self) -> int:
        return (1 << (128 - self.length)) - 1

    @property
    def sra(self) -> int:
        """The subnet-router anycast address: all host bits zero."""
        return self.bits

    def covers_address(self, address: int) -> bool:
        return (address & ~self.host_mask()) & MAX128 == self.bits

    def covers(self, other: "Ipv6Prefix") -> bool:
        return other.length >= self.length and self.covers_address(other.bits)

    def supernet(self, length: int) -> "Ipv6Prefix":
        if length > self.length:
            raise ValueError(f"cannot widen /{self.length} to /{length}")
        mask = ~((1 << (128 - length)) - 1) & MAX128
        return Ipv6Prefix(self.bits & mask, length)

    def subnet_index(self, sublen: int) -> int:
        """Index of this prefix's first /sublen subnet within the whole space."""
        return self.bits >> (128 - sublen)

    def subnet_count(self, sublen: int) -> int:
        """Number of /sublen subnets inside this prefix (0 if prefix is longer)."""
        if sublen < self.length:
            return 0
        return 1 << (sublen - self.length)

    def __str__(self) -> str:
        return f"{ipaddress.IPv6Address(self.bits)}/{self.length}"


@dataclass(frozen=True, slots=True)
class ProbeTarget:
    """One SRA address to probe, with provenance."""

    address: int
    origin: Ipv6Prefix
    stage: Stage

    def __post_init__(self):
        sublen = self.subnet_length
        if self.address & ((1 << (128 - sublen)) - 1):
            raise ValueError(
                f"target {ipaddress.IPv6Address(self.address)} has host bits "
                f"set below /{sublen}"
            )
        if not self.origin.covers_address(self.address):
            raise ValueError(
                f"target {ipaddress.IPv6Address(self.address)} not covered by "
                f"origin {self.origin}"
            )

    @property
    def subnet_length(self) -> int:
        return _STAGE_SUBNET_LEN[self.stage] or self.origin.length

    def __str__(self) -> str:
        return str(ipaddress.IPv6Address(self.address))


@dataclass(frozen=True)
class GenerationConfig:
    route6_samples_per_prefix: int = 10_000
    rng_seed: int = 0
    max_targets: int | None = None

    def __post_init__(self):
        if self.route6_samples_per_prefix < 1:
            raise ValueError("route6_samples_per_prefix must be >= 1")
        if not 0 <= self.rng_seed < (1 << 64):
            raise ValueError("rng_seed must fit in 64 bits")
        if self.max_targets is not None and self.max_targets < 0:
            raise ValueError("max_targets must be >= 0")


def parse_prefix(text: str) -> Ipv6Prefix:
    """Parse `addr/len` or a bare address (treated as /128).

    Rejects malformed addresses, out-of-range lengths and prefixes with
    host bits set.
    """
    text = text.strip()
    if "/" in text:
        addr_part, _, len_part = text.partition("/")
        try:
            length = int(len_part)
        except ValueError:
            raise ValueError(f"bad prefix length {len_part!r}") from None
    else:
        addr_part, length = text, 128
    addr = ipaddress.IPv6Address(addr_part)
    return Ipv6Prefix(int(addr), length)


def parse_address(text: str) -> int:
    """Parse a bare IPv6 address (hitlist line format)."""
    text = text.strip()
    if "/" in text:
        raise ValueError(f"expected a bare address, got {text!r}")
    return int(ipaddress.IPv6Address(text))


def sra_address(prefix: Ipv6Prefix) -> int:
    """Subnet-router anycast address of a prefix (host bits all zero)."""
    return prefix.sra


class _IntervalSet:
    """Sorted disjoint half-open [start, end) intervals over subnet indices.

    Memory stays proportional to the number of distinct prefix ranges seen,
    never to the number of addresses covered.
    """

    def __init__(self):
        self._starts: list[int] = []
        self._ends: list[int] = []

    def add(self, start: int, end: int) -> list[tuple[int, int]]:
        """Insert [start, end); return the sub-ranges that were not yet covered."""
        if start >= end:
            return []
        starts, ends = self._starts, self._ends
        i = bisect.bisect_left(starts, start)
        if i > 0 and ends[i - 1] >= start:
            i -= 1
        j = i
        gaps = []
        cur = start
        while j < len(starts) and starts[j] <= end:
            if starts[j] > cur:
                gaps.append((cur, starts[j]))
            cur = max(cur, ends[j])
            j += 1
        if cur < end:
            gaps.append((cur, end))
        if i < j:
            new_start = min(start, starts[i])
            new_end = max(end, ends[j - 1])
        else:
            new_start, new_end = start, end
        starts[i:j] = [new_start]
        ends[i:j] = [new_end]
        return gaps

    def covers(self, index: int) -> bool:
        i = bisect.bisect_right(self._starts, index) - 1
        return i >= 0 and index < self._ends[i]

    def overlaps(self, start: int, end: int) -> bool:
        i = bisect.bisect_right(self._starts, start) - 1
        if i >= 0 and start < self._ends[i]:
            return True
        i += 1
        return i < len(self._starts) and self._starts[i] < end

    def total(self) -> int:
        return sum(e - s for s, e in zip(self._starts, self._ends))


def _dedup_prefixes(prefixes: Iterable[Ipv6Prefix]) -> list[Ipv6Prefix]:
    seen = set()
    out = []
    for p in prefixes:
        key = (p.bits, p.length)
        if key not in seen:
            seen.add(key)
            out.append(p)
    return out


def gen_stage1(prefixes: Iterable[Ipv6Prefix]) -> Iterator[ProbeTarget]:
    """SRA address of every announced prefix, as announced.

    One target per distinct input prefix; prefixes of different length that
    share an SRA address (a /32 and its first /48) collapse to the first
    occurrence, so the stream never repeats an address.
    """
    seen: set[int] = set()
    for p in prefixes:
        if p.sra not in seen:
            seen.add(p.sra)
            yield ProbeTarget(p.sra, p, Stage.BGP_AS_ANNOUNCED)


def _stage2_plan(
    prefixes: Sequence[Ipv6Prefix],
) -> tuple[list[tuple[Ipv6Prefix, int, int]], _IntervalSet]:
    """Work list for the /48 partition: (origin, start, end) index ranges.

    Ranges follow input order and are already deduplicated.  A prefix longer
    than /48 contributes its /48 supernet only when no announcement of
    length <= 48 covers that /48.
    """
    covered_le48 = _IntervalSet()
    for p in prefixes:
        if p.length <= 48:
            start = p.subnet_index(48)
            covered_le48.add(start, start + p.subnet_count(48))
    emitted = _IntervalSet()
    plan = []
    for p in prefixes:
        if p.length <= 48:
            start = p.subnet_index(48)
            for s, e in emitted.add(start, start + p.subnet_count(48)):
                plan.append((p, s, e))
        else:
            sup = p.supernet(48)
            idx = sup.subnet_index(48)
            if covered_le48.covers(idx):
                continue
            for s, e in emitted.add(idx, idx + 1):
                plan.append((p, s, e))
    return plan, emitted


def gen_stage2(prefixes: Iterable[Ipv6Prefix]) -> Iterator[ProbeTarget]:
    """Partition announcements into /48 subnets and emit each SRA once.

    A prefix of length L <= 48 yields its 2^(48-L) component /48s.  A more
    specific announcement (L > 48) yields the SRA of its covering /48,
    unless another announcement of length <= 48 already covers that /48, in
    which case it yields nothing.  Overlaps are deduplicated at the target
    level, so nested announcements emit the union of their /48s exactly once.
    """
    plan, _ = _stage2_plan(_dedup_prefixes(prefixes))
    for origin, start, end in plan:
        if origin.length > 48:
            sup = origin.supernet(48)
            for idx in range(start, end):
                yield ProbeTarget(idx << 80, sup, Stage.BGP_48)
        else:
            for idx in range(start, end):
                yield ProbeTarget(idx << 80, origin, Stage.BGP_48)


def count_stage2(prefixes: Iterable[Ipv6Prefix]) -> int:
    """Exact size of the gen_stage2 stream, without enumerating it."""
    _, emitted = _stage2_plan(_dedup_prefixes(prefixes))
    return emitted.total()


def _stage3_distinct(prefixes: Iterable[Ipv6Prefix]) -> list[Ipv6Prefix]:
    return [p for p in _dedup_prefixes(prefixes) if p.length == 48]


def gen_stage3(prefixes: Iterable[Ipv6Prefix]) -> Iterator[ProbeTarget]:
    """Partition exact /48 announcements into their 2^16 /64 subnets.

    Only inputs of length exactly 48 contribute; anything shorter would
    explode combinatorially and anything longer is already more specific
    than the /64 grain this stage probes.
    """
    for p in _stage3_distinct(prefixes):
        base = p.subnet_index(64)
        for idx in range(base, base + (1 << 16)):
            yield ProbeTarget(idx << 64, p, Stage.BGP_64)


def count_stage3(prefixes: Iterable[Ipv6Prefix]) -> int:
    """Exact size of the gen_stage3 stream: 2^16 per distinct /48 input."""
    return len(_stage3_distinct(prefixes)) << 16


def _prefix_rng(seed: int, prefix: Ipv6Prefix) -> random.Random:
    """Deterministic per-prefix generator.

    Derived from the global seed and the prefix itself so that output for a
    prefix does not depend on which other prefixes share the run; disjoint
    shards of one prefix list can be generated in parallel.
    """
    material = struct.pack(">Q16sB", seed, prefix.bits.to_bytes(16, "big"), prefix.length)
    digest = hashlib.blake2b(material, digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "big"))


def _route6_contested(prefixes: Sequence[Ipv6Prefix]) -> _IntervalSet:
    """Regions of /64 index space covered by more than one input prefix.

    Cross-prefix duplicate suppression only needs memory for addresses that
    fall inside these regions; disjoint inputs need none at all.
    """
    events = []
    for p in prefixes:
        start = p.subnet_index(64) if p.length <= 64 else p.supernet(64).subnet_index(64)
        count = max(p.subnet_count(64), 1)
        events.append((start, 1))
        events.append((start + count, -1))
    events.sort()
    contested = _IntervalSet()
    depth = 0
    seg_start = 0
    for pos, delta in events:
        if depth >= 2 and pos > seg_start:
            contested.add(seg_start, pos)
        depth += delta
        seg_start = pos
    return contested


def _route6_indices(prefix: Ipv6Prefix, cfg: GenerationConfig) -> list[int]:
    """Sampled /64 indices for one prefix (absolute, deterministic order)."""
    base = prefix.subnet_index(64)
    space = prefix.subnet_count(64)
    k = min(cfg.route6_samples_per_prefix, space)
    rng = _prefix_rng(cfg.rng_seed, prefix)
    return [base + off for off in rng.sample(range(space), k)]


def gen_route6(
    prefixes: Iterable[Ipv6Prefix], cfg: GenerationConfig
) -> Iterator[ProbeTarget]:
    """Sample random /64 SRA addresses inside each routed prefix.

    Each prefix of length L <= 64 yields min(cfg.route6_samples_per_prefix,
    2^(64-L)) distinct /64 SRAs, sampled without replacement with a
    deterministic per-prefix generator.  Prefixes longer than /64 yield the
    SRA of their /64 supernet.  When inputs overlap, an address sampled for
    two prefixes is emitted only for the first: the stream never repeats.
    """
    deduped = _dedup_prefixes(prefixes)
    contested = _route6_contested(deduped)
    seen_contested: set[int] = set()
    for p in deduped:
        if p.length <= 64:
            indices = _route6_indices(p, cfg)
            origin = p
        else:
            origin = p.supernet(64)
            indices = [origin.subnet_index(64)]
        for idx in indices:
            if contested.covers(idx):
                if idx in seen_contested:
                    continue
                seen_contested.add(idx)
            yield ProbeTarget(idx << 64, origin, Stage.ROUTE6_RANDOM_64)


def count_route6(prefixes: Iterable[Ipv6Prefix], cfg: GenerationConfig) -> int:
    """Exact size of the gen_route6 stream.

    Pure arithmetic for prefixes that do not overlap any other input; only
    prefixes touching a contested region re-run their sampler to count
    cross-prefix duplicates.
    """
    deduped = _dedup_prefixes(prefixes)
    contested = _route6_contested(deduped)
    seen_contested: set[int] = set()
    total = 0
    for p in deduped:
        if p.length <= 64:
            base = p.subnet_index(64)
            space = p.subnet_count(64)
            if not contested.overlaps(base, base + space):
                total += min(cfg.route6_samples_per_prefix, space)
                continue
            indices = _route6_indices(p, cfg)
        else:
            indices = [p.supernet(64).subnet_index(64)]
        for idx in indices:
            if contested.covers(idx):
                if idx in seen_contested:
                    continue
                seen_contested.add(idx)
            total += 1
    return total


def gen_from_hitlist(addresses: Iterable[int]) -> Iterator[ProbeTarget]:
    """Mask active host addresses to their /64 and emit each SRA once."""
    seen: set[int] = set()
    for addr in addresses:
        idx = addr >> 64
        if idx in seen:
            continue
        seen.add(idx)
        yield ProbeTarget(idx << 64, Ipv6Prefix(idx << 64, 64), Stage.HITLIST_64)


def count_hitlist(addresses: Iterable[int]) -> int:
    """Number of distinct /64s in a hitlist."""
    return len({addr >> 64 for addr in addresses})


def gen_bgp_all(prefixes: Iterable[Ipv6Prefix]) -> Iterator[ProbeTarget]:
    """Stages 1-3 back to back with cross-stage address deduplication.

    Priority follows emission order: an address produced by an earlier stage
    suppresses the same address from a later one.
    """
    prefixes = _dedup_prefixes(prefixes)
    stage1_addrs: set[int] = set()
    for t in gen_stage1(prefixes):
        stage1_addrs.add(t.address)
        yield t
    plan, emitted48 = _stage2_plan(prefixes)
    for origin, start, end in plan:
        origin48 = origin.supernet(48) if origin.length > 48 else origin
        for idx in range(start, end):
            addr = idx << 80
            if addr in stage1_addrs:
                continue
            yield ProbeTarget(addr, origin48, Stage.BGP_48)
    for p in _stage3_distinct(prefixes):
        base = p.subnet_index(64)
        for idx in range(base, base + (1 << 16)):
            addr = idx << 64
            if addr in stage1_addrs:
                continue
            if idx & 0xFFFF == 0 and emitted48.covers(idx >> 16):
                continue
            yield ProbeTarget(addr, p, Stage.BGP_64)


def count_bgp_all(prefixes: Iterable[Ipv6Prefix]) -> dict[str, int]:
    """Per-stage counts plus the deduplicated total for stages 1-3 combined."""
    prefixes = _dedup_prefixes(prefixes)
    stage1_addrs = {t.address for t in gen_stage1(prefixes)}
    plan, emitted48 = _stage2_plan(prefixes)
    c1 = len(stage1_addrs)
    c2 = emitted48.total()
    stage3_48s = _stage3_distinct(prefixes)
    c3 = len(stage3_48s) << 16
    s1_in_s2 = sum(
        1
        for a in stage1_addrs
        if a & ((1 << 80) - 1) == 0 and emitted48.covers(a >> 80)
    )
    stage3_set = {p.subnet_index(48) for p in stage3_48s}
    s1_in_s3 = sum(
        1
        for a in stage1_addrs
        if a & ((1 << 64) - 1) == 0 and (a >> 64) >> 16 in stage3_set
    )
    s2_in_s3 = sum(1 for idx48 in stage3_set if emitted48.covers(idx48))
    s1_in_both = sum(
        1
        for a in stage1_addrs
        if a & ((1 << 64) - 1) == 0
        and (a >> 64) & 0xFFFF == 0
        and (a >> 80) in stage3_set
        and emitted48.covers(a >> 80)
    )
    dedup = c1 + (c2 - s1_in_s2) + (c3 - (s1_in_s3 + s2_in_s3 - s1_in_both))
    return {
        "stage1": c1,
        "stage2": c2,
        "stage3": c3,
        "deduplicated_total": dedup,
    }


def read_prefix_file(lines: Iterable[str]) -> Iterator[Ipv6Prefix]:
    """Parse one CIDR prefix per line; blank lines and # comments skipped.

    Raises ValueError naming the offending line number.
    """
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            yield parse_prefix(line)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None


def read_hitlist_file(lines: Iterable[str]) -> Iterator[int]:
    """Parse one bare IPv6 address per line, same conventions as prefixes."""
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            yield parse_address(line)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None


def target_line(target: ProbeTarget) -> str:
    """Plain-text output format: one compressed address."""
    return str(ipaddress.IPv6Address(target.address))


def target_record(target: ProbeTarget) -> dict:
    """NDJSON output format with provenance."""
    return {
        "address": str(ipaddress.IPv6Address(target.address)),
        "origin": str(target.origin),
        "stage": target.stage.value,
    }
