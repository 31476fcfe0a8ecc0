"""Turning raw reply streams into per-scan findings.

Everything here is pure data manipulation: match replies back to the probes
that caused them, peel off aliased and self-sourced responses, and reduce
what remains to router observations, visibility across scans, anycast
stability, loop detection, and dataset comparisons.  Inputs are iterables
of ReplyRecord plus the probed target list; nothing touches the network.
"""

from __future__ import annotations

import csv
import ipaddress
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable

from .probe_engine import ERROR_KINDS, ReplyKind, ReplyRecord
from .target_gen import MAX128, Ipv6Prefix, ProbeTarget


def enclosing_prefix(address: int, length: int) -> Ipv6Prefix:
    mask = (MAX128 << (128 - length)) & MAX128 if length else 0
    return Ipv6Prefix(address & mask, length)


def _addresses(targets: Iterable[ProbeTarget | int]) -> list[int]:
    return [t.address if isinstance(t, ProbeTarget) else int(t) for t in targets]


# --- matching -----------------------------------------------------------------


@dataclass
class MatchResult:
    """Replies grouped by the probe that elicited them.

    `outcomes` has an entry for every probed target, empty list included,
    so silence is visible.  Replies whose authenticated payload is missing
    or names an address that was never probed land in `unsolicited`.
    """

    outcomes: dict[int, list[ReplyRecord]]
    unsolicited: list[ReplyRecord]

    def responded(self) -> set[int]:
        return {t for t, recs in self.outcomes.items() if recs}


def match_replies(
    targets: Iterable[ProbeTarget | int], records: Iterable[ReplyRecord]
) -> MatchResult:
    outcomes: dict[int, list[ReplyRecord]] = {a: [] for a in _addresses(targets)}
    unsolicited = []
    for rec in records:
        t = rec.embedded_target
        if t is None or t not in outcomes:
            unsolicited.append(rec)
        else:
            outcomes[t].append(rec)
    return MatchResult(outcomes, unsolicited)


# --- alias and self-reply filtering ---------------------------------------------


@dataclass(frozen=True, order=True)
class RouterObservation:
    """One distinct reply source left after filtering, with its evidence."""

    router_ip: int
    elicited_by: frozenset = field(compare=False)  # of (target, ReplyKind)
    scan_id: int = field(default=0, compare=False)


def alias_filter(
    result: MatchResult,
    aliased: Iterable[Ipv6Prefix] = (),
    scan_id: int = 0,
) -> list[RouterObservation]:
    """Reduce matched replies to router addresses.

    Drops replies that come from the probed address itself (a host, or an
    aliased network answering for everything) and replies sourced inside a
    known aliased prefix.  What remains are third-party sources: routers
    speaking for the probed subnet.  Sorted by address for determinism.
    """
    aliased = list(aliased)
    evidence: dict[int, set] = defaultdict(set)
    for target, recs in result.outcomes.items():
        for rec in recs:
            if rec.source == target:
                continue
            if any(p.covers_address(rec.source) for p in aliased):
                continue
            evidence[rec.source].add((target, rec.kind))
    return [
        RouterObservation(router_ip=ip, elicited_by=frozenset(ev), scan_id=scan_id)
        for ip, ev in sorted(evidence.items())
    ]


# --- per-scan summary ------------------------------------------------------------


@dataclass(frozen=True)
class ScanSummary:
    targets_probed: int
    replies_total: int
    echo_replies: int
    error_replies: int
    distinct_sources: int
    echo_only_sources: int
    error_only_sources: int
    mixed_sources: int
    reply_rate: float


def summarize_scan(result: MatchResult) -> ScanSummary:
    echo = error = 0
    kinds_by_source: dict[int, set[ReplyKind]] = defaultdict(set)
    matched = 0
    for recs in result.outcomes.values():
        for rec in recs:
            matched += 1
            kinds_by_source[rec.source].add(rec.kind)
            if rec.kind is ReplyKind.ECHO_REPLY:
                echo += 1
            elif rec.kind in ERROR_KINDS:
                error += 1
    echo_only = error_only = mixed = 0
    for kinds in kinds_by_source.values():
        has_echo = ReplyKind.ECHO_REPLY in kinds
        has_error = bool(kinds & ERROR_KINDS)
        if has_echo and has_error:
            mixed += 1
        elif has_echo:
            echo_only += 1
        else:
            error_only += 1
    n = len(result.outcomes)
    return ScanSummary(
        targets_probed=n,
        replies_total=matched + len(result.unsolicited),
        echo_replies=echo,
        error_replies=error,
        distinct_sources=len(kinds_by_source),
        echo_only_sources=echo_only,
        error_only_sources=error_only,
        mixed_sources=mixed,
        reply_rate=(len(result.responded()) / n) if n else 0.0,
    )


# --- cross-scan visibility --------------------------------------------------------


@dataclass(frozen=True)
class VisibilityReport:
    scans: int
    always: frozenset
    sometimes: frozenset
    never: frozenset
    histogram: dict[int, int]  # number of scans present -> router count


def build_visibility_matrix(per_scan_sources: list[set[int]]) -> dict[int, list[bool]]:
    universe = set().union(*per_scan_sources) if per_scan_sources else set()
    return {
        ip: [ip in scan for scan in per_scan_sources] for ip in sorted(universe)
    }


def visibility(matrix: dict[int, list[bool]]) -> VisibilityReport:
    """Partition routers by how consistently they appear across scans."""
    lengths = {len(row) for row in matrix.values()}
    if len(lengths) > 1:
        raise ValueError("ragged visibility matrix")
    scans = lengths.pop() if lengths else 0
    if scans < 2:
        raise ValueError("visibility needs at least two scans")
    always, sometimes, never = set(), set(), set()
    histogram: Counter = Counter()
    for ip, row in matrix.items():
        seen = sum(row)
        histogram[seen] += 1
        if seen == scans:
            always.add(ip)
        elif seen == 0:
            never.add(ip)
        else:
            sometimes.add(ip)
    return VisibilityReport(
        scans=scans,
        always=frozenset(always),
        sometimes=frozenset(sometimes),
        never=frozenset(never),
        histogram=dict(sorted(histogram.items())),
    )


# --- anycast answer stability -----------------------------------------------------


def stability_mapping(
    result: MatchResult, aliased: Iterable[Ipv6Prefix] = ()
) -> dict[int, int | None]:
    """Per target: the address that answered for it, or None.

    Echo Reply sources win over error sources; ties break to the lowest
    address so repeated runs agree.
    """
    aliased = list(aliased)
    out: dict[int, int | None] = {}
    for target, recs in result.outcomes.items():
        echo, other = [], []
        for rec in recs:
            if any(p.covers_address(rec.source) for p in aliased):
                continue
            (echo if rec.kind is ReplyKind.ECHO_REPLY else other).append(rec.source)
        pool = echo or other
        out[target] = min(pool) if pool else None
    return out


@dataclass(frozen=True)
class StabilityRow:
    scan_index: int
    same: float
    changed: float
    no_response: float


def sra_stability(
    scans: list[dict[int, int | None]], baseline: str = "first"
) -> list[StabilityRow]:
    """Fraction of targets answered by the same source as the baseline scan.

    `baseline` is "first" (compare every later scan to scan 0) or
    "previous" (compare to the scan immediately before).  A target counts
    as `same` only when both scans got an answer and it came from the same
    address; `no_response` when the later scan got nothing; `changed`
    otherwise.  The three fractions sum to 1 per row.
    """
    if baseline not in ("first", "previous"):
        raise ValueError(f"unknown baseline {baseline!r}")
    if len(scans) < 2:
        raise ValueError("stability needs at least two scans")
    keys = set(scans[0])
    for i, scan in enumerate(scans[1:], start=1):
        if set(scan) != keys:
            raise ValueError(f"scan {i} probed a different target set")
    if not keys:
        raise ValueError("stability needs at least one target")
    rows = []
    for i in range(1, len(scans)):
        ref = scans[0] if baseline == "first" else scans[i - 1]
        cur = scans[i]
        same = changed = silent = 0
        for t in keys:
            if cur[t] is None:
                silent += 1
            elif ref[t] is not None and cur[t] == ref[t]:
                same += 1
            else:
                changed += 1
        n = len(keys)
        rows.append(StabilityRow(i, same / n, changed / n, silent / n))
    return rows


# --- loop detection ---------------------------------------------------------------


@dataclass(frozen=True)
class LoopSource:
    looping_subnets: int
    amplification: int  # most Time Exceeded replies one probe pulled from it


@dataclass(frozen=True)
class LoopReport:
    looping_subnets: frozenset  # of Ipv6Prefix
    per_router: dict[int, LoopSource]


def detect_loops(
    result: MatchResult, subnet_length: int = 48, min_time_exceeded: int = 1
) -> LoopReport:
    """Find subnets whose probes expired in transit, and who ate the hops.

    A target whose replies include at least `min_time_exceeded` Time
    Exceeded messages marks its enclosing subnet as looping.  Per reply
    source, reports how many looping subnets it participated in and the
    worst per-probe amplification (replies per single probe).
    """
    looping: set[Ipv6Prefix] = set()
    subnets_by_router: dict[int, set[Ipv6Prefix]] = defaultdict(set)
    worst_by_router: Counter = Counter()
    for target, recs in result.outcomes.items():
        te = [r for r in recs if r.kind is ReplyKind.TIME_EXCEEDED]
        if len(te) < min_time_exceeded:
            continue
        subnet = enclosing_prefix(target, subnet_length)
        looping.add(subnet)
        per_source = Counter(r.source for r in te)
        for source, count in per_source.items():
            subnets_by_router[source].add(subnet)
            worst_by_router[source] = max(worst_by_router[source], count)
    return LoopReport(
        looping_subnets=frozenset(looping),
        per_router={
            ip: LoopSource(len(subnets_by_router[ip]), worst_by_router[ip])
            for ip in sorted(subnets_by_router)
        },
    )


# --- longest-prefix labeling ------------------------------------------------------


class PrefixTable:
    """Longest-prefix-match labeling, e.g. address -> origin network name."""

    def __init__(
        self,
        entries: Iterable[tuple[Ipv6Prefix, str]] = (),
        default: str = "unknown",
    ):
        self.default = default
        self._by_length: dict[int, dict[int, str]] = {}
        for prefix, label in entries:
            self.add(prefix, label)

    def add(self, prefix: Ipv6Prefix, label: str) -> None:
        self._by_length.setdefault(prefix.length, {})[prefix.bits] = label

    def __len__(self) -> int:
        return sum(len(b) for b in self._by_length.values())

    def lookup(self, address: int) -> str:
        for length in sorted(self._by_length, reverse=True):
            mask = (MAX128 << (128 - length)) & MAX128 if length else 0
            label = self._by_length[length].get(address & mask)
            if label is not None:
                return label
        return self.default

    def covers(self, address: int) -> bool:
        for length, bucket in self._by_length.items():
            mask = (MAX128 << (128 - length)) & MAX128 if length else 0
            if (address & mask) in bucket:
                return True
        return False

    @classmethod
    def from_csv(cls, path, default: str = "unknown") -> "PrefixTable":
        """Rows of `prefix,label`; blank lines and # comments skipped."""
        from .target_gen import parse_prefix

        table = cls(default=default)
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                try:
                    prefix_text, label = line.split(",", 1)
                    table.add(parse_prefix(prefix_text.strip()), label.strip())
                except ValueError as exc:
                    raise ValueError(f"line {lineno}: {exc}") from None
        return table


# --- dataset comparison -----------------------------------------------------------


@dataclass
class ComparisonReport:
    """Exact overlap structure of several address sets.

    `exclusive` is keyed by the sorted tuple of set names an address
    belongs to, so the values partition the union: they always sum to
    `union_size`.
    """

    sizes: dict[str, int]
    union_size: int
    exclusive: dict[tuple[str, ...], int]
    pairwise: dict[tuple[str, str], int]
    by_label: dict[str, dict[str, int]] | None = None


def compare_datasets(
    named_sets: dict[str, Iterable[int]],
    table: PrefixTable | None = None,
) -> ComparisonReport:
    if len(named_sets) < 2:
        raise ValueError("comparison needs at least two sets")
    names = sorted(named_sets)
    sets = {name: set(named_sets[name]) for name in names}
    union = set().union(*sets.values())
    exclusive: Counter = Counter()
    for address in union:
        members = tuple(n for n in names if address in sets[n])
        exclusive[members] += 1
    pairwise = {
        (a, b): len(sets[a] & sets[b])
        for i, a in enumerate(names)
        for b in names[i + 1 :]
    }
    by_label = None
    if table is not None:
        by_label = defaultdict(lambda: {name: 0 for name in names})
        for name in names:
            for address in sets[name]:
                by_label[table.lookup(address)][name] += 1
        by_label = dict(sorted(by_label.items()))
    return ComparisonReport(
        sizes={n: len(sets[n]) for n in names},
        union_size=len(union),
        exclusive=dict(sorted(exclusive.items())),
        pairwise=pairwise,
        by_label=by_label,
    )


# --- CSV output -------------------------------------------------------------------


def _fmt_ip(address: int) -> str:
    return str(ipaddress.IPv6Address(address))


def write_summary_csv(summaries: dict[str, ScanSummary], path) -> None:
    fields = [
        "scan",
        "targets_probed",
        "replies_total",
        "echo_replies",
        "error_replies",
        "distinct_sources",
        "echo_only_sources",
        "error_only_sources",
        "mixed_sources",
        "reply_rate",
    ]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for scan, s in summaries.items():
            row = {"scan": scan}
            row.update({f: getattr(s, f) for f in fields[1:]})
            w.writerow(row)


def write_visibility_csv(report: VisibilityReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scans_present", "routers"])
        for seen, count in report.histogram.items():
            w.writerow([seen, count])


def write_stability_csv(rows: list[StabilityRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scan_index", "same", "changed", "no_response"])
        for row in rows:
            w.writerow([row.scan_index, row.same, row.changed, row.no_response])


def write_loops_csv(report: LoopReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["router", "looping_subnets", "amplification"])
        for ip, src in report.per_router.items():
            w.writerow([_fmt_ip(ip), src.looping_subnets, src.amplification])


def write_comparison_csv(report: ComparisonReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["member_of", "addresses"])
        for members, count in report.exclusive.items():
            w.writerow(["+".join(members), count])
