"""Detection of automated trading: bursts of same-pair, same-value trades."""

from __future__ import annotations

import csv
import io
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .chainstore import ChainHandle
from .errors import DegenerateCluster
from .match import MatchReport, shift_sort_key
from .model import FixedAmount, ShiftRecord, Thresholds, format_atoms, format_fraction
from .relgraph import RelationGraph

Pair = tuple[str, str]


@dataclass(frozen=True)
class TradingCluster:
    members: tuple[str, ...]  # shift ids in (timestamp, id) order
    pairs: tuple[Pair, ...]  # by descending member count, then name
    bands: tuple[tuple[Pair, FixedAmount], ...]  # value band centre per pair
    start: int
    end: int
    pair_counts: tuple[tuple[Pair, int], ...] = ()

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def dominant(self) -> Pair:
        return self.pairs[0]


def value_bands(values: Iterable[int], tol: Fraction) -> dict[int, int]:
    """Map each value to a band centre.

    Centres are chosen greedily from the smallest value upwards: a centre
    absorbs every larger value within ``tol`` of it.  The result does not
    depend on input order.
    """
    out: dict[int, int] = {}
    centre = None
    for v in sorted(set(values)):
        if centre is None or v - centre > tol * centre:
            centre = v
        out[v] = centre
    return out


def _dense(times: Sequence[int], window: int, min_size: int) -> bool:
    """Whether some closed ``window``-second interval holds ``min_size`` of the sorted ``times``."""
    for i, t in enumerate(times):
        if bisect_right(times, t + window) - i >= min_size:
            return True
    return False


def _segments(shifts: Sequence[ShiftRecord], window: int) -> list[list[ShiftRecord]]:
    """Split time-sorted shifts wherever consecutive members are more than ``window`` apart."""
    out: list[list[ShiftRecord]] = []
    for s in shifts:
        if out and s.timestamp - out[-1][-1].timestamp <= window:
            out[-1].append(s)
        else:
            out.append([s])
    return out


def find_clusters(
    shifts: Iterable[ShiftRecord],
    window: int | None = None,
    min_size: int | None = None,
    tol: Fraction | None = None,
) -> list[TradingCluster]:
    """Maximal same-pair, same-band runs containing a dense burst, merged across pairs.

    Runs are chained while consecutive members (within their pair and band)
    are at most ``window`` seconds apart.  A run qualifies when some
    ``window``-second interval holds ``min_size`` of its members.
    Qualifying runs whose time spans overlap and whose pairs share a
    currency are merged into one cluster.
    """
    th = Thresholds()
    window = th.bot_window if window is None else window
    min_size = th.bot_min_size if min_size is None else min_size
    tol = th.bot_tolerance if tol is None else Fraction(tol)
    uniq: dict[str, ShiftRecord] = {}
    for s in sorted(shifts, key=lambda s: (s.timestamp, shift_sort_key(s.id))):
        uniq.setdefault(s.id, s)
    ordered = sorted(uniq.values(), key=lambda s: (s.timestamp, shift_sort_key(s.id)))

    by_pair: dict[Pair, list[ShiftRecord]] = {}
    for s in ordered:
        by_pair.setdefault(s.pair, []).append(s)

    runs: list[tuple[Pair, int, list[ShiftRecord]]] = []
    for pair in sorted(by_pair):
        rows = by_pair[pair]
        bands = value_bands((s.amt.atoms for s in rows), tol)
        by_band: dict[int, list[ShiftRecord]] = {}
        for s in rows:
            by_band.setdefault(bands[s.amt.atoms], []).append(s)
        for centre in sorted(by_band):
            for seg in _segments(by_band[centre], window):
                if len(seg) >= min_size and _dense([s.timestamp for s in seg], window, min_size):
                    runs.append((pair, centre, seg))
    return [_make_cluster(group) for group in _merge_runs(runs)]


def _merge_runs(runs: list[tuple[Pair, int, list[ShiftRecord]]]) -> list[list[tuple[Pair, int, list[ShiftRecord]]]]:
    parent = list(range(len(runs)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    spans = [(seg[0].timestamp, seg[-1].timestamp) for _, _, seg in runs]
    for i in range(len(runs)):
        for j in range(i + 1, len(runs)):
            (a0, a1), (b0, b1) = spans[i], spans[j]
            if a0 <= b1 and b0 <= a1 and _shares_currency(runs[i][0], runs[j][0]):
                parent[find(i)] = find(j)
    groups: dict[int, list] = {}
    for i in range(len(runs)):
        groups.setdefault(find(i), []).append(runs[i])
    out = list(groups.values())
    out.sort(key=lambda g: min((seg[0].timestamp, shift_sort_key(seg[0].id)) for _, _, seg in g))
    return out


def _shares_currency(a: Pair, b: Pair) -> bool:
    return a[0] == b[0] or a[1] == b[1]


def _make_cluster(group: list[tuple[Pair, int, list[ShiftRecord]]]) -> TradingCluster:
    members = sorted((s for _, _, seg in group for s in seg), key=lambda s: (s.timestamp, shift_sort_key(s.id)))
    counts = Counter(s.pair for s in members)
    pairs = tuple(sorted(counts, key=lambda p: (-counts[p], p)))
    bands = tuple(sorted({(pair, FixedAmount(centre, seg[0].amt.precision)) for pair, centre, seg in group}, key=lambda x: (x[0], x[1].atoms)))
    return TradingCluster(
        members=tuple(s.id for s in members),
        pairs=pairs,
        bands=bands,
        start=members[0].timestamp,
        end=members[-1].timestamp,
        pair_counts=tuple((p, counts[p]) for p in pairs),
    )


def prune_outliers(
    cluster: TradingCluster,
    shifts: Mapping[str, ShiftRecord],
    min_size: int | None = None,
    max_prune: Fraction | None = None,
    window: int | None = None,
) -> TradingCluster:
    """Drop members whose pair is unrelated to the dominant one.

    Kept: the dominant pair and, at most, the largest other pair sharing its
    ``cur_in`` or ``cur_out``.  Pruning more than ``max_prune`` of the
    members, a tie between unrelated pairs, or falling below ``min_size`` (or out of
    burst density) rejects the cluster.
    """
    th = Thresholds()
    min_size = th.bot_min_size if min_size is None else min_size
    max_prune = th.bot_max_prune if max_prune is None else Fraction(max_prune)
    window = th.bot_window if window is None else window
    if not cluster.members:
        raise DegenerateCluster("empty cluster")
    counts = Counter(shifts[m].pair for m in cluster.members)
    ranked = sorted(counts, key=lambda p: (-counts[p], p))
    if len(ranked) > 1 and counts[ranked[0]] == counts[ranked[1]] and not _shares_currency(ranked[0], ranked[1]):
        raise DegenerateCluster(f"no dominant pair among {ranked[:2]}")
    dominant = ranked[0]
    keep = {dominant}
    related = [p for p in ranked[1:] if _shares_currency(p, dominant)]
    if related:
        keep.add(related[0])
    members = [m for m in cluster.members if shifts[m].pair in keep]
    dropped = len(cluster.members) - len(members)
    if Fraction(dropped, len(cluster.members)) > max_prune:
        raise DegenerateCluster(f"pruning would remove {dropped} of {len(cluster.members)} members")
    if len(members) < min_size:
        raise DegenerateCluster(f"only {len(members)} members remain")
    if not _dense(sorted(shifts[m].timestamp for m in members), window, min_size):
        raise DegenerateCluster("remaining members no longer form a burst")
    kept_counts = Counter(shifts[m].pair for m in members)
    pairs = tuple(sorted(kept_counts, key=lambda p: (-kept_counts[p], p)))
    return replace(
        cluster,
        members=tuple(members),
        pairs=pairs,
        bands=tuple(b for b in cluster.bands if b[0] in keep),
        start=shifts[members[0]].timestamp,
        end=shifts[members[-1]].timestamp,
        pair_counts=tuple((p, kept_counts[p]) for p in pairs),
    )


def validate_cluster(cluster: TradingCluster, shifts: Mapping[str, ShiftRecord], window: int | None = None, min_size: int | None = None, tol: Fraction | None = None) -> list[str]:
    """Problems with a cluster's stated invariants (empty when it is sound)."""
    th = Thresholds()
    window = th.bot_window if window is None else window
    min_size = th.bot_min_size if min_size is None else min_size
    tol = th.bot_tolerance if tol is None else Fraction(tol)
    problems = []
    rows = [shifts[m] for m in cluster.members]
    if not _dense(sorted(s.timestamp for s in rows), window, min_size):
        problems.append("no dense window")
    centres = {}
    for pair, c in cluster.bands:
        centres.setdefault(pair, []).append(c.atoms)
    for s in rows:
        if not any(abs(s.amt.atoms - c) <= tol * c for c in centres.get(s.pair, ())):
            problems.append(f"{s.id} outside its value band")
    pairs = {s.pair for s in rows}
    if len(pairs) > 2:
        problems.append("more than two pairs")
    elif len(pairs) == 2:
        a, b = sorted(pairs)
        if not _shares_currency(a, b):
            problems.append("pairs share no currency")
    return problems


# ---------------------------------------------------------------------------
# corroboration


@dataclass
class Corroboration:
    members: int
    resolved: int  # members with at least one matched or surviving deposit
    deposits: int = 0  # distinct deposits reached through matches and survivors
    funding: set[tuple[str, str]] = field(default_factory=set)
    receiving: set[tuple[str, str]] = field(default_factory=set)
    dominant: list[tuple[str, str, int]] = field(default_factory=list)  # (chain, address, deposits)
    graph_in_degree: dict[tuple[str, str], int] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.funding), len(self.receiving)

    def to_json(self) -> dict:
        return {
            "members": self.members,
            "resolved": self.resolved,
            "deposits": self.deposits,
            "funding_addresses": len(self.funding),
            "receiving_addresses": len(self.receiving),
            "dominant": [{"chain": c, "address": a, "members": n} for c, a, n in self.dominant],
            "receiver_in_degree": {f"{c}:{a}": d for (c, a), d in sorted(self.graph_in_degree.items())},
        }


def corroborate(
    cluster: TradingCluster,
    graph: RelationGraph | None,
    report: MatchReport,
    chains: Mapping[str, ChainHandle],
    share: Fraction = Fraction(1, 2),
) -> Corroboration:
    """Endpoints behind a cluster's members, from matches and ambiguous survivors.

    Bot members are often ambiguous (several equal deposits per block).  All
    surviving candidates belong to the same burst, so the report works on
    the distinct deposits reached through matches and survivors.  An address
    is dominant when it takes part in at least ``share`` of those deposits.
    """
    co = Corroboration(members=cluster.size, resolved=0)
    deposits: dict[tuple[str, str, int], tuple[str, str | None]] = {}
    for sid in cluster.members:
        shift = report.shifts.get(sid)
        if shift is None:
            continue
        found = False
        m = report.matches.get(sid)
        if m is not None:
            deposits[(shift.cur_in, m.phase1_tx, m.phase1_index)] = (shift.cur_out, m.addr_u)
            found = True
        for s in report.ambiguous.get(sid, ()):
            deposits[(shift.cur_in, s.hit.tx_id, s.hit.index)] = (shift.cur_out, s.detail.withdraw)
            found = True
        co.resolved += int(found)
    per_deposit: Counter = Counter()
    for (cur_in, tx, _), (cur_out, receiver) in deposits.items():
        touched: set[tuple[str, str]] = set()
        chain = chains.get(cur_in)
        if chain is not None and chain.has_tx(tx):
            touched.update((cur_in, a) for a in chain.input_addresses(tx))
        if receiver:
            touched.add((cur_out, receiver))
        co.funding.update(n for n in touched if n[0] == cur_in)
        co.receiving.update(n for n in touched if n[0] == cur_out)
        per_deposit.update(touched)
    co.deposits = len(deposits)
    need = share * len(deposits)
    co.dominant = sorted(((c, a, n) for (c, a), n in per_deposit.items() if deposits and n >= need), key=lambda x: (-x[2], x[0], x[1]))
    if graph is not None:
        for node in co.receiving:
            if node in graph:
                co.graph_in_degree[node] = graph.in_degree(node)
    return co


def clusters_csv(clusters: Sequence[TradingCluster], shifts: Mapping[str, ShiftRecord], prices: Mapping[str, Fraction] | None = None) -> str:
    """One row per cluster; ``usd`` is filled only when a price table is given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cluster", "pairs", "size", "start", "end", "value_in", "usd"])
    for i, c in enumerate(clusters, 1):
        totals: dict[str, int] = {}
        prec: dict[str, int] = {}
        for m in c.members:
            s = shifts[m]
            totals[s.cur_in] = totals.get(s.cur_in, 0) + s.amt.atoms
            prec[s.cur_in] = s.amt.precision
        value_in = ";".join(f"{cur}:{format_atoms(v, prec[cur])}" for cur, v in sorted(totals.items()))
        usd = ""
        if prices is not None and all(cur in prices for cur in totals):
            total = sum(Fraction(v, 10 ** prec[cur]) * prices[cur] for cur, v in totals.items())
            usd = format_fraction(total)
        w.writerow([i, ";".join(f"{a}_{b}" for a, b in c.pairs), c.size, c.start, c.end, value_in, usd])
    return buf.getvalue()
