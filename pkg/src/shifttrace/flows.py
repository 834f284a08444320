"""Cross-ledger flow patterns built on validated matches.

A pass-through is one fully linked trade: deposit inputs on ``cur_in`` and
the recipient on ``cur_out``.  A U-turn chains a trade X→Y to a Y→X trade
made shortly afterwards with roughly the value just received.  A round-trip
is a U-turn whose second leg returns almost exactly that value.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .chainstore import ChainHandle
from .match import Grade, MatchResult, shift_sort_key
from .model import FixedAmount, Thresholds, UtxoRef, relative_diff

UTURN_LABELS = ("basic", "address", "utxo")


@dataclass(frozen=True)
class PassThrough:
    shift_id: str
    cur_in: str
    cur_out: str
    timestamp: int
    amt: FixedAmount
    out_coin: FixedAmount | None
    phase1: UtxoRef
    phase2: UtxoRef | None  # index -1 when the withdrawal has no transparent recipient output
    addr_s: str
    addr_u: str | None
    input_addresses: tuple[str, ...]
    output_addresses: tuple[str, ...]
    withdraw_time: int | None


def link_passthroughs(matches: Iterable[MatchResult], chains: Mapping[str, ChainHandle] | None = None) -> list[PassThrough]:
    """One pass-through per augmented match, sorted by ``(timestamp, shift_id)``.

    Input addresses come from the deposit transaction when its ledger is
    loaded; otherwise they are left empty.
    """
    chains = chains or {}
    seen: dict[str, MatchResult] = {}
    for m in matches:
        if m.grade is Grade.AUGMENTED:
            seen.setdefault(m.shift_id, m)
    out = []
    for m in seen.values():
        cin = chains.get(m.cur_in)
        inputs = cin.input_addresses(m.phase1_tx) if cin is not None and cin.has_tx(m.phase1_tx) else ()
        p2 = None
        w_time = None
        if m.phase2_tx is not None:
            p2 = UtxoRef(m.phase2_tx, -1 if m.phase2_index is None else m.phase2_index)
            cout = chains.get(m.cur_out)
            if cout is not None and cout.has_tx(m.phase2_tx):
                w_time = cout._times_list[cout.tx_height_of(m.phase2_tx)]
        out.append(
            PassThrough(
                shift_id=m.shift_id,
                cur_in=m.cur_in,
                cur_out=m.cur_out,
                timestamp=m.timestamp,
                amt=m.amt,
                out_coin=m.out_coin,
                phase1=UtxoRef(m.phase1_tx, m.phase1_index),
                phase2=p2,
                addr_s=m.addr_s,
                addr_u=m.addr_u,
                input_addresses=tuple(inputs),
                output_addresses=(m.addr_u,) if m.addr_u else (),
                withdraw_time=w_time,
            )
        )
    out.sort(key=lambda p: (p.timestamp, shift_sort_key(p.shift_id)))
    return out


def heatmap(passthroughs: Iterable[PassThrough]) -> dict[tuple[str, str], int]:
    return dict(Counter((p.cur_in, p.cur_out) for p in passthroughs))


def heatmap_csv(counts: Mapping[tuple[str, str], int]) -> str:
    """Matrix of pass-through counts (rows ``cur_in``, columns ``cur_out``) with totals."""
    rows = sorted({a for a, _ in counts})
    cols = sorted({b for _, b in counts})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cur_in", *cols, "total"])
    for r in rows:
        vals = [counts.get((r, c), 0) for c in cols]
        w.writerow([r, *vals, sum(vals)])
    col_tot = [sum(counts.get((r, c), 0) for r in rows) for c in cols]
    w.writerow(["total", *col_tot, sum(col_tot)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# U-turns


@dataclass(frozen=True)
class UTurn:
    first: str
    second: str
    cur_x: str
    cur_y: str
    tx1: UtxoRef | None  # withdrawal of the first trade
    tx2: UtxoRef  # deposit of the second trade
    labels: tuple[str, ...]
    value_diff: Fraction
    gap: int

    @property
    def chain(self) -> str:
        return self.cur_y

    def has(self, label: str) -> bool:
        return label in self.labels


def _reversal(first: PassThrough, second: PassThrough, window: int) -> bool:
    return (
        first.cur_in == second.cur_out
        and first.cur_out == second.cur_in
        and 0 < second.timestamp - first.timestamp <= window
        and first.out_coin is not None
        and first.out_coin.atoms > 0
        and first.out_coin.precision == second.amt.precision
    )


def uturn_labels(first: PassThrough, second: PassThrough, chains: Mapping[str, ChainHandle]) -> tuple[str, ...]:
    """Labels beyond ``basic`` follow from the ledger, each checked on its own."""
    labels = ["basic"]
    chain = chains.get(second.cur_in)
    if chain is None or not chain.has_tx(second.phase1.tx_id):
        return tuple(labels)
    if first.addr_u is not None and first.addr_u in chain.input_addresses(second.phase1.tx_id):
        labels.append("address")
    if chain.config.is_utxo and first.phase2 is not None and first.phase2.index >= 0:
        if first.phase2 in chain.input_refs(second.phase1.tx_id):
            labels.append("utxo")
    return tuple(labels)


def detect_uturns(
    passthroughs: Sequence[PassThrough],
    chains: Mapping[str, ChainHandle] | None = None,
    window: int | None = None,
    tol: Fraction | None = None,
) -> list[UTurn]:
    """Pair X→Y trades with Y→X trades made within ``window`` seconds carrying ``tol`` of ``out_coin``.

    First legs are taken in time order and each claims the earliest
    eligible unclaimed second leg, so no trade appears in two U-turns.
    """
    th = Thresholds()
    window = th.uturn_window if window is None else window
    tol = th.uturn_tolerance if tol is None else Fraction(tol)
    chains = chains or {}
    order = sorted(passthroughs, key=lambda p: (p.timestamp, shift_sort_key(p.shift_id)))
    by_pair: dict[tuple[str, str], list[PassThrough]] = {}
    for p in order:
        by_pair.setdefault((p.cur_in, p.cur_out), []).append(p)
    claimed: set[str] = set()
    used_first: set[str] = set()
    out = []
    for first in order:
        if first.shift_id in claimed or first.out_coin is None:
            continue
        for second in by_pair.get((first.cur_out, first.cur_in), ()):
            if second.timestamp <= first.timestamp:
                continue
            if second.timestamp - first.timestamp > window:
                break
            if second.shift_id in claimed or second.shift_id in used_first or not _reversal(first, second, window):
                continue
            diff = relative_diff(second.amt, first.out_coin)
            if diff > tol:
                continue
            claimed.add(second.shift_id)
            used_first.add(first.shift_id)
            out.append(
                UTurn(
                    first=first.shift_id,
                    second=second.shift_id,
                    cur_x=first.cur_in,
                    cur_y=first.cur_out,
                    tx1=first.phase2,
                    tx2=second.phase1,
                    labels=uturn_labels(first, second, chains),
                    value_diff=diff,
                    gap=second.timestamp - first.timestamp,
                )
            )
            break
    out.sort(key=lambda u: shift_sort_key(u.first))
    return out


# ---------------------------------------------------------------------------
# round-trips


@dataclass(frozen=True)
class RoundTrip:
    first: str
    second: str
    cur_x: str
    cur_y: str
    uturn: tuple[str, str]  # (first, second) of the embedded U-turn
    same_address: bool
    value_diff: Fraction


def detect_roundtrips(
    passthroughs: Sequence[PassThrough],
    uturns: Sequence[UTurn],
    window: int | None = None,
    tol: Fraction | None = None,
) -> list[RoundTrip]:
    """U-turns whose return leg lands within ``tol`` of the first leg's ``out_coin``.

    ``same_address`` is set when an address that funded the first deposit
    also receives the second withdrawal.
    """
    th = Thresholds()
    window = th.roundtrip_window if window is None else window
    tol = th.roundtrip_tolerance if tol is None else Fraction(tol)
    by_id = {p.shift_id: p for p in passthroughs}
    out = []
    for u in uturns:
        a, b = by_id.get(u.first), by_id.get(u.second)
        if a is None or b is None or not _reversal(a, b, window):
            continue
        diff = relative_diff(b.amt, a.out_coin)
        if diff > tol:
            continue
        same = bool(set(a.input_addresses) & set(b.output_addresses))
        out.append(RoundTrip(a.shift_id, b.shift_id, a.cur_in, a.cur_out, (u.first, u.second), same, diff))
    out.sort(key=lambda r: shift_sort_key(r.first))
    return out


# ---------------------------------------------------------------------------
# reports


def uturn_table(uturns: Iterable[UTurn]) -> dict[str, dict[str, int]]:
    """Per-currency counts of U-turns by label (the currency the user turned around in)."""
    out: dict[str, dict[str, int]] = {}
    for u in uturns:
        row = out.setdefault(u.cur_y, {k: 0 for k in UTURN_LABELS})
        for label in u.labels:
            row[label] += 1
    return dict(sorted(out.items()))


def roundtrip_table(roundtrips: Iterable[RoundTrip]) -> dict[str, dict[str, int]]:
    """Per-currency counts of round-trips; ``regular`` counts all, ``same_address`` the subset."""
    out: dict[str, dict[str, int]] = {}
    for r in roundtrips:
        row = out.setdefault(r.cur_x, {"regular": 0, "same_address": 0})
        row["regular"] += 1
        row["same_address"] += int(r.same_address)
    return dict(sorted(out.items()))


def table_csv(table: Mapping[str, Mapping[str, int]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["currency", *columns])
    for cur, row in table.items():
        w.writerow([cur, *(row.get(c, 0) for c in columns)])
    w.writerow(["total", *(sum(r.get(c, 0) for r in table.values()) for c in columns)])
    return buf.getvalue()


def cumulative_series(times: Iterable[int], start: int, bucket: int = 86400) -> list[tuple[int, int]]:
    """Running count at the end of each ``bucket``-second interval from ``start``."""
    ts = sorted(times)
    if not ts:
        return []
    last = (ts[-1] - start) // bucket
    counts = Counter((t - start) // bucket for t in ts)
    out, total = [], 0
    for i in range(min(0, (ts[0] - start) // bucket), last + 1):
        total += counts.get(i, 0)
        out.append((start + (i + 1) * bucket, total))
    return out


def uturn_series(uturns: Iterable[UTurn], passthroughs: Iterable[PassThrough], start: int, bucket: int = 86400) -> dict[str, list[tuple[int, int]]]:
    """Cumulative U-turn counts per label, timed by the second leg."""
    when = {p.shift_id: p.timestamp for p in passthroughs}
    uturns = list(uturns)
    return {label: cumulative_series((when[u.second] for u in uturns if u.has(label)), start, bucket) for label in UTURN_LABELS}


def series_csv(series: Mapping[str, list[tuple[int, int]]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "time", "cumulative"])
    for label, pts in series.items():
        for t, n in pts:
            w.writerow([label, t, n])
    return buf.getvalue()


def uturns_csv(uturns: Iterable[UTurn]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["first", "second", "cur_x", "cur_y", "tx1", "tx2", "labels", "gap"])
    for u in uturns:
        w.writerow([u.first, u.second, u.cur_x, u.cur_y, "" if u.tx1 is None else str(u.tx1), str(u.tx2), ";".join(u.labels), u.gap])
    return buf.getvalue()


def roundtrips_csv(roundtrips: Iterable[RoundTrip]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["first", "second", "cur_x", "cur_y", "same_address"])
    for r in roundtrips:
        w.writerow([r.first, r.second, r.cur_x, r.cur_y, int(r.same_address)])
    return buf.getvalue()
