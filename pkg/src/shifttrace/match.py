"""Deposit and withdrawal identification for feed trades.

Phase 1 finds the deposit: outputs on the ``cur_in`` chain that carry exactly
the advertised amount inside a block window around the feed timestamp.  The
augmented variant asks the service about every hit and keeps only those it
confirms.  Phase 2 (the withdrawal) comes from the service's detail record
or, without the service, from the exchange rate.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np

from .chainstore import Candidate, ChainHandle, block_nearest, candidates_by_value
from .errors import MissingRate, Phase2Unresolvable, UnknownChain, ValidationError
from .feed import FeedArchive, FeedBackend, Throttle, tx_stats
from .model import FixedAmount, RateRecord, ShiftDetail, ShiftRecord, ShiftStatus

MAX_SWEEP = 30


class Classification(str, enum.Enum):
    ZERO = "zero"
    SINGLE = "single"
    MULTI = "multi"


class Grade(str, enum.Enum):
    BASIC_SINGLE = "basic_single"
    AUGMENTED = "augmented"


@dataclass(frozen=True)
class CandidateSet:
    shift_id: str
    chain_id: str
    center: int
    lo: int
    hi: int
    delta_before: int
    delta_after: int
    clamped: bool
    hits: tuple[Candidate, ...]

    @property
    def classification(self) -> Classification:
        n = len(self.hits)
        return Classification.ZERO if n == 0 else Classification.SINGLE if n == 1 else Classification.MULTI


def window(chain: ChainHandle, t: int, delta_before: int, delta_after: int) -> tuple[int, int, int, bool]:
    """``(center, lo, hi, clamped)`` for the block window around time ``t``."""
    if delta_before < 0 or delta_after < 0:
        raise ValidationError("window deltas must be non-negative")
    h = block_nearest(chain, t)
    lo, hi = h - delta_before, h + delta_after
    clamped = lo < 0 or hi > chain.tip
    return h, max(lo, 0), min(hi, chain.tip), clamped


def phase1_basic(shift: ShiftRecord, chain: ChainHandle, delta_before: int, delta_after: int) -> CandidateSet:
    """Outputs of exactly ``shift.amt`` in blocks ``[h - delta_before, h + delta_after]``."""
    if shift.cur_in != chain.chain_id:
        raise UnknownChain(f"shift {shift.id} deposits {shift.cur_in}, store holds {chain.chain_id}")
    h, lo, hi, clamped = window(chain, shift.timestamp, delta_before, delta_after)
    hits = candidates_by_value(chain, lo, hi, shift.amt)
    return CandidateSet(shift.id, chain.chain_id, h, lo, hi, delta_before, delta_after, clamped, tuple(hits))


# ---------------------------------------------------------------------------
# service validation


@dataclass(frozen=True)
class Validation:
    """Outcome of checking one service detail against the shift it should describe."""

    complete: bool
    pair: bool
    amount: bool
    timing: bool

    @property
    def passed(self) -> bool:
        return self.complete and self.pair and self.amount and self.timing


def check_detail(shift: ShiftRecord, hit: Candidate, detail: ShiftDetail, cs: CandidateSet) -> Validation:
    complete = detail.status is ShiftStatus.COMPLETE
    pair = (detail.in_type, detail.out_type) == shift.pair
    amount = detail.in_coin is not None and detail.in_coin.precision == shift.amt.precision and detail.in_coin.atoms == shift.amt.atoms
    timing = cs.lo <= hit.height <= cs.hi
    return Validation(complete, pair, amount, timing)


@dataclass(frozen=True)
class Survivor:
    hit: Candidate
    detail: ShiftDetail
    validation: Validation


def screen_candidates(
    shift: ShiftRecord,
    cs: CandidateSet,
    backend: FeedBackend,
    *,
    throttle: Throttle | None = None,
    archive: FeedArchive | None = None,
    cache: dict[str, ShiftDetail] | None = None,
) -> list[Survivor]:
    """Query the service for every hit and keep those it confirms for this shift."""
    out = []
    for hit in cs.hits:
        detail = None if cache is None else cache.get(hit.address)
        if detail is None:
            detail = tx_stats(backend, hit.address, archive=archive, throttle=throttle)
            if cache is not None:
                cache[hit.address] = detail
        v = check_detail(shift, hit, detail, cs)
        if v.passed:
            out.append(Survivor(hit, detail, v))
    return out


def resolve_phase2(detail: ShiftDetail, chains: Mapping[str, ChainHandle]) -> tuple[str, int | None]:
    """Locate the withdrawal named by a complete detail on the ``cur_out`` chain.

    Returns the transaction id and the index of the output paying
    ``detail.withdraw`` (``None`` when no transparent output does, e.g. a
    shielded recipient).
    """
    store = chains.get(detail.out_type or "")
    if store is None:
        raise Phase2Unresolvable(f"no ledger for {detail.out_type}")
    if not detail.tx or not store.has_tx(detail.tx):
        raise Phase2Unresolvable(f"{detail.out_type} has no transaction {detail.tx}")
    outs = store.outputs_of(detail.tx)
    want = detail.out_coin.atoms if detail.out_coin is not None else None
    exact = [i for i, (a, v) in enumerate(outs) if a == detail.withdraw and v == want]
    if exact:
        return detail.tx, exact[0]
    by_addr = [i for i, (a, _) in enumerate(outs) if a == detail.withdraw]
    return detail.tx, (by_addr[0] if by_addr else None)


@dataclass(frozen=True)
class MatchResult:
    shift_id: str
    cur_in: str
    cur_out: str
    timestamp: int
    amt: FixedAmount
    grade: Grade
    phase1_tx: str
    phase1_index: int
    phase1_height: int
    addr_s: str
    phase2_tx: str | None = None
    phase2_index: int | None = None
    addr_u: str | None = None
    out_coin: FixedAmount | None = None
    validation: Validation | None = None
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.grade is Grade.AUGMENTED and (self.validation is None or not self.validation.passed):
            raise ValidationError("augmented matches need a passed service validation")


def _augmented_result(shift: ShiftRecord, s: Survivor, chains: Mapping[str, ChainHandle] | None) -> MatchResult:
    flags: list[str] = []
    p2_tx = p2_idx = None
    if chains is not None:
        try:
            p2_tx, p2_idx = resolve_phase2(s.detail, chains)
        except Phase2Unresolvable:
            flags.append("phase2_unresolved")
    else:
        flags.append("phase2_unresolved")
    return MatchResult(
        shift_id=shift.id,
        cur_in=shift.cur_in,
        cur_out=shift.cur_out,
        timestamp=shift.timestamp,
        amt=shift.amt,
        grade=Grade.AUGMENTED,
        phase1_tx=s.hit.tx_id,
        phase1_index=s.hit.index,
        phase1_height=s.hit.height,
        addr_s=s.hit.address,
        phase2_tx=p2_tx,
        phase2_index=p2_idx,
        addr_u=s.detail.withdraw,
        out_coin=s.detail.out_coin,
        validation=s.validation,
        flags=tuple(flags),
    )


def phase1_augmented(
    shift: ShiftRecord,
    chain: ChainHandle,
    candidates: CandidateSet,
    backend: FeedBackend,
    chains: Mapping[str, ChainHandle] | None = None,
    *,
    throttle: Throttle | None = None,
    archive: FeedArchive | None = None,
) -> MatchResult | None:
    """Service-validated match, or ``None`` unless exactly one hit survives.

    A withdrawal that cannot be found on the ``cur_out`` ledger does not
    void the match; it is kept with ``phase2_unresolved`` in its flags.
    """
    if candidates.chain_id != chain.chain_id or candidates.shift_id != shift.id:
        raise ValidationError("candidate set belongs to a different shift or chain")
    survivors = screen_candidates(shift, candidates, backend, throttle=throttle, archive=archive)
    if len(survivors) != 1:
        return None
    return _augmented_result(shift, survivors[0], chains)


def basic_result(shift: ShiftRecord, cs: CandidateSet) -> MatchResult:
    (hit,) = cs.hits
    return MatchResult(
        shift_id=shift.id,
        cur_in=shift.cur_in,
        cur_out=shift.cur_out,
        timestamp=shift.timestamp,
        amt=shift.amt,
        grade=Grade.BASIC_SINGLE,
        phase1_tx=hit.tx_id,
        phase1_index=hit.index,
        phase1_height=hit.height,
        addr_s=hit.address,
    )


# ---------------------------------------------------------------------------
# batch matching


def shift_sort_key(shift_id: str) -> tuple:
    return (0, int(shift_id), "") if shift_id.isdigit() else (1, 0, shift_id)


@dataclass
class MatchReport:
    matches: dict[str, MatchResult] = field(default_factory=dict)
    ambiguous: dict[str, tuple[Survivor, ...]] = field(default_factory=dict)
    unmatched: dict[str, str] = field(default_factory=dict)
    candidates: dict[str, CandidateSet] = field(default_factory=dict)
    shifts: dict[str, ShiftRecord] = field(default_factory=dict)

    def augmented(self) -> list[MatchResult]:
        return [m for m in self.sorted_matches() if m.grade is Grade.AUGMENTED]

    def sorted_matches(self) -> list[MatchResult]:
        return [self.matches[k] for k in sorted(self.matches, key=shift_sort_key)]

    def classification_counts(self, chain: str | None = None) -> dict[str, int]:
        out = {c.value: 0 for c in Classification}
        for cs in self.candidates.values():
            if chain is None or cs.chain_id == chain:
                out[cs.classification.value] += 1
        return out

    def single_hit_rate(self, chain: str | None = None) -> Fraction:
        counts = self.classification_counts(chain)
        total = sum(counts.values())
        return Fraction(counts["single"], total) if total else Fraction(0)

    def rows(self) -> list[dict]:
        rows = []
        for sid in sorted(self.shifts, key=shift_sort_key):
            m = self.matches.get(sid)
            if m is not None:
                rows.append(
                    {
                        "shift_id": sid,
                        "grade": m.grade.value,
                        "phase1_tx": f"{m.phase1_tx}:{m.phase1_index}",
                        "addr_s": m.addr_s,
                        "phase2_tx": "" if m.phase2_tx is None else (m.phase2_tx if m.phase2_index is None else f"{m.phase2_tx}:{m.phase2_index}"),
                        "addr_u": m.addr_u or "",
                        "flags": ";".join(m.flags),
                    }
                )
            else:
                reason = "ambiguous" if sid in self.ambiguous else self.unmatched.get(sid, "unmatched")
                rows.append({"shift_id": sid, "grade": "", "phase1_tx": "", "addr_s": "", "phase2_tx": "", "addr_u": "", "flags": reason})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["shift_id", "grade", "phase1_tx", "addr_s", "phase2_tx", "addr_u", "flags"], lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        return buf.getvalue()


def dedupe_shifts(shifts: Iterable[ShiftRecord]) -> list[ShiftRecord]:
    seen: dict[str, ShiftRecord] = {}
    for s in sorted(shifts, key=lambda s: (s.timestamp, s.id)):
        seen.setdefault(s.id, s)
    return [seen[k] for k in sorted(seen, key=shift_sort_key)]


def match_shifts(
    shifts: Iterable[ShiftRecord],
    chains: Mapping[str, ChainHandle],
    backend: FeedBackend | None = None,
    params: Mapping[str, tuple[int, int]] | None = None,
    *,
    throttle: Throttle | None = None,
    archive: FeedArchive | None = None,
) -> MatchReport:
    """Run phase 1 (basic, and augmented when a backend is given) over many shifts.

    ``params`` maps a chain to its ``(delta_before, delta_after)``; chains
    without an entry use their configured defaults.  Shifts whose deposit
    chain is not loaded are reported as unmatched with reason ``no_chain``.
    Results do not depend on input order and duplicate ids are collapsed.
    """
    report = MatchReport()
    cache: dict[str, ShiftDetail] = {}
    for shift in dedupe_shifts(shifts):
        report.shifts[shift.id] = shift
        chain = chains.get(shift.cur_in)
        if chain is None:
            report.unmatched[shift.id] = "no_chain"
            continue
        db, da = (params or {}).get(shift.cur_in, (chain.config.default_delta_before, chain.config.default_delta_after))
        cs = phase1_basic(shift, chain, db, da)
        report.candidates[shift.id] = cs
        if backend is None:
            if cs.classification is Classification.SINGLE:
                report.matches[shift.id] = basic_result(shift, cs)
            else:
                report.unmatched[shift.id] = f"{cs.classification.value}_hits"
            continue
        if not cs.hits:
            report.unmatched[shift.id] = "zero_hits"
            continue
        survivors = screen_candidates(shift, cs, backend, throttle=throttle, archive=archive, cache=cache)
        if len(survivors) == 1:
            report.matches[shift.id] = _augmented_result(shift, survivors[0], chains)
        elif survivors:
            report.ambiguous[shift.id] = tuple(survivors)
        else:
            report.unmatched[shift.id] = "no_survivor"
    return report


# ---------------------------------------------------------------------------
# parameter sweep


@dataclass(frozen=True)
class SweepResult:
    chain_id: str
    table: np.ndarray  # [delta_before, delta_after] -> single-hit count
    argmax: tuple[int, int]
    n_shifts: int

    @property
    def best(self) -> int:
        return int(self.table[self.argmax])

    def to_csv(self) -> str:
        size = self.table.shape[1]
        lines = ["delta_before," + ",".join(f"da{j}" for j in range(size))]
        for i, row in enumerate(self.table.tolist()):
            lines.append(f"{i}," + ",".join(str(x) for x in row))
        return "\n".join(lines) + "\n"


def best_cell(table: np.ndarray) -> tuple[int, int]:
    """Maximum count; ties go to the smaller window, then the smaller delta_before."""
    top = table.max()
    cells = [(i + j, i, j) for i, j in zip(*np.nonzero(table == top))]
    _, i, j = min(cells)
    return int(i), int(j)


def sweep_params(shifts: Iterable[ShiftRecord], chain: ChainHandle, max_delta: int = MAX_SWEEP) -> SweepResult:
    """Single-hit counts for every window ``(delta_before, delta_after)`` in ``0..max_delta``."""
    rows = [s for s in dedupe_shifts(shifts) if s.cur_in == chain.chain_id]
    if not rows:
        raise ValidationError(f"no shifts deposit into {chain.chain_id}")
    n, size = len(rows), max_delta + 1
    before = np.zeros((n, size + 1), np.int64)
    after = np.zeros((n, size + 1), np.int64)
    zero = np.zeros(n, np.int64)
    for r, s in enumerate(rows):
        h = block_nearest(chain, s.timestamp)
        off = chain.value_heights(s.amt.atoms, h - max_delta, h + max_delta) - h
        zero[r] = int((off == 0).sum())
        np.add.at(before[r], -off[off < 0], 1)
        np.add.at(after[r], off[off > 0], 1)
    before = np.cumsum(before[:, :size], axis=1)  # hits in [h - d, h - 1]
    after = np.cumsum(after[:, :size], axis=1)  # hits in [h + 1, h + d]
    table = np.zeros((size, size), np.int64)
    for db in range(size):
        table[db] = ((before[:, db, None] + zero[:, None] + after) == 1).sum(axis=0)
    return SweepResult(chain.chain_id, table, best_cell(table), n)


# ---------------------------------------------------------------------------
# API-free withdrawal search


def expected_out(shift: ShiftRecord, rate: RateRecord, out_precision: int) -> Fraction:
    """``amt * rate - fee`` in ``cur_out`` atoms (exact)."""
    return shift.amt.to_fraction() * rate.rate * 10**out_precision - rate.miner_fee.atoms


def select_rate(rates: Iterable[RateRecord], shift: ShiftRecord) -> RateRecord:
    """Most recent rate for the shift's pair at or before its timestamp."""
    best = None
    for r in rates:
        if r.pair == shift.pair and r.timestamp <= shift.timestamp and (best is None or r.timestamp > best.timestamp):
            best = r
    if best is None:
        raise MissingRate(f"no {shift.cur_in}_{shift.cur_out} rate at or before {shift.timestamp}")
    return best


def phase2_alternative(
    shift: ShiftRecord,
    rate: RateRecord | None,
    chain_out: ChainHandle,
    delta_after: int,
    error_rate: Fraction,
) -> CandidateSet:
    """Withdrawal candidates within ``error_rate`` of ``amt * rate - fee`` in ``[h, h + delta_after]``."""
    if rate is None or rate.pair != shift.pair or rate.timestamp > shift.timestamp:
        raise MissingRate(f"shift {shift.id} needs a {shift.cur_in}_{shift.cur_out} rate at or before {shift.timestamp}")
    if chain_out.chain_id != shift.cur_out:
        raise UnknownChain(f"shift {shift.id} withdraws {shift.cur_out}, store holds {chain_out.chain_id}")
    error_rate = Fraction(error_rate)
    if error_rate < 0 or delta_after < 0:
        raise ValidationError("error_rate and delta_after must be non-negative")
    h = block_nearest(chain_out, shift.timestamp)
    hi_h = min(h + delta_after, chain_out.tip)
    clamped = h + delta_after > chain_out.tip
    expected = expected_out(shift, rate, chain_out.config.precision)
    hits: list[Candidate] = []
    if expected > 0:
        lo_v = math.ceil(expected * (1 - error_rate))
        hi_v = math.floor(expected * (1 + error_rate))
        hits = _outputs_between(chain_out, h, hi_h, lo_v, hi_v)
    return CandidateSet(shift.id, chain_out.chain_id, h, h, hi_h, 0, delta_after, clamped, tuple(hits))


def _outputs_between(chain: ChainHandle, h_lo: int, h_hi: int, v_lo: int, v_hi: int) -> list[Candidate]:
    if v_lo > v_hi:
        return []
    t0, t1 = int(chain.blk_off[h_lo]), int(chain.blk_off[h_hi + 1])
    k0, k1 = int(chain.out_off[t0]), int(chain.out_off[t1])
    scale = chain._scale
    hi = chain.out_hi[k0:k1]
    lo = chain.out_lo[k0:k1]
    lh, ll = divmod(v_lo, scale)
    uh, ul = divmod(v_hi, scale)
    ge = (hi > lh) | ((hi == lh) & (lo >= ll))
    le = (hi < uh) | ((hi == uh) & (lo <= ul))
    out = []
    for k in (np.flatnonzero(ge & le) + k0).tolist():
        tx = int(chain.out_tx[k])
        out.append(Candidate(chain.tx_id_at(tx), k - int(chain.out_off[tx]), chain.address_at(int(chain.out_addr[k])), int(chain.out_height[k])))
    return out
