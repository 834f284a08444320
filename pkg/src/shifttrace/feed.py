"""Shift-service client: recent-feed polling, rates, per-address detail lookups.

Backends implement a small protocol (``recent``, ``rates``, ``tx_stats``,
``now``).  Two ship with the package: :class:`ReplayBackend` reads fixture
directories and ``shifttrace.sim.backend.SimServiceBackend`` serves a
generated world directly.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

from .errors import ArchiveError, BackendUnavailable, ValidationError
from .model import ChainRegistry, RateRecord, ShiftDetail, ShiftRecord, ShiftStatus

log = logging.getLogger(__name__)

FEED_FORMAT = 1
RECENT_LIMIT = 50


class FeedBackend(Protocol):
    def recent(self) -> list[ShiftRecord]: ...

    def rates(self) -> list[RateRecord]: ...

    def tx_stats(self, addr_s: str) -> ShiftDetail: ...

    def now(self) -> int: ...


def not_a_service_address(addr: str) -> ShiftDetail:
    return ShiftDetail(status=ShiftStatus.ERROR, address=addr, error="This is not a valid deposit address")


# ---------------------------------------------------------------------------
# archive


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class FeedArchive:
    """Deduplicated shift, rate and detail records with an append-only log.

    The on-disk log groups records by scraper tick and closes each tick with a
    marker line.  Anything after the last marker is a torn write from an
    interrupted run and is discarded (and truncated) when the log is reopened.
    """

    registry: ChainRegistry
    path: Path | None = None
    shifts: list[ShiftRecord] = field(default_factory=list)
    rates: list[RateRecord] = field(default_factory=list)
    detail_cache: dict[str, tuple[ShiftDetail, int]] = field(default_factory=dict)
    ticks: int = 0
    gaps: int = 0
    _ids: set[str] = field(default_factory=set)
    _rate_keys: set[tuple[str, str, int]] = field(default_factory=set)
    _pending: list[str] = field(default_factory=list)
    max_seq: int | None = None

    # -- in-memory updates -------------------------------------------------

    def has_shift(self, shift_id: str) -> bool:
        return shift_id in self._ids

    def add_shifts(self, records: Iterable[ShiftRecord]) -> list[ShiftRecord]:
        new = []
        for r in sorted(records, key=lambda r: (r.timestamp, r.id)):
            if r.id in self._ids:
                continue
            self._ids.add(r.id)
            new.append(r)
            if r.id.isdigit():
                seq = int(r.id)
                self.max_seq = seq if self.max_seq is None else max(self.max_seq, seq)
        if new:
            self.shifts.extend(new)
            if len(self.shifts) > len(new) and (self.shifts[-len(new) - 1].timestamp, self.shifts[-len(new) - 1].id) > (
                new[0].timestamp,
                new[0].id,
            ):
                self.shifts.sort(key=lambda r: (r.timestamp, r.id))
            self._pending.extend(_dumps({"type": "shift", **r.to_json()}) for r in new)
        return new

    def add_rates(self, records: Iterable[RateRecord]) -> list[RateRecord]:
        new = []
        for r in sorted(records, key=lambda r: (r.timestamp, r.cur_in, r.cur_out)):
            key = (r.cur_in, r.cur_out, r.timestamp)
            if key in self._rate_keys:
                continue
            self._rate_keys.add(key)
            new.append(r)
        if new:
            self.rates.extend(new)
            self._pending.extend(_dumps({"type": "rate", **r.to_json()}) for r in new)
        return new

    def record_detail(self, addr: str, detail: ShiftDetail, fetched_at: int) -> None:
        self.detail_cache[addr] = (detail, fetched_at)
        self._pending.append(_dumps({"type": "detail", "addr": addr, "fetched": fetched_at, "detail": detail.to_json()}))

    def shifts_for(self, cur_in: str | None = None) -> list[ShiftRecord]:
        if cur_in is None:
            return list(self.shifts)
        return [s for s in self.shifts if s.cur_in == cur_in]

    def rate_at(self, cur_in: str, cur_out: str, t: int) -> RateRecord | None:
        """Most recent rate for the pair at or before ``t``."""
        series = self._rate_series().get((cur_in, cur_out))
        if not series:
            return None
        from bisect import bisect_right

        i = bisect_right(series[0], t)
        return series[1][i - 1] if i else None

    def _rate_series(self):
        cache = getattr(self, "_series_cache", None)
        if cache is not None and cache[0] == len(self.rates):
            return cache[1]
        by_pair: dict[tuple[str, str], list[RateRecord]] = {}
        for r in self.rates:
            by_pair.setdefault(r.pair, []).append(r)
        out = {}
        for pair, rs in by_pair.items():
            rs.sort(key=lambda r: r.timestamp)
            out[pair] = ([r.timestamp for r in rs], rs)
        self._series_cache = (len(self.rates), out)
        return out

    # -- persistence -------------------------------------------------------

    def commit_tick(self) -> None:
        """Close the current tick: flush pending lines plus a tick marker."""
        self.ticks += 1
        marker = _dumps({"type": "tick", "tick": self.ticks, "gaps": self.gaps})
        lines = self._pending + [marker]
        self._pending = []
        if self.path is None:
            return
        try:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write("\n".join(lines) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise ArchiveError(f"cannot append to archive {self.path}: {exc}") from exc

    @classmethod
    def open(cls, path: str | Path, registry: ChainRegistry) -> "FeedArchive":
        """Open (or create) an archive log, discarding any torn trailing tick."""
        path = Path(path)
        arch = cls(registry=registry, path=path)
        try:
            if not path.exists() or path.stat().st_size == 0:
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(path, "w", encoding="utf-8") as fh:
                    fh.write(_dumps({"feed_format": FEED_FORMAT}) + "\n")
                return arch
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise ArchiveError(f"cannot open archive {path}: {exc}") from exc
        good_end = arch._replay(data)
        if good_end < len(data):
            log.warning("archive %s: discarding %d bytes of an unfinished tick", path, len(data) - good_end)
            try:
                with open(path, "r+b") as fh:
                    fh.truncate(good_end)
            except OSError as exc:
                raise ArchiveError(f"cannot truncate archive {path}: {exc}") from exc
        return arch

    @classmethod
    def load(cls, path: str | Path, registry: ChainRegistry) -> "FeedArchive":
        """Read-only load; the returned archive does not write back."""
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise ArchiveError(f"cannot read archive {path}: {exc}") from exc
        arch = cls(registry=registry)
        arch._replay(data)
        return arch

    def _replay(self, data: bytes) -> int:
        """Apply complete ticks from ``data``; return the byte offset after the last one."""
        pos = data.find(b"\n")
        if pos < 0:
            raise ArchiveError("archive lacks a header line")
        try:
            header = json.loads(data[:pos])
        except ValueError:
            header = None
        if not isinstance(header, dict) or header.get("feed_format") != FEED_FORMAT:
            raise ArchiveError(f"unsupported archive header {data[:pos][:80]!r}")
        good_end = pos + 1
        batch: list[dict] = []
        start = pos + 1
        while start < len(data):
            nl = data.find(b"\n", start)
            if nl < 0:
                break  # torn last line
            try:
                obj = json.loads(data[start:nl])
            except ValueError:
                break
            start = nl + 1
            if obj.get("type") == "tick":
                self._apply(batch)
                batch = []
                self.ticks = int(obj["tick"])
                self.gaps = int(obj["gaps"])
                good_end = start
            else:
                batch.append(obj)
        self._pending = []
        return good_end

    def _apply(self, batch: list[dict]) -> None:
        reg = self.registry
        shifts, rates = [], []
        for obj in batch:
            kind = obj.pop("type", None)
            if kind == "shift":
                shifts.append(ShiftRecord.from_json(obj, reg))
            elif kind == "rate":
                rates.append(RateRecord.from_json(obj, reg))
            elif kind == "detail":
                self.detail_cache[obj["addr"]] = (ShiftDetail.from_json(obj["detail"], reg), int(obj["fetched"]))
            else:
                raise ArchiveError(f"unknown archive record type {kind!r}")
        self.add_shifts(shifts)
        self.add_rates(rates)

    def to_bytes(self) -> bytes:
        """Canonical serialization of the archive content (not the log)."""
        lines = [_dumps({"feed_format": FEED_FORMAT})]
        lines += [_dumps({"type": "shift", **r.to_json()}) for r in self.shifts]
        lines += [_dumps({"type": "rate", **r.to_json()}) for r in sorted(self.rates, key=lambda r: (r.timestamp, r.cur_in, r.cur_out))]
        for addr in sorted(self.detail_cache):
            d, t = self.detail_cache[addr]
            lines.append(_dumps({"type": "detail", "addr": addr, "fetched": t, "detail": d.to_json()}))
        return ("\n".join(lines) + "\n").encode()


# ---------------------------------------------------------------------------
# polling


def poll_recent(backend: FeedBackend, archive: FeedArchive) -> list[ShiftRecord]:
    """Fetch the recent feed and keep only unseen records.

    When every returned record is new and the page is full, trades may have
    scrolled past unseen.  Numeric sequential ids let the gap be measured
    exactly; otherwise the counter grows by one per overflowing poll.
    """
    return absorb_recent(backend.recent(), archive)  # BackendUnavailable leaves the archive untouched


def absorb_recent(records: list[ShiftRecord], archive: FeedArchive) -> list[ShiftRecord]:
    prev_max = archive.max_seq
    fresh = [r for r in records if not archive.has_shift(r.id)]
    if archive.shifts and len(records) >= RECENT_LIMIT and len(fresh) == len(records):
        ids = [r.id for r in fresh]
        if prev_max is not None and all(i.isdigit() for i in ids):
            archive.gaps += max(min(int(i) for i in ids) - prev_max - 1, 0)
        else:
            archive.gaps += 1
    return archive.add_shifts(fresh)


def poll_rates(backend: FeedBackend, archive: FeedArchive) -> list[RateRecord]:
    return archive.add_rates(backend.rates())


class Throttle:
    """At most ``rate`` acquisitions per rolling second, granted in FIFO order."""

    def __init__(self, rate: int = 10, clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValidationError("throttle rate must be positive")
        self.rate = rate
        self.clock = clock
        self.sleep = sleep
        self._grants: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        with self._lock:
            now = self.clock()
            slot = now
            if len(self._grants) >= self.rate:
                slot = max(now, self._grants[-self.rate] + 1.0)
            self._grants.append(slot)
            while len(self._grants) > self.rate:
                self._grants.popleft()
        if slot > now:
            self.sleep(slot - now)
        return slot


def tx_stats(backend: FeedBackend, addr_s: str, archive: FeedArchive | None = None, throttle: Throttle | None = None) -> ShiftDetail:
    """Per-address detail lookup; reused addresses report only their latest trade."""
    if throttle is not None:
        throttle.acquire()
    detail = backend.tx_stats(addr_s)
    if archive is not None:
        archive.record_detail(addr_s, detail, backend.now())
    return detail


# ---------------------------------------------------------------------------
# scraper


@dataclass(frozen=True)
class ScrapeSummary:
    ticks: int
    records: int
    rates: int
    gaps: int
    failures: int


def run_scraper(
    backend: FeedBackend,
    archive_path: str | Path,
    registry: ChainRegistry,
    interval: float = 5.0,
    stop: Callable[[int], bool] | None = None,
    max_ticks: int | None = None,
    sleep: Callable[[float], None] = time.sleep,
    max_retries: int = 5,
    backoff: float = 1.0,
) -> ScrapeSummary:
    """Poll recent trades and rates once per ``interval`` and append them to an archive.

    Resumes from an existing archive: for seekable backends (fixture replay)
    polling restarts at the first tick that was not fully committed.  Transient
    backend failures are retried with exponential backoff; a tick that keeps
    failing is skipped.  Only archive I/O errors are fatal.
    """
    if not interval > 0:
        raise ValidationError(f"interval must be positive, got {interval}")
    archive = FeedArchive.open(archive_path, registry)
    if hasattr(backend, "seek"):
        backend.seek(archive.ticks)
    failures = 0
    done = 0
    while True:
        if max_ticks is not None and done >= max_ticks:
            break
        if stop is not None and stop(archive.ticks):
            break
        if getattr(backend, "exhausted", False):
            break
        for attempt in range(max_retries + 1):
            try:
                records = backend.recent()
                rates = backend.rates()
            except BackendUnavailable as exc:
                failures += 1
                if attempt == max_retries:
                    log.warning("tick %d skipped: %s", archive.ticks + 1, exc)
                else:
                    sleep(backoff * 2**attempt)
            else:
                absorb_recent(records, archive)
                archive.add_rates(rates)
                break
        archive.commit_tick()
        done += 1
        if hasattr(backend, "advance"):
            backend.advance()
        sleep(interval)
    return ScrapeSummary(archive.ticks, len(archive.shifts), len(archive.rates), archive.gaps, failures)


# ---------------------------------------------------------------------------
# fixture replay


class ReplayBackend:
    """Serves ``recent_<tick>.json``, ``rates_<tick>.json`` and ``stats/<addr>.json``.

    The logical clock is the tick number; :meth:`advance` moves to the next
    tick and :meth:`seek` jumps to an absolute one.
    """

    def __init__(self, root: str | Path, registry: ChainRegistry):
        self.root = Path(root)
        self.registry = registry
        if not self.root.is_dir():
            raise BackendUnavailable(f"fixture directory {self.root} missing")
        self._recent = self._index("recent_")
        self._rates = self._index("rates_")
        self.ticks = sorted(self._recent)
        self.position = 0

    def _index(self, prefix: str) -> dict[int, Path]:
        out = {}
        for p in self.root.glob(f"{prefix}*.json"):
            stem = p.stem[len(prefix):]
            if stem.isdigit():
                out[int(stem)] = p
        return out

    @property
    def exhausted(self) -> bool:
        return self.position >= len(self.ticks)

    @property
    def tick(self) -> int:
        return self.ticks[min(self.position, len(self.ticks) - 1)]

    def now(self) -> int:
        return self.tick if self.ticks else 0

    def advance(self) -> None:
        self.position += 1

    def seek(self, position: int) -> None:
        self.position = position

    def _read(self, path: Path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return json.load(fh)
        except OSError as exc:
            raise BackendUnavailable(str(exc)) from exc

    def recent(self) -> list[ShiftRecord]:
        if self.exhausted:
            return []
        rows = self._read(self._recent[self.tick])
        return [ShiftRecord.from_json(r, self.registry) for r in rows][:RECENT_LIMIT]

    def rates(self) -> list[RateRecord]:
        if not self._rates or self.exhausted:
            return []
        eligible = [t for t in self._rates if t <= self.tick]
        if not eligible:
            return []
        return [RateRecord.from_json(r, self.registry) for r in self._read(self._rates[max(eligible)])]

    def tx_stats(self, addr_s: str) -> ShiftDetail:
        if not addr_s or any(not (c.isalnum() or c in "-_") for c in addr_s):
            return not_a_service_address(addr_s)
        path = self.root / "stats" / f"{addr_s}.json"
        if not path.exists():
            return not_a_service_address(addr_s)
        return ShiftDetail.from_json(self._read(path), self.registry)

    def all_rates(self) -> list[RateRecord]:
        """Every rate record across all fixture ticks (for offline matching)."""
        out = []
        for t in sorted(self._rates):
            out += [RateRecord.from_json(r, self.registry) for r in self._read(self._rates[t])]
        return out
