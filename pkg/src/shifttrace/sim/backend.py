"""Shift-service stand-in that answers from a generated world."""

from __future__ import annotations

from bisect import bisect_right

from ..errors import BackendUnavailable
from ..feed import RECENT_LIMIT, not_a_service_address
from ..model import RateRecord, ShiftDetail, ShiftRecord, ShiftStatus
from .builder import Trade, World


class SimServiceBackend:
    """Implements the feed backend protocol over a :class:`World`.

    The clock starts at the end of the world unless ``now`` is given; tests
    move it with :meth:`set_time` or :meth:`advance` to look at the service
    as it was at any instant.  ``fail_next`` makes the next calls raise
    :class:`BackendUnavailable` to exercise retry paths.
    """

    def __init__(self, world: World, now: int | None = None):
        self.world = world
        self._now = world.end if now is None else now
        pub = sorted(world.published(), key=lambda t: (t.feed_time, t.shift_id))
        self._pub = pub
        self._pub_times = [t.feed_time for t in pub]
        self._by_addr: dict[str, list[Trade]] = {}
        for t in sorted(world.trades, key=lambda t: (t.feed_time, t.key)):
            self._by_addr.setdefault(t.addr_s, []).append(t)
        self._abandoned = {a: (cur, created) for a, cur, created in world.abandoned}
        self.failures = 0
        self.calls = 0

    def now(self) -> int:
        return self._now

    def set_time(self, t: int) -> None:
        self._now = t

    def advance(self, seconds: int | None = None) -> None:
        self._now += self.world.config.feed_tick if seconds is None else seconds

    def fail_next(self, n: int) -> None:
        self.failures = n

    def _maybe_fail(self) -> None:
        self.calls += 1
        if self.failures > 0:
            self.failures -= 1
            raise BackendUnavailable("simulated outage")

    def recent(self) -> list[ShiftRecord]:
        self._maybe_fail()
        i = bisect_right(self._pub_times, self._now)
        return [self.world.shift_record(t) for t in reversed(self._pub[max(i - RECENT_LIMIT, 0) : i])]

    def rates(self) -> list[RateRecord]:
        self._maybe_fail()
        w = self.world
        if self._now < w.config.start:
            return []
        tick = min((self._now - w.config.start) // w.config.feed_tick, len(w.rate_ticks) - 1)
        return w.rate_records(tick)

    def tx_stats(self, addr_s: str) -> ShiftDetail:
        self._maybe_fail()
        trades = [t for t in self._by_addr.get(addr_s, []) if t.feed_time <= self._now]
        if trades:
            return self.world.detail(trades[-1])
        ab = self._abandoned.get(addr_s)
        if ab is not None and ab[1] <= self._now:
            return ShiftDetail(status=ShiftStatus.NO_DEPOSITS, address=addr_s)
        return not_a_service_address(addr_s)
