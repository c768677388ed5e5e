"""Sliding event-time windows with watermark-driven firing.

Window starts are the multiples of the slide: a record at time t joins
every window [s, s + length) with s % slide == 0, s <= t < s + length and
s >= 0. A watermark at time w certifies no later record will carry
t < w, so any window with end <= w can fire. Records behind the
watermark are dropped and counted, never partially applied.

Each open window keeps its members bucketed by an opaque key (cell key
in practice) so a consumer can visit only the buckets it cares about.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Hashable, Iterator


class WindowError(ValueError):
    """Invalid window configuration."""


@dataclass(frozen=True)
class WindowSpec:
    """Sliding window parameters, all in milliseconds."""

    length: int
    slide: int
    lateness: int = 0

    def __post_init__(self) -> None:
        if self.slide <= 0:
            raise WindowError(f"slide must be positive, got {self.slide}")
        if self.length < self.slide:
            raise WindowError(f"length {self.length} must be >= slide {self.slide}")
        if self.lateness < 0:
            raise WindowError(f"lateness must be >= 0, got {self.lateness}")


def window_starts(t: int, length: int, slide: int) -> list[int]:
    """All window start times covering event time t, ascending."""
    return list(range(earliest_start(t, length, slide),
                      latest_start(t, slide) + 1, slide))


def earliest_start(t: int, length: int, slide: int) -> int:
    """Smallest valid start whose window covers t (starts never negative)."""
    s = ((t - length) // slide + 1) * slide
    return max(s, 0)


def latest_start(t: int, slide: int) -> int:
    return (t // slide) * slide


@dataclass
class WindowInstance:
    """One fired window: members grouped by key, in arrival order per bucket."""

    start: int
    end: int
    buckets: dict[Hashable, list[Any]]
    member_count: int

    @property
    def members(self) -> Iterator[Any]:
        for bucket in self.buckets.values():
            yield from bucket


class WatermarkClock:
    """Tracks max event time seen; watermark = max - allowed lateness."""

    __slots__ = ("lateness", "_max_time")

    def __init__(self, lateness: int = 0):
        if lateness < 0:
            raise WindowError(f"lateness must be >= 0, got {lateness}")
        self.lateness = lateness
        self._max_time: int | None = None

    def observe(self, t: int) -> None:
        if self._max_time is None or t > self._max_time:
            self._max_time = t

    @property
    def watermark(self) -> int | None:
        if self._max_time is None:
            return None
        return self._max_time - self.lateness


@dataclass
class SlidingWindower:
    """Assigns records to sliding windows and fires them in start order.

    One windower instance sees only its partition of the stream, so local
    silence does not imply global silence: empty windows that fall between
    data-bearing ones elsewhere must still fire (with no members) to keep
    all partitions emitting the same window sequence. fire_ready takes the
    globally observed first and last window starts as hints and fires
    every start in between, data or not.
    """

    length: int
    slide: int
    late_dropped: int = 0
    _pending: dict[int, list] = field(default_factory=dict)
    _next_fire: int | None = None
    _last_known: int | None = None
    _floor: int | None = None

    def __post_init__(self) -> None:
        if self.slide <= 0:
            raise WindowError(f"window slide must be positive, got {self.slide}")
        if self.length < self.slide:
            raise WindowError(f"window length {self.length} must be >= slide "
                              f"{self.slide}")

    def _span(self, t: int, watermark: int | None) -> tuple[int, int] | None:
        """Window start range for t, or None (counted late) if t is behind
        the watermark or every window it belongs to already fired."""
        if watermark is not None and t < watermark:
            self.late_dropped += 1
            return None
        first = earliest_start(t, self.length, self.slide)
        last = latest_start(t, self.slide)
        if self._floor is not None and first < self._floor:
            # Windows below the floor already fired; apply to the rest,
            # or count the record late if none remain.
            first = self._floor
            if first > last:
                self.late_dropped += 1
                return None
        if self._next_fire is None or first < self._next_fire:
            self._next_fire = first
        if self._last_known is None or last > self._last_known:
            self._last_known = last
        return first, last

    def add(self, t: int, item: Any, key: Hashable = None,
            watermark: int | None = None) -> bool:
        """Insert one record; returns False (and counts it) if t is behind
        the watermark."""
        span = self._span(t, watermark)
        if span is None:
            return False
        first, last = span
        for s in range(first, last + 1, self.slide):
            entry = self._pending.get(s)
            if entry is None:
                entry = [0, {}]
                self._pending[s] = entry
            entry[0] += 1
            bucket = entry[1].get(key)
            if bucket is None:
                entry[1][key] = [item]
            else:
                bucket.append(item)
        return True

    def add_counted(self, t: int, watermark: int | None = None) -> bool:
        """Count one record toward its windows without storing it.

        For records whose mere presence matters (a pruned point still
        raises the window's member count) but whose payload is never
        visited again; keeps window state proportional to what firing
        will actually read.
        """
        span = self._span(t, watermark)
        if span is None:
            return False
        first, last = span
        for s in range(first, last + 1, self.slide):
            entry = self._pending.get(s)
            if entry is None:
                self._pending[s] = [1, {}]
            else:
                entry[0] += 1
        return True

    def fire_ready(self, watermark: int, first_start: int | None = None,
                   max_start: int | None = None) -> list[WindowInstance]:
        """Fire every closed window up to the watermark, in start order.

        first_start/max_start widen the locally known range of window
        starts so partitions that saw no data for some window still emit
        it empty. Once anything has fired the first_start hint is inert:
        every start it could name was already emitted exactly once.
        """
        if first_start is not None and self._floor is None and (
                self._next_fire is None or first_start < self._next_fire):
            self._next_fire = first_start
        if max_start is not None and (self._last_known is None
                                      or max_start > self._last_known):
            self._last_known = max_start
        fired: list[WindowInstance] = []
        if self._next_fire is None:
            return fired
        s = self._next_fire
        while s + self.length <= watermark:
            if self._last_known is not None and s > self._last_known:
                break
            entry = self._pending.pop(s, None)
            if entry is None:
                fired.append(WindowInstance(s, s + self.length, {}, 0))
            else:
                fired.append(WindowInstance(s, s + self.length, entry[1], entry[0]))
            s += self.slide
        self._next_fire = s
        if fired:
            self._floor = s
        return fired

    def pending_starts(self) -> list[int]:
        return sorted(self._pending)

    def pending_count(self) -> int:
        return len(self._pending)
