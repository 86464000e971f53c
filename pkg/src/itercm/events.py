"""Event records, stream partitioning and count images.

Events are stored column-wise (one numpy array per field) because every
downstream operation is vectorised or compiled over the whole window.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

NEG = 0
POS = 1


class Event(NamedTuple):
    x: float
    y: float
    t_us: int
    polarity: int  # 1 positive, 0 negative


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError(f"geometry must be at least 2x2, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class PartitionScheme:
    """Input partition length ``dt_input_us`` and ``R`` partitions per window."""

    dt_input_us: int
    R: int
    t0_us: int = 0

    def __post_init__(self):
        if self.dt_input_us < 1:
            raise ValueError("dt_input_us must be >= 1")
        if self.R < 1:
            raise ValueError("R must be >= 1")

    @property
    def window_us(self) -> int:
        return self.dt_input_us * self.R


class EventArray:
    """Immutable, time-sorted column store of events."""

    __slots__ = ("t_us", "x", "y", "p")

    def __init__(self, t_us, x, y, p):
        t_us = np.asarray(t_us, dtype=np.int64)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        p = np.asarray(p, dtype=np.int8)
        n = len(t_us)
        if not (len(x) == len(y) == len(p) == n):
            raise ValueError("event columns have different lengths")
        if n and t_us.min() < 0:
            raise ValueError("negative timestamp")
        if n and not np.isin(p, (0, 1)).all():
            raise ValueError("polarity must be 0 or 1")
        object.__setattr__(self, "t_us", _frozen(np.ascontiguousarray(t_us)))
        object.__setattr__(self, "x", _frozen(np.ascontiguousarray(x)))
        object.__setattr__(self, "y", _frozen(np.ascontiguousarray(y)))
        object.__setattr__(self, "p", _frozen(np.ascontiguousarray(p)))

    def __setattr__(self, name, value):
        raise AttributeError("EventArray is immutable")

    @classmethod
    def empty(cls) -> "EventArray":
        return cls(np.zeros(0, np.int64), np.zeros(0), np.zeros(0), np.zeros(0, np.int8))

    @classmethod
    def from_events(cls, events: Iterable[Event]) -> "EventArray":
        events = list(events)
        if not events:
            return cls.empty()
        x, y, t, p = zip(*events)
        return cls(t, x, y, p)

    def __len__(self) -> int:
        return len(self.t_us)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            return Event(float(self.x[key]), float(self.y[key]), int(self.t_us[key]), int(self.p[key]))
        return EventArray(self.t_us[key], self.x[key], self.y[key], self.p[key])

    def __eq__(self, other):
        if not isinstance(other, EventArray):
            return NotImplemented
        return (
            np.array_equal(self.t_us, other.t_us)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def __repr__(self):
        return f"EventArray(n={len(self)})"

    def first_inversion(self) -> int | None:
        """Index of the first event whose timestamp is lower than its predecessor."""
        bad = np.flatnonzero(np.diff(self.t_us) < 0)
        return int(bad[0]) + 1 if len(bad) else None

    def check_sorted(self) -> None:
        i = self.first_inversion()
        if i is not None:
            raise UnsortedEventsError(i)

    def check_in_frame(self, geometry: CameraGeometry) -> None:
        out = (self.x < 0) | (self.x > geometry.width - 1) | (self.y < 0) | (self.y > geometry.height - 1)
        if out.any():
            i = int(np.flatnonzero(out)[0])
            raise ValueError(f"event {i} at ({self.x[i]}, {self.y[i]}) lies outside the {geometry.width}x{geometry.height} frame")


class UnsortedEventsError(ValueError):
    def __init__(self, index: int):
        super().__init__(f"events not sorted by time: first inversion at index {index}")
        self.index = index


@dataclass(frozen=True, eq=False)
class EventWindow:
    """One training partition: ``R`` consecutive input partitions of a stream."""

    events: EventArray
    scheme: PartitionScheme
    window_index: int = 0

    def __post_init__(self):
        ev = self.events
        self.events.check_sorted()
        if len(ev) and (ev.t_us[0] < self.t_begin or ev.t_us[-1] >= self.t_end):
            raise ValueError("window events fall outside [t_begin, t_end)")

    @property
    def t_begin(self) -> int:
        return self.scheme.t0_us + self.window_index * self.scheme.window_us

    @property
    def t_end(self) -> int:
        return self.t_begin + self.scheme.window_us

    @property
    def R(self) -> int:
        return self.scheme.R

    def tau(self) -> np.ndarray:
        """Normalised times of all events, in partition units."""
        return (self.events.t_us - self.t_begin) / self.scheme.dt_input_us

    def partition_of(self) -> np.ndarray:
        return ((self.events.t_us - self.t_begin) // self.scheme.dt_input_us).astype(np.int64)

    def __len__(self) -> int:
        return len(self.events)


class Partitioning(NamedTuple):
    windows: list[EventWindow]
    dropped: int


def partition_stream(events: EventArray | Sequence[Event], scheme: PartitionScheme,
                     t_end_us: int | None = None) -> Partitioning:
    """Split a sorted stream into consecutive, non-overlapping training windows.

    The stream end defaults to the end of the last input partition that holds
    an event. Events outside complete windows (before ``t0_us`` or after the
    last complete window) are dropped and counted in ``dropped``.
    """
    if not isinstance(events, EventArray):
        events = EventArray.from_events(events)
    events.check_sorted()
    if len(events) == 0:
        return Partitioning([], 0)

    t = events.t_us
    if t_end_us is None:
        last_partition = (int(t[-1]) - scheme.t0_us) // scheme.dt_input_us
        t_end_us = scheme.t0_us + (last_partition + 1) * scheme.dt_input_us
    n_windows = max(0, (t_end_us - scheme.t0_us) // scheme.window_us)

    bounds = scheme.t0_us + scheme.window_us * np.arange(n_windows + 1)
    cuts = np.searchsorted(t, bounds, side="left")
    windows = [
        EventWindow(events[cuts[w]:cuts[w + 1]], scheme, w) for w in range(n_windows)
    ]
    kept = int(cuts[-1] - cuts[0]) if n_windows else 0
    dropped = len(events) - kept
    if dropped:
        log.info("dropped %d events outside complete windows", dropped)
    return Partitioning(windows, dropped)


def normalized_time(e: Event, window: EventWindow) -> float:
    if not window.t_begin <= e.t_us < window.t_end:
        raise ValueError(f"event at {e.t_us} us is outside window [{window.t_begin}, {window.t_end})")
    return (e.t_us - window.t_begin) / window.scheme.dt_input_us


def count_image(events: EventArray, geometry: CameraGeometry) -> np.ndarray:
    """Two-channel image of per-pixel event counts, indexed ``[polarity, y, x]``."""
    out = np.zeros((2, geometry.height, geometry.width), dtype=np.int64)
    if len(events) == 0:
        return out
    xi = events.x.astype(np.int64)
    yi = events.y.astype(np.int64)
    if not (np.array_equal(xi, events.x) and np.array_equal(yi, events.y)):
        raise ValueError("count_image expects integer pixel coordinates")
    events.check_in_frame(geometry)
    flat = (events.p.astype(np.int64) * geometry.height + yi) * geometry.width + xi
    out.ravel()[:] = np.bincount(flat, minlength=out.size)
    return out
