"""Dynamic directed event-graph construction over per-pixel event queues.

The entire stored graph state is a W x H grid of fixed-depth ring buffers
(one per pixel); edges are never materialized. Neighbor search for a new
event scans the spatial candidate window in a canonical order:

    dy from -r_s to +r_s, then dx from -r_s to +r_s (row-major), where
    (dx, dy) = new minus neighbor; offsets failing the spatial predicate
    and out-of-bound pixels are skipped; within each queue entries are
    visited newest-first; the temporal predicate 0 <= dt <= r_t is applied
    per entry; the scan stops as soon as d_max neighbors are collected.

The new event is pushed into its queue only *after* its search completes
(search-then-push), so an event can never be its own neighbor. Events with
equal timestamps are valid neighbors when their stream index is smaller.

`brute_force_neighbors` is an independent reference over the full stream
prefix (plain dict-of-lists retention replay, no ring buffers) and also
covers the hemisphere / semi-octahedron search shapes that the queue-backed
engine does not accelerate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .event_io import Event

SHAPES = ("hemisphere", "semi_octahedron", "cylinder", "prism")
QUEUE_BACKED_SHAPES = ("cylinder", "prism")


class InvalidDims(ValueError):
    pass


class OutOfBoundsEvent(ValueError):
    pass


class InvalidSearchParams(ValueError):
    pass


@dataclass(frozen=True)
class SearchParams:
    """Neighbor search geometry.

    prism / cylinder use (r_s, r_t); hemisphere / semi_octahedron use
    (r, beta). d_max caps the neighbor count; queue_depth is the per-pixel
    retention replayed by the brute-force reference.
    """

    shape: str = "prism"
    r_s: int = 3
    r_t: int = 50_000
    r: float = 0.0
    beta: float = 0.0
    d_max: int = 16
    queue_depth: int = 16

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidSearchParams(f"unknown shape {self.shape!r}")
        if self.r_s < 0 or self.r_t < 0 or self.r < 0 or self.beta < 0:
            raise InvalidSearchParams("radii must be non-negative")
        if self.d_max < 1 or self.queue_depth < 1:
            raise InvalidSearchParams("d_max and queue_depth must be >= 1")

    @property
    def spatial_extent(self) -> int:
        """Half-width in pixels of the candidate window to scan."""
        if self.shape in QUEUE_BACKED_SHAPES:
            return int(self.r_s)
        return int(math.floor(self.r))


@dataclass(frozen=True)
class Neighbor:
    """A valid past neighbor of a query event; offsets are new minus old."""

    n: int
    t: int
    p: int
    dx: int
    dy: int
    dt: int


@dataclass
class QueueEntry:
    t: int
    p: int
    n: int


class EventQueueGrid:
    """W x H ring buffers of the most recent events per pixel."""

    def __init__(self, width: int, height: int, depth: int = 16):
        if width < 1 or height < 1 or depth < 1:
            raise InvalidDims(f"bad grid dims ({width},{height},{depth})")
        self.width = width
        self.height = height
        self.depth = depth
        q = width * height
        self._t = np.zeros((q, depth), dtype=np.int64)
        self._p = np.zeros((q, depth), dtype=np.int64)
        self._n = np.zeros((q, depth), dtype=np.int64)
        self._count = np.zeros(q, dtype=np.int64)
        self._head = np.full(q, depth - 1, dtype=np.int64)  # newest slot

    def _check_bounds(self, x: int, y: int) -> int:
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise OutOfBoundsEvent(
                f"({x},{y}) outside {self.width}x{self.height}")
        return y * self.width + x

    def queue_len(self, x: int, y: int) -> int:
        return int(self._count[self._check_bounds(x, y)])

    def entries(self, x: int, y: int) -> list[QueueEntry]:
        """Entries at (x, y), newest first."""
        qi = self._check_bounds(x, y)
        out = []
        head = int(self._head[qi])
        for k in range(int(self._count[qi])):
            slot = (head - k) % self.depth
            out.append(QueueEntry(int(self._t[qi, slot]),
                                  int(self._p[qi, slot]),
                                  int(self._n[qi, slot])))
        return out

    def push_event(self, ev: Event) -> QueueEntry | None:
        """Store ev newest-first; return the evicted oldest entry if full."""
        qi = self._check_bounds(ev.x, ev.y)
        evicted = None
        slot = (int(self._head[qi]) + 1) % self.depth
        if self._count[qi] == self.depth:
            evicted = QueueEntry(int(self._t[qi, slot]),
                                 int(self._p[qi, slot]),
                                 int(self._n[qi, slot]))
        else:
            self._count[qi] += 1
        self._t[qi, slot] = ev.t
        self._p[qi, slot] = ev.p
        self._n[qi, slot] = ev.n
        self._head[qi] = slot
        return evicted


def new_queue_grid(width: int, height: int, depth: int = 16) -> EventQueueGrid:
    return EventQueueGrid(width, height, depth)


def _spatial_ok(shape: str, dx: int, dy: int, params: SearchParams) -> bool:
    """Spatial slice of the shape predicate (dt = 0 cross-section)."""
    if shape == "prism":
        return abs(dx) + abs(dy) <= params.r_s
    if shape == "cylinder":
        return dx * dx + dy * dy <= params.r_s * params.r_s
    if shape == "hemisphere":
        return dx * dx + dy * dy <= params.r * params.r
    return abs(dx) + abs(dy) <= params.r  # semi_octahedron


def _full_ok(shape: str, dx: int, dy: int, dt: int, params: SearchParams) -> bool:
    if dt < 0:
        return False
    if shape == "prism":
        return abs(dx) + abs(dy) <= params.r_s and dt <= params.r_t
    if shape == "cylinder":
        return (dx * dx + dy * dy <= params.r_s * params.r_s
                and dt <= params.r_t)
    if shape == "hemisphere":
        return math.sqrt(dx * dx + dy * dy + (params.beta * dt) ** 2) <= params.r
    return abs(dx) + abs(dy) + params.beta * dt <= params.r


def search_neighbors(grid: EventQueueGrid, ev: Event,
                     params: SearchParams) -> list[Neighbor]:
    """Queue-backed neighbor search (prism / cylinder shapes only).

    ev must not yet have been pushed into the grid.
    """
    if params.shape not in QUEUE_BACKED_SHAPES:
        raise InvalidSearchParams(
            f"shape {params.shape!r} is not queue-backed")
    grid._check_bounds(ev.x, ev.y)
    r = params.spatial_extent
    out: list[Neighbor] = []
    for dy in range(-r, r + 1):
        yj = ev.y - dy
        if yj < 0 or yj >= grid.height:
            continue
        for dx in range(-r, r + 1):
            if not _spatial_ok(params.shape, dx, dy, params):
                continue
            xj = ev.x - dx
            if xj < 0 or xj >= grid.width:
                continue
            for entry in grid.entries(xj, yj):
                dt = ev.t - entry.t
                if 0 <= dt <= params.r_t:
                    out.append(Neighbor(entry.n, entry.t, entry.p,
                                        dx, dy, dt))
                    if len(out) == params.d_max:
                        return out
    return out


def brute_force_neighbors(history: list[Event], ev: Event,
                          params: SearchParams) -> list[Neighbor]:
    """Reference search over the full stream prefix before ev.

    Retention is replayed first (only the queue_depth most recent events per
    pixel are eligible), then the shape predicate, canonical scan order, and
    d_max truncation. For queue-backed shapes this matches search_neighbors
    exactly.
    """
    per_pixel: dict[tuple[int, int], list[Event]] = {}
    for old in history:
        per_pixel.setdefault((old.x, old.y), []).append(old)
    r = params.spatial_extent
    out: list[Neighbor] = []
    for dy in range(-r, r + 1):
        yj = ev.y - dy
        for dx in range(-r, r + 1):
            if not _spatial_ok(params.shape, dx, dy, params):
                continue
            xj = ev.x - dx
            retained = per_pixel.get((xj, yj))
            if retained is None:
                continue
            # Newest-first over the last queue_depth arrivals at this pixel.
            for old in reversed(retained[-params.queue_depth:]):
                dt = ev.t - old.t
                if _full_ok(params.shape, dx, dy, dt, params):
                    out.append(Neighbor(old.n, old.t, old.p, dx, dy, dt))
                    if len(out) == params.d_max:
                        return out
    return out


def naive_neighbors(history: list[Event], ev: Event,
                    params: SearchParams) -> list[Neighbor]:
    """Second, even simpler reference: no pixel index at all.

    Eligibility (last queue_depth arrivals per pixel) is computed by a
    backwards scan of the whole history; candidates are then sorted into the
    canonical scan order. Used for oracle-vs-oracle self-consistency.
    """
    seen: dict[tuple[int, int], int] = {}
    eligible: list[Event] = []
    for old in reversed(history):
        key = (old.x, old.y)
        c = seen.get(key, 0)
        if c < params.queue_depth:
            seen[key] = c + 1
            eligible.append(old)

    def scan_key(old: Event):
        dx, dy = ev.x - old.x, ev.y - old.y
        # (window row, window col, newest-first within the pixel queue)
        return (dy, dx, -old.n)

    out: list[Neighbor] = []
    for old in sorted(eligible, key=scan_key):
        dx, dy = ev.x - old.x, ev.y - old.y
        dt = ev.t - old.t
        if _full_ok(params.shape, dx, dy, dt, params):
            out.append(Neighbor(old.n, old.t, old.p, dx, dy, dt))
            if len(out) == params.d_max:
                break
    return out


@dataclass
class Adjacency:
    """Flattened per-event neighbor lists for a whole stream."""

    deg: np.ndarray              # int64[N]
    nbr_n: np.ndarray            # int64[N, d_max]
    nbr_dx: np.ndarray
    nbr_dy: np.ndarray
    nbr_dt: np.ndarray
    entries_scanned: np.ndarray  # queue entries inspected per event
    d_max: int = 16
    extra: dict = field(default_factory=dict)

    def neighbors(self, i: int) -> list[tuple[int, int, int, int]]:
        """(n, dx, dy, dt) tuples for event i, in scan order."""
        d = int(self.deg[i])
        return [(int(self.nbr_n[i, k]), int(self.nbr_dx[i, k]),
                 int(self.nbr_dy[i, k]), int(self.nbr_dt[i, k]))
                for k in range(d)]
