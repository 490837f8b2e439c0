"""Request-log ingestion and the per-node indicator request matrix.

Two on-disk formats are understood:

* ``movielens_tsv``: ``user<TAB>item<TAB>rating<TAB>timestamp`` per line, as in
  MovieLens 100K ``u.data``. The rating is discarded; every row is a request.
* ``events_csv``: header ``timestamp,user_id,content_id`` (an optional fourth
  ``node_id`` column is accepted and written back when present).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Mapping

import numpy as np

__all__ = [
    "TraceParseError",
    "RequestEvent",
    "RequestLog",
    "RequestMatrix",
    "Assignment",
    "parse_trace",
    "make_log",
    "reslot",
    "write_events_csv",
    "read_positions",
    "assign_requests_to_nodes",
    "build_request_matrix",
]

FORMATS = ("movielens_tsv", "events_csv")


class TraceParseError(ValueError):
    """Raised for unreadable trace input; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True, order=True)
class RequestEvent:
    timestamp: int
    user_id: int
    content_id: int
    node_id: int | None = None


@dataclass(frozen=True)
class RequestLog:
    """Time-ordered request events over ``horizon`` slots of ``slot_seconds``.

    ``origin`` is the timestamp of slot 0. ``n_duplicates`` counts events
    dropped at construction because the same user already requested in the
    same slot.
    """

    events: tuple[RequestEvent, ...]
    catalog_size: int
    horizon: int
    slot_seconds: int = 1
    origin: int = 0
    n_duplicates: int = 0

    def __post_init__(self):
        if self.slot_seconds < 1:
            raise ValueError("slot_seconds must be >= 1")
        prev = None
        for ev in self.events:
            if ev.timestamp < 0:
                raise ValueError(f"negative timestamp in {ev}")
            if not 1 <= ev.content_id <= self.catalog_size:
                raise ValueError(
                    f"content_id {ev.content_id} outside catalog [1, {self.catalog_size}]"
                )
            if prev is not None and ev.timestamp < prev:
                raise ValueError("events must be sorted by timestamp")
            if not 0 <= self.slot_of(ev) < self.horizon:
                raise ValueError(f"event {ev} falls outside horizon {self.horizon}")
            prev = ev.timestamp

    def __len__(self) -> int:
        return len(self.events)

    def slot_of(self, event: RequestEvent) -> int:
        return (event.timestamp - self.origin) // self.slot_seconds

    def slots(self) -> np.ndarray:
        return np.fromiter(
            ((e.timestamp - self.origin) // self.slot_seconds for e in self.events),
            dtype=np.int64,
            count=len(self.events),
        )

    def content_ids(self) -> np.ndarray:
        return np.fromiter(
            (e.content_id for e in self.events), dtype=np.int64, count=len(self.events)
        )

    def with_events(self, events: Iterable[RequestEvent]) -> "RequestLog":
        """Same catalog and time axis, different events (duplicates already handled)."""
        return replace(self, events=tuple(events), n_duplicates=0)


@dataclass(frozen=True)
class RequestMatrix:
    data: np.ndarray  # (T, N_c) uint8
    node_id: int | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class Assignment:
    logs: list[RequestLog]
    dropped: list[RequestEvent] = field(default_factory=list)

    @property
    def n_dropped(self) -> int:
        return len(self.dropped)


def make_log(
    events: Iterable[RequestEvent],
    slot_seconds: int = 1,
    catalog_size: int | None = None,
    horizon: int | None = None,
    origin: int | None = None,
) -> RequestLog:
    """Sort events, drop repeated (user, slot) requests and build a log.

    Unspecified catalog size, horizon and origin are inferred from the events.
    """
    evs = sorted(events, key=lambda e: e.timestamp)  # stable: file order within a timestamp
    if not evs and (catalog_size is None or horizon is None):
        raise ValueError("cannot infer catalog/horizon from an empty event list")
    if origin is None:
        origin = evs[0].timestamp if evs else 0
    if catalog_size is None:
        catalog_size = max(e.content_id for e in evs)
    if horizon is None:
        horizon = math.ceil((evs[-1].timestamp - origin + 1) / slot_seconds)

    seen: set[tuple[int, int]] = set()
    kept = []
    for e in evs:
        key = (e.user_id, (e.timestamp - origin) // slot_seconds)
        if key in seen:
            continue
        seen.add(key)
        kept.append(e)
    return RequestLog(
        events=tuple(kept),
        catalog_size=catalog_size,
        horizon=horizon,
        slot_seconds=slot_seconds,
        origin=origin,
        n_duplicates=len(evs) - len(kept),
    )


def reslot(log: RequestLog, slot_seconds: int) -> RequestLog:
    """Re-express ``log`` on a different slot length (same origin).

    Coarsening can create repeated (user, slot) pairs; those are dropped and
    counted as usual.
    """
    horizon = math.ceil(log.horizon * log.slot_seconds / slot_seconds)
    out = make_log(log.events, slot_seconds, log.catalog_size, horizon, log.origin)
    return replace(out, n_duplicates=out.n_duplicates + log.n_duplicates)


def _parse_int(token: str, lineno: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise TraceParseError(f"{what} is not an integer: {token!r}", lineno) from None


def _events_movielens(lines: Iterable[str]) -> list[RequestEvent]:
    events = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise TraceParseError(f"expected 4 tab-separated fields, got {len(parts)}", lineno)
        user, item, _rating, ts = (
            _parse_int(p, lineno, name)
            for p, name in zip(parts, ("user", "item", "rating", "timestamp"))
        )
        if item < 1:
            raise TraceParseError(f"item id must be >= 1, got {item}", lineno)
        if ts < 0:
            raise TraceParseError(f"negative timestamp {ts}", lineno)
        events.append(RequestEvent(ts, user, item))
    return events


def _events_csv(lines: Iterable[str]) -> list[RequestEvent]:
    reader = csv.reader(lines)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        return []
    base = ["timestamp", "user_id", "content_id"]
    if header not in (base, base + ["node_id"]):
        raise TraceParseError(f"unexpected header {header}", 1)
    events = []
    for row in reader:
        lineno = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise TraceParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
        vals = [_parse_int(c.strip(), lineno, name) for c, name in zip(row[:3], header)]
        if len(row) == 4:
            vals.append(_parse_int(row[3].strip(), lineno, "node_id") if row[3].strip() else None)
        if vals[2] < 1:
            raise TraceParseError(f"content_id must be >= 1, got {vals[2]}", lineno)
        if vals[0] < 0:
            raise TraceParseError(f"negative timestamp {vals[0]}", lineno)
        events.append(RequestEvent(*vals))
    return events


def parse_trace(reader: IO[bytes] | IO[str], format: str, slot_seconds: int = 1) -> RequestLog:
    """Parse a request trace into a time-sorted :class:`RequestLog`.

    ``N_c`` is the largest content id seen and
    ``T = ceil((max_ts - min_ts + 1) / slot_seconds)``.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown trace format {format!r}; expected one of {FORMATS}")
    if slot_seconds < 1:
        raise ValueError("slot_seconds must be >= 1")
    raw = reader.read()
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TraceParseError(f"input is not UTF-8: {exc}") from None
    lines = raw.splitlines()
    events = _events_movielens(lines) if format == "movielens_tsv" else _events_csv(lines)
    if not events:
        raise TraceParseError("trace contains no events")
    return make_log(events, slot_seconds=slot_seconds)


def write_events_csv(log: RequestLog, stream: IO[str]) -> None:
    with_node = any(e.node_id is not None for e in log.events)
    writer = csv.writer(stream, lineterminator="\n")
    header = ["timestamp", "user_id", "content_id"] + (["node_id"] if with_node else [])
    writer.writerow(header)
    for e in log.events:
        row = [e.timestamp, e.user_id, e.content_id]
        if with_node:
            row.append("" if e.node_id is None else e.node_id)
        writer.writerow(row)


def dumps_events_csv(log: RequestLog) -> str:
    buf = io.StringIO()
    write_events_csv(log, buf)
    return buf.getvalue()


def read_positions(stream: IO[str]) -> dict[int, tuple[float, float]]:
    """Read a ``user_id,x,y`` CSV (meters) into a mapping."""
    reader = csv.reader(stream)
    header = [h.strip() for h in next(reader, [])]
    if header != ["user_id", "x", "y"]:
        raise TraceParseError(f"unexpected positions header {header}", 1)
    out = {}
    for row in reader:
        if not row:
            continue
        if len(row) != 3:
            raise TraceParseError(f"expected 3 fields, got {len(row)}", reader.line_num)
        try:
            out[int(row[0])] = (float(row[1]), float(row[2]))
        except ValueError:
            raise TraceParseError(f"bad positions row {row}", reader.line_num) from None
    return out


def assign_requests_to_nodes(
    log: RequestLog,
    topo,
    positions: Mapping[int, tuple[float, float]] | None = None,
) -> Assignment:
    """Route each event to the nearest in-range hgNB (ties -> lowest node id).

    ``topo`` is a :class:`tedge.topology.Topology`; node ids are 1-based in
    the order FAPs then UAVs. User positions come from ``topo.ues`` unless
    ``positions`` is given. Events whose user is not in range of any node are
    returned in ``Assignment.dropped``.
    """
    nodes = topo.node_positions()
    tx_ranges = topo.node_ranges()
    if positions is None:
        positions = topo.user_positions()
    if len(nodes) != len(tx_ranges):
        raise ValueError("nodes and tx_ranges differ in length")
    pts = np.asarray(nodes, dtype=float).reshape(-1, 2)
    ranges = np.asarray(tx_ranges, dtype=float)
    per_node: list[list[RequestEvent]] = [[] for _ in nodes]
    dropped = []
    cache: dict[int, int | None] = {}
    for e in log.events:
        if e.user_id not in cache:
            if e.user_id not in positions:
                raise KeyError(f"user {e.user_id} has no position")
            d = np.hypot(*(pts - np.asarray(positions[e.user_id], dtype=float)).T)
            d = np.where(d <= ranges, d, np.inf)
            # argmin returns the first minimum, i.e. the lowest node id on ties
            best = int(np.argmin(d)) if len(d) else -1
            cache[e.user_id] = best if best >= 0 and np.isfinite(d[best]) else None
        idx = cache[e.user_id]
        if idx is None:
            dropped.append(e)
        else:
            per_node[idx].append(replace(e, node_id=idx + 1))
    return Assignment([log.with_events(evs) for evs in per_node], dropped)


def build_request_matrix(log: RequestLog, node_id: int | None = None) -> RequestMatrix:
    """Binary ``T x N_c`` matrix with a 1 wherever a content was requested in a slot."""
    data = np.zeros((log.horizon, log.catalog_size), dtype=np.uint8)
    if log.events:
        data[log.slots(), log.content_ids() - 1] = 1
    return RequestMatrix(data, node_id)
