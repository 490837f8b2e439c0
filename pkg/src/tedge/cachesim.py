"""Trace-driven cache-hit simulation.

Reactive policies (FIFO, LRU, LFU) insert on every miss. The predictive
policy is proactive: at every update time the cache is replaced wholesale by
the predictor's Top-K and nothing is inserted on a miss. The hindsight policy
caches each interval's K most-requested contents.

Update intervals are windows of ``window_len`` slots of the log. Every
simulator accepts ``score_from`` (a window index): events before it still
drive the policy state but are not counted, so all policies can be scored on
the same span.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .pipeline import label_top_k, window_counts
from .trace import RequestLog

__all__ = [
    "PolicyResult",
    "simulate_reactive",
    "simulate_predictive",
    "simulate_optimal",
    "hit_ratio_report",
    "results_csv",
    "intervals_csv",
    "report_json",
    "REACTIVE_POLICIES",
    "label_predictor",
]

REACTIVE_POLICIES = ("fifo", "lru", "lfu")


@dataclass
class PolicyResult:
    policy: str
    capacity: int
    hits: int = 0
    misses: int = 0
    interval_hits: list[int] = field(default_factory=list)
    interval_requests: list[int] = field(default_factory=list)
    first_interval: int = 0

    @property
    def events(self) -> int:
        return self.hits + self.misses

    @property
    def hit_ratio(self) -> float:
        return self.hits / self.events if self.events else 0.0

    @property
    def interval_hit_ratios(self) -> list[float]:
        return [h / n if n else 0.0 for h, n in zip(self.interval_hits, self.interval_requests)]


class _Counter:
    """Accumulates hits per update interval from ``score_from`` onward."""

    def __init__(self, result: PolicyResult, n_intervals: int, score_from: int):
        self.result = result
        self.score_from = score_from
        n = max(n_intervals - score_from, 0)
        result.first_interval = score_from
        result.interval_hits = [0] * n
        result.interval_requests = [0] * n

    def record(self, interval: int, hit: bool) -> None:
        if interval < self.score_from or interval - self.score_from >= len(self.result.interval_hits):
            return
        i = interval - self.score_from
        self.result.interval_requests[i] += 1
        if hit:
            self.result.hits += 1
            self.result.interval_hits[i] += 1
        else:
            self.result.misses += 1


def _intervals(log: RequestLog, window_len: int | None) -> tuple[np.ndarray, int]:
    slots = log.slots()
    if window_len is None:
        return np.zeros(len(slots), dtype=np.int64), 1
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    # events in a trailing partial window are not scored
    return slots // window_len, log.horizon // window_len


def simulate_reactive(
    log: RequestLog,
    policy: str,
    capacity: int,
    window_len: int | None = None,
    score_from: int = 0,
) -> PolicyResult:
    """Replay ``log`` through a FIFO, LRU or LFU cache starting cold.

    LFU evicts the smallest cumulative request count (counts survive
    eviction), then the least recently accessed, then the lower content id.
    """
    if policy not in REACTIVE_POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {REACTIVE_POLICIES}")
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    intervals, n_intervals = _intervals(log, window_len)
    result = PolicyResult(policy, capacity)
    counter = _Counter(result, n_intervals, score_from)

    resident: OrderedDict[int, None] = OrderedDict()
    freq: dict[int, int] = {}
    last: dict[int, int] = {}
    heap: list[tuple[int, int, int]] = []  # (freq, last access, id); stale entries skipped
    for step, (ev, interval) in enumerate(zip(log.events, intervals)):
        c = ev.content_id
        hit = c in resident
        counter.record(int(interval), hit)
        freq[c] = freq.get(c, 0) + 1
        last[c] = step
        if hit:
            if policy == "lru":
                resident.move_to_end(c)
            elif policy == "lfu":
                heapq.heappush(heap, (freq[c], step, c))
            continue
        if len(resident) >= capacity:
            if policy == "lfu":
                while True:
                    f, t, victim = heapq.heappop(heap)
                    if victim in resident and freq[victim] == f and last[victim] == t:
                        break
                del resident[victim]
            else:
                resident.popitem(last=False)
        resident[c] = None
        if policy == "lfu":
            heapq.heappush(heap, (freq[c], step, c))
    return result


def simulate_predictive(
    log: RequestLog,
    predictor: Callable[[np.ndarray, int], Sequence[int]],
    window_len: int,
    history_len: int,
    capacity: int,
    score_from: int = 0,
    name: str = "tedge",
    windows: np.ndarray | None = None,
) -> PolicyResult:
    """Proactive caching driven by ``predictor(history, t_u) -> content ids``.

    At each update time ``t_u >= history_len`` the cache becomes exactly the
    ``capacity`` ids returned for the ``(history_len, N_c)`` window history
    preceding ``t_u``. Before the first such update the cache is empty.
    ``windows`` may pass a precomputed window matrix of ``log``.
    """
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    Rw = window_counts(log, window_len).data if windows is None else np.asarray(windows)
    intervals, n_intervals = _intervals(log, window_len)
    caches: list[frozenset[int]] = [frozenset()] * n_intervals
    for t_u in range(max(history_len, score_from), n_intervals):
        ids = [int(c) for c in predictor(Rw[t_u - history_len : t_u], t_u)]
        if len(ids) != capacity or len(set(ids)) != capacity:
            raise ValueError(f"predictor must return {capacity} distinct content ids at t_u={t_u}, got {ids}")
        if not all(1 <= c <= log.catalog_size for c in ids):
            raise ValueError(f"predictor returned ids outside the catalog at t_u={t_u}")
        caches[t_u] = frozenset(ids)
    return _score_static(log, intervals, n_intervals, caches, capacity, score_from, name)


def label_predictor(k: int):
    """Predictor that caches the labelling rule applied to the history itself
    (no learning): the K-hot set of its last window."""
    def predict(history, t_u):
        return [int(i) + 1 for i in np.flatnonzero(label_top_k(history, k))]

    return predict


def simulate_optimal(
    log: RequestLog,
    window_len: int,
    capacity: int,
    score_from: int = 0,
    warmup: int = 0,
) -> PolicyResult:
    """Hindsight bound: each interval caches its own K most-requested contents.

    Ties go to the lower content id. Intervals before ``warmup`` start empty,
    which mirrors the predictive policy's warm-up when comparing the two.
    """
    if capacity < 1:
        raise ValueError("capacity must be >= 1")
    intervals, n_intervals = _intervals(log, window_len)
    counts = np.zeros((n_intervals, log.catalog_size), dtype=np.int64)
    keep = intervals < n_intervals
    np.add.at(counts, (intervals[keep], log.content_ids()[keep] - 1), 1)
    caches = [frozenset()] * n_intervals
    for w in range(warmup, n_intervals):
        order = np.lexsort((np.arange(log.catalog_size), -counts[w]))
        caches[w] = frozenset(int(c) + 1 for c in order[:capacity])
    return _score_static(log, intervals, n_intervals, caches, capacity, score_from, "optimal")


def _score_static(log, intervals, n_intervals, caches, capacity, score_from, name) -> PolicyResult:
    result = PolicyResult(name, capacity)
    counter = _Counter(result, n_intervals, score_from)
    for ev, interval in zip(log.events, intervals):
        interval = int(interval)
        if interval < n_intervals:
            counter.record(interval, ev.content_id in caches[interval])
    return result


def hit_ratio_report(results: Sequence[PolicyResult]) -> dict:
    """Comparison table (one row per policy) plus per-interval series."""
    if not results:
        raise ValueError("no results to report")
    rows = [
        {
            "policy": r.policy,
            "K": r.capacity,
            "events": r.events,
            "hits": r.hits,
            "misses": r.misses,
            "hit_ratio": r.hit_ratio,
        }
        for r in results
    ]
    series = {r.policy: {"first_interval": r.first_interval, "hit_ratio": r.interval_hit_ratios} for r in results}
    return {"rows": rows, "intervals": series}


def results_csv(results: Sequence[PolicyResult]) -> str:
    """``policy,K,events,hits,misses,hit_ratio`` CSV text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "K", "events", "hits", "misses", "hit_ratio"])
    for row in hit_ratio_report(results)["rows"]:
        w.writerow([row["policy"], row["K"], row["events"], row["hits"], row["misses"], f"{row['hit_ratio']:.6f}"])
    return buf.getvalue()


def intervals_csv(results: Sequence[PolicyResult]) -> str:
    """Long-format per-interval CSV: ``policy,interval,requests,hits,hit_ratio``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "interval", "requests", "hits", "hit_ratio"])
    for r in results:
        for i, (h, n) in enumerate(zip(r.interval_hits, r.interval_requests)):
            w.writerow([r.policy, r.first_interval + i, n, h, f"{(h / n if n else 0.0):.6f}"])
    return buf.getvalue()


def report_json(results: Sequence[PolicyResult]) -> str:
    return json.dumps(hit_ratio_report(results), indent=1, sort_keys=True)
