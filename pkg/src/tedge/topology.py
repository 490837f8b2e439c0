"""Network layout (FAPs, UAVs, UEs) and synthetic M-Zipf request workloads."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .trace import RequestEvent, RequestLog

__all__ = [
    "Topology",
    "ZipfModel",
    "RankShuffle",
    "mzipf_pmf",
    "sample_faps_ppp",
    "sample_ues_gmm",
    "kmeans",
    "place_uavs_kmeans",
    "generate_synthetic_trace",
    "default_topology",
]


@dataclass
class Topology:
    faps: list[tuple[float, float]]
    uavs: list[tuple[float, float]]
    ues: list[tuple[int, float, float]]
    tx_range: dict[str, float]
    area: tuple[float, float]

    def __post_init__(self):
        w, h = self.area
        for name, pts in (("fap", self.faps), ("uav", self.uavs)):
            if pts and self.tx_range.get(name, 0) <= 0:
                raise ValueError(f"tx_range[{name!r}] must be > 0")
            for x, y in pts:
                if not (0 <= x <= w and 0 <= y <= h):
                    raise ValueError(f"{name} at ({x}, {y}) outside area {self.area}")
        for uid, x, y in self.ues:
            if not (0 <= x <= w and 0 <= y <= h):
                raise ValueError(f"UE {uid} at ({x}, {y}) outside area {self.area}")

    @property
    def n_nodes(self) -> int:
        return len(self.faps) + len(self.uavs)

    def node_positions(self) -> list[tuple[float, float]]:
        """hgNB positions; node id ``i + 1`` is entry ``i`` (FAPs first, then UAVs)."""
        return list(self.faps) + list(self.uavs)

    def node_ranges(self) -> list[float]:
        return [self.tx_range["fap"]] * len(self.faps) + [self.tx_range["uav"]] * len(self.uavs)

    def user_positions(self) -> dict[int, tuple[float, float]]:
        return {int(uid): (x, y) for uid, x, y in self.ues}

    def to_dict(self) -> dict:
        return {
            "faps": [[float(x), float(y)] for x, y in self.faps],
            "uavs": [[float(x), float(y)] for x, y in self.uavs],
            "ues": [[int(u), float(x), float(y)] for u, x, y in self.ues],
            "tx_range": {k: float(v) for k, v in sorted(self.tx_range.items())},
            "area": [float(a) for a in self.area],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "Topology":
        return cls(
            faps=[tuple(p) for p in d["faps"]],
            uavs=[tuple(p) for p in d["uavs"]],
            ues=[(int(u), float(x), float(y)) for u, x, y in d["ues"]],
            tx_range=dict(d["tx_range"]),
            area=tuple(d["area"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "Topology":
        return cls.from_dict(json.loads(text))


def mzipf_pmf(n_contents: int, gamma: float, zeta: float = 0.0) -> np.ndarray:
    """Mandelbrot-Zipf request probabilities for ranks ``1..n_contents``.

    ``p_l = (l + zeta)^-gamma / sum_r (r + zeta)^-gamma``.
    """
    if n_contents < 1:
        raise ValueError("n_contents must be >= 1")
    if gamma < 0 or zeta < 0:
        raise ValueError("gamma and zeta must be non-negative")
    weights = (np.arange(1, n_contents + 1, dtype=np.float64) + zeta) ** (-gamma)
    return weights / weights.sum()


@dataclass(frozen=True)
class ZipfModel:
    n_contents: int
    gamma: float = 0.8
    zeta: float = 0.0
    pmf: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        pmf = self.pmf
        if pmf is None:
            pmf = mzipf_pmf(self.n_contents, self.gamma, self.zeta)
        pmf = np.asarray(pmf, dtype=np.float64)
        if pmf.shape != (self.n_contents,):
            raise ValueError(f"pmf must have length {self.n_contents}")
        if np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-12:
            raise ValueError("pmf must be a probability vector")
        if np.any(np.diff(pmf) > 0):
            raise ValueError("pmf must be non-increasing in rank")
        object.__setattr__(self, "pmf", pmf)


@dataclass(frozen=True)
class RankShuffle:
    """Every ``period`` slots a fresh random permutation maps ranks to content ids."""

    period: int

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("rank_shuffle period must be >= 1")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_faps_ppp(intensity: float, area: tuple[float, float], rng_seed=None) -> list[tuple[float, float]]:
    """Homogeneous Poisson point process on ``[0, w] x [0, h]`` (intensity per m^2)."""
    if intensity < 0:
        raise ValueError("intensity must be >= 0")
    rng = _rng(rng_seed)
    w, h = area
    n = int(rng.poisson(intensity * w * h))
    xy = rng.uniform(0.0, 1.0, size=(n, 2)) * np.array([w, h])
    return [(float(x), float(y)) for x, y in xy]


def sample_ues_gmm(
    components: Sequence[tuple[float, Sequence[float], Sequence[Sequence[float]]]],
    n_users: int,
    area: tuple[float, float],
    rng_seed=None,
    max_tries: int = 10_000,
) -> list[tuple[float, float]]:
    """Draw UE positions from a 2-D Gaussian mixture, resampling points outside ``area``.

    Each component is ``(weight, mean, covariance)``. Covariances must be
    symmetric positive semi-definite; a zero covariance pins users to the mean.
    """
    if n_users < 0:
        raise ValueError("n_users must be >= 0")
    weights = np.array([c[0] for c in components], dtype=float)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError("component weights must be non-negative and sum to 1")
    factors = []
    for i, (_, mean, cov) in enumerate(components):
        cov = np.asarray(cov, dtype=float)
        if cov.shape != (2, 2) or not np.allclose(cov, cov.T):
            raise ValueError(f"component {i}: covariance must be a symmetric 2x2 matrix")
        vals, vecs = np.linalg.eigh(cov)
        if vals.min() < -1e-12 * max(1.0, abs(vals).max()):
            raise ValueError(f"component {i}: covariance is not positive semi-definite")
        factors.append(vecs * np.sqrt(np.clip(vals, 0.0, None)))
    means = np.array([c[1] for c in components], dtype=float).reshape(-1, 2)

    rng = _rng(rng_seed)
    w, h = area
    out = []
    for _ in range(n_users):
        for _attempt in range(max_tries):
            k = rng.choice(len(weights), p=weights)
            p = means[k] + factors[k] @ rng.standard_normal(2)
            if 0 <= p[0] <= w and 0 <= p[1] <= h:
                out.append((float(p[0]), float(p[1])))
                break
        else:
            raise RuntimeError(f"no in-area sample after {max_tries} draws; check the mixture")
    return out


def _sse(points: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((points - centroids[labels]) ** 2).sum())


def kmeans(points, k: int, max_iters: int = 300, rng_seed=None, tol: float = 1e-9):
    """Lloyd's algorithm with k-means++ seeding.

    Returns ``(centroids, labels, sse_history)`` where ``sse_history[i]`` is the
    within-cluster sum of squares after iteration ``i``.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("points must be a non-empty (n, dim) array")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(np.unique(pts, axis=0)):
        raise ValueError(f"k={k} exceeds the number of distinct positions")
    rng = _rng(rng_seed)

    # k-means++: first centre uniform, the rest proportional to squared distance
    centroids = [pts[rng.integers(len(pts))]]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        idx = rng.choice(len(pts), p=d2 / d2.sum())
        centroids.append(pts[idx])
        d2 = np.minimum(d2, ((pts - pts[idx]) ** 2).sum(axis=1))
    centroids = np.array(centroids)

    history = []
    labels = np.zeros(len(pts), dtype=np.int64)
    for _ in range(max_iters):
        dist = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        new = centroids.copy()
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        history.append(_sse(pts, centroids, labels))
        if shift < tol:
            break
    return centroids, labels, history


def place_uavs_kmeans(ue_positions, n_uavs: int, max_iters: int = 300, rng_seed=None) -> list[tuple[float, float]]:
    """UAV hover points: k-means centroids of the UE positions."""
    if n_uavs < 1:
        raise ValueError("n_uavs must be >= 1")
    centroids, _, _ = kmeans(ue_positions, n_uavs, max_iters=max_iters, rng_seed=rng_seed)
    return [(float(x), float(y)) for x, y in centroids]


def generate_synthetic_trace(
    zipf: ZipfModel,
    n_slots: int,
    requests_per_slot: int,
    drift: RankShuffle | None = None,
    rng_seed=None,
    n_users: int | None = None,
    slot_seconds: int = 1,
) -> RequestLog:
    """I.i.d. M-Zipf requests, ``requests_per_slot`` per slot.

    Content ids start as rank order (rank 1 is content 1). With a
    :class:`RankShuffle` drift the rank-to-content mapping is redrawn every
    ``period`` slots. When ``n_users`` is given, each slot's requests come from
    distinct users drawn from ``1..n_users``; otherwise every event gets its own
    user id. With ``slot_seconds > 1`` the requests of a slot get distinct
    timestamps inside it, so re-slotting the log at one second keeps them apart.
    """
    if n_slots < 1:
        raise ValueError("n_slots must be >= 1")
    if requests_per_slot < 0:
        raise ValueError("requests_per_slot must be >= 0")
    if n_users is not None and requests_per_slot > n_users:
        raise ValueError("requests_per_slot exceeds n_users (one request per user per slot)")
    rng = _rng(rng_seed)
    n = zipf.n_contents
    perm = np.arange(n)
    events = []
    next_user = 1
    for t in range(n_slots):
        if drift is not None and t > 0 and t % drift.period == 0:
            perm = rng.permutation(n)
        if requests_per_slot == 0:
            continue
        ranks = rng.choice(n, size=requests_per_slot, p=zipf.pmf)
        contents = perm[ranks] + 1
        if n_users is None:
            users = range(next_user, next_user + requests_per_slot)
            next_user += requests_per_slot
        else:
            users = rng.choice(n_users, size=requests_per_slot, replace=False) + 1
        if slot_seconds == 1:
            ts = np.zeros(requests_per_slot, dtype=np.int64)
        else:
            # spread the slot's requests over distinct seconds where possible
            ts = np.sort(rng.choice(slot_seconds, size=requests_per_slot, replace=requests_per_slot > slot_seconds))
        ts = ts + t * slot_seconds
        events.extend(RequestEvent(int(s), int(u), int(c)) for s, u, c in zip(ts, users, contents))
    return RequestLog(tuple(events), catalog_size=n, horizon=n_slots, slot_seconds=slot_seconds)


def default_topology(
    rng_seed=0,
    n_users: int = 600,
    area: tuple[float, float] = (1000.0, 1000.0),
    expected_faps: float = 5.0,
    n_uavs: int = 1,
    fap_range: float = 300.0,
    uav_range: float | None = None,
) -> Topology:
    """Reference layout: PPP FAPs (5 expected), GMM UEs and k-means UAV(s).

    The UAV range defaults to the area diagonal so every UE is covered.
    """
    rng = _rng(rng_seed)
    w, h = area
    faps = sample_faps_ppp(expected_faps / (w * h), area, rng)
    components = [
        (0.4, (0.25 * w, 0.3 * h), np.diag([(0.08 * w) ** 2, (0.08 * h) ** 2])),
        (0.35, (0.7 * w, 0.65 * h), np.diag([(0.1 * w) ** 2, (0.1 * h) ** 2])),
        (0.25, (0.5 * w, 0.5 * h), np.diag([(0.25 * w) ** 2, (0.25 * h) ** 2])),
    ]
    ue_xy = sample_ues_gmm(components, n_users, area, rng)
    uavs = place_uavs_kmeans(ue_xy, n_uavs, rng_seed=rng) if n_users else []
    if uav_range is None:
        uav_range = float(np.hypot(w, h))
    return Topology(
        faps=faps,
        uavs=uavs,
        ues=[(i + 1, x, y) for i, (x, y) in enumerate(ue_xy)],
        tx_range={"fap": fap_range, "uav": uav_range},
        area=area,
    )
