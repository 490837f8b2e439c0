"""Data preparation: windowing, segmentation, Top-K labeling and GAF images.

Window indices are 0-based here: window ``w`` covers slots ``[w*W, (w+1)*W)``.
A sample built from windows ``[u, u+l)`` targets update time ``t_u = u + l``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .trace import RequestLog, RequestMatrix

__all__ = [
    "WindowMatrix",
    "Sample",
    "Dataset",
    "window_aggregate",
    "window_counts",
    "segment_windows",
    "request_probabilities",
    "sample_skewness",
    "skewness_columns",
    "label_top_k",
    "gaf_encode",
    "gaf_encode_many",
    "encode_history",
    "count_image",
    "build_dataset",
    "write_dataset",
    "read_dataset",
]

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class WindowMatrix:
    data: np.ndarray  # (N_W, N_c) int64
    window_len: int

    @property
    def n_windows(self) -> int:
        return self.data.shape[0]

    @property
    def n_contents(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Sample:
    history: np.ndarray  # (l, N_c) request counts for windows [t_u - l, t_u)
    label: np.ndarray  # (N_c,) uint8, exactly K ones
    t_u: int
    node_id: int = 0


@dataclass
class Dataset:
    samples: list[Sample]
    history_len: int
    n_contents: int
    k: int
    gaf_scale: str = "sample"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def images(self, i: int) -> np.ndarray:
        """GAF image stack ``(N_c, l, l)`` for sample ``i``."""
        return encode_history(self.samples[i].history, self.gaf_scale)

    def labels(self) -> np.ndarray:
        return np.stack([s.label for s in self.samples]) if self.samples else np.zeros((0, self.n_contents), np.uint8)

    def split(self, train_fraction: float) -> tuple["Dataset", "Dataset"]:
        """Time-ordered split: the earliest ``train_fraction`` of update times train."""
        order = sorted(range(len(self.samples)), key=lambda i: (self.samples[i].t_u, self.samples[i].node_id))
        n_train = int(round(train_fraction * len(order)))
        cut_t = self.samples[order[n_train - 1]].t_u if 0 < n_train < len(order) else None
        if cut_t is None:
            first = [self.samples[i] for i in order[:n_train]]
            rest = [self.samples[i] for i in order[n_train:]]
        else:
            # keep all nodes' samples of one update time on the same side
            first = [self.samples[i] for i in order if self.samples[i].t_u <= cut_t]
            rest = [self.samples[i] for i in order if self.samples[i].t_u > cut_t]
        make = lambda s: Dataset(s, self.history_len, self.n_contents, self.k, self.gaf_scale, dict(self.meta))
        return make(first), make(rest)


def window_aggregate(R, window_len: int) -> WindowMatrix:
    """Sum the request matrix over consecutive blocks of ``window_len`` slots.

    A trailing partial window is discarded.
    """
    data = R.data if isinstance(R, RequestMatrix) else np.asarray(R)
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    T, n_c = data.shape
    if window_len > T:
        raise ValueError(f"window_len {window_len} exceeds horizon {T}")
    n_w = T // window_len
    agg = data[: n_w * window_len].astype(np.int64).reshape(n_w, window_len, n_c).sum(axis=1)
    return WindowMatrix(agg, window_len)


def window_counts(log: RequestLog, window_len: int) -> WindowMatrix:
    """``window_aggregate(build_request_matrix(log), window_len)`` without the
    dense ``T x N_c`` intermediate."""
    if window_len < 1:
        raise ValueError("window_len must be >= 1")
    if window_len > log.horizon:
        raise ValueError(f"window_len {window_len} exceeds horizon {log.horizon}")
    n_w, n_c = log.horizon // window_len, log.catalog_size
    slots = log.slots()
    cells = np.unique(slots * n_c + (log.content_ids() - 1))  # indicator: one per (slot, content)
    slot, content = np.divmod(cells, n_c)
    keep = slot < n_w * window_len
    flat = (slot[keep] // window_len) * n_c + content[keep]
    return WindowMatrix(np.bincount(flat, minlength=n_w * n_c).reshape(n_w, n_c).astype(np.int64), window_len)


def _window_data(Rw) -> np.ndarray:
    return Rw.data if isinstance(Rw, WindowMatrix) else np.asarray(Rw)


def segment_windows(Rw, history_len: int) -> list[tuple[np.ndarray, int]]:
    """Stride-1 sliding window: ``M = N_W - l`` pairs ``(rows [u, u+l), u+l)``."""
    data = _window_data(Rw)
    n_w = data.shape[0]
    if history_len < 1:
        raise ValueError("history_len must be >= 1")
    if n_w <= history_len:
        raise ValueError(f"need more than {history_len} windows, got {n_w}")
    return [(data[u : u + history_len], u + history_len) for u in range(n_w - history_len)]


def request_probabilities(row) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if np.any(row < 0):
        raise ValueError("request counts must be non-negative")
    total = row.sum()
    if total == 0:
        return np.zeros_like(row)
    return row / total


def sample_skewness(series) -> float:
    """Fisher-Pearson coefficient ``g1 = m3 / m2**1.5``; 0 for a flat series."""
    x = np.asarray(series, dtype=np.float64)
    if x.size < 1:
        raise ValueError("series must be non-empty")
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 < VARIANCE_FLOOR:
        return 0.0
    return float(np.mean(d**3) / m2**1.5)


def skewness_columns(history) -> np.ndarray:
    """:func:`sample_skewness` of every column of an ``(l, N_c)`` matrix."""
    x = np.asarray(history, dtype=np.float64)
    d = x - x.mean(axis=0)
    m2 = np.mean(d * d, axis=0)
    m3 = np.mean(d**3, axis=0)
    out = np.zeros(x.shape[1])
    ok = m2 >= VARIANCE_FLOOR
    out[ok] = m3[ok] / m2[ok] ** 1.5
    return out


def label_top_k(history, k: int) -> np.ndarray:
    """K-hot popularity label for an ``(l, N_c)`` count history.

    Contents whose count series is negatively skewed come first, ordered by
    their request probability in the last row; the remaining slots are filled
    by probability among the rest. Ties go to the lower content id.
    """
    h = np.asarray(history)
    if h.ndim != 2:
        raise ValueError("history must be a 2-D (l, N_c) matrix")
    n_c = h.shape[1]
    if not 1 <= k <= n_c:
        raise ValueError(f"k must be in [1, {n_c}], got {k}")
    prob = request_probabilities(h[-1])
    rising = skewness_columns(h) < 0
    # lexsort: last key is primary
    order = np.lexsort((np.arange(n_c), -prob, ~rising))
    label = np.zeros(n_c, dtype=np.uint8)
    label[order[:k]] = 1
    return label


def gaf_encode_many(series, value_range=None) -> np.ndarray:
    """Gramian angular summation fields for each row of ``series`` (``(B, l)``).

    Rows are min-max rescaled to ``[-1, 1]`` (a flat row maps to zeros). If
    ``value_range=(lo, hi)`` is given, rows use that range instead (scalars, or
    one bound per row).
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError("series must be a (B, l) array with l >= 1")
    if value_range is None:
        lo = x.min(axis=1, keepdims=True)
        hi = x.max(axis=1, keepdims=True)
    else:
        lo, hi = (np.broadcast_to(np.asarray(v, dtype=np.float64).reshape(-1, 1), (len(x), 1)) for v in value_range)
    span = hi - lo
    flat = span <= 0
    scaled = np.where(flat, 0.0, 2.0 * (x - lo) / np.where(flat, 1.0, span) - 1.0)
    scaled = np.clip(scaled, -1.0, 1.0)
    # cos(a + b) = cos a cos b - sin a sin b with cos(phi) = x, sin(phi) = sqrt(1 - x^2)
    s = np.sqrt(np.clip(1.0 - scaled**2, 0.0, None))
    img = scaled[:, :, None] * scaled[:, None, :] - s[:, :, None] * s[:, None, :]
    return np.clip(img, -1.0, 1.0)


def gaf_encode(series, value_range=None) -> np.ndarray:
    """Gramian angular summation field ``cos(phi_i + phi_j)`` of a 1-D series."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("series must be 1-D")
    return gaf_encode_many(x[None, :], value_range)[0]


def encode_history(history, scale: str = "sample") -> np.ndarray:
    """Per-content GAF image stack ``(N_c, l, l)`` for one sample's history.

    ``scale="series"`` normalises each content's series on its own;
    ``"sample"`` uses the sample-wide count range so images keep the relative
    request level of each content.
    """
    h = np.asarray(history, dtype=np.float64)
    if scale == "series":
        return gaf_encode_many(h.T)
    if scale == "sample":
        return gaf_encode_many(h.T, (h.min(), h.max()))
    raise ValueError(f"unknown GAF scale {scale!r}")


def count_image(history, patch_size: int) -> np.ndarray:
    """Raw ``(l, N_c)`` count image scaled to ``[0, 1]``, zero-padded so both
    sides are multiples of ``patch_size`` (whole-matrix input mode)."""
    h = np.asarray(history, dtype=np.float64)
    top = h.max()
    img = h / top if top > 0 else np.zeros_like(h)
    pad_r = (-img.shape[0]) % patch_size
    pad_c = (-img.shape[1]) % patch_size
    return np.pad(img, ((0, pad_r), (0, pad_c)))


def build_dataset(Rw, history_len: int, k: int, gaf_scale: str = "sample", node_id: int = 0) -> Dataset:
    """Segment ``Rw`` and label every history with the Top-K set at its target.

    The label for target ``t_u`` is :func:`label_top_k` over windows
    ``(t_u - l, t_u]``, i.e. the probability comes from window ``t_u`` itself.
    GAF images are computed on demand by :meth:`Dataset.images`.
    """
    data = _window_data(Rw)
    segments = segment_windows(data, history_len)
    encode_history(np.zeros((1, 1)), gaf_scale)  # validate the scale name early
    samples = []
    for history, t_u in segments:
        label = label_top_k(data[t_u - history_len + 1 : t_u + 1], k)
        samples.append(Sample(np.array(history, dtype=np.int64), label, t_u, node_id))
    return Dataset(samples, history_len, data.shape[1], k, gaf_scale)


# --- dataset file -------------------------------------------------------------
# header: int32 l, N_c, K, M (little-endian)
# per sample: int32 node_id, int32 t_u, int32[l * N_c] history (row-major),
#             uint8[N_c] label

_HEADER = struct.Struct("<4i")
_SAMPLE_HEAD = struct.Struct("<2i")


def write_dataset(dataset: Dataset, stream: IO[bytes]) -> None:
    l, n_c = dataset.history_len, dataset.n_contents
    stream.write(_HEADER.pack(l, n_c, dataset.k, len(dataset)))
    for s in dataset.samples:
        stream.write(_SAMPLE_HEAD.pack(s.node_id, s.t_u))
        stream.write(np.ascontiguousarray(s.history, dtype="<i4").tobytes())
        stream.write(np.ascontiguousarray(s.label, dtype=np.uint8).tobytes())


def read_dataset(stream: IO[bytes], gaf_scale: str = "sample") -> Dataset:
    head = stream.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ValueError("truncated dataset header")
    l, n_c, k, m = _HEADER.unpack(head)
    samples = []
    for i in range(m):
        raw = stream.read(_SAMPLE_HEAD.size + 4 * l * n_c + n_c)
        if len(raw) != _SAMPLE_HEAD.size + 4 * l * n_c + n_c:
            raise ValueError(f"truncated dataset at sample {i}")
        node_id, t_u = _SAMPLE_HEAD.unpack_from(raw)
        off = _SAMPLE_HEAD.size
        hist = np.frombuffer(raw, dtype="<i4", count=l * n_c, offset=off).reshape(l, n_c)
        label = np.frombuffer(raw, dtype=np.uint8, count=n_c, offset=off + 4 * l * n_c)
        samples.append(Sample(hist.astype(np.int64), label.copy(), t_u, node_id))
    return Dataset(samples, l, n_c, k, gaf_scale)
