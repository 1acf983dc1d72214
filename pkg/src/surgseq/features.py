"""Window-level motion features and KNN retrieval of step probabilities.

Optical flow and local descriptors are consumed as precomputed records;
this module only aggregates them per window (motion histograms, bag of
visual words) and turns feature vectors into step-probability vectors by
exact nearest-neighbour search.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .errors import FeatureError
from .windowing import SubSequence

logger = logging.getLogger(__name__)

N_BINS = 8
DEFAULT_AMP_MAX = 20.0


@dataclass(frozen=True)
class FlowRecord:
    """One optical-flow sample: point location and displacement in pixels."""

    frame: int
    x: float
    y: float
    dx: float
    dy: float


@dataclass
class MotionHistogram:
    """32-dimensional window descriptor: amplitude, x, y and direction bins."""

    amplitude: np.ndarray
    x_spatial: np.ndarray
    y_spatial: np.ndarray
    direction: np.ndarray
    empty: bool = False

    def vector(self) -> np.ndarray:
        return np.concatenate(
            [self.amplitude, self.x_spatial, self.y_spatial, self.direction]
        )


def _bin_index(value: float, upper: float) -> int:
    """Linear bin over [0, upper]; overflow and underflow clamp to the edges."""
    if upper <= 0:
        return 0
    idx = int(value / upper * N_BINS)
    return min(max(idx, 0), N_BINS - 1)


def motion_histogram(flows: Sequence[FlowRecord], w: SubSequence,
                     frame_dims: tuple[float, float],
                     amp_max: float = DEFAULT_AMP_MAX) -> MotionHistogram:
    """Aggregate flow records of one window into the four 8-bin histograms.

    Amplitude bins are linear on [0, amp_max]; the spatial and direction
    histograms weight each sample by its amplitude. All four histograms are
    L1-normalized. A window without motion keeps all amplitude mass in bin 0
    and leaves the three weighted histograms at zero.
    """
    width, height = frame_dims
    amp = np.zeros(N_BINS)
    x_hist = np.zeros(N_BINS)
    y_hist = np.zeros(N_BINS)
    dir_hist = np.zeros(N_BINS)
    for rec in flows:
        if rec.frame < w.start_frame or rec.frame > w.end_frame:
            raise FeatureError(
                f"flow record at frame {rec.frame} outside window "
                f"[{w.start_frame}, {w.end_frame}]"
            )
        a = math.hypot(rec.dx, rec.dy)
        amp[_bin_index(a, amp_max)] += 1.0
        if a > 0:
            x_hist[_bin_index(rec.x, width)] += a
            y_hist[_bin_index(rec.y, height)] += a
            theta = math.atan2(rec.dy, rec.dx)
            dir_hist[_bin_index(theta + math.pi, 2.0 * math.pi)] += a
    empty = len(flows) == 0
    if empty:
        logger.debug("window %d has no flow records; zero-motion histogram", w.index)
        amp[0] = 1.0
    else:
        amp = amp / amp.sum()
    for hist in (x_hist, y_hist, dir_hist):
        total = hist.sum()
        if total > 0:
            hist /= total
    return MotionHistogram(amplitude=amp, x_spatial=x_hist, y_spatial=y_hist,
                           direction=dir_hist, empty=empty)


@dataclass(frozen=True)
class LocalDescriptor:
    """Local appearance+motion descriptor attached to one window."""

    window_index: int
    vector: np.ndarray


@dataclass
class Dictionary:
    """Visual-word dictionary: M centroids of descriptor dimensionality."""

    centroids: np.ndarray  # (M, D)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=float)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise FeatureError("dictionary needs at least one centroid")
        if not np.all(np.isfinite(self.centroids)):
            raise FeatureError("dictionary centroids must be finite")

    @property
    def n_words(self) -> int:
        return self.centroids.shape[0]


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = np.empty((k, data.shape[1]))
    centroids[0] = data[rng.integers(len(data))]
    dist2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = dist2.sum()
        if total <= 0:
            centroids[i] = data[rng.integers(len(data))]
            continue
        probs = dist2 / total
        centroids[i] = data[rng.choice(len(data), p=probs)]
        dist2 = np.minimum(dist2, np.sum((data - centroids[i]) ** 2, axis=1))
    return centroids


def bovw_learn_dictionary(descriptors: Sequence[LocalDescriptor], m: int,
                          seed: int, max_iter: int = 100,
                          tol: float = 1e-6) -> Dictionary:
    """K-means (k-means++ init) over all training descriptors.

    Deterministic for a given seed; stops when no centroid moves more than
    tol or after max_iter Lloyd iterations.
    """
    if m < 1:
        raise FeatureError("dictionary size must be >= 1")
    if len(descriptors) < m:
        raise FeatureError(
            f"need at least {m} descriptors to learn {m} words, got {len(descriptors)}"
        )
    data = np.stack([np.asarray(d.vector, dtype=float) for d in descriptors])
    if len(np.unique(data, axis=0)) < m:
        raise FeatureError("degenerate data: fewer distinct descriptors than words")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(data, m, rng)
    for _ in range(max_iter):
        dists = np.linalg.norm(data[:, None, :] - centroids[None, :, :], axis=2)
        assignment = np.argmin(dists, axis=1)
        new_centroids = centroids.copy()
        for j in range(m):
            members = data[assignment == j]
            if len(members) > 0:
                new_centroids[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift <= tol:
            break
    return Dictionary(centroids=centroids)


def bovw_histogram(descriptors: Sequence[LocalDescriptor],
                   dictionary: Dictionary) -> np.ndarray:
    """Normalized histogram of nearest-word assignments; ties pick the
    lowest word index. An empty window yields the uniform vector."""
    m = dictionary.n_words
    if len(descriptors) == 0:
        logger.debug("empty descriptor set; uniform visual-word histogram")
        return np.full(m, 1.0 / m)
    data = np.stack([np.asarray(d.vector, dtype=float) for d in descriptors])
    if data.shape[1] != dictionary.centroids.shape[1]:
        raise FeatureError("descriptor dimensionality does not match dictionary")
    dists = np.linalg.norm(data[:, None, :] - dictionary.centroids[None, :, :], axis=2)
    assignment = np.argmin(dists, axis=1)
    counts = np.bincount(assignment, minlength=m).astype(float)
    return counts / counts.sum()


@dataclass
class KnnIndex:
    """Exact nearest-neighbour index over (feature vector, step label) pairs."""

    points: np.ndarray  # (N, D)
    labels: tuple[str, ...]
    k: int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim != 2 or self.points.shape[0] == 0:
            raise FeatureError("KNN index needs at least one point")
        if len(self.labels) != self.points.shape[0]:
            raise FeatureError("KNN index labels do not match point count")
        if not 1 <= self.k <= self.points.shape[0]:
            raise FeatureError("K must satisfy 1 <= K <= index size")

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "k": self.k,
            "labels": list(self.labels),
            "points": [[float(v) for v in row] for row in self.points],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KnnIndex":
        return cls(points=np.asarray(data["points"], dtype=float),
                   labels=tuple(data["labels"]), k=int(data["k"]))


def knn_step_probs(index: KnnIndex, feature: np.ndarray, steps: Sequence[str],
                   exclude=None) -> np.ndarray:
    """Per-step fraction among the K nearest neighbours of the feature.

    Distance ties resolve by insertion order. `exclude` (an index, slice or
    index array) masks rows out of the search, used when querying training
    points against an index that contains their own surgery.
    """
    feature = np.asarray(feature, dtype=float)
    if feature.shape[0] != index.points.shape[1]:
        raise FeatureError("query dimensionality does not match index")
    dists = np.linalg.norm(index.points - feature[None, :], axis=1)
    if exclude is not None:
        dists = dists.copy()
        dists[exclude] = np.inf
        if int(np.isfinite(dists).sum()) < index.k:
            raise FeatureError("K exceeds index size after exclusion")
    order = np.argsort(dists, kind="stable")[:index.k]
    probs = np.zeros(len(steps))
    step_pos = {s: i for i, s in enumerate(steps)}
    for row in order:
        label = index.labels[row]
        try:
            probs[step_pos[label]] += 1.0
        except KeyError:
            raise FeatureError(f"index label {label!r} not in step list") from None
    return probs / probs.sum()


def read_flow_stream(fh: IO[str]) -> tuple[tuple[float, float], list[FlowRecord]]:
    """Read a flow JSONL stream: a header with frame dimensions, then records."""
    header_line = fh.readline()
    try:
        header = json.loads(header_line)
        dims = (float(header["width"]), float(header["height"]))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FeatureError(f"malformed flow stream header: {exc}") from exc
    records = []
    for line in fh:
        line = line.strip()
        if not line:
            continue
        data = json.loads(line)
        rec = FlowRecord(frame=int(data["frame"]), x=float(data["x"]),
                         y=float(data["y"]), dx=float(data["dx"]),
                         dy=float(data["dy"]))
        if not (0 <= rec.x <= dims[0] and 0 <= rec.y <= dims[1]):
            raise FeatureError(
                f"flow record at frame {rec.frame} outside declared frame bounds"
            )
        records.append(rec)
    return dims, records


def read_descriptor_stream(fh: IO[str]) -> list[LocalDescriptor]:
    """Read a descriptor JSONL stream: a header declaring dimensionality."""
    header_line = fh.readline()
    try:
        header = json.loads(header_line)
        dim = int(header["descriptor_dim"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FeatureError(f"malformed descriptor stream header: {exc}") from exc
    out = []
    for line in fh:
        line = line.strip()
        if not line:
            continue
        data = json.loads(line)
        vec = np.asarray(data["vector"], dtype=float)
        if vec.shape[0] != dim:
            raise FeatureError("descriptor does not match declared dimensionality")
        out.append(LocalDescriptor(window_index=int(data["window_index"]), vector=vec))
    return out
