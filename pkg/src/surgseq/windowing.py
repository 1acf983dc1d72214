"""Slicing a surgery timeline into overlapping fixed-size windows.

Each window yields one observation record: the tools visible in it, an
optional feature vector and an optional step-probability vector. Records
serialize to JSON lines so streams can be replayed from files or stdin.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator

import numpy as np

from .errors import WindowingError
from .taxonomy import AnnotatedSurgery


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class WindowConfig:
    """Window length and shift in seconds plus the video frame rate."""

    t_scale: float = 2.0
    t_shift: float = 1.0
    fps: float = 25.0

    def __post_init__(self):
        if self.t_scale <= 0 or self.t_shift <= 0 or self.fps <= 0:
            raise WindowingError("t_scale, t_shift and fps must be positive")
        if self.t_shift > self.t_scale:
            raise WindowingError("t_shift must not exceed t_scale")
        if self.frames_scale < 2:
            raise WindowingError("window must span at least 2 frames")
        if self.frames_shift < 1:
            raise WindowingError("shift must span at least 1 frame")

    @property
    def frames_scale(self) -> int:
        """Window length in frames (round half up, so 2 s at 25 fps = 50)."""
        return _round_half_up(self.t_scale * self.fps)

    @property
    def frames_shift(self) -> int:
        return _round_half_up(self.t_shift * self.fps)


@dataclass(frozen=True)
class SubSequence:
    """One window: 1-based index and inclusive frame bounds."""

    index: int
    start_frame: int
    end_frame: int

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame + 1


@dataclass
class ObservationRecord:
    """Evidence extracted from one window."""

    window: SubSequence
    tools_present: frozenset[str] = frozenset()
    feature: np.ndarray | None = None
    step_probs: np.ndarray | None = None
    truth_step: str | None = None
    truth_phase: str | None = None

    def __post_init__(self):
        if self.step_probs is not None:
            probs = np.asarray(self.step_probs, dtype=float)
            if np.any(probs < 0):
                raise WindowingError("step_probs must be non-negative")
            if abs(float(probs.sum()) - 1.0) > 1e-9:
                raise WindowingError("step_probs must sum to 1")
            self.step_probs = probs
        if self.feature is not None:
            self.feature = np.asarray(self.feature, dtype=float)


def make_windows(frame_count: int, cfg: WindowConfig) -> list[SubSequence]:
    """Overlapping windows covering [0, frame_count); trailing frames that
    cannot fill a whole window are dropped."""
    length = cfg.frames_scale
    shift = cfg.frames_shift
    if frame_count < length:
        raise WindowingError(
            f"frame_count {frame_count} smaller than window length {length}"
        )
    count = (frame_count - length) // shift + 1
    return [
        SubSequence(index=t + 1, start_frame=t * shift, end_frame=t * shift + length - 1)
        for t in range(count)
    ]


def window_truth(ann: AnnotatedSurgery, w: SubSequence) -> tuple[str, str]:
    """Majority step label over the window; ties prefer the newest label.

    Ties go to the last frame's label when it is among the tied candidates,
    otherwise to the tied label seen latest in the window.
    """
    if w.start_frame < 0 or w.end_frame >= ann.frame_count:
        raise WindowingError(f"window {w.index} outside annotation bounds")
    labels = ann.step_of_frame[w.start_frame:w.end_frame + 1]
    counts: dict[str, int] = {}
    last_seen: dict[str, int] = {}
    for offset, label in enumerate(labels):
        label = str(label)
        counts[label] = counts.get(label, 0) + 1
        last_seen[label] = offset
    best = max(counts.values())
    candidates = [label for label, c in counts.items() if c == best]
    last_label = str(labels[-1])
    if last_label in candidates:
        step = last_label
    else:
        step = max(candidates, key=lambda label: last_seen[label])
    phase_at = last_seen[step] + w.start_frame
    return step, str(ann.phase_of_frame[phase_at])


def tools_in_window(ann: AnnotatedSurgery, w: SubSequence) -> frozenset[str]:
    """Tools whose presence intervals intersect the window."""
    if w.start_frame < 0 or w.end_frame >= ann.frame_count:
        raise WindowingError(f"window {w.index} outside annotation bounds")
    present = {
        tool
        for tool, start, end in ann.tool_intervals
        if start <= w.end_frame and end >= w.start_frame
    }
    return frozenset(present)


def observation_to_dict(rec: ObservationRecord) -> dict:
    out: dict = {
        "window_index": rec.window.index,
        "start_frame": rec.window.start_frame,
        "end_frame": rec.window.end_frame,
        "tools": sorted(rec.tools_present),
    }
    if rec.feature is not None:
        out["feature"] = [float(v) for v in rec.feature]
    if rec.step_probs is not None:
        out["step_probs"] = [float(v) for v in rec.step_probs]
    if rec.truth_step is not None:
        out["truth_step"] = rec.truth_step
    if rec.truth_phase is not None:
        out["truth_phase"] = rec.truth_phase
    return out


def observation_from_dict(data: dict) -> ObservationRecord:
    try:
        window = SubSequence(
            index=int(data["window_index"]),
            start_frame=int(data["start_frame"]),
            end_frame=int(data["end_frame"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise WindowingError(f"malformed observation record: {exc}") from exc
    feature = data.get("feature")
    step_probs = data.get("step_probs")
    return ObservationRecord(
        window=window,
        tools_present=frozenset(data.get("tools", [])),
        feature=None if feature is None else np.asarray(feature, dtype=float),
        step_probs=None if step_probs is None else np.asarray(step_probs, dtype=float),
        truth_step=data.get("truth_step"),
        truth_phase=data.get("truth_phase"),
    )


def write_observations(records: Iterable[ObservationRecord], fh: IO[str]) -> None:
    for rec in records:
        fh.write(json.dumps(observation_to_dict(rec), sort_keys=True))
        fh.write("\n")


def read_observations(fh: IO[str]) -> Iterator[ObservationRecord]:
    for line in fh:
        line = line.strip()
        if not line:
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise WindowingError(f"malformed observation line: {exc}") from exc
        yield observation_from_dict(data)
