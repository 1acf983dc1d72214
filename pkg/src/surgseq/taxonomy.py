"""Two-level label universe (phases, steps, tools) and ground-truth validation.

The taxonomy is data driven: the default bundled file describes a cataract
surgery with 5 phases and 20 steps, but any file with the same schema can be
loaded to target another kind of surgery.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import TaxonomyError

DEFAULT_TAXONOMY_RESOURCE = "cataract.yaml"


@dataclass(frozen=True)
class Taxonomy:
    """Ordered phases, steps and tools plus the step -> phase map.

    Immutable after construction; safe to share across threads.
    """

    phases: tuple[str, ...]
    steps: tuple[str, ...]
    tools: tuple[str, ...]
    step_to_phase: dict[str, str]
    phase_initial: frozenset[str]

    def __post_init__(self):
        if len(self.phases) < 1:
            raise TaxonomyError("taxonomy needs at least one phase")
        if len(set(self.phases)) != len(self.phases):
            raise TaxonomyError("duplicate phase label")
        if len(set(self.steps)) != len(self.steps):
            raise TaxonomyError("duplicate step label")
        if len(set(self.tools)) != len(self.tools):
            raise TaxonomyError("duplicate tool identifier")
        if len(self.steps) < len(self.phases):
            raise TaxonomyError("need at least as many steps as phases")
        for step in self.steps:
            phase = self.step_to_phase.get(step)
            if phase is None:
                raise TaxonomyError(f"step {step!r} has no phase assignment")
            if phase not in self.phases:
                raise TaxonomyError(f"step {step!r} maps to unknown phase {phase!r}")
        for step in self.step_to_phase:
            if step not in self.steps:
                raise TaxonomyError(f"step_to_phase mentions unknown step {step!r}")
        used_phases = set(self.step_to_phase.values())
        for phase in self.phases:
            if phase not in used_phases:
                raise TaxonomyError(f"phase {phase!r} has no steps")
        for phase in self.phase_initial:
            if phase not in self.phases:
                raise TaxonomyError(f"initial phase {phase!r} not in phase list")

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def phase_index(self, phase: str) -> int:
        try:
            return self.phases.index(phase)
        except ValueError:
            raise TaxonomyError(f"unknown phase {phase!r}") from None

    def step_index(self, step: str) -> int:
        try:
            return self.steps.index(step)
        except ValueError:
            raise TaxonomyError(f"unknown step {step!r}") from None

    def phase_of(self, step: str) -> str:
        try:
            return self.step_to_phase[step]
        except KeyError:
            raise TaxonomyError(f"unknown step {step!r}") from None

    def steps_of_phase(self, phase: str) -> tuple[str, ...]:
        if phase not in self.phases:
            raise TaxonomyError(f"unknown phase {phase!r}")
        return tuple(s for s in self.steps if self.step_to_phase[s] == phase)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "phases": list(self.phases),
            "steps": [{"name": s, "phase": self.step_to_phase[s]} for s in self.steps],
            "tools": list(self.tools),
            "phase_initial": sorted(self.phase_initial),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Taxonomy":
        try:
            phases = tuple(str(p) for p in data["phases"])
            step_entries = data["steps"]
            tools = tuple(str(t) for t in data.get("tools", []))
            initial = frozenset(str(p) for p in data.get("phase_initial", []))
        except (KeyError, TypeError) as exc:
            raise TaxonomyError(f"malformed taxonomy data: {exc}") from exc
        steps = []
        mapping = {}
        for entry in step_entries:
            try:
                name = str(entry["name"])
                phase = str(entry["phase"])
            except (KeyError, TypeError) as exc:
                raise TaxonomyError(f"malformed step entry {entry!r}") from exc
            steps.append(name)
            mapping[name] = phase
        if not initial:
            initial = frozenset(phases[:1])
        return cls(phases=phases, steps=tuple(steps), tools=tools,
                   step_to_phase=mapping, phase_initial=initial)


def load_taxonomy(path: str | Path) -> Taxonomy:
    """Load and validate a taxonomy from a YAML file."""
    path = Path(path)
    if not path.exists():
        raise TaxonomyError(f"taxonomy file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise TaxonomyError(f"cannot parse taxonomy file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise TaxonomyError(f"taxonomy file {path} is not a mapping")
    return Taxonomy.from_dict(data)


def save_taxonomy(tax: Taxonomy, path: str | Path) -> None:
    Path(path).write_text(
        yaml.safe_dump(tax.to_dict(), sort_keys=False, allow_unicode=True),
        encoding="utf-8",
    )


def default_taxonomy() -> Taxonomy:
    """The bundled cataract taxonomy (5 phases, 20 steps)."""
    ref = resources.files("surgseq.data").joinpath(DEFAULT_TAXONOMY_RESOURCE)
    data = yaml.safe_load(ref.read_text(encoding="utf-8"))
    return Taxonomy.from_dict(data)


@dataclass
class AnnotatedSurgery:
    """Per-frame ground truth for one surgery plus tool presence intervals.

    Labels are stored per frame; tool presence as inclusive frame intervals.
    """

    surgery_id: str
    fps: float
    frame_count: int
    step_of_frame: np.ndarray  # dtype str, shape (frame_count,)
    phase_of_frame: np.ndarray
    tool_intervals: list[tuple[str, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.step_of_frame = np.asarray(self.step_of_frame)
        self.phase_of_frame = np.asarray(self.phase_of_frame)
        if self.fps <= 0:
            raise TaxonomyError("fps must be positive")
        if len(self.step_of_frame) != self.frame_count:
            raise TaxonomyError("step_of_frame length does not match frame_count")
        if len(self.phase_of_frame) != self.frame_count:
            raise TaxonomyError("phase_of_frame length does not match frame_count")


def _runs(labels: np.ndarray) -> list[tuple[int, int, str]]:
    """Maximal runs of equal labels as (start, end_inclusive, label)."""
    runs = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            runs.append((start, i - 1, str(labels[start])))
            start = i
    return runs


def validate_annotation(ann: AnnotatedSurgery, tax: Taxonomy) -> list[str]:
    """Check an annotation against the taxonomy; returns violation messages.

    Violations are reported, never raised, so callers can batch-audit data.
    """
    report: list[str] = []
    known_steps = set(tax.steps)
    for frame in range(ann.frame_count):
        step = str(ann.step_of_frame[frame])
        phase = str(ann.phase_of_frame[frame])
        if step not in known_steps:
            report.append(f"frame {frame}: unknown step {step!r}")
            continue
        expected = tax.step_to_phase[step]
        if phase != expected:
            report.append(
                f"frame {frame}: step {step!r} labeled with phase {phase!r}, "
                f"taxonomy maps it to {expected!r}"
            )
    known_tools = set(tax.tools)
    for tool, start, end in ann.tool_intervals:
        if tool not in known_tools:
            report.append(f"tool interval: unknown tool {tool!r}")
        if start > end:
            report.append(f"tool {tool!r}: interval start {start} > end {end}")
        if start < 0 or end >= ann.frame_count:
            report.append(
                f"tool {tool!r}: interval [{start}, {end}] outside frames "
                f"[0, {ann.frame_count - 1}]"
            )
    for start, end, _label in _runs(ann.step_of_frame):
        if end - start + 1 < 2 and ann.frame_count > 1:
            report.append(f"frame {start}: single-frame step label flicker")
    return report


def save_annotation(ann: AnnotatedSurgery, frames_csv: str | Path,
                    tools_csv: str | Path) -> None:
    """Write the frame-label CSV and the sibling tool-interval CSV."""
    with open(frames_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "step", "phase"])
        for frame in range(ann.frame_count):
            writer.writerow([frame, ann.step_of_frame[frame], ann.phase_of_frame[frame]])
    with open(tools_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tool", "start_frame", "end_frame"])
        for tool, start, end in ann.tool_intervals:
            writer.writerow([tool, start, end])


def load_annotation(frames_csv: str | Path, tools_csv: str | Path,
                    surgery_id: str, fps: float) -> AnnotatedSurgery:
    steps: list[str] = []
    phases: list[str] = []
    with open(frames_csv, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for i, row in enumerate(reader):
            if int(row["frame"]) != i:
                raise TaxonomyError(f"{frames_csv}: frames not contiguous at row {i}")
            steps.append(row["step"])
            phases.append(row["phase"])
    intervals: list[tuple[str, int, int]] = []
    tools_csv = Path(tools_csv)
    if tools_csv.exists():
        with open(tools_csv, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                intervals.append(
                    (row["tool"], int(row["start_frame"]), int(row["end_frame"]))
                )
    return AnnotatedSurgery(
        surgery_id=surgery_id,
        fps=fps,
        frame_count=len(steps),
        step_of_frame=np.array(steps, dtype=object),
        phase_of_frame=np.array(phases, dtype=object),
        tool_intervals=intervals,
    )
