"""Seeded generative model of two-level surgeries.

A surgery is sampled as a phase path, per-phase step chains with window
durations, and per-step tool and feature emissions. The output is exactly
the package's on-disk dataset format (frame-label CSVs, tool-interval CSVs,
observation JSONL, manifest), so every pipeline can be trained and
evaluated at desk scale without real video.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import GeneratorError
from .taxonomy import (AnnotatedSurgery, Taxonomy, default_taxonomy,
                       save_annotation, load_annotation, save_taxonomy,
                       load_taxonomy, validate_annotation)
from .windowing import (ObservationRecord, WindowConfig, make_windows,
                        observation_to_dict, observation_from_dict,
                        tools_in_window, window_truth)

END = "END"
MANIFEST_NAME = "manifest.json"
MAX_RESAMPLE_ATTEMPTS = 200


@dataclass
class StepEmission:
    """Tool presence probabilities and the feature distribution of one step."""

    tools: dict[str, float]
    feature_mean: np.ndarray
    feature_noise: float = 0.0

    def __post_init__(self):
        self.feature_mean = np.asarray(self.feature_mean, dtype=float)
        if not np.all(np.isfinite(self.feature_mean)):
            raise GeneratorError("feature mean must be finite")
        for tool, p in self.tools.items():
            if not 0.0 <= p <= 1.0:
                raise GeneratorError(f"tool probability {p} for {tool!r} outside [0,1]")


@dataclass
class PhaseDynamics:
    """Within-phase step chain plus the phase duration range in windows."""

    duration: tuple[int, int]
    step_init: dict[str, float]
    step_chain: dict[str, dict[str, float]]

    def __post_init__(self):
        lo, hi = self.duration
        if lo < 1 or hi < lo:
            raise GeneratorError("phase duration range must satisfy 1 <= lo <= hi")
        _check_distribution(self.step_init, "step_init")
        for step, row in self.step_chain.items():
            _check_distribution(row, f"step_chain[{step}]")


def _check_distribution(row: dict[str, float], what: str) -> None:
    total = sum(row.values())
    if abs(total - 1.0) > 1e-9:
        raise GeneratorError(f"{what} must sum to 1 (got {total})")
    if any(p < 0 for p in row.values()):
        raise GeneratorError(f"{what} has negative probabilities")


@dataclass
class GenerativeSpec:
    """Everything needed to sample annotated surgeries deterministically."""

    name: str
    taxonomy: Taxonomy
    phase_initial: dict[str, float]
    phase_chain: dict[str, dict[str, float]]   # rows over phases plus END
    phases: dict[str, PhaseDynamics]
    emissions: dict[str, StepEmission]
    step_duration: dict[str, tuple[int, int]]
    window: WindowConfig = field(default_factory=WindowConfig)
    windows_range: tuple[int, int] = (40, 140)
    tool_false_positive: float = 0.0
    tool_false_negative: float = 0.0

    def __post_init__(self):
        _check_distribution(self.phase_initial, "phase_initial")
        for phase, row in self.phase_chain.items():
            _check_distribution(row, f"phase_chain[{phase}]")
        for phase in self.taxonomy.phases:
            if phase not in self.phases:
                raise GeneratorError(f"missing dynamics for phase {phase!r}")
        for step in self.taxonomy.steps:
            if step not in self.emissions:
                raise GeneratorError(f"missing emission for step {step!r}")
            lo, hi = self.step_duration.get(step, (0, 0))
            if lo < 1 or hi < lo:
                raise GeneratorError(f"step duration range invalid for {step!r}")
        lo, hi = self.windows_range
        if lo < 1 or hi < lo:
            raise GeneratorError("windows_range must satisfy 1 <= lo <= hi")

    @property
    def fps(self) -> float:
        return self.window.fps

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "name": self.name,
            "taxonomy": self.taxonomy.to_dict(),
            "phase_initial": self.phase_initial,
            "phase_chain": self.phase_chain,
            "phases": {
                p: {"duration": list(d.duration), "step_init": d.step_init,
                    "step_chain": d.step_chain}
                for p, d in self.phases.items()
            },
            "emissions": {
                s: {"tools": e.tools,
                    "feature_mean": [float(v) for v in e.feature_mean],
                    "feature_noise": e.feature_noise}
                for s, e in self.emissions.items()
            },
            "step_duration": {s: list(d) for s, d in self.step_duration.items()},
            "window": {"t_scale": self.window.t_scale,
                       "t_shift": self.window.t_shift, "fps": self.window.fps},
            "windows_range": list(self.windows_range),
            "tool_false_positive": self.tool_false_positive,
            "tool_false_negative": self.tool_false_negative,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GenerativeSpec":
        tax = Taxonomy.from_dict(data["taxonomy"])
        win = data.get("window", {})
        return cls(
            name=str(data.get("name", "custom")),
            taxonomy=tax,
            phase_initial={k: float(v) for k, v in data["phase_initial"].items()},
            phase_chain={k: {k2: float(v2) for k2, v2 in row.items()}
                         for k, row in data["phase_chain"].items()},
            phases={
                p: PhaseDynamics(duration=tuple(entry["duration"]),
                                 step_init={k: float(v) for k, v in entry["step_init"].items()},
                                 step_chain={k: {k2: float(v2) for k2, v2 in row.items()}
                                             for k, row in entry["step_chain"].items()})
                for p, entry in data["phases"].items()
            },
            emissions={
                s: StepEmission(tools={k: float(v) for k, v in entry["tools"].items()},
                                feature_mean=np.asarray(entry["feature_mean"], dtype=float),
                                feature_noise=float(entry.get("feature_noise", 0.0)))
                for s, entry in data["emissions"].items()
            },
            step_duration={s: tuple(d) for s, d in data["step_duration"].items()},
            window=WindowConfig(t_scale=float(win.get("t_scale", 2.0)),
                                t_shift=float(win.get("t_shift", 1.0)),
                                fps=float(win.get("fps", 25.0))),
            windows_range=tuple(data.get("windows_range", (40, 140))),
            tool_false_positive=float(data.get("tool_false_positive", 0.0)),
            tool_false_negative=float(data.get("tool_false_negative", 0.0)),
        )


def save_spec(spec: GenerativeSpec, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False),
                          encoding="utf-8")


def load_spec(path: str | Path) -> GenerativeSpec:
    path = Path(path)
    if not path.exists():
        raise GeneratorError(f"generator spec file not found: {path}")
    data = yaml.safe_load(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise GeneratorError(f"generator spec file {path} is not a mapping")
    return GenerativeSpec.from_dict(data)


def _draw(rng: np.random.Generator, row: dict[str, float]) -> str:
    keys = sorted(row)
    probs = np.array([row[k] for k in keys])
    return keys[int(rng.choice(len(keys), p=probs / probs.sum()))]


def _sample_window_labels(spec: GenerativeSpec,
                          rng: np.random.Generator) -> list[tuple[str, str]]:
    """One surgery as a (step, phase) label per window slot."""
    labels: list[tuple[str, str]] = []
    phase = _draw(rng, spec.phase_initial)
    while phase != END:
        dyn = spec.phases[phase]
        lo, hi = dyn.duration
        budget = int(rng.integers(lo, hi + 1))
        step = _draw(rng, dyn.step_init)
        while budget > 0:
            lo_s, hi_s = spec.step_duration[step]
            duration = min(int(rng.integers(lo_s, hi_s + 1)), budget)
            labels.extend([(step, phase)] * duration)
            budget -= duration
            if budget > 0:
                step = _draw(rng, dyn.step_chain[step])
        phase = _draw(rng, spec.phase_chain[phase])
    return labels


def generate_surgery(spec: GenerativeSpec, seed: int,
                     surgery_id: str = "synthetic"
                     ) -> tuple[AnnotatedSurgery, list[ObservationRecord]]:
    """Sample one annotated surgery plus its per-window observation records.

    Deterministic for a given (spec, seed). Resamples whole surgeries from
    the same stream until the window count falls inside windows_range.
    """
    rng = np.random.default_rng(seed)
    lo, hi = spec.windows_range
    labels = None
    for _ in range(MAX_RESAMPLE_ATTEMPTS):
        candidate = _sample_window_labels(spec, rng)
        if lo <= len(candidate) <= hi:
            labels = candidate
            break
    if labels is None:
        raise GeneratorError(
            f"could not sample a surgery within windows_range {spec.windows_range}"
        )

    cfg = spec.window
    shift = cfg.frames_shift
    n_slots = len(labels)
    frame_count = shift * (n_slots - 1) + cfg.frames_scale

    step_of_frame = np.empty(frame_count, dtype=object)
    phase_of_frame = np.empty(frame_count, dtype=object)
    slot_bounds = []
    for slot in range(n_slots):
        start = slot * shift
        end = (slot + 1) * shift - 1 if slot < n_slots - 1 else frame_count - 1
        slot_bounds.append((start, end))
        step_of_frame[start:end + 1] = labels[slot][0]
        phase_of_frame[start:end + 1] = labels[slot][1]

    # Tools sampled per slot (shift-sized stretch) so presence converts to
    # exact frame intervals; windows then see the union of their slots.
    all_tools = spec.taxonomy.tools
    slot_tools: list[set[str]] = []
    for slot in range(n_slots):
        emission = spec.emissions[labels[slot][0]]
        present = set()
        for tool in all_tools:
            p = emission.tools.get(tool)
            if p is not None:
                p = p * (1.0 - spec.tool_false_negative)
            else:
                p = spec.tool_false_positive
            if p > 0 and rng.random() < p:
                present.add(tool)
        slot_tools.append(present)

    intervals: list[tuple[str, int, int]] = []
    for tool in all_tools:
        run_start = None
        for slot in range(n_slots + 1):
            inside = slot < n_slots and tool in slot_tools[slot]
            if inside and run_start is None:
                run_start = slot
            elif not inside and run_start is not None:
                intervals.append((tool, slot_bounds[run_start][0],
                                  slot_bounds[slot - 1][1]))
                run_start = None

    ann = AnnotatedSurgery(surgery_id=surgery_id, fps=cfg.fps,
                           frame_count=frame_count,
                           step_of_frame=step_of_frame,
                           phase_of_frame=phase_of_frame,
                           tool_intervals=intervals)

    records: list[ObservationRecord] = []
    for w in make_windows(frame_count, cfg):
        truth_step, truth_phase = window_truth(ann, w)
        emission = spec.emissions[truth_step]
        feature = emission.feature_mean.copy()
        if emission.feature_noise > 0:
            feature = feature + rng.normal(0.0, emission.feature_noise,
                                           size=feature.shape)
        feature = np.maximum(feature, 0.0)
        for block in range(0, feature.shape[0], 8):
            total = feature[block:block + 8].sum()
            if total > 0:
                feature[block:block + 8] /= total
        records.append(ObservationRecord(
            window=w,
            tools_present=tools_in_window(ann, w),
            feature=feature,
            truth_step=truth_step,
            truth_phase=truth_phase,
        ))
    return ann, records


def generate_dataset(spec: GenerativeSpec, n: int, seed: int,
                     out_dir: str | Path) -> dict:
    """Write n surgeries plus a manifest; byte-identical for equal inputs."""
    if n < 1:
        raise GeneratorError("need n >= 1 surgeries")
    out_dir = Path(out_dir)
    surgeries_dir = out_dir / "surgeries"
    surgeries_dir.mkdir(parents=True, exist_ok=True)
    save_taxonomy(spec.taxonomy, out_dir / "taxonomy.yaml")

    surgery_seeds = [int(v) for v in np.random.SeedSequence(seed).generate_state(n)]
    entries = []
    for i in range(n):
        sid = f"s{i + 1:03d}"
        ann, records = generate_surgery(spec, surgery_seeds[i], surgery_id=sid)
        violations = validate_annotation(ann, spec.taxonomy)
        if violations:
            raise GeneratorError(
                f"generated surgery {sid} violates taxonomy: {violations[:3]}"
            )
        save_annotation(ann, surgeries_dir / f"{sid}.frames.csv",
                        surgeries_dir / f"{sid}.tools.csv")
        with open(surgeries_dir / f"{sid}.obs.jsonl", "w", encoding="utf-8") as fh:
            for rec in records:
                data = observation_to_dict(rec)
                data.pop("truth_step", None)
                data.pop("truth_phase", None)
                fh.write(json.dumps(data, sort_keys=True))
                fh.write("\n")
        entries.append({"id": sid, "seed": surgery_seeds[i],
                        "frames": ann.frame_count, "windows": len(records)})

    manifest = {
        "version": 1,
        "spec": spec.name,
        "seed": seed,
        "n": n,
        "fps": spec.window.fps,
        "window": {"t_scale": spec.window.t_scale, "t_shift": spec.window.t_shift,
                   "fps": spec.window.fps},
        "taxonomy_file": "taxonomy.yaml",
        "surgeries": entries,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return manifest


@dataclass
class Dataset:
    """Loaded view of a dataset directory."""

    root: Path
    manifest: dict
    taxonomy: Taxonomy
    window: WindowConfig

    @property
    def surgery_ids(self) -> list[str]:
        return [entry["id"] for entry in self.manifest["surgeries"]]

    def annotation(self, sid: str) -> AnnotatedSurgery:
        return load_annotation(self.root / "surgeries" / f"{sid}.frames.csv",
                               self.root / "surgeries" / f"{sid}.tools.csv",
                               surgery_id=sid, fps=self.manifest["fps"])

    def observations(self, sid: str) -> list[ObservationRecord]:
        path = self.root / "surgeries" / f"{sid}.obs.jsonl"
        records = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(observation_from_dict(json.loads(line)))
        return records


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise GeneratorError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    tax = load_taxonomy(root / manifest.get("taxonomy_file", "taxonomy.yaml"))
    win = manifest.get("window", {})
    window = WindowConfig(t_scale=float(win.get("t_scale", 2.0)),
                          t_shift=float(win.get("t_shift", 1.0)),
                          fps=float(win.get("fps", manifest.get("fps", 25.0))))
    return Dataset(root=root, manifest=manifest, taxonomy=tax, window=window)


def _peaked_block(peak: int, spread: float = 1.0) -> np.ndarray:
    bins = np.arange(8, dtype=float)
    block = np.exp(-0.5 * ((bins - peak) / spread) ** 2)
    return block / block.sum()


def _mh_mean(phase_index: int, step_pos: int, step_spread: float = 1.0) -> np.ndarray:
    """MH-layout mean: two blocks carry the phase, two carry the step.

    Wider step_spread blurs the step-carrying blocks so steps within a
    phase overlap while phases stay separable.
    """
    amp = _peaked_block(phase_index % 8)
    x_sp = _peaked_block((2 * phase_index + step_pos) % 8, step_spread)
    y_sp = _peaked_block((7 - phase_index) % 8)
    direction = _peaked_block((3 * step_pos + phase_index) % 8, step_spread)
    return np.concatenate([amp, x_sp, y_sp, direction])


def _forward_chain(steps: tuple[str, ...], forward: float = 1.0,
                   skip: float = 0.0, back: float = 0.0) -> dict[str, dict[str, float]]:
    """Step chain moving forward; the last step self-loops (no wrap-around)."""
    chain: dict[str, dict[str, float]] = {}
    n = len(steps)
    for i, step in enumerate(steps):
        row: dict[str, float] = {}
        nxt = steps[i + 1] if i + 1 < n else steps[i]
        skp = steps[i + 2] if i + 2 < n else steps[n - 1]
        prv = steps[i - 1] if i > 0 else steps[0]
        row[nxt] = row.get(nxt, 0.0) + forward
        if skip > 0:
            row[skp] = row.get(skp, 0.0) + skip
        if back > 0:
            row[prv] = row.get(prv, 0.0) + back
        total = sum(row.values())
        chain[step] = {k: v / total for k, v in row.items()}
    return chain


def _base_spec(name: str, tax: Taxonomy, *, step_duration: tuple[int, int],
               traversal: tuple[float, float], feature_noise: float,
               step_spread: float, skip: float, back: float, tool_fp: float,
               tool_fn: float, shared_tools: bool,
               windows_range: tuple[int, int]) -> GenerativeSpec:
    phases = {}
    emissions = {}
    durations = {}
    ambient_tool = tax.tools[2] if len(tax.tools) > 2 else None
    for pj, phase in enumerate(tax.phases):
        steps = tax.steps_of_phase(phase)
        first = steps[0]
        # phase budget scales with its step count so every step gets visited
        # on a (roughly) full traversal of the within-phase chain
        lo = max(1, round(len(steps) * step_duration[0] * traversal[0]))
        hi = max(lo, round(len(steps) * step_duration[1] * traversal[1]))
        phases[phase] = PhaseDynamics(
            duration=(lo, hi),
            step_init={first: 1.0},
            step_chain=_forward_chain(steps, skip=skip, back=back),
        )
        for pos, step in enumerate(steps):
            tool = tax.tools[tax.step_index(step)]
            tools = {tool: 1.0 if not shared_tools else 0.85}
            if shared_tools:
                if pos + 1 < len(steps):
                    # neighbouring step's tool occasionally shows up as well
                    tools[tax.tools[tax.step_index(steps[pos + 1])]] = 0.3
                if pj + 1 < tax.n_phases:
                    # same-position tool of the next phase bleeds across
                    nxt_steps = tax.steps_of_phase(tax.phases[pj + 1])
                    twin = nxt_steps[min(pos, len(nxt_steps) - 1)]
                    tools[tax.tools[tax.step_index(twin)]] = 0.3
                if ambient_tool is not None:
                    tools.setdefault(ambient_tool, 0.15)
            emissions[step] = StepEmission(
                tools=tools,
                feature_mean=_mh_mean(pj, pos, step_spread),
                feature_noise=feature_noise)
            durations[step] = step_duration

    phase_chain = {}
    for pj, phase in enumerate(tax.phases):
        target = tax.phases[pj + 1] if pj + 1 < tax.n_phases else END
        phase_chain[phase] = {target: 1.0}

    # branchy closure: either repeated wound hydration or a single suturing
    closure = "Closure"
    if closure in tax.phases and name == "noisy":
        steps = tax.steps_of_phase(closure)
        if "Wound Hydration" in steps and "Point Suturing" in steps:
            chain = phases[closure].step_chain
            chain["Stitching Up"] = {"Wound Hydration": 0.55, "Point Suturing": 0.45}
            chain["Wound Hydration"] = {"Wound Hydration": 0.5, "Speculum Removal": 0.5}
            chain["Point Suturing"] = {"Speculum Removal": 0.9, "Point Suturing": 0.1}

    initial = sorted(tax.phase_initial)[0]
    return GenerativeSpec(
        name=name,
        taxonomy=tax,
        phase_initial={initial: 1.0},
        phase_chain=phase_chain,
        phases=phases,
        emissions=emissions,
        step_duration=durations,
        windows_range=windows_range,
        tool_false_positive=tool_fp,
        tool_false_negative=tool_fn,
    )


def clean_spec(tax: Taxonomy | None = None) -> GenerativeSpec:
    """Near-deterministic world: tool<->step bijection, negligible noise."""
    tax = tax or default_taxonomy()
    return _base_spec("clean", tax, step_duration=(5, 8), traversal=(1.0, 1.0),
                      feature_noise=0.005, step_spread=1.0, skip=0.0, back=0.0,
                      tool_fp=0.0, tool_fn=0.0, shared_tools=False,
                      windows_range=(60, 260))


def noisy_spec(tax: Taxonomy | None = None) -> GenerativeSpec:
    """Variable world: branchy transitions, tool noise, overlapping features."""
    tax = tax or default_taxonomy()
    return _base_spec("noisy", tax, step_duration=(2, 7), traversal=(0.6, 1.2),
                      feature_noise=0.5, step_spread=1.6, skip=0.12, back=0.04,
                      tool_fp=0.03, tool_fn=0.2, shared_tools=True,
                      windows_range=(40, 240))


BUILTIN_SPECS = {"clean": clean_spec, "noisy": noisy_spec}


def resolve_spec(name_or_path: str) -> GenerativeSpec:
    """Builtin spec by name, or a YAML generative spec file by path."""
    builder = BUILTIN_SPECS.get(name_or_path)
    if builder is not None:
        return builder()
    return load_spec(name_or_path)
