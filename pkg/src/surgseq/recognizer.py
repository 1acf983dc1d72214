"""End-to-end online pipelines.

Four pipeline kinds consume one observation record at a time and emit a
step/phase posterior per window: BN+HMMs, BN+HMMs with phase feedback,
BN+CRFs, and the HHMM. All are strictly causal; replaying a truncated
stream reproduces the prefix bit for bit because per-window Gibbs chains
are seeded from the evidence itself.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from .bayesnet import (BnInferencer, BnModel, EvidenceBinning, evidence_for,
                       feedback_evidence)
from .crf import CrfDecoderState, CrfModel, PROB_FLOOR, online_forward_step
from .errors import RecognizerError
from .features import KnnIndex, knn_step_probs
from .markov import (DecoderState, Hhmm, HhmmDecoderState, Hmm,
                     hhmm_viterbi_step, symbol_from_tools, viterbi_step)
from .taxonomy import Taxonomy
from .windowing import ObservationRecord, WindowConfig

logger = logging.getLogger(__name__)

EMISSION_FLOOR = 1e-12


class PipelineKind(str, Enum):
    BN_HMM = "bn_hmm"
    BN_HMM_FEEDBACK = "bn_hmm_feedback"
    BN_CRF = "bn_crf"
    HHMM = "hhmm"


class ObservationSource(str, Enum):
    TOOLS = "tools"
    MOTION_KNN = "motion"


@dataclass
class PipelineConfig:
    """Hyperparameters shared by training and online inference."""

    source: ObservationSource = ObservationSource.TOOLS
    window: WindowConfig = field(default_factory=WindowConfig)
    n_obs: int = 5
    knn_k: int = 7
    gibbs_samples: int = 600
    gibbs_burn_in: int = 150
    crf_l2: float = 1e-2
    crf_max_iter: int = 200
    crf_tol: float = 1e-5
    delta_t: int = 0
    tick_steps: float | None = None   # seconds; None means the window shift
    tick_phases: float | None = None
    fb_ratio_cap: float = 3.0
    smoothing: bool = False
    seed: int = 0

    @property
    def binning(self) -> EvidenceBinning:
        return EvidenceBinning(self.n_obs)

    def tick_windows(self, tick: float | None) -> int:
        if tick is None:
            return 1
        k = int(round(tick / self.window.t_shift))
        if k < 1:
            raise RecognizerError("HMM tick must be at least one window shift")
        return k

    def to_dict(self) -> dict:
        data = asdict(self)
        data["source"] = self.source.value
        data["window"] = {"t_scale": self.window.t_scale,
                          "t_shift": self.window.t_shift, "fps": self.window.fps}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        win = data.get("window", {})
        kwargs = dict(data)
        kwargs["source"] = ObservationSource(data.get("source", "tools"))
        kwargs["window"] = WindowConfig(t_scale=float(win.get("t_scale", 2.0)),
                                        t_shift=float(win.get("t_shift", 1.0)),
                                        fps=float(win.get("fps", 25.0)))
        return cls(**kwargs)


@dataclass
class StepPhasePosterior:
    """Per-window distributions over steps and phases with their argmaxes."""

    window_index: int
    step_probs: np.ndarray
    phase_probs: np.ndarray
    step_argmax: str
    phase_argmax: str
    flags: tuple[str, ...] = ()

    def to_dict(self, latency_ms: float | None = None) -> dict:
        out = {
            "window_index": self.window_index,
            "step_argmax": self.step_argmax,
            "phase_argmax": self.phase_argmax,
            "step_probs": [float(v) for v in self.step_probs],
            "phase_probs": [float(v) for v in self.phase_probs],
        }
        if self.flags:
            out["flags"] = list(self.flags)
        if latency_ms is not None:
            out["latency_ms"] = latency_ms
        return out


@dataclass
class ModelBundle:
    """Every trained model for one training run, plus its provenance."""

    taxonomy: Taxonomy
    config: PipelineConfig
    train_ids: tuple[str, ...]
    bn: BnModel
    bn_feedback: BnModel | None
    hmm_steps: Hmm
    hmm_phases: Hmm
    hhmm: Hhmm
    crf_steps: CrfModel
    crf_phases: CrfModel
    knn: KnnIndex | None = None

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        def dump(name: str, data) -> None:
            (out / name).write_text(json.dumps(data, sort_keys=True, indent=2) + "\n",
                                    encoding="utf-8")

        dump("meta.json", {"version": 1, "config": self.config.to_dict(),
                           "train_ids": list(self.train_ids),
                           "taxonomy": self.taxonomy.to_dict()})
        dump("bn.json", self.bn.to_dict())
        if self.bn_feedback is not None:
            dump("bn_feedback.json", self.bn_feedback.to_dict())
        dump("hmm_steps.json", self.hmm_steps.to_dict())
        dump("hmm_phases.json", self.hmm_phases.to_dict())
        dump("hhmm.json", self.hhmm.to_dict())
        dump("crf_steps.json", self.crf_steps.to_dict())
        dump("crf_phases.json", self.crf_phases.to_dict())
        if self.knn is not None:
            dump("knn.json", self.knn.to_dict())

    @classmethod
    def load(cls, in_dir: str | Path) -> "ModelBundle":
        root = Path(in_dir)
        meta_path = root / "meta.json"
        if not meta_path.exists():
            raise RecognizerError(f"no model bundle at {root}")

        def read(name: str):
            return json.loads((root / name).read_text(encoding="utf-8"))

        meta = read("meta.json")
        fb_path = root / "bn_feedback.json"
        knn_path = root / "knn.json"
        return cls(
            taxonomy=Taxonomy.from_dict(meta["taxonomy"]),
            config=PipelineConfig.from_dict(meta["config"]),
            train_ids=tuple(meta["train_ids"]),
            bn=BnModel.from_dict(read("bn.json")),
            bn_feedback=BnModel.from_dict(read("bn_feedback.json")) if fb_path.exists() else None,
            hmm_steps=Hmm.from_dict(read("hmm_steps.json")),
            hmm_phases=Hmm.from_dict(read("hmm_phases.json")),
            hhmm=Hhmm.from_dict(read("hhmm.json")),
            crf_steps=CrfModel.from_dict(read("crf_steps.json")),
            crf_phases=CrfModel.from_dict(read("crf_phases.json")),
            knn=KnnIndex.from_dict(read("knn.json")) if knn_path.exists() else None,
        )


def _floored_log(vec: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(vec, PROB_FLOOR))


class _PipelineBase:
    """Shared plumbing: ordering checks, evidence assembly, KNN lookup."""

    kind: PipelineKind

    def __init__(self, bundle: ModelBundle):
        self.bundle = bundle
        self.taxonomy = bundle.taxonomy
        self.config = bundle.config
        self._next_index = 1

    def _check_order(self, obs: ObservationRecord) -> None:
        if obs.window.index != self._next_index:
            raise RecognizerError(
                f"out-of-order window index {obs.window.index}, "
                f"expected {self._next_index}"
            )
        self._next_index += 1

    def _step_probs_of(self, obs: ObservationRecord) -> np.ndarray:
        if obs.step_probs is not None:
            return np.asarray(obs.step_probs, dtype=float)
        if obs.feature is None:
            raise RecognizerError(
                "motion source needs step_probs or a feature vector per window"
            )
        if self.bundle.knn is None:
            raise RecognizerError("model bundle has no KNN index for motion features")
        return knn_step_probs(self.bundle.knn, obs.feature, self.taxonomy.steps)

    def _posterior(self, index: int, step_scores: np.ndarray,
                   phase_scores: np.ndarray,
                   flags: tuple[str, ...] = ()) -> StepPhasePosterior:
        si = int(np.argmax(step_scores))
        pi = int(np.argmax(phase_scores))
        return StepPhasePosterior(
            window_index=index,
            step_probs=np.asarray(step_scores, dtype=float),
            phase_probs=np.asarray(phase_scores, dtype=float),
            step_argmax=self.taxonomy.steps[si],
            phase_argmax=self.taxonomy.phases[pi],
            flags=flags,
        )


class _TickedHmm:
    """Per-level HMM decoder advancing every tick_windows windows."""

    def __init__(self, hmm: Hmm, tick_windows: int):
        self.tick_windows = tick_windows
        if tick_windows == 1:
            self.hmm = hmm
        else:
            powered = np.linalg.matrix_power(hmm.trans.a, tick_windows)
            self.hmm = Hmm(labels=hmm.labels, pi=hmm.pi,
                           trans=type(hmm.trans)(labels=hmm.labels, a=powered),
                           tick=hmm.tick)
        self.state: DecoderState | None = None
        self.last_scores: np.ndarray | None = None

    def advances_at(self, window_index: int) -> bool:
        return (window_index - 1) % self.tick_windows == 0

    def step(self, window_index: int, emission: np.ndarray) -> tuple[np.ndarray, bool]:
        if self.advances_at(window_index) or self.last_scores is None:
            self.state, _, scores = viterbi_step(self.hmm, self.state, emission)
            self.last_scores = scores
            return scores, False
        return self.last_scores, True


class BnHmmPipeline(_PipelineBase):
    """Bayesian-network marginals fed into one Viterbi decoder per level."""

    kind = PipelineKind.BN_HMM
    feedback = False

    def __init__(self, bundle: ModelBundle,
                 inferencer: BnInferencer | None = None):
        super().__init__(bundle)
        model = bundle.bn_feedback if self.feedback else bundle.bn
        if self.feedback and model is None:
            raise RecognizerError("bundle has no feedback network")
        if inferencer is not None and inferencer.model is not model:
            raise RecognizerError("shared inferencer wraps a different network")
        self.inferencer = inferencer or BnInferencer(
            model, bundle.config.gibbs_samples, bundle.config.gibbs_burn_in,
            bundle.config.seed)
        self.steps_decoder = _TickedHmm(bundle.hmm_steps,
                                        bundle.config.tick_windows(bundle.config.tick_steps))
        self.phases_decoder = _TickedHmm(bundle.hmm_phases,
                                         bundle.config.tick_windows(bundle.config.tick_phases))
        self._prev_phase_scores: np.ndarray | None = None

    def consume_window(self, obs: ObservationRecord) -> StepPhasePosterior:
        self._check_order(obs)
        index = obs.window.index
        flags: list[str] = []
        advancing = (self.steps_decoder.advances_at(index)
                     or self.phases_decoder.advances_at(index)
                     or self.steps_decoder.last_scores is None)
        if advancing:
            if self.config.source is ObservationSource.TOOLS:
                evidence = evidence_for(self.inferencer.model,
                                        tools_present=obs.tools_present)
            else:
                evidence = evidence_for(self.inferencer.model,
                                        step_probs=self._step_probs_of(obs))
            if self.feedback:
                if self._prev_phase_scores is None:
                    flags.append("feedback_cold_start")
                else:
                    evidence.update(feedback_evidence(self.inferencer.model,
                                                      self._prev_phase_scores))
            marginals = self.inferencer.marginals(evidence)
            step_em = np.maximum(marginals.step_probs, EMISSION_FLOOR)
            phase_em = np.maximum(marginals.phase_probs, EMISSION_FLOOR)
            step_scores, held_s = self.steps_decoder.step(index, step_em)
            phase_scores, held_p = self.phases_decoder.step(index, phase_em)
            if held_s and held_p:
                flags.append("held")
        else:
            step_scores = self.steps_decoder.last_scores
            phase_scores = self.phases_decoder.last_scores
            flags.append("held")
        self._prev_phase_scores = phase_scores
        return self._posterior(index, step_scores, phase_scores, tuple(flags))


class BnHmmFeedbackPipeline(BnHmmPipeline):
    """BN+HMMs with the previous window's phase posterior as extra evidence."""

    kind = PipelineKind.BN_HMM_FEEDBACK
    feedback = True


class BnCrfPipeline(_PipelineBase):
    """Bayesian-network marginals fed into one causal CRF per level."""

    kind = PipelineKind.BN_CRF

    def __init__(self, bundle: ModelBundle,
                 inferencer: BnInferencer | None = None):
        super().__init__(bundle)
        self.inferencer = inferencer or BnInferencer(
            bundle.bn, bundle.config.gibbs_samples, bundle.config.gibbs_burn_in,
            bundle.config.seed)
        self._pair_steps = _floored_log(bundle.hmm_steps.trans.a)
        self._pair_phases = _floored_log(bundle.hmm_phases.trans.a)
        self._hist_steps: list[np.ndarray] = []
        self._hist_phases: list[np.ndarray] = []
        self._state_steps: CrfDecoderState | None = None
        self._state_phases: CrfDecoderState | None = None

    def consume_window(self, obs: ObservationRecord) -> StepPhasePosterior:
        self._check_order(obs)
        index = obs.window.index
        flags: list[str] = []
        if self.config.source is ObservationSource.TOOLS:
            evidence = evidence_for(self.inferencer.model,
                                    tools_present=obs.tools_present)
        else:
            evidence = evidence_for(self.inferencer.model,
                                    step_probs=self._step_probs_of(obs))
        marginals = self.inferencer.marginals(evidence)
        self._hist_steps.append(_floored_log(marginals.step_probs))
        self._hist_phases.append(_floored_log(marginals.phase_probs))
        src = index - 1 - self.config.delta_t
        if src < 0:
            src = 0
            if self.config.delta_t > 0:
                flags.append("delta_t_clamped")
        self._state_steps, _, step_scores = online_forward_step(
            self.bundle.crf_steps, self._state_steps, self._hist_steps[src],
            self._pair_steps)
        self._state_phases, _, phase_scores = online_forward_step(
            self.bundle.crf_phases, self._state_phases, self._hist_phases[src],
            self._pair_phases)
        # only the delta_t most recent log-marginals can still be referenced
        keep = self.config.delta_t + 1
        if len(self._hist_steps) > keep:
            pad = len(self._hist_steps) - keep
            self._hist_steps = [None] * pad + self._hist_steps[pad:]
            self._hist_phases = [None] * pad + self._hist_phases[pad:]
        return self._posterior(index, step_scores, phase_scores, tuple(flags))


class HhmmPipeline(_PipelineBase):
    """Generalized-Viterbi decoding of the two-level hierarchical model."""

    kind = PipelineKind.HHMM

    def __init__(self, bundle: ModelBundle,
                 inferencer: BnInferencer | None = None):
        super().__init__(bundle)
        self.state: HhmmDecoderState | None = None

    def consume_window(self, obs: ObservationRecord) -> StepPhasePosterior:
        self._check_order(obs)
        flags: list[str] = []
        hhmm = self.bundle.hhmm
        if self.config.source is ObservationSource.TOOLS:
            symbol = symbol_from_tools(obs.tools_present, hhmm.pair_freq)
            if hhmm.symbol_index(symbol) is None:
                flags.append("unknown_symbol")
            self.state, _step, _phase, step_scores, phase_scores = hhmm_viterbi_step(
                hhmm, self.state, symbol=symbol, emission_floor=EMISSION_FLOOR)
        else:
            emission = self._step_probs_of(obs)
            self.state, _step, _phase, step_scores, phase_scores = hhmm_viterbi_step(
                hhmm, self.state, emission=emission, emission_floor=EMISSION_FLOOR)
        return self._posterior(obs.window.index, step_scores, phase_scores,
                               tuple(flags))


_PIPELINES = {
    PipelineKind.BN_HMM: BnHmmPipeline,
    PipelineKind.BN_HMM_FEEDBACK: BnHmmFeedbackPipeline,
    PipelineKind.BN_CRF: BnCrfPipeline,
    PipelineKind.HHMM: HhmmPipeline,
}


def init_pipeline(kind: PipelineKind | str, bundle: ModelBundle,
                  inferencer: BnInferencer | None = None):
    """Fresh causal pipeline handle for one observation stream.

    Label sets of every model in the bundle must match its taxonomy. An
    optional shared inferencer lets several pipelines over the same learned
    network reuse cached marginals.
    """
    kind = PipelineKind(kind)
    tax = bundle.taxonomy
    if bundle.crf_steps.labels != tax.steps or bundle.hmm_steps.labels != tax.steps:
        raise RecognizerError("step model labels do not match the taxonomy")
    if bundle.crf_phases.labels != tax.phases or bundle.hmm_phases.labels != tax.phases:
        raise RecognizerError("phase model labels do not match the taxonomy")
    if kind is PipelineKind.HHMM:
        return HhmmPipeline(bundle)
    return _PIPELINES[kind](bundle, inferencer=inferencer)


@dataclass
class FrameLabeling:
    """Per-frame (step, phase) assignment over the covered frames."""

    step_of_frame: np.ndarray
    phase_of_frame: np.ndarray

    @property
    def frame_count(self) -> int:
        return len(self.step_of_frame)


def labels_to_frames(posteriors: list[StepPhasePosterior],
                     cfg: WindowConfig) -> FrameLabeling:
    """Spread per-window argmaxes over frames.

    Each window's argmax pair labels the shift-sized interval starting at
    the window's start frame; the final window also labels its remaining
    frames.
    """
    if not posteriors:
        raise RecognizerError("no posteriors to map to frames")
    shift = cfg.frames_shift
    scale = cfg.frames_scale
    for pos, posterior in enumerate(posteriors, start=1):
        if posterior.window_index != pos:
            raise RecognizerError(
                f"gap in window indices at {posterior.window_index} (expected {pos})"
            )
    n = len(posteriors)
    frame_count = shift * (n - 1) + scale
    steps = np.empty(frame_count, dtype=object)
    phases = np.empty(frame_count, dtype=object)
    for posterior in posteriors:
        start = (posterior.window_index - 1) * shift
        end = start + shift if posterior.window_index < n else frame_count
        steps[start:end] = posterior.step_argmax
        phases[start:end] = posterior.phase_argmax
    return FrameLabeling(step_of_frame=steps, phase_of_frame=phases)
