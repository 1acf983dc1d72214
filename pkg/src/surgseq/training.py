"""Builds a full model bundle (BN, HMMs, HHMM, CRFs, KNN) from a dataset.

Training is strictly per-surgery-set: the bundle records the surgery ids it
was trained on so evaluation can enforce train/test separation.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .bayesnet import (BnInferencer, TrainingWindow, evidence_for,
                       feedback_evidence, learn_cpts, wire_knn_evidence,
                       wire_phase_feedback_evidence, wire_tool_evidence)
from .crf import TrainingTrace, build_potentials, train_lbfgs
from .errors import RecognizerError
from .features import KnnIndex, knn_step_probs
from .markov import Hmm, hhmm_learn, learn_transitions, viterbi_step
from .recognizer import (EMISSION_FLOOR, ModelBundle, ObservationSource,
                         PipelineConfig)
from .synthgen import Dataset
from .windowing import make_windows, tools_in_window, window_truth

logger = logging.getLogger(__name__)


@dataclass
class SurgeryWindows:
    """Windowed view of one surgery under a pipeline configuration."""

    surgery_id: str
    windows: list
    tools: list[frozenset[str]]
    features: list[np.ndarray | None]
    truth_steps: list[str]
    truth_phases: list[str]


def collect_surgery_windows(dataset: Dataset, sid: str,
                            config: PipelineConfig) -> SurgeryWindows:
    """Windows, evidence inputs and window truths for one surgery.

    When the configured windowing matches the dataset's, the stored
    observation records are used as-is; otherwise tools are re-windowed from
    the annotation intervals (only valid for the tools source, since stored
    motion features are bound to the dataset's windows).
    """
    ann = dataset.annotation(sid)
    same_cfg = (config.window.frames_scale == dataset.window.frames_scale
                and config.window.frames_shift == dataset.window.frames_shift)
    if same_cfg:
        records = dataset.observations(sid)
        windows = [rec.window for rec in records]
        tools = [rec.tools_present for rec in records]
        features = [rec.feature for rec in records]
    else:
        if config.source is ObservationSource.MOTION_KNN:
            raise RecognizerError(
                "re-windowing is only supported for the tools source; motion "
                "features are fixed at the dataset's window configuration"
            )
        windows = make_windows(ann.frame_count, config.window)
        tools = [tools_in_window(ann, w) for w in windows]
        features = [None] * len(windows)
    truths = [window_truth(ann, w) for w in windows]
    return SurgeryWindows(
        surgery_id=sid,
        windows=windows,
        tools=tools,
        features=features,
        truth_steps=[t[0] for t in truths],
        truth_phases=[t[1] for t in truths],
    )


def train_models(dataset: Dataset, surgery_ids: list[str],
                 config: PipelineConfig) -> tuple[ModelBundle, dict[str, TrainingTrace]]:
    """Learn every model family on the given surgeries.

    Returns the bundle plus the CRF training traces per level. The KNN step
    probabilities of training windows exclude the window's own index entry
    so binned evidence CPTs are not degenerate.
    """
    if not surgery_ids:
        raise RecognizerError("no training surgeries")
    tax = dataset.taxonomy
    ordered_ids = sorted(surgery_ids)
    per_surgery = [collect_surgery_windows(dataset, sid, config)
                   for sid in ordered_ids]

    knn_index = None
    step_prob_streams: list[list[np.ndarray] | None] = [None] * len(per_surgery)
    if config.source is ObservationSource.MOTION_KNN:
        points = []
        labels = []
        for sw in per_surgery:
            for feature, step in zip(sw.features, sw.truth_steps):
                if feature is None:
                    raise RecognizerError(
                        f"surgery {sw.surgery_id} lacks features for the motion source"
                    )
                points.append(feature)
                labels.append(step)
        if config.knn_k > len(points) - 1:
            raise RecognizerError("knn_k exceeds the number of training windows")
        knn_index = KnnIndex(points=np.stack(points), labels=tuple(labels),
                             k=config.knn_k)
        # training-time queries exclude the query's whole surgery so the
        # probabilities look like test-time retrievals, not self-matches
        row = 0
        for i, sw in enumerate(per_surgery):
            rows = slice(row, row + len(sw.features))
            stream = [knn_step_probs(knn_index, feature, tax.steps, exclude=rows)
                      for feature in sw.features]
            row += len(sw.features)
            step_prob_streams[i] = stream

    if config.source is ObservationSource.TOOLS:
        skeleton = wire_tool_evidence(tax)
    else:
        skeleton = wire_knn_evidence(tax, config.binning)

    def base_evidence(i: int, t: int) -> dict[str, bool]:
        if config.source is ObservationSource.TOOLS:
            return evidence_for(skeleton, tools_present=per_surgery[i].tools[t])
        return evidence_for(skeleton, step_probs=step_prob_streams[i][t])

    training_windows = []
    for i, sw in enumerate(per_surgery):
        for t in range(len(sw.truth_steps)):
            training_windows.append(TrainingWindow(
                truth_step=sw.truth_steps[t],
                truth_phase=sw.truth_phases[t],
                evidence=base_evidence(i, t),
            ))
    bn = learn_cpts(skeleton, training_windows, smoothing=config.smoothing)

    step_seqs = [sw.truth_steps for sw in per_surgery]
    phase_seqs = [sw.truth_phases for sw in per_surgery]
    trans_steps, pi_steps = learn_transitions(step_seqs, tax.steps,
                                              smoothing=config.smoothing)
    trans_phases, pi_phases = learn_transitions(phase_seqs, tax.phases,
                                                smoothing=config.smoothing)
    tick_s = config.tick_steps if config.tick_steps is not None else config.window.t_shift
    tick_p = config.tick_phases if config.tick_phases is not None else config.window.t_shift
    hmm_steps = Hmm(labels=tax.steps, pi=pi_steps, trans=trans_steps, tick=tick_s)
    hmm_phases = Hmm(labels=tax.phases, pi=pi_phases, trans=trans_phases, tick=tick_p)

    pair_seqs = [list(zip(sw.truth_steps, sw.truth_phases)) for sw in per_surgery]
    symbol_streams = None
    if config.source is ObservationSource.TOOLS:
        symbol_streams = [sw.tools for sw in per_surgery]
    hhmm = hhmm_learn(pair_seqs, tax, symbol_streams=symbol_streams,
                      smoothing=config.smoothing)

    # Marginal streams drive both CRF potentials and the feedback second
    # pass. Each surgery's stream comes from a network counted on the OTHER
    # training surgeries, so downstream weights are fit to marginals of
    # test-time sharpness rather than to in-sample ones.
    window_lists = []
    offset = 0
    for sw in per_surgery:
        window_lists.append((offset, offset + len(sw.truth_steps)))
        offset += len(sw.truth_steps)
    marginal_streams = []
    for i, sw in enumerate(per_surgery):
        if len(per_surgery) > 1:
            lo, hi = window_lists[i]
            held_out = training_windows[:lo] + training_windows[hi:]
            bn_i = learn_cpts(skeleton, held_out, smoothing=config.smoothing)
        else:
            bn_i = bn
        inferencer_i = BnInferencer(bn_i, config.gibbs_samples,
                                    config.gibbs_burn_in, config.seed)
        marginal_streams.append([inferencer_i.marginals(base_evidence(i, t))
                                 for t in range(len(sw.truth_steps))])

    crf_sequences_steps = []
    crf_sequences_phases = []
    step_index = {s: k for k, s in enumerate(tax.steps)}
    phase_index = {p: k for k, p in enumerate(tax.phases)}
    for sw, stream in zip(per_surgery, marginal_streams):
        pot_s = build_potentials([m.step_probs for m in stream], trans_steps,
                                 delta_t=config.delta_t)
        pot_p = build_potentials([m.phase_probs for m in stream], trans_phases,
                                 delta_t=config.delta_t)
        crf_sequences_steps.append((pot_s, [step_index[s] for s in sw.truth_steps]))
        crf_sequences_phases.append((pot_p, [phase_index[p] for p in sw.truth_phases]))
    crf_steps, trace_steps = train_lbfgs(crf_sequences_steps, l2=config.crf_l2,
                                         max_iter=config.crf_max_iter,
                                         tol=config.crf_tol)
    crf_phases, trace_phases = train_lbfgs(crf_sequences_phases, l2=config.crf_l2,
                                           max_iter=config.crf_max_iter,
                                           tol=config.crf_tol)

    # Feedback network: second pass feeds each window the phase posterior the
    # base BN+HMM produced for the previous window, then recounts the CPTs.
    fb_skeleton = skeleton.merge(wire_phase_feedback_evidence(tax, config.binning))
    fb_windows = []
    for i, (sw, stream) in enumerate(zip(per_surgery, marginal_streams)):
        decoder_state = None
        prev_scores = None
        for t in range(len(sw.truth_steps)):
            evidence = base_evidence(i, t)
            if prev_scores is not None:
                evidence.update(feedback_evidence(fb_skeleton, prev_scores))
            fb_windows.append(TrainingWindow(
                truth_step=sw.truth_steps[t],
                truth_phase=sw.truth_phases[t],
                evidence=evidence,
            ))
            emission = np.maximum(stream[t].phase_probs, EMISSION_FLOOR)
            decoder_state, _, prev_scores = viterbi_step(hmm_phases, decoder_state,
                                                         emission)
    bn_feedback = learn_cpts(fb_skeleton, fb_windows, smoothing=config.smoothing)
    bn_feedback.fb_ratio_cap = config.fb_ratio_cap

    bundle = ModelBundle(
        taxonomy=tax,
        config=config,
        train_ids=tuple(ordered_ids),
        bn=bn,
        bn_feedback=bn_feedback,
        hmm_steps=hmm_steps,
        hmm_phases=hmm_phases,
        hhmm=hhmm,
        crf_steps=crf_steps,
        crf_phases=crf_phases,
        knn=knn_index,
    )
    return bundle, {"steps": trace_steps, "phases": trace_phases}
