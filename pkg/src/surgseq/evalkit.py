"""Evaluation protocol: k-fold cross validation, ROC AUC, grid search,
throughput measurement.

AUC uses the rank (Mann-Whitney) formulation with ties contributing one
half; the threshold-sweep curve integrates to the same value. One ROC
curve is built per label and per fold by pooling that fold's test windows;
fold means combine by arithmetic mean.
"""
from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import rankdata

from .bayesnet import BnInferencer
from .errors import EvalError
from .recognizer import (ModelBundle, ObservationSource, PipelineConfig,
                         PipelineKind, StepPhasePosterior, init_pipeline)
from .synthgen import Dataset
from .training import SurgeryWindows, collect_surgery_windows, train_models
from .windowing import ObservationRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoldSplit:
    """surgery_id -> fold index, near-equal fold sizes."""

    assignment: dict[str, int]
    k: int

    def fold_ids(self, fold: int) -> list[str]:
        return sorted(sid for sid, f in self.assignment.items() if f == fold)

    def train_ids(self, fold: int) -> list[str]:
        return sorted(sid for sid, f in self.assignment.items() if f != fold)


def kfold_split(surgery_ids: list[str], k: int = 6, seed: int = 0) -> FoldSplit:
    """Deterministic shuffle then round-robin assignment into k folds."""
    ids = list(surgery_ids)
    if len(ids) < k:
        raise EvalError(f"need at least {k} surgeries for {k} folds, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    assignment = {ids[int(pos)]: i % k for i, pos in enumerate(order)}
    return FoldSplit(assignment=assignment, k=k)


@dataclass
class RocCurve:
    """Threshold-sweep ROC points plus the rank-statistic AUC."""

    label: str
    points: list[tuple[float, float]]
    auc: float


def roc_auc(scores, truths, label: str = "") -> RocCurve:
    """ROC curve and AUC for one label.

    AUC is the Mann-Whitney statistic (ties count one half); the curve comes
    from sweeping a threshold over the distinct scores.
    """
    scores = np.asarray(scores, dtype=float)
    truths = np.asarray(truths, dtype=bool)
    if scores.shape != truths.shape or scores.ndim != 1:
        raise EvalError("scores and truths must be 1-d arrays of equal length")
    n_pos = int(truths.sum())
    n_neg = len(truths) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError(f"single-class input for label {label!r}")
    ranks = rankdata(scores)
    auc = (float(ranks[truths].sum()) - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_truths = truths[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int(sorted_truths[i:j].sum())
        fp += (j - i) - int(sorted_truths[i:j].sum())
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return RocCurve(label=label, points=points, auc=auc)


def curve_auc(curve: RocCurve) -> float:
    """Trapezoidal area under the threshold-sweep curve."""
    area = 0.0
    for (x0, y0), (x1, y1) in zip(curve.points, curve.points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


@dataclass
class AzReport:
    """Per-label AUC maps plus level and overall means."""

    step_auc: dict[str, float]
    phase_auc: dict[str, float]
    skipped_steps: list[str] = field(default_factory=list)
    skipped_phases: list[str] = field(default_factory=list)
    az_steps: float = 0.0
    az_phases: float = 0.0
    az_mean: float = 0.0

    @classmethod
    def build(cls, step_auc: dict[str, float], phase_auc: dict[str, float],
              skipped_steps: list[str], skipped_phases: list[str]) -> "AzReport":
        if not step_auc or not phase_auc:
            raise EvalError("cannot build a report without any scoreable label")
        az_steps = float(np.mean(list(step_auc.values())))
        az_phases = float(np.mean(list(phase_auc.values())))
        return cls(step_auc=step_auc, phase_auc=phase_auc,
                   skipped_steps=sorted(skipped_steps),
                   skipped_phases=sorted(skipped_phases),
                   az_steps=az_steps, az_phases=az_phases,
                   az_mean=(az_steps + az_phases) / 2.0)

    def to_dict(self) -> dict:
        return {
            "az_steps": self.az_steps,
            "az_phases": self.az_phases,
            "az_mean": self.az_mean,
            "step_auc": dict(sorted(self.step_auc.items())),
            "phase_auc": dict(sorted(self.phase_auc.items())),
            "skipped_steps": self.skipped_steps,
            "skipped_phases": self.skipped_phases,
        }


def score_windows(taxonomy, posteriors: list[StepPhasePosterior],
                  truth_steps: list[str], truth_phases: list[str]) -> AzReport:
    """Pool windows and build one ROC per label; single-class labels skip."""
    if len(posteriors) != len(truth_steps):
        raise EvalError("posterior and truth streams differ in length")
    step_scores = np.stack([p.step_probs for p in posteriors])
    phase_scores = np.stack([p.phase_probs for p in posteriors])
    step_auc: dict[str, float] = {}
    phase_auc: dict[str, float] = {}
    skipped_steps: list[str] = []
    skipped_phases: list[str] = []
    truth_steps = np.asarray(truth_steps, dtype=object)
    truth_phases = np.asarray(truth_phases, dtype=object)
    for i, label in enumerate(taxonomy.steps):
        truths = truth_steps == label
        try:
            step_auc[label] = roc_auc(step_scores[:, i], truths, label).auc
        except EvalError:
            skipped_steps.append(label)
    for i, label in enumerate(taxonomy.phases):
        truths = truth_phases == label
        try:
            phase_auc[label] = roc_auc(phase_scores[:, i], truths, label).auc
        except EvalError:
            skipped_phases.append(label)
    return AzReport.build(step_auc, phase_auc, skipped_steps, skipped_phases)


@dataclass
class FoldModels:
    """Per-fold trained bundles with shared inferencers for marginal reuse."""

    split: FoldSplit
    bundles: dict[int, ModelBundle]
    inferencers: dict[tuple[int, str], BnInferencer]

    def inferencer_for(self, fold: int, kind: PipelineKind) -> BnInferencer:
        key = "feedback" if kind is PipelineKind.BN_HMM_FEEDBACK else "base"
        return self.inferencers[(fold, key)]


def train_folds(dataset: Dataset, split: FoldSplit,
                config: PipelineConfig) -> FoldModels:
    bundles = {}
    inferencers = {}
    for fold in range(split.k):
        bundle, _traces = train_models(dataset, split.train_ids(fold), config)
        bundles[fold] = bundle
        inferencers[(fold, "base")] = BnInferencer(
            bundle.bn, config.gibbs_samples, config.gibbs_burn_in, config.seed)
        inferencers[(fold, "feedback")] = BnInferencer(
            bundle.bn_feedback, config.gibbs_samples, config.gibbs_burn_in,
            config.seed)
    return FoldModels(split=split, bundles=bundles, inferencers=inferencers)


def run_pipeline_on_surgery(bundle: ModelBundle, kind: PipelineKind,
                            surgery: SurgeryWindows,
                            inferencer: BnInferencer | None = None
                            ) -> list[StepPhasePosterior]:
    pipeline = init_pipeline(kind, bundle, inferencer=inferencer)
    posteriors = []
    for t, window in enumerate(surgery.windows):
        obs = ObservationRecord(window=window, tools_present=surgery.tools[t],
                                feature=surgery.features[t])
        posteriors.append(pipeline.consume_window(obs))
    return posteriors


@dataclass
class EvaluationResult:
    kind: PipelineKind
    source: ObservationSource
    per_fold: list[AzReport]
    pooled: AzReport


def _pool_reports(reports: list[AzReport]) -> AzReport:
    """Arithmetic mean across folds, per label and per level."""
    step_auc: dict[str, list[float]] = {}
    phase_auc: dict[str, list[float]] = {}
    for report in reports:
        for label, auc in report.step_auc.items():
            step_auc.setdefault(label, []).append(auc)
        for label, auc in report.phase_auc.items():
            phase_auc.setdefault(label, []).append(auc)
    pooled = AzReport(
        step_auc={k: float(np.mean(v)) for k, v in sorted(step_auc.items())},
        phase_auc={k: float(np.mean(v)) for k, v in sorted(phase_auc.items())},
        skipped_steps=sorted({s for r in reports for s in r.skipped_steps}),
        skipped_phases=sorted({p for r in reports for p in r.skipped_phases}),
        az_steps=float(np.mean([r.az_steps for r in reports])),
        az_phases=float(np.mean([r.az_phases for r in reports])),
        az_mean=float(np.mean([r.az_mean for r in reports])),
    )
    return pooled


def evaluate_pipeline(dataset: Dataset, kind: PipelineKind | str,
                      config: PipelineConfig, split: FoldSplit,
                      fold_models: FoldModels | None = None) -> EvaluationResult:
    """Cross-validated AUC evaluation of one pipeline kind.

    Models for each fold are trained only on that fold's training surgeries;
    any overlap between a bundle's training ids and the fold's test ids is a
    hard error.
    """
    kind = PipelineKind(kind)
    if fold_models is None:
        fold_models = train_folds(dataset, split, config)
    per_fold = []
    for fold in range(split.k):
        bundle = fold_models.bundles[fold]
        test_ids = split.fold_ids(fold)
        leaked = set(bundle.train_ids) & set(test_ids)
        if leaked:
            raise EvalError(f"train/test leakage in fold {fold}: {sorted(leaked)}")
        posteriors: list[StepPhasePosterior] = []
        truth_steps: list[str] = []
        truth_phases: list[str] = []
        for sid in test_ids:
            surgery = collect_surgery_windows(dataset, sid, config)
            posteriors.extend(run_pipeline_on_surgery(
                bundle, kind, surgery,
                inferencer=fold_models.inferencer_for(fold, kind)))
            truth_steps.extend(surgery.truth_steps)
            truth_phases.extend(surgery.truth_phases)
        per_fold.append(score_windows(dataset.taxonomy, posteriors,
                                      truth_steps, truth_phases))
    return EvaluationResult(kind=kind, source=config.source, per_fold=per_fold,
                            pooled=_pool_reports(per_fold))


def evaluate_suite(dataset: Dataset, kinds: list[PipelineKind | str],
                   config: PipelineConfig, split: FoldSplit
                   ) -> dict[PipelineKind, EvaluationResult]:
    """Evaluate several pipeline kinds over shared per-fold models."""
    fold_models = train_folds(dataset, split, config)
    return {
        PipelineKind(kind): evaluate_pipeline(dataset, kind, config, split,
                                              fold_models=fold_models)
        for kind in kinds
    }


@dataclass
class GridSearchSpec:
    """Parameter grids; keys map onto PipelineConfig fields."""

    grids: dict[str, list]

    SUPPORTED = ("t_scale", "t_shift", "knn_k", "n_obs", "tick_steps",
                 "tick_phases", "delta_t")

    def __post_init__(self):
        if not self.grids:
            raise EvalError("empty grid search specification")
        for key, values in self.grids.items():
            if key not in self.SUPPORTED:
                raise EvalError(f"unsupported grid parameter {key!r}")
            if not values:
                raise EvalError(f"empty grid for parameter {key!r}")

    def configs(self, base: PipelineConfig):
        keys = list(self.grids.keys())
        for combo in itertools.product(*(self.grids[k] for k in keys)):
            cfg = base
            window = base.window
            for key, value in zip(keys, combo):
                if key == "t_scale":
                    window = replace(window, t_scale=float(value))
                elif key == "t_shift":
                    window = replace(window, t_shift=float(value))
                else:
                    cfg = replace(cfg, **{key: value})
            cfg = replace(cfg, window=window)
            yield dict(zip(keys, combo)), cfg


def grid_search(dataset: Dataset, training_ids: list[str],
                base_config: PipelineConfig, spec: GridSearchSpec,
                kind: PipelineKind = PipelineKind.BN_HMM
                ) -> tuple[PipelineConfig, list[tuple[dict, float]]]:
    """Exhaustive grid search with leave-one-surgery-out inner validation.

    Run on the tools configuration (the only source whose evidence can be
    re-windowed); the winning configuration is reused verbatim for motion
    runs. Ties keep the first configuration in grid order.
    """
    table: list[tuple[dict, float]] = []
    best_score = -np.inf
    best_config = None
    for params, cfg in spec.configs(base_config):
        scores = []
        for held in training_ids:
            inner_train = [sid for sid in training_ids if sid != held]
            bundle, _ = train_models(dataset, inner_train, cfg)
            surgery = collect_surgery_windows(dataset, held, cfg)
            posteriors = run_pipeline_on_surgery(bundle, kind, surgery)
            report = score_windows(dataset.taxonomy, posteriors,
                                   surgery.truth_steps, surgery.truth_phases)
            scores.append(report.az_mean)
        score = float(np.mean(scores))
        table.append((params, score))
        if score > best_score:
            best_score = score
            best_config = cfg
    return best_config, table


@dataclass
class ThroughputReport:
    frames_per_second: float
    windows_per_second: float
    stage_seconds: dict[str, float]


def measure_throughput(make_pipeline, stream: list[ObservationRecord],
                       min_windows: int = 100) -> ThroughputReport:
    """Single-threaded wall-clock throughput over an observation stream."""
    if len(stream) < min_windows:
        raise EvalError(f"need at least {min_windows} windows, got {len(stream)}")
    pipeline = make_pipeline()
    start = time.perf_counter()
    for obs in stream:
        pipeline.consume_window(obs)
    elapsed = time.perf_counter() - start
    frames = stream[-1].window.end_frame + 1
    elapsed = max(elapsed, 1e-9)
    return ThroughputReport(
        frames_per_second=frames / elapsed,
        windows_per_second=len(stream) / elapsed,
        stage_seconds={"consume": elapsed},
    )
