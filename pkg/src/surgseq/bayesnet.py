"""Bayesian network over step, phase and observation nodes.

Every step and phase label is a boolean node; observation nodes (tool
presence, binned KNN probabilities, binned phase feedback) are boolean
leaves attached to the labels they carry evidence about. Structure and
conditional probability tables are learned by frequency counting; per
window marginals P(label | evidence) come from a seeded Gibbs sampler,
with exact enumeration available as a test oracle on small networks.

Edges run phase -> step -> observation, so observing the evidence leaves
propagates to both description levels. Label marginals are renormalized
per level to yield distributions (boolean label nodes are not structurally
mutually exclusive).
"""
from __future__ import annotations

import hashlib
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import BayesNetError
from .taxonomy import Taxonomy

logger = logging.getLogger(__name__)

DEFAULT_N_SAMPLES = 20_000
DEFAULT_BURN_IN = 2_000

# Evidence CPT rows are clamped away from exact 0/1 so Gibbs full
# conditionals stay defined in states only reachable through chain
# initialization; label CPTs keep their exact zeros.
EVIDENCE_EPS = 1e-6


@dataclass(frozen=True)
class EvidenceBinning:
    """Equal-width partition of [0, 1] into n_obs probability ranges."""

    n_obs: int = 5

    def __post_init__(self):
        if self.n_obs < 2:
            raise BayesNetError("n_obs must be >= 2")

    def bin_of(self, p: float) -> int:
        """Bin index of a probability; the last bin is right-closed."""
        if not 0.0 <= p <= 1.0 + 1e-9:
            raise BayesNetError(f"probability {p} outside [0, 1]")
        return min(int(p * self.n_obs), self.n_obs - 1)

    @property
    def edges(self) -> tuple[float, ...]:
        return tuple(i / self.n_obs for i in range(self.n_obs + 1))


@dataclass(frozen=True)
class EvidenceSpec:
    """Describes one observation node and how its value derives from a window."""

    name: str
    kind: str  # "tool" | "step_bin" | "phase_bin"
    tool: str | None = None
    label: str | None = None
    bin_index: int | None = None


def phase_node(phase: str) -> str:
    return f"phase:{phase}"


def step_node(step: str) -> str:
    return f"step:{step}"


@dataclass
class BnSkeleton:
    """Node universe before learning: labels plus wired observation nodes."""

    taxonomy: Taxonomy
    evidence: tuple[EvidenceSpec, ...]
    binning: EvidenceBinning | None = None

    def merge(self, other: "BnSkeleton") -> "BnSkeleton":
        if other.taxonomy is not self.taxonomy and other.taxonomy != self.taxonomy:
            raise BayesNetError("cannot merge skeletons over different taxonomies")
        names = {spec.name for spec in self.evidence}
        for spec in other.evidence:
            if spec.name in names:
                raise BayesNetError(f"duplicate observation node {spec.name!r}")
        binning = self.binning or other.binning
        return BnSkeleton(taxonomy=self.taxonomy,
                          evidence=self.evidence + other.evidence,
                          binning=binning)

    @property
    def n_observation_nodes(self) -> int:
        return len(self.evidence)


def wire_tool_evidence(tax: Taxonomy) -> BnSkeleton:
    """One boolean observation node per tool; true iff the tool is present."""
    if len(tax.tools) == 0:
        raise BayesNetError("no evidence source: taxonomy has no tools")
    specs = tuple(
        EvidenceSpec(name=f"tool:{tool}", kind="tool", tool=tool) for tool in tax.tools
    )
    return BnSkeleton(taxonomy=tax, evidence=specs)


def wire_knn_evidence(tax: Taxonomy, binning: EvidenceBinning) -> BnSkeleton:
    """n_obs boolean nodes per step: "P(step) falls in probability range b"."""
    specs = tuple(
        EvidenceSpec(name=f"knn:{step}:{b}", kind="step_bin", label=step, bin_index=b)
        for step in tax.steps
        for b in range(binning.n_obs)
    )
    return BnSkeleton(taxonomy=tax, evidence=specs, binning=binning)


def wire_phase_feedback_evidence(tax: Taxonomy, binning: EvidenceBinning) -> BnSkeleton:
    """n_obs boolean nodes per phase for the fed-back phase posterior."""
    specs = tuple(
        EvidenceSpec(name=f"fb:{phase}:{b}", kind="phase_bin", label=phase, bin_index=b)
        for phase in tax.phases
        for b in range(binning.n_obs)
    )
    return BnSkeleton(taxonomy=tax, evidence=specs, binning=binning)


def evidence_for(skeleton_or_model, tools_present=None, step_probs=None,
                 feedback_phase_probs=None) -> dict[str, bool]:
    """Boolean evidence assignment for one window.

    Tool nodes observe presence/absence; binned nodes observe exactly one
    true bin per label. Inputs left as None leave the corresponding node
    group unobserved (used for the feedback cold start).
    """
    tax = skeleton_or_model.taxonomy
    binning = skeleton_or_model.binning
    evidence: dict[str, bool] = {}
    kinds = {spec.kind for spec in skeleton_or_model.evidence}
    if "tool" in kinds:
        if tools_present is None:
            raise BayesNetError("network wired for tool evidence but no tools given")
        present = set(tools_present)
        for tool in tax.tools:
            evidence[f"tool:{tool}"] = tool in present
    if "step_bin" in kinds:
        if step_probs is None:
            raise BayesNetError("network wired for KNN evidence but no step_probs given")
        probs = np.asarray(step_probs, dtype=float)
        if probs.shape[0] != tax.n_steps:
            raise BayesNetError("step_probs length does not match taxonomy")
        for i, step in enumerate(tax.steps):
            hit = binning.bin_of(float(probs[i]))
            for b in range(binning.n_obs):
                evidence[f"knn:{step}:{b}"] = b == hit
    if "phase_bin" in kinds and feedback_phase_probs is not None:
        evidence.update(feedback_evidence(skeleton_or_model, feedback_phase_probs))
    return evidence


def feedback_evidence(skeleton_or_model, phase_probs) -> dict[str, bool]:
    """Evidence for the fed-back phase posterior bins alone."""
    tax = skeleton_or_model.taxonomy
    binning = skeleton_or_model.binning
    if binning is None:
        raise BayesNetError("network has no binning for feedback evidence")
    probs = np.asarray(phase_probs, dtype=float)
    if probs.shape[0] != tax.n_phases:
        raise BayesNetError("feedback phase probs length does not match taxonomy")
    evidence: dict[str, bool] = {}
    for j, phase in enumerate(tax.phases):
        hit = binning.bin_of(float(probs[j]))
        for b in range(binning.n_obs):
            evidence[f"fb:{phase}:{b}"] = b == hit
    return evidence


@dataclass
class Cpt:
    """Bernoulli conditional table indexed by the parent configuration bitmask."""

    parents: tuple[str, ...]
    table: dict[int, float]
    fallback: float

    def __post_init__(self):
        for mask, p in self.table.items():
            if not np.isfinite(p) or not 0.0 <= p <= 1.0:
                raise BayesNetError(f"CPT row {mask} has invalid probability {p}")
        if not np.isfinite(self.fallback) or not 0.0 <= self.fallback <= 1.0:
            raise BayesNetError("CPT fallback probability invalid")

    def prob(self, mask: int) -> float:
        return self.table.get(mask, self.fallback)


@dataclass
class PosteriorMarginals:
    """Per-level distributions over steps and phases."""

    step_probs: np.ndarray
    phase_probs: np.ndarray

    def __post_init__(self):
        self.step_probs = np.asarray(self.step_probs, dtype=float)
        self.phase_probs = np.asarray(self.phase_probs, dtype=float)
        for vec in (self.step_probs, self.phase_probs):
            if abs(float(vec.sum()) - 1.0) > 1e-6:
                raise BayesNetError("posterior marginals must sum to 1 per level")


@dataclass
class TrainingWindow:
    """Truth labels plus the boolean evidence observed for one window."""

    truth_step: str
    truth_phase: str
    evidence: dict[str, bool]


@dataclass
class BnModel:
    """Learned structure + CPTs, ready for inference and serialization.

    fb_ratio_cap bounds the combined likelihood ratio the fed-back phase
    bins may exert on a phase node. The bins of one label are deterministic
    functions of a single scalar, so their likelihoods overcount one
    observation; left unbounded, the feedback loop can lock onto a stale
    phase that fresh tool evidence cannot override.
    """

    taxonomy: Taxonomy
    evidence: tuple[EvidenceSpec, ...]
    binning: EvidenceBinning | None
    cpts: dict[str, Cpt]
    smoothing: bool = False
    fb_ratio_cap: float | None = None
    version: int = 1
    _compiled: "_CompiledNet | None" = field(default=None, repr=False, compare=False)

    @property
    def node_names(self) -> list[str]:
        return ([phase_node(p) for p in self.taxonomy.phases]
                + [step_node(s) for s in self.taxonomy.steps]
                + [spec.name for spec in self.evidence])

    def parents_of(self, node: str) -> tuple[str, ...]:
        return self.cpts[node].parents

    def compiled(self) -> "_CompiledNet":
        if self._compiled is None:
            self._compiled = _CompiledNet(self)
        return self._compiled

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "taxonomy": self.taxonomy.to_dict(),
            "binning": None if self.binning is None else self.binning.n_obs,
            "smoothing": self.smoothing,
            "fb_ratio_cap": self.fb_ratio_cap,
            "evidence": [
                {"name": e.name, "kind": e.kind, "tool": e.tool,
                 "label": e.label, "bin_index": e.bin_index}
                for e in self.evidence
            ],
            "cpts": {
                name: {
                    "parents": list(cpt.parents),
                    "table": {str(mask): p for mask, p in sorted(cpt.table.items())},
                    "fallback": cpt.fallback,
                }
                for name, cpt in sorted(self.cpts.items())
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BnModel":
        tax = Taxonomy.from_dict(data["taxonomy"])
        binning = None if data.get("binning") is None else EvidenceBinning(int(data["binning"]))
        evidence = tuple(
            EvidenceSpec(name=e["name"], kind=e["kind"], tool=e.get("tool"),
                         label=e.get("label"), bin_index=e.get("bin_index"))
            for e in data["evidence"]
        )
        cpts = {
            name: Cpt(parents=tuple(entry["parents"]),
                      table={int(mask): float(p) for mask, p in entry["table"].items()},
                      fallback=float(entry["fallback"]))
            for name, entry in data["cpts"].items()
        }
        cap = data.get("fb_ratio_cap")
        return cls(taxonomy=tax, evidence=evidence, binning=binning, cpts=cpts,
                   smoothing=bool(data.get("smoothing", False)),
                   fb_ratio_cap=None if cap is None else float(cap),
                   version=int(data.get("version", 1)))


def _count_cpt(parent_values: list[tuple[int, ...]], node_values: list[int],
               parents: tuple[str, ...], smoothing: bool,
               clamp: float | None = None) -> Cpt:
    add = 1 if smoothing else 0
    n: dict[int, int] = {}
    n1: dict[int, int] = {}
    total = 0
    total1 = 0
    for bits, value in zip(parent_values, node_values):
        mask = 0
        for pos, bit in enumerate(bits):
            if bit:
                mask |= 1 << pos
        n[mask] = n.get(mask, 0) + 1
        n1[mask] = n1.get(mask, 0) + value
        total += 1
        total1 += value
    table = {
        mask: (n1.get(mask, 0) + add) / (n[mask] + 2 * add) for mask in n
    }
    if total > 0:
        fallback = (total1 + add) / (total + 2 * add)
    else:
        fallback = 0.5
    if clamp is not None:
        table = {mask: min(max(p, clamp), 1.0 - clamp) for mask, p in table.items()}
        fallback = min(max(fallback, clamp), 1.0 - clamp)
    return Cpt(parents=parents, table=table, fallback=fallback)


def learn_cpts(skeleton: BnSkeleton, windows: list[TrainingWindow],
               smoothing: bool = False) -> BnModel:
    """Learn structure edges and CPTs by frequency counting.

    Step nodes take the phases they cooccur with as parents; tool nodes take
    their cooccurring steps; binned nodes are fixed children of their label.
    Parent configurations never seen in training fall back to the node's
    marginal frequency at query time.
    """
    if not windows:
        raise BayesNetError("empty training set")
    tax = skeleton.taxonomy
    seen_phases = {w.truth_phase for w in windows}
    missing = [p for p in tax.phases if p not in seen_phases]
    if missing:
        raise BayesNetError(f"no training window for phases: {missing}")
    for w in windows:
        if tax.step_to_phase.get(w.truth_step) != w.truth_phase:
            raise BayesNetError(
                f"window labeled step {w.truth_step!r} under phase {w.truth_phase!r}, "
                "inconsistent with taxonomy"
            )

    phase_true = {p: [int(w.truth_phase == p) for w in windows] for p in tax.phases}
    step_true = {s: [int(w.truth_step == s) for w in windows] for s in tax.steps}

    cpts: dict[str, Cpt] = {}
    for p in tax.phases:
        cpts[phase_node(p)] = _count_cpt([() for _ in windows], phase_true[p], (),
                                         smoothing)

    for s in tax.steps:
        parents = tuple(
            p for p in tax.phases
            if any(sv and pv for sv, pv in zip(step_true[s], phase_true[p]))
        )
        if not parents:
            parents = (tax.step_to_phase[s],)
        parent_nodes = tuple(phase_node(p) for p in parents)
        bits = [tuple(phase_true[p][i] for p in parents) for i in range(len(windows))]
        cpts[step_node(s)] = _count_cpt(bits, step_true[s], parent_nodes, smoothing)

    for spec in skeleton.evidence:
        observed_rows = [i for i, w in enumerate(windows) if spec.name in w.evidence]
        values = [int(windows[i].evidence[spec.name]) for i in observed_rows]
        if spec.kind == "tool":
            # a step becomes a parent only when the tool appears with it
            # clearly above the tool's base rate, so spurious single-window
            # cooccurrences do not inflate parent sets
            base_rate = sum(values) / len(values) if observed_rows else 0.0
            parents = []
            for s in tax.steps:
                with_step = [values[j] for j, i in enumerate(observed_rows)
                             if step_true[s][i]]
                if not with_step or sum(with_step) == 0:
                    continue
                rate = sum(with_step) / len(with_step)
                if rate > 2.0 * base_rate:
                    parents.append(s)
            parents = tuple(parents)
            if not parents:
                logger.warning("tool node %s carries no step signal; kept edgeless",
                               spec.name)
            parent_nodes = tuple(step_node(s) for s in parents)
            bits = [tuple(step_true[s][i] for s in parents) for i in observed_rows]
        elif spec.kind == "step_bin":
            parent_nodes = (step_node(spec.label),)
            bits = [(step_true[spec.label][i],) for i in observed_rows]
        elif spec.kind == "phase_bin":
            parent_nodes = (phase_node(spec.label),)
            bits = [(phase_true[spec.label][i],) for i in observed_rows]
        else:
            raise BayesNetError(f"unknown evidence kind {spec.kind!r}")
        cpts[spec.name] = _count_cpt(bits, values, parent_nodes, smoothing,
                                     clamp=EVIDENCE_EPS)

    return BnModel(taxonomy=tax, evidence=skeleton.evidence,
                   binning=skeleton.binning, cpts=cpts, smoothing=smoothing)


class _CompiledNet:
    """Index-based view of a BnModel for fast repeated inference."""

    def __init__(self, model: BnModel):
        tax = model.taxonomy
        self.model = model
        self.phases = tax.phases
        self.steps = tax.steps
        self.phase_idx = {p: i for i, p in enumerate(tax.phases)}
        self.step_idx = {s: i for i, s in enumerate(tax.steps)}
        self.phase_prior = np.array(
            [model.cpts[phase_node(p)].prob(0) for p in tax.phases]
        )
        self.step_cpts = []
        self.step_phase_parents = []
        for s in tax.steps:
            cpt = model.cpts[step_node(s)]
            self.step_cpts.append(cpt)
            self.step_phase_parents.append(
                tuple(self.phase_idx[name.split(":", 1)[1]] for name in cpt.parents)
            )
        # children of each phase: steps having that phase as a parent
        self.phase_children = [[] for _ in tax.phases]
        for si, parent_ids in enumerate(self.step_phase_parents):
            for pos, pi in enumerate(parent_ids):
                self.phase_children[pi].append((si, pos))
        self.evidence_names = {spec.name for spec in model.evidence}
        self.specs = {spec.name: spec for spec in model.evidence}

    def _prepare(self, evidence: dict[str, bool]):
        """Split observed evidence into static per-label likelihood factors
        and dynamic factors (multi-parent tool nodes)."""
        for name in evidence:
            if name not in self.evidence_names:
                raise BayesNetError(f"evidence on unknown node {name!r}")
        n_s, n_p = len(self.steps), len(self.phases)
        step_lik = np.ones((n_s, 2))
        phase_lik = np.ones((n_p, 2))
        fb_lik = np.ones((n_p, 2))
        dynamic: list[tuple[Cpt, tuple[int, ...], int]] = []
        dyn_by_step: list[list[int]] = [[] for _ in range(n_s)]
        for name, value in evidence.items():
            cpt = self.model.cpts[name]
            value = int(bool(value))
            kind = self.specs[name].kind
            if kind == "tool":
                parent_steps = tuple(
                    self.step_idx[p.split(":", 1)[1]] for p in cpt.parents
                )
                if len(parent_steps) == 0:
                    continue  # edgeless node: constant likelihood
                if len(parent_steps) == 1:
                    si = parent_steps[0]
                    for v in (0, 1):
                        q = cpt.prob(v)
                        step_lik[si, v] *= q if value else 1.0 - q
                else:
                    idx = len(dynamic)
                    dynamic.append((cpt, parent_steps, value))
                    for si in parent_steps:
                        dyn_by_step[si].append(idx)
            elif kind == "step_bin":
                si = self.step_idx[self.specs[name].label]
                for v in (0, 1):
                    q = cpt.prob(v)
                    step_lik[si, v] *= q if value else 1.0 - q
            elif kind == "phase_bin":
                pi = self.phase_idx[self.specs[name].label]
                for v in (0, 1):
                    q = cpt.prob(v)
                    fb_lik[pi, v] *= q if value else 1.0 - q
        cap = self.model.fb_ratio_cap
        for pi in range(n_p):
            on, off = fb_lik[pi, 1], fb_lik[pi, 0]
            if on == 1.0 and off == 1.0:
                continue
            if cap is not None:
                if off <= 0.0 and on <= 0.0:
                    continue
                ratio = np.inf if off <= 0.0 else on / off
                ratio = min(max(ratio, 1.0 / cap), cap)
                phase_lik[pi, 1] *= ratio
            else:
                phase_lik[pi, 1] *= on
                phase_lik[pi, 0] *= off
        return step_lik, phase_lik, dynamic, dyn_by_step

    def _step_mask(self, steps: np.ndarray, parent_steps: tuple[int, ...],
                   override: int | None = None, override_value: int = 0) -> int:
        mask = 0
        for pos, si in enumerate(parent_steps):
            bit = override_value if si == override else int(steps[si])
            if bit:
                mask |= 1 << pos
        return mask

    def _phase_mask(self, phases: np.ndarray, parent_ids: tuple[int, ...],
                    override: int | None = None, override_value: int = 0) -> int:
        mask = 0
        for pos, pi in enumerate(parent_ids):
            bit = override_value if pi == override else int(phases[pi])
            if bit:
                mask |= 1 << pos
        return mask

    def gibbs(self, evidence: dict[str, bool], n_samples: int, burn_in: int,
              seed: int) -> PosteriorMarginals:
        step_lik, phase_lik, dynamic, dyn_by_step = self._prepare(evidence)
        rng = np.random.default_rng(seed)
        n_s, n_p = len(self.steps), len(self.phases)

        phases = (rng.random(n_p) < self.phase_prior).astype(np.int8)
        steps = np.zeros(n_s, dtype=np.int8)
        for si in range(n_s):
            mask = self._phase_mask(phases, self.step_phase_parents[si])
            steps[si] = 1 if rng.random() < self.step_cpts[si].prob(mask) else 0

        sum_steps = np.zeros(n_s)
        sum_phases = np.zeros(n_p)
        coupled = len(dynamic) > 0
        p_cond = np.empty(n_s)

        for sweep in range(burn_in + n_samples):
            if coupled:
                draws = rng.random(n_s)
                for si in range(n_s):
                    mask = self._phase_mask(phases, self.step_phase_parents[si])
                    p1 = self.step_cpts[si].prob(mask)
                    w1 = p1 * step_lik[si, 1]
                    w0 = (1.0 - p1) * step_lik[si, 0]
                    for di in dyn_by_step[si]:
                        cpt, parent_steps, value = dynamic[di]
                        q1 = cpt.prob(self._step_mask(steps, parent_steps, si, 1))
                        q0 = cpt.prob(self._step_mask(steps, parent_steps, si, 0))
                        w1 *= q1 if value else 1.0 - q1
                        w0 *= q0 if value else 1.0 - q0
                    total = w1 + w0
                    prob = 0.5 if total <= 0.0 else w1 / total
                    steps[si] = 1 if draws[si] < prob else 0
            else:
                for si in range(n_s):
                    mask = self._phase_mask(phases, self.step_phase_parents[si])
                    p1 = self.step_cpts[si].prob(mask)
                    w1 = p1 * step_lik[si, 1]
                    w0 = (1.0 - p1) * step_lik[si, 0]
                    total = w1 + w0
                    p_cond[si] = 0.5 if total <= 0.0 else w1 / total
                steps = (rng.random(n_s) < p_cond).astype(np.int8)

            for pi in range(n_p):
                prior = self.phase_prior[pi]
                w1 = prior * phase_lik[pi, 1]
                w0 = (1.0 - prior) * phase_lik[pi, 0]
                for si, pos in self.phase_children[pi]:
                    parents = self.step_phase_parents[si]
                    cpt = self.step_cpts[si]
                    q1 = cpt.prob(self._phase_mask(phases, parents, pi, 1))
                    q0 = cpt.prob(self._phase_mask(phases, parents, pi, 0))
                    if steps[si]:
                        w1 *= q1
                        w0 *= q0
                    else:
                        w1 *= 1.0 - q1
                        w0 *= 1.0 - q0
                total = w1 + w0
                prob = 0.5 if total <= 0.0 else w1 / total
                phases[pi] = 1 if rng.random() < prob else 0

            if sweep >= burn_in:
                sum_steps += steps
                sum_phases += phases

        # half-count pseudocounts keep zero-visit labels at a realistic
        # log-scale instead of an exact 0 (pure Monte Carlo artifact)
        step_marg = (sum_steps + 0.5) / (n_samples + 1.0)
        phase_marg = (sum_phases + 0.5) / (n_samples + 1.0)
        return PosteriorMarginals(step_probs=_renormalize(step_marg),
                                  phase_probs=_renormalize(phase_marg))


def _renormalize(marginals: np.ndarray) -> np.ndarray:
    total = float(marginals.sum())
    if total <= 0.0:
        return np.full(len(marginals), 1.0 / len(marginals))
    return marginals / total


def gibbs_infer(model: BnModel, evidence: dict[str, bool],
                n_samples: int = DEFAULT_N_SAMPLES, burn_in: int = DEFAULT_BURN_IN,
                seed: int = 0) -> PosteriorMarginals:
    """Posterior step/phase marginals by single-chain Gibbs sampling.

    Deterministic for a given seed. Step nodes update as one block (they are
    conditionally independent given phases unless a multi-parent tool node
    couples them, in which case they update one at a time); phase nodes
    update sequentially against their step children.
    """
    if n_samples < 1 or burn_in < 0:
        raise BayesNetError("need n_samples >= 1 and burn_in >= 0")
    return model.compiled().gibbs(evidence, n_samples, burn_in, seed)


def exact_infer(model: BnModel, evidence: dict[str, bool]) -> PosteriorMarginals:
    """Exact marginals by full joint enumeration (test oracle).

    Enumerates every configuration of the unobserved nodes; refuses state
    spaces above 2^20.
    """
    tax = model.taxonomy
    names = model.node_names
    observed: dict[str, int] = {}
    evidence_names = {spec.name for spec in model.evidence}
    for name, value in evidence.items():
        if name not in evidence_names:
            raise BayesNetError(f"evidence on unknown node {name!r}")
        observed[name] = int(bool(value))
    hidden = [n for n in names if n not in observed]
    if 2 ** len(hidden) > 2 ** 20:
        raise BayesNetError("state space too large for exact enumeration")

    # Observed feedback bins are handled as one capped ratio factor per
    # phase, mirroring the Gibbs sampler (see BnModel.fb_ratio_cap).
    skip_factor: set[str] = set()
    fb_factor: dict[str, tuple[float, float]] = {}
    if model.fb_ratio_cap is not None:
        spec_by_name = {spec.name: spec for spec in model.evidence}
        fb_lik: dict[str, list[float]] = {}
        for name, value in observed.items():
            spec = spec_by_name[name]
            if spec.kind != "phase_bin":
                continue
            skip_factor.add(name)
            cpt = model.cpts[name]
            lik = fb_lik.setdefault(spec.label, [1.0, 1.0])
            for v in (0, 1):
                q = cpt.prob(v)
                lik[v] *= q if value else 1.0 - q
        for phase, (off, on) in fb_lik.items():
            if off <= 0.0 and on <= 0.0:
                continue
            ratio = np.inf if off <= 0.0 else on / off
            ratio = min(max(ratio, 1.0 / model.fb_ratio_cap), model.fb_ratio_cap)
            fb_factor[phase_node(phase)] = (1.0, ratio)

    step_names = [step_node(s) for s in tax.steps]
    phase_names = [phase_node(p) for p in tax.phases]
    sum_step = np.zeros(len(step_names))
    sum_phase = np.zeros(len(phase_names))
    total = 0.0
    for assignment_bits in itertools.product((0, 1), repeat=len(hidden)):
        state = dict(zip(hidden, assignment_bits))
        state.update(observed)
        weight = 1.0
        for name in names:
            if name in skip_factor:
                continue
            cpt = model.cpts[name]
            mask = 0
            for pos, parent in enumerate(cpt.parents):
                if state[parent]:
                    mask |= 1 << pos
            p1 = cpt.prob(mask)
            weight *= p1 if state[name] else 1.0 - p1
            extra = fb_factor.get(name)
            if extra is not None:
                weight *= extra[state[name]]
            if weight == 0.0:
                break
        if weight == 0.0:
            continue
        total += weight
        for i, name in enumerate(step_names):
            if state[name]:
                sum_step[i] += weight
        for i, name in enumerate(phase_names):
            if state[name]:
                sum_phase[i] += weight
    if total <= 0.0:
        raise BayesNetError("evidence has zero probability under the model")
    return PosteriorMarginals(step_probs=_renormalize(sum_step / total),
                              phase_probs=_renormalize(sum_phase / total))


def evidence_seed(base_seed: int, evidence: dict[str, bool]) -> int:
    """Stable per-evidence seed: same evidence + base seed -> same chain."""
    payload = repr(sorted((k, bool(v)) for k, v in evidence.items()))
    digest = hashlib.blake2b(
        payload.encode("utf-8") + base_seed.to_bytes(8, "little", signed=True),
        digest_size=8,
    ).digest()
    return int.from_bytes(digest, "little")


class BnInferencer:
    """Memoizing front end used by the online pipelines.

    Gibbs output is a pure function of (evidence, derived seed), so results
    are cached per evidence configuration; the derived seed keeps replays
    and truncated streams bit-identical.
    """

    def __init__(self, model: BnModel, n_samples: int, burn_in: int, base_seed: int):
        self.model = model
        self.n_samples = n_samples
        self.burn_in = burn_in
        self.base_seed = base_seed
        self._cache: dict[str, PosteriorMarginals] = {}

    def marginals(self, evidence: dict[str, bool]) -> PosteriorMarginals:
        key = repr(sorted((k, bool(v)) for k, v in evidence.items()))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        seed = evidence_seed(self.base_seed, evidence)
        result = gibbs_infer(self.model, evidence, self.n_samples, self.burn_in, seed)
        self._cache[key] = result
        return result
