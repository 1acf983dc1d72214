"""Flat per-level HMMs and the two-level hierarchical HMM.

Transitions come from frequency counts. Decoding is strictly online: one
Viterbi column per window, in log domain with -inf sentinels. The
hierarchical decoder runs a generalized Viterbi over (phase, step) pairs
where cross-phase moves pay child-exit x phase-horizontal x child-entry;
it is equivalent to flat Viterbi over the expanded product chain built
from the same factors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import MarkovError
from .taxonomy import Taxonomy

logger = logging.getLogger(__name__)

NO_TOOL_SYMBOL = "NO_TOOL"


def _log(x: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(x)


@dataclass
class TransitionMatrix:
    """Row-stochastic label transition matrix a_ij = P(next=j | current=i)."""

    labels: tuple[str, ...]
    a: np.ndarray
    flagged_rows: tuple[str, ...] = ()

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        n = len(self.labels)
        if self.a.shape != (n, n):
            raise MarkovError("transition matrix shape does not match labels")
        if np.any(np.isnan(self.a)):
            raise MarkovError("transition matrix contains NaN")
        if not np.allclose(self.a.sum(axis=1), 1.0, atol=1e-9):
            raise MarkovError("transition matrix rows must sum to 1")

    def to_dict(self) -> dict:
        return {"labels": list(self.labels),
                "a": [[float(v) for v in row] for row in self.a],
                "flagged_rows": list(self.flagged_rows)}

    @classmethod
    def from_dict(cls, data: dict) -> "TransitionMatrix":
        return cls(labels=tuple(data["labels"]),
                   a=np.asarray(data["a"], dtype=float),
                   flagged_rows=tuple(data.get("flagged_rows", [])))


def learn_transitions(sequences: list[list[str]], labels: tuple[str, ...],
                      smoothing: bool = False) -> tuple[TransitionMatrix, np.ndarray]:
    """Count transitions between consecutive windows; Pi from first windows.

    Labels never seen as a predecessor get a uniform row and are flagged.
    With smoothing, every count starts at one.
    """
    if not sequences or all(len(seq) == 0 for seq in sequences):
        raise MarkovError("no training sequences")
    idx = {label: i for i, label in enumerate(labels)}
    n = len(labels)
    add = 1.0 if smoothing else 0.0
    counts = np.full((n, n), add)
    pi_counts = np.full(n, add)
    for seq in sequences:
        for label in seq:
            if label not in idx:
                raise MarkovError(f"unknown label {label!r} in training sequence")
        if len(seq) > 0:
            pi_counts[idx[seq[0]]] += 1.0
        for prev, cur in zip(seq, seq[1:]):
            counts[idx[prev], idx[cur]] += 1.0
    flagged = []
    a = np.empty_like(counts)
    for i in range(n):
        row_sum = counts[i].sum()
        if row_sum <= 0:
            a[i] = np.full(n, 1.0 / n)
            flagged.append(labels[i])
            logger.debug("label %s never a predecessor; uniform transition row",
                         labels[i])
        else:
            a[i] = counts[i] / row_sum
    pi_sum = pi_counts.sum()
    if pi_sum <= 0:
        pi = np.full(n, 1.0 / n)
    else:
        pi = pi_counts / pi_sum
    return TransitionMatrix(labels=labels, a=a, flagged_rows=tuple(flagged)), pi


@dataclass
class Hmm:
    """States, initial distribution, transitions and the decoding tick."""

    labels: tuple[str, ...]
    pi: np.ndarray
    trans: TransitionMatrix
    tick: float = 1.0  # seconds between decoder advances

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        if abs(float(self.pi.sum()) - 1.0) > 1e-9:
            raise MarkovError("initial distribution must sum to 1")
        if self.tick <= 0:
            raise MarkovError("tick must be positive")
        if self.trans.labels != self.labels:
            raise MarkovError("transition labels do not match HMM labels")

    def to_dict(self) -> dict:
        return {"version": 1, "labels": list(self.labels),
                "pi": [float(v) for v in self.pi],
                "trans": self.trans.to_dict(), "tick": self.tick}

    @classmethod
    def from_dict(cls, data: dict) -> "Hmm":
        return cls(labels=tuple(data["labels"]),
                   pi=np.asarray(data["pi"], dtype=float),
                   trans=TransitionMatrix.from_dict(data["trans"]),
                   tick=float(data.get("tick", 1.0)))


@dataclass
class DecoderState:
    """Current log-delta column of an online Viterbi decoder."""

    log_delta: np.ndarray
    t: int
    last_argmax: int

    def __post_init__(self):
        if not np.any(self.log_delta > -np.inf):
            raise MarkovError("degenerate decoder state: all states at -inf")


def _scores_from(log_delta: np.ndarray) -> np.ndarray:
    shifted = log_delta - log_delta.max()
    with np.errstate(over="ignore"):
        expd = np.exp(shifted)
    return expd / expd.sum()


def viterbi_step(hmm: Hmm, state: DecoderState | None,
                 emission: np.ndarray) -> tuple[DecoderState, str, np.ndarray]:
    """Advance the online Viterbi decoder by one window.

    First call initializes with Pi. Returns the new state, the argmax label
    and posterior-proportional per-state scores (normalized exp(log-delta)).
    """
    emission = np.asarray(emission, dtype=float)
    if emission.shape[0] != len(hmm.labels):
        raise MarkovError("emission length does not match state count")
    if not np.any(emission > 0):
        raise MarkovError("degenerate emission: all states have zero probability")
    log_em = _log(emission)
    if state is None:
        log_delta = _log(hmm.pi) + log_em
        t = 1
    else:
        log_a = _log(hmm.trans.a)
        log_delta = np.max(state.log_delta[:, None] + log_a, axis=0) + log_em
        t = state.t + 1
    if not np.any(log_delta > -np.inf):
        raise MarkovError("degenerate decoder column: all states at -inf")
    argmax = int(np.argmax(log_delta))
    new_state = DecoderState(log_delta=log_delta, t=t, last_argmax=argmax)
    return new_state, hmm.labels[argmax], _scores_from(log_delta)


@dataclass
class ChildHmm:
    """Per-phase chain over that phase's steps, with entry and exit mass."""

    steps: tuple[str, ...]
    pi: np.ndarray
    a: np.ndarray          # (n, n) horizontal transitions between steps
    exit: np.ndarray       # (n,) probability of leaving the phase from each step

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.exit = np.asarray(self.exit, dtype=float)
        n = len(self.steps)
        if self.a.shape != (n, n) or self.pi.shape != (n,) or self.exit.shape != (n,):
            raise MarkovError("child HMM shapes do not match its step list")
        rows = self.a.sum(axis=1) + self.exit
        if not np.allclose(rows, 1.0, atol=1e-9):
            raise MarkovError("child rows plus exit must sum to 1")
        if abs(float(self.pi.sum()) - 1.0) > 1e-9:
            raise MarkovError("child initial distribution must sum to 1")


@dataclass
class Hhmm:
    """Two-level hierarchical HMM: phase chain over per-phase step chains.

    phase_a rows exclude self transitions (a phase run cannot follow itself)
    and together with phase_end sum to 1. Production-state emissions b hold
    P(symbol | step) over a discrete tool-pair alphabet; they are unused when
    an explicit per-step emission vector is supplied at decode time.
    """

    taxonomy: Taxonomy
    phase_pi: np.ndarray
    phase_a: np.ndarray        # (P, P) horizontal transitions between phases
    phase_end: np.ndarray      # (P,) probability the surgery ends after a phase
    children: dict[str, ChildHmm]
    symbols: tuple[str, ...] = ()
    b: np.ndarray | None = None  # (n_steps, n_symbols)
    pair_freq: dict[str, int] = field(default_factory=dict)
    version: int = 1

    def __post_init__(self):
        self.phase_pi = np.asarray(self.phase_pi, dtype=float)
        self.phase_a = np.asarray(self.phase_a, dtype=float)
        self.phase_end = np.asarray(self.phase_end, dtype=float)
        rows = self.phase_a.sum(axis=1) + self.phase_end
        if not np.allclose(rows, 1.0, atol=1e-9):
            raise MarkovError("phase rows plus end must sum to 1")
        for phase in self.taxonomy.phases:
            child = self.children.get(phase)
            if child is None:
                raise MarkovError(f"missing child HMM for phase {phase!r}")
            if child.steps != self.taxonomy.steps_of_phase(phase):
                raise MarkovError(f"child step set for {phase!r} does not match taxonomy")
        if self.b is not None:
            self.b = np.asarray(self.b, dtype=float)
            if self.b.shape != (self.taxonomy.n_steps, len(self.symbols)):
                raise MarkovError("emission matrix shape does not match alphabet")
        self._build_product_chain()

    def _build_product_chain(self):
        """Expand the hierarchy into a flat chain over (phase, step) pairs.

        Each step belongs to exactly one phase, so the pair space is simply
        the step list in taxonomy order.
        """
        tax = self.taxonomy
        n = tax.n_steps
        self.step_phase_index = np.array(
            [tax.phase_index(tax.step_to_phase[s]) for s in tax.steps]
        )
        child_pos = {}
        for phase in tax.phases:
            for pos, s in enumerate(self.children[phase].steps):
                child_pos[s] = pos
        init = np.zeros(n)
        trans = np.zeros((n, n))
        for i, s in enumerate(tax.steps):
            phase_i = tax.step_to_phase[s]
            pi_i = tax.phase_index(phase_i)
            child_i = self.children[phase_i]
            pos_i = child_pos[s]
            init[i] = self.phase_pi[pi_i] * child_i.pi[pos_i]
            for j, s2 in enumerate(tax.steps):
                phase_j = tax.step_to_phase[s2]
                pj = tax.phase_index(phase_j)
                pos_j = child_pos[s2]
                if phase_i == phase_j:
                    trans[i, j] = child_i.a[pos_i, pos_j]
                else:
                    trans[i, j] = (child_i.exit[pos_i]
                                   * self.phase_a[pi_i, pj]
                                   * self.children[phase_j].pi[pos_j])
        self.log_init = _log(init)
        self.log_trans = _log(trans)

    def symbol_index(self, symbol: str) -> int | None:
        try:
            return self.symbols.index(symbol)
        except ValueError:
            return None

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "taxonomy": self.taxonomy.to_dict(),
            "phase_pi": [float(v) for v in self.phase_pi],
            "phase_a": [[float(v) for v in row] for row in self.phase_a],
            "phase_end": [float(v) for v in self.phase_end],
            "children": {
                phase: {
                    "steps": list(child.steps),
                    "pi": [float(v) for v in child.pi],
                    "a": [[float(v) for v in row] for row in child.a],
                    "exit": [float(v) for v in child.exit],
                }
                for phase, child in sorted(self.children.items())
            },
            "symbols": list(self.symbols),
            "b": None if self.b is None else [[float(v) for v in row] for row in self.b],
            "pair_freq": dict(sorted(self.pair_freq.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Hhmm":
        tax = Taxonomy.from_dict(data["taxonomy"])
        children = {
            phase: ChildHmm(steps=tuple(entry["steps"]),
                            pi=np.asarray(entry["pi"], dtype=float),
                            a=np.asarray(entry["a"], dtype=float),
                            exit=np.asarray(entry["exit"], dtype=float))
            for phase, entry in data["children"].items()
        }
        b = data.get("b")
        return cls(taxonomy=tax,
                   phase_pi=np.asarray(data["phase_pi"], dtype=float),
                   phase_a=np.asarray(data["phase_a"], dtype=float),
                   phase_end=np.asarray(data["phase_end"], dtype=float),
                   children=children,
                   symbols=tuple(data.get("symbols", [])),
                   b=None if b is None else np.asarray(b, dtype=float),
                   pair_freq={k: int(v) for k, v in data.get("pair_freq", {}).items()},
                   version=int(data.get("version", 1)))


def symbol_from_tools(tools_present: frozenset[str] | set[str],
                      pair_freq: dict[str, int] | None = None) -> str:
    """Canonical discrete symbol for a window's tool set.

    Empty set maps to NO_TOOL; one or two tools map to the sorted joined
    names; larger sets reduce to their most frequent training pair (ties and
    missing frequency tables fall back to the lexicographically first pair).
    """
    tools = sorted(tools_present)
    if len(tools) == 0:
        return NO_TOOL_SYMBOL
    if len(tools) <= 2:
        return "+".join(tools)
    pairs = sorted("+".join(sorted((a, b)))
                   for i, a in enumerate(tools) for b in tools[i + 1:])
    if pair_freq:
        return min(pairs, key=lambda p: (-pair_freq.get(p, 0), p))
    return pairs[0]


def _phase_runs(seq: list[tuple[str, str]]) -> list[tuple[str, list[str]]]:
    """Compress a window-level (step, phase) sequence into phase runs."""
    runs: list[tuple[str, list[str]]] = []
    for step, phase in seq:
        if runs and runs[-1][0] == phase:
            runs[-1][1].append(step)
        else:
            runs.append((phase, [step]))
    return runs


def hhmm_learn(sequences: list[list[tuple[str, str]]], tax: Taxonomy,
               symbol_streams: list[list[frozenset[str]]] | None = None,
               smoothing: bool = False) -> Hhmm:
    """Frequency-count HHMM parameters from annotated window sequences.

    A phase run's end contributes to its child's exit mass and to the phase
    row's horizontal transition (or the end pseudo-state at the sequence
    end). Emissions count tool-pair symbols per step when symbol streams are
    given; otherwise the model is built without an emission matrix and
    expects explicit per-step emission vectors at decode time.
    """
    if not sequences:
        raise MarkovError("no training sequences")
    add = 1.0 if smoothing else 0.0
    n_p = tax.n_phases
    phase_idx = {p: i for i, p in enumerate(tax.phases)}
    phase_pi = np.full(n_p, add)
    phase_a = np.full((n_p, n_p), add)
    phase_end = np.full(n_p, add)
    child_steps = {p: tax.steps_of_phase(p) for p in tax.phases}
    child_pos = {p: {s: i for i, s in enumerate(child_steps[p])} for p in tax.phases}
    child_pi = {p: np.full(len(child_steps[p]), add) for p in tax.phases}
    child_a = {p: np.full((len(child_steps[p]), len(child_steps[p])), add)
               for p in tax.phases}
    child_exit = {p: np.full(len(child_steps[p]), add) for p in tax.phases}

    for seq in sequences:
        for step, phase in seq:
            if tax.step_to_phase.get(step) != phase:
                raise MarkovError(
                    f"step {step!r} observed under phase {phase!r}, "
                    "inconsistent with taxonomy"
                )
        runs = _phase_runs(seq)
        phase_pi[phase_idx[runs[0][0]]] += 1.0
        for k, (phase, steps) in enumerate(runs):
            pi = phase_idx[phase]
            pos = child_pos[phase]
            child_pi[phase][pos[steps[0]]] += 1.0
            for prev, cur in zip(steps, steps[1:]):
                child_a[phase][pos[prev], pos[cur]] += 1.0
            child_exit[phase][pos[steps[-1]]] += 1.0
            if k + 1 < len(runs):
                phase_a[pi, phase_idx[runs[k + 1][0]]] += 1.0
            else:
                phase_end[pi] += 1.0

    def _normalize_rows(a: np.ndarray, tail: np.ndarray, what: str) -> None:
        for i in range(a.shape[0]):
            total = a[i].sum() + tail[i]
            if total <= 0:
                a[i] = np.full(a.shape[1], 1.0 / (a.shape[1] + 1))
                tail[i] = 1.0 / (a.shape[1] + 1)
                logger.debug("%s row %d never observed; uniform", what, i)
            else:
                a[i] /= total
                tail[i] /= total

    _normalize_rows(phase_a, phase_end, "phase")
    phase_pi = phase_pi / phase_pi.sum() if phase_pi.sum() > 0 else np.full(n_p, 1 / n_p)

    children = {}
    for phase in tax.phases:
        _normalize_rows(child_a[phase], child_exit[phase], f"child {phase}")
        pi_sum = child_pi[phase].sum()
        pi = (child_pi[phase] / pi_sum if pi_sum > 0
              else np.full(len(child_steps[phase]), 1.0 / len(child_steps[phase])))
        children[phase] = ChildHmm(steps=child_steps[phase], pi=pi,
                                   a=child_a[phase], exit=child_exit[phase])

    symbols: tuple[str, ...] = ()
    b = None
    pair_freq: dict[str, int] = {}
    if symbol_streams is not None:
        if len(symbol_streams) != len(sequences):
            raise MarkovError("symbol streams do not match training sequences")
        for stream in symbol_streams:
            for tools in stream:
                tools = sorted(tools)
                for i, a_tool in enumerate(tools):
                    for b_tool in tools[i + 1:]:
                        key = f"{a_tool}+{b_tool}"
                        pair_freq[key] = pair_freq.get(key, 0) + 1
        observed = set()
        per_window_symbols: list[list[str]] = []
        for stream in symbol_streams:
            syms = [symbol_from_tools(tools, pair_freq) for tools in stream]
            per_window_symbols.append(syms)
            observed.update(syms)
        symbols = tuple(sorted(observed | {NO_TOOL_SYMBOL}))
        sym_idx = {s: i for i, s in enumerate(symbols)}
        step_idx = {s: i for i, s in enumerate(tax.steps)}
        counts = np.full((tax.n_steps, len(symbols)), add)
        for seq, syms in zip(sequences, per_window_symbols):
            if len(seq) != len(syms):
                raise MarkovError("symbol stream length does not match sequence")
            for (step, _phase), sym in zip(seq, syms):
                counts[step_idx[step], sym_idx[sym]] += 1.0
        b = np.empty_like(counts)
        for i in range(tax.n_steps):
            total = counts[i].sum()
            if total <= 0:
                b[i] = np.full(len(symbols), 1.0 / len(symbols))
                logger.debug("step %s has no emission counts; uniform", tax.steps[i])
            else:
                b[i] = counts[i] / total

    return Hhmm(taxonomy=tax, phase_pi=phase_pi, phase_a=phase_a,
                phase_end=phase_end, children=children, symbols=symbols, b=b,
                pair_freq=pair_freq)


@dataclass
class HhmmDecoderState:
    """Log-delta column over (phase, step) pairs."""

    log_delta: np.ndarray
    t: int


def hhmm_viterbi_step(
    hhmm: Hhmm,
    state: HhmmDecoderState | None,
    symbol: str | None = None,
    emission: np.ndarray | None = None,
    emission_floor: float = 0.0,
) -> tuple[HhmmDecoderState, str, str, np.ndarray, np.ndarray]:
    """One online step of the generalized Viterbi decoder.

    Exactly one of symbol / emission must be given: a discrete tool-pair
    symbol (looked up in the learned emission matrix; unknown symbols fall
    back to NO_TOOL with a flag) or an explicit per-step emission vector.
    Returns the new state, step argmax, phase argmax and per-level scores.
    """
    tax = hhmm.taxonomy
    if (symbol is None) == (emission is None):
        raise MarkovError("provide exactly one of symbol or emission")
    if emission is None:
        if hhmm.b is None:
            raise MarkovError("model has no emission matrix; pass an emission vector")
        idx = hhmm.symbol_index(symbol)
        if idx is None:
            logger.debug("unknown symbol %r; treating as NO_TOOL", symbol)
            idx = hhmm.symbol_index(NO_TOOL_SYMBOL)
            if idx is None:
                raise MarkovError("alphabet lacks the NO_TOOL symbol")
        em = hhmm.b[:, idx]
    else:
        em = np.asarray(emission, dtype=float)
        if em.shape[0] != tax.n_steps:
            raise MarkovError("emission vector length does not match step count")
    if emission_floor > 0.0:
        em = np.maximum(em, emission_floor)
    log_em = _log(em)

    if state is None:
        log_delta = hhmm.log_init + log_em
        t = 1
    else:
        log_delta = np.max(state.log_delta[:, None] + hhmm.log_trans, axis=0) + log_em
        t = state.t + 1
    if not np.any(log_delta > -np.inf):
        raise MarkovError("degenerate decoder column: all pairs at -inf")

    pair_scores = _scores_from(log_delta)
    phase_scores = np.zeros(tax.n_phases)
    np.add.at(phase_scores, hhmm.step_phase_index, pair_scores)
    step_arg = int(np.argmax(log_delta))
    phase_arg = int(np.argmax(phase_scores))
    return (HhmmDecoderState(log_delta=log_delta, t=t),
            tax.steps[step_arg], tax.phases[phase_arg], pair_scores, phase_scores)
