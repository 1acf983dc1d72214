"""Linear-chain CRFs with network-supplied unary potentials.

Unary potentials are log posterior marginals of a label given the window's
evidence (optionally looked up delta_t windows back); pairwise potentials
are log transition probabilities. One weight is tied per unary feature
(per label) and per pairwise feature (per label pair) across time, so a
model trained on surgeries of one length generalizes to any length.
Training maximizes L2-regularized conditional log-likelihood with L-BFGS;
decoding is the strictly causal max-product forward recursion.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import CrfError
from .markov import TransitionMatrix

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
DEFAULT_L2 = 1e-2
DEFAULT_MAX_ITER = 200
DEFAULT_TOL = 1e-5
LBFGS_MEMORY = 10


def _floored_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(np.asarray(p, dtype=float), PROB_FLOOR))


@dataclass
class PotentialSet:
    """Per-window unary and static pairwise log-potentials for one stream."""

    labels: tuple[str, ...]
    unary: np.ndarray          # (T, N) log marginals, delta_t already applied
    pairwise: np.ndarray       # (N, N) log transition probabilities
    delta_t: int = 0
    clamped_windows: tuple[int, ...] = ()

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=float)
        self.pairwise = np.asarray(self.pairwise, dtype=float)
        n = len(self.labels)
        if self.unary.ndim != 2 or self.unary.shape[1] != n:
            raise CrfError("unary potential shape does not match labels")
        if self.pairwise.shape != (n, n):
            raise CrfError("pairwise potential shape does not match labels")
        if not np.all(np.isfinite(self.unary)):
            raise CrfError("unary potentials must be finite (floored before log)")
        if not np.all(np.isfinite(self.pairwise)):
            raise CrfError("pairwise potentials must be finite (floored before log)")


def build_potentials(marginals: list[np.ndarray], trans: TransitionMatrix,
                     delta_t: int = 0) -> PotentialSet:
    """Potentials from a marginal stream and a transition matrix.

    The unary row at window t is the floored log marginal at t - delta_t;
    lookbacks that would precede the stream clamp to the first window and
    are flagged.
    """
    if delta_t < 0:
        raise CrfError("delta_t must be >= 0")
    if not marginals:
        raise CrfError("empty marginal stream")
    stack = np.stack([np.asarray(m, dtype=float) for m in marginals])
    n = stack.shape[1]
    if n != len(trans.labels):
        raise CrfError("marginal length does not match transition labels")
    clamped = []
    rows = np.empty_like(stack)
    for t in range(stack.shape[0]):
        src = t - delta_t
        if src < 0:
            src = 0
            clamped.append(t + 1)
            logger.debug("window %d: delta_t lookback clamped to stream start", t + 1)
        rows[t] = stack[src]
    return PotentialSet(labels=trans.labels, unary=_floored_log(rows),
                        pairwise=_floored_log(trans.a), delta_t=delta_t,
                        clamped_windows=tuple(clamped))


@dataclass
class CrfModel:
    """Tied weights over unary (per label) and pairwise (per pair) features."""

    labels: tuple[str, ...]
    lam: np.ndarray            # (N,)
    mu: np.ndarray             # (N, N)
    version: int = 1

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float)
        self.mu = np.asarray(self.mu, dtype=float)
        n = len(self.labels)
        if self.lam.shape != (n,) or self.mu.shape != (n, n):
            raise CrfError("weight shapes do not match label count")
        if not (np.all(np.isfinite(self.lam)) and np.all(np.isfinite(self.mu))):
            raise CrfError("weights must be finite")

    def to_dict(self) -> dict:
        return {"version": self.version, "labels": list(self.labels),
                "lam": [float(v) for v in self.lam],
                "mu": [[float(v) for v in row] for row in self.mu],
                "feature_map": "per-label log-marginal unary; per-pair log-transition pairwise"}

    @classmethod
    def from_dict(cls, data: dict) -> "CrfModel":
        return cls(labels=tuple(data["labels"]),
                   lam=np.asarray(data["lam"], dtype=float),
                   mu=np.asarray(data["mu"], dtype=float),
                   version=int(data.get("version", 1)))


def _logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else float(out)


def _sequence_ll_and_grad(potentials: PotentialSet, truth: np.ndarray,
                          lam: np.ndarray, mu: np.ndarray):
    """Log-likelihood and gradient contributions of one training sequence.

    Expectations come from full forward-backward; training is offline so the
    backward pass is allowed (decode time is not).
    """
    psi_u = potentials.unary          # (T, N)
    psi_p = potentials.pairwise       # (N, N)
    big_t, n = psi_u.shape
    u = psi_u * lam[None, :]          # weighted unary scores
    w = psi_p * mu                    # weighted pairwise scores

    alpha = np.empty((big_t, n))
    alpha[0] = u[0]
    for t in range(1, big_t):
        alpha[t] = u[t] + _logsumexp(alpha[t - 1][:, None] + w, axis=0)
    log_z = _logsumexp(alpha[big_t - 1], axis=0)

    beta = np.empty((big_t, n))
    beta[big_t - 1] = 0.0
    for t in range(big_t - 2, -1, -1):
        beta[t] = _logsumexp(w + (u[t + 1] + beta[t + 1])[None, :], axis=1)

    node_marg = np.exp(alpha + beta - log_z)          # (T, N)

    score = float(u[np.arange(big_t), truth].sum())
    grad_lam = np.zeros(n)
    np.add.at(grad_lam, truth, psi_u[np.arange(big_t), truth])
    grad_lam -= (psi_u * node_marg).sum(axis=0)

    grad_mu = np.zeros((n, n))
    if big_t > 1:
        score += float(w[truth[:-1], truth[1:]].sum())
        # (T-1, N, N) pairwise marginals collapsed over time in one pass
        pair_marg = np.exp(alpha[:-1, :, None] + w[None, :, :]
                           + (u[1:] + beta[1:])[:, None, :] - log_z)
        expected = pair_marg.sum(axis=0)
        np.add.at(grad_mu, (truth[:-1], truth[1:]), 1.0)
        grad_mu = psi_p * (grad_mu - expected)

    return score - log_z, grad_lam, grad_mu


@dataclass
class TrainingTrace:
    """Objective and gradient norm per accepted L-BFGS iteration."""

    iterations: list[tuple[int, float, float]]

    def rows(self) -> list[tuple[int, float, float]]:
        return list(self.iterations)


def train_lbfgs(sequences: list[tuple[PotentialSet, list[int]]],
                l2: float = DEFAULT_L2, max_iter: int = DEFAULT_MAX_ITER,
                tol: float = DEFAULT_TOL) -> tuple[CrfModel, TrainingTrace]:
    """Maximum-likelihood weights by L-BFGS over all training sequences.

    Maximizes sum of sequence log-likelihoods minus (l2/2)||w||^2; stops when
    the gradient infinity norm drops below tol or after max_iter iterations.
    """
    if not sequences:
        raise CrfError("no training sequences")
    labels = sequences[0][0].labels
    n = len(labels)
    for potentials, truth in sequences:
        if potentials.labels != labels:
            raise CrfError("inconsistent label sets across training sequences")
        if len(truth) != potentials.unary.shape[0]:
            raise CrfError("truth length does not match potential stream")

    truths = [np.asarray(t, dtype=int) for _, t in sequences]

    def unpack(x: np.ndarray):
        return x[:n], x[n:].reshape(n, n)

    def objective(x: np.ndarray):
        lam, mu = unpack(x)
        total = 0.0
        g_lam = np.zeros(n)
        g_mu = np.zeros((n, n))
        for (potentials, _), truth in zip(sequences, truths):
            ll, gl, gm = _sequence_ll_and_grad(potentials, truth, lam, mu)
            total += ll
            g_lam += gl
            g_mu += gm
        total -= 0.5 * l2 * (float(lam @ lam) + float((mu * mu).sum()))
        g_lam -= l2 * lam
        g_mu -= l2 * mu
        if not np.isfinite(total):
            raise CrfError("non-finite training objective")
        grad = np.concatenate([g_lam, g_mu.ravel()])
        return -total, -grad

    x0 = np.concatenate([np.ones(n), np.ones(n * n)])
    trace: list[tuple[int, float, float]] = []

    def callback(xk: np.ndarray):
        neg_obj, neg_grad = objective(xk)
        trace.append((len(trace) + 1, -neg_obj, float(np.abs(neg_grad).max())))

    result = minimize(objective, x0, jac=True, method="L-BFGS-B",
                      callback=callback,
                      options={"maxiter": max_iter, "maxcor": LBFGS_MEMORY,
                               "gtol": tol, "ftol": 1e-14})
    lam, mu = unpack(result.x)
    final_obj = -float(result.fun)
    if not trace or trace[-1][1] != final_obj:
        trace.append((len(trace) + 1, final_obj, float(np.abs(result.jac).max())))
    logger.debug("CRF training finished: %s (objective %.6f)", result.message, final_obj)
    return CrfModel(labels=labels, lam=lam, mu=mu), TrainingTrace(iterations=trace)


@dataclass
class CrfDecoderState:
    """Causal forward state: current max-product log scores per label."""

    log_p: np.ndarray
    t: int


def online_forward_step(model: CrfModel, state: CrfDecoderState | None,
                        unary_t: np.ndarray,
                        pairwise: np.ndarray) -> tuple[CrfDecoderState, str, np.ndarray]:
    """Advance the causal forward decoder by one window.

    The first call initializes from the weighted unary potentials alone; any
    later call takes the best predecessor through the weighted pairwise
    potentials. Exact ties resolve to the lowest label index.
    """
    unary_t = np.asarray(unary_t, dtype=float)
    n = len(model.labels)
    if unary_t.shape[0] != n:
        raise CrfError("unary potential length does not match labels")
    weighted_u = model.lam * unary_t
    if state is None:
        log_p = weighted_u
        t = 1
    else:
        if state.t < 1:
            raise CrfError("decoder state not initialized")
        w = model.mu * np.asarray(pairwise, dtype=float)
        log_p = weighted_u + np.max(state.log_p[:, None] + w, axis=0)
        t = state.t + 1
    argmax = int(np.argmax(log_p))
    shifted = log_p - log_p.max()
    scores = np.exp(shifted)
    scores /= scores.sum()
    return CrfDecoderState(log_p=log_p, t=t), model.labels[argmax], scores
