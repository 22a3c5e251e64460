"""CTC loss, analytic gradient, and greedy decoding with confidence scoring.

All dynamic programming runs in log-space over the blank-interleaved
extended target; there is no probability-space fallback, so long inputs
cannot underflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Vocabulary

NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """Target cannot be emitted in the available number of frames."""


@dataclass
class DecodeResult:
    hypothesis: str
    confidence: float
    frame_argmax: np.ndarray


def log_softmax(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted log-softmax; exponentials along ``axis`` sum to 1."""
    values = np.asarray(values, dtype=np.float64)
    shifted = values - np.max(values, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def min_frames(target: str) -> int:
    """Fewest frames that can emit ``target``: its length plus one blank per adjacent repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _extended_target(target: str, vocab: Vocabulary) -> np.ndarray:
    """Blank-interleaved label sequence: [blank, t1, blank, t2, ..., blank]."""
    ext = np.zeros(2 * len(target) + 1, dtype=np.intp)
    ext[1::2] = vocab.encode(target)
    return ext


def _check_feasible(n_frames: int, target: str, vocab: Vocabulary) -> None:
    for ch in target:
        if ch not in vocab:
            raise ValueError(f"target character {ch!r} not in vocabulary")
    needed = min_frames(target)
    if n_frames < needed:
        raise InfeasibleTargetError(
            f"target of length {len(target)} needs at least {needed} frames, got {n_frames}"
        )


def _forward_alphas(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Alpha lattice: alpha[t, s] includes the emission at frame t."""
    n_frames = log_probs.shape[0]
    n_states = len(ext)
    # is the state allowed to skip from s-2 (only non-blanks with a different predecessor label)
    can_skip = np.zeros(n_states, dtype=bool)
    can_skip[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])

    alpha = np.full((n_frames, n_states), NEG_INF)
    alpha[0, 0] = log_probs[0, ext[0]]
    if n_states > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, n_frames):
        prev = alpha[t - 1]
        stay = prev
        move = np.concatenate(([NEG_INF], prev[:-1]))
        acc = np.logaddexp(stay, move)
        if n_states > 2:
            skip = np.concatenate(([NEG_INF, NEG_INF], prev[:-2]))
            acc = np.where(can_skip, np.logaddexp(acc, skip), acc)
        alpha[t] = acc + log_probs[t, ext]
    return alpha


def _backward_betas(log_probs: np.ndarray, ext: np.ndarray) -> np.ndarray:
    """Beta lattice: beta[t, s] excludes the emission at frame t."""
    n_frames = log_probs.shape[0]
    n_states = len(ext)
    can_skip_from = np.zeros(n_states, dtype=bool)
    can_skip_from[: n_states - 2] = (ext[2:] != 0) & (ext[2:] != ext[:-2])

    beta = np.full((n_frames, n_states), NEG_INF)
    beta[n_frames - 1, n_states - 1] = 0.0
    if n_states > 1:
        beta[n_frames - 1, n_states - 2] = 0.0
    for t in range(n_frames - 2, -1, -1):
        nxt = beta[t + 1] + log_probs[t + 1, ext]
        stay = nxt
        move = np.concatenate((nxt[1:], [NEG_INF]))
        acc = np.logaddexp(stay, move)
        if n_states > 2:
            skip = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))
            acc = np.where(can_skip_from, np.logaddexp(acc, skip), acc)
        beta[t] = acc
    return beta


def _total_log_prob(alpha: np.ndarray) -> float:
    if alpha.shape[1] == 1:
        return float(alpha[-1, -1])
    return float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]))


def ctc_loss(logits: np.ndarray, target: str, vocab: Vocabulary) -> float:
    """Negative log-likelihood of ``target`` under the CTC path distribution.

    Sums over every frame-level path whose collapse equals the target.
    Infeasible targets raise :class:`InfeasibleTargetError` instead of
    returning +inf: in training that always signals a data or
    downsampling bug.
    """
    logits = np.asarray(logits, dtype=np.float64)
    _check_feasible(logits.shape[0], target, vocab)
    log_probs = log_softmax(logits, axis=1)
    ext = _extended_target(target, vocab)
    alpha = _forward_alphas(log_probs, ext)
    return -_total_log_prob(alpha)


def ctc_loss_and_grad(logits: np.ndarray, target: str, vocab: Vocabulary) -> tuple[float, np.ndarray]:
    """Loss plus its exact gradient with respect to the pre-softmax logits.

    Uses the forward-backward posterior form: for each frame the gradient
    is softmax(logits) minus the label-occupancy posterior, so each row of
    the gradient sums to zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    _check_feasible(logits.shape[0], target, vocab)
    log_probs = log_softmax(logits, axis=1)
    ext = _extended_target(target, vocab)
    alpha = _forward_alphas(log_probs, ext)
    beta = _backward_betas(log_probs, ext)
    log_z = _total_log_prob(alpha)

    n_frames, n_classes = log_probs.shape
    ab = alpha + beta  # joint posterior per lattice state, log-space
    occupancy = np.zeros((n_frames, n_classes))
    with np.errstate(divide="ignore"):
        for k in np.unique(ext):
            cols = ab[:, ext == k]
            # clamp the max so all-(-inf) columns reduce to -inf without NaNs
            m = np.maximum(np.max(cols, axis=1), -1e300)
            total = m + np.log(np.sum(np.exp(cols - m[:, None]), axis=1))
            occupancy[:, k] = np.exp(total - log_z)
    grad = np.exp(log_probs) - occupancy
    return -log_z, grad


def ctc_grad(logits: np.ndarray, target: str, vocab: Vocabulary) -> np.ndarray:
    """Gradient of :func:`ctc_loss` with respect to each logit."""
    return ctc_loss_and_grad(logits, target, vocab)[1]


def collapse(path: list[int] | np.ndarray, vocab: Vocabulary) -> str:
    """Merge adjacent repeated indices, then delete blanks."""
    out = []
    prev = None
    for idx in path:
        idx = int(idx)
        if idx != prev and idx != vocab.blank_index:
            out.append(vocab.symbols[idx - 1])
        prev = idx
    return "".join(out)


def greedy_decode(logits: np.ndarray, vocab: Vocabulary) -> DecodeResult:
    """Best-path decode with a length-normalized confidence.

    Confidence is the geometric mean of the per-frame maximum posteriors,
    i.e. exp(mean over frames of the max log-softmax entry); it lies in
    (0, 1] and reaches 1 only in the limit of infinitely peaked logits.
    Argmax ties break toward the lowest index, so the blank wins ties.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    log_probs = log_softmax(logits, axis=1)
    frame_argmax = np.argmax(log_probs, axis=1)
    confidence = float(np.exp(np.mean(np.max(log_probs, axis=1))))
    return DecodeResult(collapse(frame_argmax, vocab), confidence, frame_argmax)
