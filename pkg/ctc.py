# 📄 ctc.py
"""CTC loss (log-space forward-backward), greedy and LM-fused prefix beam decoding."""
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import DecodeConfig
from errors import DataError, ShapeError
from numerics import Tensor, _node

BLANK = 0
NEG_INF = -np.inf


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def min_frames(labels: Sequence[int]) -> int:
    """Shortest T that admits the label sequence (one blank between each repeat)."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extend(labels: Sequence[int]) -> List[int]:
    ext = [BLANK]
    for c in labels:
        ext += [int(c), BLANK]
    return ext


def _forward_backward(logp: np.ndarray, ext: List[int]) -> Tuple[np.ndarray, np.ndarray, float]:
    T, S = logp.shape[0], len(ext)
    skip = np.array([s >= 2 and ext[s] != BLANK and ext[s] != ext[s - 2] for s in range(S)])
    emit = logp[:, ext]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    # beta[t, s]: log prob of frames t+1..T-1 given state s at frame t.
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        skip_from = np.zeros(S, dtype=bool)
        skip_from[:-2] = skip[2:]
        acc[:-2] = np.where(skip_from[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    tail = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    return alpha, beta, float(tail)


def ctc_log_likelihood(logits: np.ndarray, labels: Sequence[int]) -> float:
    """log Σ over all blank-augmented alignments of ``labels``."""
    logp = _log_softmax(np.asarray(logits, dtype=np.float64))
    if min_frames(labels) > logp.shape[0]:
        return float(NEG_INF)
    return _forward_backward(logp, _extend(labels))[2]


def ctc_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Negative log-likelihood of ``labels`` under per-frame softmax(logits); blank is index 0."""
    z = logits.data
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError("ctc_loss", z.shape)
    T, V1 = z.shape
    labels = [int(c) for c in labels]
    bad = [c for c in labels if not 1 <= c < V1]
    if bad:
        raise DataError(f"ctc_loss: labels {bad[:5]} outside [1, {V1 - 1}]")
    need = min_frames(labels)
    if need > T:
        raise DataError(f"ctc_loss: {len(labels)} labels need at least T={need} frames, got {T}")
    logp = _log_softmax(z)
    ext = _extend(labels)
    alpha, beta, log_z = _forward_backward(logp, ext)

    def backward(g):
        occupancy = np.zeros_like(z)
        post = np.exp(alpha + beta - log_z)
        for s, c in enumerate(ext):
            occupancy[:, c] += post[:, s]
        return (g * (np.exp(logp) - occupancy),)

    return _node(np.asarray(-log_z), "ctc_loss", (logits,), backward)


def greedy_decode(logits: np.ndarray) -> List[int]:
    """Frame argmax (lowest index on ties), collapse repeats, drop blanks."""
    best = np.argmax(np.asarray(logits), axis=1)
    out, prev = [], None
    for c in best:
        c = int(c)
        if c != prev and c != BLANK:
            out.append(c)
        prev = c
    return out


def beam_decode(logits: np.ndarray, cfg: DecodeConfig, lm=None,
                vocab: Optional[Sequence[str]] = None) -> Tuple[List[int], float]:
    """CTC prefix beam search scoring log p_CTC + w1·log p_LM + w2·|y|.

    ``vocab[i-1]`` names symbol i for the language model. Ties are broken by
    the lexicographically smallest prefix.
    """
    logp = _log_softmax(np.asarray(logits, dtype=np.float64))
    T, V1 = logp.shape
    w1, w2 = cfg.lm_weight, cfg.insertion_bonus
    use_lm = lm is not None and w1 != 0.0
    if use_lm and vocab is None:
        raise DataError("beam_decode: an LM needs the symbol vocabulary")
    fusion: Dict[Tuple[int, ...], float] = {(): 0.0}

    def fused(prefix: Tuple[int, ...]) -> float:
        if prefix not in fusion:
            step = w2
            if use_lm:
                history = [vocab[c - 1] for c in prefix[:-1]]
                step += w1 * lm.log_prob(history, vocab[prefix[-1] - 1])
            fusion[prefix] = fused(prefix[:-1]) + step
        return fusion[prefix]

    beams: Dict[Tuple[int, ...], Tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(T):
        nxt: Dict[Tuple[int, ...], List[float]] = {}

        def bump(prefix, which, value):
            cell = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            cell[which] = np.logaddexp(cell[which], value)

        for prefix, (pb, pnb) in beams.items():
            both = np.logaddexp(pb, pnb)
            bump(prefix, 0, both + logp[t, BLANK])
            for c in range(1, V1):
                p = logp[t, c]
                extended = prefix + (c,)
                if prefix and prefix[-1] == c:
                    bump(extended, 1, pb + p)
                    bump(prefix, 1, pnb + p)
                else:
                    bump(extended, 1, both + p)
        ranked = sorted(nxt.items(), key=lambda kv: (-(np.logaddexp(*kv[1]) + fused(kv[0])), kv[0]))
        beams = {prefix: (cell[0], cell[1]) for prefix, cell in ranked[:cfg.beam]}

    def final(prefix, cell):
        score = np.logaddexp(*cell) + fused(prefix)
        if use_lm:
            score += w1 * lm.log_prob([vocab[c - 1] for c in prefix], lm.end_token)
        return score

    best = min(beams.items(), key=lambda kv: (-final(*kv), kv[0]))
    return list(best[0]), float(final(*best))
