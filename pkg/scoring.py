# 📄 scoring.py
"""Edit-distance error rates and cluster/phone agreement measures."""
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from errors import DataError


class ErrorCounts(BaseModel):
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_length: int = 0
    # None when the reference is empty and the hypothesis is not.
    rate: Optional[float] = None

    @property
    def edits(self) -> int:
        return self.substitutions + self.insertions + self.deletions


class TargetQuality(BaseModel):
    codebook_size: int
    frames: int
    cluster_purity: float
    phone_purity: float
    pnmi: float


def edit_counts(hyp: Sequence, ref: Sequence) -> ErrorCounts:
    """Unit-cost Levenshtein alignment, backtraced into S/I/D counts."""
    H, R = len(hyp), len(ref)
    d = np.zeros((R + 1, H + 1), dtype=np.int64)
    d[:, 0] = np.arange(R + 1)
    d[0, :] = np.arange(H + 1)
    for i in range(1, R + 1):
        for j in range(1, H + 1):
            sub = d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    S = I = D = 0
    i, j = R, H
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            S += int(ref[i - 1] != hyp[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            D += 1
            i -= 1
        else:
            I += 1
            j -= 1
    rate = (S + I + D) / R if R else (0.0 if H == 0 else None)
    return ErrorCounts(substitutions=S, insertions=I, deletions=D, ref_length=R, rate=rate)


def word_error_rate(hyp: Sequence[str], ref: Sequence[str]) -> ErrorCounts:
    """Token lists, or whitespace-separated strings."""
    hyp = hyp.split() if isinstance(hyp, str) else list(hyp)
    ref = ref.split() if isinstance(ref, str) else list(ref)
    return edit_counts(hyp, ref)


def character_error_rate(hyp: str, ref: str) -> ErrorCounts:
    return edit_counts(list(hyp), list(ref))


def corpus_error_rate(pairs: Iterable[Tuple[str, str]], unit: str = "word") -> ErrorCounts:
    """Sum of edits over sum of reference lengths for (hypothesis, reference) pairs."""
    score = word_error_rate if unit == "word" else character_error_rate
    out = ErrorCounts()
    for hyp, ref in pairs:
        c = score(hyp, ref)
        out.substitutions += c.substitutions
        out.insertions += c.insertions
        out.deletions += c.deletions
        out.ref_length += c.ref_length
    out.rate = out.edits / out.ref_length if out.ref_length else (0.0 if out.edits == 0 else None)
    return out


def target_quality(labels: Mapping[str, np.ndarray], phones: Mapping[str, Sequence[str]],
                   codebook_size: int) -> TargetQuality:
    """Joint cluster/phone statistics over frames present in both mappings."""
    z_all: List[np.ndarray] = []
    y_all: List[str] = []
    for utt in sorted(set(labels) & set(phones)):
        n = min(len(labels[utt]), len(phones[utt]))
        z_all.append(np.asarray(labels[utt][:n], dtype=np.int64))
        y_all.extend(phones[utt][:n])
    if not y_all:
        raise DataError("target_quality: no overlapping frames between labels and phone alignments")
    z = np.concatenate(z_all)
    inventory = sorted(set(y_all))
    index: Dict[str, int] = {p: i for i, p in enumerate(inventory)}
    y = np.array([index[p] for p in y_all])
    joint = np.zeros((len(inventory), codebook_size))
    np.add.at(joint, (y, z), 1.0)
    joint /= joint.sum()
    p_y, p_z = joint.sum(axis=1), joint.sum(axis=0)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / np.outer(p_y, p_z)[nz])).sum())
    h_y = float(-(p_y[p_y > 0] * np.log(p_y[p_y > 0])).sum())
    return TargetQuality(codebook_size=codebook_size, frames=int(z.size),
                         cluster_purity=float(joint.max(axis=1).sum()),
                         phone_purity=float(joint.max(axis=0).sum()),
                         pnmi=mi / h_y if h_y > 0 else 0.0)
