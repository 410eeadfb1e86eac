# 📄 lm.py
"""Absolute-discounting back-off n-gram model with an ARPA text codec."""
import math
from collections import Counter, defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

from errors import DataError

START = "<s>"
END = "</s>"
DISCOUNT = 0.5
ARPA_FLOOR = -99.0
LOG10_E = math.log10(math.e)

Gram = Tuple[str, ...]


class NgramLM:
    """P(w | h) with natural-log scores; unseen contexts back off with weight 1."""

    end_token = END

    def __init__(self, order: int, logprobs: Dict[Gram, float], backoffs: Dict[Gram, float]):
        if order < 1:
            raise DataError(f"n-gram order must be ≥ 1, got {order}")
        self.order = order
        self.logprobs = logprobs
        self.backoffs = backoffs
        self.vocab = sorted(g[0] for g in logprobs if len(g) == 1 and g[0] != START)
        if not self.vocab:
            raise DataError("language model has an empty vocabulary")

    @classmethod
    def train(cls, sentences: Iterable[Sequence[str]], order: int = 3, discount: float = DISCOUNT) -> "NgramLM":
        if not 0 < discount < 1:
            raise DataError(f"discount {discount} outside (0, 1)")
        counts: Dict[int, Counter] = {n: Counter() for n in range(1, order + 1)}
        for sent in sentences:
            tokens = [START] + [str(t) for t in sent] + [END]
            for n in range(1, order + 1):
                for i in range(1, len(tokens)):
                    if i - n + 1 < 0:
                        continue
                    counts[n][tuple(tokens[i - n + 1:i + 1])] += 1
        if not counts[1]:
            raise DataError("cannot train a language model on no sentences")

        unigrams = counts[1]
        total = sum(unigrams.values())
        V = len(unigrams)
        leftover = discount * V / total
        logprobs: Dict[Gram, float] = {(START,): ARPA_FLOOR / LOG10_E}
        for (w,), c in unigrams.items():
            logprobs[(w,)] = math.log((c - discount) / total + leftover / V)
        backoffs: Dict[Gram, float] = {}

        for n in range(2, order + 1):
            by_context: Dict[Gram, Dict[str, int]] = defaultdict(dict)
            for gram, c in counts[n].items():
                by_context[gram[:-1]][gram[-1]] = c
            for context, followers in by_context.items():
                c_h = sum(followers.values())
                for w, c in followers.items():
                    logprobs[context + (w,)] = math.log((c - discount) / c_h)
        model = cls(order, logprobs, backoffs)
        for n in range(1, order):
            for gram in [g for g in logprobs if len(g) == n]:
                model._fit_backoff(gram)
        return model

    def _fit_backoff(self, context: Gram) -> None:
        seen = [g[-1] for g in self.logprobs if len(g) == len(context) + 1 and g[:-1] == context]
        if not seen:
            return
        kept = sum(math.exp(self.logprobs[context + (w,)]) for w in seen)
        lower = sum(math.exp(self.log_prob(list(context[1:]), w, bounded=False)) for w in seen)
        if 1.0 - lower <= 1e-12 or 1.0 - kept <= 0:
            self.backoffs[context] = ARPA_FLOOR / LOG10_E
        else:
            self.backoffs[context] = math.log((1.0 - kept) / (1.0 - lower))

    def log_prob(self, history: Sequence[str], token: str, bounded: bool = True) -> float:
        """Natural-log P(token | history); the history is implicitly prefixed with <s>."""
        context: Gram = tuple([START] + list(history)) if bounded else tuple(history)
        context = context[max(0, len(context) - (self.order - 1)):] if self.order > 1 else ()
        penalty = 0.0
        while context:
            gram = context + (token,)
            if gram in self.logprobs:
                return penalty + self.logprobs[gram]
            penalty += self.backoffs.get(context, 0.0)
            context = context[1:]
        if (token,) in self.logprobs and token != START:
            return penalty + self.logprobs[(token,)]
        return penalty + math.log(1.0 / len(self.vocab))

    def sentence_log_prob(self, tokens: Sequence[str]) -> float:
        tokens = list(tokens)
        score = sum(self.log_prob(tokens[:i], t) for i, t in enumerate(tokens))
        return score + self.log_prob(tokens, END)


def write_arpa(path: Path, lm: NgramLM) -> None:
    by_order: Dict[int, List[Gram]] = defaultdict(list)
    for gram in lm.logprobs:
        by_order[len(gram)].append(gram)
    lines = ["\\data\\"]
    lines += [f"ngram {n}={len(by_order[n])}" for n in range(1, lm.order + 1)]
    for n in range(1, lm.order + 1):
        lines += ["", f"\\{n}-grams:"]
        for gram in sorted(by_order[n]):
            row = f"{lm.logprobs[gram] * LOG10_E:.7f}\t{' '.join(gram)}"
            if gram in lm.backoffs:
                row += f"\t{lm.backoffs[gram] * LOG10_E:.7f}"
            lines.append(row)
    lines += ["", "\\end\\", ""]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def read_arpa(path: Path) -> NgramLM:
    logprobs: Dict[Gram, float] = {}
    backoffs: Dict[Gram, float] = {}
    order, section = 0, None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line == "\\data\\" or line == "\\end\\":
            continue
        if line.startswith("ngram "):
            order = max(order, int(line[6:].split("=")[0]))
            continue
        if line.startswith("\\") and line.endswith("-grams:"):
            section = int(line[1:line.index("-")])
            continue
        if section is None:
            raise DataError(f"{path}:{lineno}: entry outside an n-gram section")
        fields = line.split("\t") if "\t" in line else line.split()
        if "\t" in line:
            gram = tuple(fields[1].split())
            extra = fields[2:]
        else:
            gram, extra = tuple(fields[1:1 + section]), fields[1 + section:]
        if len(gram) != section:
            raise DataError(f"{path}:{lineno}: expected a {section}-gram, got {len(gram)} tokens")
        logprobs[gram] = float(fields[0]) / LOG10_E
        if extra:
            backoffs[gram] = float(extra[0]) / LOG10_E
    if order == 0:
        raise DataError(f"{path}: missing \\data\\ header")
    return NgramLM(order, logprobs, backoffs)
