# 📄 toy_corpus.py
"""Synthetic chord-per-symbol corpus with known transcripts and sample alignments."""
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel

from events import log_event
from features import Waveform, save_waveform
from formats import write_text_table

SAMPLE_RATE = 16000
ALPHABET = "abcd"
# Two partials per symbol (Hz).
CHORDS: Dict[str, Tuple[float, float]] = {
    "a": (300.0, 900.0),
    "b": (500.0, 1500.0),
    "c": (700.0, 2300.0),
    "d": (1100.0, 3100.0),
}
SILENCE = "sil"
BOUNDARY = "|"
AMPLITUDE = 0.3
NOISE = 0.01
FADE = 80


class ToyCorpus(BaseModel):
    root: str
    unlabeled_dir: str
    labeled_dir: str
    dev_dir: str
    alphabet: str = ALPHABET


def _chord(sym: str, n: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    f1, f2 = CHORDS[sym]
    phase = rng.uniform(0, 2 * np.pi, size=2)
    tone = 0.6 * np.sin(2 * np.pi * f1 * t + phase[0]) + 0.4 * np.sin(2 * np.pi * f2 * t + phase[1])
    env = np.ones(n)
    ramp = min(FADE, n // 2)
    env[:ramp] = np.linspace(0.0, 1.0, ramp)
    env[n - ramp:] = np.linspace(1.0, 0.0, ramp)
    return AMPLITUDE * tone * env


def random_text(rng: np.random.Generator) -> str:
    words = int(rng.integers(1, 3))
    return " ".join("".join(rng.choice(list(ALPHABET), size=int(rng.integers(1, 4))))
                    for _ in range(words))


def synthesize(text: str, rng: np.random.Generator) -> Tuple[np.ndarray, List[Tuple[str, int, int]]]:
    """Render a transcript; returns samples and (symbol, start, end) sample segments."""
    pieces, segs, cursor = [], [], 0

    def emit(sym: str, samples: np.ndarray):
        nonlocal cursor
        pieces.append(samples)
        segs.append((sym, cursor, cursor + samples.size))
        cursor += samples.size

    emit(SILENCE, np.zeros(int(rng.integers(640, 1280))))
    for ch in text:
        if ch == " ":
            emit(BOUNDARY, np.zeros(int(rng.integers(960, 1440))))
        else:
            emit(ch, _chord(ch, int(rng.integers(1280, 2240)), rng))
    emit(SILENCE, np.zeros(int(rng.integers(640, 1280))))
    samples = np.concatenate(pieces)
    samples = samples + rng.normal(0.0, NOISE, size=samples.size)
    return np.clip(samples, -1.0, 1.0), segs


def _write_split(directory: Path, prefix: str, count: int, rng: np.random.Generator) -> Dict[str, str]:
    directory.mkdir(parents=True, exist_ok=True)
    texts, aligns = {}, {}
    for i in range(count):
        utt = f"{prefix}-{i:04d}"
        text = random_text(rng)
        samples, segs = synthesize(text, rng)
        save_waveform(directory / f"{utt}.wav", Waveform(samples=samples, sample_rate=SAMPLE_RATE))
        texts[utt] = text
        aligns[utt] = " ".join(f"{s}:{a}:{b}" for s, a, b in segs)
    write_text_table(directory / "transcripts.txt", texts)
    write_text_table(directory / "alignments.txt", aligns)
    return texts


def generate_toy_corpus(out_dir: Path, n_unlabeled: int = 50, n_labeled: int = 10, n_dev: int = 5,
                        seed: int = 0) -> ToyCorpus:
    """Write unlabeled/, labeled/ and dev/ splits of 16-bit mono WAVs; deterministic given seed."""
    root = Path(out_dir)
    splits = {"unlabeled": ("unl", n_unlabeled), "labeled": ("lab", n_labeled), "dev": ("dev", n_dev)}
    for i, (name, (prefix, count)) in enumerate(splits.items()):
        _write_split(root / name, prefix, count, np.random.default_rng([seed, i]))
    log_event("toy-corpus", "INFO", f"Wrote {n_unlabeled}/{n_labeled}/{n_dev} utterances under {root}.",
              {"seed": seed, "alphabet": ALPHABET})
    return ToyCorpus(root=str(root), unlabeled_dir=str(root / "unlabeled"), labeled_dir=str(root / "labeled"),
                     dev_dir=str(root / "dev"))


def frame_phones(segments: List[Tuple[str, int, int]], hop: int, num_frames: int) -> List[str]:
    """Symbol covering the centre sample of each frame (last segment for overhang)."""
    out = []
    for t in range(num_frames):
        centre = t * hop + hop // 2
        label = segments[-1][0]
        for sym, start, end in segments:
            if start <= centre < end:
                label = sym
                break
        out.append(label)
    return out
