# 📄 features.py
"""Audio loading and the MFCC-39 front end used for first-iteration targets."""
from pathlib import Path

import numpy as np
import soundfile as sf
from pydantic import BaseModel, ConfigDict, field_validator
from scipy.fft import dct

from errors import DataError
from formats import read_pmsw

PRE_EMPHASIS = 0.97
NUM_MEL_FILTERS = 26
NUM_CEPSTRA = 13
DELTA_WINDOW = 2
VARIANCE_FLOOR = 1e-8


class Waveform(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    samples: np.ndarray
    sample_rate: int = 16000

    @field_validator("samples", mode="before")
    @classmethod
    def _check_samples(cls, v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("waveform must be a nonempty 1-D array")
        return v

    @field_validator("sample_rate")
    @classmethod
    def _check_rate(cls, v):
        if v <= 0:
            raise ValueError("sample_rate must be positive")
        return v

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


class FeatureSequence(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    frames: np.ndarray
    frame_rate: float
    source: str = "mfcc"

    @field_validator("frames", mode="before")
    @classmethod
    def _check_frames(cls, v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("features must be a T×D matrix with T ≥ 1")
        if not np.all(np.isfinite(v)):
            raise ValueError("features contain non-finite values")
        return v

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


# --- Audio I/O ---

def load_waveform(path: Path) -> Waveform:
    """Read a single-channel WAV (16-bit or float) or a PMSW raw-float file."""
    path = Path(path)
    if path.suffix.lower() == ".pmsw":
        samples, rate = read_pmsw(path)
        return Waveform(samples=samples, sample_rate=rate)
    try:
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except RuntimeError as e:
        raise DataError(f"{path}: cannot read audio ({e})") from None
    if data.shape[1] != 1:
        raise DataError(f"{path}: expected mono audio, found {data.shape[1]} channels")
    if data.shape[0] == 0:
        raise DataError(f"{path}: empty audio")
    return Waveform(samples=data[:, 0], sample_rate=int(rate))


def save_waveform(path: Path, w: Waveform) -> None:
    sf.write(str(path), w.samples, w.sample_rate, subtype="PCM_16")


def normalize_waveform(w: Waveform) -> Waveform:
    """Zero-mean, unit-variance samples for the convolutional encoder."""
    x = w.samples - w.samples.mean()
    return Waveform(samples=x / np.sqrt(max(x.var(), VARIANCE_FLOOR)), sample_rate=w.sample_rate)


# --- MFCC ---

def frame_count(num_samples: int, window: int, hop: int) -> int:
    return 1 + (num_samples - window) // hop


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, nfft: int, num_filters: int = NUM_MEL_FILTERS) -> np.ndarray:
    """Triangular filters on rfft bins, spaced evenly on the mel scale from 0 to Nyquist."""
    mels = np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), num_filters + 2)
    bins = np.floor((nfft + 1) * _mel_to_hz(mels) / sample_rate).astype(int)
    bank = np.zeros((num_filters, nfft // 2 + 1))
    for m in range(1, num_filters + 1):
        left, centre, right = bins[m - 1], bins[m], bins[m + 1]
        for k in range(left, centre):
            bank[m - 1, k] = (k - left) / max(centre - left, 1)
        for k in range(centre, right):
            bank[m - 1, k] = (right - k) / max(right - centre, 1)
    return bank


def deltas(c: np.ndarray, width: int = DELTA_WINDOW) -> np.ndarray:
    """Regression deltas over ±width frames with edge replication."""
    padded = np.pad(c, ((width, width), (0, 0)), mode="edge")
    t = c.shape[0]
    num = sum(n * (padded[width + n:width + n + t] - padded[width - n:width - n + t])
              for n in range(1, width + 1))
    return num / (2.0 * sum(n * n for n in range(1, width + 1)))


def mfcc39(w: Waveform, window_ms: float = 25.0, hop_ms: float = 10.0) -> FeatureSequence:
    """13 cepstra (C0 as energy) plus deltas and delta-deltas per frame."""
    if window_ms < hop_ms:
        raise DataError(f"window_ms ({window_ms}) must be ≥ hop_ms ({hop_ms})")
    window = int(round(w.sample_rate * window_ms / 1000.0))
    hop = int(round(w.sample_rate * hop_ms / 1000.0))
    if hop < 1:
        raise DataError(f"hop of {hop_ms} ms is shorter than one sample at {w.sample_rate} Hz")
    if w.samples.size < window:
        raise DataError(f"waveform has {w.samples.size} samples, shorter than one {window}-sample window")

    x = np.append(w.samples[0], w.samples[1:] - PRE_EMPHASIS * w.samples[:-1])
    t = frame_count(x.size, window, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:t] * np.hamming(window)
    nfft = 1 << (window - 1).bit_length()
    power = np.abs(np.fft.rfft(frames, n=nfft)) ** 2 / nfft
    energies = power @ mel_filterbank(w.sample_rate, nfft).T
    log_energies = np.log(np.maximum(energies, np.finfo(np.float64).eps))
    cepstra = dct(log_energies, type=2, axis=1, norm="ortho")[:, :NUM_CEPSTRA]
    d1 = deltas(cepstra)
    d2 = deltas(d1)
    return FeatureSequence(frames=np.hstack([cepstra, d1, d2]), frame_rate=1000.0 / hop_ms, source="mfcc")


def utterance_normalize(f: FeatureSequence) -> FeatureSequence:
    """Per-dimension zero mean and unit (population) variance over the utterance."""
    if f.num_frames < 2:
        raise DataError("utterance_normalize needs at least 2 frames")
    centred = f.frames - f.frames.mean(axis=0)
    std = np.sqrt(np.maximum(centred.var(axis=0), VARIANCE_FLOOR))
    return FeatureSequence(frames=centred / std, frame_rate=f.frame_rate, source=f.source)
