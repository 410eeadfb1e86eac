# 📄 formats.py
"""Binary and text codecs: PMSW audio, PMSF matrices, label and transcript files."""
import struct
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from errors import DataError

PMSW_MAGIC = b"PMSW"
PMSF_MAGIC = b"PMSF"

# --- PMSF source tags ---
TAG_MFCC = 0
TAG_CODEBOOK = 254
TAG_PARAM = 255
MAX_LAYER_TAG = 250


def source_to_tag(source: str) -> int:
    if source == "mfcc":
        return TAG_MFCC
    if source == "codebook":
        return TAG_CODEBOOK
    if source == "param":
        return TAG_PARAM
    if source.startswith("encoder-layer-"):
        layer = int(source.rsplit("-", 1)[1])
        if 1 <= layer <= MAX_LAYER_TAG:
            return layer
    raise DataError(f"Unknown feature source '{source}'")


def tag_to_source(tag: int) -> str:
    if tag == TAG_MFCC:
        return "mfcc"
    if tag == TAG_CODEBOOK:
        return "codebook"
    if tag == TAG_PARAM:
        return "param"
    if 1 <= tag <= MAX_LAYER_TAG:
        return f"encoder-layer-{tag}"
    raise DataError(f"Unknown PMSF source tag {tag}")


# --- PMSW raw-float audio ---

def write_pmsw(path: Path, samples: np.ndarray, sample_rate: int) -> None:
    data = np.asarray(samples, dtype="<f4")
    with open(path, "wb") as f:
        f.write(PMSW_MAGIC + struct.pack("<II", sample_rate, data.size))
        f.write(data.tobytes())


def read_pmsw(path: Path) -> Tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != PMSW_MAGIC:
        raise DataError(f"{path}: not a PMSW file")
    sample_rate, count = struct.unpack("<II", raw[4:12])
    body = np.frombuffer(raw[12:], dtype="<f4")
    if body.size != count:
        raise DataError(f"{path}: header says {count} samples, found {body.size}")
    return body.astype(np.float64), sample_rate


# --- PMSF matrices ---

def encode_pmsf(matrix: np.ndarray, source: str) -> bytes:
    m = np.asarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise DataError(f"PMSF needs a 2-D matrix, got shape {m.shape}")
    rows, cols = m.shape
    return PMSF_MAGIC + struct.pack("<IIB", rows, cols, source_to_tag(source)) + m.tobytes()


def decode_pmsf(raw: bytes, offset: int = 0) -> Tuple[np.ndarray, str, int]:
    """Decode one PMSF block; returns (matrix, source, next offset)."""
    head = raw[offset:offset + 13]
    if len(head) < 13 or head[:4] != PMSF_MAGIC:
        raise DataError("not a PMSF block")
    rows, cols, tag = struct.unpack("<IIB", head[4:13])
    start = offset + 13
    end = start + rows * cols * 8
    if end > len(raw):
        raise DataError(f"PMSF block truncated: need {rows}x{cols} doubles")
    matrix = np.frombuffer(raw[start:end], dtype="<f8").reshape(rows, cols).astype(np.float64)
    return matrix, tag_to_source(tag), end


def write_pmsf(path: Path, matrix: np.ndarray, source: str) -> None:
    Path(path).write_bytes(encode_pmsf(matrix, source))


def read_pmsf(path: Path) -> Tuple[np.ndarray, str]:
    raw = Path(path).read_bytes()
    try:
        matrix, source, end = decode_pmsf(raw)
    except DataError as e:
        raise DataError(f"{path}: {e.detail}") from None
    if end != len(raw):
        raise DataError(f"{path}: trailing bytes after PMSF block")
    return matrix, source


# --- Label files ---

def write_labels(path: Path, utt_ids: Sequence[str], labels: Sequence[np.ndarray], k: int, source: str) -> None:
    path = Path(path)
    lines = [f"k={k} layer={source}"]
    lines += [" ".join(str(int(x)) for x in seq) for seq in labels]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    path.with_suffix(".ids").write_text("\n".join(utt_ids) + "\n", encoding="utf-8")


def read_labels(path: Path) -> Tuple[Dict[str, np.ndarray], int, str]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("k="):
        raise DataError(f"{path}: missing 'k=<size> layer=<source>' header")
    try:
        fields = dict(part.split("=", 1) for part in lines[0].split())
        k, source = int(fields["k"]), fields["layer"]
    except (ValueError, KeyError):
        raise DataError(f"{path}: malformed header '{lines[0]}'") from None
    ids = path.with_suffix(".ids").read_text(encoding="utf-8").split()
    body = lines[1:]
    if len(ids) != len(body):
        raise DataError(f"{path}: {len(body)} label lines but {len(ids)} utterance ids")
    out = {}
    for utt, line in zip(ids, body):
        seq = np.array([int(x) for x in line.split()], dtype=np.int64)
        if seq.size and (seq.min() < 0 or seq.max() >= k):
            raise DataError(f"{path}: utterance {utt} has labels outside [0, {k})")
        out[utt] = seq
    return out, k, source


# --- Transcript / hypothesis files ---

def write_text_table(path: Path, rows: Dict[str, str]) -> None:
    text = "".join(f"{utt}\t{rows[utt]}\n" for utt in sorted(rows))
    Path(path).write_text(text, encoding="utf-8")


def read_text_table(path: Path) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"{path}:{n}: expected 'utt_id<TAB>text'")
        utt, text = line.split("\t", 1)
        out[utt] = text
    return out


def read_alignments(path: Path) -> Dict[str, List[Tuple[str, int, int]]]:
    """Sample-level symbol alignments: 'utt_id<TAB>sym:start:end sym:start:end ...'."""
    out = {}
    for utt, text in read_text_table(path).items():
        segs = []
        for item in text.split():
            sym, start, end = item.rsplit(":", 2)
            segs.append((sym, int(start), int(end)))
        out[utt] = segs
    return out
