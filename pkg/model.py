# 📄 model.py
"""The network: conv waveform encoder, multi-scale transformer, codeword heads.

Parameters live in a flat ``name -> ndarray`` dict. Every forward pass binds
them to fresh leaf tensors, so independent batch elements never share a tape.
"""
import json
import math
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

import numerics as nx
from config import ModelConfig
from errors import DataError, ShapeError
from features import Waveform
from formats import decode_pmsf, encode_pmsf
from numerics import Tensor

CHECKPOINT_MAGIC = b"PMSC"
CHECKPOINT_VERSION = 1


class AttentionMaskPlan(BaseModel):
    """Per layer, an H×T×T boolean matrix of allowed key positions (None = all global)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    T: int
    layers: List[Optional[np.ndarray]]


class EncoderOutputs(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    inputs: Tensor
    layers: List[Tensor]

    def layer(self, l: int) -> Tensor:
        """Hidden states O^l for 1-based layer index l."""
        return self.layers[l - 1]

    @property
    def top(self) -> Tensor:
        return self.layers[-1] if self.layers else self.inputs


# --- Shapes and initialization ---

def parameter_shapes(cfg: ModelConfig, heads: str = "codebook", vocab_size: int = 0) -> Dict[str, Tuple[int, ...]]:
    """Every parameter name with its shape, in initialization order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    c_in = 1
    for i, layer in enumerate(cfg.conv_spec):
        shapes[f"conv.{i}.w"] = (layer.channels, c_in, layer.kernel)
        if cfg.conv_bias:
            shapes[f"conv.{i}.b"] = (layer.channels,)
        c_in = layer.channels
    D = cfg.model_dim
    shapes.update({"feat.ln.g": (c_in,), "feat.ln.b": (c_in,), "feat.proj.w": (c_in, D), "feat.proj.b": (D,),
                   "mask_emb": (D,)})
    F = D * cfg.ffn_mult
    for l in range(1, cfg.num_layers + 1):
        p = f"block.{l}."
        shapes.update({p + "ln1.g": (D,), p + "ln1.b": (D,)})
        for name in ("q", "k", "v", "o"):
            shapes[p + f"attn.w{name}"] = (D, D)
            shapes[p + f"attn.b{name}"] = (D,)
        shapes.update({p + "ln2.g": (D,), p + "ln2.b": (D,), p + "ffn.w1": (D, F), p + "ffn.b1": (F,),
                       p + "ffn.w2": (F, D), p + "ffn.b2": (D,)})
    if heads == "codebook":
        for l, size in zip(cfg.supervised_layers, cfg.codebook_sizes):
            shapes[f"head.{l}.proj"] = (D, cfg.codeword_dim)
            shapes[f"head.{l}.emb"] = (size, cfg.codeword_dim)
    elif heads == "ctc":
        shapes["ctc.w"] = (D, vocab_size + 1)
        shapes["ctc.b"] = (vocab_size + 1,)
    else:
        raise DataError(f"unknown head kind '{heads}'")
    return shapes


def _init_value(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "g":
        return np.ones(shape)
    if leaf.startswith("b") or leaf == "b":
        return np.zeros(shape)
    if name == "mask_emb":
        return rng.uniform(-1.0, 1.0, size=shape)
    if leaf == "emb":
        return rng.normal(0.0, 1.0, size=shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 3 else shape[0]
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def init_params(cfg: ModelConfig, seed: int, heads: str = "codebook", vocab_size: int = 0) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {name: _init_value(name, shape, rng)
            for name, shape in parameter_shapes(cfg, heads, vocab_size).items()}


def init_ctc_head(cfg: ModelConfig, vocab_size: int, seed: int) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    D = cfg.model_dim
    return {"ctc.w": rng.normal(0.0, 1.0 / math.sqrt(D), size=(D, vocab_size + 1)),
            "ctc.b": np.zeros(vocab_size + 1)}


# --- Waveform encoder ---

def min_samples(cfg: ModelConfig) -> int:
    """Shortest waveform that yields one frame under the conv strides."""
    need = 1
    for layer in reversed(cfg.conv_spec):
        need = (need - 1) * layer.stride + layer.kernel
    return need


def num_frames(cfg: ModelConfig, num_samples: int) -> int:
    n = num_samples
    for layer in cfg.conv_spec:
        if n < layer.kernel:
            return 0
        n = 1 + (n - layer.kernel) // layer.stride
    return n


def conv_encode(samples: Tensor, P: Dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Stacked strided 1-D convolutions over an N×1 waveform, giving T×C frames."""
    if samples.shape[0] < min_samples(cfg):
        raise DataError(f"waveform has {samples.shape[0]} samples; at least {min_samples(cfg)} are required")
    act = nx.NONLINEARITIES[cfg.nonlinearity]
    x = samples
    for i, layer in enumerate(cfg.conv_spec):
        x = act(nx.conv1d(x, P[f"conv.{i}.w"], P.get(f"conv.{i}.b"), layer.stride))
    return x


def project_features(conv_out: Tensor, P: Dict[str, Tensor]) -> Tensor:
    x = nx.layer_norm(conv_out, P["feat.ln.g"], P["feat.ln.b"])
    return x @ P["feat.proj.w"] + P["feat.proj.b"]


def apply_mask(frames: Tensor, masked: Sequence[int], mask_embedding: Tensor) -> Tensor:
    """Replace the rows listed in ``masked`` by the learned mask embedding."""
    T = frames.shape[0]
    bad = [int(i) for i in masked if not 0 <= int(i) < T]
    if bad:
        raise DataError(f"mask indices {bad[:5]} outside [0, {T})")
    if len(masked) == 0:
        return frames
    return nx.replace_rows(frames, masked, mask_embedding)


def positional_encoding(T: int, D: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, D, 2) / D))
    pe = np.zeros((T, D))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: D // 2])
    return pe


# --- Multi-scale attention ---

def window_mask(T: int, w: Optional[int], kind: str) -> np.ndarray:
    """Allowed-position matrix for a 'history', 'future' or 'global' head."""
    if kind == "global" or w is None:
        return np.ones((T, T), dtype=bool)
    offset = np.arange(T)[None, :] - np.arange(T)[:, None]
    if kind == "history":
        return (offset <= 0) & (offset >= -w)
    if kind == "future":
        return (offset >= 0) & (offset <= w)
    raise ValueError(f"unknown head kind '{kind}'")


def build_attention_masks(T: int, cfg: ModelConfig) -> AttentionMaskPlan:
    if T < 1:
        raise DataError("build_attention_masks needs T ≥ 1")
    layers: List[Optional[np.ndarray]] = []
    for l in range(cfg.num_layers):
        if not cfg.window_schedule or cfg.restricted_heads is None:
            layers.append(None)
            continue
        w = cfg.window_schedule[l]
        hist, fut = cfg.restricted_heads
        plan = np.ones((cfg.num_heads, T, T), dtype=bool)
        plan[hist] = window_mask(T, w, "history")
        plan[fut] = window_mask(T, w, "future")
        layers.append(plan)
    return AttentionMaskPlan(T=T, layers=layers)


def head_outputs(X: Tensor, P: Dict[str, Tensor], prefix: str, num_heads: int,
                 allowed: Optional[np.ndarray]) -> List[Tensor]:
    """Per-head softmax(Q Kᵀ/√d, masked) V for one layer."""
    T, D = X.shape
    if allowed is not None and allowed.shape != (num_heads, T, T):
        raise ShapeError("multi_scale_attention", allowed.shape, (num_heads, T, T))
    d = D // num_heads
    Q = X @ P[prefix + "wq"] + P[prefix + "bq"]
    K = X @ P[prefix + "wk"] + P[prefix + "bk"]
    V = X @ P[prefix + "wv"] + P[prefix + "bv"]
    heads = []
    for i in range(num_heads):
        q = nx.take_cols(Q, i * d, (i + 1) * d)
        k = nx.take_cols(K, i * d, (i + 1) * d)
        v = nx.take_cols(V, i * d, (i + 1) * d)
        scores = nx.scale(q @ k.T, 1.0 / math.sqrt(d))
        weights = nx.softmax(scores, None if allowed is None else allowed[i])
        heads.append(weights @ v)
    return heads


def multi_scale_attention(X: Tensor, P: Dict[str, Tensor], prefix: str, num_heads: int,
                          allowed: Optional[np.ndarray]) -> Tensor:
    heads = head_outputs(X, P, prefix, num_heads, allowed)
    return nx.concat(heads) @ P[prefix + "wo"] + P[prefix + "bo"]


def _dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rng is None or rate <= 0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return nx.mul(x, Tensor(keep))


def encoder_forward(X: Tensor, P: Dict[str, Tensor], cfg: ModelConfig, plan: AttentionMaskPlan,
                    num_layers: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> EncoderOutputs:
    """Pre-norm transformer blocks; every layer's output is kept."""
    if X.data.ndim != 2 or X.shape[1] != cfg.model_dim:
        raise ShapeError("encoder_forward", X.shape, ("T", cfg.model_dim))
    if plan.T != X.shape[0]:
        raise ShapeError("encoder_forward", (plan.T,), (X.shape[0],))
    act = nx.NONLINEARITIES[cfg.nonlinearity]
    depth = cfg.num_layers if num_layers is None else num_layers
    outputs = []
    h = X
    for l in range(1, depth + 1):
        p = f"block.{l}."
        a = multi_scale_attention(nx.layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"]), P, p + "attn.",
                                  cfg.num_heads, plan.layers[l - 1])
        h = h + _dropout(a, cfg.dropout, rng)
        f = nx.layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
        f = act(f @ P[p + "ffn.w1"] + P[p + "ffn.b1"]) @ P[p + "ffn.w2"] + P[p + "ffn.b2"]
        h = h + _dropout(f, cfg.dropout, rng)
        outputs.append(h)
    return EncoderOutputs(inputs=X, layers=outputs)


# --- Codeword heads ---

def codeword_logits(O: Tensor, P: Dict[str, Tensor], layer: int, temperature: float) -> Tensor:
    """sim(A^l o_t, e^l_c)/τ for every frame t and codeword c."""
    if temperature <= 0:
        raise DataError("temperature must be positive")
    projected = O @ P[f"head.{layer}.proj"]
    return nx.scale(nx.cosine_sim(projected, P[f"head.{layer}.emb"]), 1.0 / temperature)


def codeword_distribution(o_t: np.ndarray, projection: np.ndarray, embeddings: np.ndarray,
                          temperature: float) -> np.ndarray:
    """Probability over the C^l codewords for a single hidden vector."""
    if temperature <= 0:
        raise DataError("temperature must be positive")
    sims = nx.cosine_sim(Tensor(np.asarray(o_t) @ projection), Tensor(embeddings))
    return nx.softmax(nx.scale(sims, 1.0 / temperature)).data


# --- Model wrapper ---

class ForwardResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    frames: Tensor
    encoder: EncoderOutputs
    leaves: Dict[str, Tensor]


class PmsModel:
    """Configuration plus parameters; heads are either codebook heads or a CTC head."""

    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray], heads: str = "codebook",
                 vocab: Optional[List[str]] = None):
        self.config = config
        self.heads = heads
        self.vocab = list(vocab) if vocab is not None else None
        expected = parameter_shapes(config, heads, len(self.vocab or []))
        actual = {k: tuple(v.shape) for k, v in params.items()}
        if actual != expected:
            missing = sorted(set(expected) - set(actual))
            extra = sorted(set(actual) - set(expected))
            wrong = sorted(k for k in set(expected) & set(actual) if expected[k] != actual[k])
            raise DataError(f"parameters disagree with config: missing={missing[:5]} extra={extra[:5]} "
                            f"wrong-shape={wrong[:5]}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    @classmethod
    def create(cls, config: ModelConfig, seed: int) -> "PmsModel":
        return cls(config, init_params(config, seed))

    def with_ctc_head(self, vocab: List[str], seed: int) -> "PmsModel":
        """Drop the codebook heads and attach a freshly initialized CTC head."""
        body = {k: v.copy() for k, v in self.params.items() if not k.startswith("head.")}
        body.update(init_ctc_head(self.config, len(vocab), seed))
        return PmsModel(self.config, body, heads="ctc", vocab=vocab)

    def bind(self, trainable: Optional[Sequence[str]] = None) -> Dict[str, Tensor]:
        return nx.bind(self.params, trainable)

    def embed(self, w: Waveform, P: Dict[str, Tensor]) -> Tensor:
        samples = Tensor(w.samples[:, None])
        return project_features(conv_encode(samples, P, self.config), P)

    def forward(self, w: Waveform, P: Optional[Dict[str, Tensor]] = None, masked: Sequence[int] = (),
                num_layers: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> ForwardResult:
        P = P if P is not None else nx.bind(self.params, trainable=())
        frames = self.embed(w, P)
        corrupted = apply_mask(frames, masked, P["mask_emb"])
        T = frames.shape[0]
        x = corrupted + Tensor(positional_encoding(T, self.config.model_dim))
        plan = build_attention_masks(T, self.config)
        encoder = encoder_forward(x, P, self.config, plan, num_layers=num_layers, rng=rng)
        return ForwardResult(frames=frames, encoder=encoder, leaves=P)

    def extract(self, w: Waveform, layer: int) -> np.ndarray:
        """Uncorrupted O^layer (no masking, no gradients)."""
        if not 1 <= layer <= self.config.num_layers:
            raise DataError(f"layer {layer} outside [1, {self.config.num_layers}]")
        return self.forward(w, num_layers=layer).encoder.layer(layer).data.copy()


# --- Checkpoints ---

def save_checkpoint(path: Path, model: PmsModel, extra: Optional[dict] = None) -> None:
    header = {"model": model.config.model_dump(mode="json"), "heads": model.heads, "vocab": model.vocab,
              "extra": extra or {}}
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(text)), text,
              struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        value = model.params[name]
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape))
        rows = int(np.prod(value.shape[:-1])) if value.ndim > 1 else 1
        chunks.append(encode_pmsf(value.reshape(rows, value.shape[-1]), "param"))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: Path) -> Tuple[PmsModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a PMSC checkpoint")
    version, length = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + length].decode("utf-8"))
    offset = 12 + length
    (count,) = struct.unpack("<I", raw[offset:offset + 4])
    offset += 4
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", raw[offset:offset + 2])
        name = raw[offset + 2:offset + 2 + n].decode("utf-8")
        offset += 2 + n
        ndim = raw[offset]
        shape = struct.unpack(f"<{ndim}I", raw[offset + 1:offset + 1 + 4 * ndim])
        offset += 1 + 4 * ndim
        matrix, _, offset = decode_pmsf(raw, offset)
        params[name] = matrix.reshape(shape)
    config = ModelConfig.model_validate(header["model"])
    model = PmsModel(config, params, heads=header["heads"], vocab=header.get("vocab"))
    return model, header.get("extra", {})
