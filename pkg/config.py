# 📄 config.py
"""Validated configuration objects and the YAML experiment file loader."""
import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from errors import ConfigError


class ConvLayerSpec(BaseModel):
    channels: int = Field(gt=0)
    kernel: int = Field(gt=0)
    stride: int = Field(gt=0)


def default_conv_spec() -> List[ConvLayerSpec]:
    # Stride product 320 → 20 ms frames at 16 kHz.
    layers = [(32, 10, 5), (32, 4, 4), (32, 4, 4), (32, 2, 2), (32, 2, 2)]
    return [ConvLayerSpec(channels=c, kernel=k, stride=s) for c, k, s in layers]


class ModelConfig(BaseModel):
    num_layers: int = Field(default=4, ge=1)
    num_heads: int = Field(default=4, ge=1)
    model_dim: int = Field(default=64, ge=1)
    ffn_mult: int = Field(default=4, ge=1)
    conv_spec: List[ConvLayerSpec] = Field(default_factory=default_conv_spec)
    conv_bias: bool = False
    # One entry per layer; None = unbounded. Empty list = no restricted heads anywhere.
    window_schedule: List[Optional[int]] = Field(default_factory=list)
    restricted_heads: Optional[Tuple[int, int]] = None
    supervised_layers: List[int] = Field(default_factory=lambda: [4])
    codebook_sizes: List[int] = Field(default_factory=lambda: [100])
    codeword_dim: int = Field(default=32, ge=1)
    temperature: float = Field(default=0.1, gt=0)
    nonlinearity: Literal["gelu", "relu"] = "gelu"
    dropout: float = Field(default=0.0, ge=0, lt=1)
    sample_rate: int = Field(default=16000, gt=0)

    @model_validator(mode="after")
    def _check(self):
        L, H = self.num_layers, self.num_heads
        if self.model_dim % H:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {H}")
        K = self.supervised_layers
        if not K or sorted(set(K)) != list(K):
            raise ValueError(f"supervised_layers {K} must be a strictly increasing nonempty list")
        if K[0] < 1 or K[-1] != L:
            raise ValueError(f"supervised_layers {K} must lie in [1, {L}] and include the top layer {L}")
        if len(self.codebook_sizes) != len(K):
            raise ValueError(f"{len(self.codebook_sizes)} codebook sizes for {len(K)} supervised layers")
        if any(c < 2 for c in self.codebook_sizes):
            raise ValueError("every codebook needs at least 2 codewords")
        if any(a > b for a, b in zip(self.codebook_sizes, self.codebook_sizes[1:])):
            raise ValueError(f"codebook sizes {self.codebook_sizes} must be non-decreasing from lower to higher layers")
        if self.window_schedule:
            if len(self.window_schedule) != L:
                raise ValueError(f"window_schedule has {len(self.window_schedule)} entries for {L} layers")
            if any(w is not None and w < 0 for w in self.window_schedule):
                raise ValueError("window sizes must be ≥ 0")
            inf = float("inf")
            ws = [inf if w is None else w for w in self.window_schedule]
            if any(a > b for a, b in zip(ws, ws[1:])):
                raise ValueError(f"window_schedule {self.window_schedule} must be non-decreasing")
            if H < 2:
                raise ValueError("restricted attention needs at least 2 heads")
            if self.restricted_heads is None:
                self.restricted_heads = (H - 2, H - 1)
        if self.restricted_heads is not None:
            hist, fut = self.restricted_heads
            if hist == fut or not (0 <= hist < H and 0 <= fut < H):
                raise ValueError(f"restricted_heads {self.restricted_heads} must be two distinct heads in [0, {H})")
        return self

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def stride_product(self) -> int:
        out = 1
        for layer in self.conv_spec:
            out *= layer.stride
        return out

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.stride_product


class MaskConfig(BaseModel):
    p: float = Field(default=0.08, ge=0, le=1)
    l: int = Field(default=10, ge=1)


class OptimConfig(BaseModel):
    peak_lr: float = Field(default=5e-4, ge=0)
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    warmup_fraction: float = Field(default=0.08, ge=0, le=1)
    total_steps: int = Field(default=2000, ge=1)


class SSLConfig(BaseModel):
    optim: OptimConfig = Field(default_factory=OptimConfig)
    mask: MaskConfig = Field(default_factory=MaskConfig)
    max_batch_seconds: float = Field(default=10.0, gt=0)
    workers: int = Field(default=1, ge=1)
    log_every: int = Field(default=10, ge=1)


class ClusterSpec(BaseModel):
    sizes: List[int] = Field(default_factory=lambda: [100])
    subsample_fraction: float = Field(default=1.0, gt=0, le=1)
    max_iters: int = Field(default=100, ge=1)
    seed: int = 0
    # One subsample shared by every size of the same run.
    shared_subsample: bool = True

    @field_validator("sizes")
    @classmethod
    def _check_sizes(cls, v):
        if not v or any(s < 1 for s in v):
            raise ValueError("cluster sizes must be a nonempty list of positive integers")
        return v


class IterationConfig(BaseModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    clustering: ClusterSpec = Field(default_factory=ClusterSpec)
    ssl: SSLConfig = Field(default_factory=SSLConfig)
    # Iteration 2 only: start from iteration-1 weights instead of a fresh init.
    warm_start: bool = False


class FreezePolicy(BaseModel):
    freeze_waveform_encoder: bool = True
    freeze_transformer: bool = False
    train_head_only: bool = False


class DecodeConfig(BaseModel):
    beam: int = Field(default=8, ge=1)
    lm_weight: float = 0.0
    insertion_bonus: float = 0.0
    lm_path: Optional[str] = None
    lm_order: int = Field(default=3, ge=1, le=4)

    @field_validator("lm_weight", "insertion_bonus")
    @classmethod
    def _finite(cls, v):
        if v != v or v in (float("inf"), float("-inf")):
            raise ValueError("decoder weights must be finite")
        return v


class FinetuneConfig(BaseModel):
    optim: OptimConfig = Field(default_factory=lambda: OptimConfig(peak_lr=2e-3, warmup_fraction=0.1, total_steps=1000))
    freeze: FreezePolicy = Field(default_factory=FreezePolicy)
    max_batch_seconds: float = Field(default=10.0, gt=0)
    workers: int = Field(default=1, ge=1)
    eval_every: int = Field(default=0, ge=0)
    log_every: int = Field(default=10, ge=1)


class FrontEndConfig(BaseModel):
    window_ms: float = Field(default=25.0, gt=0)
    hop_ms: float = Field(default=10.0, gt=0)
    normalize_mfcc: bool = True
    normalize_audio: bool = True

    @model_validator(mode="after")
    def _hop_fits_window(self) -> "FrontEndConfig":
        if self.window_ms < self.hop_ms:
            raise ValueError(f"window_ms ({self.window_ms}) must be ≥ hop_ms ({self.hop_ms})")
        return self


class CorpusConfig(BaseModel):
    unlabeled_dir: str
    labeled_dir: str
    eval_dir: Optional[str] = None
    transcripts: str = "transcripts.txt"


class ExperimentConfig(BaseModel):
    corpus: CorpusConfig
    output_dir: str = "runs"
    seed: int = 0
    frontend: FrontEndConfig = Field(default_factory=FrontEndConfig)
    iteration1: IterationConfig = Field(default_factory=IterationConfig)
    iteration2: IterationConfig = Field(default_factory=IterationConfig)
    extract_layer: int = Field(default=6, ge=1)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)

    @model_validator(mode="after")
    def _check(self):
        m1, m2 = self.iteration1.model, self.iteration2.model
        if m1.supervised_layers != [m1.num_layers]:
            raise ValueError("iteration 1 trains the top layer only (supervised_layers must be [num_layers])")
        if len(self.iteration1.clustering.sizes) != 1 or self.iteration1.clustering.sizes[0] != m1.codebook_sizes[0]:
            raise ValueError("iteration 1 clusters MFCCs once with k equal to its codebook size")
        if not 1 <= self.extract_layer <= m1.num_layers:
            raise ValueError(f"extract_layer {self.extract_layer} outside [1, {m1.num_layers}]")
        missing = sorted(set(m2.codebook_sizes) - set(self.iteration2.clustering.sizes))
        if missing:
            raise ValueError(f"iteration 2 codebook sizes {missing} are not produced by its clustering sizes")
        if self.iteration2.warm_start:
            if m1.model_copy(update={"supervised_layers": m2.supervised_layers, "codebook_sizes": m2.codebook_sizes,
                                     "window_schedule": m2.window_schedule,
                                     "restricted_heads": m2.restricted_heads}) != m2:
                raise ValueError("warm_start needs identical encoder shapes in both iterations")
        return self


def format_validation_error(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        where = ".".join(str(x) for x in err["loc"]) or "<root>"
        parts.append(f"{where}: {err['msg']}")
    return "; ".join(parts)


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"{path}: cannot read config ({e})") from None
    try:
        return ExperimentConfig.model_validate(raw or {})
    except ValidationError as e:
        raise ConfigError(f"{path}: {format_validation_error(e)}") from None


def canonical_json(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(model: BaseModel) -> str:
    return hashlib.sha256(canonical_json(model).encode("utf-8")).hexdigest()
