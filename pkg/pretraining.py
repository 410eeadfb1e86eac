# 📄 pretraining.py
"""Span masking, masked-prediction losses over the supervised layers, and the Adam loop."""
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

import numerics as nx
from config import MaskConfig, OptimConfig, SSLConfig
from errors import DataError, TrainingAborted
from events import MetricsWriter, log_event
from features import Waveform
from model import PmsModel, codeword_logits, num_frames
from numerics import Tensor


class MaskSpec(BaseModel):
    M: List[int]
    starts: List[int]
    T: int
    l: int = 10


class SSLExample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    utt_id: str
    waveform: Waveform
    # Supervised layer -> per-frame target labels at the model frame rate.
    targets: Dict[int, np.ndarray] = Field(default_factory=dict)


class StepMetrics(BaseModel):
    step: int
    lr: float
    loss: Dict[str, float]
    accuracy: Dict[str, float]
    total: float
    loss_per_frame: float
    masked_frames: int


# --- Masking ---

def spans_to_mask(starts: Sequence[int], l: int, T: int) -> MaskSpec:
    covered = set()
    for s in starts:
        covered.update(range(int(s), min(int(s) + l, T)))
    return MaskSpec(M=sorted(covered), starts=sorted(int(s) for s in starts), T=T, l=l)


def sample_mask(T: int, cfg: MaskConfig, seed) -> MaskSpec:
    """round(p·T) distinct starts, each masking l frames; spans are unioned and clipped at T."""
    if T < 1:
        raise DataError("sample_mask needs T ≥ 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    count = int(round(cfg.p * T))
    starts = rng.choice(T, size=count, replace=False) if count else []
    return spans_to_mask(starts, cfg.l, T)


def align_targets(labels: np.ndarray, label_rate: float, frame_rate: float, T: int) -> np.ndarray:
    """Resample a label sequence onto T model frames (nearest earlier label frame)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise DataError("cannot align an empty label sequence")
    idx = np.floor(np.arange(T) * (label_rate / frame_rate) + 1e-9).astype(np.int64)
    return labels[np.minimum(idx, labels.size - 1)]


# --- Losses ---

def layer_loss(O: Tensor, P: Dict[str, Tensor], layer: int, temperature: float, targets: np.ndarray,
               mask: MaskSpec) -> Tuple[Tensor, int]:
    """−Σ_{t∈M} log p^l(target_t | X̃, t) and the number of correct masked argmaxes."""
    targets = np.asarray(targets, dtype=np.int64)
    C = P[f"head.{layer}.emb"].shape[0]
    if targets.shape != (O.shape[0],):
        raise DataError(f"layer {layer}: {targets.size} targets for {O.shape[0]} frames")
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise DataError(f"layer {layer}: targets outside codebook range [0, {C})")
    if not mask.M:
        return Tensor(0.0), 0
    logits = codeword_logits(nx.gather_rows(O, mask.M), P, layer, temperature)
    picked = targets[mask.M]
    loss = nx.scale(nx.total(nx.pick(nx.log_softmax(logits), picked)), -1.0)
    correct = int((np.argmax(logits.data, axis=1) == picked).sum())
    return loss, correct


def total_loss(losses: Mapping[int, Tensor], K: Sequence[int]) -> Tensor:
    """Unweighted sum of the per-layer losses over the supervised set."""
    if sorted(losses) != sorted(K):
        raise DataError(f"one loss per supervised layer expected: have {sorted(losses)}, K={list(K)}")
    out = losses[K[0]]
    for l in K[1:]:
        out = out + losses[l]
    return out


# --- Optimizer ---

def lr_at(step: int, schedule: OptimConfig) -> float:
    """Linear warmup from 0 to the peak, then linear decay back to 0 at total_steps."""
    total = schedule.total_steps
    step = min(max(step, 0), total)
    warm = schedule.warmup_fraction * total
    if warm > 0 and step < warm:
        return schedule.peak_lr * step / warm
    if total <= warm:
        return schedule.peak_lr
    return schedule.peak_lr * max(total - step, 0) / (total - warm)


class Adam:
    """Adam without weight decay; state is owned by a single writer."""

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def update(self, params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> Dict[str, np.ndarray]:
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        out = dict(params)
        for name in sorted(grads):
            g = grads[name]
            m = b1 * self.m.get(name, np.zeros_like(g)) + (1 - b1) * g
            v = b2 * self.v.get(name, np.zeros_like(g)) + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            if lr == 0.0:
                continue
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            out[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + self.cfg.eps)
        return out


# --- Training ---

def example_loss(model: PmsModel, ex: SSLExample, mask_cfg: MaskConfig, seed, trainable=None,
                 dropout_rng: Optional[np.random.Generator] = None):
    """Forward one utterance under a fresh mask; returns (total, per-layer losses, correct, mask, leaves)."""
    cfg = model.config
    T = num_frames(cfg, ex.waveform.samples.size)
    mask = sample_mask(T, mask_cfg, seed)
    P = model.bind(trainable)
    out = model.forward(ex.waveform, P, masked=mask.M, rng=dropout_rng)
    losses, correct = {}, {}
    for l in cfg.supervised_layers:
        if l not in ex.targets:
            raise DataError(f"{ex.utt_id}: no targets for supervised layer {l}")
        losses[l], correct[l] = layer_loss(out.encoder.layer(l), P, l, cfg.temperature, ex.targets[l], mask)
    return total_loss(losses, cfg.supervised_layers), losses, correct, mask, P


def pretrain_step(batch: Sequence[SSLExample], model: PmsModel, ssl_cfg: SSLConfig, step: int, optimizer: Adam,
                  seed: int = 0, batch_id: str = "") -> StepMetrics:
    """Forward, masked loss over K, backward, one Adam update at lr_at(step)."""
    cfg = model.config
    for ex in batch:
        missing = [l for l in cfg.supervised_layers if l not in ex.targets]
        if missing:
            raise DataError(f"{ex.utt_id}: missing targets for layers {missing}")

    def run(item):
        i, ex = item
        rng = np.random.default_rng([seed, step, i])
        drop = np.random.default_rng([seed, step, i, 1]) if cfg.dropout > 0 else None
        loss, losses, correct, mask, P = example_loss(model, ex, ssl_cfg.mask, rng, dropout_rng=drop)
        value = loss.item()
        if not math.isfinite(value):
            return None, ex.utt_id
        if loss.requires_grad:
            loss.backward()
        return (nx.collect_grads(P), {l: t.item() for l, t in losses.items()}, correct, len(mask.M)), ex.utt_id

    items = list(enumerate(batch))
    if ssl_cfg.workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=ssl_cfg.workers) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(it) for it in items]

    for res, utt in results:
        if res is None:
            raise TrainingAborted(batch_id or utt, f"non-finite loss on utterance {utt}")

    grads = nx.reduce_grads([res[0] for res, _ in results])
    lr = lr_at(step, ssl_cfg.optim)
    model.params = optimizer.update(model.params, grads, lr)

    masked = sum(res[3] for res, _ in results)
    loss_by_layer = {f"layer_{l}": float(sum(res[1][l] for res, _ in results)) for l in cfg.supervised_layers}
    acc_by_layer = {f"layer_{l}": (sum(res[2][l] for res, _ in results) / masked if masked else 0.0)
                    for l in cfg.supervised_layers}
    total = float(sum(loss_by_layer.values()))
    return StepMetrics(step=step, lr=lr, loss=loss_by_layer, accuracy=acc_by_layer, total=total,
                       loss_per_frame=total / masked if masked else 0.0, masked_frames=masked)


def make_batches(examples: Sequence, max_seconds: float, rng: np.random.Generator) -> List[List]:
    """Shuffle, then pack greedily so each batch holds at most max_seconds of audio."""
    order = rng.permutation(len(examples))
    batches, current, seconds = [], [], 0.0
    for i in order:
        ex = examples[int(i)]
        dur = ex.waveform.duration
        if current and seconds + dur > max_seconds:
            batches.append(current)
            current, seconds = [], 0.0
        current.append(ex)
        seconds += dur
    if current:
        batches.append(current)
    return batches


def pretrain(model: PmsModel, examples: Sequence[SSLExample], ssl_cfg: SSLConfig, seed: int = 0,
             stage: str = "pretrain", metrics: Optional[MetricsWriter] = None) -> List[StepMetrics]:
    """Run ssl_cfg.optim.total_steps updates, cycling over duration-capped batches."""
    if not examples:
        raise DataError("pretrain: no training examples")
    optimizer = Adam(ssl_cfg.optim)
    rng = np.random.default_rng([seed, 7])
    history: List[StepMetrics] = []
    queue: List[List[SSLExample]] = []
    log_event(stage, "INFO", f"Pretraining {ssl_cfg.optim.total_steps} steps on {len(examples)} utterances, "
                             f"K={model.config.supervised_layers}.")
    for step in range(ssl_cfg.optim.total_steps):
        if not queue:
            queue = make_batches(examples, ssl_cfg.max_batch_seconds, rng)
        batch = queue.pop(0)
        m = pretrain_step(batch, model, ssl_cfg, step, optimizer, seed=seed, batch_id=f"{stage}-step{step}")
        history.append(m)
        if metrics is not None:
            metrics.write({"stage": stage, **m.model_dump()})
        if step % ssl_cfg.log_every == 0:
            log_event(stage, "INFO", f"step {step} lr={m.lr:.2e} loss/frame={m.loss_per_frame:.4f}",
                      {"accuracy": m.accuracy})
    return history
