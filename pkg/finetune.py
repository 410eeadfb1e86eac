# 📄 finetune.py
"""CTC fine-tuning under a freeze policy, and utterance transcription."""
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

import numerics as nx
from config import DecodeConfig, FinetuneConfig, FreezePolicy
from ctc import beam_decode, ctc_loss, greedy_decode, min_frames
from errors import DataError, TrainingAborted
from events import MetricsWriter, log_event
from features import Waveform
from model import PmsModel, num_frames
from numerics import Tensor
from pretraining import Adam, lr_at, make_batches
from scoring import corpus_error_rate

WORD_BOUNDARY = "|"


class LabeledExample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    utt_id: str
    waveform: Waveform
    text: str


class FinetuneMetrics(BaseModel):
    step: int
    lr: float
    loss: float
    loss_per_frame: float
    frames: int


# --- Vocabulary ---

def build_vocab(texts: Sequence[str]) -> List[str]:
    """Sorted character inventory; spaces become the word-boundary symbol."""
    symbols = sorted({WORD_BOUNDARY if ch == " " else ch for t in texts for ch in t.strip()})
    if not symbols:
        raise DataError("no symbols in the labeled transcripts")
    return symbols


def text_to_ids(text: str, vocab: Sequence[str]) -> List[int]:
    index = {s: i + 1 for i, s in enumerate(vocab)}
    ids = []
    for ch in " ".join(text.split()):
        sym = WORD_BOUNDARY if ch == " " else ch
        if sym not in index:
            raise DataError(f"symbol {sym!r} is not in the vocabulary")
        ids.append(index[sym])
    return ids


def ids_to_text(ids: Sequence[int], vocab: Sequence[str]) -> str:
    chars = [vocab[i - 1] for i in ids]
    return " ".join("".join(chars).replace(WORD_BOUNDARY, " ").split())


# --- Freeze policy ---

def trainable_names(model: PmsModel, policy: FreezePolicy) -> List[str]:
    """CTC head always; transformer and projection unless frozen; conv stack only when unfrozen."""
    names = []
    for name in sorted(model.params):
        if name.startswith("ctc."):
            names.append(name)
        elif policy.train_head_only or name == "mask_emb":
            continue
        elif name.startswith("conv."):
            if not policy.freeze_waveform_encoder:
                names.append(name)
        elif not policy.freeze_transformer:
            names.append(name)
    return names


# --- Forward ---

def ctc_logits(model: PmsModel, w: Waveform, P: Optional[Dict[str, Tensor]] = None,
               rng: Optional[np.random.Generator] = None) -> Tensor:
    """Per-frame CTC scores; dropout applies only when an rng is given."""
    if model.heads != "ctc":
        raise DataError("model has no CTC head; call with_ctc_head first")
    P = P if P is not None else model.bind(trainable=())
    top = model.forward(w, P, rng=rng).encoder.top
    return nx.matmul(top, P["ctc.w"]) + P["ctc.b"]


def check_lengths(model: PmsModel, examples: Sequence[LabeledExample]) -> None:
    for ex in examples:
        T = num_frames(model.config, ex.waveform.samples.size)
        need = min_frames(text_to_ids(ex.text, model.vocab))
        if need > T:
            raise DataError(f"{ex.utt_id}: transcript needs at least T={need} frames, audio yields {T}")


def finetune_step(batch: Sequence[LabeledExample], model: PmsModel, policy: FreezePolicy, optimizer: Adam,
                  step: int, cfg: FinetuneConfig, batch_id: str = "", seed: int = 0) -> FinetuneMetrics:
    """CTC loss over the batch, one Adam update restricted to the trainable parameters."""
    trainable = trainable_names(model, policy)

    def run(i: int, ex: LabeledExample):
        P = model.bind(trainable)
        drop = np.random.default_rng([seed, step, i, 1]) if model.config.dropout > 0 else None
        loss = ctc_loss(ctc_logits(model, ex.waveform, P, drop), text_to_ids(ex.text, model.vocab))
        value = loss.item()
        if not math.isfinite(value):
            return None
        loss.backward()
        return nx.collect_grads(P), value, num_frames(model.config, ex.waveform.samples.size)

    if cfg.workers > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run, range(len(batch)), batch))
    else:
        results = [run(i, ex) for i, ex in enumerate(batch)]
    for ex, res in zip(batch, results):
        if res is None:
            raise TrainingAborted(batch_id or ex.utt_id, f"non-finite CTC loss on utterance {ex.utt_id}")

    grads = nx.reduce_grads([r[0] for r in results])
    lr = lr_at(step, cfg.optim)
    model.params = optimizer.update(model.params, grads, lr)
    loss = float(sum(r[1] for r in results))
    frames = int(sum(r[2] for r in results))
    return FinetuneMetrics(step=step, lr=lr, loss=loss, loss_per_frame=loss / frames if frames else 0.0,
                           frames=frames)


def transcribe(model: PmsModel, w: Waveform, decode: Optional[DecodeConfig] = None, lm=None) -> Tuple[str, float]:
    """Greedy when no decoder config is given, otherwise LM-fused beam search."""
    logits = ctc_logits(model, w).data
    if decode is None:
        ids = greedy_decode(logits)
        return ids_to_text(ids, model.vocab), float("nan")
    ids, score = beam_decode(logits, decode, lm=lm, vocab=model.vocab)
    return ids_to_text(ids, model.vocab), score


def decode_corpus(model: PmsModel, examples: Sequence, decode: Optional[DecodeConfig] = None, lm=None,
                  workers: int = 1) -> Dict[str, str]:
    def run(ex):
        return ex.utt_id, transcribe(model, ex.waveform, decode, lm)[0]

    if workers > 1 and len(examples) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(run, examples))
    else:
        pairs = [run(ex) for ex in examples]
    return dict(sorted(pairs))


def character_error(model: PmsModel, examples: Sequence[LabeledExample], workers: int = 1) -> float:
    hyps = decode_corpus(model, examples, workers=workers)
    counts = corpus_error_rate(((hyps[ex.utt_id], ex.text) for ex in examples), unit="char")
    return counts.rate if counts.rate is not None else float("inf")


def finetune(model: PmsModel, train: Sequence[LabeledExample], cfg: FinetuneConfig, seed: int = 0,
             dev: Optional[Sequence[LabeledExample]] = None, metrics: Optional[MetricsWriter] = None,
             stage: str = "finetune") -> List[FinetuneMetrics]:
    """Run cfg.optim.total_steps CTC updates; with eval_every > 0 keep the parameters scoring best on dev."""
    if not train:
        raise DataError("finetune: no labeled examples")
    check_lengths(model, train)
    optimizer = Adam(cfg.optim)
    rng = np.random.default_rng([seed, 11])
    selection = list(dev) if dev else list(train)
    best: Optional[Tuple[float, int, Dict[str, np.ndarray]]] = None
    history: List[FinetuneMetrics] = []
    queue: List[List[LabeledExample]] = []
    log_event(stage, "INFO", f"Fine-tuning {cfg.optim.total_steps} steps on {len(train)} utterances, "
                             f"{len(trainable_names(model, cfg.freeze))} trainable tensors.")
    for step in range(cfg.optim.total_steps):
        if not queue:
            queue = make_batches(train, cfg.max_batch_seconds, rng)
        m = finetune_step(queue.pop(0), model, cfg.freeze, optimizer, step, cfg,
                          batch_id=f"{stage}-step{step}", seed=seed)
        history.append(m)
        record = {"stage": stage, **m.model_dump()}
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            cer = character_error(model, selection, cfg.workers)
            record["dev_cer"] = cer
            if best is None or cer < best[0]:
                best = (cer, step, {k: v.copy() for k, v in model.params.items()})
        if metrics is not None:
            metrics.write(record)
        if step % cfg.log_every == 0:
            log_event(stage, "INFO", f"step {step} lr={m.lr:.2e} ctc/frame={m.loss_per_frame:.4f}")
    if best is not None:
        log_event(stage, "INFO", f"Keeping step {best[1]} parameters (dev CER {best[0]:.4f}).")
        model.params = best[2]
    return history
