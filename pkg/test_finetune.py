# 📄 test_finetune.py
import math

import numpy as np
import pytest

from config import DecodeConfig, FinetuneConfig, FreezePolicy, OptimConfig
from errors import DataError
from events import MetricsWriter
from features import Waveform, normalize_waveform
from finetune import (LabeledExample, build_vocab, check_lengths, ctc_logits, decode_corpus, finetune,
                      finetune_step, ids_to_text, text_to_ids, trainable_names, transcribe)
from model import PmsModel, num_frames
from pretraining import Adam
from test_model import small_config
from toy_corpus import synthesize

VOCAB = ["a", "b", "c", "d", "|"]


def labeled(text, seed, utt=None):
    samples, _ = synthesize(text, np.random.default_rng(seed))
    w = normalize_waveform(Waveform(samples=samples))
    return LabeledExample(utt_id=utt or f"lab-{seed:04d}", waveform=w, text=text)


def ctc_model(seed=0):
    return PmsModel.create(small_config(), seed=seed).with_ctc_head(VOCAB, seed=seed + 1)


def cfg(**kw):
    base = dict(optim=OptimConfig(peak_lr=3e-3, warmup_fraction=0.1, total_steps=50), max_batch_seconds=2.0)
    base.update(kw)
    return FinetuneConfig(**base)


class TestVocabulary:
    def test_sorted_with_boundary(self):
        assert build_vocab(["ab c", " d "]) == VOCAB

    def test_ids(self):
        ids = text_to_ids("ab  c", VOCAB)
        assert ids == [1, 2, 5, 3]
        assert ids_to_text(ids, VOCAB) == "ab c"

    def test_boundaries_are_trimmed(self):
        assert ids_to_text([5, 1, 5, 5, 2, 5], VOCAB) == "a b"

    def test_unknown_symbol(self):
        with pytest.raises(DataError):
            text_to_ids("ax", VOCAB)

    def test_empty(self):
        with pytest.raises(DataError):
            build_vocab(["  "])


class TestFreezePolicy:
    def test_default_freezes_conv_only(self):
        names = trainable_names(ctc_model(), FreezePolicy())
        assert "ctc.w" in names and "block.2.attn.wq" in names and "feat.proj.w" in names
        assert not any(n.startswith("conv.") for n in names)
        assert "mask_emb" not in names

    def test_head_only(self):
        assert trainable_names(ctc_model(), FreezePolicy(train_head_only=True)) == ["ctc.b", "ctc.w"]

    def test_everything(self):
        names = trainable_names(ctc_model(), FreezePolicy(freeze_waveform_encoder=False))
        assert "conv.0.w" in names and "block.1.ffn.w1" in names

    def test_frozen_transformer_keeps_conv_trainable(self):
        names = trainable_names(ctc_model(), FreezePolicy(freeze_waveform_encoder=False, freeze_transformer=True))
        assert "conv.0.w" in names and "block.1.ffn.w1" not in names


class TestFinetuneStep:
    def test_head_only_leaves_encoder_bit_identical(self):
        model = ctc_model()
        before = {k: v.copy() for k, v in model.params.items()}
        batch = [labeled("ab", 1), labeled("c d", 2)]
        c = cfg(freeze=FreezePolicy(train_head_only=True), optim=OptimConfig(peak_lr=1e-2, total_steps=100))
        opt = Adam(c.optim)
        for step in range(100):
            finetune_step(batch, model, c.freeze, opt, step, c)
        for name, value in model.params.items():
            if name.startswith("ctc."):
                assert not np.array_equal(value, before[name])
            else:
                np.testing.assert_array_equal(value, before[name])

    def test_zero_lr_changes_nothing(self):
        model = ctc_model()
        before = {k: v.copy() for k, v in model.params.items()}
        c = cfg(optim=OptimConfig(peak_lr=0.0, total_steps=5))
        opt = Adam(c.optim)
        for step in range(5):
            m = finetune_step([labeled("ab", 3)], model, c.freeze, opt, step, c)
            assert m.lr == 0.0 and math.isfinite(m.loss)
        for name, value in model.params.items():
            np.testing.assert_array_equal(value, before[name])

    def test_dropout_is_seeded_per_step(self):
        def run(seed):
            model = PmsModel.create(small_config(dropout=0.3), seed=0).with_ctc_head(VOCAB, seed=1)
            c = cfg()
            m = finetune_step([labeled("ab", 5)], model, c.freeze, Adam(c.optim), 1, c, seed=seed)
            return m.loss, model

        a, model = run(0)
        b, _ = run(0)
        other, _ = run(1)
        assert a == b and a != other
        ex = labeled("ab", 5)
        np.testing.assert_array_equal(ctc_logits(model, ex.waveform).data, ctc_logits(model, ex.waveform).data)

    def test_metrics(self):
        model = ctc_model()
        ex = labeled("a", 4)
        c = cfg()
        m = finetune_step([ex], model, c.freeze, Adam(c.optim), 1, c)
        assert m.frames == num_frames(model.config, ex.waveform.samples.size)
        assert m.loss_per_frame == pytest.approx(m.loss / m.frames)


class TestFinetuneLoop:
    def test_ctc_loss_falls_on_a_tiny_set(self):
        model = ctc_model()
        train = [labeled(t, s) for s, t in enumerate(["a", "bc", "d a"])]
        writer = MetricsWriter(None)
        history = finetune(model, train, cfg(optim=OptimConfig(peak_lr=5e-3, warmup_fraction=0.1, total_steps=150)),
                           seed=0, metrics=writer)
        assert len(history) == len(writer.records) == 150
        first = np.mean([h.loss_per_frame for h in history[:10]])
        last = np.mean([h.loss_per_frame for h in history[-10:]])
        assert last < 0.5 * first

    def test_dev_selection_records_cer(self):
        model = ctc_model()
        writer = MetricsWriter(None)
        finetune(model, [labeled("ab", 5)], cfg(eval_every=5, optim=OptimConfig(total_steps=10)),
                 dev=[labeled("b", 6)], metrics=writer)
        scored = [r for r in writer.records if "dev_cer" in r]
        assert [r["step"] for r in scored] == [4, 9]

    def test_transcript_too_long_for_audio(self):
        model = ctc_model()
        ex = labeled("a", 7)
        long_text = " ".join(["a"] * num_frames(model.config, ex.waveform.samples.size))
        with pytest.raises(DataError):
            check_lengths(model, [ex.model_copy(update={"text": long_text})])

    def test_no_examples(self):
        with pytest.raises(DataError):
            finetune(ctc_model(), [], cfg())


class TestTranscribe:
    def test_greedy_and_beam(self):
        model = ctc_model()
        ex = labeled("ab", 8)
        text, score = transcribe(model, ex.waveform)
        assert math.isnan(score)
        assert set(text) <= set("abcd ")
        beam_text, beam_score = transcribe(model, ex.waveform, DecodeConfig(beam=4))
        assert math.isfinite(beam_score)
        assert set(beam_text) <= set("abcd ")

    def test_corpus_is_sorted_and_parallel_safe(self):
        model = ctc_model()
        exs = [labeled("a", s, utt=f"u{3 - s}") for s in range(3)]
        serial = decode_corpus(model, exs)
        assert list(serial) == ["u1", "u2", "u3"]
        assert decode_corpus(model, exs, workers=3) == serial

    def test_codebook_model_rejected(self):
        with pytest.raises(DataError):
            ctc_logits(PmsModel.create(small_config(), seed=0), labeled("a", 9).waveform)
