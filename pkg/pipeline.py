# 📄 pipeline.py
"""Two-iteration pretraining recipe, fine-tuning and evaluation, driven by a run manifest.

Artifacts of one configuration live under ``<output_dir>/<config-hash[:12]>/``.
A stage already marked done for the same hash (with its artifacts on disk) is
skipped on rerun; a different configuration always gets a fresh directory.
"""
import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from clustering import multi_resolution_targets, save_codebook
from config import ExperimentConfig, FrontEndConfig, ModelConfig, canonical_json, config_hash
from errors import ConfigError, DataError, StageError
from events import MetricsWriter, log_event, set_event_sink
from features import FeatureSequence, Waveform, load_waveform, mfcc39, normalize_waveform, utterance_normalize
from finetune import LabeledExample, build_vocab, decode_corpus, finetune, text_to_ids
from formats import read_alignments, read_labels, read_pmsf, read_text_table, write_labels, write_pmsf, \
    write_text_table
from lm import NgramLM, read_arpa, write_arpa
from model import PmsModel, init_params, load_checkpoint, num_frames, save_checkpoint
from pretraining import SSLExample, align_targets, pretrain
from scoring import ErrorCounts, corpus_error_rate, target_quality
from toy_corpus import frame_phones

STAGES = ["features", "cluster1", "pretrain1", "extract", "cluster2", "pretrain2", "finetune", "decode", "eval"]
AUDIO_SUFFIXES = (".wav", ".pmsw")


class StageRecord(BaseModel):
    status: Literal["pending", "running", "done", "failed"] = "pending"
    config_hash: str
    artifacts: Dict[str, str] = Field(default_factory=dict)
    error: Optional[str] = None
    started_at: Optional[float] = None
    finished_at: Optional[float] = None


class RunManifest(BaseModel):
    config_hash: str
    seed: int
    run_dir: str
    epoch: int = 0
    stages: Dict[str, StageRecord] = Field(default_factory=dict)


class DecoderReport(BaseModel):
    word: ErrorCounts
    char: ErrorCounts


class EvalReport(BaseModel):
    config_hash: str
    split: str
    greedy: DecoderReport
    beam: DecoderReport
    train_cer: Optional[float] = None


# --- Corpus helpers ---

def list_audio(directory: Path) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"corpus directory {directory} does not exist")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in AUDIO_SUFFIXES)


def load_corpus(directory: Path, workers: int = 1) -> Dict[str, Waveform]:
    paths = list_audio(directory)
    if workers > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            waves = list(pool.map(load_waveform, paths))
    else:
        waves = [load_waveform(p) for p in paths]
    return {p.stem: w for p, w in zip(paths, waves)}


def mfcc_features(w: Waveform, frontend: FrontEndConfig) -> FeatureSequence:
    f = mfcc39(w, frontend.window_ms, frontend.hop_ms)
    return utterance_normalize(f) if frontend.normalize_mfcc else f


def model_input(w: Waveform, frontend: FrontEndConfig, cfg: ModelConfig) -> Waveform:
    if w.sample_rate != cfg.sample_rate:
        raise DataError(f"audio is {w.sample_rate} Hz but the model expects {cfg.sample_rate} Hz")
    return normalize_waveform(w) if frontend.normalize_audio else w


def load_labeled(directory: Path, transcripts: str, frontend: FrontEndConfig, cfg: ModelConfig,
                 workers: int = 1) -> List[LabeledExample]:
    table_path = Path(directory) / transcripts
    if not table_path.exists():
        raise ConfigError(f"transcripts file {table_path} does not exist")
    table = read_text_table(table_path)
    corpus = load_corpus(directory, workers)
    missing = sorted(set(corpus) - set(table))
    if missing:
        raise DataError(f"{table_path}: no transcript for {missing[:5]}")
    return [LabeledExample(utt_id=u, waveform=model_input(corpus[u], frontend, cfg), text=table[u])
            for u in sorted(corpus)]


def save_feature_dir(out_dir: Path, feats: Dict[str, np.ndarray], source: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for utt in sorted(feats):
        write_pmsf(out_dir / f"{utt}.pmsf", feats[utt], source)


def load_feature_dir(directory: Path, frame_rate: float) -> Dict[str, FeatureSequence]:
    out = {}
    for path in sorted(Path(directory).glob("*.pmsf")):
        frames, source = read_pmsf(path)
        out[path.stem] = FeatureSequence(frames=frames, frame_rate=frame_rate, source=source)
    if not out:
        raise DataError(f"no PMSF features under {directory}")
    return out


def build_ssl_examples(corpus: Dict[str, Waveform], targets: Dict[int, Tuple[Dict[str, np.ndarray], float]],
                       cfg: ModelConfig) -> List[SSLExample]:
    """Pair each waveform with per-layer labels resampled to the model frame rate."""
    examples = []
    for utt in sorted(corpus):
        T = num_frames(cfg, corpus[utt].samples.size)
        if T == 0:
            raise DataError(f"{utt}: audio shorter than one model frame")
        per_layer = {}
        for layer, (labels, rate) in targets.items():
            if utt not in labels:
                raise DataError(f"{utt}: no target labels for layer {layer}")
            per_layer[layer] = align_targets(labels[utt], rate, cfg.frame_rate, T)
        examples.append(SSLExample(utt_id=utt, waveform=corpus[utt], targets=per_layer))
    return examples


def extract_layer_features(checkpoint: Path, corpus: Dict[str, Waveform], layer: int, out_dir: Path,
                           workers: int = 1) -> Dict[str, Path]:
    """Uncorrupted O^layer per utterance, written as PMSF tagged encoder-layer-<layer>."""
    model, _ = load_checkpoint(checkpoint)
    if not 1 <= layer <= model.config.num_layers:
        raise DataError(f"extract layer {layer} outside [1, {model.config.num_layers}]")
    utts = sorted(corpus)

    def run(utt):
        return model.extract(corpus[utt], layer)

    if workers > 1 and len(utts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            mats = list(pool.map(run, utts))
    else:
        mats = [run(u) for u in utts]
    save_feature_dir(Path(out_dir), dict(zip(utts, mats)), f"encoder-layer-{layer}")
    return {u: Path(out_dir) / f"{u}.pmsf" for u in utts}


def lm_sentences(texts: Sequence[str]) -> List[List[str]]:
    return [["|" if ch == " " else ch for ch in " ".join(t.split())] for t in texts]


# --- Run orchestration ---

class PipelineRun:
    """Stage runner bound to one configuration hash and its artifact directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.dir = Path(cfg.output_dir) / self.hash[:12]
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = RunManifest.model_validate_json(self.manifest_path.read_text(encoding="utf-8"))
            if self.manifest.config_hash != self.hash:
                raise DataError(f"{self.manifest_path} belongs to config {self.manifest.config_hash[:12]}")
        else:
            self.manifest = RunManifest(config_hash=self.hash, seed=cfg.seed, run_dir=str(self.dir))
        self.manifest.epoch += 1
        self.save()
        (self.dir / "config.json").write_text(canonical_json(cfg) + "\n", encoding="utf-8")
        set_event_sink(self.dir / "events.jsonl")
        self.metrics = MetricsWriter(self.dir / "metrics.jsonl")
        self.workers = cfg.iteration1.ssl.workers
        self._raw: Optional[Dict[str, Waveform]] = None
        log_event("pipeline", "INFO", f"Run {self.hash[:12]} epoch {self.manifest.epoch} in {self.dir}.",
                  run_id=self.hash[:12])

    def save(self) -> None:
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(self.manifest.model_dump_json(indent=2), encoding="utf-8")
        tmp.replace(self.manifest_path)

    # --- stage bookkeeping ---

    def stage(self, name: str, fn: Callable[[], Dict[str, Path]]) -> Dict[str, str]:
        record = self.manifest.stages.get(name)
        if record is not None and record.status == "done" and record.config_hash == self.hash \
                and all(Path(p).exists() for p in record.artifacts.values()):
            log_event(name, "INFO", "Artifacts present for this config; skipping.", run_id=self.hash[:12])
            return record.artifacts
        record = StageRecord(status="running", config_hash=self.hash, started_at=time.time())
        self.manifest.stages[name] = record
        self.save()
        log_event(name, "INFO", "Stage started.", run_id=self.hash[:12])
        try:
            artifacts = fn()
        except Exception as e:
            record.status, record.finished_at = "failed", time.time()
            record.error = getattr(e, "detail", None) or repr(e)
            self.save()
            log_event(name, "ERROR", record.error, run_id=self.hash[:12])
            raise StageError(name, e) from e
        record.status, record.finished_at = "done", time.time()
        record.artifacts = {k: str(v) for k, v in artifacts.items()}
        self.save()
        self.metrics.write({"stage": name, "event": "done", "seconds": record.finished_at - record.started_at})
        return record.artifacts

    def require(self, name: str) -> Dict[str, str]:
        record = self.manifest.stages.get(name)
        if record is None or record.status != "done":
            raise DataError(f"stage '{name}' has not completed for config {self.hash[:12]}")
        if record.config_hash != self.hash:
            raise DataError(f"stage '{name}' artifacts carry config {record.config_hash[:12]}, not {self.hash[:12]}")
        return record.artifacts

    def load_model(self, path: str) -> PmsModel:
        model, extra = load_checkpoint(Path(path))
        if extra.get("config_hash") != self.hash:
            raise DataError(f"{path} was written under a different configuration")
        return model

    # --- inputs ---

    def validate_inputs(self, labeled: bool = False) -> None:
        c = self.cfg.corpus
        if not list_audio(Path(c.unlabeled_dir)):
            raise ConfigError(f"unlabeled corpus {c.unlabeled_dir} has no audio")
        if labeled:
            if not list_audio(Path(c.labeled_dir)):
                raise ConfigError(f"labeled corpus {c.labeled_dir} has no audio")
            if not (Path(c.labeled_dir) / c.transcripts).exists():
                raise ConfigError(f"missing transcripts {Path(c.labeled_dir) / c.transcripts}")
            if c.eval_dir is not None and not (Path(c.eval_dir) / c.transcripts).exists():
                raise ConfigError(f"missing transcripts {Path(c.eval_dir) / c.transcripts}")

    def raw_corpus(self) -> Dict[str, Waveform]:
        if self._raw is None:
            self._raw = load_corpus(Path(self.cfg.corpus.unlabeled_dir), self.workers)
            if not self._raw:
                raise DataError("unlabeled corpus is empty")
        return self._raw

    def model_corpus(self, cfg: ModelConfig) -> Dict[str, Waveform]:
        return {u: model_input(w, self.cfg.frontend, cfg) for u, w in self.raw_corpus().items()}

    # --- stages ---

    def features(self) -> Dict[str, str]:
        def work():
            out = self.dir / "features" / "mfcc"
            raw = self.raw_corpus()
            feats = {u: mfcc_features(raw[u], self.cfg.frontend).frames for u in sorted(raw)}
            save_feature_dir(out, feats, "mfcc")
            return {"dir": out}
        return self.stage("features", work)

    def cluster(self, iteration: int) -> Dict[str, str]:
        it = self.cfg.iteration1 if iteration == 1 else self.cfg.iteration2

        def work():
            if iteration == 1:
                source = self.require("features")["dir"]
                rate = 1000.0 / self.cfg.frontend.hop_ms
            else:
                source = self.require("extract")["dir"]
                rate = self.cfg.iteration1.model.frame_rate
            feats = load_feature_dir(Path(source), rate)
            spec = it.clustering
            results = multi_resolution_targets(feats, spec.sizes, seed=spec.seed, fraction=spec.subsample_fraction,
                                               max_iters=spec.max_iters, shared_subsample=spec.shared_subsample,
                                               workers=it.ssl.workers)
            out = self.dir / "targets" / f"iter{iteration}"
            out.mkdir(parents=True, exist_ok=True)
            artifacts = {}
            for k, (model, assignment) in results.items():
                utts = sorted(assignment.labels)
                save_codebook(out / f"codebook-k{k}.pmsf", model)
                write_labels(out / f"labels-k{k}.txt", utts, [assignment.labels[u] for u in utts], k,
                             assignment.source_layer)
                artifacts[f"codebook-{k}"] = out / f"codebook-k{k}.pmsf"
                artifacts[f"labels-{k}"] = out / f"labels-k{k}.txt"
                self.metrics.write({"stage": f"cluster{iteration}", "k": k, "inertia": model.inertia,
                                    "iterations": model.iterations})
            return artifacts
        return self.stage(f"cluster{iteration}", work)

    def pretrain(self, iteration: int) -> Dict[str, str]:
        it = self.cfg.iteration1 if iteration == 1 else self.cfg.iteration2
        name = f"pretrain{iteration}"

        def work():
            targets_art = self.require(f"cluster{iteration}")
            rate = 1000.0 / self.cfg.frontend.hop_ms if iteration == 1 else self.cfg.iteration1.model.frame_rate
            cfg = it.model
            targets = {}
            for layer, size in zip(cfg.supervised_layers, cfg.codebook_sizes):
                labels, k, _ = read_labels(Path(targets_art[f"labels-{size}"]))
                if k != size:
                    raise DataError(f"label file for layer {layer} has k={k}, expected {size}")
                targets[layer] = (labels, rate)
            seed = self.cfg.seed + iteration - 1
            params = init_params(cfg, seed)
            if iteration == 2 and it.warm_start:
                previous = self.load_model(self.require("pretrain1")["checkpoint"])
                params.update({k: v.copy() for k, v in previous.params.items() if not k.startswith("head.")})
            model = PmsModel(cfg, params)
            examples = build_ssl_examples(self.model_corpus(cfg), targets, cfg)
            pretrain(model, examples, it.ssl, seed=seed, stage=name, metrics=self.metrics)
            path = self.dir / "checkpoints" / f"iter{iteration}.ckpt"
            save_checkpoint(path, model, {"config_hash": self.hash, "stage": name})
            return {"checkpoint": path}
        return self.stage(name, work)

    def extract(self) -> Dict[str, str]:
        def work():
            ckpt = self.require("pretrain1")["checkpoint"]
            self.load_model(ckpt)
            out = self.dir / "features" / f"layer-{self.cfg.extract_layer}"
            extract_layer_features(Path(ckpt), self.model_corpus(self.cfg.iteration1.model),
                                   self.cfg.extract_layer, out, self.workers)
            return {"dir": out}
        return self.stage("extract", work)

    def labeled(self, directory: str) -> List[LabeledExample]:
        return load_labeled(Path(directory), self.cfg.corpus.transcripts, self.cfg.frontend,
                            self.cfg.iteration2.model, self.workers)

    def finetune(self) -> Dict[str, str]:
        def work():
            base = self.load_model(self.require("pretrain2")["checkpoint"])
            train = self.labeled(self.cfg.corpus.labeled_dir)
            vocab = build_vocab([ex.text for ex in train])
            model = base.with_ctc_head(vocab, seed=self.cfg.seed + 2)
            dev = self.labeled(self.cfg.corpus.eval_dir) if self.cfg.corpus.eval_dir else None
            if dev:
                for ex in dev:
                    text_to_ids(ex.text, vocab)
            finetune(model, train, self.cfg.finetune, seed=self.cfg.seed, dev=dev, metrics=self.metrics)
            path = self.dir / "checkpoints" / "finetuned.ckpt"
            save_checkpoint(path, model, {"config_hash": self.hash, "stage": "finetune"})
            lm_path = self.dir / "lm.arpa"
            if self.cfg.decode.lm_path:
                write_arpa(lm_path, read_arpa(Path(self.cfg.decode.lm_path)))
            else:
                write_arpa(lm_path, NgramLM.train(lm_sentences([ex.text for ex in train]), self.cfg.decode.lm_order))
            return {"checkpoint": path, "lm": lm_path}
        return self.stage("finetune", work)

    def eval_split(self) -> Tuple[str, str]:
        if self.cfg.corpus.eval_dir:
            return "eval", self.cfg.corpus.eval_dir
        return "train", self.cfg.corpus.labeled_dir

    def decode(self) -> Dict[str, str]:
        def work():
            art = self.require("finetune")
            model = self.load_model(art["checkpoint"])
            lm = read_arpa(Path(art["lm"]))
            _, directory = self.eval_split()
            examples = self.labeled(directory)
            out = self.dir / "hyps"
            out.mkdir(parents=True, exist_ok=True)
            write_text_table(out / "greedy.txt", decode_corpus(model, examples, workers=self.workers))
            write_text_table(out / "beam.txt", decode_corpus(model, examples, self.cfg.decode, lm, self.workers))
            return {"greedy": out / "greedy.txt", "beam": out / "beam.txt"}
        return self.stage("decode", work)

    def evaluate(self) -> EvalReport:
        def work():
            hyps = self.require("decode")
            split, directory = self.eval_split()
            refs = read_text_table(Path(directory) / self.cfg.corpus.transcripts)
            reports = {}
            for decoder in ("greedy", "beam"):
                table = read_text_table(Path(hyps[decoder]))
                pairs = [(table.get(u, ""), refs[u]) for u in sorted(refs)]
                reports[decoder] = DecoderReport(word=corpus_error_rate(pairs, "word"),
                                                 char=corpus_error_rate(pairs, "char"))
            train_cer = None
            if split == "eval":
                model = self.load_model(self.require("finetune")["checkpoint"])
                train = self.labeled(self.cfg.corpus.labeled_dir)
                train_hyps = decode_corpus(model, train, workers=self.workers)
                train_cer = corpus_error_rate(((train_hyps[ex.utt_id], ex.text) for ex in train), "char").rate
            else:
                train_cer = reports["greedy"].char.rate
            report = EvalReport(config_hash=self.hash, split=split, greedy=reports["greedy"],
                                beam=reports["beam"], train_cer=train_cer)
            path = self.dir / "report.json"
            path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
            log_event("eval", "INFO", f"{split} WER greedy={report.greedy.word.rate} beam={report.beam.word.rate}; "
                                      f"train CER={train_cer}", run_id=self.hash[:12])
            return {"report": path}
        art = self.stage("eval", work)
        return EvalReport.model_validate_json(Path(art["report"]).read_text(encoding="utf-8"))

    def analyze(self) -> Dict[str, dict]:
        """Cluster/phone agreement of every target set, when the unlabeled corpus ships alignments."""
        align_path = Path(self.cfg.corpus.unlabeled_dir) / "alignments.txt"
        if not align_path.exists():
            raise DataError(f"no alignments at {align_path}")
        alignments = read_alignments(align_path)
        rate = self.cfg.iteration1.model.sample_rate
        hops = {1: int(round(rate * self.cfg.frontend.hop_ms / 1000.0)),
                2: self.cfg.iteration1.model.stride_product}
        out: Dict[str, dict] = {}
        for iteration in (1, 2):
            record = self.manifest.stages.get(f"cluster{iteration}")
            if record is None or record.status != "done":
                continue
            for key, path in sorted(record.artifacts.items()):
                if not key.startswith("labels-"):
                    continue
                labels, k, _ = read_labels(Path(path))
                phones = {u: frame_phones(alignments[u], hops[iteration], len(labels[u]))
                          for u in labels if u in alignments}
                out[f"iter{iteration}-k{k}"] = target_quality(labels, phones, k).model_dump()
        (self.dir / "analysis.json").write_text(json.dumps(out, indent=2, sort_keys=True), encoding="utf-8")
        for name, q in out.items():
            log_event("analyze", "INFO", f"{name}: PNMI={q['pnmi']:.3f} phone purity={q['phone_purity']:.3f}")
        return out


# --- Entry points ---

def run_iteration1(cfg: ExperimentConfig, run: Optional[PipelineRun] = None) -> Path:
    run = run or PipelineRun(cfg)
    run.validate_inputs()
    run.features()
    run.cluster(1)
    return Path(run.pretrain(1)["checkpoint"])


def run_iteration2(cfg: ExperimentConfig, run: Optional[PipelineRun] = None) -> Path:
    run = run or PipelineRun(cfg)
    run.require("pretrain1")
    run.extract()
    run.cluster(2)
    return Path(run.pretrain(2)["checkpoint"])


def run_finetune_and_eval(cfg: ExperimentConfig, run: Optional[PipelineRun] = None) -> EvalReport:
    run = run or PipelineRun(cfg)
    run.validate_inputs(labeled=True)
    run.finetune()
    run.decode()
    return run.evaluate()


def run_all(cfg: ExperimentConfig) -> EvalReport:
    run = PipelineRun(cfg)
    run.validate_inputs(labeled=True)
    run_iteration1(cfg, run)
    run_iteration2(cfg, run)
    if (Path(cfg.corpus.unlabeled_dir) / "alignments.txt").exists():
        try:
            run.analyze()
        except DataError as e:
            log_event("analyze", "WARNING", e.detail)
    return run_finetune_and_eval(cfg, run)
