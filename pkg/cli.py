# 📄 cli.py
"""Command-line entry point: one subcommand per pipeline stage plus corpus/LM/service helpers."""
import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from config import load_config
from errors import PmsError, exit_code_for
from events import log_event
from formats import read_text_table
from lm import NgramLM, write_arpa
from pipeline import PipelineRun, lm_sentences, run_all
from toy_corpus import generate_toy_corpus


def _run(args) -> PipelineRun:
    return PipelineRun(load_config(Path(args.config)))


def cmd_features(args) -> None:
    run = _run(args)
    run.validate_inputs()
    print(json.dumps(run.features(), indent=2))


def cmd_cluster(args) -> None:
    print(json.dumps(_run(args).cluster(args.iteration), indent=2))


def cmd_pretrain(args) -> None:
    print(json.dumps(_run(args).pretrain(args.iteration), indent=2))


def cmd_extract(args) -> None:
    print(json.dumps(_run(args).extract(), indent=2))


def cmd_finetune(args) -> None:
    run = _run(args)
    run.validate_inputs(labeled=True)
    print(json.dumps(run.finetune(), indent=2))


def cmd_decode(args) -> None:
    print(json.dumps(_run(args).decode(), indent=2))


def cmd_eval(args) -> None:
    print(_run(args).evaluate().model_dump_json(indent=2))


def cmd_run_all(args) -> None:
    print(run_all(load_config(Path(args.config))).model_dump_json(indent=2))


def cmd_analyze(args) -> None:
    print(json.dumps(_run(args).analyze(), indent=2, sort_keys=True))


def cmd_gen_toy_corpus(args) -> None:
    corpus = generate_toy_corpus(Path(args.out), args.n_unlabeled, args.n_labeled, args.n_dev, args.seed)
    print(corpus.model_dump_json(indent=2))


def cmd_train_lm(args) -> None:
    texts = list(read_text_table(Path(args.transcripts)).values())
    write_arpa(Path(args.out), NgramLM.train(lm_sentences(texts), args.order))
    log_event("lm", "INFO", f"Wrote order-{args.order} LM from {len(texts)} transcripts to {args.out}.")


def cmd_serve(args) -> None:
    import uvicorn

    import recognizer_service
    recognizer_service.configure(Path(args.checkpoint), Path(args.manifest) if args.manifest else None,
                                 Path(args.lm) if args.lm else None)
    uvicorn.run(recognizer_service.app, host=args.host, port=args.port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pms", description="Multi-layer progressive masked-prediction "
                                                                 "speech pretraining.")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.set_defaults(func=fn)
        return p

    with_config("features", cmd_features, "MFCC-39 features for the unlabeled corpus")
    with_config("cluster", cmd_cluster, "k-means targets").add_argument("--iteration", type=int, choices=(1, 2),
                                                                        default=1)
    with_config("pretrain", cmd_pretrain, "masked-prediction pretraining").add_argument(
        "--iteration", type=int, choices=(1, 2), default=1)
    with_config("extract", cmd_extract, "hidden features from the iteration-1 model")
    with_config("finetune", cmd_finetune, "CTC fine-tuning on the labeled corpus")
    with_config("decode", cmd_decode, "greedy and beam hypotheses for the evaluation split")
    with_config("eval", cmd_eval, "WER/CER report")
    with_config("run-all", cmd_run_all, "every stage in order")
    with_config("analyze", cmd_analyze, "target quality against frame alignments")

    p = sub.add_parser("gen-toy-corpus", help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-unlabeled", type=int, default=50)
    p.add_argument("--n-labeled", type=int, default=10)
    p.add_argument("--n-dev", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_toy_corpus)

    p = sub.add_parser("train-lm", help="character n-gram LM from a transcript table")
    p.add_argument("--transcripts", required=True)
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("serve", help="HTTP recognizer")
    p.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint")
    p.add_argument("--manifest", default=None)
    p.add_argument("--lm", default=None)
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8010)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except PmsError as e:
        code = exit_code_for(e)
        print(f"[Cli] ERROR: {e.detail}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
