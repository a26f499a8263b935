"""Command line entry point: corpus generation, training, and decoding.

Model hyperparameters come from built-in defaults, an optional key=value
config file, and -c overrides, applied in that order.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bench, checkpoint, data, decoding, infer, training
from .arena import Workspace
from .model import ModelConfig


def _parse_value(s):
    if "," in s:
        return tuple(_parse_value(p) for p in s.split(","))
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def _config_overrides(config_path, pairs):
    out = {}
    if config_path:
        with open(config_path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise SystemExit(f"{config_path}:{lineno}: expected key=value")
                key, val = line.split("=", 1)
                out[key.strip()] = _parse_value(val.strip())
    for p in pairs or []:
        if "=" not in p:
            raise SystemExit(f"override {p!r}: expected key=value")
        key, val = p.split("=", 1)
        out[key] = _parse_value(val)
    return out


def _load_corpus(args):
    vocab = data.load_vocab(args.vocab)
    return data.load_corpus(args.corpus, vocab)


def _session_and_ws(args, model, mode):
    session = infer.InferenceSession(model)
    ws = Workspace(infer.make_arena(
        model.config, k=args.k, b_at=args.b_at, b_nat=args.b_nat, mode=mode))
    return session, ws


def _add_model_args(p):
    p.add_argument("--config", help="key=value file of model hyperparameters")
    p.add_argument("-c", "--set", action="append", metavar="KEY=VALUE",
                   help="override one model hyperparameter")


def _add_decode_args(p):
    p.add_argument("--mode", choices=["at", "hrt"], default="hrt")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--b-at", type=int, default=1)
    p.add_argument("--b-nat", type=int, default=1)
    p.add_argument("--length-penalty", type=float, default=0.6)


def _build_config(args, vocab_size):
    overrides = _config_overrides(args.config, args.set)
    overrides["vocab_size"] = vocab_size
    base = ModelConfig().to_dict()
    unknown = set(overrides) - set(base)
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    base.update(overrides)
    return ModelConfig.from_dict(base)


# -----------------------------------------------------------------------------
# subcommands
# -----------------------------------------------------------------------------


def cmd_generate(args):
    corpus = data.generate_synthetic(
        args.task, args.n_pairs, (args.min_len, args.max_len),
        args.vocab_size, args.seed, swap_prob=args.swap_prob,
    )
    data.save_corpus(corpus, args.out, vocab_path=args.vocab_out)
    print(f"wrote {len(corpus)} pairs to {args.out}")


def cmd_train(args):
    corpus = _load_corpus(args)
    from .model import TransformerModel

    config = _build_config(args, len(corpus.vocab))
    model = TransformerModel(config, seed=args.seed)
    schedule = training.CurriculumSchedule(args.total_steps or args.steps)
    trace = training.train(
        model, corpus, schedule, args.steps, args.k,
        batch_size=args.batch_size, seed=args.seed, at_only=args.at_only,
        log_every=args.log_every,
    )
    checkpoint.save_checkpoint(model, args.out)
    if args.trace:
        training.write_trace(trace, args.trace)
    print(f"final loss {trace[-1]['loss']:.4f}; checkpoint at {args.out}")


def cmd_finetune(args):
    corpus = _load_corpus(args)
    schedule = training.CurriculumSchedule(args.total_steps or args.steps)
    model, trace = training.finetune_from_at(
        args.checkpoint, corpus, schedule, args.steps, args.k,
        batch_size=args.batch_size, seed=args.seed, log_every=args.log_every,
    )
    checkpoint.save_checkpoint(model, args.out)
    if args.trace:
        training.write_trace(trace, args.trace)
    print(f"final loss {trace[-1]['loss']:.4f}; checkpoint at {args.out}")


def cmd_distill(args):
    corpus = _load_corpus(args)
    model = checkpoint.load_model(args.checkpoint)
    session = infer.InferenceSession(model)
    ws = Workspace(infer.make_arena(model.config, b_at=args.beam, mode="at"))

    def teacher(source, beam, length_penalty):
        return decoding.at_translate(
            session, source, beam=beam, length_penalty=length_penalty, ws=ws
        ).tokens

    distilled, fallbacks = training.distill_corpus(
        teacher, corpus, beam=args.beam, length_penalty=args.length_penalty)
    data.save_corpus(distilled, args.out)
    print(f"wrote {len(distilled)} pairs to {args.out} ({fallbacks} fallbacks)")


def cmd_translate(args):
    model = checkpoint.load_model(args.checkpoint)
    vocab = data.load_vocab(args.vocab)
    session, ws = _session_and_ws(args, model, args.mode)
    lines = sys.stdin if args.input == "-" else open(args.input, encoding="utf-8")
    jsonl = open(args.jsonl, "w", encoding="utf-8") if args.jsonl else None
    for line in lines:
        line = line.strip()
        if not line:
            continue
        source = vocab.encode(line)
        if args.mode == "at":
            tr = decoding.at_translate(
                session, source, beam=args.b_at,
                length_penalty=args.length_penalty, ws=ws)
        else:
            tr = decoding.hrt_translate(
                session, source, args.k, args.b_at, args.b_nat,
                length_penalty=args.length_penalty, ws=ws)
        print(vocab.decode(tr.tokens))
        if jsonl:
            jsonl.write(json.dumps({
                "source": line,
                "output": vocab.decode(tr.tokens),
                "score": tr.score,
                "skip_at_score": tr.skip_at_score,
                "skip_cmlm_score": tr.skip_cmlm_score,
                "decoder_calls": tr.decoder_calls,
                "wall_time": tr.wall_time,
                "forced": tr.forced,
            }) + "\n")
    if jsonl:
        jsonl.close()
    if args.input != "-":
        lines.close()


def cmd_bench(args):
    model = checkpoint.load_model(args.checkpoint)
    corpus = _load_corpus(args)
    report = bench.measure_wps(
        model, corpus, mode=args.mode, k=args.k, b_at=args.b_at,
        b_nat=args.b_nat, runs=args.runs)
    text = json.dumps(report.to_dict(), indent=2)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)


def cmd_eval(args):
    model = checkpoint.load_model(args.checkpoint)
    corpus = _load_corpus(args)
    result = bench.evaluate(
        model, corpus, mode=args.mode, k=args.k, b_at=args.b_at, b_nat=args.b_nat)
    print(f"sentences {result['sentences']}")
    print(f"sequence_accuracy {100.0 * result['sequence_accuracy']:.2f}")
    print(f"bleu {result['bleu']:.2f}")
    print(f"decoder_calls {result['decoder_calls']}")


# -----------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="hrt")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a parallel corpus")
    p.add_argument("--task", choices=["copy", "reverse", "mapped-swap"],
                   default="mapped-swap")
    p.add_argument("--n-pairs", type=int, default=2000)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=16)
    p.add_argument("--vocab-size", type=int, default=71)
    p.add_argument("--swap-prob", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-out", required=True)
    p.set_defaults(func=cmd_generate)

    for name, fn, needs_ckpt in (
        ("train", cmd_train, False), ("finetune", cmd_finetune, True)):
        p = sub.add_parser(name, help=f"{name} a model on a corpus")
        p.add_argument("--corpus", required=True)
        p.add_argument("--vocab", required=True)
        if needs_ckpt:
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--steps", type=int, required=True)
        p.add_argument("--total-steps", type=int,
                       help="curriculum horizon T (defaults to --steps)")
        p.add_argument("--k", type=int, default=2)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        p.add_argument("--trace", help="write the loss trace CSV here")
        p.add_argument("--log-every", type=int, default=0)
        if not needs_ckpt:
            p.add_argument("--at-only", action="store_true")
            _add_model_args(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("distill", help="re-target a corpus with a teacher")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--beam", type=int, default=5)
    p.add_argument("--length-penalty", type=float, default=0.6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("translate", help="decode text lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", default="-", help="source file or - for stdin")
    p.add_argument("--jsonl", help="write per-sentence decode records here")
    _add_decode_args(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("bench", help="measure decode throughput")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--json", help="also write the report here")
    _add_decode_args(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="sequence accuracy and BLEU on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    _add_decode_args(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
