"""``engine`` command line: one entry point, one subcommand per workflow."""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from .chatml import Conversation, Turn, generation_prompt, load_conversations, render
from .checkpoint import CheckpointError, load_checkpoint, read_tensors, save_checkpoint
from .config import EngineConfig, ExtensionConfig, ModelConfig, TrainConfig, apply_overrides
from .corpus import read_documents, toy_config_path, toy_corpus_path
from .evaluation import SamplingPolicy, chunk_tokens, generate, length_sweep
from .model import build_model
from .tokenizer import (DEFAULT_SPECIALS, ENDOFTEXT, IM_END, Vocabulary, VocabularyError,
                        byte_vocabulary, compression_rate, decode, encode, load_vocabulary,
                        save_vocabulary, train_vocabulary)
from .training import METRIC_FIELDS, pretrain_batches, sft_batch, train

log = logging.getLogger("deskllm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require(path: str | Path | None, what: str) -> Path:
    if not path:
        raise UsageError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def vocab_path_for(checkpoint: str | Path) -> Path:
    p = Path(checkpoint)
    return p.with_name(p.name + ".vocab")


def _load_vocab(path: str | Path | None, checkpoint: str | Path | None = None) -> Vocabulary:
    if path is None and checkpoint is not None and vocab_path_for(checkpoint).exists():
        path = vocab_path_for(checkpoint)
    if path == "bytes":
        return byte_vocabulary()
    return load_vocabulary(_require(path, "vocabulary file"), DEFAULT_SPECIALS)


def _ext_from_args(args) -> ExtensionConfig:
    return ExtensionConfig.parse(args.ntk, args.logn, args.windows)


def _add_ext_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ntk", default="off", help="off | static:S | dynamic[:CHUNK]")
    p.add_argument("--logn", action="store_true", help="enable LogN attention scaling")
    p.add_argument("--windows", default=None, help="w0,w1,... | auto | auto:MIN:MAX")


def _engine_config(args) -> dict:
    base: dict = {}
    config = getattr(args, "config", None) or toy_config_path()
    if config:
        with open(_require(config, "config file"), encoding="utf-8") as fh:
            base = json.load(fh)
    apply_overrides(base, getattr(args, "set", None) or [])
    return base


# --- subcommands -----------------------------------------------------------------

def cmd_tokenize(args) -> int:
    v = _load_vocab(args.vocab)
    if args.decode:
        ids = [int(x) for x in args.text.replace(",", " ").split()]
        sys.stdout.buffer.write(decode(v, ids))
        sys.stdout.write("\n")
        return EXIT_OK
    text = args.text if args.text is not None else _require(args.file, "input file").read_text(encoding="utf-8")
    ids = encode(v, text, allow_specials=args.allow_specials).ids
    print(" ".join(map(str, ids)))
    return EXIT_OK


def cmd_train_vocab(args) -> int:
    docs = read_documents(_require(args.corpus, "corpus"))
    specials = args.specials.split(",") if args.specials else DEFAULT_SPECIALS
    v = train_vocabulary(docs, args.size, specials)
    save_vocabulary(v, args.out)
    print(f"wrote {v.base_vocab_size} ranks (+{len(v.specials)} specials) to {args.out}")
    return EXIT_OK


def cmd_bench_compression(args) -> int:
    v = _load_vocab(args.vocab)
    baseline = _load_vocab(args.baseline)
    print("corpus,tokens_vocab,tokens_baseline,compression_rate")
    for path in args.corpus:
        docs = read_documents(_require(path, "corpus"))
        ours = sum(len(encode(v, d).ids) for d in docs)
        theirs = sum(len(encode(baseline, d).ids) for d in docs)
        print(f"{path},{ours},{theirs},{compression_rate(v, docs, baseline):.6f}")
    return EXIT_OK


def cmd_train(args) -> int:
    raw = _engine_config(args)
    paths = raw.setdefault("paths", {})
    for key in ("corpus", "vocab", "checkpoint"):
        if getattr(args, key if key != "checkpoint" else "out", None):
            paths[key] = getattr(args, key if key != "checkpoint" else "out")
    train_raw = raw.setdefault("train", {})
    if args.steps is not None:
        train_raw["total_steps"] = args.steps
        train_raw["warmup_steps"] = min(train_raw.get("warmup_steps", TrainConfig.warmup_steps), args.steps)
    if args.seed is not None:
        raw["seed"] = args.seed
    if "model" not in raw:
        raise UsageError("config has no 'model' section")
    try:
        EngineConfig.from_dict({**raw, "model": {"vocab_size": 256, **raw["model"]}})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    seed = int(raw.get("seed", 0))
    _seed_everything(seed)

    if args.sft:
        return _train_sft(args, raw, seed)

    corpus = paths.get("corpus") or str(toy_corpus_path())
    docs = read_documents(_require(corpus, "corpus"))
    out = paths.get("checkpoint")
    if not out:
        raise UsageError("no output checkpoint path (--out or paths.checkpoint)")
    if paths.get("vocab"):
        vocab = _load_vocab(paths["vocab"])
    else:
        size = int(raw["model"].get("vocab_size", 256 + len(DEFAULT_SPECIALS))) - len(DEFAULT_SPECIALS)
        vocab = train_vocabulary(docs, max(256, size))
    raw["model"].setdefault("vocab_size", vocab.size)
    try:
        cfg = EngineConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    if cfg.model.vocab_size < vocab.size:
        raise UsageError(f"model.vocab_size={cfg.model.vocab_size} is smaller than the vocabulary ({vocab.size})")
    tc = cfg.train
    model = build_model(cfg.model, seed=seed, dropout=tc.dropout)
    ids = [encode(vocab, d).ids for d in docs]
    batches = pretrain_batches(ids, tc, vocab.special_id(ENDOFTEXT), seed=seed)
    _train_and_save(model, cfg.model, batches, tc, vocab, out, args)
    return EXIT_OK


def _train_sft(args, raw: dict, seed: int) -> int:
    init = _require(args.init, "initial checkpoint (--init)")
    model, mcfg = load_checkpoint(init)
    vocab = _load_vocab(raw.get("paths", {}).get("vocab"), init)
    tc = TrainConfig(**{**{"dropout": 0.1}, **raw.get("train", {})})
    out = raw.get("paths", {}).get("checkpoint") or args.out
    if not out:
        raise UsageError("no output checkpoint path (--out or paths.checkpoint)")
    streams = [render(c, vocab) for c in load_conversations(_require(args.sft, "SFT conversations"))]
    if not streams:
        raise UsageError("no conversations in the SFT file")
    pad = vocab.special_id(ENDOFTEXT)
    rng = random.Random(seed)

    def batches():
        while True:
            yield sft_batch(rng.sample(streams, min(tc.batch_size, len(streams))), tc.context, pad)

    _train_and_save(model, mcfg, batches(), tc, vocab, out, args)
    return EXIT_OK


def _train_and_save(model, mcfg: ModelConfig, batches, tc: TrainConfig, vocab: Vocabulary,
                    out: str, args) -> None:
    metrics_path = args.metrics
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    def checkpoint(step: int) -> None:
        save_checkpoint(model, mcfg, out_path.with_name(f"{out_path.name}.step{step}"))

    if metrics_path is None:
        print(",".join(METRIC_FIELDS))

        def echo(m: dict) -> bool:
            print(",".join(str(m[k]) for k in METRIC_FIELDS), flush=True)
            return False
    else:
        echo = None
    train(model, batches, tc, metrics_path=metrics_path, checkpoint_fn=checkpoint, stop_fn=echo)
    save_checkpoint(model, mcfg, out_path)
    save_vocabulary(vocab, vocab_path_for(out_path))
    if args.plot and metrics_path:
        from .plotting import plot_training_metrics
        plot_training_metrics(metrics_path, args.plot)
    log.info("wrote %s", out_path)


def cmd_eval_ppl(args) -> int:
    ckpt = _require(args.model, "model checkpoint")
    corpus_path = _require(args.corpus, "corpus")
    model, cfg = load_checkpoint(ckpt)
    vocab = _load_vocab(args.vocab, ckpt)
    lengths = sorted(int(x) for x in args.lengths.split(","))
    eod = vocab.special_id(ENDOFTEXT)
    stream: list[int] = []
    for doc in read_documents(corpus_path):
        stream.extend(encode(vocab, doc).ids)
        stream.append(eod)
    seqs = chunk_tokens(stream, max(lengths))
    if args.max_sequences:
        seqs = seqs[:args.max_sequences]
    window_range = None
    if args.windows and args.windows.startswith("auto:"):
        _, lo, hi = args.windows.split(":")
        window_range = (int(lo), int(hi))
    techniques = {}
    for label in args.techniques.split(","):
        ext = ExtensionConfig.from_label(label, ntk_chunk=args.ntk_chunk, window_range=window_range)
        if args.windows and not args.windows.startswith("auto") and ext.has_windows:
            ext = replace(ext, auto_windows=False, windows=tuple(int(w) for w in args.windows.split(",")))
        techniques[label] = ext
    report = length_sweep(model, techniques, lengths, seqs, corpus_id=corpus_path.name,
                          model_id=ckpt.name, workers=_threads())
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(report.to_table(), file=sys.stderr)
    if args.plot:
        from .plotting import plot_ppl_report
        plot_ppl_report(report, args.plot, train_context=cfg.train_context)
    return EXIT_OK


def _policy(args) -> SamplingPolicy:
    if args.policy == "greedy":
        return SamplingPolicy("greedy", seed=args.seed or 0)
    return SamplingPolicy("top_p", p=args.top_p, seed=args.seed or 0)


def cmd_generate(args) -> int:
    ckpt = _require(args.model, "model checkpoint")
    model, _ = load_checkpoint(ckpt)
    vocab = _load_vocab(args.vocab, ckpt)
    prompt = list(encode(vocab, args.prompt, allow_specials=True).ids)
    stops = [vocab.special_id(s) for s in (ENDOFTEXT, IM_END)]
    out = generate(model, _ext_from_args(args), prompt, _policy(args), args.max_new, stops)
    sys.stdout.buffer.write(decode(vocab, [t for t in out if t not in stops]))
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_chat(args) -> int:
    ckpt = _require(args.model, "model checkpoint")
    model, _ = load_checkpoint(ckpt)
    vocab = _load_vocab(args.vocab, ckpt)
    ext = _ext_from_args(args)
    stop = vocab.special_id(IM_END)
    turns = [Turn("system", args.system)] if args.system else []
    stream_in = sys.stdin
    while True:
        if stream_in.isatty():
            print("user> ", end="", flush=True)
        line = stream_in.readline()
        if not line:
            return EXIT_OK
        line = line.rstrip("\n")
        if line.strip() in ("/exit", "/quit"):
            return EXIT_OK
        turns.append(Turn("user", line))
        prompt = generation_prompt(Conversation(tuple(turns)), vocab)
        out = generate(model, ext, prompt, _policy(args), args.max_new, [stop])
        reply = decode(vocab, [t for t in out if t != stop]).decode("utf-8", errors="replace")
        turns.append(Turn("assistant", reply.replace("<|", "< |")))
        print(f"assistant> {reply}", flush=True)


def cmd_inspect_checkpoint(args) -> int:
    ckpt = _require(args.model, "model checkpoint")
    tensors = read_tensors(ckpt.read_bytes())
    try:
        _, cfg = load_checkpoint(ckpt)
        print(json.dumps(asdict(cfg), indent=2))
    except CheckpointError as exc:
        print(f"# config unavailable: {exc}")
    total = 0
    for name, t in tensors.items():
        total += t.numel()
        print(f"{name}\t{str(t.dtype).replace('torch.', '')}\t{tuple(t.shape)}")
    print(f"# {len(tensors)} tensors, {total} parameters")
    return EXIT_OK


# --- wiring ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="engine", description="Desk-scale decoder-only LM engine.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("tokenize", help="encode text to ids (or --decode ids to text)")
    p.add_argument("--vocab", required=True, help="rank file, or 'bytes' for the byte-only vocabulary")
    p.add_argument("--text", help="text to encode (or ids to decode)")
    p.add_argument("--file", help="read the text from this file")
    p.add_argument("--allow-specials", action="store_true", help="map special-token text to special ids")
    p.add_argument("--decode", action="store_true", help="treat --text as ids and print the bytes")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train-vocab", help="learn a BPE rank file from a corpus")
    p.add_argument("--corpus", required=True, help="text file; documents separated by <|endoftext|>")
    p.add_argument("--size", type=int, required=True, help="number of non-special tokens (>= 256)")
    p.add_argument("--out", required=True, help="rank file to write")
    p.add_argument("--specials", default=None, help="comma-separated special tokens")
    p.set_defaults(func=cmd_train_vocab)

    p = sub.add_parser("bench-compression", help="token-count ratio of a baseline vocabulary to ours")
    p.add_argument("--vocab", required=True, help="rank file under test")
    p.add_argument("--baseline", default="bytes", help="baseline rank file, or 'bytes'")
    p.add_argument("--corpus", required=True, nargs="+", help="one or more text files")
    p.set_defaults(func=cmd_bench_compression)

    p = sub.add_parser("train", help="pretrain (or --sft fine-tune) a model")
    p.add_argument("--config", help="engine config JSON (default: bundled toy config)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, e.g. train.peak_lr=1e-3")
    p.add_argument("--steps", type=int, help="override train.total_steps")
    p.add_argument("--corpus", help="override paths.corpus")
    p.add_argument("--vocab", help="override paths.vocab")
    p.add_argument("--out", help="checkpoint to write (overrides paths.checkpoint)")
    p.add_argument("--metrics", help="CSV file for per-step metrics (default: stdout)")
    p.add_argument("--plot", help="loss/lr figure to write (needs --metrics)")
    p.add_argument("--sft", help="JSON-lines conversations for loss-masked fine-tuning")
    p.add_argument("--init", help="checkpoint to start fine-tuning from")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-ppl", help="perplexity versus length for technique sets")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--corpus", required=True, help="plain-text evaluation file")
    p.add_argument("--vocab", help="rank file (default: the checkpoint's .vocab sidecar)")
    p.add_argument("--lengths", default="256,512,1024", help="comma-separated evaluation lengths")
    p.add_argument("--techniques", default="off,ntk,ntk+logn,ntk+logn+window",
                   help="comma-separated sets of ntk/logn/window joined by '+'")
    p.add_argument("--ntk-chunk", type=int, default=None, help="dynamic NTK chunk (default: train context)")
    p.add_argument("--windows", default=None, help="w0,w1,... or auto:MIN:MAX for sets using 'window'")
    p.add_argument("--max-sequences", type=int, default=None, help="score at most this many sequences")
    p.add_argument("--out", help="CSV report path (default: stdout)")
    p.add_argument("--plot", help="figure path for the report")
    p.set_defaults(func=cmd_eval_ppl)

    for name, func, help_ in (("generate", cmd_generate, "continue a prompt"),
                              ("chat", cmd_chat, "interactive ChatML loop on stdin")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--model", required=True, help="checkpoint path")
        p.add_argument("--vocab", help="rank file (default: the checkpoint's .vocab sidecar)")
        p.add_argument("--policy", choices=("greedy", "top-p"), default="greedy", help="decoding policy")
        p.add_argument("--top-p", type=float, default=0.9, help="nucleus mass for --policy top-p")
        p.add_argument("--seed", type=int, default=0, help="sampling seed")
        p.add_argument("--max-new", type=int, default=64, help="maximum new tokens")
        _add_ext_flags(p)
        if name == "generate":
            p.add_argument("--prompt", required=True, help="prompt text (special tokens allowed)")
        else:
            p.add_argument("--system", default="You are a helpful assistant.", help="system message")
        p.set_defaults(func=func)

    p = sub.add_parser("inspect-checkpoint", help="print config and tensor table")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_inspect_checkpoint)
    return parser


def _threads() -> int:
    raw = os.environ.get("ENGINE_THREADS")
    return max(1, int(raw)) if raw else 1


def _seed_everything(seed: int) -> None:
    random.seed(seed)
    torch.manual_seed(seed)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if os.environ.get("ENGINE_THREADS"):
        torch.set_num_threads(_threads())
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"engine {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError, CheckpointError, VocabularyError, RuntimeError) as exc:
        print(f"engine {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
