"""Command-line entry point: ``pyramid-asr {synth,train,eval,decode,analyze,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 verification failure.
"""

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import ctc
from .errors import CheckpointError, CTCInfeasibleError, StructureError, WavParseError
from .frontend import load_wav, log_mel_filterbank, save_wav, write_features
from .model import ModelConfig, analytic_param_counts, build, preset, receptive_field
from .training import (Schedule, Trainer, Utterance, decode_corpus, load_checkpoint, model_from_checkpoint,
                       save_checkpoint, split_corpus, synth_corpus)
from .verify import GRAD_TOL, run_suite

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("pyramid_asr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _model_flags(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", choices=["S", "M", "L"], help="architecture preset")
    g.add_argument("--config", type=Path, help="key = value model config file")


def build_parser():
    parser = _Parser(prog="pyramid-asr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic tone corpus (WAVs, manifest.csv, vocab.txt)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--n-utts", type=int, default=100, help="number of utterances")
    p.add_argument("--vocab-size", type=int, default=12, help="token count including the blank")
    p.add_argument("--max-label-len", type=int, default=5, help="longest label sequence")

    p = sub.add_parser("train", help="train on a manifest; writes checkpoint.pyrc and metrics.csv")
    p.add_argument("manifest", type=Path, help="CSV wav_path,transcript with vocab.txt alongside")
    _model_flags(p)
    p.add_argument("--seed", type=int, default=0, help="seed for init, dropout and batch order")
    p.add_argument("--epochs", type=int, default=10, help="passes over the training split")
    p.add_argument("--batch-size", type=int, default=32, help="utterances per step")
    p.add_argument("--lr-formula", choices=["standard", "literal"], default="standard",
                   help="warm-up schedule variant")
    p.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("eval", help="corpus CER in percent, 2 decimals")
    p.add_argument("manifest", type=Path, help="reference manifest (CSV wav_path,transcript)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint", type=Path, help="decode the manifest audio with this model")
    g.add_argument("--hyp", type=Path, help="score a hypothesis manifest with the same wav_path keys")

    p = sub.add_parser("decode", help="print greedy CTC transcripts for WAV files")
    p.add_argument("wavs", type=Path, nargs="+", help="16 kHz mono 16-bit PCM files")
    p.add_argument("--checkpoint", type=Path, required=True, help="trained checkpoint")
    p.add_argument("--vocab", type=Path, help="vocabulary file; prints token ids when omitted")

    p = sub.add_parser("analyze", help="print the pyramid table for a configuration")
    _model_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    return parser


def _config_from(args):
    if getattr(args, "config", None):
        return ModelConfig.from_text(args.config.read_text(encoding="utf-8"))
    return preset(args.preset or "M")


def read_manifest(path):
    """``wav_path,transcript`` rows (header optional); paths are relative to the manifest."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if i == 0 and row == ["wav_path", "transcript"]:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{i + 1}: expected 2 columns, got {len(row)}")
            rows.append((row[0], row[1]))
    return rows


def write_manifest(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["wav_path", "transcript"])
        w.writerows(rows)


def load_corpus(manifest):
    tokens = ctc.read_vocab(manifest.parent / "vocab.txt")
    corpus = []
    for wav, text in read_manifest(manifest):
        wpath = manifest.parent / wav
        corpus.append(Utterance(ctc.encode(text, tokens), load_wav(wpath), name=wav))
    return corpus, tokens


def cmd_synth(args):
    args.out.mkdir(parents=True, exist_ok=True)
    corpus = synth_corpus(args.seed, args.n_utts, args.vocab_size, args.max_label_len)
    tokens = synth_tokens(args.vocab_size)
    ctc.write_vocab(args.out / "vocab.txt", tokens)
    rows = []
    for u in corpus:
        save_wav(args.out / f"{u.name}.wav", u.waveform)
        write_features(args.out / f"{u.name}.pyrf", log_mel_filterbank(u.waveform))
        rows.append((f"{u.name}.wav", ctc.decode_ids(u.labels, tokens)))
    write_manifest(args.out / "manifest.csv", rows)
    print(f"wrote {len(corpus)} utterances to {args.out}")
    return EXIT_OK


def synth_tokens(vocab_size):
    return [f"t{k:02d}" for k in range(1, vocab_size)]


def cmd_train(args):
    corpus, tokens = load_corpus(args.manifest)
    train_set, dev_set = split_corpus(corpus)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        trainer = Trainer.from_checkpoint(load_checkpoint(args.checkpoint), train_set, dev_set or None)
    else:
        config = _config_from(args)
        config.vocab_size = len(tokens) + 1
        config.validate()
        model = build(config, seed=args.seed, dtype=np.float32)
        steps_per_epoch = -(-len(train_set) // args.batch_size)
        schedule = Schedule(config.d_model, args.epochs * steps_per_epoch, formula=args.lr_formula)
        trainer = Trainer(model, train_set, schedule, args.batch_size, args.seed, dev_set or None)

    def report(row):
        print(f"step {row['step']} lr {row['lr']:.6g} loss {row['loss']:.4f} cer {100 * row['cer']:.2f}")

    trainer.run(epochs=args.epochs, progress=report)
    trainer.history.write_csv(args.out / "metrics.csv")
    save_checkpoint(args.out / "checkpoint.pyrc", trainer.checkpoint())
    return EXIT_OK


def cmd_eval(args):
    refs = read_manifest(args.manifest)
    tokens = ctc.read_vocab(args.manifest.parent / "vocab.txt")
    if args.hyp:
        hyp_map = dict(read_manifest(args.hyp))
        missing = [w for w, _ in refs if w not in hyp_map]
        if missing:
            raise ValueError(f"{args.hyp}: no hypothesis for {missing[0]}")
        hyps = [ctc.encode(hyp_map[w], tokens) for w, _ in refs]
    else:
        model = model_from_checkpoint(load_checkpoint(args.checkpoint))
        corpus = [Utterance(ctc.encode(t, tokens), load_wav(args.manifest.parent / w), name=w) for w, t in refs]
        hyps = decode_corpus(model, corpus)
    score = ctc.corpus_cer(hyps, [ctc.encode(t, tokens) for _, t in refs])
    print(f"CER {100 * score:.2f}")
    return EXIT_OK


def cmd_decode(args):
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    tokens = ctc.read_vocab(args.vocab) if args.vocab else None
    corpus = [Utterance([], load_wav(w), name=str(w)) for w in args.wavs]
    for u, ids in zip(corpus, decode_corpus(model, corpus)):
        text = ctc.decode_ids(ids, tokens) if tokens else " ".join(str(i) for i in ids)
        print(f"{u.name}\t{text}")
    return EXIT_OK


def table_rates(rates):
    """Table-style abbreviation: lists longer than four print as ``a-b-c-...-z``."""
    if len(rates) <= 4:
        return "-".join(str(r) for r in rates)
    return "-".join(str(r) for r in rates[:3]) + f"-...-{rates[-1]}"


def analyze_lines(config):
    c = config.validate()
    schedule = c.layer_dilations()
    counts = analytic_param_counts(c)
    dash = lambda xs: "-".join(str(x) for x in xs)  # noqa: E731
    lines = [
        f"Num ConvBlock      {c.conv_blocks}",
        f"Expansion Factor   {dash(c.expansion_factors)}",
        f"Attention Heads    {c.heads}",
        f"Num Layers         {c.n_layers}",
        f"Num Branches       {c.n_branches}",
        f"Dilated Rate       {table_rates(schedule[0])}",
        f"Num Model Dim      {c.d_model}",
        f"DCNN-Attention modules  {c.module_count}",
        f"DualFusionNet modules   {c.fusion_count}",
        "",
        "layer  modules  dilation rates          receptive field (frames / input frames)",
    ]
    for i, rates in enumerate(schedule):
        rfs = [receptive_field(c, i, j) for j in range(len(rates))]
        rfi = [receptive_field(c, i, j, input_frames=True) for j in range(len(rates))]
        lines.append(f"{i + 1:<6} {len(rates):<8} {dash(rates):<23} {dash(rfs)} / {dash(rfi)}")
    lines += ["", "component        parameters"]
    lines += [f"{k:<16} {v:,}" for k, v in counts.items()]
    return lines


def cmd_analyze(args):
    print("\n".join(analyze_lines(_config_from(args))))
    return EXIT_OK


def cmd_gradcheck(args):
    worst = 0.0
    for name, (err, secs) in run_suite(args.seed).items():
        status = "ok" if err < GRAD_TOL else "FAIL"
        print(f"{name:<16} max rel err {err:.3e}  ({secs:.1f}s)  {status}")
        worst = max(worst, err)
    return EXIT_OK if worst < GRAD_TOL else EXIT_VERIFY


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "decode": cmd_decode,
            "analyze": cmd_analyze, "gradcheck": cmd_gradcheck}


def run(argv=None):
    level = os.environ.get("PYRAMID_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"pyramid-asr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.verb](args)
    except (OSError, ValueError, KeyError, StructureError, WavParseError, CheckpointError,
            CTCInfeasibleError) as exc:
        print(f"pyramid-asr: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
