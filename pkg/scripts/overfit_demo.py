"""Overfit a toy pyramid model on a 10-utterance synthetic corpus and log the curve.

    python scripts/overfit_demo.py --out runs/overfit
"""

import argparse
import time
from pathlib import Path

import numpy as np

from pyramid_asr.model import ModelConfig, build
from pyramid_asr.training import Schedule, Trainer, synth_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/overfit"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--vocab-size", type=int, default=30)
    ap.add_argument("--max-label-len", type=int, default=8)
    ap.add_argument("--keep-going", action="store_true", help="run all steps instead of stopping at CER 0")
    args = ap.parse_args()

    config = ModelConfig(d_model=32, n_layers=2, n_branches=2, dilation_schedule=[[1, 2]], heads=4,
                         conv_blocks=4, expansion_factors=[2] * 4, vocab_size=args.vocab_size, se_reduction=8)
    corpus = synth_corpus(args.seed, 10, args.vocab_size, args.max_label_len)
    model = build(config, seed=args.seed, dtype=np.float32)
    trainer = Trainer(model, corpus, Schedule(config.d_model, args.steps), batch_size=10, seed=args.seed)

    def show(row):
        print(f"step {row['step']:5d}  lr {row['lr']:.2e}  loss {row['loss']:8.4f}  CER {100 * row['cer']:.2f}")

    t0 = time.perf_counter()
    trainer.run(steps=args.steps, eval_every=100, eval_every_epoch=False,
                stop_at_cer=None if args.keep_going else 0.0, progress=show)
    losses = np.array(trainer.history.losses)
    ma = np.convolve(losses, np.ones(100) / 100, mode="valid")
    print(f"{trainer.step} steps in {time.perf_counter() - t0:.1f}s; "
          f"100-step moving average rose {(np.diff(ma) > 0).sum()} times out of {len(ma) - 1}")
    args.out.mkdir(parents=True, exist_ok=True)
    trainer.history.write_csv(args.out / "metrics.csv")
    print(f"wrote {args.out / 'metrics.csv'}")


if __name__ == "__main__":
    main()
