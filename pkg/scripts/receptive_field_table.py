"""Analytic vs. measured receptive field for every module of a preset.

    python scripts/receptive_field_table.py --preset S
"""

import argparse

from pyramid_asr.model import build, measure_receptive_field, preset, receptive_field


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", choices=["S", "M", "L"], default="S")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    config = preset(args.preset)
    model = build(config, seed=args.seed)
    print("layer branch dilation  analytic measured  input-frames")
    mismatches = 0
    for i, rates in enumerate(config.layer_dilations()):
        for j, rate in enumerate(rates):
            a = receptive_field(config, i, j)
            m = measure_receptive_field(model, layer=i, branch=j, seed=args.seed)
            mismatches += a != m
            print(f"{i + 1:5d} {j + 1:6d} {rate:8d}  {a:8d} {m:8d}  {receptive_field(config, i, j, True):12d}")
    print("all equal" if not mismatches else f"{mismatches} mismatches")


if __name__ == "__main__":
    main()
