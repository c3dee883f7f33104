"""Print the standard warm-up schedule next to the formula as printed, as CSV.

    python scripts/lr_schedules.py --total 100000 > lr.csv
"""

import argparse

from pyramid_asr.training import Schedule, lr_at


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--d-model", type=int, default=256)
    ap.add_argument("--total", type=int, default=100_000)
    ap.add_argument("--every", type=int, default=1000)
    args = ap.parse_args()

    std = Schedule(args.d_model, args.total)
    literal = Schedule(args.d_model, args.total, formula="literal")
    print("step,standard,literal")
    for step in [1, *range(args.every, args.total + 1, args.every)]:
        print(f"{step},{lr_at(step, std):.6e},{lr_at(step, literal):.6e}")


if __name__ == "__main__":
    main()
