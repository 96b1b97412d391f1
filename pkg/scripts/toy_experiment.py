#!/usr/bin/env python3
"""Toy observer/collaborator comparison over several seeds; prints an EER table.

    python3 scripts/toy_experiment.py --out-dir runs/toy --seeds 0 1 2
"""

import argparse
import logging

from collabwm.toy import ToySettings, run_seed


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=ToySettings.steps)
    p.add_argument("--crop-len", type=int, default=ToySettings.crop_len)
    p.add_argument("--lr", type=float, default=ToySettings.lr_init)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    s = ToySettings(steps=args.steps, crop_len=args.crop_len, lr_init=args.lr)
    systems = ["init", *s.runs]
    print("seed\tcondition\t" + "\t".join(systems))
    for seed in args.seeds:
        res = run_seed(seed, args.out_dir, s)
        for cond in s.eval_conditions:
            print(f"{seed}\t{cond}\t" + "\t".join(f"{res['eer'][k][cond]:.2f}" for k in systems), flush=True)


if __name__ == "__main__":
    main()
