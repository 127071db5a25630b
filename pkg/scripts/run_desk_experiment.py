#!/usr/bin/env python3
"""Run the full desk-scale experiment: corpus, two training phases, report.

Equivalent to:

    docsr gen-data  --config CFG
    docsr train     --config CFG
    docsr finetune  --config CFG
    docsr eval      --config CFG --baselines

and prints the final metric table plus total wall time.
"""

import argparse
import sys
import time

from docsr.cli import main as docsr_main
from docsr.config import desk_scale_config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--output-dir", default="runs/desk")
    parser.add_argument("--seed", type=int, default=1234)
    parser.add_argument("--config", help="use an existing config instead of the bundled one")
    args = parser.parse_args()

    if args.config:
        cfg_path = args.config
    else:
        cfg = desk_scale_config(output_dir=args.output_dir, seed=args.seed)
        cfg_path = f"{args.output_dir}.config.json"
        cfg.save(cfg_path)
        print(f"config: {cfg_path}")

    t0 = time.time()
    for step in (["gen-data"], ["train"], ["finetune"], ["eval", "--baselines"]):
        print(f"\n=== docsr {' '.join(step)} ===", flush=True)
        code = docsr_main(step + ["--config", cfg_path])
        if code != 0:
            return code
    print(f"\ntotal wall time: {time.time() - t0:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
