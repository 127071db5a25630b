#!/usr/bin/env python3
"""Write the bundled desk-scale run config to a JSON file.

Usage: python scripts/make_desk_config.py [CONFIG_PATH] [--output-dir DIR] [--seed N]
"""

import argparse

from docsr.config import desk_scale_config


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("config_path", nargs="?", default="desk_config.json")
    parser.add_argument("--output-dir", default="runs/desk")
    parser.add_argument("--seed", type=int, default=1234)
    args = parser.parse_args()
    cfg = desk_scale_config(output_dir=args.output_dir, seed=args.seed)
    cfg.save(args.config_path)
    print(f"wrote {args.config_path} (outputs -> {args.output_dir})")


if __name__ == "__main__":
    main()
