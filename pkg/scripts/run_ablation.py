#!/usr/bin/env python3
"""Component ablation with a longer schedule than the CLI default.

Runs the full 8-row toggle matrix (stem / attention / gated feed-forward /
upsampler) and writes the CSV report. Delegates to the packaged command so
the experiment stays reproducible from the command line alone.

At desk scale the rows differ mostly through optimization speed, not final
quality; treat the table as directional.
"""

import argparse
import sys

from gatepose.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=60)
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="ablation.csv")
    ap.add_argument("--config", help="base config JSON (default: tiny)")
    args = ap.parse_args()

    argv = ["ablate",
            "--steps", str(args.steps),
            "--synthetic", str(args.samples),
            "--seed", str(args.seed),
            "--out", args.out,
            "--log-every", "20"]
    if args.config:
        argv += ["--config", args.config]
    return cli_main(argv)


if __name__ == "__main__":
    sys.exit(main())
