#!/usr/bin/env python3
"""Measured attention cost as the token count grows.

Runs the agent-routed mixer and the full softmax reference over feature
maps of increasing width and tallies the multiply-accumulates actually
issued by the tensor core. Agent attention should track the token count
linearly at a fixed agent budget; the full path grows with its square.
"""

import argparse
import sys

import numpy as np

from gatepose import tensor as T
from gatepose.blocks import AgentAttention, FullAttention


def measure(module, shape):
    x = T.Tensor(np.random.default_rng(0).standard_normal(shape))
    with T.no_grad(), T.count_macs() as c:
        module(x)
    return c.total


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--channels", type=int, default=8)
    ap.add_argument("--agents", type=int, default=16)
    ap.add_argument("--height", type=int, default=32)
    ap.add_argument("--widths", type=int, nargs="+",
                    default=[32, 64, 128, 256])
    args = ap.parse_args()

    agent = AgentAttention(args.channels, 1, args.agents,
                           np.random.default_rng(0)).eval()
    full = FullAttention(args.channels, 1,
                         np.random.default_rng(0)).eval()

    print("tokens,agent_macs,full_macs,agent_ratio,full_ratio")
    prev_a = prev_f = None
    for w in args.widths:
        shape = (1, args.channels, args.height, w)
        a = measure(agent, shape)
        f = measure(full, shape)
        ra = "" if prev_a is None else f"{a / prev_a:.4f}"
        rf = "" if prev_f is None else f"{f / prev_f:.4f}"
        print(f"{args.height * w},{a},{f},{ra},{rf}")
        prev_a, prev_f = a, f
    print("ratio columns compare each row against the previous one",
          file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
