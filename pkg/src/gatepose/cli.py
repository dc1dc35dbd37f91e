"""Command-line entry point.

Standard output carries machine-readable results only (JSON or CSV);
progress logs and diagnostics go to standard error. Every command exits
nonzero on failure.

Commands:
    train   fit a model on synthetic poses, write a checkpoint
    eval    metrics for a checkpoint on a synthetic set
    ablate  the 8-row component toggle matrix, reported as CSV
    infer   heatmaps (PGM) and keypoints (JSON) for one image
"""

import argparse
import dataclasses
import json
import os
import sys

from . import checkpoint, pnm
from . import tensor as T
from .data import dataset_for_config
from .errors import GatePoseError
from .fusion import argmax_keypoints
from .model import Model, ModelConfig, tiny_config
from .optim import Adam
from .train import evaluate, train_loop

ABLATION_ROWS = (
    # (glace, agent_attention, gefb, dysample), baseline first, full last.
    (0, 0, 0, 0),
    (1, 0, 0, 0),
    (0, 1, 0, 0),
    (0, 0, 1, 0),
    (1, 1, 0, 0),
    (1, 0, 1, 0),
    (1, 1, 1, 0),
    (1, 1, 1, 1),
)


def _read_config(path):
    if path is None:
        return tiny_config()
    with open(path, "r", encoding="utf-8") as f:
        return ModelConfig.from_json(f.read())


def cmd_train(args):
    config = _read_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    samples = dataset_for_config(config, n_samples=args.synthetic)
    model = Model(config)
    optimizer = Adam(model.named_parameters(), lr=config.learning_rate)
    history = train_loop(model, samples, args.steps, optimizer=optimizer,
                         log_every=args.log_every)
    checkpoint.save(model, args.out, step=args.steps, optimizer=optimizer)
    final = history[-1] if history else None
    print(json.dumps({
        "checkpoint": args.out,
        "steps": args.steps,
        "final": None if final is None else
            {"total": final.total, "terms": final.terms},
    }))
    return 0


def cmd_eval(args):
    model, _, _ = checkpoint.load(args.ckpt)
    config = model.config
    seed = config.seed if args.seed is None else args.seed
    samples = dataset_for_config(config, n_samples=args.synthetic,
                                 seed=seed)
    metrics = evaluate(model, samples, alpha=args.alpha)
    print(json.dumps(metrics))
    return 0


def cmd_ablate(args):
    base = _read_config(args.config)
    if args.seed is not None:
        base = dataclasses.replace(base, seed=args.seed)
    samples = dataset_for_config(base, n_samples=args.synthetic)
    lines = ["glace,agent_attention,gefb,dysample,pck,mse"]
    for row in ABLATION_ROWS:
        glace, agent, gefb, dysample = row
        config = dataclasses.replace(
            base,
            use_glace=bool(glace),
            use_agent_attention=bool(agent),
            use_gefb=bool(gefb),
            use_dysample=bool(dysample))
        model = Model(config)
        history = train_loop(model, samples, args.steps,
                             log_every=args.log_every)
        metrics = evaluate(model, samples, alpha=args.alpha)
        final_mse = history[-1].terms["gt_mse"] if history \
            else metrics["mse"]
        print(f"row {row}: final gt_mse={final_mse:.6f} "
              f"pck={metrics['pck']:.4f}", file=sys.stderr)
        lines.append(f"{glace},{agent},{gefb},{dysample},"
                     f"{metrics['pck']:.6f},{final_mse:.8f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="ascii") as f:
            f.write(text)
    sys.stdout.write(text)
    return 0


def cmd_infer(args):
    model, _, _ = checkpoint.load(args.ckpt)
    config = model.config
    H, W = config.input_size
    if args.image is not None:
        image = pnm.read_ppm(args.image)
        if image.shape != (3, H, W):
            raise GatePoseError(
                f"image is {image.shape[2]}x{image.shape[1]}, model "
                f"expects {W}x{H}")
    else:
        seed = config.seed if args.seed is None else args.seed
        samples = dataset_for_config(config, n_samples=args.synthetic + 1,
                                     seed=seed)
        image = samples[args.synthetic].image
    model.eval()
    with T.no_grad():
        result = model(image[None])
    heatmaps = result.heatmaps.data[0]
    keypoints = argmax_keypoints(result.heatmaps)[0]
    os.makedirs(args.out, exist_ok=True)
    for j in range(heatmaps.shape[0]):
        pnm.write_pgm(os.path.join(args.out, f"heatmap_{j:02d}.pgm"),
                      heatmaps[j])
    payload = json.dumps({
        "keypoints": [[float(x), float(y), float(s)]
                      for x, y, s in keypoints],
        "heatmap_size": list(heatmaps.shape[1:]),
    })
    with open(os.path.join(args.out, "keypoints.json"), "w",
              encoding="utf-8") as f:
        f.write(payload + "\n")
    print(payload)
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="gatepose",
        description="Pose-estimation training and evaluation over "
                    "synthetic data.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on synthetic poses")
    t.add_argument("--config", help="model config JSON "
                                    "(default: built-in tiny)")
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    t.add_argument("--log-every", type=int, default=25)
    t.add_argument("--synthetic", type=int, default=8, metavar="N",
                   help="number of synthetic training samples")
    t.set_defaults(run=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--alpha", type=float, default=0.1,
                   help="PCK threshold fraction of the heatmap diagonal")
    e.add_argument("--seed", type=int, default=None,
                   help="dataset seed (default: checkpoint config seed)")
    e.add_argument("--synthetic", type=int, default=8, metavar="N",
                   help="number of synthetic eval samples")
    e.set_defaults(run=cmd_eval)

    a = sub.add_parser("ablate", help="run the component toggle matrix")
    a.add_argument("--config", help="base config JSON "
                                    "(default: built-in tiny)")
    a.add_argument("--steps", type=int, default=40)
    a.add_argument("--out", help="also write the CSV here")
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--alpha", type=float, default=0.1)
    a.add_argument("--log-every", type=int, default=0)
    a.add_argument("--synthetic", type=int, default=8, metavar="N")
    a.set_defaults(run=cmd_ablate)

    i = sub.add_parser("infer", help="heatmaps and keypoints for an image")
    i.add_argument("image", nargs="?",
                   help="plain PPM (P3) input at the model input size")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--synthetic", type=int, default=0, metavar="IDX",
                   help="use synthetic sample IDX instead of a file")
    i.add_argument("--seed", type=int, default=None)
    i.add_argument("--out", default=".", help="output directory")
    i.set_defaults(run=cmd_infer)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.run(args)
    except (GatePoseError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
