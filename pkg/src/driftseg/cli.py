"""Batch-mode command line interface.

Subcommands: gen (synthetic dataset), train, eval, gradcheck, bench.
Every run echoes its fully resolved configuration as JSON before doing any
work.  Exit codes: 0 success, 1 check failure, 2 usage/config error,
3 I/O error.  Flags may also be supplied through a JSON config file
(--config); explicit flags win on conflict.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import tensor as T
from .attention import (AttentionConfig, ConfigError, cbam_block,
                        coord_attention, dual_attention, init_attention_params,
                        self_attention_2d)
from .dataset import (GenConfig, GenerationError, generate_dataset, load_split)
from .metrics import Detection, EvalError, GroundTruth, evaluate
from .model import Model, ModelConfig, build_model, c2f_block, extract_instances, forward
from .trainer import (CheckpointError, TrainConfig, TrainingError,
                      load_checkpoint, restore_model, seg_loss, train,
                      write_log_csv)

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_IO = 3

GRADCHECK_TOL = 1e-5


def _echo_config(cmd: str, ns: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(ns).items())
                if k not in ("func", "config", "cmd")}
    print(json.dumps({"command": cmd, **resolved}, sort_keys=True))


class _CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


# ---------------------------------------------------------------------------
# subcommand implementations


def cmd_gen(ns) -> int:
    if ns.count < 1:
        print("error: --count must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = GenConfig(image_size=ns.size, count=ns.count, seed=ns.seed,
                        difficulty=ns.difficulty)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = generate_dataset(cfg, ns.out)
    except GenerationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {cfg.count} samples to {ns.out} "
          f"({len(manifest['train'])} train / {len(manifest['test'])} test)")
    return EXIT_OK


def _model_config_from_ns(ns) -> ModelConfig:
    attn = AttentionConfig(kind=ns.attention,
                           channels=ns.base_width * 2 ** ns.depth,
                           mhsa_heads=ns.heads,
                           mhsa_extent=ns.extent)
    return ModelConfig(base_width=ns.base_width, depth=ns.depth,
                       attention=attn, use_c2f=ns.c2f,
                       instance_threshold=ns.tau)


def cmd_train(ns) -> int:
    manifest_path = os.path.join(ns.data, "manifest.json")
    if not os.path.exists(manifest_path):
        print(f"error: no manifest.json under {ns.data}", file=sys.stderr)
        return EXIT_IO
    with open(manifest_path) as fh:
        size = json.load(fh)["size"]
    try:
        mcfg = _model_config_from_ns(ns)
        tcfg = TrainConfig(epochs=ns.epochs, batch_size=ns.batch,
                           optimizer=ns.optimizer, lr=ns.lr, seed=ns.seed,
                           checkpoint_path=ns.out)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    model = build_model(mcfg, ns.seed, input_size=size)
    try:
        model, log = train(model, ns.data, tcfg, input_size=size)
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECK
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    if ns.log_csv:
        write_log_csv(ns.log_csv, log)
    print(f"trained {ns.epochs} epochs, final mean loss "
          f"{log[-1]['mean_loss']:.6f}, checkpoint at {ns.out}")
    return EXIT_OK


def _detections_from_gts(anns, image_id: str):
    return [Detection(mask=a.mask.copy(), box=a.box, confidence=1.0,
                      image_id=image_id) for a in anns]


def cmd_eval(ns) -> int:
    try:
        images, ann_lists, ids = load_split(ns.data, "test")
    except (GenerationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    gts = {img_id: [GroundTruth(mask=a.mask, box=a.box, image_id=img_id)
                    for a in anns]
           for img_id, anns in zip(ids, ann_lists)}

    if ns.self_test:
        dets = {img_id: _detections_from_gts(anns, img_id)
                for img_id, anns in zip(ids, ann_lists)}
        config = {"mode": "self-test", "iou": ns.iou}
    else:
        if not ns.model:
            print("error: --model is required unless --self-test", file=sys.stderr)
            return EXIT_CONFIG
        try:
            ckpt = load_checkpoint(ns.model)
        except (CheckpointError, OSError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_IO
        model = restore_model(ckpt)
        dets = {}
        for img, img_id in zip(images, ids):
            prob = forward(model, T.tensor(img[None])).data[0, 0]
            dets[img_id] = extract_instances(prob, ns.tau, image_id=img_id)
        config = {"mode": "model", "checkpoint": ns.model, "iou": ns.iou,
                  "tau": ns.tau, "model_config": ckpt.config.to_dict()}

    try:
        report = evaluate(dets, gts, tau_iou=ns.iou, config=config)
    except EvalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECK
    try:
        with open(ns.report, "w") as fh:
            fh.write(report.to_json() + "\n")
        if ns.csv:
            with open(ns.csv, "w") as fh:
                fh.write("\n".join(report.csv_rows()) + "\n")
        if ns.figures:
            from .report import render_figures
            render_figures(report, ns.figures)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    print(report.to_json())
    return EXIT_OK


def _gradcheck_block(block: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    if block == "loss":
        x = T.tensor(rng.uniform(0.05, 0.95, size=(1, 1, 4, 4)))
        gt = T.tensor((rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(float))
        return T.grad_check(lambda t: seg_loss(T.pointwise(t, "sigmoid"), gt), x)
    if block == "c2f":
        cfgm = ModelConfig(base_width=4, depth=1)
        model = build_model(cfgm, seed, input_size=8)
        # reuse only the c2f parameter group
        from .model import _add_c2f  # local helper
        params = {}
        _add_c2f(params, rng, "blk", 4, 2)
        x = T.tensor(rng.standard_normal((1, 4, 5, 5)))
        return T.grad_check(lambda t: T.sum_all(
            T.pointwise(c2f_block(t, params, "blk", 2), "sigmoid")), x)
    kind = block
    shape = {"coord": (1, 4, 5, 6), "cbam": (1, 4, 6, 6),
             "mhsa": (1, 4, 5, 5), "dual": (1, 4, 5, 5)}[kind]
    cfg = AttentionConfig(kind=kind, channels=shape[1], mhsa_heads=2,
                          mhsa_extent=None)
    params = init_attention_params(cfg, rng, shape[2], shape[3])
    # break the zero-bias symmetry so the check exercises generic points
    for name, p in params.items():
        if name.endswith("_b") or name.endswith(".b"):
            p.data[...] = rng.uniform(-0.1, 0.1, size=p.data.shape)
    x = T.tensor(rng.standard_normal(shape))

    def f(t):
        if kind == "coord":
            y = coord_attention(t, params)
        elif kind == "cbam":
            y = cbam_block(t, params)
        elif kind == "mhsa":
            y = self_attention_2d(t, params, cfg)
        else:
            y = dual_attention(t, params, cfg)
        return T.sum_all(T.pointwise(y, "sigmoid"))

    return T.grad_check(f, x)


def cmd_gradcheck(ns) -> int:
    if ns.block not in ("coord", "cbam", "mhsa", "dual", "c2f", "loss", "all"):
        print(f"error: unknown block {ns.block!r}", file=sys.stderr)
        return EXIT_CONFIG
    blocks = (["coord", "cbam", "mhsa", "dual", "c2f", "loss"]
              if ns.block == "all" else [ns.block])
    worst = 0.0
    for block in blocks:
        for seed in range(ns.seeds):
            err = _gradcheck_block(block, seed)
            worst = max(worst, err)
            print(f"{block} seed={seed} max_rel_err={err:.3e}")
    print(f"overall max relative error: {worst:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    return EXIT_OK if worst <= GRADCHECK_TOL else EXIT_CHECK


def cmd_bench(ns) -> int:
    if ns.iters < 1:
        print("error: --iters must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        shape = tuple(int(s) for s in ns.shape.split(","))
        if len(shape) != 4:
            raise ValueError
    except ValueError:
        print(f"error: --shape must be N,C,H,W, got {ns.shape!r}", file=sys.stderr)
        return EXIT_CONFIG
    if ns.block not in ("coord", "cbam", "mhsa", "dual"):
        print(f"error: unknown block {ns.block!r}", file=sys.stderr)
        return EXIT_CONFIG
    rng = np.random.default_rng(ns.seed)
    cfg = AttentionConfig(kind=ns.block, channels=shape[1],
                          mhsa_heads=min(4, shape[1]))
    params = init_attention_params(cfg, rng, shape[2], shape[3])
    apply = {"coord": lambda t: coord_attention(t, params),
             "cbam": lambda t: cbam_block(t, params),
             "mhsa": lambda t: self_attention_2d(t, params, cfg),
             "dual": lambda t: dual_attention(t, params, cfg)}[ns.block]

    def run(with_backward: bool) -> float:
        x = T.tensor(rng.standard_normal(shape), requires_grad=True)
        t0 = time.perf_counter()
        y = T.sum_all(apply(x))
        if with_backward:
            T.backward(y)
        return time.perf_counter() - t0

    for _ in range(3):
        run(True)
    rows = [(i, run(False), run(True)) for i in range(ns.iters)]
    lines = ["iter,forward_s,forward_backward_s"]
    lines += [f"{i},{f:.6f},{fb:.6f}" for i, f, fb in rows]
    out = "\n".join(lines)
    if ns.csv:
        with open(ns.csv, "w") as fh:
            fh.write(out + "\n")
    print(out)
    fwd = sorted(r[1] for r in rows)
    fb = sorted(r[2] for r in rows)

    def pct(vals, q):
        return vals[min(len(vals) - 1, int(q * len(vals)))]

    print(f"forward median={pct(fwd, 0.5):.6f}s p90={pct(fwd, 0.9):.6f}s; "
          f"forward+backward median={pct(fb, 0.5):.6f}s p90={pct(fb, 0.9):.6f}s")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _CliParser(prog="driftseg")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--out", default=None)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--difficulty", choices=["easy", "hard"], default="easy")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--data", default=None)
    p.add_argument("--attention", choices=["none", "coord", "cbam", "mhsa", "dual"],
                   default="none")
    p.add_argument("--c2f", action="store_true")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--extent", type=int, default=None)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--log-csv", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--data", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--report", default="report.json")
    p.add_argument("--csv", default=None)
    p.add_argument("--figures", default=None,
                   help="directory for PR-curve and summary figures")
    p.add_argument("--self-test", action="store_true",
                   help="use the ground truth as predictions (all metrics 1.0)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of each block")
    p.add_argument("--block", default="all")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time attention blocks")
    p.add_argument("--block", default="cbam")
    p.add_argument("--shape", default="1,16,16,16")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_bench)

    for sp in sub.choices.values():
        sp.add_argument("--config", default=None,
                        help="JSON file with flag defaults (explicit flags win)")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if ns.config:
        # re-parse with the file's values as defaults so explicit flags win
        try:
            with open(ns.config) as fh:
                defaults = json.load(fh)
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_IO
        subparser = None
        for action in parser._subparsers._group_actions:
            if ns.cmd in action.choices:
                subparser = action.choices[ns.cmd]
        valid = {a.dest for a in subparser._actions}
        unknown = set(defaults) - valid
        if unknown:
            print(f"error: unknown config keys {sorted(unknown)}", file=sys.stderr)
            return EXIT_CONFIG
        subparser.set_defaults(**defaults)
        try:
            ns = parser.parse_args(argv)
        except SystemExit as e:
            return int(e.code or 0)
    # flags that must be present after merging config-file defaults
    required = {"gen": ("out",), "train": ("data",), "eval": ("data",)}
    for dest in required.get(ns.cmd, ()):
        if getattr(ns, dest, None) is None:
            print(f"error: --{dest} is required", file=sys.stderr)
            return EXIT_CONFIG
    _echo_config(ns.cmd, ns)
    return ns.func(ns)


if __name__ == "__main__":
    sys.exit(main())
