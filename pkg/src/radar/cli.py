"""``radar`` command line: schedule tooling, training, generation, benchmarks.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.  All
randomness flows from explicit ``--seed`` flags; outputs are byte-deterministic
for fixed seeds.  ``RADAR_THREADS`` caps worker threads.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import torch


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_rect(text: str):
    try:
        r0, c0, r1, c1 = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"bad rectangle {text!r}: expected r0,c0,r1,c1") from exc
    if not (r0 < r1 and c0 < c1):
        raise UsageError(f"empty rectangle {text!r}")
    return r0, c0, r1, c1


def build_parser() -> _Parser:
    p = _Parser(prog="radar", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("schedule", help="build and print a ring schedule")
    sp.add_argument("--grid", nargs=2, type=int, required=True, metavar=("H", "W"))
    sp.add_argument("--anchor", default="center")
    group = sp.add_mutually_exclusive_group()
    group.add_argument("--thickness", type=int, default=1)
    group.add_argument("--steps", type=int, help="exact step count (center anchor)")
    sp.add_argument("--out", help="write the schedule file here instead of stdout")

    mp = sub.add_parser("mask", help="dump an attention mask as 0/1 rows")
    mp.add_argument("--schedule", required=True, help="schedule file")
    mp.add_argument("--dump", action="store_true")
    mp.add_argument("--prefix-len", type=int, default=1)
    mp.add_argument("--block-causal", action="store_true",
                    help="drop the interior restriction")
    mp.add_argument("--out")

    tp = sub.add_parser("train", help="train a generator from a config file")
    tp.add_argument("--config", required=True)
    tp.add_argument("--out", required=True, help="checkpoint path")
    tp.add_argument("--metrics", help="tab-separated per-epoch metrics file")
    tp.add_argument("--raster", action="store_true",
                    help="train the sequential baseline instead")

    gp = sub.add_parser("gen", help="generate a token grid")
    gp.add_argument("--ckpt", required=True)
    gp.add_argument("--class", dest="class_id", type=int, default=0)
    gp.add_argument("--schedule", default="default",
                    help="schedule file, 'default', or 'stepsN'")
    gp.add_argument("--seed", type=int, default=0)
    gp.add_argument("--out", required=True)
    gp.add_argument("--temperature", type=float, default=1.0)
    gp.add_argument("--top-k", type=int)
    gp.add_argument("--cfg-scale", type=float)
    gp.add_argument("--correction", default="greedy",
                    choices=("off", "greedy", "thresholded"))
    gp.add_argument("--log-revisions", help="tab-separated revision log path")

    op = sub.add_parser("outpaint", help="complete a grid around kept regions")
    op.add_argument("--ckpt", required=True)
    op.add_argument("--base", required=True, help="token grid text file")
    op.add_argument("--keep", action="append", required=True,
                    metavar="r0,c0,r1,c1", help="region to preserve (repeatable)")
    op.add_argument("--class", dest="class_id", type=int, default=0)
    op.add_argument("--seed", type=int, default=0)
    op.add_argument("--schedule", default="default")
    op.add_argument("--out", required=True)

    ep = sub.add_parser("edit", help="regenerate a region under a class label")
    ep.add_argument("--ckpt", required=True)
    ep.add_argument("--base", required=True)
    ep.add_argument("--region", action="append", required=True,
                    metavar="r0,c0,r1,c1", help="region to regenerate (repeatable)")
    ep.add_argument("--class", dest="class_id", type=int, required=True)
    ep.add_argument("--seed", type=int, default=0)
    ep.add_argument("--schedule", default="default")
    ep.add_argument("--out", required=True)

    bp = sub.add_parser("bench", help="run a benchmark suite to TSV")
    bp.add_argument("--suite", required=True, choices=("speed", "ablate", "correction"))
    bp.add_argument("--out", required=True)
    bp.add_argument("--ckpt", help="generator checkpoint (speed, correction)")
    bp.add_argument("--raster-ckpt", help="baseline checkpoint (speed)")
    bp.add_argument("--n", type=int, default=100, help="timed decodes per row")
    bp.add_argument("--warmup", type=int, default=10)
    bp.add_argument("--grid", nargs=2, type=int, default=(8, 8), metavar=("H", "W"))
    bp.add_argument("--epochs", type=int, default=3, help="ablation budget")
    bp.add_argument("--grids-per-epoch", type=int, default=48)
    bp.add_argument("--seed", type=int, default=0)

    kp = sub.add_parser("tokenizer-train", help="train the patch VQ tokenizer")
    kp.add_argument("--out", required=True)
    kp.add_argument("--images", type=int, default=256,
                    help="number of procedural training images")
    kp.add_argument("--image-size", type=int, default=32)
    kp.add_argument("--vocab-size", type=int, default=64)
    kp.add_argument("--patch-size", type=int, default=4)
    kp.add_argument("--epochs", type=int, default=10)
    kp.add_argument("--seed", type=int, default=0)

    rp = sub.add_parser("render", help="render a token grid to an image file")
    rp.add_argument("--grid", required=True, help="token grid text file")
    rp.add_argument("--mode", default="palette", choices=("palette", "vq-decode"))
    rp.add_argument("--vocab", type=int, default=64)
    rp.add_argument("--tokenizer", help="tokenizer checkpoint (vq-decode mode)")
    rp.add_argument("--scale", type=int, default=8)
    rp.add_argument("--out", required=True)
    return p


def _load_schedule(spec: str, grid_h: int, grid_w: int):
    from .grids import make_schedule, make_stepcount_schedule, schedule_from_text

    if spec == "default":
        return make_schedule(grid_h, grid_w, "center", 1)
    if spec.startswith("steps") and spec[5:].isdigit():
        return make_stepcount_schedule(grid_h, grid_w, int(spec[5:]))
    path = Path(spec)
    if not path.exists():
        raise UsageError(f"schedule {spec!r} is neither a preset nor a file")
    return schedule_from_text(path.read_text())


def _cmd_schedule(args) -> int:
    from .grids import make_schedule, make_stepcount_schedule, schedule_to_text

    h, w = args.grid
    if args.steps is not None:
        sched = make_stepcount_schedule(h, w, args.steps, args.anchor)
    else:
        sched = make_schedule(h, w, args.anchor, args.thickness)
    text = schedule_to_text(sched)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_mask(args) -> int:
    from .grids import layout_from_schedule, schedule_from_text
    from .masks import build_nested_mask

    sched = schedule_from_text(Path(args.schedule).read_text())
    mask = build_nested_mask(layout_from_schedule(sched), args.prefix_len,
                             interior_restriction=not args.block_causal)
    lines = ["".join("1" if v else "0" for v in row) for row in mask.dense()]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_train(args) -> int:
    from .bench import train_raster
    from .checkpoint import save_model
    from .config import load_run_setup
    from .model import RingTransformer
    from .synthetic import SyntheticSource, constant_source
    from .train import train_model

    setup = load_run_setup(Path(args.config).read_text())
    h, w = setup.model.max_grid
    if setup.source == "constant":
        src = constant_source(setup.model.vocab_size, h, w, setup.model.num_classes)
    else:
        src = SyntheticSource(setup.source, setup.model.vocab_size, h, w,
                              setup.model.num_classes)
    lines = []
    if args.raster:
        model = RingTransformer(
            type(setup.model)(**{**setup.model.__dict__, "max_steps": 1}))
        model.init_parameters(setup.train.seed)
        history = train_raster(model, src, setup.train)
        lines = [f"{i + 1}\t{loss:.6f}\t{loss:.6f}\t0.0\t0.0\t0.0"
                 for i, loss in enumerate(history)]
    else:
        model = RingTransformer(setup.model)
        model.init_parameters(setup.train.seed)
        history = train_model(model, src, setup.train, setup.schedule)
        lines = [m.log_line() for m in history]
    save_model(model, args.out, extra={"anchor": setup.schedule.anchor})
    if args.metrics:
        Path(args.metrics).write_text("\n".join(lines) + "\n")
    return 0


def _sampler_from(args):
    from .decode import SamplerConfig

    return SamplerConfig(temperature=args.temperature,
                         top_k=getattr(args, "top_k", None),
                         cfg_scale=getattr(args, "cfg_scale", None),
                         correction_mode=getattr(args, "correction", "greedy"),
                         seed=args.seed)


def _cmd_gen(args) -> int:
    from .checkpoint import load_model
    from .decode import decode

    model, _ = load_model(args.ckpt)
    h, w = model.cfg.max_grid
    sched = _load_schedule(args.schedule, h, w)
    grid, state = decode(model, args.class_id, sched, _sampler_from(args))
    Path(args.out).write_text(grid.to_text())
    if args.log_revisions:
        lines = [f"{r.step}\t{r.row}\t{r.col}\t{r.old}\t{r.new}"
                 for r in state.revision_log]
        Path(args.log_revisions).write_text("\n".join(lines) + ("\n" if lines else ""))
    return 0


def _known_from_rects(base_cells, rects, invert: bool):
    h, w = base_cells.shape
    inside = np.zeros((h, w), dtype=bool)
    for rect in rects:
        r0, c0, r1, c1 = _parse_rect(rect)
        if r1 > h or c1 > w:
            raise UsageError(f"rectangle {rect} exceeds the {h}x{w} grid")
        inside[r0:r1, c0:c1] = True
    keep = ~inside if invert else inside
    return {(int(r), int(c)): int(base_cells[r, c])
            for r, c in zip(*np.nonzero(keep))}


def _cmd_constrained(args, invert: bool) -> int:
    from .checkpoint import load_model
    from .decode import SamplerConfig, constrained_decode
    from .grids import TokenGrid

    model, _ = load_model(args.ckpt)
    h, w = model.cfg.max_grid
    base = TokenGrid.from_text(Path(args.base).read_text(), model.cfg.vocab_size)
    if (base.height, base.width) != (h, w):
        raise UsageError(f"base grid is {base.height}x{base.width}, model wants {h}x{w}")
    rects = args.keep if not invert else args.region
    known = _known_from_rects(base.cells, rects, invert)
    sched = _load_schedule(args.schedule, h, w)
    sampler = SamplerConfig(seed=args.seed)
    grid, _ = constrained_decode(model, args.class_id, sched, known, sampler)
    Path(args.out).write_text(grid.to_text())
    return 0


def _cmd_bench(args) -> int:
    from .bench import (BenchRow, ablation_suite, correction_stats, report_tsv,
                        speed_suite)

    rows = []
    if args.suite == "speed":
        if not args.ckpt or not args.raster_ckpt:
            raise UsageError("speed suite needs --ckpt and --raster-ckpt")
        from .checkpoint import load_model
        from .decode import SamplerConfig
        from .grids import make_schedule, make_stepcount_schedule

        model, _ = load_model(args.ckpt)
        raster_model, _ = load_model(args.raster_ckpt)
        h, w = model.cfg.max_grid
        schedules = {"default": make_schedule(h, w, "center", 1)}
        try:
            schedules["steps13"] = make_stepcount_schedule(h, w, 13)
        except Exception:
            pass  # small grids cannot stretch to 13 steps
        rows = speed_suite(model, raster_model, schedules,
                           SamplerConfig(seed=args.seed), n=args.n,
                           warmup=args.warmup)
    elif args.suite == "correction":
        if not args.ckpt:
            raise UsageError("correction suite needs --ckpt")
        from .checkpoint import load_model
        from .decode import SamplerConfig, decode
        from .grids import make_schedule
        from .synthetic import constant_source

        model, _ = load_model(args.ckpt)
        h, w = model.cfg.max_grid
        src = constant_source(model.cfg.vocab_size, h, w, model.cfg.num_classes)
        sched = make_schedule(h, w, "center", 1)
        states, truths = [], []
        rng = np.random.default_rng(args.seed)
        for i in range(args.n):
            cls = int(rng.integers(0, model.cfg.num_classes))
            truths.append(src.sample_grid(cls, rng))
            _, st = decode(model, cls, sched,
                           SamplerConfig(seed=args.seed + i, top_k=1))
            states.append(st)
        stats = correction_stats(states, truths)
        rows = [BenchRow(method="correction", steps=sched.num_steps,
                         revision_rate=stats["revision_rate"],
                         revision_benefit=stats["revision_benefit"])]
    else:
        from .model import ModelConfig
        from .synthetic import SyntheticSource
        from .train import TrainConfig

        h, w = args.grid
        model_cfg = ModelConfig(vocab_size=16, num_classes=4, dim=32,
                                num_layers=2, num_heads=2, max_grid=(h, w))
        train_cfg = TrainConfig(lr=1e-3, epochs=args.epochs, batch_size=8,
                                grids_per_epoch=args.grids_per_epoch,
                                seed=args.seed)
        results = ablation_suite(
            model_cfg, train_cfg,
            lambda: SyntheticSource("quantized_field", 16, h, w, 4),
            eval_grids=32, seeds=(args.seed, args.seed + 1, args.seed + 2))
        rows = results["rows"]
    Path(args.out).write_text(report_tsv(rows))
    return 0


def _cmd_tokenizer_train(args) -> int:
    from .synthetic import procedural_images
    from .vq import VqConfig, save_tokenizer, vq_train

    rng = np.random.default_rng(args.seed)
    imgs, _ = procedural_images(args.images, args.image_size, args.image_size,
                                8, rng)
    cfg = VqConfig(vocab_size=args.vocab_size, patch_size=args.patch_size,
                   epochs=args.epochs, seed=args.seed)
    tok, _ = vq_train(list(imgs), cfg, rng)
    save_tokenizer(tok, args.out)
    return 0


def _cmd_render(args) -> int:
    from .grids import TokenGrid
    from .imageio import palette_render, write_image

    if args.mode == "vq-decode":
        if not args.tokenizer:
            raise UsageError("vq-decode mode needs --tokenizer")
        from .vq import load_tokenizer, vq_decode

        tok = load_tokenizer(args.tokenizer)
        grid = TokenGrid.from_text(Path(args.grid).read_text(), tok.cfg.vocab_size)
        img = vq_decode(grid, tok)
    else:
        grid = TokenGrid.from_text(Path(args.grid).read_text(), args.vocab)
        img = palette_render(grid, scale=args.scale)
    write_image(args.out, img)
    return 0


_COMMANDS = {
    "schedule": _cmd_schedule,
    "mask": _cmd_mask,
    "train": _cmd_train,
    "gen": _cmd_gen,
    "outpaint": lambda a: _cmd_constrained(a, invert=False),
    "edit": lambda a: _cmd_constrained(a, invert=True),
    "bench": _cmd_bench,
    "tokenizer-train": _cmd_tokenizer_train,
    "render": _cmd_render,
}


def run(argv: list[str]) -> int:
    threads = os.environ.get("RADAR_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"radar: ignoring malformed RADAR_THREADS={threads!r}",
                  file=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"radar: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return 0 if not exc.code else 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"radar: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"radar: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
