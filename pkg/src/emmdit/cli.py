"""Command-line entry point: ``emmdit {train,sample,analyze,ablate,check}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import EmmditError


def _grid(text: str) -> tuple[int, int]:
    try:
        h, _, w = text.lower().partition("x")
        return int(h), int(w or h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 16x16, got {text!r}") from None


def cmd_train(args) -> int:
    from .harness.plotting import loss_figure
    from .harness.train import load_experiment, train

    exp = load_experiment(args.config)
    changes = {}
    for key in ("steps", "seed", "batch_size", "precision"):
        value = getattr(args, key)
        if value is not None:
            changes[key] = value
    if args.ema:
        changes["ema"] = True
    if args.checkpoint_every is not None:
        changes["checkpoint_every"] = args.checkpoint_every
    exp = exp.replace_train(**changes)
    out = Path(args.out)

    def echo(rec):
        if rec["step"] % max(1, args.print_every) == 0:
            print(f"step {rec['step']:>6}  rf_loss {rec['rf_loss']:.5f}  lr {rec['lr']:.2e}", flush=True)

    result = train(exp, out, resume=args.resume, callback=echo)
    if result.records:
        loss_figure(result.records, out / "loss.png")
    print(f"wrote {out / 'final.emdt'} and {out / 'train_log.jsonl'}")
    return 0


def cmd_sample(args) -> int:
    from . import diffusion as rf
    from .harness.images import write_png_grid
    from .harness.train import load_state
    from .numcore import checkpoint
    from .numcore.tensor import precision

    meta = json.loads(bytes(checkpoint.load(args.ckpt)["meta"]).decode("utf-8"))
    prec = args.precision or meta["experiment"]["train"]["precision"]
    with precision(prec):
        state = load_state(args.ckpt)
        if state.ema is not None and not args.no_ema:
            state.ema.copy_to(state.model)
        model, m = state.model, state.experiment.model
        n = args.count
        if args.caption is not None:
            cond = {"captions": [args.caption] * n}
            uncond = {"captions": [""] * n}
        else:
            labels = np.full(n, args.class_id) if args.class_id is not None else np.arange(n) % m.num_classes
            cond, uncond = {"labels": labels}, {"labels": model.null_labels(n)}
        cfg = rf.SamplerConfig(steps=args.steps, guidance_scale=args.guidance, seed=args.seed)
        x = rf.sample(rf.model_velocity(model), (n, m.in_channels, *m.image_size), cond, cfg, uncond=uncond)
    path = write_png_grid(x, args.out)
    print(f"wrote {path}")
    return 0


def cmd_analyze(args) -> int:
    from .analyzer import analyze
    from .config import load_config

    cfg = load_config(args.config)
    print(analyze(cfg, args.grid, as_json=args.json))
    return 0


def cmd_ablate(args) -> int:
    from .harness import ablation

    tables = list(ablation.TABLES) if args.table == "all" else [args.table]
    results = {t: ablation.run_ablation(t) for t in tables}
    if args.json:
        print(json.dumps({t: ablation.to_records(r) for t, r in results.items()}, indent=2))
    else:
        print("\n\n".join(ablation.render_text(t, r) for t, r in results.items()))
    if args.out:
        for path in ablation.write_report(results, args.out):
            print(f"wrote {path}", file=sys.stderr)
    return 0 if all(r.ok for rows in results.values() for r in rows) else 1


def cmd_check(args) -> int:
    from .harness.checks import CHECKS, run_checks

    names = args.only or list(CHECKS)
    unknown = sorted(set(names) - set(CHECKS))
    if unknown:
        print(f"unknown checks: {unknown}; available: {sorted(CHECKS)}", file=sys.stderr)
        return 2

    def show(res):
        print(f"{'PASS' if res.ok else 'FAIL'}  {res.name:<26} {res.detail}  ({res.seconds:.1f}s)", flush=True)

    results = run_checks(names, stop_on_failure=not args.keep_going, report=show)
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"first failing property: {failed[0]}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emmdit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on the procedural shapes dataset")
    t.add_argument("--config", default=None, help="experiment JSON, model config JSON or preset name")
    t.add_argument("--steps", type=int)
    t.add_argument("--out", default="runs/train")
    t.add_argument("--seed", type=int)
    t.add_argument("--ema", action="store_true")
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--precision", choices=("standard", "wide"))
    t.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--print-every", type=int, default=25, dest="print_every")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate a PNG grid from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--guidance", type=float, default=1.0)
    group = s.add_mutually_exclusive_group()
    group.add_argument("--class", type=int, dest="class_id")
    group.add_argument("--caption")
    s.add_argument("--count", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--precision", choices=("standard", "wide"))
    s.add_argument("--no-ema", action="store_true", dest="no_ema")
    s.add_argument("--out", default="samples.png")
    s.set_defaults(func=cmd_sample)

    a = sub.add_parser("analyze", help="parameter / FLOPs / token report")
    a.add_argument("--config", default="dit_l2")
    a.add_argument("--grid", type=_grid, default=None, help="token grid HxW (default: from the config)")
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("ablate", help="resource columns of the ablation tables")
    b.add_argument("--table", default="all", choices=("all", "ds", "blks", "pos", "asa", "adaln"))
    b.add_argument("--json", action="store_true")
    b.add_argument("--out", default=None, help="directory for ablation.csv and PNG figures")
    b.set_defaults(func=cmd_ablate)

    c = sub.add_parser("check", help="run the property suite")
    c.add_argument("--only", nargs="*", default=None)
    c.add_argument("--keep-going", action="store_true", dest="keep_going")
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (EmmditError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
