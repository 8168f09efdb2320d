"""``speednet`` command line: train, eval, predict, params, gradcheck, synth.

Exit codes: 0 success, 2 configuration error, 3 I/O or data error,
4 numerical failure (non-finite values, failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from speednet import checkpoint as ckpt
from speednet import gradcheck
from speednet.config import load_config, parse_config
from speednet.data import (DataError, SampleDataset, SplitSpec, read_image, scan_dataset,
                           split, synth_dataset, to_tensors, write_dataset)
from speednet.losses import aggregate, format_report, report_csv
from speednet.model import VARIANTS, ConfigError, SpeedNetConfig, build, count_parameters
from speednet.training import NumericalError, evaluate, predict, train

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("speednet")


def _overrides(extra: list[str]) -> dict[str, str]:
    """Turn ``--key value`` / ``--key=value`` leftovers into config overrides."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for {tok}")
            value = extra[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


def cmd_train(args, extra) -> int:
    overrides = _overrides(extra)
    cfg = load_config(args.config, overrides) if args.config else parse_config("", overrides)
    if not cfg.data_root:
        raise ConfigError("config key 'data_root' is required")
    log.info("resolved config:\n%s", cfg.to_text())
    result = train(cfg, resume_from=args.resume)
    last = result.history[-1] if result.history else None
    if last:
        print(f"epoch {last['epoch']}: loss {last['train_loss']:.6f} dice {last['dice']:.4f}")
    for tag, report in result.test_reports.items():
        print(f"test split ({tag} checkpoint)")
        print(format_report(report))
    print(f"checkpoint: {cfg.checkpoint_out}")
    return EXIT_OK


def _run_config(data: ckpt.CheckpointData):
    text = data.meta.get("run_config")
    return parse_config(text) if text else None


def _eval_samples(args, data):
    cfg = _run_config(data)
    root = args.data or (cfg.data_root if cfg else "")
    if not root:
        raise ConfigError("no --data given and the checkpoint records no data_root")
    index = scan_dataset(root)
    cls = args.class_name if args.class_name is not None else (cfg.class_name if cfg else "")
    if cls:
        if cls not in index.samples:
            raise DataError(f"class {cls!r} not found under {root}")
        index.samples = {cls: index.samples[cls]}
    if args.split == "all":
        return index.all_samples()
    fraction = cfg.train_fraction if cfg else 0.8
    seed = cfg.seed if cfg else 0
    tr, te = split(index, SplitSpec(fraction, seed))
    return tr if args.split == "train" else te


def cmd_eval(args, extra) -> int:
    model, data = ckpt.load_checkpoint(args.checkpoint)
    samples = _eval_samples(args, data)
    if not samples:
        raise DataError(f"the {args.split} split is empty")
    dataset = SampleDataset(samples)
    per_image, _ = evaluate(model, dataset, args.batch_size)
    report = aggregate(per_image, dataset.class_labels)
    print(format_report(report))
    csv_path = Path(args.csv or str(args.checkpoint) + f".{args.split}.csv")
    csv_path.write_text(report_csv(report))
    print(f"csv: {csv_path}")
    return EXIT_OK


def cmd_predict(args, extra) -> int:
    model, _ = ckpt.load_checkpoint(args.checkpoint)
    size = model.config.img_size
    img = read_image(args.input, "RGB")
    if img.shape[:2] != (size, size):
        if not args.resize:
            raise DataError(f"{args.input} is {img.shape[1]}x{img.shape[0]}, the model expects "
                            f"{size}x{size}; pass --resize to rescale it")
        img = np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))
    x, _ = to_tensors(img[None], np.zeros((1, size, size), dtype=np.uint8))
    probs = predict(model, x)[0, 0]
    mask = np.where(probs > 0.5, 255, 0).astype(np.uint8)
    Image.fromarray(mask, "L").save(args.output)
    print(f"mask: {args.output} ({int((mask > 0).sum())} foreground pixels)")
    return EXIT_OK


def cmd_params(args, extra) -> int:
    variants = [args.variant] if args.variant else list(VARIANTS)
    base = SpeedNetConfig(img_size=args.img_size)
    reports = {}
    for v in variants:
        cfg = SpeedNetConfig.from_dict({**base.to_dict(), "variant": v})
        reports[v] = count_parameters(build(cfg))
    for v, r in reports.items():
        print(f"[{v}]")
        for name, n in r.per_module.items():
            print(f"  {name:<12}{n:>12,}")
        print(f"  {'trainable':<12}{r.trainable:>12,}")
        print(f"  {'with stats':<12}{r.total_with_stats:>12,}")
        print(f"  {'size (f32)':<12}{r.bytes32:>12,} bytes ({r.bytes32 / 2**20:.2f} MiB)")
    if "full" in reports and "no-involution" in reports:
        ratio = reports["no-involution"].trainable / reports["full"].trainable
        print(f"no-involution / full = {ratio:.3f}")
    return EXIT_OK


def cmd_gradcheck(args, extra) -> int:
    seeds = range(args.seeds)

    def run():
        return gradcheck.run_suite(seeds, model=not args.no_model)

    if args.mutate:
        with gradcheck.flip_sign(args.mutate):
            results = run()
    else:
        results = run()
    failed = []
    for r in results:
        status = "ok  " if r.passed else "FAIL"
        print(f"{status} {r.name:<18} max_rel_err {r.max_error:.3e} (tol {r.tol:.0e}) "
              f"{r.seconds:6.2f}s  worst at {r.where}")
        if not r.passed:
            failed.append(r.name)
    total = sum(r.seconds for r in results)
    if failed:
        print(f"gradient check FAILED: {', '.join(failed)} ({total:.1f}s)")
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed ({total:.1f}s)")
    return EXIT_OK


def cmd_synth(args, extra) -> int:
    ds = synth_dataset(args.n, args.size, args.seed)
    base = write_dataset(ds, args.out)
    print(f"wrote {args.n} image/label pairs to {base}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speednet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a config file; any config key may be "
                                     "overridden as --key value")
    t.add_argument("--config")
    t.add_argument("--resume", help="continue from a checkpoint written by a previous run")
    t.set_defaults(func=cmd_train, extra_ok=True)

    e = sub.add_parser("eval", help="per-class and overall metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset root (default: the one recorded in the checkpoint)")
    e.add_argument("--class", dest="class_name")
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.add_argument("--csv", help="CSV output path (default: <checkpoint>.<split>.csv)")
    e.add_argument("--batch-size", type=int, default=4)
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write a binary mask PNG for one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True)
    pr.add_argument("--output", required=True)
    pr.add_argument("--resize", action="store_true", help="rescale the input to the model size")
    pr.set_defaults(func=cmd_predict)

    pa = sub.add_parser("params", help="parameter counts and checkpoint sizes per variant")
    pa.add_argument("--variant", choices=VARIANTS)
    pa.add_argument("--img-size", type=int, default=224)
    pa.set_defaults(func=cmd_params)

    g = sub.add_parser("gradcheck", help="64-bit finite-difference check of every backward")
    g.add_argument("--seeds", type=int, default=5)
    g.add_argument("--no-model", action="store_true", help="skip the end-to-end model check")
    g.add_argument("--mutate", choices=sorted(gradcheck.BACKWARDS), help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic dataset of ellipses")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and not getattr(args, "extra_ok", False):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DataError, ckpt.CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
