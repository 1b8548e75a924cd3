"""Command-line entry point.

Subcommands: dataset build|split, noise synth, train, ablate, eval, sweep,
panels, gradcheck. JSON configs with --set dot.path=value overrides; logs go
to stderr, machine artifacts to files. Exit codes: 0 success, 1 validation
error, 2 runtime failure. COARSESEG_OUT_ROOT prefixes relative output paths.
Existing outputs are never overwritten unless --force is given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import zlib
from pathlib import Path

import numpy as np


class CliValidationError(ValueError):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _out_path(p: str) -> Path:
    root = os.environ.get("COARSESEG_OUT_ROOT")
    path = Path(p)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _refuse_existing(path: Path, force: bool, what: str) -> None:
    if path.exists() and not force:
        raise CliValidationError(
            f"{what} already exists at {path}; pass --force to overwrite"
        )


def _apply_set(cfg: dict, assignments) -> dict:
    for item in assignments or []:
        if "=" not in item:
            raise CliValidationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return cfg


def _load_config(path: str, assignments) -> dict:
    p = Path(path)
    if not p.exists():
        raise CliValidationError(f"config file not found: {path}")
    return _apply_set(json.loads(p.read_text()), assignments)


def _sample_seed(seed: int, sid: str, level: int) -> int:
    return (seed * 1000003 + zlib.crc32(f"{sid}:{level}".encode())) % (2**31)


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_dataset_build(args) -> int:
    from . import datasets as D

    out = _out_path(args.out)
    _refuse_existing(out / "manifest.json", args.force, "dataset")
    if args.source == "digits":
        raw = D.synth_digit_images(args.count, args.seed, subset=args.subset)
    elif args.source == "mnist":
        if not args.raw_dir:
            raise CliValidationError("--source mnist requires --raw-dir with IDX files")
        raw = D.mnist_digit_images(args.raw_dir, subset=args.subset, count=args.count)
    else:
        raise CliValidationError(f"unknown source {args.source!r}")
    ds = D.build_mnist_seg(raw, mode=args.mode, threshold=args.threshold)
    ds.split_tag = args.subset if args.subset in ("train", "test") else "train"
    summary = D.save_dataset(ds, out)
    _log(f"built {summary['num_samples']} samples (L={summary['num_classes']}) -> {out}")
    return 0


def _cmd_dataset_split(args) -> int:
    from . import datasets as D

    ds = D.load_dataset(args.inp)
    fractions = [float(f) for f in args.fractions.split(",")]
    parts = D.split(ds, fractions, args.seed)
    for part in parts:
        out = _out_path(args.out_root or f"{args.inp}_{part.split_tag}")
        if args.out_root:
            out = out / part.split_tag
        _refuse_existing(out / "manifest.json", args.force, "dataset split")
        D.save_dataset(part, out)
        _log(f"split {part.split_tag}: {len(part.samples)} samples -> {out}")
    return 0


def _cmd_noise_synth(args) -> int:
    from . import datasets as D
    from . import noise as N

    ds = D.load_dataset(args.inp)
    level = args.level
    if not 1 <= level <= 5:
        raise CliValidationError("--level must be in 1..5")
    src = f"synthL{level}"
    out = _out_path(args.out or args.inp)
    for s in ds.samples:
        if any((cm.source or "") == src for cm in s.pos_coarse) and not args.force:
            raise CliValidationError(
                f"source {src} already present (sample {s.id}); pass --force to regenerate"
            )
    plvl, nlvl = N.POSITIVE_LEVELS[level], N.NEGATIVE_LEVELS[level]
    for s in ds.samples:
        if args.target_class == "auto":
            fg = s.gt_label[(s.gt_label != D.IGNORE) & (s.gt_label != 0)]
            cls = int(fg.max()) if fg.size else 1
        else:
            cls = int(args.target_class)
            if cls >= ds.space.num_classes:
                raise CliValidationError(f"--target-class {cls} out of range")
        sd = _sample_seed(args.seed, s.id, level)
        pos = N.synth_positive_coarse(s.gt_label == cls, plvl, sd, object_class=cls)
        neg = N.synth_negative_coarse(
            s.gt_label, cls, nlvl, sd + 1, num_classes=ds.space.num_classes
        )
        pos.source = src
        neg.source = src
        s.pos_coarse = [cm for cm in s.pos_coarse if (cm.source or "") != src] + [pos]
        s.neg_coarse = [cm for cm in s.neg_coarse if (cm.source or "") != src] + [neg]
    D.save_dataset(ds, out)
    _log(f"synthesized level-{level} coarse maps for {len(ds.samples)} samples -> {out}")
    return 0


def _cmd_train(args) -> int:
    from . import train as T

    cfg_d = _load_config(args.config, args.set)
    cfg_d["out_dir"] = str(_out_path(cfg_d["out_dir"]))
    cfg = T.TrainConfig.from_dict(cfg_d)
    if args.resume:
        art = T.resume(args.resume, cfg)
    else:
        _refuse_existing(Path(cfg.out_dir) / "metrics.jsonl", args.force, "run output")
        art = T.train(cfg)
    _log(f"run complete; report at {art.report_path}")
    return 0


def _cmd_ablate(args) -> int:
    from . import train as T

    cfg_d = _load_config(args.config, args.set)
    cfg_d["out_dir"] = str(_out_path(cfg_d["out_dir"]))
    cfg = T.TrainConfig.from_dict(cfg_d)
    _refuse_existing(Path(cfg.out_dir) / "ablation.json", args.force, "ablation output")
    seeds = [int(s) for s in args.seeds.split(",")]
    result = T.ablation_suite(cfg, seeds=seeds)
    print(f"{'arm':<14}{'mean mIoU':>10}{'std':>8}  per-seed")
    for arm, row in result["arms"].items():
        per = ", ".join(f"{v:.4f}" for v in row["per_seed"])
        print(f"{arm:<14}{row['mean']:>10.4f}{row['std']:>8.4f}  [{per}]")
    return 0


def _cmd_eval(args) -> int:
    from . import datasets as D
    from . import evaluate as E

    ds = D.load_dataset(args.data)
    report = E.evaluate(args.checkpoint, ds)
    outp = _out_path(args.report)
    _refuse_existing(outp, args.force, "report")
    outp.parent.mkdir(parents=True, exist_ok=True)
    outp.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    _log(f"mIoU={report.miou:.4f} over {len(report.per_image_miou)} images -> {outp}")
    return 0


def _cmd_sweep(args) -> int:
    from . import evaluate as E
    from . import train as T

    cfg_d = _load_config(args.config, args.set)
    cfg_d["out_dir"] = str(_out_path(cfg_d["out_dir"]))
    cfg = T.TrainConfig.from_dict(cfg_d)
    _refuse_existing(Path(cfg.out_dir) / "sweep.json", args.force, "sweep output")
    levels = [int(x) for x in args.levels.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    result = E.sensitivity_sweep(cfg, levels, seeds=seeds)
    print(f"{'level':<7}{'mean mIoU':>10}{'std':>8}")
    for level in sorted(result["levels"], key=int):
        row = result["levels"][level]
        print(f"{level:<7}{row['mean']:>10.4f}{row['std']:>8.4f}")
    return 0


def _cmd_panels(args) -> int:
    from . import datasets as D
    from . import evaluate as E

    ds = D.load_dataset(args.data)
    try:
        sample = ds.by_id(args.sample)
    except KeyError:
        raise CliValidationError(f"sample id {args.sample!r} not in {args.data}")
    outp = _out_path(args.out)
    _refuse_existing(outp, args.force, "panel file")
    E.export_panels(args.checkpoint, sample, outp)
    _log(f"panel grid -> {outp}")
    return 0


def _cmd_gradcheck(args) -> int:
    from . import loss as Lo

    eps = args.eps if args.eps is not None else (1e-5 if args.dtype == "float64" else 3e-3)
    f, tensors = Lo.toy_loss_evaluator(
        L=args.classes, size=args.size, batch=args.batch, dtype=args.dtype,
        seed=args.seed, lam=args.lam,
    )
    err = Lo.grad_check(f, tensors, eps=eps, num_samples=args.samples, seed=args.seed)
    print(f"max_rel_err={err:.3e} threshold={args.threshold:.3e} dtype={args.dtype}")
    if err < args.threshold:
        _log("gradcheck PASS")
        return 0
    _log("gradcheck FAIL: threshold exceeded")
    return 1


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="coarseseg",
        description="Segmentation from noisy positive/negative coarse annotations.",
    )
    sub = ap.add_subparsers(dest="command")

    ds = sub.add_parser("dataset", help="build or split datasets")
    dsub = ds.add_subparsers(dest="dataset_command")
    b = dsub.add_parser("build", help="build a digit segmentation dataset")
    b.add_argument("--source", choices=["digits", "mnist"], default="digits")
    b.add_argument("--mode", choices=["binary", "multiclass"], default="binary")
    b.add_argument("--threshold", type=float, default=0.5)
    b.add_argument("--out", required=True)
    b.add_argument("--count", type=int, default=1000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--subset", choices=["train", "test", "all"], default="train")
    b.add_argument("--raw-dir", default=None, help="directory with MNIST IDX files")
    b.add_argument("--force", action="store_true")
    b.set_defaults(func=_cmd_dataset_build)
    sp = dsub.add_parser("split", help="split a dataset into parts")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--fractions", required=True, help="comma list summing to 1")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-root", default=None)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=_cmd_dataset_split)

    nz = sub.add_parser("noise", help="synthesize coarse noisy annotations")
    nsub = nz.add_subparsers(dest="noise_command")
    syn = nsub.add_parser("synth", help="add synthL{K} coarse sources to a dataset")
    syn.add_argument("--in", dest="inp", required=True)
    syn.add_argument("--level", type=int, required=True)
    syn.add_argument("--seed", type=int, default=0)
    syn.add_argument("--target-class", default="auto")
    syn.add_argument("--out", default=None, help="defaults to --in (in place)")
    syn.add_argument("--force", action="store_true")
    syn.set_defaults(func=_cmd_noise_synth)

    tr = sub.add_parser("train", help="train per a JSON config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--resume", default=None, help="checkpoint path to continue from")
    tr.add_argument("--set", action="append", help="override config values (dot.path=value)")
    tr.add_argument("--force", action="store_true")
    tr.set_defaults(func=_cmd_train)

    abl = sub.add_parser("ablate", help="full / w.o-negative / naive ablation")
    abl.add_argument("--config", required=True)
    abl.add_argument("--seeds", default="0,1,2")
    abl.add_argument("--set", action="append")
    abl.add_argument("--force", action="store_true")
    abl.set_defaults(func=_cmd_ablate)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", required=True)
    ev.add_argument("--force", action="store_true")
    ev.set_defaults(func=_cmd_eval)

    sw = sub.add_parser("sweep", help="annotation-quality sensitivity sweep")
    sw.add_argument("--config", required=True)
    sw.add_argument("--levels", default="1,2,3,4,5")
    sw.add_argument("--seeds", default="0,1,2")
    sw.add_argument("--set", action="append")
    sw.add_argument("--force", action="store_true")
    sw.set_defaults(func=_cmd_sweep)

    pn = sub.add_parser("panels", help="export the diagnostic panel grid")
    pn.add_argument("--checkpoint", required=True)
    pn.add_argument("--data", required=True)
    pn.add_argument("--sample", required=True)
    pn.add_argument("--out", required=True)
    pn.add_argument("--force", action="store_true")
    pn.set_defaults(func=_cmd_panels)

    gc = sub.add_parser("gradcheck", help="finite-difference check of loss gradients")
    gc.add_argument("--dtype", choices=["float64", "float32"], default="float64")
    gc.add_argument("--eps", type=float, default=None)
    gc.add_argument("--threshold", type=float, default=1e-4)
    gc.add_argument("--samples", type=int, default=50)
    gc.add_argument("--classes", type=int, default=2)
    gc.add_argument("--size", type=int, default=4)
    gc.add_argument("--batch", type=int, default=2)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--lam", type=float, default=0.01)
    gc.set_defaults(func=_cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        ap.print_usage(sys.stderr)
        return 1
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        # argparse exits 0 for --help, 2 for usage errors (mapped to validation)
        return 0 if e.code == 0 else 1
    func = getattr(args, "func", None)
    if func is None:
        ap.print_usage(sys.stderr)
        return 1
    try:
        return func(args)
    except BrokenPipeError:
        return 2
    except (CliValidationError,) as e:
        _log(f"error[validation]: {e}")
        return 1
    except Exception as e:  # noqa: BLE001
        from .datasets import DatasetError
        from .loss import GradCheckError
        from .noise import UndefinedRatioError

        validation_types = (DatasetError, UndefinedRatioError, ValueError, KeyError,
                            FileNotFoundError)
        if isinstance(e, GradCheckError):
            _log(f"error[runtime]: {e}")
            return 2
        if isinstance(e, validation_types):
            _log(f"error[validation]: {e}")
            return 1
        _log(f"error[runtime]: {type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
