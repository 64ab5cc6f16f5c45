"""Command-line entry point: ``cresunet <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import ExitStack
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig, apply_values, load_config, parse_overrides
from .dataio import (
    DataError,
    FoldPlan,
    kfold_split,
    load_samples,
    read_gray,
    scan_dataset,
    synthetic_samples,
    write_png,
)
from .model import PARAM_BAND, CheckpointError, layer_table, load, param_count
from .preprocess import nlm_denoise, resize_bilinear, to_unit
from .tensor_core import ShapeError

log = logging.getLogger("cresunet")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_CHECKPOINT = 5
EXIT_DATA = 6
EXIT_GRADCHECK = 7
EXIT_TRAINING = 8

EPILOG = f"""\
exit codes:
  {EXIT_OK}  success
  {EXIT_INTERNAL}  unexpected internal error
  {EXIT_USAGE}  bad command-line usage
  {EXIT_MISSING}  input file or directory missing
  {EXIT_CONFIG}  malformed or invalid config
  {EXIT_CHECKPOINT}  unreadable checkpoint, or checkpoint/spec mismatch
  {EXIT_DATA}  dataset problem (missing mask, bad fold plan, train/test leakage)
  {EXIT_GRADCHECK}  gradient check failed
  {EXIT_TRAINING}  training diverged (non-finite loss)

environment:
  CRESUNET_THREADS   cap BLAS/OpenMP threads (default: library default)
  CRESUNET_FLOAT64   set to 1 for 64-bit tensors (grad checks use h=1e-6)
  CRESUNET_BREAK_OP  comma-separated op names whose backward is deliberately
                     corrupted; a negative control for `gradcheck`
"""


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _need(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(EXIT_MISSING, f"{what} not found: {p}")
    return p


def _config(args) -> RunConfig:
    path = _need(args.config, "config") if getattr(args, "config", None) else None
    return load_config(path, getattr(args, "set", None) or (), getattr(args, "full", False))


def _load_data(cfg: RunConfig, plan_path: str | Path | None = None):
    """Samples at the configured input size plus the fold plan."""
    size = (cfg.train.input_size, cfg.train.input_size)
    d = cfg.data
    if d.root:
        records = [r for r in scan_dataset(_need(d.root, "dataset root")) if r.cls in d.classes]
        if not records:
            raise DataError(f"no samples of classes {','.join(d.classes)} under {d.root}")
        samples = load_samples(records, size)
    elif d.synthetic > 0:
        classes = [c for c in d.classes if c != "normal"] or list(d.classes)
        samples = records = synthetic_samples(d.synthetic, cfg.train.input_size, seed=d.split_seed, classes=classes)
    else:
        raise ConfigError("set data.root to a dataset directory or data.synthetic to a sample count")
    plan_path = plan_path or d.fold_plan
    plan = FoldPlan.load(_need(plan_path, "fold plan")) if plan_path else kfold_split(records, d.k, d.split_seed, d.stratified)
    return samples, plan


def _fold(plan: FoldPlan, fold: int) -> int:
    if not 0 <= fold < plan.k:
        raise CliError(EXIT_USAGE, f"--fold {fold} out of range for a {plan.k}-fold plan")
    return fold


# ---------------------------------------------------------------------------
# commands


def cmd_split(args) -> int:
    records = scan_dataset(_need(args.data, "dataset root"))
    if not records:
        raise DataError(f"no samples found under {args.data}")
    plan = kfold_split(records, args.k, args.seed, not args.no_stratify)
    plan.save(args.out)
    counts = {f: len(ids) for f, ids in enumerate(plan.folds)}
    print(f"wrote {args.out}: {len(records)} records in {plan.k} folds {counts}")
    return EXIT_OK


def _example_figure(model, sample, path, threshold: float) -> None:
    from .plots import plot_prediction

    prob = model.predict(sample.image[None, None].astype(np.float32))[0, 0]
    plot_prediction(sample.image, prob, sample.mask, path, threshold)


def cmd_train(args) -> int:
    from .train import evaluate, train, write_fold_outputs

    cfg = _config(args)
    samples, plan = _load_data(cfg)
    fold = _fold(plan, args.fold)
    out = Path(args.out or cfg.data.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "fold_plan.tsv")
    (out / "config.ini").write_text(cfg.to_text())
    t0 = time.perf_counter()
    res = train(cfg.train, cfg.spec, samples, plan, fold, checkpoint_dir=out)
    by_id = {s.sample_id: s for s in samples}
    test = [by_id[i] for i in plan.test_ids(fold)]
    report = evaluate(res.model, test, cfg.train, fold, res.audit)
    ckpt = write_fold_outputs(out, res, report, cfg.train, samples, {"config": cfg.to_dict(), "fold_plan": "fold_plan.tsv"})
    if test:
        _example_figure(res.model, test[0], out / f"fold{fold}.example.png", cfg.train.threshold)
    print(report.to_text())
    print(f"checkpoint {ckpt} (best epoch {res.history.best_epoch + 1}, {time.perf_counter() - t0:.1f}s)")
    return EXIT_OK


def cmd_cv(args) -> int:
    from .train import cross_validate

    cfg = _config(args)
    samples, plan = _load_data(cfg)
    folds = [_fold(plan, int(f)) for f in args.folds.split(",")] if args.folds else None
    out = Path(args.out or cfg.data.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan.save(out / "fold_plan.tsv")
    (out / "config.ini").write_text(cfg.to_text())
    result = cross_validate(cfg.train, cfg.spec, samples, plan, folds, out)
    print(result.report.to_text())
    return EXIT_OK


def _manifest_config(ckpt: Path) -> RunConfig | None:
    manifest = ckpt.with_suffix(".manifest.json")
    if not manifest.exists():
        return None
    data = json.loads(manifest.read_text())
    return apply_values(RunConfig(), data["config"]) if "config" in data else None


def cmd_eval(args) -> int:
    from .plots import plot_cv_summary
    from .train import evaluate

    ckpt = _need(args.checkpoint, "checkpoint")
    cfg = _config(args) if args.config else _manifest_config(ckpt)
    if cfg is None:
        raise ConfigError(f"no --config given and no manifest next to {ckpt}")
    if args.set and not args.config:
        cfg = apply_values(cfg, parse_overrides(args.set))
    plan_path = args.plan or (ckpt.parent / "fold_plan.tsv" if (ckpt.parent / "fold_plan.tsv").exists() else None)
    samples, plan = _load_data(cfg, plan_path)
    fold = _fold(plan, args.fold)
    model = load(ckpt, expected_spec=cfg.spec)
    audit_file = ckpt.parent / f"fold{fold}.train_ids.txt"
    audit = set(audit_file.read_text().split()) if audit_file.exists() else None
    if audit is None:
        log.warning("no training audit log at %s; leakage check skipped", audit_file)
    by_id = {s.sample_id: s for s in samples}
    test = [by_id[i] for i in plan.test_ids(fold) if i in by_id]
    train_cfg = cfg.train
    if args.denoise_test:
        import dataclasses

        train_cfg = dataclasses.replace(train_cfg, denoise_test=True)
    report = evaluate(model, test, train_cfg, fold, audit)
    out = Path(args.out or ckpt.parent)
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"eval_fold{fold}"
    stem.with_suffix(".metrics.txt").write_text(report.to_text())
    stem.with_suffix(".metrics.csv").write_text(report.image_rows_csv())
    plot_cv_summary(report, stem.with_suffix(".summary.png"))
    print(report.to_text())
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load(_need(args.checkpoint, "checkpoint"))
    raw = to_unit(read_gray(_need(args.image, "image")))
    if args.denoise:
        raw = nlm_denoise(raw)
    h, w = model.spec.input_size
    x = resize_bilinear(raw, h, w)
    prob = model.predict(x[None, None].astype(np.float32))[0, 0]
    prob = np.clip(resize_bilinear(prob, *raw.shape), 0.0, 1.0)
    mask = prob >= args.threshold
    write_png(args.out, (mask * 255).astype(np.uint8))
    if args.prob:
        write_png(args.prob, prob)
    if args.figure:
        from .plots import plot_prediction

        plot_prediction(raw, prob, None, args.figure, args.threshold)
    print(f"wrote {args.out}: {raw.shape[0]}x{raw.shape[1]} mask, {int(mask.sum())} foreground pixels")
    return EXIT_OK


def cmd_denoise(args) -> int:
    img = to_unit(read_gray(_need(args.input, "image")))
    try:
        out = nlm_denoise(img, args.h, args.patch, args.window, args.sigma)
    except ValueError as e:
        raise CliError(EXIT_USAGE, str(e)) from None
    write_png(args.out, out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .model import build

    cfg = _config(args)
    model = build(cfg.spec, seed=cfg.train.seed)
    rows = layer_table(model)
    print(f"{'layer':<20} {'kind':<30} {'input (C,H,W)':<18} {'output (C,H,W)':<18} {'params':>10}")
    for r in rows:
        print(f"{r.name:<20} {r.kind:<30} {str(r.in_shape):<18} {str(r.out_shape):<18} {r.params:>10,}")
    total = param_count(model)
    lo, hi = PARAM_BAND
    status = "within" if lo <= total <= hi else "OUTSIDE"
    print(f"total trainable parameters: {total:,} ({total / 1e6:.2f}M, {status} band [{lo / 1e6:.1f}M, {hi / 1e6:.1f}M])")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import ALL_CHECKS, run_suite

    names = args.op.split(",") if args.op else None
    for n in names or []:
        if n not in ALL_CHECKS:
            raise CliError(EXIT_USAGE, f"unknown op {n!r}; choose from {', '.join(ALL_CHECKS)}")
    failed = 0
    for r in run_suite(names, cases=args.cases, seed=args.seed):
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.name:<16} worst_rel_err={r.worst:.3e} tol={r.tol:.0e} cases={r.cases} {status}")
    return EXIT_GRADCHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--config", required=required, help="INI config with [model], [train], [data] sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
    p.add_argument("--full", action="store_true", help="full profile: 256x256 inputs, 200 epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cresunet",
        description="Breast-ultrasound lesion segmentation network: training, evaluation and tooling.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("split", help="write a k-fold plan for a dataset directory")
    p.add_argument("--data", required=True, help="dataset root with benign/ malignant/ normal/")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="fold plan file to write")
    p.add_argument("--no-stratify", action="store_true", help="plain shuffled folds")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one fold and evaluate it on its test split")
    _add_config_flags(p, required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--out", help="run directory (default: data.out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="train and evaluate every fold; aggregate across folds")
    _add_config_flags(p, required=True)
    p.add_argument("--folds", help="comma-separated subset of folds")
    p.add_argument("--out", help="run directory (default: data.out_dir)")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test fold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--config", help="config (default: the manifest next to the checkpoint)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--plan", help="fold plan (default: fold_plan.tsv next to the checkpoint)")
    p.add_argument("--denoise-test", action="store_true", help="despeckle test images before inference")
    p.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="binary mask PNG")
    p.add_argument("--prob", help="also write the probability map as PNG")
    p.add_argument("--figure", help="also write an overlay figure")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--denoise", action="store_true", help="despeckle before inference")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("denoise", help="non-local-means despeckling of one image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--h", type=float, default=0.1)
    p.add_argument("--patch", type=int, default=7)
    p.add_argument("--window", type=int, default=21)
    p.add_argument("--sigma", type=float, default=0.0)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("inspect", help="layer table and parameter count")
    _add_config_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--op", help="comma-separated check names (default: all)")
    p.add_argument("--cases", type=int, default=5, help="random cases per check")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _thread_limit(stack: ExitStack) -> None:
    value = os.environ.get("CRESUNET_THREADS")
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise CliError(EXIT_USAGE, f"CRESUNET_THREADS must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    stack.enter_context(threadpool_limits(limits=max(1, n)))


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    from .model import SpecMismatchError
    from .train import LeakageError, TrainingError

    try:
        with ExitStack() as stack:
            _thread_limit(stack)
            return args.func(args)
    except CliError as e:
        msg, code = str(e), e.code
    except FileNotFoundError as e:
        msg, code = f"file not found: {e.filename}", EXIT_MISSING
    except ConfigError as e:
        msg, code = f"config: {e}", EXIT_CONFIG
    except (CheckpointError, SpecMismatchError) as e:
        msg, code = f"checkpoint: {e}", EXIT_CHECKPOINT
    except (DataError, LeakageError) as e:
        msg, code = f"data: {e}", EXIT_DATA
    except TrainingError as e:
        msg, code = f"training: {e}", EXIT_TRAINING
    except ShapeError as e:
        msg, code = f"shape: {e}", EXIT_CONFIG
    print(f"cresunet {args.command}: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
